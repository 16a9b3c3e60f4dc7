// ospo: object-centric self-improving preference-pair pipeline CLI.
//
// Stages run over a persistent JSONL manifest and are resumable: completed
// (stage, sample) pairs are skipped, so re-running a finished stage is a
// no-op. Exit codes: 0 ok, 2 config error, 3 backend failure, 4 validation
// violations.

#include <cmath>
#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ospo/ospo.hpp"

namespace {

int exit_code_for(const ospo::Error& e) {
  switch (e.code()) {
    case ospo::ErrorCode::Config:
    case ospo::ErrorCode::ConfigMismatch:
      return 2;
    case ospo::ErrorCode::BackendUnavailable:
    case ospo::ErrorCode::RemoteRejected:
    case ospo::ErrorCode::Timeout:
      return 3;
    default:
      return 1;
  }
}

void print_summary(const ospo::StageSummary& s) {
  std::printf("stage %-8s processed=%zu skipped=%zu discarded=%zu\n", s.stage.c_str(),
              s.processed, s.skipped, s.discarded);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OSPO preference-pair construction and optimization pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  int workers = 0;
  bool resume = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "pipeline config JSON")->required();
    cmd->add_option("--workers", workers, "worker thread cap (overrides config)");
    cmd->add_flag("--resume", resume, "resume a previous run (stages are resumable by default)");
  };

  std::vector<std::string> stage_cmds = {"prompts", "perturb", "densify", "images",
                                         "score",   "select",  "train",   "analyze"};
  std::map<std::string, CLI::App*> stage_apps;
  for (const auto& name : stage_cmds) {
    CLI::App* cmd = app.add_subcommand(name, "run the " + name + " stage");
    add_common(cmd);
    stage_apps[name] = cmd;
  }
  CLI::App* all_cmd = app.add_subcommand("run", "run all stages in order");
  add_common(all_cmd);
  CLI::App* report_cmd = app.add_subcommand("report", "emit the report bundle");
  add_common(report_cmd);
  CLI::App* validate_cmd = app.add_subcommand("validate", "check manifest invariants");
  add_common(validate_cmd);
  CLI::App* compare_cmd =
      app.add_subcommand("compare", "head-to-head best-of-n vs perturbation pairing");
  add_common(compare_cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    ospo::PipelineConfig config = ospo::load_config(config_path);
    if (workers > 0) config.workers = workers;
    (void)resume;

    for (const auto& name : stage_cmds) {
      if (stage_apps[name]->parsed()) {
        ospo::Pipeline pipeline(config);
        print_summary(pipeline.run_stage(name));
        return 0;
      }
    }
    if (all_cmd->parsed()) {
      ospo::Pipeline pipeline(config);
      for (const auto& summary : pipeline.run_all()) print_summary(summary);
      return 0;
    }
    if (report_cmd->parsed()) {
      ospo::Manifest manifest(config.manifest_path());
      std::string md = ospo::emit_report(config, manifest);
      std::cout << md;
      return 0;
    }
    if (validate_cmd->parsed()) {
      ospo::Manifest manifest(config.manifest_path());
      if (!manifest.exists()) throw ospo::StageIncomplete("no manifest at " +
                                                          config.manifest_path().string());
      auto violations = ospo::validate_manifest(manifest, &config);
      for (const auto& v : violations) {
        std::printf("violation [%s]%s: %s\n", v.rule.c_str(),
                    v.sample_id ? (" sample " + std::to_string(*v.sample_id)).c_str() : "",
                    v.message.c_str());
      }
      std::printf("%zu violation(s)\n", violations.size());
      return violations.empty() ? 0 : 4;
    }
    if (compare_cmd->parsed()) {
      ospo::Pipeline pipeline(config);
      ospo::KeywordPools pools = pipeline.pools();
      std::vector<ospo::StructuredPrompt> prompts;
      for (ospo::Category cat : ospo::all_categories()) {
        std::size_t count = config.category_counts[static_cast<std::size_t>(cat)];
        if (count == 0) continue;
        auto batch = ospo::generate_base_prompts(cat, count, pools, config.seed);
        prompts.insert(prompts.end(), batch.begin(), batch.end());
      }
      ospo::CompareOptions opts;
      opts.best_of_n = config.best_of_n;
      opts.selection_epsilon = config.selection_epsilon;
      opts.densify_context_items = config.densify_context_items;
      opts.low_global_threshold = config.low_global_threshold;
      ospo::CompareReport report =
          ospo::compare_pipelines(prompts, pools, config.decode, config.corruption,
                                  pipeline.backend(), config.seed, opts);
      std::filesystem::create_directories(config.reports_dir());
      {
        std::ofstream out(config.reports_dir() / "cases.csv");
        out << ospo::cases_csv(report);
      }
      if (!report.ospo_gaps.empty()) {
        std::ofstream out(config.reports_dir() / "gap_density.csv");
        out << ospo::gap_density_report(report.ospo_gaps).to_csv();
      }
      if (!report.bon_gaps.empty()) {
        std::ofstream out(config.reports_dir() / "gap_density_best_of_n.csv");
        out << ospo::gap_density_report(report.bon_gaps).to_csv();
      }
      auto [ospo_mean, ospo_n] =
          ospo::mean_local_given_global_below(report.ospo_gaps, opts.low_global_threshold);
      auto [bon_mean, bon_n] =
          ospo::mean_local_given_global_below(report.bon_gaps, opts.low_global_threshold);
      std::printf("best_of_n indistinguishable fraction: %.4f (%zu/%zu)\n", report.bon_fraction(),
                  report.bon_indistinguishable, report.bon_total);
      std::printf("ospo      indistinguishable fraction: %.4f (%zu/%zu, %zu discarded)\n",
                  report.ospo_fraction(), report.ospo_indistinguishable, report.ospo_total,
                  report.ospo_discarded);
      if (std::isfinite(report.fraction_ratio())) {
        std::printf("fraction ratio (best_of_n / ospo): %.2f\n", report.fraction_ratio());
      } else {
        std::printf("fraction ratio (best_of_n / ospo): inf\n");
      }
      std::printf("mean delta_local | delta_global < %.2f: ospo %.4f (n=%zu) vs best_of_n %.4f "
                  "(n=%zu)\n",
                  opts.low_global_threshold, ospo_mean, ospo_n, bon_mean, bon_n);
      return 0;
    }
    return 0;
  } catch (const ospo::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
