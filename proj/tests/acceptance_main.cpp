// Acceptance suite: every release-gating property runs here, one line of
// output per criterion. Exit status is nonzero if any criterion fails.
//
//   1. local/global score aggregation matches closed forms exactly
//   2. pair selection agrees with a brute-force evaluation of the ratio
//   3. analytic SimPO gradient matches central finite differences
//   4. training decreases loss and raises the margin on a simulator dataset
//   5. best-of-n pairing yields far more indistinguishable pairs than
//      perturbation pairing; exactly 1.0 at zero corruption
//   6. selected pairs concentrate large local gaps at small global gaps
//   7. pipeline runs are byte-deterministic and crash-safe under resume
//   8. the remote client retries, backs off, and surfaces rejections
//   9. perturbation operators keep their structural contracts

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "ospo/ospo.hpp"

namespace fs = std::filesystem;
using namespace ospo;

namespace {

struct Criterion {
  int id;
  const char* name;
  std::function<bool(std::string&)> run;
};

bool nearly(double a, double b, double tol) { return std::abs(a - b) <= tol; }

// ---------------------------------------------------------------------------
// 1. Score aggregation exactness + range property
// ---------------------------------------------------------------------------

bool criterion_scoring(std::string& detail) {
  // Hand-built probability transcripts against closed-form values.
  if (!nearly(mean_margin({{0.9, 0.1}, {0.2, 0.8}}), 0.1, 1e-12)) {
    detail = "mixed-case example failed";
    return false;
  }
  if (!nearly(mean_margin({{1.0, 0.0}, {1.0, 0.0}, {1.0, 0.0}}), 1.0, 1e-12) ||
      !nearly(mean_margin({{0.5, 0.5}}), 0.0, 1e-12) ||
      !nearly(mean_margin({{0.0, 1.0}, {0.0, 1.0}}), -1.0, 1e-12)) {
    detail = "closed-form endpoints failed";
    return false;
  }
  Rng rng(20240917);
  for (int i = 0; i < 10000; ++i) {
    std::size_t n = 1 + rng.pick_index(8);
    std::vector<ProbeResult> probes;
    for (std::size_t q = 0; q < n; ++q) {
      probes.push_back({rng.next_double(), rng.next_double()});
    }
    double s = mean_margin(probes);
    if (s < -1.0 || s > 1.0) {
      detail = "range violated at trial " + std::to_string(i);
      return false;
    }
  }
  detail = "closed forms to 1e-12; 10000 random transcripts in range";
  return true;
}

// ---------------------------------------------------------------------------
// 2. Selection vs brute-force oracle
// ---------------------------------------------------------------------------

int brute_force_choice(const std::vector<GapRecord>& gaps) {
  double dl = gaps[0].delta_local, dg = gaps[0].delta_global;
  for (const auto& g : gaps) {
    dl = std::max(dl, g.delta_local);
    dg = std::max(dg, g.delta_global);
  }
  int best = -1;
  double best_t = 0.0;
  for (std::size_t i = 0; i < gaps.size(); ++i) {
    double t = (gaps[i].delta_local / dl) / (gaps[i].delta_global / dg);
    if (best < 0 || t > best_t) {
      best = static_cast<int>(i);
      best_t = t;
    }
  }
  return best + 1;
}

bool criterion_selection(std::string& detail) {
  std::vector<GapRecord> worked = {GapRecord{PerturbKind::Swap, 0.8, 0.4},
                                   GapRecord{PerturbKind::Replace, 0.4, 0.1},
                                   GapRecord{PerturbKind::Drop, 0.2, 0.2}};
  SelectionResult r = select_pair(worked);
  if (!nearly(*r.t_scores[0], 1.0, 1e-12) || !nearly(*r.t_scores[1], 2.0, 1e-12) ||
      !nearly(*r.t_scores[2], 0.5, 1e-12) || r.chosen_index != 2) {
    detail = "worked example mismatch";
    return false;
  }
  const double eps = 1e-6;
  Rng rng(424242);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<GapRecord> gaps;
    for (PerturbKind kind : all_perturb_kinds()) {
      gaps.push_back(
          GapRecord{kind, eps + rng.next_double() * (2.0 - eps), eps + rng.next_double() * (2.0 - eps)});
    }
    if (select_pair(gaps, eps).chosen_index != brute_force_choice(gaps)) {
      detail = "oracle disagreement at trial " + std::to_string(trial);
      return false;
    }
  }
  detail = "worked example exact; 1000/1000 oracle agreement";
  return true;
}

// ---------------------------------------------------------------------------
// 3. Gradient check
// ---------------------------------------------------------------------------

bool criterion_gradients(std::string& detail) {
  {
    ToyPolicy policy(PolicyShape{8, 4, 2});
    policy.randomize(5);
    SimpoConfig cfg;
    cfg.gamma = 0.0;
    PreferenceRecord rec;
    rec.prompt_surface = "p";
    rec.winning_tokens = {1, 2, 3};
    rec.losing_tokens = {1, 2, 3};
    double loss = simpo_loss(policy, {rec}, cfg).loss;
    if (!nearly(loss, std::log(2.0), 1e-12)) {
      detail = "equal-reward loss differs from ln 2";
      return false;
    }
  }

  Rng rng(777);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    PolicyShape shape{3 + rng.pick_index(8), 2 + rng.pick_index(5), 1 + rng.pick_index(3)};
    ToyPolicy policy(shape);
    policy.randomize(rng.next_u64(), 1.0);
    SimpoConfig cfg;
    cfg.beta = 0.5 + rng.next_double() * 9.5;
    cfg.gamma = rng.next_double() * 3.0;
    std::vector<PreferenceRecord> batch;
    std::size_t n = 1 + rng.pick_index(4);
    for (std::size_t i = 0; i < n; ++i) {
      PreferenceRecord rec;
      rec.prompt_surface = "prompt " + std::to_string(rng.pick_index(40));
      auto seq = [&] {
        std::vector<int> y(1 + rng.pick_index(shape.max_len));
        for (auto& t : y) t = static_cast<int>(rng.pick_index(shape.vocab));
        return y;
      };
      rec.winning_tokens = seq();
      rec.losing_tokens = seq();
      batch.push_back(rec);
    }

    LossResult analytic = simpo_loss(policy, batch, cfg);
    auto& theta = policy.parameters();
    const double h = 1e-4;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double saved = theta[i];
      theta[i] = saved + h;
      double up = simpo_loss(policy, batch, cfg).loss;
      theta[i] = saved - h;
      double down = simpo_loss(policy, batch, cfg).loss;
      theta[i] = saved;
      double fd = (up - down) / (2.0 * h);
      double denom = std::max({1.0, std::abs(fd), std::abs(analytic.gradient[i])});
      worst = std::max(worst, std::abs(fd - analytic.gradient[i]) / denom);
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max relative error %.3g over 100 configurations", worst);
  detail = buf;
  return worst <= 1e-6;
}

// ---------------------------------------------------------------------------
// 4. Training efficacy on a simulator dataset
// ---------------------------------------------------------------------------

std::vector<PreferenceRecord> simulator_dataset(std::size_t want, SimulatorBackend& sim) {
  KeywordPools pools = builtin::pools();
  CorruptionParams corruption;
  corruption.p_omit = 0.15;
  corruption.p_misbind = 0.15;
  std::vector<StructuredPrompt> prompts;
  for (Category cat : all_categories()) {
    auto batch = generate_base_prompts(cat, 120, pools, 90125);
    prompts.insert(prompts.end(), batch.begin(), batch.end());
  }
  std::vector<PreferenceRecord> dataset;
  for (std::size_t i = 0; i < prompts.size() && dataset.size() < want; ++i) {
    OspoSampleOutcome out =
        build_ospo_pairs(prompts[i], pools, {}, corruption, sim, 7000 + i, 1e-6, 2);
    if (!out.has_selection || out.selection.discarded) continue;
    for (std::size_t c = 0; c < out.cards.size(); ++c) {
      if (out.cards[c].kind != *out.selection.chosen_kind) continue;
      PreferenceRecord rec;
      rec.prompt_surface = prompts[i].surface;
      rec.winning_tokens = out.tokens[c].first;
      rec.losing_tokens = out.tokens[c].second;
      rec.kind = out.cards[c].kind;
      if (auto t = out.selection.t_scores[static_cast<std::size_t>(rec.kind)]) rec.t_score = *t;
      dataset.push_back(std::move(rec));
    }
  }
  return dataset;
}

bool criterion_training(std::string& detail) {
  SimulatorBackend sim;
  std::vector<PreferenceRecord> dataset = simulator_dataset(256, sim);
  if (dataset.size() < 256) {
    detail = "only assembled " + std::to_string(dataset.size()) + " records";
    return false;
  }
  dataset.resize(256);
  ToyPolicy policy(PolicyShape{});  // V=512, L=32, B=64
  for (const auto& rec : dataset) policy.validate_record(rec);
  SimpoConfig cfg = SimpoConfig::toy();
  cfg.steps = 200;
  TrainResult result = train(std::move(policy), dataset, cfg);
  double loss0 = result.trace.front().loss, loss1 = result.trace.back().loss;
  double m0 = result.trace.front().mean_margin, m1 = result.trace.back().mean_margin;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "loss %.4f -> %.4f, margin %.4f -> %.4f over 200 steps", loss0,
                loss1, m0, m1);
  detail = buf;
  return loss1 < loss0 && m1 > m0;
}

// ---------------------------------------------------------------------------
// 5 & 6. Preliminary-experiment and gap-structure replication
// ---------------------------------------------------------------------------

struct CompareState {
  CompareReport reference;  // p_omit = p_misbind = 0.2, eta = 0, N = 10
  CompareReport clean;      // zero corruption
  bool ready = false;
};

CompareState& compare_state() {
  static CompareState state;
  if (!state.ready) {
    SimulatorBackend sim;
    KeywordPools pools = builtin::pools();
    auto prompts = generate_base_prompts(Category::Attribute, 200, pools, 31337);
    CompareOptions opts;
    opts.best_of_n = 10;
    CorruptionParams reference;
    reference.p_omit = 0.2;
    reference.p_misbind = 0.2;
    state.reference = compare_pipelines(prompts, pools, {}, reference, sim, 31337, opts);
    state.clean = compare_pipelines(prompts, pools, {}, {}, sim, 31337, opts);
    state.ready = true;
  }
  return state;
}

bool criterion_preliminary(std::string& detail) {
  CompareState& state = compare_state();
  double bon = state.reference.bon_fraction();
  double ospo = state.reference.ospo_fraction();
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "best-of-n %.4f (%zu/%zu) vs ospo %.4f (%zu/%zu); zero-corruption best-of-n %.2f",
                bon, state.reference.bon_indistinguishable, state.reference.bon_total, ospo,
                state.reference.ospo_indistinguishable, state.reference.ospo_total,
                state.clean.bon_fraction());
  detail = buf;
  if (state.clean.bon_fraction() != 1.0) return false;
  if (bon < 2.0 * ospo || bon <= 0.0) return false;
  // Frozen reference values for the pinned seed (31337): the run is
  // deterministic, so any drift here means behavior changed.
  return state.reference.bon_indistinguishable == 10 && state.reference.bon_total == 200 &&
         state.reference.ospo_indistinguishable == 0 && state.reference.ospo_total == 177;
}

bool criterion_gap_structure(std::string& detail) {
  CompareState& state = compare_state();
  auto [ospo_mean, ospo_n] = mean_local_given_global_below(state.reference.ospo_gaps, 0.5);
  auto [bon_mean, bon_n] = mean_local_given_global_below(state.reference.bon_gaps, 0.5);
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "mean delta_local | delta_global<0.5: ospo %.4f (n=%zu) vs best-of-n %.4f (n=%zu)",
                ospo_mean, ospo_n, bon_mean, bon_n);
  detail = buf;
  return ospo_n > 0 && bon_n > 0 && ospo_mean > bon_mean;
}

// ---------------------------------------------------------------------------
// 7. Pipeline determinism and crash safety
// ---------------------------------------------------------------------------

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

bool criterion_pipeline(std::string& detail) {
  auto make_config = [&](const std::string& tag) {
    PipelineConfig cfg;
    cfg.seed = 20250607;
    cfg.category_counts = {12, 12, 12, 12};
    cfg.corruption.p_omit = 0.15;
    cfg.corruption.p_misbind = 0.15;
    cfg.corruption.p_wrong_attr = 0.1;
    cfg.simpo.steps = 5;
    cfg.out_dir = fs::temp_directory_path() / ("ospo_accept_" + tag);
    fs::remove_all(cfg.out_dir);
    return cfg;
  };
  std::vector<std::string> stages = {"prompts", "perturb", "densify", "images", "score", "select"};
  auto run_all = [&](const PipelineConfig& cfg) {
    Pipeline p(cfg);
    for (const auto& s : stages) p.run_stage(s);
  };

  PipelineConfig a = make_config("a");
  PipelineConfig b = make_config("b");
  b.workers = 4;
  run_all(a);
  run_all(b);
  std::string bytes_a = read_file(a.manifest_path());
  if (bytes_a.empty() || bytes_a != read_file(b.manifest_path())) {
    detail = "two fresh runs differ";
    return false;
  }

  // Crash simulation: cut the manifest mid-record inside the images stage and
  // resume. Scene files written before the torn record survive, as they would
  // after a real kill.
  PipelineConfig c = make_config("c");
  {
    Pipeline p(c);
    for (const auto& s : {"prompts", "perturb", "densify", "images"}) p.run_stage(s);
  }
  std::string bytes_c = read_file(c.manifest_path());
  std::size_t seen = 0, cut = std::string::npos, pos = 0;
  while (pos < bytes_c.size()) {
    std::size_t nl = bytes_c.find('\n', pos);
    if (nl == std::string::npos) break;
    std::size_t marker = bytes_c.find("\"stage\":\"images\"", pos);
    if (marker != std::string::npos && marker < nl) {
      if (++seen == 20) {
        cut = pos + 31;  // torn mid-record
        break;
      }
    }
    pos = nl + 1;
  }
  if (cut == std::string::npos) {
    detail = "could not locate an images record to tear";
    return false;
  }
  {
    std::ofstream out(c.manifest_path(), std::ios::binary | std::ios::trunc);
    out << bytes_c.substr(0, cut);
  }
  run_all(c);
  if (read_file(c.manifest_path()) != bytes_a) {
    detail = "resumed run diverged from the uninterrupted run";
    return false;
  }
  detail = "fresh runs identical (" + std::to_string(bytes_a.size()) +
           " bytes); torn-record resume reproduced them";
  return true;
}

// ---------------------------------------------------------------------------
// 8. Remote client conformance
// ---------------------------------------------------------------------------

bool criterion_remote(std::string& detail) {
  httplib::Server server;
  std::atomic<int> fail_429{2};
  std::atomic<int> requests{0};
  server.Post("/v1/text", [&](const httplib::Request& req, httplib::Response& res) {
    ++requests;
    if (fail_429 > 0) {
      --fail_429;
      res.status = 429;
      return;
    }
    auto body = nlohmann::json::parse(req.body);
    res.set_content(
        nlohmann::json{{"text", "ok:" + body.at("messages")[0].at("text").get<std::string>()}}
            .dump(),
        "application/json");
  });
  server.Post("/v1/images", [&](const httplib::Request&, httplib::Response& res) {
    ++requests;
    res.set_content(nlohmann::json{{"image_b64", detail::base64_encode("BYTES")},
                                   {"token_ids", std::vector<int>{4, 5}}}
                        .dump(),
                    "application/json");
  });
  server.Post("/v1/vqa", [&](const httplib::Request& req, httplib::Response& res) {
    ++requests;
    auto body = nlohmann::json::parse(req.body);
    if (body.value("question", "") == "reject me") {
      res.status = 400;
      return;
    }
    res.set_content(nlohmann::json{{"p_yes", 0.6}, {"p_no", 0.3}}.dump(), "application/json");
  });
  int port = server.bind_to_any_port("127.0.0.1");
  std::thread listener([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  bool ok = true;
  std::string why;
  std::vector<std::chrono::milliseconds> delays;
  {
    RemoteConfig cfg;
    cfg.base_url = "http://127.0.0.1:" + std::to_string(port);
    cfg.max_attempts = 4;
    cfg.backoff_base = std::chrono::milliseconds(1);
    RemoteBackend backend(cfg, [&](std::chrono::milliseconds d) { delays.push_back(d); });

    if (backend.text_complete({{"user", "ping"}}, 1) != "ok:ping") {
      ok = false;
      why = "text round-trip failed";
    }
    if (ok && (delays.size() != 2 || delays[1] != 2 * delays[0])) {
      ok = false;
      why = "429 retries did not back off exponentially";
    }
    if (ok) {
      StructuredPrompt dense;
      dense.category = Category::Attribute;
      dense.entities = {Entity{"car", {}}};
      dense.surface = "a car";
      ImageArtifact img = backend.generate_image(dense, {}, {});
      if (img.image_bytes != "BYTES" || img.token_ids != std::vector<int>{4, 5}) {
        ok = false;
        why = "image round-trip failed";
      } else {
        ProbeResult probe = backend.vqa_probe(img, "Is there a car?");
        if (probe.p_yes != 0.6 || probe.p_no != 0.3) {
          ok = false;
          why = "vqa round-trip failed";
        }
        if (ok) {
          int before = requests;
          try {
            backend.vqa_probe(img, "reject me");
            ok = false;
            why = "400 did not raise RemoteRejected";
          } catch (const RemoteRejected&) {
            if (requests != before + 1) {
              ok = false;
              why = "400 was retried";
            }
          }
        }
      }
    }
  }
  server.stop();
  listener.join();
  detail = ok ? "three endpoints round-trip; 429 backed off; 400 surfaced immediately" : why;
  return ok;
}

// ---------------------------------------------------------------------------
// 9. Perturbation structural properties
// ---------------------------------------------------------------------------

bool swap_defined(const StructuredPrompt& p) {
  switch (detail::family_of(p)) {
    case detail::PerturbFamily::NonSpatial:
      return false;
    case detail::PerturbFamily::Spatial:
      return !p.relations.empty();
    case detail::PerturbFamily::Numeracy: {
      for (std::size_t i = 0; i < p.counts.size(); ++i) {
        for (std::size_t j = i + 1; j < p.counts.size(); ++j) {
          if (p.counts[i].count != p.counts[j].count) return true;
        }
      }
      return false;
    }
    case detail::PerturbFamily::AttributeLike: {
      for (std::size_t a = 0; a < p.entities.size(); ++a) {
        for (std::size_t b = a + 1; b < p.entities.size(); ++b) {
          if (p.entities[a].object != p.entities[b].object) return true;
          for (const auto& x : p.entities[a].attributes) {
            for (const auto& y : p.entities[b].attributes) {
              if (!(x == y)) return true;
            }
          }
        }
      }
      return false;
    }
  }
  return false;
}

bool criterion_perturbation(std::string& detail_out) {
  KeywordPools pools = builtin::pools();
  std::size_t checked = 0;
  for (Category cat : all_categories()) {
    auto prompts = generate_base_prompts(cat, 1250, pools, 60601);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const StructuredPrompt& base = prompts[i];
      ++checked;

      // Swap: binding permutation, and defined exactly on the documented shapes.
      bool defined = swap_defined(base);
      try {
        StructuredPrompt neg = perturb(base, PerturbKind::Swap, pools, i);
        if (!defined) {
          detail_out = "swap succeeded on a degenerate shape: " + base.surface;
          return false;
        }
        if (value_multiset(neg) != value_multiset(base) ||
            fact_multiset(neg) == fact_multiset(base)) {
          detail_out = "swap is not a binding permutation on: " + base.surface;
          return false;
        }
      } catch (const NotPerturbable&) {
        if (defined) {
          detail_out = "swap refused an eligible prompt: " + base.surface;
          return false;
        }
      }

      // Replace: at least one fresh value (always defined for generated prompts).
      try {
        StructuredPrompt neg = perturb(base, PerturbKind::Replace, pools, i);
        auto base_vals = value_multiset(base);
        bool fresh = false;
        for (const auto& [v, n] : value_multiset(neg)) {
          auto it = base_vals.find(v);
          if (it == base_vals.end() || it->second < n) fresh = true;
        }
        if (!fresh) {
          detail_out = "replace introduced nothing fresh on: " + base.surface;
          return false;
        }
      } catch (const NotPerturbable&) {
        detail_out = "replace refused a generated prompt: " + base.surface;
        return false;
      }

      // Drop: strict subset; only single-count-of-one numeracy shapes refuse.
      bool drop_defined =
          !(detail::family_of(base) == detail::PerturbFamily::Numeracy &&
            base.entities.size() == 1 && base.counts.size() == 1 && base.counts[0].count == 1);
      try {
        StructuredPrompt neg = perturb(base, PerturbKind::Drop, pools, i);
        if (!drop_defined) {
          detail_out = "drop succeeded on a degenerate shape: " + base.surface;
          return false;
        }
        if (!facts_subset(neg, base) || prompt_facts(neg).size() >= prompt_facts(base).size()) {
          detail_out = "drop is not a strict subset on: " + base.surface;
          return false;
        }
      } catch (const NotPerturbable&) {
        if (drop_defined) {
          detail_out = "drop refused an eligible prompt: " + base.surface;
          return false;
        }
      }
    }
  }
  detail_out = std::to_string(checked) + " prompts checked across all categories";
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<Criterion> criteria = {
      {1, "score aggregation exactness and range", criterion_scoring},
      {2, "selection oracle equivalence", criterion_selection},
      {3, "simpo gradient check", criterion_gradients},
      {4, "training efficacy", criterion_training},
      {5, "best-of-n vs perturbation indistinguishability", criterion_preliminary},
      {6, "gap concentration at low global divergence", criterion_gap_structure},
      {7, "pipeline determinism and crash safety", criterion_pipeline},
      {8, "remote client conformance", criterion_remote},
      {9, "perturbation structural properties", criterion_perturbation},
  };

  int only = argc > 1 ? std::atoi(argv[1]) : 0;
  int failures = 0;
  for (auto& criterion : criteria) {
    if (only && criterion.id != only) continue;
    auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = false;
    try {
      ok = criterion.run(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] criterion %d: %s (%.2fs) - %s\n", ok ? "PASS" : "FAIL", criterion.id,
                criterion.name, secs, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
  }
  if (failures) std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
