#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ospo/analysis.hpp"
#include "ospo/backend.hpp"
#include "ospo/errors.hpp"
#include "ospo/keywords.hpp"
#include "ospo/manifest.hpp"
#include "ospo/perturb.hpp"
#include "ospo/prompt_forge.hpp"
#include "ospo/questions.hpp"
#include "ospo/remote.hpp"
#include "ospo/rng.hpp"
#include "ospo/selection.hpp"
#include "ospo/simpo.hpp"
#include "ospo/simulator.hpp"
#include "ospo/vqa.hpp"

namespace ospo {

struct AblationFlags {
  bool no_negative_prompts = false;  // losing image from the base dense prompt, new seed
  bool no_densification = false;     // images from the raw base/negative prompts
  bool random_selection = false;     // i* uniform over non-skipped candidates
  bool best_of_n_mode = false;       // SILMM-style baseline pairing
};

inline void to_json(nlohmann::json& j, const AblationFlags& a) {
  j = {{"no_negative_prompts", a.no_negative_prompts},
       {"no_densification", a.no_densification},
       {"random_selection", a.random_selection},
       {"best_of_n_mode", a.best_of_n_mode}};
}

inline void from_json(const nlohmann::json& j, AblationFlags& a) {
  a.no_negative_prompts = j.value("no_negative_prompts", false);
  a.no_densification = j.value("no_densification", false);
  a.random_selection = j.value("random_selection", false);
  a.best_of_n_mode = j.value("best_of_n_mode", false);
}

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::array<std::size_t, 4> category_counts{25, 25, 25, 25};  // indexed by Category
  std::string backend_type = "simulator";                      // "simulator" | "remote"
  RemoteConfig remote;
  PoolSource pool_source = PoolSource::Builtin;
  PoolTargets pool_targets;
  std::size_t vocab_capacity = 512;
  DecodeParams decode;
  CorruptionParams corruption;
  double selection_epsilon = 1e-6;
  SimpoConfig simpo = SimpoConfig::toy();
  PolicyShape policy_shape;
  AblationFlags ablation;
  int best_of_n = 10;
  DensifyMode densify_mode = DensifyMode::Rule;
  std::size_t densify_context_items = 2;
  std::string question_mode = "rule";  // "rule" | "backend"
  double low_global_threshold = 0.5;
  std::filesystem::path out_dir = "runs/out";
  int workers = 1;

  std::size_t total_samples() const {
    std::size_t n = 0;
    for (std::size_t c : category_counts) n += c;
    return n;
  }

  void validate() const {
    if (total_samples() == 0) throw ConfigError("no prompts requested");
    if (ablation.best_of_n_mode && ablation.no_negative_prompts) {
      throw ConfigError("best_of_n_mode subsumes no_negative_prompts; flags are exclusive");
    }
    if (backend_type != "simulator" && backend_type != "remote") {
      throw ConfigError("unknown backend type: " + backend_type);
    }
    if (question_mode != "rule" && question_mode != "backend") {
      throw ConfigError("unknown question mode: " + question_mode);
    }
    if (densify_context_items > 8) throw ConfigError("densify context_items must be <= 8");
    if (best_of_n < 2) throw ConfigError("best_of_n must be >= 2");
    if (selection_epsilon <= 0.0) throw ConfigError("selection_epsilon must be positive");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    corruption.validate();
  }

  /// Semantic fields only: out_dir and workers cannot change results, so two
  /// runs in different directories still hash identically.
  nlohmann::json semantic_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["categories"] = {{"attribute", category_counts[0]},
                       {"layout", category_counts[1]},
                       {"non_spatial", category_counts[2]},
                       {"complex", category_counts[3]}};
    j["backend"] = backend_type;
    if (backend_type == "remote") j["remote"] = remote;
    j["pool_source"] = pool_source == PoolSource::Builtin ? "builtin" : "backend";
    j["vocab_capacity"] = vocab_capacity;
    j["decode"] = decode;
    j["corruption"] = corruption;
    j["selection_epsilon"] = selection_epsilon;
    j["simpo"] = simpo;
    j["policy"] = {{"vocab", policy_shape.vocab},
                   {"max_len", policy_shape.max_len},
                   {"buckets", policy_shape.buckets}};
    j["ablation"] = ablation;
    j["best_of_n"] = best_of_n;
    j["densify"] = {{"mode", densify_mode == DensifyMode::Rule ? "rule" : "backend"},
                    {"context_items", densify_context_items}};
    j["question_mode"] = question_mode;
    j["low_global_threshold"] = low_global_threshold;
    return j;
  }

  std::string config_hash() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(Rng::hash_label(semantic_json().dump())));
    return buf;
  }

  std::filesystem::path manifest_path() const { return out_dir / "manifest.jsonl"; }
  std::filesystem::path images_dir() const { return out_dir / "images"; }
  std::filesystem::path reports_dir() const { return out_dir / "reports"; }
  std::filesystem::path checkpoints_dir() const { return out_dir / "checkpoints"; }
};

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = c.semantic_json();
  j["out_dir"] = c.out_dir.string();
  j["workers"] = c.workers;
}

inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
  c.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("categories")) {
    const auto& cats = j.at("categories");
    c.category_counts[0] = cats.value("attribute", std::size_t{0});
    c.category_counts[1] = cats.value("layout", std::size_t{0});
    c.category_counts[2] = cats.value("non_spatial", std::size_t{0});
    c.category_counts[3] = cats.value("complex", std::size_t{0});
  }
  if (j.contains("backend")) {
    if (j.at("backend").is_string()) {
      c.backend_type = j.at("backend");
    } else {
      c.backend_type = j.at("backend").value("type", "simulator");
      if (c.backend_type == "remote") c.remote = j.at("backend").get<RemoteConfig>();
    }
  }
  if (j.contains("remote")) c.remote = j.at("remote").get<RemoteConfig>();
  if (j.contains("pool_source")) {
    c.pool_source = j.at("pool_source") == "backend" ? PoolSource::Backend : PoolSource::Builtin;
  }
  c.vocab_capacity = j.value("vocab_capacity", std::size_t{512});
  if (j.contains("decode")) c.decode = j.at("decode").get<DecodeParams>();
  if (j.contains("corruption")) c.corruption = j.at("corruption").get<CorruptionParams>();
  c.selection_epsilon = j.value("selection_epsilon", 1e-6);
  if (j.contains("simpo")) {
    const auto& s = j.at("simpo");
    c.simpo = s.value("preset", "toy") == "paper" ? SimpoConfig::paper() : SimpoConfig::toy();
    nlohmann::json merged = c.simpo;
    for (auto it = s.begin(); it != s.end(); ++it) {
      if (it.key() != "preset") merged[it.key()] = it.value();
    }
    c.simpo = merged.get<SimpoConfig>();
  }
  if (j.contains("policy")) {
    const auto& p = j.at("policy");
    c.policy_shape.vocab = p.value("vocab", std::size_t{512});
    c.policy_shape.max_len = p.value("max_len", std::size_t{32});
    c.policy_shape.buckets = p.value("buckets", std::size_t{64});
  }
  if (j.contains("ablation")) c.ablation = j.at("ablation").get<AblationFlags>();
  c.best_of_n = j.value("best_of_n", 10);
  if (j.contains("densify")) {
    const auto& d = j.at("densify");
    c.densify_mode = d.value("mode", "rule") == "backend" ? DensifyMode::Backend : DensifyMode::Rule;
    c.densify_context_items = d.value("context_items", std::size_t{2});
  }
  c.question_mode = j.value("question_mode", "rule");
  c.low_global_threshold = j.value("low_global_threshold", 0.5);
  c.out_dir = j.value("out_dir", std::string("runs/out"));
  c.workers = j.value("workers", 1);
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  PipelineConfig cfg = j.get<PipelineConfig>();
  cfg.validate();
  return cfg;
}

struct StageSummary {
  std::string stage;
  std::size_t processed = 0;
  std::size_t skipped = 0;
  std::size_t discarded = 0;
};

/// Shared per-run state: pools, backend, manifest, seeded stream roots.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config)
      : config_(std::move(config)), manifest_(config_.manifest_path()) {
    config_.validate();
    std::error_code ec;
    std::filesystem::create_directories(config_.out_dir, ec);
    if (ec) throw ConfigError("out_dir is not writable: " + config_.out_dir.string());
    backend_ = make_backend();
    pools_ = make_pools();
  }

  const PipelineConfig& config() const { return config_; }
  Backend& backend() { return *backend_; }
  const KeywordPools& pools() const { return pools_; }
  Manifest& manifest() { return manifest_; }

  StageSummary run_stage(const std::string& stage) {
    manifest_.open(config_.config_hash());
    if (stage == "prompts") return stage_prompts();
    if (stage == "perturb") return stage_perturb();
    if (stage == "densify") return stage_densify();
    if (stage == "images") return stage_images();
    if (stage == "score") return stage_score();
    if (stage == "select") return stage_select();
    if (stage == "train") return stage_train();
    if (stage == "analyze") return stage_analyze();
    throw ConfigError("unknown stage: " + stage);
  }

  std::vector<StageSummary> run_all() {
    std::vector<StageSummary> out;
    for (const auto& stage : stage_order()) out.push_back(run_stage(stage));
    return out;
  }

 private:
  std::shared_ptr<Backend> make_backend() {
    if (config_.backend_type == "remote") {
      return std::make_shared<RemoteBackend>(config_.remote);
    }
    auto sim = std::make_shared<SimulatorBackend>(builtin::pools(), config_.vocab_capacity);
    sim->set_eta(config_.corruption.eta);
    return sim;
  }

  KeywordPools make_pools() {
    if (config_.pool_source == PoolSource::Builtin) {
      return build_keyword_pools(PoolSource::Builtin, config_.seed, config_.pool_targets);
    }
    // Request phrasing follows the canonical keyword-generation prompts.
    static const std::map<std::string, std::string> kPoolPhrase = {
        {"objects", "object"},
        {"colors", "colors"},
        {"shapes", "shape"},
        {"textures", "texture"},
        {"spatial", "spatial relative word or phrase"}};
    KeywordFetcher fetch = [this](const std::string& pool, std::uint64_t seed) {
      auto it = kPoolPhrase.find(pool);
      const std::string what = it == kPoolPhrase.end() ? pool : it->second;
      std::vector<Message> messages = {
          {"system", "You are a helpful assistant that generates common " + what +
                         " spanning various categories."},
          {"user", "Generate common " + what + " spanning various categories."}};
      return backend_->text_complete(messages, seed);
    };
    return build_keyword_pools(PoolSource::Backend, config_.seed, config_.pool_targets, fetch);
  }

  Rng stream(const std::string& stage) const { return Rng(config_.seed).substream(stage); }

  // Runs fn over indices [0, n) with up to `workers` threads and returns the
  // results in index order; manifest appends happen afterwards on the caller
  // thread, so record order never depends on scheduling.
  template <typename Fn>
  std::vector<std::optional<nlohmann::json>> ordered_map(const std::vector<std::uint64_t>& ids,
                                                         Fn fn) {
    std::vector<std::optional<nlohmann::json>> results(ids.size());
    const int workers = std::min<int>(config_.workers, static_cast<int>(ids.size()));
    if (workers <= 1) {
      for (std::size_t i = 0; i < ids.size(); ++i) results[i] = fn(ids[i]);
      return results;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> threads;
    std::mutex error_mutex;
    std::exception_ptr first_error;
    for (int w = 0; w < workers; ++w) {
      threads.emplace_back([&] {
        for (;;) {
          std::size_t i = next.fetch_add(1);
          if (i >= ids.size()) return;
          try {
            results[i] = fn(ids[i]);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
            return;
          }
        }
      });
    }
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
    return results;
  }

  /// All sample ids in scope, in deterministic order.
  std::vector<std::uint64_t> scope() const {
    std::vector<std::uint64_t> ids(config_.total_samples());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    return ids;
  }

  void require_stage_complete(const std::string& prev) {
    for (std::uint64_t id : scope()) {
      if (!manifest_.has(prev, id)) {
        throw StageIncomplete("stage '" + prev + "' incomplete: sample " + std::to_string(id) +
                              " missing");
      }
    }
  }

  StructuredPrompt base_prompt(std::uint64_t id) const {
    const nlohmann::json* rec = manifest_.find("prompts", id);
    if (!rec) throw StageIncomplete("prompts record missing for sample " + std::to_string(id));
    return rec->at("structured").get<StructuredPrompt>();
  }

  // -- prompts ---------------------------------------------------------------

  StageSummary stage_prompts() {
    StageSummary summary{"prompts"};
    PromptTextFetcher fetch;
    if (config_.backend_type == "remote" || config_.pool_source == PoolSource::Backend) {
      // In-context categories can come from the model; the simulator's canned
      // transcripts keep this path deterministic.
      fetch = [this](Category cat, std::uint64_t seed) {
        std::vector<Message> messages;
        if (cat == Category::NonSpatial) {
          messages = {{"system",
                       "You are an assistant dedicated to generating natural prompts that contain "
                       "subjects and objects by using nonspatial relationship words."},
                      {"user",
                       "Generate a prompt that contains subjects and objects by using non-spatial "
                       "relationship words."}};
        } else {
          messages = {{"system",
                       "You are an assistant dedicated to generating natural compositional "
                       "phrases or prompts, containing multiple objects with one or several "
                       "adjectives and relationships."},
                      {"user",
                       "Please generate a compositional phrase or sentence containing multiple "
                       "objects with one or several adjectives and relationships."}};
        }
        return backend_->text_complete(messages, seed);
      };
    }

    std::uint64_t id = 0;
    for (Category cat : all_categories()) {
      std::size_t count = config_.category_counts[static_cast<std::size_t>(cat)];
      if (count == 0) continue;
      std::vector<StructuredPrompt> prompts =
          generate_base_prompts(cat, count, pools_, config_.seed, fetch);
      Rng root = Rng(config_.seed).substream("base_prompts").substream(category_name(cat));
      for (std::size_t i = 0; i < prompts.size(); ++i, ++id) {
        if (manifest_.has("prompts", id)) {
          ++summary.skipped;
          continue;
        }
        nlohmann::json rec = {{"stage", "prompts"},
                              {"sample_id", id},
                              {"category", std::string(category_name(cat))},
                              {"surface", prompts[i].surface},
                              {"structured", prompts[i]},
                              {"seed", root.substream(i).state()}};
        manifest_.append(rec);
        ++summary.processed;
      }
    }
    return summary;
  }

  // -- perturb ---------------------------------------------------------------

  StageSummary stage_perturb() {
    require_stage_complete("prompts");
    StageSummary summary{"perturb"};
    std::vector<std::uint64_t> todo;
    for (std::uint64_t id : scope()) {
      if (manifest_.has("perturb", id)) {
        ++summary.skipped;
      } else {
        todo.push_back(id);
      }
    }
    auto results = ordered_map(todo, [&](std::uint64_t id) -> nlohmann::json {
      StructuredPrompt base = base_prompt(id);
      nlohmann::json candidates = nlohmann::json::array();
      std::string mode = "normal";
      if (config_.ablation.best_of_n_mode) {
        mode = "best_of_n";
      } else if (config_.ablation.no_negative_prompts) {
        mode = "no_negative_prompts";
        candidates.push_back(
            {{"kind", "swap"}, {"skipped", false}, {"negative", base}});
      } else {
        Rng s = stream("perturb").substream(id);
        for (PerturbKind kind : all_perturb_kinds()) {
          nlohmann::json entry = {{"kind", std::string(perturb_kind_name(kind))}};
          try {
            StructuredPrompt negative =
                perturb(base, kind, pools_, s.substream(perturb_kind_name(kind)).state());
            entry["skipped"] = false;
            entry["negative"] = negative;
          } catch (const NotPerturbable& e) {
            entry["skipped"] = true;
            entry["skip_reason"] = e.what();
          }
          candidates.push_back(entry);
        }
      }
      return nlohmann::json{
          {"stage", "perturb"}, {"sample_id", id}, {"mode", mode}, {"candidates", candidates}};
    });
    for (auto& rec : results) {
      manifest_.append(*rec);
      ++summary.processed;
    }
    return summary;
  }

  // -- densify ---------------------------------------------------------------

  StageSummary stage_densify() {
    require_stage_complete("perturb");
    StageSummary summary{"densify"};
    std::vector<std::uint64_t> todo;
    for (std::uint64_t id : scope()) {
      if (manifest_.has("densify", id)) {
        ++summary.skipped;
      } else {
        todo.push_back(id);
      }
    }
    auto results = ordered_map(todo, [&](std::uint64_t id) -> nlohmann::json {
      StructuredPrompt base = base_prompt(id);
      const nlohmann::json& perturb_rec = *manifest_.find("perturb", id);
      nlohmann::json pairs = nlohmann::json::array();
      Rng s = stream("densify").substream(id);

      DensifyOptions opts;
      opts.mode = config_.densify_mode;
      opts.context_items = config_.densify_context_items;
      opts.backend = backend_.get();

      auto densify_one = [&](const StructuredPrompt& negative, PerturbKind kind) {
        if (config_.ablation.no_densification) {
          DensePromptPair pair;
          pair.kind = kind;
          pair.base_dense = base;
          pair.negative_dense = negative;
          pair.provenance = "no_densification";
          return pair;
        }
        return densify_pair(base, negative, kind, s.substream(perturb_kind_name(kind)).state(),
                            pools_, opts);
      };

      if (config_.ablation.best_of_n_mode) {
        pairs.push_back(densify_one(base, PerturbKind::Swap));
      } else {
        for (const auto& cand : perturb_rec.at("candidates")) {
          if (cand.at("skipped").get<bool>()) continue;
          PerturbKind kind = perturb_kind_from_name(cand.at("kind").get<std::string>());
          pairs.push_back(densify_one(cand.at("negative").get<StructuredPrompt>(), kind));
        }
      }
      return nlohmann::json{{"stage", "densify"}, {"sample_id", id}, {"pairs", pairs}};
    });
    for (auto& rec : results) {
      manifest_.append(*rec);
      ++summary.processed;
    }
    return summary;
  }

  // -- images ----------------------------------------------------------------

  std::string image_extension() const {
    return config_.backend_type == "remote" ? ".png" : ".json";
  }

  void persist_artifact(const ImageArtifact& artifact, const std::filesystem::path& rel) {
    std::filesystem::path full = config_.out_dir / rel;
    std::filesystem::create_directories(full.parent_path());
    std::ofstream out(full, std::ios::binary);
    if (!out) throw ConfigError("cannot write image artifact: " + full.string());
    if (artifact.scene) {
      nlohmann::json j = *artifact.scene;
      out << j.dump() << '\n';
    } else {
      out.write(artifact.image_bytes.data(),
                static_cast<std::streamsize>(artifact.image_bytes.size()));
    }
  }

  ImageArtifact load_artifact(const std::string& rel, const std::string& artifact_id,
                              const std::vector<int>& token_ids) const {
    std::filesystem::path full = config_.out_dir / rel;
    std::ifstream in(full, std::ios::binary);
    if (!in) throw StageIncomplete("image artifact missing: " + full.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    ImageArtifact artifact;
    artifact.id = artifact_id;
    if (config_.backend_type == "simulator") {
      artifact.scene = nlohmann::json::parse(bytes).get<SceneGraph>();
    } else {
      artifact.image_bytes = std::move(bytes);
      artifact.token_ids = token_ids;
    }
    return artifact;
  }

  StageSummary stage_images() {
    require_stage_complete("densify");
    StageSummary summary{"images"};
    std::vector<std::uint64_t> todo;
    for (std::uint64_t id : scope()) {
      if (manifest_.has("images", id)) {
        ++summary.skipped;
      } else {
        todo.push_back(id);
      }
    }
    auto results = ordered_map(todo, [&](std::uint64_t id) -> nlohmann::json {
      const nlohmann::json& densify_rec = *manifest_.find("densify", id);
      Rng s = stream("images").substream(id);

      if (config_.ablation.best_of_n_mode) {
        DensePromptPair pair = densify_rec.at("pairs").at(0).get<DensePromptPair>();
        nlohmann::json files = nlohmann::json::array();
        Rng bs = s.substream("bon");
        for (int i = 0; i < config_.best_of_n; ++i) {
          DecodeParams d = config_.decode;
          d.seed = bs.substream(static_cast<std::uint64_t>(i)).state();
          ImageArtifact img = backend_->generate_image(pair.base_dense, d, config_.corruption);
          img.id = std::to_string(id) + "/bon/" + std::to_string(i);
          std::string rel = "images/" + img.id + image_extension();
          persist_artifact(img, rel);
          nlohmann::json entry = {{"path", rel}};
          if (!img.token_ids.empty()) entry["tokens"] = img.token_ids;
          files.push_back(entry);
        }
        return nlohmann::json{{"stage", "images"}, {"sample_id", id}, {"bon", files}};
      }

      nlohmann::json images = nlohmann::json::array();
      for (const auto& pj : densify_rec.at("pairs")) {
        DensePromptPair pair = pj.get<DensePromptPair>();
        const std::string kind_name(perturb_kind_name(pair.kind));
        Rng ks = s.substream(kind_name);
        DecodeParams dw = config_.decode;
        dw.seed = ks.substream("w").state();
        DecodeParams dl = config_.decode;
        dl.seed = ks.substream("l").state();
        ImageArtifact w = backend_->generate_image(pair.base_dense, dw, config_.corruption);
        ImageArtifact l = backend_->generate_image(pair.negative_dense, dl, config_.corruption);
        w.id = std::to_string(id) + "/" + kind_name + "/w";
        l.id = std::to_string(id) + "/" + kind_name + "/l";
        std::string w_rel = "images/" + w.id + image_extension();
        std::string l_rel = "images/" + l.id + image_extension();
        persist_artifact(w, w_rel);
        persist_artifact(l, l_rel);
        nlohmann::json entry = {{"kind", kind_name}, {"w", w_rel}, {"l", l_rel}};
        if (!w.token_ids.empty()) entry["w_tokens"] = w.token_ids;
        if (!l.token_ids.empty()) entry["l_tokens"] = l.token_ids;
        images.push_back(entry);
      }
      return nlohmann::json{{"stage", "images"}, {"sample_id", id}, {"images", images}};
    });
    for (auto& rec : results) {
      manifest_.append(*rec);
      ++summary.processed;
    }
    return summary;
  }

  // -- score -----------------------------------------------------------------

  QuestionSet questions_for(const StructuredPrompt& base, std::uint64_t id) {
    if (config_.question_mode == "rule") return decompose_questions(base);
    return decompose_questions_backend(base, *backend_,
                                       stream("questions").substream(id).state());
  }

  StageSummary stage_score() {
    require_stage_complete("images");
    StageSummary summary{"score"};
    std::vector<std::uint64_t> todo;
    for (std::uint64_t id : scope()) {
      if (manifest_.has("score", id)) {
        ++summary.skipped;
      } else {
        todo.push_back(id);
      }
    }
    auto results = ordered_map(todo, [&](std::uint64_t id) -> nlohmann::json {
      StructuredPrompt base = base_prompt(id);
      QuestionSet questions = questions_for(base, id);
      const nlohmann::json& images_rec = *manifest_.find("images", id);

      if (config_.ablation.best_of_n_mode) {
        nlohmann::json scores = nlohmann::json::array();
        for (const auto& entry : images_rec.at("bon")) {
          ImageArtifact img =
              load_artifact(entry.at("path"), entry.at("path"),
                            entry.contains("tokens") ? entry.at("tokens").get<std::vector<int>>()
                                                     : std::vector<int>{});
          ImageScore s = score_image(img, questions, *backend_);
          nlohmann::json local = nlohmann::json::array();
          for (std::size_t q = 0; q < questions.local.size(); ++q) {
            local.push_back({{"question", questions.local[q].question},
                             {"p_yes", s.local_probes[q].p_yes},
                             {"p_no", s.local_probes[q].p_no}});
          }
          scores.push_back({{"s_local", s.s_local},
                            {"s_global", s.s_global},
                            {"local", local},
                            {"global", {{"question", questions.global},
                                        {"p_yes", s.global_probe.p_yes},
                                        {"p_no", s.global_probe.p_no}}}});
        }
        return nlohmann::json{{"stage", "score"}, {"sample_id", id}, {"scores", scores}};
      }

      nlohmann::json cards = nlohmann::json::array();
      for (const auto& entry : images_rec.at("images")) {
        PerturbKind kind = perturb_kind_from_name(entry.at("kind").get<std::string>());
        ImageArtifact w = load_artifact(
            entry.at("w"), entry.at("w"),
            entry.contains("w_tokens") ? entry.at("w_tokens").get<std::vector<int>>()
                                       : std::vector<int>{});
        ImageArtifact l = load_artifact(
            entry.at("l"), entry.at("l"),
            entry.contains("l_tokens") ? entry.at("l_tokens").get<std::vector<int>>()
                                       : std::vector<int>{});
        cards.push_back(score_pair(w, l, questions, *backend_, kind));
      }
      return nlohmann::json{{"stage", "score"}, {"sample_id", id}, {"cards", cards}};
    });
    for (auto& rec : results) {
      manifest_.append(*rec);
      ++summary.processed;
    }
    return summary;
  }

  // -- select ----------------------------------------------------------------

  StageSummary stage_select() {
    require_stage_complete("score");
    StageSummary summary{"select"};
    for (std::uint64_t id : scope()) {
      if (manifest_.has("select", id)) {
        ++summary.skipped;
        continue;
      }
      const nlohmann::json& score_rec = *manifest_.find("score", id);
      nlohmann::json rec = {{"stage", "select"}, {"sample_id", id}};

      if (config_.ablation.best_of_n_mode) {
        const auto& scores = score_rec.at("scores");
        std::size_t best = 0, worst = 0;
        for (std::size_t i = 1; i < scores.size(); ++i) {
          if (scores[i].at("s_local").get<double>() >
              scores[best].at("s_local").get<double>()) best = i;
          if (scores[i].at("s_local").get<double>() <
              scores[worst].at("s_local").get<double>()) worst = i;
        }
        rec["w_index"] = best;
        rec["l_index"] = worst;
        rec["discarded"] = false;
        nlohmann::json card = make_bon_card(scores, best, worst);
        rec["card"] = card;
        manifest_.append(rec);
        ++summary.processed;
        continue;
      }

      std::vector<ScoreCard> cards;
      for (const auto& cj : score_rec.at("cards")) cards.push_back(cj.get<ScoreCard>());
      std::vector<GapRecord> gaps = compute_gaps(cards);
      rec["gaps"] = gaps;

      SelectionResult selection;
      if (cards.empty()) {
        selection.discarded = true;
        selection.reason = "no_candidates";
      } else if (config_.ablation.random_selection) {
        Rng s = stream("select").substream(id);
        const ScoreCard& pick = cards[s.pick_index(cards.size())];
        selection.chosen_kind = pick.kind;
        selection.chosen_index = static_cast<int>(pick.kind) + 1;
        selection.reason = "random_selection";
        for (const auto& g : gaps) {
          selection.delta_max_local = std::max(selection.delta_max_local, g.delta_local);
          selection.delta_max_global = std::max(selection.delta_max_global, g.delta_global);
        }
      } else {
        selection = select_pair(gaps, config_.selection_epsilon);
      }
      rec["selection"] = selection;
      if (selection.discarded) ++summary.discarded;
      manifest_.append(rec);
      ++summary.processed;
    }
    return summary;
  }

  static nlohmann::json make_bon_card(const nlohmann::json& scores, std::size_t best,
                                      std::size_t worst) {
    ScoreCard card;
    card.kind = PerturbKind::Swap;  // tag unused in best-of-n mode
    const auto& w = scores[best];
    const auto& l = scores[worst];
    card.s_local_w = w.at("s_local");
    card.s_global_w = w.at("s_global");
    card.s_local_l = l.at("s_local");
    card.s_global_l = l.at("s_global");
    for (std::size_t q = 0; q < w.at("local").size(); ++q) {
      card.local.push_back({w.at("local")[q].at("question"),
                            ProbeResult{w.at("local")[q].at("p_yes"), w.at("local")[q].at("p_no")},
                            ProbeResult{l.at("local")[q].at("p_yes"), l.at("local")[q].at("p_no")}});
    }
    card.global = {w.at("global").at("question"),
                   ProbeResult{w.at("global").at("p_yes"), w.at("global").at("p_no")},
                   ProbeResult{l.at("global").at("p_yes"), l.at("global").at("p_no")}};
    return card;
  }

  // -- train -----------------------------------------------------------------

  std::vector<int> tokens_for(const std::string& rel, const std::vector<int>& stored) const {
    if (config_.backend_type == "simulator") {
      ImageArtifact artifact = load_artifact(rel, rel, {});
      return artifact.scene->token_sequence;
    }
    return stored;
  }

  StageSummary stage_train() {
    require_stage_complete("select");
    StageSummary summary{"train"};
    if (manifest_.has_stage("train")) {
      ++summary.skipped;
      return summary;
    }

    std::vector<PreferenceRecord> dataset;
    std::size_t skipped_records = 0;
    ToyPolicy policy(config_.policy_shape);
    for (std::uint64_t id : scope()) {
      const nlohmann::json& select_rec = *manifest_.find("select", id);
      const nlohmann::json& images_rec = *manifest_.find("images", id);
      PreferenceRecord rec;
      rec.prompt_surface = manifest_.find("prompts", id)->at("surface");

      if (config_.ablation.best_of_n_mode) {
        if (select_rec.value("discarded", false)) continue;
        std::size_t w = select_rec.at("w_index");
        std::size_t l = select_rec.at("l_index");
        const auto& files = images_rec.at("bon");
        rec.winning_tokens = tokens_for(
            files[w].at("path"),
            files[w].contains("tokens") ? files[w].at("tokens").get<std::vector<int>>()
                                        : std::vector<int>{});
        rec.losing_tokens = tokens_for(
            files[l].at("path"),
            files[l].contains("tokens") ? files[l].at("tokens").get<std::vector<int>>()
                                        : std::vector<int>{});
        rec.kind = PerturbKind::Swap;
      } else {
        SelectionResult selection = select_rec.at("selection").get<SelectionResult>();
        if (selection.discarded) {
          ++summary.discarded;
          continue;
        }
        const std::string kind_name(perturb_kind_name(*selection.chosen_kind));
        rec.kind = *selection.chosen_kind;
        if (auto t = selection.t_scores[static_cast<std::size_t>(*selection.chosen_kind)]) {
          rec.t_score = *t;
        }
        const nlohmann::json* entry = nullptr;
        for (const auto& e : images_rec.at("images")) {
          if (e.at("kind") == kind_name) entry = &e;
        }
        if (!entry) throw StageIncomplete("images record missing chosen candidate");
        rec.winning_tokens = tokens_for(
            entry->at("w"),
            entry->contains("w_tokens") ? entry->at("w_tokens").get<std::vector<int>>()
                                        : std::vector<int>{});
        rec.losing_tokens = tokens_for(
            entry->at("l"),
            entry->contains("l_tokens") ? entry->at("l_tokens").get<std::vector<int>>()
                                        : std::vector<int>{});
      }

      try {
        policy.validate_record(rec);
      } catch (const ConfigError&) {
        ++skipped_records;
        continue;
      }
      dataset.push_back(std::move(rec));
    }

    if (dataset.empty()) throw StageIncomplete("no usable preference records to train on");
    TrainResult result = train(std::move(policy), dataset, config_.simpo);

    std::filesystem::create_directories(config_.checkpoints_dir());
    std::filesystem::create_directories(config_.reports_dir());
    save_checkpoint(result.policy, config_.simpo.steps,
                    (config_.checkpoints_dir() / "policy.ckpt").string());
    {
      std::ofstream trace(config_.reports_dir() / "train_trace.csv");
      trace << "step,loss,mean_margin\n";
      char buf[96];
      for (const auto& row : result.trace) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", row.step, row.loss, row.mean_margin);
        trace << buf;
      }
    }

    nlohmann::json rec = {{"stage", "train"},
                          {"records_used", dataset.size()},
                          {"records_skipped", skipped_records},
                          {"initial_loss", result.trace.front().loss},
                          {"final_loss", result.trace.back().loss},
                          {"initial_margin", result.trace.front().mean_margin},
                          {"final_margin", result.trace.back().mean_margin},
                          {"checkpoint", "checkpoints/policy.ckpt"},
                          {"trace", "reports/train_trace.csv"}};
    manifest_.append(rec);
    summary.processed = dataset.size();
    summary.skipped += skipped_records;
    return summary;
  }

  // -- analyze ---------------------------------------------------------------

  StageSummary stage_analyze() {
    require_stage_complete("select");
    StageSummary summary{"analyze"};
    if (manifest_.has_stage("analyze")) {
      ++summary.skipped;
      return summary;
    }

    CompareReport report;
    std::vector<GapRecord> selected_gaps;
    Rng root = stream("analyze");

    for (std::uint64_t id : scope()) {
      StructuredPrompt base = base_prompt(id);
      const std::string cat(category_name(base.category));

      BestOfNOutcome bon =
          run_best_of_n(base, config_.best_of_n, config_.decode, config_.corruption, *backend_,
                        root.substream(id).substream("bon").state());
      CaseLabel bon_label =
          classify_indistinguishable(bon.answers[bon.best_index], bon.answers[bon.worst_index]);
      ++report.bon_cases[cat][static_cast<std::size_t>(bon_label)];
      ++report.bon_total;
      if (indistinguishable(bon_label)) ++report.bon_indistinguishable;
      report.bon_gaps.push_back(
          GapRecord{PerturbKind::Swap, bon.card.delta_local(), bon.card.delta_global()});

      // This run's pair, straight from the manifest.
      const nlohmann::json& select_rec = *manifest_.find("select", id);
      std::optional<ScoreCard> chosen;
      if (config_.ablation.best_of_n_mode) {
        if (!select_rec.value("discarded", false)) chosen = select_rec.at("card").get<ScoreCard>();
      } else {
        SelectionResult selection = select_rec.at("selection").get<SelectionResult>();
        if (!selection.discarded) {
          for (const auto& cj : manifest_.find("score", id)->at("cards")) {
            ScoreCard card = cj.get<ScoreCard>();
            if (card.kind == *selection.chosen_kind) chosen = std::move(card);
          }
        }
      }
      if (!chosen) {
        ++report.ospo_discarded;
        continue;
      }
      std::vector<ProbeResult> w_probes, l_probes;
      for (const auto& t : chosen->local) {
        w_probes.push_back(t.winning);
        l_probes.push_back(t.losing);
      }
      CaseLabel label =
          classify_indistinguishable(binary_answers(w_probes), binary_answers(l_probes));
      ++report.ospo_cases[cat][static_cast<std::size_t>(label)];
      ++report.ospo_total;
      if (indistinguishable(label)) ++report.ospo_indistinguishable;
      GapRecord gap{chosen->kind, chosen->delta_local(), chosen->delta_global()};
      report.ospo_gaps.push_back(gap);
      selected_gaps.push_back(gap);
    }

    std::filesystem::create_directories(config_.reports_dir());
    {
      std::ofstream out(config_.reports_dir() / "cases.csv");
      out << cases_csv(report);
    }
    if (!selected_gaps.empty()) {
      std::ofstream out(config_.reports_dir() / "gap_density.csv");
      out << gap_density_report(selected_gaps).to_csv();
    }
    if (!report.bon_gaps.empty()) {
      std::ofstream out(config_.reports_dir() / "gap_density_best_of_n.csv");
      out << gap_density_report(report.bon_gaps).to_csv();
    }

    auto [ospo_mean, ospo_n] =
        mean_local_given_global_below(report.ospo_gaps, config_.low_global_threshold);
    auto [bon_mean, bon_n] =
        mean_local_given_global_below(report.bon_gaps, config_.low_global_threshold);

    auto case_table = [](const std::map<std::string, std::array<std::size_t, 4>>& table) {
      nlohmann::json out = nlohmann::json::object();
      for (const auto& [cat, counts] : table) {
        out[cat] = {{"all_yes", counts[0]},
                    {"all_no", counts[1]},
                    {"all_same", counts[2]},
                    {"distinct", counts[3]}};
      }
      return out;
    };

    nlohmann::json rec = {{"stage", "analyze"},
                          {"bon_cases", case_table(report.bon_cases)},
                          {"ospo_cases", case_table(report.ospo_cases)},
                          {"fraction_ratio", std::isfinite(report.fraction_ratio())
                                                 ? nlohmann::json(report.fraction_ratio())
                                                 : nlohmann::json()},
                          {"bon_total", report.bon_total},
                          {"bon_indistinguishable", report.bon_indistinguishable},
                          {"bon_fraction", report.bon_fraction()},
                          {"ospo_total", report.ospo_total},
                          {"ospo_indistinguishable", report.ospo_indistinguishable},
                          {"ospo_fraction", report.ospo_fraction()},
                          {"ospo_discarded", report.ospo_discarded},
                          {"ospo_mean_local_low_global", ospo_mean},
                          {"ospo_low_global_n", ospo_n},
                          {"bon_mean_local_low_global", bon_mean},
                          {"bon_low_global_n", bon_n},
                          {"cases_csv", "reports/cases.csv"},
                          {"gap_density_csv", "reports/gap_density.csv"}};
    manifest_.append(rec);
    summary.processed = report.bon_total;
    return summary;
  }

  PipelineConfig config_;
  Manifest manifest_;
  std::shared_ptr<Backend> backend_;
  KeywordPools pools_;

 public:
  /// Backend-mode question generation ("Questions:" transcript parsing).
  static QuestionSet decompose_questions_backend(const StructuredPrompt& base, Backend& backend,
                                                 std::uint64_t seed) {
    std::vector<Message> messages = {
        {"system",
         "You are an assistant dedicated to transforming a sentence into several questions. You "
         "should first divide it into simple concepts and relations, and then provide the "
         "corresponding questions. Avoid using pronouns, such as he, she, it, and they."},
        {"user", base.surface}};
    std::string transcript = backend.text_complete(messages, seed);
    std::size_t at = transcript.find("Questions:");
    if (at == std::string::npos) {
      throw TranscriptParseError("question transcript missing 'Questions:' segment");
    }
    QuestionSet qs;
    std::string tail = transcript.substr(at + std::string("Questions:").size());
    std::string current;
    for (char c : tail) {
      current.push_back(c);
      if (c == '?') {
        std::string q = text::trim(current);
        current.clear();
        if (q.empty()) continue;
        std::string fact;
        try {
          ParsedQuestion parsed = parse_question(q);
          switch (parsed.type) {
            case ParsedQuestion::Type::Existence: fact = object_fact(parsed.noun); break;
            case ParsedQuestion::Type::Count: fact = count_fact(parsed.noun, parsed.count); break;
            default: break;  // attribute kind / relation split need the vocabulary
          }
        } catch (const UnanswerableQuestion&) {
        }
        qs.local.push_back({q, fact});
      }
    }
    if (qs.local.empty()) throw TranscriptParseError("question transcript yielded no questions");
    qs.global = global_question(base.surface);
    return qs;
  }
};

// ---------------------------------------------------------------------------
// Report emission and manifest validation
// ---------------------------------------------------------------------------

inline std::string emit_report(const PipelineConfig& config, Manifest& manifest) {
  if (!manifest.exists()) throw StageIncomplete("no manifest to report on");
  manifest.load();
  auto select_ids = manifest.sample_ids("select");
  if (select_ids.empty()) throw StageIncomplete("select stage has not produced any records");

  std::map<std::string, std::array<std::size_t, 4>> kind_table;  // swap/replace/drop/discarded
  std::vector<GapRecord> selected_gaps;
  std::size_t discarded = 0;
  for (std::uint64_t id : select_ids) {
    const nlohmann::json* prompts_rec = manifest.find("prompts", id);
    if (!prompts_rec) continue;
    std::string cat = prompts_rec->value("category", "unknown");
    const nlohmann::json& rec = *manifest.find("select", id);
    if (config.ablation.best_of_n_mode) {
      if (rec.value("discarded", false)) {
        ++kind_table[cat][3];
        ++discarded;
      } else {
        ++kind_table[cat][0];
        ScoreCard card = rec.at("card").get<ScoreCard>();
        selected_gaps.push_back(GapRecord{card.kind, card.delta_local(), card.delta_global()});
      }
      continue;
    }
    SelectionResult selection = rec.at("selection").get<SelectionResult>();
    if (selection.discarded) {
      ++kind_table[cat][3];
      ++discarded;
      continue;
    }
    ++kind_table[cat][static_cast<std::size_t>(*selection.chosen_kind)];
    for (const auto& gj : rec.at("gaps")) {
      GapRecord gap = gj.get<GapRecord>();
      if (gap.kind == *selection.chosen_kind) selected_gaps.push_back(gap);
    }
  }

  std::string md;
  md += "# OSPO run report\n\n";
  md += "- config hash: `" + config.config_hash() + "`\n";
  md += "- seed: " + std::to_string(config.seed) + "\n";
  md += "- samples: " + std::to_string(select_ids.size()) + "\n";
  md += "- discarded: " + std::to_string(discarded) + " (" +
        std::to_string(select_ids.empty() ? 0.0
                                          : 100.0 * static_cast<double>(discarded) /
                                                static_cast<double>(select_ids.size())) +
        "%)\n\n";

  md += "## Selected perturbation kinds\n\n";
  md += "| category | swap | replace | drop | discarded |\n";
  md += "|---|---|---|---|---|\n";
  for (const auto& [cat, row] : kind_table) {
    md += "| " + cat + " | " + std::to_string(row[0]) + " | " + std::to_string(row[1]) + " | " +
          std::to_string(row[2]) + " | " + std::to_string(row[3]) + " |\n";
  }

  if (!selected_gaps.empty()) {
    double sum_l = 0, sum_g = 0;
    for (const auto& g : selected_gaps) {
      sum_l += g.delta_local;
      sum_g += g.delta_global;
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "\n## Gap summary\n\n- mean delta_local: %.4f\n- mean delta_global: %.4f\n",
                  sum_l / static_cast<double>(selected_gaps.size()),
                  sum_g / static_cast<double>(selected_gaps.size()));
    md += buf;
  }

  if (const nlohmann::json* train_rec = manifest.find_stage("train")) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "\n## Training\n\n- records: %zu (skipped %zu)\n- loss: %.6f -> %.6f\n- mean "
                  "margin: %.6f -> %.6f\n- checkpoint: %s\n",
                  train_rec->at("records_used").get<std::size_t>(),
                  train_rec->at("records_skipped").get<std::size_t>(),
                  train_rec->at("initial_loss").get<double>(),
                  train_rec->at("final_loss").get<double>(),
                  train_rec->at("initial_margin").get<double>(),
                  train_rec->at("final_margin").get<double>(),
                  train_rec->at("checkpoint").get<std::string>().c_str());
    md += buf;
  }

  if (const nlohmann::json* an = manifest.find_stage("analyze")) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "\n## Best-of-N comparison\n\n- best-of-n indistinguishable fraction: %.4f "
                  "(%zu/%zu)\n- ospo indistinguishable fraction: %.4f (%zu/%zu)\n- mean "
                  "delta_local at delta_global < %.2f: ospo %.4f vs best-of-n %.4f\n- cases: "
                  "%s\n- gap density: %s\n",
                  an->at("bon_fraction").get<double>(),
                  an->at("bon_indistinguishable").get<std::size_t>(),
                  an->at("bon_total").get<std::size_t>(), an->at("ospo_fraction").get<double>(),
                  an->at("ospo_indistinguishable").get<std::size_t>(),
                  an->at("ospo_total").get<std::size_t>(), config.low_global_threshold,
                  an->at("ospo_mean_local_low_global").get<double>(),
                  an->at("bon_mean_local_low_global").get<double>(),
                  an->at("cases_csv").get<std::string>().c_str(),
                  an->at("gap_density_csv").get<std::string>().c_str());
    md += buf;

    auto render_cases = [&md](const char* title, const nlohmann::json& table) {
      md += std::string("\n### ") + title + "\n\n";
      md += "| category | all-yes | all-no | all-same | distinct |\n";
      md += "|---|---|---|---|---|\n";
      for (auto it = table.begin(); it != table.end(); ++it) {
        const auto& row = it.value();
        md += "| " + it.key() + " | " + std::to_string(row.at("all_yes").get<std::size_t>()) +
              " | " + std::to_string(row.at("all_no").get<std::size_t>()) + " | " +
              std::to_string(row.at("all_same").get<std::size_t>()) + " | " +
              std::to_string(row.at("distinct").get<std::size_t>()) + " |\n";
      }
    };
    if (an->contains("bon_cases")) render_cases("Best-of-N cases", an->at("bon_cases"));
    if (an->contains("ospo_cases")) render_cases("OSPO cases", an->at("ospo_cases"));
  }

  std::filesystem::create_directories(config.reports_dir());
  std::ofstream out(config.reports_dir() / "report.md");
  out << md;
  return md;
}

/// Checks every type invariant the manifest can express; violations are
/// returned as data.
inline std::vector<Violation> validate_manifest(Manifest& manifest,
                                                const PipelineConfig* config = nullptr) {
  manifest.load();
  std::vector<Violation> violations;
  const auto& records = manifest.records();
  if (records.empty()) {
    violations.push_back({"header", "manifest is empty", std::nullopt});
    return violations;
  }
  if (records.front().value("stage", "") != "header") {
    violations.push_back({"header", "first record is not a header", std::nullopt});
  } else if (config &&
             records.front().value("config_hash", "") != config->config_hash()) {
    violations.push_back({"config_hash", "manifest config hash does not match", std::nullopt});
  }

  std::map<std::pair<std::string, std::uint64_t>, int> seen;
  for (std::size_t i = records.empty() ? 0 : 1; i < records.size(); ++i) {
    const auto& rec = records[i];
    std::string stage = rec.value("stage", "");
    if (stage.empty()) {
      violations.push_back({"stage_marker", "record " + std::to_string(i) + " missing stage tag",
                            std::nullopt});
      continue;
    }
    if (stage_rank(stage) < 0) {
      violations.push_back({"stage_marker", "record " + std::to_string(i) + " has unknown stage '" +
                                                stage + "'",
                            std::nullopt});
      continue;
    }
    if (!rec.contains("sample_id")) continue;
    std::uint64_t id = rec.at("sample_id");
    if (++seen[{stage, id}] > 1) {
      violations.push_back({"duplicate", "duplicate record for stage " + stage, id});
    }

    int rank = stage_rank(stage);
    if (rank > 0) {
      const std::string& prev = stage_order()[static_cast<std::size_t>(rank - 1)];
      bool prev_ok = manifest.has(prev, id) || manifest.has_stage(prev);
      if (!prev_ok) {
        violations.push_back(
            {"stage_order", "stage " + stage + " present without prior stage " + prev, id});
      }
    }

    auto check_range = [&](double v, const char* what) {
      if (v < -1.0 - 1e-12 || v > 1.0 + 1e-12) {
        violations.push_back(
            {"score_range", std::string(what) + " out of [-1, 1]: " + std::to_string(v), id});
      }
    };
    if (stage == "score" && rec.contains("cards")) {
      for (const auto& cj : rec.at("cards")) {
        check_range(cj.at("s_local_w"), "s_local_w");
        check_range(cj.at("s_global_w"), "s_global_w");
        check_range(cj.at("s_local_l"), "s_local_l");
        check_range(cj.at("s_global_l"), "s_global_l");
        // S must equal the mean margin of its own transcript.
        ScoreCard card = cj.get<ScoreCard>();
        if (!card.local.empty()) {
          double w_sum = 0.0, l_sum = 0.0;
          for (const auto& t : card.local) {
            w_sum += t.winning.p_yes - t.winning.p_no;
            l_sum += t.losing.p_yes - t.losing.p_no;
          }
          double n = static_cast<double>(card.local.size());
          if (std::abs(card.s_local_w - w_sum / n) > 1e-9 ||
              std::abs(card.s_local_l - l_sum / n) > 1e-9) {
            violations.push_back(
                {"score_mean", "score differs from the mean of its transcript", id});
          }
        }
      }
    }
    if (stage == "select" && rec.contains("gaps")) {
      for (const auto& gj : rec.at("gaps")) {
        double dl = gj.at("delta_local"), dg = gj.at("delta_global");
        if (dl < -2.0 - 1e-12 || dl > 2.0 + 1e-12 || dg < -2.0 - 1e-12 || dg > 2.0 + 1e-12) {
          violations.push_back({"gap_range", "gap out of [-2, 2]", id});
        }
      }
      if (rec.contains("selection")) {
        const auto& sel = rec.at("selection");
        if (!sel.value("discarded", false)) {
          int chosen = sel.value("chosen_index", 0);
          if (chosen < 1 || chosen > 3) {
            violations.push_back({"selection", "chosen_index outside 1..3", id});
          } else if (!config || (!config->ablation.random_selection &&
                                 !config->ablation.best_of_n_mode)) {
            // The chosen candidate must be the ratio argmax and carry a
            // positive local gap.
            std::vector<GapRecord> gaps;
            for (const auto& gj : rec.at("gaps")) gaps.push_back(gj.get<GapRecord>());
            if (!gaps.empty()) {
              SelectionResult recheck =
                  select_pair(gaps, config ? config->selection_epsilon : 1e-6);
              if (recheck.discarded || recheck.chosen_index != chosen) {
                violations.push_back(
                    {"selection", "recorded choice disagrees with the selection rule", id});
              }
            }
          }
        }
      }
    }
    if (stage == "images" && config) {
      auto check_tokens = [&](const nlohmann::json& entry, const char* key) {
        if (!entry.contains(key)) return;
        for (int t : entry.at(key).get<std::vector<int>>()) {
          if (t < 0 || static_cast<std::size_t>(t) >= config->policy_shape.vocab) {
            violations.push_back({"token_bounds", "token id out of vocabulary", id});
            return;
          }
        }
      };
      if (rec.contains("images")) {
        for (const auto& entry : rec.at("images")) {
          check_tokens(entry, "w_tokens");
          check_tokens(entry, "l_tokens");
        }
      }
    }
  }
  return violations;
}

}  // namespace ospo
