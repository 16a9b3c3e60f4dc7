#pragma once

#include <algorithm>
#include <deque>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "ospo/backend.hpp"
#include "ospo/keywords.hpp"
#include "ospo/prompt.hpp"
#include "ospo/prompt_forge.hpp"
#include "ospo/questions.hpp"
#include "ospo/rng.hpp"
#include "ospo/scene.hpp"
#include "ospo/text.hpp"

namespace ospo {

/// Deterministic scene-graph backend. Images are scene graphs realized from
/// the dense prompt and then corrupted with seeded object omission, binding
/// swaps and attribute replacement; VQA answers are grounded exactly against
/// the graph with a configurable answer-noise level.
class SimulatorBackend : public Backend {
 public:
  explicit SimulatorBackend(KeywordPools pools = builtin::pools(), std::size_t vocab_capacity = 512)
      : pools_(std::move(pools)), vocab_(pools_, vocab_capacity), parser_(pools_) {
    for (const auto& n : pools_.objects) known_nouns_.insert(n);
    for (const auto& n : builtin::persons()) known_nouns_.insert(n);
    for (const auto& n : builtin::context_nouns()) known_nouns_.insert(n);
  }

  const Vocabulary& vocabulary() const { return vocab_; }
  const KeywordPools& pools() const { return pools_; }

  ImageArtifact generate_image(const StructuredPrompt& dense, const DecodeParams& decode,
                               const CorruptionParams& corruption) override {
    corruption.validate();
    if (dense.entities.empty()) throw EmptyPrompt("cannot render an empty prompt");

    const double scale = std::max(1.0, decode.temperature);
    auto eff = [&](double p) { return std::min(1.0, p * scale); };

    Rng rng = Rng(decode.seed).substream("image").substream(Rng::hash_label(dense.surface));

    // Intended scene straight from the structured prompt.
    SceneGraph g;
    for (std::size_t i = 0; i < dense.entities.size(); ++i) {
      SceneObject o;
      o.object = dense.entities[i].object;
      o.attributes = dense.entities[i].attributes;
      if (auto c = dense.count_of(i)) {
        o.count = *c;
        o.counted = true;
      }
      g.objects.push_back(std::move(o));
    }

    // Omission pass.
    std::vector<bool> kept(g.objects.size(), true);
    for (std::size_t i = 0; i < g.objects.size(); ++i) {
      if (rng.next_bernoulli(eff(corruption.p_omit))) kept[i] = false;
    }
    SceneGraph out;
    std::vector<std::size_t> remap(g.objects.size(), SIZE_MAX);
    for (std::size_t i = 0; i < g.objects.size(); ++i) {
      if (!kept[i]) continue;
      remap[i] = out.objects.size();
      out.objects.push_back(g.objects[i]);
    }
    for (const auto& r : dense.relations) {
      if (remap[r.subject] == SIZE_MAX || remap[r.object] == SIZE_MAX) continue;
      out.relations.push_back(Relation{remap[r.subject], r.kind, r.phrase, remap[r.object]});
    }

    // Misbinding pass: each cross-object binding pair swaps independently.
    for (std::size_t o1 = 0; o1 < out.objects.size(); ++o1) {
      for (std::size_t a1 = 0; a1 < out.objects[o1].attributes.size(); ++a1) {
        for (std::size_t o2 = o1 + 1; o2 < out.objects.size(); ++o2) {
          for (std::size_t a2 = 0; a2 < out.objects[o2].attributes.size(); ++a2) {
            if (rng.next_bernoulli(eff(corruption.p_misbind))) {
              std::swap(out.objects[o1].attributes[a1], out.objects[o2].attributes[a2]);
            }
          }
        }
      }
    }

    // Wrong-attribute pass: replace values within kind.
    for (auto& o : out.objects) {
      for (auto& a : o.attributes) {
        if (rng.next_bernoulli(eff(corruption.p_wrong_attr))) {
          const auto& pool = pool_for(pools_, a.kind);
          if (pool.size() < 2) continue;
          std::string replacement;
          do {
            replacement = rng.pick(pool);
          } while (replacement == a.value);
          a.value = replacement;
        }
      }
    }

    out.token_sequence = vocab_.serialize(out);
    ImageArtifact artifact;
    artifact.scene = std::move(out);
    artifact.decode = decode;
    return artifact;
  }

  ProbeResult vqa_probe(const ImageArtifact& image, const std::string& question) override {
    if (!image.scene) throw UnanswerableQuestion("simulator probe requires a scene payload");
    const SceneGraph& g = *image.scene;
    ParsedQuestion q = parse_question(question);

    if (q.type == ParsedQuestion::Type::Global) {
      double overlap = global_overlap(g, q.prompt_surface);
      double p_yes = eta_ + (1.0 - 2.0 * eta_) * overlap;
      return ProbeResult{p_yes, 1.0 - p_yes};
    }

    bool truth = ground(g, q);
    double p_yes = truth ? 1.0 - eta_ : eta_;
    return ProbeResult{p_yes, 1.0 - p_yes};
  }

  std::string text_complete(const std::vector<Message>& messages, std::uint64_t seed) override {
    if (messages.empty()) throw ConfigError("text_complete requires at least one message");
    {
      std::lock_guard<std::mutex> lock(fixture_mutex_);
      if (!fixtures_.empty()) {
        std::string out = fixtures_.front();
        fixtures_.pop_front();
        return out;
      }
    }
    return synthesize_transcript(messages, seed);
  }

  /// Answer-noise level applied by vqa_probe.
  void set_eta(double eta) {
    if (eta < 0.0 || eta >= 0.5) throw ConfigError("eta must lie in [0, 0.5)");
    eta_ = eta;
  }
  double eta() const { return eta_; }

  /// Queues a canned text_complete response (test fixture).
  void push_fixture(std::string transcript) {
    std::lock_guard<std::mutex> lock(fixture_mutex_);
    fixtures_.push_back(std::move(transcript));
  }

 private:
  static std::string last_user_text(const std::vector<Message>& messages) {
    for (auto it = messages.rbegin(); it != messages.rend(); ++it) {
      if (it->role == "user") return it->text;
    }
    return messages.back().text;
  }

  static std::string system_text(const std::vector<Message>& messages) {
    for (const auto& m : messages) {
      if (m.role == "system") return m.text;
    }
    return "";
  }

  /// Synthesizes well-formed transcripts for the few-shot request families:
  /// keyword generation, densification, and question generation.
  std::string synthesize_transcript(const std::vector<Message>& messages,
                                    std::uint64_t seed) const {
    const std::string user = last_user_text(messages);
    const std::string system = system_text(messages);
    Rng rng = Rng(seed).substream("canned_text");

    // Wide windows so repeated requests cover a whole pool well within the
    // caller's attempt budget.
    auto emit_pool_slice = [&](const std::vector<std::string>& pool) {
      std::size_t start = rng.pick_index(pool.size());
      std::vector<std::string> words;
      for (std::size_t i = 0; i < 48 && i < pool.size(); ++i) {
        words.push_back(pool[(start + i) % pool.size()]);
      }
      return text::join(words, ", ");
    };

    if (user.find("Prompt 1:") != std::string::npos && user.find("Prompt 2:") != std::string::npos) {
      // Densification request. Echo both prompts with a shared appended scene.
      auto extract = [&](std::string_view tag) -> std::string {
        std::size_t at = user.find(tag);
        if (at == std::string::npos) return "";
        std::size_t from = at + tag.size();
        std::size_t to = user.find('\n', from);
        if (to == std::string::npos) to = user.size();
        return text::trim(user.substr(from, to - from));
      };
      std::string p1 = extract("Prompt 1:");
      std::string p2 = extract("Prompt 2:");
      std::string setting = rng.pick(builtin::settings());
      std::string noun = rng.pick(builtin::context_nouns());
      std::string shared = "beside a quiet " + noun + ", " + setting;
      return "Step 1. Prompt 1 Object Bindings: " + p1 +
             "\nStep 2. Prompt 1 Dense: " + p1 + ", " + shared +
             "\nStep 3. Prompt 2 Object Bindings: " + p2 +
             "\nStep 4. Prompt 2 Dense: " + p2 + ", " + shared;
    }

    if (system.find("transforming a sentence into several questions") != std::string::npos) {
      auto parsed = parser_.try_parse(user);
      if (!parsed) return "Concepts and relations: ; Questions:";
      QuestionSet qs = decompose_questions(*parsed);
      std::string out = "Concepts and relations: " + parsed->surface + "; Questions:";
      for (const auto& lq : qs.local) out += " " + lq.question;
      return out;
    }

    if (system.find("generates common object") != std::string::npos) return emit_pool_slice(pools_.objects);
    if (system.find("generates common colors") != std::string::npos) return emit_pool_slice(pools_.colors);
    if (system.find("generates common shape") != std::string::npos) return emit_pool_slice(pools_.shapes);
    if (system.find("generates common texture") != std::string::npos) return emit_pool_slice(pools_.textures);
    if (system.find("spatial relative word") != std::string::npos) return emit_pool_slice(pools_.spatial);

    if (system.find("nonspatial relationship words") != std::string::npos ||
        system.find("natural compositional phrases") != std::string::npos) {
      // Base-prompt generation for the in-context categories.
      Category cat = system.find("nonspatial") != std::string::npos ? Category::NonSpatial
                                                                    : Category::Complex;
      Rng prng = rng.substream("prompt");
      StructuredPrompt p = cat == Category::NonSpatial
                               ? detail::non_spatial_prompt(prng, pools_, rng.pick_index(2))
                               : detail::complex_prompt(prng, pools_, rng.pick_index(2));
      return p.surface;
    }

    return "";
  }

  bool ground(const SceneGraph& g, const ParsedQuestion& q) const {
    switch (q.type) {
      case ParsedQuestion::Type::Existence: {
        require_known_noun(q.noun);
        for (const auto& o : g.objects) {
          if (o.object == q.noun) return true;
        }
        return false;
      }
      case ParsedQuestion::Type::Attribute: {
        require_known_noun(q.noun);
        for (const auto& o : g.objects) {
          if (o.object != q.noun) continue;
          for (const auto& a : o.attributes) {
            if (a.value == q.value) return true;
          }
        }
        return false;
      }
      case ParsedQuestion::Type::Count: {
        // q.noun is singular for count 1, plural otherwise.
        int total = 0;
        bool seen_noun = false;
        for (const auto& o : g.objects) {
          if (o.object == q.noun || text::pluralize(o.object) == q.noun) {
            total += o.count;
            seen_noun = true;
          }
        }
        if (!seen_noun && !known_nouns_.count(q.noun) && !known_plural(q.noun)) {
          throw UnanswerableQuestion("unknown noun in count question: " + q.noun);
        }
        return total == q.count;
      }
      case ParsedQuestion::Type::Relation: {
        auto [subj, phrase] = split_subject_phrase(q.noun);
        for (const auto& r : g.relations) {
          if (g.objects[r.subject].object == subj && r.phrase == phrase &&
              g.objects[r.object].object == q.noun2) {
            return true;
          }
        }
        return false;
      }
      case ParsedQuestion::Type::Global:
        break;
    }
    throw UnanswerableQuestion("unsupported question type");
  }

  /// Graded global grounding: Jaccard overlap between the scene's facts and
  /// the base prompt's facts. A faithful scene that only adds shared context
  /// keeps a high overlap on both sides of a pair, which is what lets the
  /// global gap stay small while local gaps stay large.
  double global_overlap(const SceneGraph& g, const std::string& surface) const {
    auto parsed = parser_.try_parse(surface);
    if (!parsed) {
      throw UnanswerableQuestion("global question embeds an unparseable prompt: " + surface);
    }
    std::set<std::string> base;
    for (auto& f : prompt_facts(*parsed)) base.insert(f);
    std::set<std::string> scene;
    for (auto& f : scene_facts(g)) scene.insert(f);
    if (base.empty() && scene.empty()) return 1.0;
    std::size_t inter = 0;
    for (const auto& f : base) inter += scene.count(f);
    std::size_t uni = base.size() + scene.size() - inter;
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }

  void require_known_noun(const std::string& noun) const {
    if (!known_nouns_.count(noun)) {
      throw UnanswerableQuestion("unknown noun in question: " + noun);
    }
  }

  bool known_plural(const std::string& plural) const {
    for (const auto& n : known_nouns_) {
      if (text::pluralize(n) == plural) return true;
    }
    return false;
  }

  /// Splits "subj phrase" where subj is the longest known noun prefix.
  std::pair<std::string, std::string> split_subject_phrase(const std::string& combined) const {
    std::string best;
    for (const auto& n : known_nouns_) {
      if (combined.size() > n.size() + 1 && combined.compare(0, n.size(), n) == 0 &&
          combined[n.size()] == ' ' && n.size() > best.size()) {
        best = n;
      }
    }
    if (best.empty()) {
      throw UnanswerableQuestion("cannot split relation question: " + combined);
    }
    return {best, combined.substr(best.size() + 1)};
  }

  KeywordPools pools_;
  Vocabulary vocab_;
  PromptParser parser_;
  std::set<std::string> known_nouns_;
  double eta_ = 0.0;
  std::deque<std::string> fixtures_;
  mutable std::mutex fixture_mutex_;
};

}  // namespace ospo
