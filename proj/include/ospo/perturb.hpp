#pragma once

#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ospo/backend.hpp"
#include "ospo/errors.hpp"
#include "ospo/keywords.hpp"
#include "ospo/prompt.hpp"
#include "ospo/prompt_forge.hpp"
#include "ospo/rng.hpp"
#include "ospo/text.hpp"

namespace ospo {

/// Order is fixed and used for tie-breaking in pair selection.
enum class PerturbKind { Swap = 0, Replace = 1, Drop = 2 };

inline std::string_view perturb_kind_name(PerturbKind k) {
  switch (k) {
    case PerturbKind::Swap: return "swap";
    case PerturbKind::Replace: return "replace";
    case PerturbKind::Drop: return "drop";
  }
  return "swap";
}

inline PerturbKind perturb_kind_from_name(std::string_view name) {
  if (name == "swap") return PerturbKind::Swap;
  if (name == "replace") return PerturbKind::Replace;
  if (name == "drop") return PerturbKind::Drop;
  throw ConfigError("unknown perturbation kind: " + std::string(name));
}

inline const std::vector<PerturbKind>& all_perturb_kinds() {
  static const std::vector<PerturbKind> v = {PerturbKind::Swap, PerturbKind::Replace,
                                             PerturbKind::Drop};
  return v;
}

namespace detail {

// Prompt family, which decides what each operation may touch. Layout splits
// into its spatial and numeracy template families.
enum class PerturbFamily { AttributeLike, Spatial, Numeracy, NonSpatial };

inline PerturbFamily family_of(const StructuredPrompt& p) {
  switch (p.category) {
    case Category::Attribute:
    case Category::Complex:
      return PerturbFamily::AttributeLike;
    case Category::NonSpatial:
      return PerturbFamily::NonSpatial;
    case Category::Layout:
      return p.counts.empty() ? PerturbFamily::Spatial : PerturbFamily::Numeracy;
  }
  return PerturbFamily::AttributeLike;
}

inline void drop_entity(StructuredPrompt& p, std::size_t victim) {
  std::vector<Relation> relations;
  for (const auto& r : p.relations) {
    if (r.subject == victim || r.object == victim) continue;
    Relation nr = r;
    if (nr.subject > victim) --nr.subject;
    if (nr.object > victim) --nr.object;
    relations.push_back(nr);
  }
  p.relations = std::move(relations);
  std::vector<CountBinding> counts;
  for (const auto& c : p.counts) {
    if (c.entity == victim) continue;
    CountBinding nc = c;
    if (nc.entity > victim) --nc.entity;
    counts.push_back(nc);
  }
  p.counts = std::move(counts);
  p.entities.erase(p.entities.begin() + static_cast<long>(victim));
}

struct AttrSlot {
  std::size_t entity;
  std::size_t attr;
};

inline std::vector<AttrSlot> attr_slots(const StructuredPrompt& p) {
  std::vector<AttrSlot> slots;
  for (std::size_t e = 0; e < p.entities.size(); ++e) {
    for (std::size_t a = 0; a < p.entities[e].attributes.size(); ++a) {
      slots.push_back({e, a});
    }
  }
  return slots;
}

inline std::set<std::string> all_values(const StructuredPrompt& p) {
  std::set<std::string> vals;
  for (const auto& e : p.entities) {
    vals.insert(e.object);
    for (const auto& a : e.attributes) vals.insert(a.value);
  }
  for (const auto& r : p.relations) vals.insert(r.phrase);
  return vals;
}

inline std::string fresh_draw(Rng& rng, const std::vector<std::string>& pool,
                              const std::set<std::string>& excluded, const char* what) {
  bool any_fresh = false;
  for (const auto& w : pool) {
    if (!excluded.count(w)) {
      any_fresh = true;
      break;
    }
  }
  if (!any_fresh) throw NotPerturbable(std::string("no fresh ") + what + " available in pool");
  for (;;) {
    const std::string& w = rng.pick(pool);
    if (!excluded.count(w)) return w;
  }
}

}  // namespace detail

/// Produces the negative prompt for one perturbation kind. The eligible
/// targets per family follow the prompt-template inventory: attribute-style
/// prompts perturb attributes or objects, spatial layouts the relation,
/// numeracy layouts the counts, and non-spatial prompts their actions
/// (Replace) or objects (Drop). Swap is never defined for non-spatial
/// prompts. Throws NotPerturbable when the prompt lacks the required shape.
inline StructuredPrompt perturb(const StructuredPrompt& base, PerturbKind kind,
                                const KeywordPools& pools, std::uint64_t seed) {
  using detail::PerturbFamily;
  if (base.entities.empty()) throw EmptyPrompt("cannot perturb an empty prompt");
  StructuredPrompt out = base;
  Rng rng = Rng(seed).substream("perturb").substream(perturb_kind_name(kind));
  const PerturbFamily family = detail::family_of(base);

  switch (kind) {
    case PerturbKind::Swap: {
      if (family == PerturbFamily::NonSpatial) {
        throw NotPerturbable("swap has no non-spatial template");
      }
      if (family == PerturbFamily::Spatial) {
        if (out.relations.empty()) throw NotPerturbable("no relation to swap");
        Relation& r = out.relations[rng.pick_index(out.relations.size())];
        std::swap(r.subject, r.object);
        break;
      }
      if (family == PerturbFamily::Numeracy) {
        std::vector<std::pair<std::size_t, std::size_t>> pairs;
        for (std::size_t i = 0; i < out.counts.size(); ++i) {
          for (std::size_t j = i + 1; j < out.counts.size(); ++j) {
            if (out.counts[i].count != out.counts[j].count) pairs.emplace_back(i, j);
          }
        }
        if (pairs.empty()) throw NotPerturbable("needs two distinct counts to swap");
        auto [i, j] = pairs[rng.pick_index(pairs.size())];
        std::swap(out.counts[i].count, out.counts[j].count);
        break;
      }
      // Attribute-like: exchange cross-entity attribute payloads, falling back
      // to object swaps only when no attribute pair is eligible (the few-shot
      // templates always swap attributes when they exist).
      auto slots = detail::attr_slots(out);
      std::vector<std::pair<detail::AttrSlot, detail::AttrSlot>> attr_pairs;
      for (std::size_t i = 0; i < slots.size(); ++i) {
        for (std::size_t j = i + 1; j < slots.size(); ++j) {
          if (slots[i].entity == slots[j].entity) continue;
          const auto& a = out.entities[slots[i].entity].attributes[slots[i].attr];
          const auto& b = out.entities[slots[j].entity].attributes[slots[j].attr];
          if (a == b) continue;
          attr_pairs.emplace_back(slots[i], slots[j]);
        }
      }
      if (!attr_pairs.empty()) {
        auto [sa, sb] = attr_pairs[rng.pick_index(attr_pairs.size())];
        std::swap(out.entities[sa.entity].attributes[sa.attr],
                  out.entities[sb.entity].attributes[sb.attr]);
        break;
      }
      std::vector<std::pair<std::size_t, std::size_t>> object_pairs;
      for (std::size_t i = 0; i < out.entities.size(); ++i) {
        for (std::size_t j = i + 1; j < out.entities.size(); ++j) {
          if (out.entities[i].object != out.entities[j].object) object_pairs.emplace_back(i, j);
        }
      }
      if (object_pairs.empty()) throw NotPerturbable("needs two swappable bindings");
      auto [i, j] = object_pairs[rng.pick_index(object_pairs.size())];
      std::swap(out.entities[i].object, out.entities[j].object);
      break;
    }

    case PerturbKind::Replace: {
      if (family == PerturbFamily::Spatial) {
        if (out.relations.empty()) throw NotPerturbable("no relation to replace");
        std::set<std::string> used;
        for (const auto& r : out.relations) used.insert(r.phrase);
        Relation& r = out.relations[rng.pick_index(out.relations.size())];
        r.phrase = detail::fresh_draw(rng, pools.spatial, used, "spatial phrase");
        r.kind = spatial_kind_of(r.phrase);
        break;
      }
      if (family == PerturbFamily::Numeracy) {
        std::set<int> used;
        for (const auto& c : out.counts) used.insert(c.count);
        std::vector<int> fresh;
        for (int n = 1; n <= 9; ++n) {
          if (!used.count(n)) fresh.push_back(n);
        }
        if (fresh.size() < out.counts.size()) throw NotPerturbable("no fresh counts available");
        for (auto& c : out.counts) {
          std::size_t at = rng.pick_index(fresh.size());
          c.count = fresh[at];
          fresh.erase(fresh.begin() + static_cast<long>(at));
        }
        break;
      }
      if (family == PerturbFamily::NonSpatial) {
        std::set<std::string> used;
        for (const auto& r : out.relations) used.insert(r.phrase);
        bool any = false;
        for (auto& r : out.relations) {
          if (r.kind != RelationKind::Action) continue;
          r.phrase = detail::fresh_draw(rng, builtin::actions(), used, "action");
          used.insert(r.phrase);
          any = true;
        }
        if (!any) throw NotPerturbable("no action to replace");
        break;
      }
      // Attribute-like: one replacement per attributed entity; objects only
      // when the prompt carries no attributes at all.
      std::set<std::string> excluded = detail::all_values(out);
      bool replaced = false;
      for (auto& e : out.entities) {
        if (e.attributes.empty()) continue;
        auto& slot = e.attributes[rng.pick_index(e.attributes.size())];
        slot.value = detail::fresh_draw(rng, pool_for(pools, slot.kind), excluded, "attribute");
        excluded.insert(slot.value);
        replaced = true;
      }
      if (!replaced) {
        Entity& e = out.entities[rng.pick_index(out.entities.size())];
        e.object = detail::fresh_draw(rng, pools.objects, excluded, "object");
      }
      break;
    }

    case PerturbKind::Drop: {
      if (family == PerturbFamily::Spatial) {
        if (out.relations.empty()) throw NotPerturbable("no relation to drop");
        out.relations.erase(out.relations.begin() +
                            static_cast<long>(rng.pick_index(out.relations.size())));
        break;
      }
      if (family == PerturbFamily::Numeracy) {
        if (out.entities.size() >= 2) {
          detail::drop_entity(out, rng.pick_index(out.entities.size()));
          break;
        }
        std::vector<std::size_t> droppable;
        for (std::size_t i = 0; i < out.counts.size(); ++i) {
          if (out.counts[i].count >= 2) droppable.push_back(i);
        }
        if (droppable.empty()) throw NotPerturbable("nothing to drop from a single count of one");
        out.counts.erase(out.counts.begin() +
                         static_cast<long>(droppable[rng.pick_index(droppable.size())]));
        break;
      }
      if (family == PerturbFamily::NonSpatial) {
        std::vector<std::size_t> targets;
        for (const auto& r : out.relations) targets.push_back(r.object);
        if (targets.empty()) throw NotPerturbable("no object to drop");
        detail::drop_entity(out, targets[rng.pick_index(targets.size())]);
        break;
      }
      // Attribute-like: any attribute binding, or a whole entity when two or
      // more are present.
      auto slots = detail::attr_slots(out);
      std::size_t entity_options = out.entities.size() >= 2 ? out.entities.size() : 0;
      std::size_t total = slots.size() + entity_options;
      if (total == 0) throw NotPerturbable("nothing droppable");
      std::size_t pick = rng.pick_index(total);
      if (pick < slots.size()) {
        auto [e, a] = slots[pick];
        out.entities[e].attributes.erase(out.entities[e].attributes.begin() +
                                         static_cast<long>(a));
      } else {
        detail::drop_entity(out, pick - slots.size());
      }
      break;
    }
  }

  out.surface = render(out);
  if (out.surface == base.surface && fact_multiset(out) == fact_multiset(base)) {
    throw InternalError("perturbation produced an identical prompt");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pairwise densification
// ---------------------------------------------------------------------------

enum class DensifyMode { Rule, Backend };

/// A (base, negative) prompt pair jointly densified with a shared scene
/// context. Each side preserves every binding of its source prompt.
struct DensePromptPair {
  StructuredPrompt base_dense;
  StructuredPrompt negative_dense;
  PerturbKind kind{};
  std::vector<std::string> shared_context;
  std::string provenance;  // "rule" | "backend" | "backend_fallback_rule"
  std::string transcript;  // raw model output in backend mode
};

struct DensifyOptions {
  DensifyMode mode = DensifyMode::Rule;
  std::size_t context_items = 2;
  bool fallback_to_rule = true;
  Backend* backend = nullptr;
};

namespace detail {

inline DensePromptPair densify_rule(const StructuredPrompt& base, const StructuredPrompt& negative,
                                    PerturbKind kind, std::uint64_t seed,
                                    std::size_t context_items, const KeywordPools& pools) {
  DensePromptPair out;
  out.kind = kind;
  out.base_dense = base;
  out.negative_dense = negative;
  out.provenance = "rule";

  Rng rng = Rng(seed).substream("densify");
  std::set<std::string> taken;
  for (const auto& e : base.entities) taken.insert(e.object);
  for (const auto& e : negative.entities) taken.insert(e.object);

  std::vector<std::string> context_phrases;
  for (std::size_t i = 0; i < context_items; ++i) {
    std::string noun = detail::draw_distinct(rng, builtin::context_nouns(), taken);
    taken.insert(noun);
    AttrKind kind_pick = detail::attr_kind_cycle(rng.pick_index(3));
    std::string value = rng.pick(pool_for(pools, kind_pick));
    Entity ctx{noun, {AttributeBinding{kind_pick, value}}};
    out.base_dense.entities.push_back(ctx);
    out.negative_dense.entities.push_back(ctx);
    context_phrases.push_back(std::string(text::article_for(value)) + " " + value + " " + noun);
  }
  std::string setting = rng.pick(builtin::settings());

  auto decorate = [&](const StructuredPrompt& src) {
    std::string s = src.surface;
    if (!context_phrases.empty()) s += ", with " + text::join(context_phrases, " and ");
    s += ", " + setting;
    return s;
  };
  out.base_dense.surface = decorate(base);
  out.negative_dense.surface = decorate(negative);
  out.shared_context = context_phrases;
  out.shared_context.push_back(setting);
  return out;
}

/// Extracts the two dense prompts from a four-step densification
/// transcript.
inline std::pair<std::string, std::string> parse_densify_transcript(const std::string& transcript) {
  auto section = [&](std::string_view marker, std::string_view next) -> std::string {
    std::size_t at = transcript.find(marker);
    if (at == std::string::npos) {
      throw TranscriptParseError("densify transcript missing '" + std::string(marker) + "'");
    }
    std::size_t from = at + marker.size();
    std::size_t to = next.empty() ? transcript.size() : transcript.find(next, from);
    if (to == std::string::npos) to = transcript.size();
    return text::trim(transcript.substr(from, to - from));
  };
  std::string dense1 = section("Step 2. Prompt 1 Dense:", "Step 3.");
  std::string dense2 = section("Step 4. Prompt 2 Dense:", "");
  if (dense1.empty() || dense2.empty()) {
    throw TranscriptParseError("densify transcript has empty dense prompts");
  }
  return {dense1, dense2};
}

/// Every binding value of the source prompt must survive verbatim in the
/// densified text.
inline bool preserves_bindings(const StructuredPrompt& src, const std::string& dense) {
  std::string hay = text::to_lower(dense);
  auto contains = [&](const std::string& needle) {
    return hay.find(text::to_lower(needle)) != std::string::npos;
  };
  for (const auto& e : src.entities) {
    if (!contains(e.object) && !contains(text::pluralize(e.object))) return false;
    for (const auto& a : e.attributes) {
      if (!contains(a.value)) return false;
    }
  }
  for (const auto& r : src.relations) {
    if (!contains(r.phrase)) return false;
  }
  for (const auto& c : src.counts) {
    if (!contains(text::number_word(c.count)) && !contains(std::to_string(c.count))) return false;
  }
  return true;
}

}  // namespace detail

/// Jointly densifies a (base, negative) pair. Rule mode appends a seeded
/// shared context identically to both sides. Backend mode drives the model
/// with the four-step format and validates binding preservation, falling
/// back to rule mode when validation fails (recorded in provenance).
inline DensePromptPair densify_pair(const StructuredPrompt& base, const StructuredPrompt& negative,
                                    PerturbKind kind, std::uint64_t seed,
                                    const KeywordPools& pools, const DensifyOptions& opts = {}) {
  if (base.entities.empty() || negative.entities.empty()) {
    throw EmptyPrompt("densify requires non-empty prompts");
  }
  if (opts.mode == DensifyMode::Rule) {
    return detail::densify_rule(base, negative, kind, seed, opts.context_items, pools);
  }
  if (!opts.backend) throw BackendUnavailable("backend densify mode without a backend");

  std::vector<Message> messages = {
      {"system",
       "You are an expert prompt engineer for text-to-image models. Expand both prompts into "
       "detailed, descriptive prompts. Follow these steps:\n"
       "Step 1. Extract all objects and their visual attributes from Prompt 1.\n"
       "Step 2. For Prompt 1, write a long, rich description that includes all identified "
       "objects and attributes from Step 1.\n"
       "Step 3. Extract all objects and their visual attributes from Prompt 2.\n"
       "Step 4. For Prompt 2, write a long, rich description that includes all identified "
       "objects and attributes from Step 3.\n"
       "Ensure both outputs share a similar global context or scene."},
      {"user", "Prompt 1: " + base.surface + "\nPrompt 2: " + negative.surface +
                   "\nGenerate dense, detailed prompts. Ensure both outputs share a similar "
                   "global context or scene but have different object-attribute bindings. "
                   "Let's think step by step."},
  };
  std::string transcript = opts.backend->text_complete(messages, seed);
  auto [dense1, dense2] = detail::parse_densify_transcript(transcript);

  if (!detail::preserves_bindings(base, dense1) || !detail::preserves_bindings(negative, dense2)) {
    if (!opts.fallback_to_rule) {
      throw BindingViolation("densified prompts lost bindings and fallback is disabled");
    }
    DensePromptPair out =
        detail::densify_rule(base, negative, kind, seed, opts.context_items, pools);
    out.provenance = "backend_fallback_rule";
    out.transcript = transcript;
    return out;
  }

  DensePromptPair out;
  out.kind = kind;
  out.base_dense = base;
  out.base_dense.surface = dense1;
  out.negative_dense = negative;
  out.negative_dense.surface = dense2;
  out.provenance = "backend";
  out.transcript = transcript;
  return out;
}

inline void to_json(nlohmann::json& j, const DensePromptPair& d) {
  j = {{"base_dense", d.base_dense},
       {"negative_dense", d.negative_dense},
       {"kind", std::string(perturb_kind_name(d.kind))},
       {"shared_context", d.shared_context},
       {"provenance", d.provenance},
       {"transcript", d.transcript}};
}

inline void from_json(const nlohmann::json& j, DensePromptPair& d) {
  d.base_dense = j.at("base_dense").get<StructuredPrompt>();
  d.negative_dense = j.at("negative_dense").get<StructuredPrompt>();
  d.kind = perturb_kind_from_name(j.at("kind").get<std::string>());
  d.shared_context = j.at("shared_context").get<std::vector<std::string>>();
  d.provenance = j.at("provenance");
  d.transcript = j.at("transcript");
}

}  // namespace ospo
