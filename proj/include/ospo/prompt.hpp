#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ospo/errors.hpp"
#include "ospo/keywords.hpp"
#include "ospo/text.hpp"

namespace ospo {

enum class Category { Attribute, Layout, NonSpatial, Complex };

inline std::string_view category_name(Category c) {
  switch (c) {
    case Category::Attribute: return "attribute";
    case Category::Layout: return "layout";
    case Category::NonSpatial: return "non_spatial";
    case Category::Complex: return "complex";
  }
  return "attribute";
}

inline Category category_from_name(std::string_view name) {
  if (name == "attribute") return Category::Attribute;
  if (name == "layout") return Category::Layout;
  if (name == "non_spatial") return Category::NonSpatial;
  if (name == "complex") return Category::Complex;
  throw ConfigError("unknown category: " + std::string(name));
}

inline const std::vector<Category>& all_categories() {
  static const std::vector<Category> v = {Category::Attribute, Category::Layout,
                                          Category::NonSpatial, Category::Complex};
  return v;
}

struct AttributeBinding {
  AttrKind kind{};
  std::string value;
  bool operator==(const AttributeBinding&) const = default;
};

struct Entity {
  std::string object;
  std::vector<AttributeBinding> attributes;
  bool operator==(const Entity&) const = default;
};

struct Relation {
  std::size_t subject{};
  RelationKind kind{};
  std::string phrase;
  std::size_t object{};
  bool operator==(const Relation&) const = default;
};

struct CountBinding {
  std::size_t entity{};
  int count{};
  bool operator==(const CountBinding&) const = default;
};

/// Canonical parsed prompt. The surface string is always reproducible from
/// the structured fields via render(); for templated categories the parser
/// inverts it exactly.
struct StructuredPrompt {
  Category category{};
  std::vector<Entity> entities;
  std::vector<Relation> relations;
  std::vector<CountBinding> counts;
  std::string surface;

  bool operator==(const StructuredPrompt& o) const {
    return category == o.category && entities == o.entities && relations == o.relations &&
           counts == o.counts && surface == o.surface;
  }

  std::optional<int> count_of(std::size_t entity) const {
    for (const auto& c : counts) {
      if (c.entity == entity) return c.count;
    }
    return std::nullopt;
  }
};

// ---------------------------------------------------------------------------
// Canonical facts. Index-free strings, so permutation/subset checks and
// scene-vs-prompt comparisons are stable under entity reordering.
// ---------------------------------------------------------------------------

inline std::string object_fact(std::string_view noun) { return "obj:" + std::string(noun); }

inline std::string attribute_fact(std::string_view noun, AttrKind kind, std::string_view value) {
  return "attr:" + std::string(noun) + ":" + std::string(attr_kind_name(kind)) + "=" +
         std::string(value);
}

inline std::string relation_fact(std::string_view subj, std::string_view phrase,
                                 std::string_view obj) {
  return "rel:" + std::string(subj) + "|" + std::string(phrase) + "|" + std::string(obj);
}

inline std::string count_fact(std::string_view noun, int count) {
  return "count:" + std::string(noun) + "=" + std::to_string(count);
}

inline std::vector<std::string> prompt_facts(const StructuredPrompt& p) {
  std::vector<std::string> facts;
  for (const auto& e : p.entities) {
    facts.push_back(object_fact(e.object));
    for (const auto& a : e.attributes) facts.push_back(attribute_fact(e.object, a.kind, a.value));
  }
  for (const auto& r : p.relations) {
    facts.push_back(relation_fact(p.entities[r.subject].object, r.phrase,
                                  p.entities[r.object].object));
  }
  for (const auto& c : p.counts) {
    facts.push_back(count_fact(p.entities[c.entity].object, c.count));
  }
  return facts;
}

/// Multiset of facts as sorted map fact -> multiplicity.
inline std::map<std::string, int> fact_multiset(const StructuredPrompt& p) {
  std::map<std::string, int> m;
  for (auto& f : prompt_facts(p)) ++m[f];
  return m;
}

/// Multiset of bare value tokens (nouns, attribute values, phrases, counts),
/// ignoring which slot holds them. A Swap permutes slots, so this multiset is
/// invariant under it.
inline std::map<std::string, int> value_multiset(const StructuredPrompt& p) {
  std::map<std::string, int> m;
  for (const auto& e : p.entities) {
    ++m["obj=" + e.object];
    for (const auto& a : e.attributes) {
      ++m["attr#" + std::string(attr_kind_name(a.kind)) + "=" + a.value];
    }
  }
  for (const auto& r : p.relations) ++m["rel=" + r.phrase];
  for (const auto& c : p.counts) ++m["count=" + std::to_string(c.count)];
  return m;
}

/// True when every fact of `sub` occurs (with multiplicity) in `super`.
inline bool facts_subset(const StructuredPrompt& sub, const StructuredPrompt& super) {
  auto a = fact_multiset(sub);
  auto b = fact_multiset(super);
  for (const auto& [fact, n] : a) {
    auto it = b.find(fact);
    if (it == b.end() || it->second < n) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace detail {

inline std::string entity_phrase(const StructuredPrompt& p, std::size_t idx) {
  const Entity& e = p.entities[idx];
  std::string attrs;
  for (const auto& a : e.attributes) {
    attrs += a.value;
    attrs += ' ';
  }
  if (auto count = p.count_of(idx)) {
    return text::number_word(*count) + " " + attrs + text::noun_phrase(e.object, *count);
  }
  std::string first = e.attributes.empty() ? e.object : e.attributes.front().value;
  return std::string(text::article_for(first)) + " " + attrs + e.object;
}

}  // namespace detail

/// Renders the surface form from the structured fields. Every builtin
/// template family funnels through here, so generation and re-rendering of
/// perturbed prompts stay consistent.
inline std::string render(const StructuredPrompt& p) {
  std::vector<bool> mentioned(p.entities.size(), false);
  std::vector<std::string> pieces;

  for (std::size_t subj = 0; subj < p.entities.size(); ++subj) {
    std::vector<const Relation*> rels;
    for (const auto& r : p.relations) {
      if (r.subject == subj) rels.push_back(&r);
    }
    if (rels.empty()) continue;
    std::string clause = detail::entity_phrase(p, subj);
    mentioned[subj] = true;
    bool non_spatial = p.category == Category::NonSpatial;
    for (std::size_t i = 0; i < rels.size(); ++i) {
      const Relation& r = *rels[i];
      if (i > 0) clause += " and";
      if (non_spatial && r.kind == RelationKind::Action) {
        clause += (i == 0) ? " is " : " ";
      } else {
        clause += " ";
      }
      clause += r.phrase + " " + detail::entity_phrase(p, r.object);
      mentioned[r.object] = true;
    }
    pieces.push_back(clause);
  }
  for (std::size_t i = 0; i < p.entities.size(); ++i) {
    if (!mentioned[i]) pieces.push_back(detail::entity_phrase(p, i));
  }
  return text::join(pieces, " and ");
}

// ---------------------------------------------------------------------------
// Parsing. Inverts render() for surfaces built from the builtin vocabulary;
// used for the round-trip property and for grounding the global VQA question
// against a base prompt embedded in question text.
// ---------------------------------------------------------------------------

namespace detail {

struct NounIndex {
  // plural/singular surface form -> (noun, count_hint). Longest match wins.
  struct Hit {
    std::string noun;
    std::size_t words_consumed{};
  };

  explicit NounIndex(const KeywordPools& pools) {
    auto add = [&](const std::string& noun) {
      singular_[noun] = noun;
      plural_[text::pluralize(noun)] = noun;
      max_words_ = std::max(max_words_, text::split_words(noun).size());
    };
    for (const auto& n : pools.objects) add(n);
    for (const auto& n : builtin::persons()) add(n);
    for (const auto& n : builtin::context_nouns()) add(n);
  }

  std::optional<Hit> match(const std::vector<std::string>& words, std::size_t pos,
                           bool plural) const {
    const auto& table = plural ? plural_ : singular_;
    for (std::size_t len = std::min(max_words_ + 1, words.size() - pos); len >= 1; --len) {
      std::string candidate;
      for (std::size_t i = 0; i < len; ++i) {
        if (i) candidate += ' ';
        candidate += words[pos + i];
      }
      auto it = table.find(candidate);
      if (it != table.end()) return Hit{it->second, len};
    }
    return std::nullopt;
  }

  std::map<std::string, std::string> singular_;
  std::map<std::string, std::string> plural_;
  std::size_t max_words_ = 1;
};

struct PhraseIndex {
  PhraseIndex(const std::vector<std::string>& phrases) {
    for (const auto& ph : phrases) {
      entries_[text::split_words(ph)] = ph;
      max_words_ = std::max(max_words_, text::split_words(ph).size());
    }
  }

  std::optional<std::pair<std::string, std::size_t>> match(const std::vector<std::string>& words,
                                                           std::size_t pos) const {
    for (std::size_t len = std::min(max_words_, words.size() - pos); len >= 1; --len) {
      std::vector<std::string> cand(words.begin() + static_cast<long>(pos),
                                    words.begin() + static_cast<long>(pos + len));
      auto it = entries_.find(cand);
      if (it != entries_.end()) return std::make_pair(it->second, len);
    }
    return std::nullopt;
  }

  std::map<std::vector<std::string>, std::string> entries_;
  std::size_t max_words_ = 1;
};

}  // namespace detail

class PromptParser {
 public:
  explicit PromptParser(const KeywordPools& pools)
      : nouns_(pools), spatial_(pools.spatial), actions_(builtin::actions()) {}

  /// Parses a surface rendered by render(); throws ConfigError when the text
  /// does not follow a builtin template.
  StructuredPrompt parse(std::string_view surface) const {
    std::vector<std::string> words = text::split_words(text::to_lower(surface));
    if (words.empty()) throw ConfigError("empty surface");

    StructuredPrompt p;
    std::size_t pos = 0;
    bool saw_attr = false, saw_spatial = false, saw_action = false, saw_is = false;

    while (pos < words.size()) {
      std::size_t entity_idx = parse_entity(words, pos, p, saw_attr);
      // Relation chain rooted at this entity.
      while (pos < words.size()) {
        if (words[pos] == "and") {
          // "and" either starts a fresh entity or continues a relation chain
          // ("... is holding a mug and watching a bird").
          if (pos + 1 < words.size() && (actions_.match(words, pos + 1) || words[pos + 1] == "is")) {
            ++pos;
          } else {
            ++pos;
            break;
          }
        }
        bool clause_is = false;
        if (pos < words.size() && words[pos] == "is") {
          clause_is = true;
          ++pos;
        }
        if (auto sp = spatial_.match(words, pos)) {
          if (clause_is) throw ConfigError("unexpected 'is' before spatial phrase");
          pos += sp->second;
          std::size_t obj_idx = parse_entity(words, pos, p, saw_attr);
          p.relations.push_back(
              Relation{entity_idx, spatial_kind_of(sp->first), sp->first, obj_idx});
          saw_spatial = true;
        } else if (auto act = actions_.match(words, pos)) {
          pos += act->second;
          std::size_t obj_idx = parse_entity(words, pos, p, saw_attr);
          p.relations.push_back(Relation{entity_idx, RelationKind::Action, act->first, obj_idx});
          saw_action = true;
          saw_is = saw_is || clause_is;
        } else {
          if (clause_is) throw ConfigError("dangling 'is' in surface: " + std::string(surface));
          break;
        }
      }
    }

    p.category = infer_category(p, saw_attr, saw_spatial, saw_action, saw_is);
    p.surface = render(p);
    if (text::to_lower(surface) != p.surface) {
      throw ConfigError("surface does not round-trip: '" + std::string(surface) + "' vs '" +
                        p.surface + "'");
    }
    return p;
  }

  std::optional<StructuredPrompt> try_parse(std::string_view surface) const {
    try {
      return parse(surface);
    } catch (const Error&) {
      return std::nullopt;
    }
  }

 private:
  std::size_t parse_entity(const std::vector<std::string>& words, std::size_t& pos,
                           StructuredPrompt& p, bool& saw_attr) const {
    if (pos >= words.size()) throw ConfigError("expected entity");
    std::optional<int> count;
    if (words[pos] == "a" || words[pos] == "an") {
      ++pos;
    } else {
      int n = text::parse_number(words[pos]);
      if (n < 0) throw ConfigError("expected article or count at '" + words[pos] + "'");
      count = n;
      ++pos;
    }
    std::vector<AttributeBinding> attrs;
    while (pos < words.size()) {
      AttrKind kind;
      if (attr_kind_of(words[pos], kind)) {
        attrs.push_back(AttributeBinding{kind, words[pos]});
        ++pos;
      } else {
        break;
      }
    }
    if (!attrs.empty()) saw_attr = true;
    // A count of one renders the singular form ("one desk").
    auto hit = nouns_.match(words, pos, count.has_value() && *count != 1);
    if (!hit) throw ConfigError("unknown noun near '" + words[std::min(pos, words.size() - 1)] + "'");
    pos += hit->words_consumed;
    p.entities.push_back(Entity{hit->noun, std::move(attrs)});
    std::size_t idx = p.entities.size() - 1;
    if (count) p.counts.push_back(CountBinding{idx, *count});
    return idx;
  }

  static Category infer_category(const StructuredPrompt& p, bool saw_attr, bool saw_spatial,
                                 bool saw_action, bool saw_is) {
    if (saw_action && saw_is) return Category::NonSpatial;
    if (saw_attr && (saw_spatial || saw_action)) return Category::Complex;
    if (!p.counts.empty() || saw_spatial) return Category::Layout;
    return Category::Attribute;
  }

  detail::NounIndex nouns_;
  detail::PhraseIndex spatial_;
  detail::PhraseIndex actions_;
};

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const AttributeBinding& a) {
  j = {{"kind", std::string(attr_kind_name(a.kind))}, {"value", a.value}};
}

inline void from_json(const nlohmann::json& j, AttributeBinding& a) {
  std::string kind = j.at("kind");
  if (kind == "color") a.kind = AttrKind::Color;
  else if (kind == "shape") a.kind = AttrKind::Shape;
  else if (kind == "texture") a.kind = AttrKind::Texture;
  else throw ConfigError("bad attribute kind: " + kind);
  a.value = j.at("value");
}

inline void to_json(nlohmann::json& j, const Entity& e) {
  j = {{"object", e.object}, {"attributes", e.attributes}};
}

inline void from_json(const nlohmann::json& j, Entity& e) {
  e.object = j.at("object");
  e.attributes = j.at("attributes").get<std::vector<AttributeBinding>>();
}

inline void to_json(nlohmann::json& j, const Relation& r) {
  j = {{"subject", r.subject},
       {"kind", std::string(relation_kind_name(r.kind))},
       {"phrase", r.phrase},
       {"object", r.object}};
}

inline void from_json(const nlohmann::json& j, Relation& r) {
  r.subject = j.at("subject");
  std::string kind = j.at("kind");
  if (kind == "spatial2d") r.kind = RelationKind::Spatial2D;
  else if (kind == "spatial3d") r.kind = RelationKind::Spatial3D;
  else if (kind == "action") r.kind = RelationKind::Action;
  else throw ConfigError("bad relation kind: " + kind);
  r.phrase = j.at("phrase");
  r.object = j.at("object");
}

inline void to_json(nlohmann::json& j, const CountBinding& c) {
  j = {{"entity", c.entity}, {"count", c.count}};
}

inline void from_json(const nlohmann::json& j, CountBinding& c) {
  c.entity = j.at("entity");
  c.count = j.at("count");
}

inline void to_json(nlohmann::json& j, const StructuredPrompt& p) {
  j = {{"category", std::string(category_name(p.category))},
       {"entities", p.entities},
       {"relations", p.relations},
       {"counts", p.counts},
       {"surface", p.surface}};
}

inline void from_json(const nlohmann::json& j, StructuredPrompt& p) {
  p.category = category_from_name(j.at("category").get<std::string>());
  p.entities = j.at("entities").get<std::vector<Entity>>();
  p.relations = j.at("relations").get<std::vector<Relation>>();
  p.counts = j.at("counts").get<std::vector<CountBinding>>();
  p.surface = j.at("surface");
}

}  // namespace ospo
