#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "ospo/errors.hpp"
#include "ospo/keywords.hpp"
#include "ospo/prompt.hpp"
#include "ospo/rng.hpp"

namespace ospo {

/// Callable producing one candidate sentence for the in-context categories;
/// wired to Backend::text_complete in backend mode.
using PromptTextFetcher = std::function<std::string(Category, std::uint64_t seed)>;

namespace detail {

inline std::string draw_distinct(Rng& rng, const std::vector<std::string>& pool,
                                 const std::set<std::string>& taken) {
  if (pool.empty()) throw PoolTooSmall("empty pool");
  for (int attempt = 0; attempt < 64; ++attempt) {
    const std::string& w = rng.pick(pool);
    if (!taken.count(w)) return w;
  }
  throw PoolTooSmall("cannot draw a distinct entry");
}

inline AttrKind attr_kind_cycle(std::size_t i) {
  switch (i % 3) {
    case 0: return AttrKind::Color;
    case 1: return AttrKind::Shape;
    default: return AttrKind::Texture;
  }
}

inline Entity make_entity(Rng& rng, const KeywordPools& pools, std::set<std::string>& nouns,
                          std::size_t n_attrs) {
  Entity e;
  e.object = draw_distinct(rng, pools.objects, nouns);
  nouns.insert(e.object);
  std::set<int> kinds;
  for (std::size_t k = 0; k < n_attrs; ++k) {
    AttrKind kind;
    do {
      kind = attr_kind_cycle(rng.pick_index(3));
    } while (kinds.count(static_cast<int>(kind)));
    kinds.insert(static_cast<int>(kind));
    e.attributes.push_back(AttributeBinding{kind, rng.pick(pool_for(pools, kind))});
  }
  return e;
}

inline std::vector<std::string> spatial_subpool(const KeywordPools& pools, bool want_3d) {
  std::vector<std::string> out;
  for (const auto& ph : pools.spatial) {
    if ((spatial_kind_of(ph) == RelationKind::Spatial3D) == want_3d) out.push_back(ph);
  }
  if (out.empty()) return pools.spatial;
  return out;
}

inline StructuredPrompt attribute_prompt(Rng& rng, const KeywordPools& pools, std::size_t index,
                                         bool two_entities) {
  StructuredPrompt p;
  p.category = Category::Attribute;
  std::set<std::string> nouns;
  if (!two_entities) {
    AttrKind kind = attr_kind_cycle(index);
    Entity e;
    e.object = rng.pick(pools.objects);
    e.attributes.push_back(AttributeBinding{kind, rng.pick(pool_for(pools, kind))});
    p.entities.push_back(e);
  } else {
    // Two distinct attribute categories, one keyword each, two objects.
    std::size_t first = rng.pick_index(3);
    std::size_t second = (first + 1 + rng.pick_index(2)) % 3;
    for (std::size_t k : {first, second}) {
      AttrKind kind = attr_kind_cycle(k);
      Entity e;
      e.object = draw_distinct(rng, pools.objects, nouns);
      nouns.insert(e.object);
      e.attributes.push_back(AttributeBinding{kind, rng.pick(pool_for(pools, kind))});
      p.entities.push_back(e);
    }
  }
  p.surface = render(p);
  return p;
}

inline StructuredPrompt layout_prompt(Rng& rng, const KeywordPools& pools, std::size_t index,
                                      int variant) {
  StructuredPrompt p;
  p.category = Category::Layout;
  std::set<std::string> nouns;
  if (variant == 0) {
    // a {obj1} {spatial} a {obj2}; 2D and 3D phrases stratified evenly.
    for (int k = 0; k < 2; ++k) {
      Entity e;
      e.object = draw_distinct(rng, pools.objects, nouns);
      nouns.insert(e.object);
      p.entities.push_back(e);
    }
    auto sub = spatial_subpool(pools, index % 2 == 1);
    std::string phrase = rng.pick(sub);
    p.relations.push_back(Relation{0, spatial_kind_of(phrase), phrase, 1});
  } else if (variant == 1) {
    Entity e;
    e.object = rng.pick(pools.objects);
    p.entities.push_back(e);
    p.counts.push_back(CountBinding{0, 1 + static_cast<int>(rng.pick_index(9))});
  } else {
    for (int k = 0; k < 2; ++k) {
      Entity e;
      e.object = draw_distinct(rng, pools.objects, nouns);
      nouns.insert(e.object);
      p.entities.push_back(e);
      p.counts.push_back(
          CountBinding{static_cast<std::size_t>(k), 1 + static_cast<int>(rng.pick_index(5))});
    }
  }
  p.surface = render(p);
  return p;
}

inline StructuredPrompt non_spatial_prompt(Rng& rng, const KeywordPools& pools,
                                           std::size_t index) {
  StructuredPrompt p;
  p.category = Category::NonSpatial;
  std::set<std::string> nouns;
  Entity subject;
  subject.object = rng.pick(builtin::persons());
  nouns.insert(subject.object);
  p.entities.push_back(subject);
  std::size_t clauses = 1 + index % 2;
  std::set<std::string> used_actions;
  for (std::size_t c = 0; c < clauses; ++c) {
    Entity obj;
    obj.object = draw_distinct(rng, pools.objects, nouns);
    nouns.insert(obj.object);
    p.entities.push_back(obj);
    std::string action = draw_distinct(rng, builtin::actions(), used_actions);
    used_actions.insert(action);
    p.relations.push_back(Relation{0, RelationKind::Action, action, p.entities.size() - 1});
  }
  p.surface = render(p);
  return p;
}

inline StructuredPrompt complex_prompt(Rng& rng, const KeywordPools& pools, std::size_t index) {
  StructuredPrompt p;
  p.category = Category::Complex;
  std::set<std::string> nouns;
  bool action_flavor = index % 2 == 1;
  if (action_flavor) {
    Entity subject;
    subject.object = rng.pick(builtin::persons());
    nouns.insert(subject.object);
    if (rng.next_bernoulli(0.5)) {
      subject.attributes.push_back(AttributeBinding{AttrKind::Shape, rng.pick(pools.shapes)});
    }
    p.entities.push_back(subject);
    p.entities.push_back(make_entity(rng, pools, nouns, 1 + rng.pick_index(2)));
    p.relations.push_back(Relation{0, RelationKind::Action, rng.pick(builtin::actions()), 1});
  } else {
    p.entities.push_back(make_entity(rng, pools, nouns, 1 + rng.pick_index(2)));
    p.entities.push_back(make_entity(rng, pools, nouns, 1 + rng.pick_index(2)));
    std::string phrase = rng.pick(pools.spatial);
    p.relations.push_back(Relation{0, spatial_kind_of(phrase), phrase, 1});
  }
  p.surface = render(p);
  return p;
}

}  // namespace detail

/// Generates exactly `count` unique base prompts for one category.
///
/// Attribute splits between the one- and two-entity templates; Layout splits
/// spatial / single-count / dual-count at the 2:1:1 template ratio. The
/// in-context categories are built structure-first in rule mode; with a
/// fetcher they come from the backend and must parse against the pools.
inline std::vector<StructuredPrompt> generate_base_prompts(Category category, std::size_t count,
                                                           const KeywordPools& pools,
                                                           std::uint64_t seed,
                                                           const PromptTextFetcher& fetch = {}) {
  if (count < 1) throw ConfigError("prompt count must be >= 1");
  validate_pools(pools);

  Rng root = Rng(seed).substream("base_prompts").substream(category_name(category));
  PromptParser parser(pools);
  std::vector<StructuredPrompt> out;
  std::set<std::string> used;

  const std::size_t half = (count + 1) / 2;
  const std::size_t quarter = count / 4;

  for (std::size_t i = 0; i < count; ++i) {
    bool ok = false;
    for (std::uint64_t attempt = 0; attempt < 64 && !ok; ++attempt) {
      Rng rng = root.substream(i).substream(attempt);
      StructuredPrompt p;
      switch (category) {
        case Category::Attribute:
          p = detail::attribute_prompt(rng, pools, i, i >= half);
          break;
        case Category::Layout: {
          int variant = i < count - 2 * quarter ? 0 : (i < count - quarter ? 1 : 2);
          p = detail::layout_prompt(rng, pools, i, variant);
          break;
        }
        case Category::NonSpatial:
        case Category::Complex:
          if (fetch) {
            std::string line = fetch(category, rng.next_u64());
            auto parsed = parser.try_parse(line);
            if (!parsed) continue;
            p = *parsed;
            p.category = category;
            p.surface = render(p);
          } else if (category == Category::NonSpatial) {
            p = detail::non_spatial_prompt(rng, pools, i);
          } else {
            p = detail::complex_prompt(rng, pools, i);
          }
          break;
      }
      if (used.count(p.surface)) continue;
      used.insert(p.surface);
      out.push_back(std::move(p));
      ok = true;
    }
    if (!ok) {
      throw PoolTooSmall("cannot generate " + std::to_string(count) + " unique " +
                         std::string(category_name(category)) + " prompts");
    }
  }
  return out;
}

}  // namespace ospo
