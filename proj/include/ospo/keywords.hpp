#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ospo/errors.hpp"
#include "ospo/rng.hpp"
#include "ospo/text.hpp"

namespace ospo {

/// Vocabulary pools backing prompt generation. Entries are lowercase and
/// deduplicated; attribute pools are pairwise disjoint so a bare word
/// identifies its kind, which the surface parser relies on.
struct KeywordPools {
  std::vector<std::string> objects;
  std::vector<std::string> colors;
  std::vector<std::string> shapes;
  std::vector<std::string> textures;
  std::vector<std::string> spatial;
};

struct PoolTargets {
  std::size_t objects = 120;
  std::size_t colors = 70;
  std::size_t shapes = 70;
  std::size_t textures = 70;
  std::size_t spatial = 40;
};

namespace builtin {

inline const std::vector<std::string>& objects() {
  static const std::vector<std::string> v = {
      // animals
      "dog", "cat", "bird", "horse", "rabbit", "fox", "owl", "duck", "frog", "turtle",
      // plants
      "rose", "tulip", "cactus", "fern", "daisy", "sunflower", "bamboo", "ivy", "orchid", "pine tree",
      // fruits
      "apple", "banana", "mango", "pear", "watermelon", "lemon", "grape", "peach", "strawberry", "pineapple",
      // furniture
      "chair", "sofa", "desk", "lamp", "mirror", "clock", "vase", "rug", "cushion", "bookshelf",
      // clothing
      "shirt", "jacket", "blouse", "scarf", "hat", "glove", "sweater", "sock", "boot", "sandal",
      // vehicles
      "car", "bicycle", "truck", "scooter", "bus", "canoe", "sled", "wagon", "skateboard", "tractor",
      // food
      "pizza", "sushi", "pancake", "pasta", "sandwich", "muffin", "pretzel", "taco", "waffle", "bagel",
      // instruments
      "guitar", "piano", "violin", "drum", "flute", "trumpet", "harp", "banjo", "cello", "xylophone",
      // electronics
      "laptop", "computer", "camera", "telephone", "keyboard", "monitor", "printer", "speaker", "headphone", "tablet",
      // vegetables
      "pumpkin", "carrot", "onion", "potato", "cabbage", "pepper", "cucumber", "radish", "broccoli", "mushroom",
      // kitchenware
      "kettle", "teapot", "mug", "plate", "bowl", "spoon", "fork", "ladle", "bottle", "jar",
      // household
      "light bulb", "candle", "lantern", "bench", "ladder", "hammer", "screwdriver", "bucket", "broom", "umbrella",
  };
  return v;
}

inline const std::vector<std::string>& colors() {
  static const std::vector<std::string> v = {
      "red", "blue", "green", "yellow", "black", "white", "pink", "purple", "brown", "cyan",
      "magenta", "lime", "indigo", "teal", "navy", "beige", "maroon", "olive", "gold", "silver",
      "gray", "violet", "crimson", "scarlet", "turquoise", "lavender", "coral", "salmon", "khaki", "mint",
      "emerald", "jade", "ruby", "amber", "bronze", "copper", "ivory", "pearl", "charcoal", "slate",
      "azure", "cobalt", "sapphire", "plum", "mauve", "fuchsia", "rust", "ochre", "sienna", "tan",
      "cream", "mustard", "lilac", "periwinkle", "aquamarine", "chartreuse", "burgundy", "vermilion", "cerulean", "taupe",
      "sand", "blush", "honey", "brick", "wine", "rosewood", "orange", "apricot", "eggplant", "steel",
  };
  return v;
}

inline const std::vector<std::string>& shapes() {
  static const std::vector<std::string> v = {
      "round", "square", "oval", "triangular", "rectangular", "circular", "spherical", "conical", "cylindrical", "cubic",
      "oblong", "teardrop", "diamond", "heart", "spiral", "short", "tall", "small", "big", "large",
      "tiny", "huge", "wide", "narrow", "thin", "thick", "flat", "curved", "straight", "bent",
      "twisted", "pointed", "blunt", "angular", "crescent", "hexagonal", "octagonal", "pentagonal", "pyramidal", "domed",
      "slender", "stubby", "elongated", "compact", "bulbous", "tapered", "hollow", "solid", "shallow", "deep",
      "broad", "skinny", "chunky", "petite", "massive", "miniature", "colossal", "slim", "plump", "arched",
      "coiled", "jagged", "rounded", "wavy", "zigzag", "bright", "crooked", "boxy", "stout", "squat",
  };
  return v;
}

inline const std::vector<std::string>& textures() {
  static const std::vector<std::string> v = {
      "rubber", "metallic", "leather", "fabric", "wooden", "rough", "smooth", "soft", "fluffy", "glass",
      "gritty", "silky", "woolly", "grainy", "velvety", "bumpy", "slick", "crinkled", "coarse", "porous",
      "furry", "fuzzy", "glossy", "matte", "shiny", "dull", "polished", "rustic", "weathered", "worn",
      "sleek", "plush", "satin", "suede", "denim", "woven", "knitted", "quilted", "braided", "wicker",
      "ceramic", "marble", "stone", "brass", "pewter", "chrome", "plastic", "paper", "cardboard", "foam",
      "sandy", "dusty", "muddy", "icy", "frosted", "waxy", "oily", "sticky", "slimy", "scaly",
      "feathered", "ribbed", "corrugated", "pleated", "embroidered", "lacquered", "varnished", "burlap", "felt", "cork",
  };
  return v;
}

inline const std::vector<std::string>& spatial() {
  static const std::vector<std::string> v = {
      "on the left of", "on the right of", "to the left of", "to the right of", "above",
      "below", "beside", "next to", "near", "alongside",
      "under", "over", "beneath", "underneath", "adjacent to",
      "opposite to", "among", "close to", "far from", "across from",
      "in front of", "behind", "on top of", "atop", "inside",
      "hidden by", "leaning against", "resting on", "stacked on", "hanging from",
      "perched on", "propped against", "tucked behind", "facing", "against",
      "beyond", "surrounding", "in the middle of", "hovering above", "balanced on",
  };
  return v;
}

/// Phrases that imply depth ordering; everything else in the pool is 2D.
inline const std::unordered_set<std::string>& spatial_3d() {
  static const std::unordered_set<std::string> v = {
      "in front of", "behind", "on top of", "atop", "inside", "hidden by",
      "leaning against", "resting on", "stacked on", "hanging from", "perched on",
      "propped against", "tucked behind", "beyond", "hovering above", "balanced on",
  };
  return v;
}

/// Transitive gerunds for the non-spatial sentence bank.
inline const std::vector<std::string>& actions() {
  static const std::vector<std::string> v = {
      "holding", "watching", "carrying", "touching", "pushing", "pulling", "washing",
      "painting", "lifting", "throwing", "catching", "kicking", "hugging", "cleaning",
  };
  return v;
}

inline const std::vector<std::string>& persons() {
  static const std::vector<std::string> v = {
      "man", "woman", "child", "boy", "girl", "teacher",
      "chef", "musician", "farmer", "athlete", "painter", "dancer",
  };
  return v;
}

/// Scene-setting nouns used only by densification; disjoint from the object
/// pool so added context can never satisfy a base-prompt fact by accident.
inline const std::vector<std::string>& context_nouns() {
  static const std::vector<std::string> v = {
      "basket", "shed", "table", "wall", "blanket", "window", "shelf", "curtain",
      "fence", "garden", "counter", "doorway", "stool", "tray", "pathway", "awning",
  };
  return v;
}

inline const std::vector<std::string>& settings() {
  static const std::vector<std::string> v = {
      "in soft morning light", "under a clear sky", "at dusk", "in a quiet room",
      "under warm lamplight", "on a misty morning", "in gentle afternoon sun",
      "beneath scattered clouds",
  };
  return v;
}

inline KeywordPools pools() {
  return KeywordPools{objects(), colors(), shapes(), textures(), spatial()};
}

}  // namespace builtin

enum class AttrKind { Color, Shape, Texture };

inline std::string_view attr_kind_name(AttrKind k) {
  switch (k) {
    case AttrKind::Color: return "color";
    case AttrKind::Shape: return "shape";
    case AttrKind::Texture: return "texture";
  }
  return "color";
}

enum class RelationKind { Spatial2D, Spatial3D, Action };

inline std::string_view relation_kind_name(RelationKind k) {
  switch (k) {
    case RelationKind::Spatial2D: return "spatial2d";
    case RelationKind::Spatial3D: return "spatial3d";
    case RelationKind::Action: return "action";
  }
  return "spatial2d";
}

inline RelationKind spatial_kind_of(const std::string& phrase) {
  return builtin::spatial_3d().count(phrase) ? RelationKind::Spatial3D : RelationKind::Spatial2D;
}

inline const std::vector<std::string>& pool_for(const KeywordPools& pools, AttrKind kind) {
  switch (kind) {
    case AttrKind::Color: return pools.colors;
    case AttrKind::Shape: return pools.shapes;
    case AttrKind::Texture: return pools.textures;
  }
  return pools.colors;
}

/// Kind lookup against the builtin attribute vocabulary; false if unknown.
inline bool attr_kind_of(std::string_view word, AttrKind& out) {
  static const std::unordered_map<std::string, AttrKind> index = [] {
    std::unordered_map<std::string, AttrKind> m;
    for (const auto& w : builtin::colors()) m.emplace(w, AttrKind::Color);
    for (const auto& w : builtin::shapes()) m.emplace(w, AttrKind::Shape);
    for (const auto& w : builtin::textures()) m.emplace(w, AttrKind::Texture);
    return m;
  }();
  auto it = index.find(std::string(word));
  if (it == index.end()) return false;
  out = it->second;
  return true;
}

/// Validates the pool invariants: non-empty lowercase deduplicated entries,
/// attribute pools pairwise disjoint, spatial phrases free of object nouns.
inline void validate_pools(const KeywordPools& pools) {
  auto check_basic = [](const std::vector<std::string>& pool, const char* name) {
    std::set<std::string> seen;
    for (const auto& entry : pool) {
      if (entry.empty()) throw ConfigError(std::string(name) + ": empty entry");
      if (entry != text::to_lower(entry)) throw ConfigError(std::string(name) + ": not lowercase: " + entry);
      if (!seen.insert(entry).second) throw ConfigError(std::string(name) + ": duplicate: " + entry);
    }
  };
  check_basic(pools.objects, "objects");
  check_basic(pools.colors, "colors");
  check_basic(pools.shapes, "shapes");
  check_basic(pools.textures, "textures");
  check_basic(pools.spatial, "spatial");

  std::set<std::string> attrs;
  for (const auto* pool : {&pools.colors, &pools.shapes, &pools.textures}) {
    for (const auto& w : *pool) {
      if (!attrs.insert(w).second) throw ConfigError("attribute pools overlap on: " + w);
    }
  }
  std::set<std::string> objs(pools.objects.begin(), pools.objects.end());
  for (const auto& w : attrs) {
    if (objs.count(w)) throw ConfigError("object/attribute overlap on: " + w);
  }
  for (const auto& phrase : pools.spatial) {
    for (const auto& word : text::split_words(phrase)) {
      if (objs.count(word)) throw ConfigError("spatial phrase contains object noun: " + phrase);
    }
  }
}

enum class PoolSource { Builtin, Backend };

/// Callable that produces one batch of comma-separated keywords for a pool
/// request; wired to Backend::text_complete in backend mode.
using KeywordFetcher =
    std::function<std::string(const std::string& pool_name, std::uint64_t seed)>;

/// Builds keyword pools from the static vocabulary or from a backend.
/// The builtin source ignores the seed entirely; the backend source keeps
/// requesting batches, deduplicating, until every target is met.
inline KeywordPools build_keyword_pools(PoolSource source, std::uint64_t seed,
                                        const PoolTargets& targets = {},
                                        const KeywordFetcher& fetch = {}) {
  if (targets.objects < 1 || targets.colors < 1 || targets.shapes < 1 ||
      targets.textures < 1 || targets.spatial < 1) {
    throw ConfigError("pool targets must be >= 1");
  }
  if (source == PoolSource::Builtin) {
    KeywordPools pools = builtin::pools();
    auto require = [](std::size_t have, std::size_t want, const char* name) {
      if (have < want) {
        throw PoolExhausted(std::string("builtin ") + name + " pool smaller than target");
      }
    };
    require(pools.objects.size(), targets.objects, "objects");
    require(pools.colors.size(), targets.colors, "colors");
    require(pools.shapes.size(), targets.shapes, "shapes");
    require(pools.textures.size(), targets.textures, "textures");
    require(pools.spatial.size(), targets.spatial, "spatial");
    validate_pools(pools);
    return pools;
  }

  if (!fetch) throw BackendUnavailable("backend pool source selected but no fetcher configured");

  KeywordPools pools;
  Rng rng = Rng(seed).substream("keyword_pools");
  auto fill = [&](std::vector<std::string>& pool, const char* name, std::size_t target,
                  bool is_spatial) {
    std::set<std::string> seen;
    constexpr int kMaxAttempts = 24;
    Rng stream = rng.substream(name);
    for (int attempt = 0; attempt < kMaxAttempts && pool.size() < target; ++attempt) {
      std::string batch = fetch(name, stream.next_u64());
      std::string cur;
      auto commit = [&] {
        std::string word = text::trim(text::to_lower(cur));
        cur.clear();
        if (word.empty()) return;
        if (is_spatial) {
          // Spatial phrases must not smuggle object nouns in.
          for (const auto& tok : text::split_words(word)) {
            for (const auto& obj : pools.objects) {
              if (tok == obj) return;
            }
          }
        }
        if (seen.insert(word).second) pool.push_back(word);
      };
      for (char c : batch) {
        if (c == ',' || c == '\n') {
          commit();
        } else {
          cur.push_back(c);
        }
      }
      commit();
    }
    if (pool.size() < target) {
      throw PoolExhausted(std::string(name) + " pool: attempt budget exhausted at " +
                          std::to_string(pool.size()) + "/" + std::to_string(target));
    }
  };
  fill(pools.objects, "objects", targets.objects, false);
  fill(pools.colors, "colors", targets.colors, false);
  fill(pools.shapes, "shapes", targets.shapes, false);
  fill(pools.textures, "textures", targets.textures, false);
  fill(pools.spatial, "spatial", targets.spatial, true);
  return pools;
}

}  // namespace ospo
