#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ospo/errors.hpp"
#include "ospo/keywords.hpp"
#include "ospo/prompt.hpp"

namespace ospo {

struct SceneObject {
  std::string object;
  std::vector<AttributeBinding> attributes;
  int count = 1;
  bool counted = false;  // explicit count in the generating prompt
  bool operator==(const SceneObject&) const = default;
};

/// The simulator's "image": realized objects, attributes and relations plus
/// the canonical token serialization that stands in for image tokens.
struct SceneGraph {
  std::vector<SceneObject> objects;
  std::vector<Relation> relations;
  std::vector<int> token_sequence;
  bool operator==(const SceneGraph&) const = default;
};

inline std::vector<std::string> scene_facts(const SceneGraph& g) {
  std::vector<std::string> facts;
  for (const auto& o : g.objects) {
    facts.push_back(object_fact(o.object));
    for (const auto& a : o.attributes) facts.push_back(attribute_fact(o.object, a.kind, a.value));
    if (o.counted) facts.push_back(count_fact(o.object, o.count));
  }
  for (const auto& r : g.relations) {
    facts.push_back(relation_fact(g.objects[r.subject].object, r.phrase,
                                  g.objects[r.object].object));
  }
  return facts;
}

/// Fixed token table over a pool set plus the builtin banks. Construction
/// order is part of the format: structural markers first, then words in pool
/// order, so identical pools always produce identical ids.
class Vocabulary {
 public:
  enum : int {
    kPad = 0,
    kBos = 1,
    kEos = 2,
    kObj = 3,
    kAttrColor = 4,
    kAttrShape = 5,
    kAttrTexture = 6,
    kCount = 7,
    kRelSpatial2D = 8,
    kRelSpatial3D = 9,
    kRelAction = 10,
    kFirstWord = 11,
  };

  explicit Vocabulary(const KeywordPools& pools, std::size_t capacity = 512)
      : capacity_(capacity) {
    auto add = [&](const std::string& w) {
      if (word_to_id_.count(w)) return;
      int id = kFirstWord + static_cast<int>(id_to_word_.size());
      word_to_id_.emplace(w, id);
      id_to_word_.push_back(w);
    };
    for (const auto& w : pools.objects) add(w);
    for (const auto& w : builtin::persons()) add(w);
    for (const auto& w : builtin::context_nouns()) add(w);
    for (const auto& w : pools.colors) add(w);
    for (const auto& w : pools.shapes) add(w);
    for (const auto& w : pools.textures) add(w);
    for (const auto& w : pools.spatial) add(w);
    for (const auto& w : builtin::actions()) add(w);
    for (int n = 1; n <= 9; ++n) add(std::to_string(n));
    if (size() > capacity_) {
      throw ConfigError("vocabulary needs " + std::to_string(size()) + " tokens, capacity is " +
                        std::to_string(capacity_));
    }
  }

  std::size_t size() const { return kFirstWord + id_to_word_.size(); }
  std::size_t capacity() const { return capacity_; }

  int id_of(const std::string& word) const {
    auto it = word_to_id_.find(word);
    if (it == word_to_id_.end()) throw InternalError("word not in vocabulary: " + word);
    return it->second;
  }

  const std::string& word_of(int id) const {
    std::size_t idx = static_cast<std::size_t>(id - kFirstWord);
    if (id < kFirstWord || idx >= id_to_word_.size()) {
      throw InternalError("token id out of range: " + std::to_string(id));
    }
    return id_to_word_[idx];
  }

  static int attr_marker(AttrKind k) {
    switch (k) {
      case AttrKind::Color: return kAttrColor;
      case AttrKind::Shape: return kAttrShape;
      case AttrKind::Texture: return kAttrTexture;
    }
    return kAttrColor;
  }

  static int rel_marker(RelationKind k) {
    switch (k) {
      case RelationKind::Spatial2D: return kRelSpatial2D;
      case RelationKind::Spatial3D: return kRelSpatial3D;
      case RelationKind::Action: return kRelAction;
    }
    return kRelSpatial2D;
  }

  std::vector<int> serialize(const SceneGraph& g) const {
    std::vector<int> t;
    t.push_back(kBos);
    for (const auto& o : g.objects) {
      t.push_back(kObj);
      t.push_back(id_of(o.object));
      for (const auto& a : o.attributes) {
        t.push_back(attr_marker(a.kind));
        t.push_back(id_of(a.value));
      }
      if (o.counted) {
        t.push_back(kCount);
        t.push_back(id_of(std::to_string(o.count)));
      }
    }
    for (const auto& r : g.relations) {
      t.push_back(rel_marker(r.kind));
      t.push_back(id_of(g.objects[r.subject].object));
      t.push_back(id_of(r.phrase));
      t.push_back(id_of(g.objects[r.object].object));
    }
    t.push_back(kEos);
    return t;
  }

  SceneGraph deserialize(const std::vector<int>& tokens) const {
    SceneGraph g;
    g.token_sequence = tokens;
    std::map<std::string, std::size_t> noun_index;
    std::size_t i = 0;
    auto need = [&](std::size_t n) {
      if (i + n > tokens.size()) throw InternalError("truncated token sequence");
    };
    need(1);
    if (tokens[i++] != kBos) throw InternalError("token sequence missing BOS");
    while (i < tokens.size() && tokens[i] != kEos) {
      int marker = tokens[i++];
      switch (marker) {
        case kObj: {
          need(1);
          SceneObject o;
          o.object = word_of(tokens[i++]);
          noun_index[o.object] = g.objects.size();
          g.objects.push_back(std::move(o));
          break;
        }
        case kAttrColor:
        case kAttrShape:
        case kAttrTexture: {
          need(1);
          if (g.objects.empty()) throw InternalError("attribute token before any object");
          AttrKind kind = marker == kAttrColor   ? AttrKind::Color
                          : marker == kAttrShape ? AttrKind::Shape
                                                 : AttrKind::Texture;
          g.objects.back().attributes.push_back(AttributeBinding{kind, word_of(tokens[i++])});
          break;
        }
        case kCount: {
          need(1);
          if (g.objects.empty()) throw InternalError("count token before any object");
          g.objects.back().count = std::stoi(word_of(tokens[i++]));
          g.objects.back().counted = true;
          break;
        }
        case kRelSpatial2D:
        case kRelSpatial3D:
        case kRelAction: {
          need(3);
          RelationKind kind = marker == kRelSpatial2D   ? RelationKind::Spatial2D
                              : marker == kRelSpatial3D ? RelationKind::Spatial3D
                                                        : RelationKind::Action;
          std::string subj = word_of(tokens[i++]);
          std::string phrase = word_of(tokens[i++]);
          std::string obj = word_of(tokens[i++]);
          auto s = noun_index.find(subj);
          auto o = noun_index.find(obj);
          if (s == noun_index.end() || o == noun_index.end()) {
            throw InternalError("relation references unknown object");
          }
          g.relations.push_back(Relation{s->second, kind, phrase, o->second});
          break;
        }
        default:
          throw InternalError("unexpected token marker: " + std::to_string(marker));
      }
    }
    need(1);
    if (tokens[i] != kEos) throw InternalError("token sequence missing EOS");
    return g;
  }

 private:
  std::size_t capacity_;
  std::map<std::string, int> word_to_id_;
  std::vector<std::string> id_to_word_;
};

inline void to_json(nlohmann::json& j, const SceneObject& o) {
  j = {{"object", o.object},
       {"attributes", o.attributes},
       {"count", o.count},
       {"counted", o.counted}};
}

inline void from_json(const nlohmann::json& j, SceneObject& o) {
  o.object = j.at("object");
  o.attributes = j.at("attributes").get<std::vector<AttributeBinding>>();
  o.count = j.at("count");
  o.counted = j.at("counted");
}

inline void to_json(nlohmann::json& j, const SceneGraph& g) {
  j = {{"objects", g.objects}, {"relations", g.relations}, {"tokens", g.token_sequence}};
}

inline void from_json(const nlohmann::json& j, SceneGraph& g) {
  g.objects = j.at("objects").get<std::vector<SceneObject>>();
  g.relations = j.at("relations").get<std::vector<Relation>>();
  g.token_sequence = j.at("tokens").get<std::vector<int>>();
}

}  // namespace ospo
