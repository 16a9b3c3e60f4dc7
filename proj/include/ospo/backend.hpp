#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ospo/errors.hpp"
#include "ospo/prompt.hpp"
#include "ospo/scene.hpp"

namespace ospo {

struct DecodeParams {
  double guidance_weight = 5.0;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

/// Controlled hallucination knobs for the simulator. Temperatures above 1
/// scale the three corruption probabilities linearly (capped at 1).
struct CorruptionParams {
  double p_omit = 0.0;
  double p_misbind = 0.0;
  double p_wrong_attr = 0.0;
  double eta = 0.0;  // VQA answer-noise level, < 0.5

  void validate() const {
    auto in_unit = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!in_unit(p_omit) || !in_unit(p_misbind) || !in_unit(p_wrong_attr)) {
      throw ConfigError("corruption probabilities must lie in [0, 1]");
    }
    if (eta < 0.0 || eta >= 0.5) throw ConfigError("eta must lie in [0, 0.5)");
  }
};

/// One generated image: a scene graph in simulator mode, opaque bytes (plus
/// optional token ids) in remote mode.
struct ImageArtifact {
  std::string id;
  std::optional<SceneGraph> scene;
  std::string image_bytes;      // raw PNG bytes, remote mode
  std::vector<int> token_ids;   // remote mode, when the server reports them
  std::string source_prompt_id;
  DecodeParams decode;

  const std::vector<int>& tokens() const {
    if (scene) return scene->token_sequence;
    return token_ids;
  }
};

struct Message {
  std::string role;
  std::string text;
};

struct ProbeResult {
  double p_yes = 0.0;
  double p_no = 0.0;
};

/// Uniform model-capability contract: text completion, image generation and
/// the yes/no VQA probability probe. Implementations must be safely shareable
/// across concurrent pipeline workers.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual ImageArtifact generate_image(const StructuredPrompt& dense, const DecodeParams& decode,
                                       const CorruptionParams& corruption) = 0;

  /// Raw answer-token probabilities; deliberately not renormalized.
  virtual ProbeResult vqa_probe(const ImageArtifact& image, const std::string& question) = 0;

  virtual std::string text_complete(const std::vector<Message>& messages, std::uint64_t seed) = 0;
};

inline void to_json(nlohmann::json& j, const DecodeParams& d) {
  j = {{"guidance_weight", d.guidance_weight}, {"temperature", d.temperature}, {"seed", d.seed}};
}

inline void from_json(const nlohmann::json& j, DecodeParams& d) {
  d.guidance_weight = j.value("guidance_weight", 5.0);
  d.temperature = j.value("temperature", 1.0);
  d.seed = j.value("seed", std::uint64_t{0});
}

inline void to_json(nlohmann::json& j, const CorruptionParams& c) {
  j = {{"p_omit", c.p_omit},
       {"p_misbind", c.p_misbind},
       {"p_wrong_attr", c.p_wrong_attr},
       {"eta", c.eta}};
}

inline void from_json(const nlohmann::json& j, CorruptionParams& c) {
  c.p_omit = j.value("p_omit", 0.0);
  c.p_misbind = j.value("p_misbind", 0.0);
  c.p_wrong_attr = j.value("p_wrong_attr", 0.0);
  c.eta = j.value("eta", 0.0);
  c.validate();
}

}  // namespace ospo
