#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "ospo/backend.hpp"
#include "ospo/errors.hpp"
#include "ospo/perturb.hpp"
#include "ospo/questions.hpp"

namespace ospo {

/// Mean yes-minus-no margin over a set of probe results. This is the S_k
/// aggregation; it is the only place the score arithmetic lives.
inline double mean_margin(const std::vector<ProbeResult>& probes) {
  if (probes.empty()) throw MismatchedQuestionSets("cannot score an empty question set");
  double sum = 0.0;
  for (const auto& p : probes) sum += p.p_yes - p.p_no;
  return sum / static_cast<double>(probes.size());
}

struct ImageScore {
  double s_local = 0.0;
  double s_global = 0.0;
  std::vector<ProbeResult> local_probes;
  ProbeResult global_probe;
};

/// Probes every local question plus the global question against one image.
/// Either all probes succeed or the error propagates; no partial scores.
inline ImageScore score_image(const ImageArtifact& image, const QuestionSet& questions,
                              Backend& backend) {
  if (questions.local.empty()) throw MismatchedQuestionSets("question set has no local questions");
  ImageScore score;
  score.local_probes.reserve(questions.local.size());
  for (const auto& q : questions.local) {
    score.local_probes.push_back(backend.vqa_probe(image, q.question));
  }
  score.global_probe = backend.vqa_probe(image, questions.global);
  score.s_local = mean_margin(score.local_probes);
  score.s_global = score.global_probe.p_yes - score.global_probe.p_no;
  return score;
}

/// Binary answers derived from probe margins; ties count as "no".
inline std::vector<bool> binary_answers(const std::vector<ProbeResult>& probes) {
  std::vector<bool> out;
  out.reserve(probes.size());
  for (const auto& p : probes) out.push_back(p.p_yes > p.p_no);
  return out;
}

struct QuestionTranscript {
  std::string question;
  ProbeResult winning;
  ProbeResult losing;
};

/// Per-pair scores: both images judged against the same question set derived
/// from the original base prompt.
struct ScoreCard {
  PerturbKind kind{};
  double s_local_w = 0.0;
  double s_global_w = 0.0;
  double s_local_l = 0.0;
  double s_global_l = 0.0;
  std::vector<QuestionTranscript> local;
  QuestionTranscript global;

  double delta_local() const { return s_local_w - s_local_l; }
  double delta_global() const { return s_global_w - s_global_l; }
};

inline ScoreCard score_pair(const ImageArtifact& winning, const ImageArtifact& losing,
                            const QuestionSet& questions, Backend& backend,
                            PerturbKind kind = PerturbKind::Swap) {
  ImageScore w = score_image(winning, questions, backend);
  ImageScore l = score_image(losing, questions, backend);
  ScoreCard card;
  card.kind = kind;
  card.s_local_w = w.s_local;
  card.s_global_w = w.s_global;
  card.s_local_l = l.s_local;
  card.s_global_l = l.s_global;
  for (std::size_t i = 0; i < questions.local.size(); ++i) {
    card.local.push_back({questions.local[i].question, w.local_probes[i], l.local_probes[i]});
  }
  card.global = {questions.global, w.global_probe, l.global_probe};
  return card;
}

inline void to_json(nlohmann::json& j, const ProbeResult& p) {
  j = {{"p_yes", p.p_yes}, {"p_no", p.p_no}};
}

inline void from_json(const nlohmann::json& j, ProbeResult& p) {
  p.p_yes = j.at("p_yes");
  p.p_no = j.at("p_no");
}

inline void to_json(nlohmann::json& j, const QuestionTranscript& q) {
  j = {{"question", q.question}, {"w", q.winning}, {"l", q.losing}};
}

inline void from_json(const nlohmann::json& j, QuestionTranscript& q) {
  q.question = j.at("question");
  q.winning = j.at("w").get<ProbeResult>();
  q.losing = j.at("l").get<ProbeResult>();
}

inline void to_json(nlohmann::json& j, const ScoreCard& c) {
  j = {{"kind", std::string(perturb_kind_name(c.kind))},
       {"s_local_w", c.s_local_w},
       {"s_global_w", c.s_global_w},
       {"s_local_l", c.s_local_l},
       {"s_global_l", c.s_global_l},
       {"local", c.local},
       {"global", c.global}};
}

inline void from_json(const nlohmann::json& j, ScoreCard& c) {
  c.kind = perturb_kind_from_name(j.at("kind").get<std::string>());
  c.s_local_w = j.at("s_local_w");
  c.s_global_w = j.at("s_global_w");
  c.s_local_l = j.at("s_local_l");
  c.s_global_l = j.at("s_global_l");
  c.local = j.at("local").get<std::vector<QuestionTranscript>>();
  c.global = j.at("global").get<QuestionTranscript>();
}

}  // namespace ospo
