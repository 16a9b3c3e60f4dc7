#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ospo/backend.hpp"
#include "ospo/errors.hpp"
#include "ospo/perturb.hpp"
#include "ospo/questions.hpp"
#include "ospo/rng.hpp"
#include "ospo/selection.hpp"
#include "ospo/vqa.hpp"

namespace ospo {

/// Taxonomy of semantically indistinguishable pairs. Classification
/// precedence is AllYes, AllNo, AllSame, Distinct.
enum class CaseLabel { AllYes, AllNo, AllSame, Distinct };

inline std::string_view case_label_name(CaseLabel c) {
  switch (c) {
    case CaseLabel::AllYes: return "all_yes";
    case CaseLabel::AllNo: return "all_no";
    case CaseLabel::AllSame: return "all_same";
    case CaseLabel::Distinct: return "distinct";
  }
  return "distinct";
}

inline bool indistinguishable(CaseLabel c) { return c != CaseLabel::Distinct; }

inline CaseLabel classify_indistinguishable(const std::vector<bool>& best_answers,
                                            const std::vector<bool>& worst_answers) {
  if (best_answers.size() != worst_answers.size() || best_answers.empty()) {
    throw MismatchedQuestionSets("answer vectors must align on the same question list");
  }
  auto all = [](const std::vector<bool>& v, bool value) {
    return std::all_of(v.begin(), v.end(), [&](bool b) { return b == value; });
  };
  if (all(best_answers, true) && all(worst_answers, true)) return CaseLabel::AllYes;
  if (all(best_answers, false) && all(worst_answers, false)) return CaseLabel::AllNo;
  if (best_answers == worst_answers) return CaseLabel::AllSame;
  return CaseLabel::Distinct;
}

/// One prompt's Best-of-N outcome: every image's binary answer profile plus
/// the extreme pair chosen by correctness count.
struct BestOfNOutcome {
  std::size_t best_index = 0;
  std::size_t worst_index = 0;
  std::vector<std::vector<bool>> answers;  // per image, per local question
  ScoreCard card;                          // best as winning, worst as losing
};

/// Generates n images from the prompt with distinct seed substreams and picks
/// best/worst by binary VQA correctness count (ties resolve to the lower seed
/// index). The correct answer to every decomposed question is "yes".
inline BestOfNOutcome run_best_of_n(const StructuredPrompt& prompt, int n,
                                    const DecodeParams& decode, const CorruptionParams& corruption,
                                    Backend& backend, std::uint64_t seed) {
  if (n < 2) throw ConfigError("best-of-n requires n >= 2");
  QuestionSet questions = decompose_questions(prompt);
  Rng stream = Rng(seed).substream("best_of_n");

  BestOfNOutcome outcome;
  std::vector<ImageArtifact> images;
  std::vector<ImageScore> scores;
  std::size_t best_correct = 0, worst_correct = 0;
  for (int i = 0; i < n; ++i) {
    DecodeParams d = decode;
    d.seed = stream.substream(static_cast<std::uint64_t>(i)).state();
    ImageArtifact image = backend.generate_image(prompt, d, corruption);
    ImageScore score = score_image(image, questions, backend);
    std::vector<bool> answers = binary_answers(score.local_probes);
    std::size_t correct = static_cast<std::size_t>(std::count(answers.begin(), answers.end(), true));
    if (i == 0 || correct > best_correct) {
      best_correct = correct;
      outcome.best_index = static_cast<std::size_t>(i);
    }
    if (i == 0 || correct < worst_correct) {
      worst_correct = correct;
      outcome.worst_index = static_cast<std::size_t>(i);
    }
    outcome.answers.push_back(std::move(answers));
    images.push_back(std::move(image));
    scores.push_back(std::move(score));
  }

  const ImageScore& w = scores[outcome.best_index];
  const ImageScore& l = scores[outcome.worst_index];
  outcome.card.kind = PerturbKind::Swap;  // tag unused for best-of-n pairs
  outcome.card.s_local_w = w.s_local;
  outcome.card.s_global_w = w.s_global;
  outcome.card.s_local_l = l.s_local;
  outcome.card.s_global_l = l.s_global;
  for (std::size_t q = 0; q < questions.local.size(); ++q) {
    outcome.card.local.push_back(
        {questions.local[q].question, w.local_probes[q], l.local_probes[q]});
  }
  outcome.card.global = {questions.global, w.global_probe, l.global_probe};
  return outcome;
}

// ---------------------------------------------------------------------------
// Gap density histogram
// ---------------------------------------------------------------------------

struct GapHistogram {
  static constexpr double kGlobalWidth = 0.25;
  static constexpr double kLocalWidth = 0.2;
  static constexpr int kGlobalBins = 16;  // [-2, 2]
  static constexpr int kLocalBins = 20;   // [-2, 2]

  std::array<std::array<std::size_t, kLocalBins>, kGlobalBins> counts{};
  std::size_t total = 0;

  // Half-open bins; the nudge keeps exact-decimal edge values in their upper
  // bin despite inexact division.
  static int global_bin(double delta) {
    int bin = static_cast<int>(std::floor((delta + 2.0) / kGlobalWidth + 1e-9));
    return std::clamp(bin, 0, kGlobalBins - 1);
  }
  static int local_bin(double delta) {
    int bin = static_cast<int>(std::floor((delta + 2.0) / kLocalWidth + 1e-9));
    return std::clamp(bin, 0, kLocalBins - 1);
  }

  void add(const GapRecord& gap) {
    ++counts[static_cast<std::size_t>(global_bin(gap.delta_global))]
            [static_cast<std::size_t>(local_bin(gap.delta_local))];
    ++total;
  }

  std::size_t global_bin_total(int g) const {
    std::size_t sum = 0;
    for (std::size_t c : counts[static_cast<std::size_t>(g)]) sum += c;
    return sum;
  }

  /// Density of local gaps within one global bin (integrates to 1 per bin).
  double density(int g, int l) const {
    std::size_t bin_total = global_bin_total(g);
    if (bin_total == 0) return 0.0;
    return static_cast<double>(counts[static_cast<std::size_t>(g)][static_cast<std::size_t>(l)]) /
           (static_cast<double>(bin_total) * kLocalWidth);
  }

  std::string to_csv() const {
    std::string out = "global_lo,global_hi,local_lo,local_hi,count,density\n";
    char buf[160];
    for (int g = 0; g < kGlobalBins; ++g) {
      for (int l = 0; l < kLocalBins; ++l) {
        double glo = -2.0 + g * kGlobalWidth;
        double llo = -2.0 + l * kLocalWidth;
        std::snprintf(buf, sizeof(buf), "%.2f,%.2f,%.1f,%.1f,%zu,%.6f\n", glo, glo + kGlobalWidth,
                      llo, llo + kLocalWidth, counts[static_cast<std::size_t>(g)][static_cast<std::size_t>(l)],
                      density(g, l));
        out += buf;
      }
    }
    return out;
  }
};

inline GapHistogram gap_density_report(const std::vector<GapRecord>& gaps) {
  if (gaps.empty()) throw EmptyManifest("no score gaps to report");
  GapHistogram hist;
  for (const auto& g : gaps) hist.add(g);
  return hist;
}

/// Mean local gap over pairs whose global gap is below the threshold;
/// returns (mean, n).
inline std::pair<double, std::size_t> mean_local_given_global_below(
    const std::vector<GapRecord>& gaps, double threshold) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& g : gaps) {
    if (g.delta_global < threshold) {
      sum += g.delta_local;
      ++n;
    }
  }
  return {n ? sum / static_cast<double>(n) : 0.0, n};
}

// ---------------------------------------------------------------------------
// Head-to-head comparison of Best-of-N pairing vs OSPO perturbation pairing
// ---------------------------------------------------------------------------

struct CompareOptions {
  int best_of_n = 10;
  double selection_epsilon = 1e-6;
  std::size_t densify_context_items = 2;
  double low_global_threshold = 0.5;
};

struct CompareReport {
  // Case counts per category, per pipeline.
  std::map<std::string, std::array<std::size_t, 4>> bon_cases;
  std::map<std::string, std::array<std::size_t, 4>> ospo_cases;
  std::size_t bon_total = 0;
  std::size_t bon_indistinguishable = 0;
  std::size_t ospo_total = 0;  // selected pairs only
  std::size_t ospo_indistinguishable = 0;
  std::size_t ospo_discarded = 0;
  std::vector<GapRecord> bon_gaps;
  std::vector<GapRecord> ospo_gaps;

  double bon_fraction() const {
    return bon_total ? static_cast<double>(bon_indistinguishable) / static_cast<double>(bon_total)
                     : 0.0;
  }
  double ospo_fraction() const {
    return ospo_total
               ? static_cast<double>(ospo_indistinguishable) / static_cast<double>(ospo_total)
               : 0.0;
  }
  /// best-of-n fraction over ospo fraction; infinity when ospo has none.
  double fraction_ratio() const {
    double o = ospo_fraction();
    if (o == 0.0) {
      return bon_fraction() > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
    }
    return bon_fraction() / o;
  }
};

/// Runs one OSPO candidate construction (perturb, densify, generate, score)
/// for every kind and selects the training pair. Returns the cards in kind
/// order for candidates that were perturbable.
struct OspoSampleOutcome {
  std::vector<ScoreCard> cards;
  std::vector<std::pair<std::vector<int>, std::vector<int>>> tokens;  // (w, l) per card
  SelectionResult selection;
  bool has_selection = false;
};

inline OspoSampleOutcome build_ospo_pairs(const StructuredPrompt& prompt,
                                          const KeywordPools& pools, const DecodeParams& decode,
                                          const CorruptionParams& corruption, Backend& backend,
                                          std::uint64_t seed, double epsilon,
                                          std::size_t context_items) {
  OspoSampleOutcome outcome;
  QuestionSet questions = decompose_questions(prompt);
  Rng stream = Rng(seed).substream("ospo_pairs");
  for (PerturbKind kind : all_perturb_kinds()) {
    Rng kind_stream = stream.substream(perturb_kind_name(kind));
    StructuredPrompt negative;
    try {
      negative = perturb(prompt, kind, pools, kind_stream.substream("perturb").state());
    } catch (const NotPerturbable&) {
      continue;
    }
    DensifyOptions opts;
    opts.context_items = context_items;
    DensePromptPair pair = densify_pair(prompt, negative, kind,
                                        kind_stream.substream("densify").state(), pools, opts);
    DecodeParams dw = decode;
    dw.seed = kind_stream.substream("image_w").state();
    DecodeParams dl = decode;
    dl.seed = kind_stream.substream("image_l").state();
    ImageArtifact winning = backend.generate_image(pair.base_dense, dw, corruption);
    ImageArtifact losing = backend.generate_image(pair.negative_dense, dl, corruption);
    outcome.cards.push_back(score_pair(winning, losing, questions, backend, kind));
    outcome.tokens.emplace_back(winning.tokens(), losing.tokens());
  }
  if (outcome.cards.empty()) return outcome;
  outcome.selection = select_pair(compute_gaps(outcome.cards), epsilon);
  outcome.has_selection = true;
  return outcome;
}

/// Preliminary-experiment style comparison: the Best-of-N pairing and the
/// OSPO perturbation pairing are evaluated on the same prompts and corruption
/// parameters. The OSPO fraction is computed over selected (training-bound)
/// pairs; discarded samples are reported separately.
inline CompareReport compare_pipelines(const std::vector<StructuredPrompt>& prompts,
                                       const KeywordPools& pools, const DecodeParams& decode,
                                       const CorruptionParams& corruption, Backend& backend,
                                       std::uint64_t seed, const CompareOptions& opts = {}) {
  CompareReport report;
  Rng root(seed);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const StructuredPrompt& prompt = prompts[i];
    const std::string cat(category_name(prompt.category));
    Rng sample_stream = root.substream("compare").substream(i);

    BestOfNOutcome bon = run_best_of_n(prompt, opts.best_of_n, decode, corruption, backend,
                                       sample_stream.substream("bon").state());
    CaseLabel bon_label =
        classify_indistinguishable(bon.answers[bon.best_index], bon.answers[bon.worst_index]);
    ++report.bon_cases[cat][static_cast<std::size_t>(bon_label)];
    ++report.bon_total;
    if (indistinguishable(bon_label)) ++report.bon_indistinguishable;
    report.bon_gaps.push_back(
        GapRecord{PerturbKind::Swap, bon.card.delta_local(), bon.card.delta_global()});

    OspoSampleOutcome ospo = build_ospo_pairs(prompt, pools, decode, corruption, backend,
                                              sample_stream.substream("ospo").state(),
                                              opts.selection_epsilon, opts.densify_context_items);
    if (!ospo.has_selection || ospo.selection.discarded) {
      ++report.ospo_discarded;
      continue;
    }
    const ScoreCard* chosen = nullptr;
    for (const auto& card : ospo.cards) {
      if (card.kind == *ospo.selection.chosen_kind) chosen = &card;
    }
    std::vector<ProbeResult> w_probes, l_probes;
    for (const auto& t : chosen->local) {
      w_probes.push_back(t.winning);
      l_probes.push_back(t.losing);
    }
    CaseLabel ospo_label =
        classify_indistinguishable(binary_answers(w_probes), binary_answers(l_probes));
    ++report.ospo_cases[cat][static_cast<std::size_t>(ospo_label)];
    ++report.ospo_total;
    if (indistinguishable(ospo_label)) ++report.ospo_indistinguishable;
    report.ospo_gaps.push_back(
        GapRecord{chosen->kind, chosen->delta_local(), chosen->delta_global()});
  }
  return report;
}

inline std::string cases_csv(const CompareReport& report) {
  std::string out = "pipeline,category,all_yes,all_no,all_same,distinct\n";
  auto emit = [&](const char* name, const std::map<std::string, std::array<std::size_t, 4>>& table) {
    for (const auto& [cat, counts] : table) {
      out += std::string(name) + "," + cat;
      for (std::size_t c : counts) out += "," + std::to_string(c);
      out += "\n";
    }
  };
  emit("best_of_n", report.bon_cases);
  emit("ospo", report.ospo_cases);
  return out;
}

}  // namespace ospo
