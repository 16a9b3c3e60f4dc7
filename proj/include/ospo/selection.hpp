#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ospo/errors.hpp"
#include "ospo/perturb.hpp"
#include "ospo/vqa.hpp"

namespace ospo {

/// Winning-minus-losing score gap for one candidate pair.
struct GapRecord {
  PerturbKind kind{};
  double delta_local = 0.0;
  double delta_global = 0.0;
};

/// Gaps for every scored candidate; skipped candidates simply carry no
/// record.
inline std::vector<GapRecord> compute_gaps(const std::vector<ScoreCard>& cards) {
  std::vector<GapRecord> gaps;
  gaps.reserve(cards.size());
  for (const auto& c : cards) {
    gaps.push_back(GapRecord{c.kind, c.delta_local(), c.delta_global()});
  }
  return gaps;
}

struct SelectionResult {
  std::array<std::optional<double>, 3> t_scores;  // indexed by PerturbKind
  int chosen_index = 0;                           // 1..3 in kind order; 0 when discarded
  std::optional<PerturbKind> chosen_kind;
  double delta_max_local = 0.0;
  double delta_max_global = 0.0;
  bool discarded = false;
  std::string reason;
};

/// Preference-strength selection:
///   T_i = (delta_local_i / Delta_local) / (delta_global_i / Delta_global)
/// with every denominator-bound quantity floored at epsilon so the ratio is
/// total. Candidates without a positive local gap are excluded; ties break by
/// the fixed kind order Swap < Replace < Drop. When no candidate survives the
/// sample is discarded rather than role-flipped.
inline SelectionResult select_pair(const std::vector<GapRecord>& gaps, double epsilon = 1e-6) {
  if (gaps.empty()) throw NoCandidates("all candidates were skipped");
  if (epsilon <= 0.0) throw ConfigError("epsilon must be positive");

  SelectionResult result;
  double delta_max_local = gaps.front().delta_local;
  double delta_max_global = gaps.front().delta_global;
  for (const auto& g : gaps) {
    delta_max_local = std::max(delta_max_local, g.delta_local);
    delta_max_global = std::max(delta_max_global, g.delta_global);
  }
  result.delta_max_local = delta_max_local;
  result.delta_max_global = delta_max_global;

  const double local_norm = std::max(delta_max_local, epsilon);
  const double global_norm = std::max(delta_max_global, epsilon);

  double best_t = 0.0;
  for (PerturbKind kind : all_perturb_kinds()) {
    const GapRecord* gap = nullptr;
    for (const auto& g : gaps) {
      if (g.kind == kind) {
        gap = &g;
        break;
      }
    }
    if (!gap) continue;
    double t = (gap->delta_local / local_norm) / (std::max(gap->delta_global, epsilon) / global_norm);
    result.t_scores[static_cast<std::size_t>(kind)] = t;
    if (gap->delta_local <= 0.0) continue;
    if (!result.chosen_kind || t > best_t) {
      best_t = t;
      result.chosen_kind = kind;
    }
  }

  if (!result.chosen_kind) {
    result.discarded = true;
    result.reason = "no_positive_local_gap";
    return result;
  }
  result.chosen_index = static_cast<int>(*result.chosen_kind) + 1;
  return result;
}

inline void to_json(nlohmann::json& j, const GapRecord& g) {
  j = {{"kind", std::string(perturb_kind_name(g.kind))},
       {"delta_local", g.delta_local},
       {"delta_global", g.delta_global}};
}

inline void from_json(const nlohmann::json& j, GapRecord& g) {
  g.kind = perturb_kind_from_name(j.at("kind").get<std::string>());
  g.delta_local = j.at("delta_local");
  g.delta_global = j.at("delta_global");
}

inline void to_json(nlohmann::json& j, const SelectionResult& s) {
  nlohmann::json scores = nlohmann::json::array();
  for (const auto& t : s.t_scores) {
    if (t) {
      scores.push_back(*t);
    } else {
      scores.push_back(nullptr);
    }
  }
  j = {{"t_scores", scores},
       {"chosen_index", s.chosen_index},
       {"delta_max_local", s.delta_max_local},
       {"delta_max_global", s.delta_max_global},
       {"discarded", s.discarded},
       {"reason", s.reason}};
  if (s.chosen_kind) j["chosen_kind"] = std::string(perturb_kind_name(*s.chosen_kind));
}

inline void from_json(const nlohmann::json& j, SelectionResult& s) {
  const auto& scores = j.at("t_scores");
  for (std::size_t i = 0; i < 3 && i < scores.size(); ++i) {
    if (!scores[i].is_null()) s.t_scores[i] = scores[i].get<double>();
  }
  s.chosen_index = j.at("chosen_index");
  s.delta_max_local = j.at("delta_max_local");
  s.delta_max_global = j.at("delta_max_global");
  s.discarded = j.at("discarded");
  s.reason = j.at("reason");
  if (j.contains("chosen_kind")) {
    s.chosen_kind = perturb_kind_from_name(j.at("chosen_kind").get<std::string>());
  }
}

}  // namespace ospo
