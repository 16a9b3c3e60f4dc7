#include <doctest.h>

#include <cmath>
#include <optional>
#include <vector>

#include "ospo/rng.hpp"
#include "ospo/selection.hpp"

using namespace ospo;

namespace {

std::vector<GapRecord> gaps3(double l1, double g1, double l2, double g2, double l3, double g3) {
  return {GapRecord{PerturbKind::Swap, l1, g1}, GapRecord{PerturbKind::Replace, l2, g2},
          GapRecord{PerturbKind::Drop, l3, g3}};
}

/// Literal evaluation of the preference-strength ratio, written independently
/// of select_pair: plain maxima, plain division, first strict argmax. Valid
/// whenever every gap is strictly positive, where no flooring can trigger.
int brute_force_choice(const std::vector<GapRecord>& gaps) {
  double dl = gaps[0].delta_local, dg = gaps[0].delta_global;
  for (const auto& g : gaps) {
    dl = std::max(dl, g.delta_local);
    dg = std::max(dg, g.delta_global);
  }
  int best = -1;
  double best_t = 0.0;
  for (std::size_t i = 0; i < gaps.size(); ++i) {
    double t = (gaps[i].delta_local / dl) / (gaps[i].delta_global / dg);
    if (best < 0 || t > best_t) {
      best = static_cast<int>(i);
      best_t = t;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("gap computation is plain subtraction") {
  ScoreCard card;
  card.kind = PerturbKind::Swap;
  card.s_local_w = 0.9;
  card.s_local_l = 0.1;
  card.s_global_w = 0.3;
  card.s_global_l = 0.2;
  auto gaps = compute_gaps({card});
  REQUIRE(gaps.size() == 1);
  CHECK(gaps[0].delta_local == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(gaps[0].delta_global == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("gap extremes reach the documented range") {
  ScoreCard card;
  card.kind = PerturbKind::Drop;
  card.s_local_w = -1.0;
  card.s_local_l = 1.0;
  auto gaps = compute_gaps({card});
  CHECK(gaps[0].delta_local == -2.0);
}

TEST_CASE("the worked selection example evaluates exactly") {
  auto gaps = gaps3(0.8, 0.4, 0.4, 0.1, 0.2, 0.2);
  SelectionResult r = select_pair(gaps);
  REQUIRE(r.t_scores[0].has_value());
  CHECK(*r.t_scores[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(*r.t_scores[1] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(*r.t_scores[2] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.chosen_index == 2);
  CHECK(r.chosen_kind == PerturbKind::Replace);
  CHECK_FALSE(r.discarded);
  CHECK(r.delta_max_local == 0.8);
  CHECK(r.delta_max_global == 0.4);
}

TEST_CASE("ties break by the fixed kind order") {
  auto gaps = gaps3(0.5, 0.2, 0.5, 0.2, 0.5, 0.2);
  SelectionResult r = select_pair(gaps);
  CHECK(r.chosen_index == 1);
  CHECK(r.chosen_kind == PerturbKind::Swap);
}

TEST_CASE("no positive local gap discards the sample") {
  auto gaps = gaps3(-0.1, 0.3, -0.3, 0.1, 0.0, 0.2);
  SelectionResult r = select_pair(gaps);
  CHECK(r.discarded);
  CHECK(r.reason == "no_positive_local_gap");
  CHECK(r.chosen_index == 0);
}

TEST_CASE("empty candidate list is an error") {
  CHECK_THROWS_AS(select_pair({}), NoCandidates);
  CHECK_THROWS_AS(select_pair(gaps3(0.1, 0.1, 0.2, 0.1, 0.3, 0.1), 0.0), ConfigError);
}

TEST_CASE("selection agrees with the brute-force oracle on random triples") {
  Rng rng(1009);
  const double eps = 1e-6;
  int checked = 0;
  while (checked < 1000) {
    std::vector<GapRecord> gaps;
    for (PerturbKind kind : all_perturb_kinds()) {
      // Strictly positive gaps above epsilon, where the ratio needs no guard.
      gaps.push_back(GapRecord{kind, eps + rng.next_double() * 2.0, eps + rng.next_double() * 2.0});
    }
    SelectionResult r = select_pair(gaps, eps);
    REQUIRE_FALSE(r.discarded);
    CHECK(r.chosen_index == brute_force_choice(gaps) + 1);
    ++checked;
  }
}

TEST_CASE("argmax is equivariant under positive rescaling") {
  Rng rng(2027);
  for (int i = 0; i < 200; ++i) {
    std::vector<GapRecord> gaps;
    for (PerturbKind kind : all_perturb_kinds()) {
      gaps.push_back(GapRecord{kind, 0.01 + rng.next_double(), 0.01 + rng.next_double()});
    }
    SelectionResult base = select_pair(gaps);
    for (double c : {0.5, 3.0}) {
      auto scaled_local = gaps;
      for (auto& g : scaled_local) g.delta_local *= c;
      CHECK(select_pair(scaled_local).chosen_index == base.chosen_index);
      auto scaled_global = gaps;
      for (auto& g : scaled_global) g.delta_global *= c;
      CHECK(select_pair(scaled_global).chosen_index == base.chosen_index);
    }
  }
}

TEST_CASE("preference strength rises with local gap and falls with global gap") {
  // Candidate 1 holds both maxima so the normalizers stay fixed while
  // candidate 2's gaps move.
  auto gaps = gaps3(1.0, 1.0, 0.5, 0.5, 0.3, 0.3);
  SelectionResult base = select_pair(gaps);
  double t0 = *base.t_scores[1];

  auto more_local = gaps;
  more_local[1].delta_local = 0.7;
  CHECK(*select_pair(more_local).t_scores[1] > t0);

  auto more_global = gaps;
  more_global[1].delta_global = 0.7;
  CHECK(*select_pair(more_global).t_scores[1] < t0);
}

TEST_CASE("chosen candidates always carry a positive local gap") {
  Rng rng(3049);
  for (int i = 0; i < 500; ++i) {
    std::vector<GapRecord> gaps;
    std::size_t n = 1 + rng.pick_index(3);
    for (std::size_t k = 0; k < n; ++k) {
      gaps.push_back(GapRecord{static_cast<PerturbKind>(k), rng.next_double() * 4.0 - 2.0,
                               rng.next_double() * 4.0 - 2.0});
    }
    SelectionResult r = select_pair(gaps);
    if (r.discarded) continue;
    for (const auto& g : gaps) {
      if (static_cast<int>(g.kind) + 1 == r.chosen_index) CHECK(g.delta_local > 0.0);
    }
  }
}

TEST_CASE("partial candidate sets select among what is present") {
  std::vector<GapRecord> gaps = {GapRecord{PerturbKind::Drop, 0.4, 0.2}};
  SelectionResult r = select_pair(gaps);
  CHECK(r.chosen_index == 3);
  CHECK_FALSE(r.t_scores[0].has_value());
  CHECK_FALSE(r.t_scores[1].has_value());
  CHECK(r.t_scores[2].has_value());
}

TEST_CASE("selection result json round-trips") {
  SelectionResult r = select_pair(gaps3(0.8, 0.4, 0.4, 0.1, 0.2, 0.2));
  nlohmann::json j = r;
  SelectionResult back = j.get<SelectionResult>();
  CHECK(back.chosen_index == r.chosen_index);
  CHECK(back.chosen_kind == r.chosen_kind);
  CHECK(back.discarded == r.discarded);
  CHECK(*back.t_scores[1] == doctest::Approx(*r.t_scores[1]));
}
