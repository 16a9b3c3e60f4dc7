#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "ospo/rng.hpp"
#include "ospo/simpo.hpp"

using namespace ospo;

namespace {

PreferenceRecord record(const std::string& prompt, std::vector<int> w, std::vector<int> l) {
  PreferenceRecord r;
  r.prompt_surface = prompt;
  r.winning_tokens = std::move(w);
  r.losing_tokens = std::move(l);
  return r;
}

/// Central finite differences over every parameter; the loss function itself
/// is the only implementation piece reused.
std::vector<double> finite_difference_gradient(ToyPolicy policy,
                                               const std::vector<PreferenceRecord>& batch,
                                               const SimpoConfig& cfg, double h) {
  std::vector<double> grad(policy.shape().params());
  auto& theta = policy.parameters();
  for (std::size_t i = 0; i < theta.size(); ++i) {
    double saved = theta[i];
    theta[i] = saved + h;
    double up = simpo_loss(policy, batch, cfg).loss;
    theta[i] = saved - h;
    double down = simpo_loss(policy, batch, cfg).loss;
    theta[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// Relative error floored at unit scale, the usual gradient-check contract.
double max_relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double denom = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

std::vector<PreferenceRecord> random_batch(Rng& rng, const PolicyShape& shape, std::size_t n) {
  std::vector<PreferenceRecord> batch;
  for (std::size_t i = 0; i < n; ++i) {
    auto seq = [&] {
      std::size_t len = 1 + rng.pick_index(shape.max_len);
      std::vector<int> y(len);
      for (auto& t : y) t = static_cast<int>(rng.pick_index(shape.vocab));
      return y;
    };
    batch.push_back(record("prompt " + std::to_string(rng.pick_index(50)), seq(), seq()));
  }
  return batch;
}

}  // namespace

TEST_CASE("equal rewards and zero margin give loss ln 2") {
  PolicyShape shape{8, 4, 2};
  ToyPolicy policy(shape);
  policy.randomize(5);
  SimpoConfig cfg;
  cfg.gamma = 0.0;
  // Identical sequences force r_w == r_l exactly.
  std::vector<PreferenceRecord> batch = {record("p", {1, 2, 3}, {1, 2, 3})};
  LossResult out = simpo_loss(policy, batch, cfg);
  CHECK(std::abs(out.loss - std::log(2.0)) <= 1e-12);
  CHECK(out.mean_margin == 0.0);
}

TEST_CASE("margin equal to gamma gives loss ln 2") {
  // V=2, L=1, B=1: theta = (a, 0) makes r_w - r_l = a exactly.
  PolicyShape shape{2, 1, 1};
  ToyPolicy policy(shape);
  const double a = 1.25;
  policy.logit(0, 0, 0) = a;
  SimpoConfig cfg;
  cfg.beta = 2.0;
  cfg.gamma = 2.0 * a;
  std::vector<PreferenceRecord> batch = {record("p", {0}, {1})};
  LossResult out = simpo_loss(policy, batch, cfg);
  CHECK(std::abs(out.loss - std::log(2.0)) <= 1e-12);
}

TEST_CASE("analytic gradient matches central finite differences") {
  Rng rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    PolicyShape shape{3 + rng.pick_index(6), 2 + rng.pick_index(4), 1 + rng.pick_index(3)};
    ToyPolicy policy(shape);
    policy.randomize(rng.next_u64(), 1.0);
    SimpoConfig cfg;
    cfg.beta = 0.5 + rng.next_double() * 9.5;
    cfg.gamma = rng.next_double() * 3.0;
    auto batch = random_batch(rng, shape, 1 + rng.pick_index(4));

    LossResult analytic = simpo_loss(policy, batch, cfg);
    auto fd = finite_difference_gradient(policy, batch, cfg, 1e-4);
    CHECK(max_relative_error(analytic.gradient, fd) <= 1e-6);
  }
}

TEST_CASE("loss is positive, finite, and decreasing in the reward margin") {
  PolicyShape shape{2, 1, 1};
  SimpoConfig cfg;
  cfg.beta = 1.0;
  cfg.gamma = 0.5;
  double prev = 1e300;
  for (double a : {-3.0, -1.0, 0.0, 1.0, 3.0, 10.0}) {
    ToyPolicy policy(shape);
    policy.logit(0, 0, 0) = a;
    double loss = simpo_loss(policy, {record("p", {0}, {1})}, cfg).loss;
    CHECK(loss > 0.0);
    CHECK(std::isfinite(loss));
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("swapping winner and loser mirrors the loss argument") {
  PolicyShape shape{2, 1, 1};
  SimpoConfig cfg;
  cfg.beta = 3.0;
  cfg.gamma = 0.0;
  for (double a : {-2.0, -0.5, 0.0, 0.7, 1.9}) {
    ToyPolicy up(shape);
    up.logit(0, 0, 0) = a;
    ToyPolicy down(shape);
    down.logit(0, 0, 0) = -a;
    double swapped = simpo_loss(up, {record("p", {1}, {0})}, cfg).loss;
    double mirrored = simpo_loss(down, {record("p", {0}, {1})}, cfg).loss;
    CHECK(swapped == doctest::Approx(mirrored).epsilon(1e-12));
  }
}

TEST_CASE("length normalization cancels token duplication") {
  PolicyShape shape{6, 4, 2};
  ToyPolicy policy(shape);
  policy.randomize(17, 0.8);
  SimpoConfig cfg;
  cfg.beta = 4.0;
  cfg.gamma = 1.0;
  std::vector<PreferenceRecord> batch = {record("p", {1, 4}, {2, 3})};
  double base_loss = simpo_loss(policy, batch, cfg).loss;

  // Duplicate every token and every position of theta.
  PolicyShape doubled{shape.vocab, shape.max_len * 2, shape.buckets};
  ToyPolicy policy2(doubled);
  for (std::size_t b = 0; b < shape.buckets; ++b) {
    for (std::size_t t = 0; t < shape.max_len; ++t) {
      for (std::size_t v = 0; v < shape.vocab; ++v) {
        policy2.logit(b, 2 * t, v) = policy.logit(b, t, v);
        policy2.logit(b, 2 * t + 1, v) = policy.logit(b, t, v);
      }
    }
  }
  std::vector<PreferenceRecord> batch2 = {record("p", {1, 1, 4, 4}, {2, 2, 3, 3})};
  double doubled_loss = simpo_loss(policy2, batch2, cfg).loss;
  CHECK(doubled_loss == doctest::Approx(base_loss).epsilon(1e-12));
}

TEST_CASE("record validation rejects malformed sequences") {
  ToyPolicy policy(PolicyShape{8, 4, 2});
  CHECK_THROWS_AS(policy.validate_record(record("p", {}, {1})), ConfigError);
  CHECK_THROWS_AS(policy.validate_record(record("p", {1, 2, 3, 4, 5}, {1})), ConfigError);
  CHECK_THROWS_AS(policy.validate_record(record("p", {9}, {1})), ConfigError);
  CHECK_NOTHROW(policy.validate_record(record("p", {7, 0}, {1})));
}

TEST_CASE("non-finite parameters raise NonFiniteLoss") {
  ToyPolicy policy(PolicyShape{4, 2, 1});
  policy.logit(0, 0, 0) = std::numeric_limits<double>::infinity();
  SimpoConfig cfg;
  CHECK_THROWS_AS(simpo_loss(policy, {record("p", {0}, {1})}, cfg), NonFiniteLoss);
}

TEST_CASE("zero learning rate leaves parameters and loss unchanged") {
  PolicyShape shape{8, 4, 4};
  ToyPolicy policy(shape);
  policy.randomize(23);
  std::vector<double> before = policy.parameters();
  Rng rng(31);
  auto dataset = random_batch(rng, shape, 8);
  SimpoConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.steps = 5;
  TrainResult result = train(policy, dataset, cfg);
  CHECK(result.policy.parameters() == before);
  for (const auto& row : result.trace) CHECK(row.loss == result.trace.front().loss);
}

TEST_CASE("training decreases loss and raises the margin") {
  PolicyShape shape{16, 6, 8};
  ToyPolicy policy(shape);
  Rng rng(37);
  auto dataset = random_batch(rng, shape, 64);
  SimpoConfig cfg = SimpoConfig::toy();
  cfg.steps = 50;
  TrainResult result = train(policy, dataset, cfg);
  CHECK(result.trace.back().loss < result.trace.front().loss);
  CHECK(result.trace.back().mean_margin > result.trace.front().mean_margin);
  CHECK(result.trace.size() == 51);
}

TEST_CASE("a single record drives the loss toward zero") {
  PolicyShape shape{6, 3, 2};
  ToyPolicy policy(shape);
  SimpoConfig cfg;
  cfg.beta = 2.0;
  cfg.gamma = 1.0;
  cfg.learning_rate = 0.5;
  cfg.steps = 400;
  std::vector<PreferenceRecord> dataset = {record("only", {1, 2, 3}, {4, 5, 0})};
  TrainResult result = train(policy, dataset, cfg);
  CHECK(result.trace.back().loss < 0.01);
  CHECK(result.trace.back().loss < result.trace.front().loss);
  CHECK(result.trace.back().mean_margin > result.trace.front().mean_margin);
}

TEST_CASE("training is deterministic") {
  PolicyShape shape{8, 4, 4};
  Rng rng(41);
  auto dataset = random_batch(rng, shape, 16);
  SimpoConfig cfg = SimpoConfig::toy();
  cfg.steps = 20;
  TrainResult a = train(ToyPolicy(shape), dataset, cfg);
  TrainResult b = train(ToyPolicy(shape), dataset, cfg);
  CHECK(a.policy.parameters() == b.policy.parameters());
  for (std::size_t i = 0; i < a.trace.size(); ++i) CHECK(a.trace[i].loss == b.trace[i].loss);
}

TEST_CASE("checkpoints round-trip through disk") {
  PolicyShape shape{8, 4, 4};
  ToyPolicy policy(shape);
  policy.randomize(47);
  auto path = std::filesystem::temp_directory_path() / "ospo_test_policy.ckpt";
  save_checkpoint(policy, 123, path.string());
  int step = 0;
  ToyPolicy back = load_checkpoint(path.string(), &step);
  CHECK(step == 123);
  CHECK(back.shape().vocab == shape.vocab);
  CHECK(back.parameters() == policy.parameters());
  std::filesystem::remove(path);
}

TEST_CASE("config presets carry the documented defaults") {
  SimpoConfig paper = SimpoConfig::paper();
  CHECK(paper.beta == 10.0);
  CHECK(paper.gamma == 5.0);
  CHECK(paper.learning_rate == 4e-5);
  CHECK(paper.epochs == 1);
  CHECK(paper.batch_size == 128);
  SimpoConfig toy = SimpoConfig::toy();
  CHECK(toy.learning_rate == 1e-2);
  CHECK(toy.beta == 10.0);
}
