#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ospo/errors.hpp"
#include "ospo/perturb.hpp"
#include "ospo/rng.hpp"

namespace ospo {

struct SimpoConfig {
  double beta = 10.0;
  double gamma = 5.0;
  double learning_rate = 4e-5;
  int epochs = 1;
  int batch_size = 128;
  int steps = 200;  // full-batch steps for desk-scale train()

  /// Full-scale hyperparameters (sized for a real model; kept as a preset).
  static SimpoConfig paper() { return SimpoConfig{}; }

  /// Desk-scale preset used by the simulator pipeline and the tests.
  static SimpoConfig toy() {
    SimpoConfig cfg;
    cfg.learning_rate = 1e-2;
    return cfg;
  }
};

struct PolicyShape {
  std::size_t vocab = 512;
  std::size_t max_len = 32;
  std::size_t buckets = 64;

  std::size_t params() const { return vocab * max_len * buckets; }
};

/// One (x, y_w, y_l) training triple. Token sequences come from the image
/// artifacts' canonical serialization.
struct PreferenceRecord {
  std::string prompt_surface;
  std::vector<int> winning_tokens;
  std::vector<int> losing_tokens;
  double t_score = 0.0;
  PerturbKind kind{};
};

/// Tabular autoregressive policy: a logits table indexed by
/// (prompt bucket, position, token). Prompts hash into buckets, which is the
/// minimal conditioning that makes the loss prompt-dependent.
class ToyPolicy {
 public:
  explicit ToyPolicy(PolicyShape shape = {}) : shape_(shape), theta_(shape.params(), 0.0) {}

  const PolicyShape& shape() const { return shape_; }
  std::vector<double>& parameters() { return theta_; }
  const std::vector<double>& parameters() const { return theta_; }

  std::size_t bucket_of(const std::string& prompt_surface) const {
    return static_cast<std::size_t>(Rng::hash_label(prompt_surface) % shape_.buckets);
  }

  double& logit(std::size_t bucket, std::size_t pos, std::size_t token) {
    return theta_[(bucket * shape_.max_len + pos) * shape_.vocab + token];
  }
  double logit(std::size_t bucket, std::size_t pos, std::size_t token) const {
    return theta_[(bucket * shape_.max_len + pos) * shape_.vocab + token];
  }

  void randomize(std::uint64_t seed, double scale = 0.5) {
    Rng rng = Rng(seed).substream("policy_init");
    for (auto& v : theta_) v = (rng.next_double() * 2.0 - 1.0) * scale;
  }

  void validate_record(const PreferenceRecord& rec) const {
    auto check = [&](const std::vector<int>& y, const char* side) {
      if (y.empty()) throw ConfigError(std::string("empty ") + side + " sequence");
      if (y.size() > shape_.max_len) {
        throw ConfigError(std::string(side) + " sequence longer than max_len (" +
                          std::to_string(y.size()) + " > " + std::to_string(shape_.max_len) + ")");
      }
      for (int t : y) {
        if (t < 0 || static_cast<std::size_t>(t) >= shape_.vocab) {
          throw ConfigError(std::string(side) + " token out of vocabulary: " + std::to_string(t));
        }
      }
    };
    check(rec.winning_tokens, "winning");
    check(rec.losing_tokens, "losing");
  }

 private:
  PolicyShape shape_;
  std::vector<double> theta_;
};

namespace detail {

inline double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

/// -log sigmoid(z) = softplus(-z), computed in the log-sum form.
inline double neg_log_sigmoid(double z) {
  return std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

/// Log-softmax rows for the (bucket, position) pairs a batch touches,
/// computed once per loss evaluation.
class LogSoftmaxCache {
 public:
  explicit LogSoftmaxCache(const ToyPolicy& policy)
      : policy_(policy), rows_(policy.shape().buckets * policy.shape().max_len) {}

  const std::vector<double>& row(std::size_t bucket, std::size_t pos) {
    auto& entry = rows_[bucket * policy_.shape().max_len + pos];
    if (!entry.empty()) return entry;
    const std::size_t v = policy_.shape().vocab;
    entry.resize(v);
    double max_logit = policy_.logit(bucket, pos, 0);
    for (std::size_t t = 1; t < v; ++t) max_logit = std::max(max_logit, policy_.logit(bucket, pos, t));
    double sum = 0.0;
    for (std::size_t t = 0; t < v; ++t) sum += std::exp(policy_.logit(bucket, pos, t) - max_logit);
    double lse = max_logit + std::log(sum);
    for (std::size_t t = 0; t < v; ++t) entry[t] = policy_.logit(bucket, pos, t) - lse;
    return entry;
  }

 private:
  const ToyPolicy& policy_;
  std::vector<std::vector<double>> rows_;
};

inline double avg_logprob(LogSoftmaxCache& cache, std::size_t bucket, const std::vector<int>& y) {
  double sum = 0.0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    sum += cache.row(bucket, t)[static_cast<std::size_t>(y[t])];
  }
  return sum / static_cast<double>(y.size());
}

}  // namespace detail

struct LossResult {
  double loss = 0.0;
  double mean_margin = 0.0;  // mean beta * (r_w - r_l)
  std::vector<double> gradient;
};

/// SimPO objective over a batch:
///   loss = mean_i  -log sigmoid(beta * r_w - beta * r_l - gamma),
///   r(y) = (1/|y|) log pi_theta(y | x),
/// with the exact analytic gradient in binary64.
inline LossResult simpo_loss(const ToyPolicy& policy, const std::vector<PreferenceRecord>& batch,
                             const SimpoConfig& cfg) {
  if (batch.empty()) throw ConfigError("simpo_loss requires a non-empty batch");
  if (cfg.beta <= 0.0) throw ConfigError("beta must be positive");
  if (cfg.gamma < 0.0) throw ConfigError("gamma must be non-negative");
  for (const auto& rec : batch) policy.validate_record(rec);

  detail::LogSoftmaxCache cache(policy);
  LossResult out;
  out.gradient.assign(policy.shape().params(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const std::size_t vocab = policy.shape().vocab;
  const std::size_t max_len = policy.shape().max_len;

  for (const auto& rec : batch) {
    const std::size_t bucket = policy.bucket_of(rec.prompt_surface);
    const double r_w = detail::avg_logprob(cache, bucket, rec.winning_tokens);
    const double r_l = detail::avg_logprob(cache, bucket, rec.losing_tokens);
    const double z = cfg.beta * (r_w - r_l) - cfg.gamma;
    out.loss += detail::neg_log_sigmoid(z) * inv_n;
    out.mean_margin += cfg.beta * (r_w - r_l) * inv_n;

    // d loss / d z = sigmoid(z) - 1, averaged over the batch.
    const double coef = (detail::stable_sigmoid(z) - 1.0) * inv_n * cfg.beta;
    const double inv_w = 1.0 / static_cast<double>(rec.winning_tokens.size());
    const double inv_l = 1.0 / static_cast<double>(rec.losing_tokens.size());
    const std::size_t longest = std::max(rec.winning_tokens.size(), rec.losing_tokens.size());
    for (std::size_t t = 0; t < longest; ++t) {
      const double sw = t < rec.winning_tokens.size() ? inv_w : 0.0;
      const double sl = t < rec.losing_tokens.size() ? inv_l : 0.0;
      double* grad_row = out.gradient.data() + (bucket * max_len + t) * vocab;
      const double dense = coef * (sw - sl);
      if (dense != 0.0) {
        const std::vector<double>& logp = cache.row(bucket, t);
        for (std::size_t v = 0; v < vocab; ++v) grad_row[v] -= dense * std::exp(logp[v]);
      }
      if (sw != 0.0) grad_row[static_cast<std::size_t>(rec.winning_tokens[t])] += coef * sw;
      if (sl != 0.0) grad_row[static_cast<std::size_t>(rec.losing_tokens[t])] -= coef * sl;
    }
  }

  if (!std::isfinite(out.loss)) throw NonFiniteLoss("simpo loss is not finite");
  return out;
}

struct TraceRow {
  int step = 0;
  double loss = 0.0;
  double mean_margin = 0.0;
};

struct TrainResult {
  ToyPolicy policy{PolicyShape{}};
  std::vector<TraceRow> trace;  // per-step metrics plus a final evaluation row
};

/// Full-batch gradient descent with a constant learning rate. The trace holds
/// metrics at the parameters entering each step, plus one evaluation row
/// after the final update.
inline TrainResult train(ToyPolicy policy, const std::vector<PreferenceRecord>& dataset,
                         const SimpoConfig& cfg) {
  if (dataset.empty()) throw ConfigError("training requires a non-empty dataset");
  if (cfg.learning_rate < 0.0) throw ConfigError("learning rate must be non-negative");
  TrainResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    LossResult eval;
    try {
      eval = simpo_loss(policy, dataset, cfg);
    } catch (const NonFiniteLoss&) {
      throw NonFiniteLoss("non-finite loss at step " + std::to_string(step));
    }
    result.trace.push_back({step, eval.loss, eval.mean_margin});
    auto& theta = policy.parameters();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      theta[i] -= cfg.learning_rate * eval.gradient[i];
    }
  }
  LossResult final_eval = simpo_loss(policy, dataset, cfg);
  result.trace.push_back({cfg.steps, final_eval.loss, final_eval.mean_margin});
  result.policy = std::move(policy);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line, then the raw little-endian tensor.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const ToyPolicy& policy, int step, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  nlohmann::json header = {{"V", policy.shape().vocab},
                           {"L", policy.shape().max_len},
                           {"B", policy.shape().buckets},
                           {"step", step}};
  out << header.dump() << '\n';
  const auto& theta = policy.parameters();
  out.write(reinterpret_cast<const char*>(theta.data()),
            static_cast<std::streamsize>(theta.size() * sizeof(double)));
}

inline ToyPolicy load_checkpoint(const std::string& path, int* step_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read checkpoint: " + path);
  std::string header_line;
  std::getline(in, header_line);
  nlohmann::json header = nlohmann::json::parse(header_line);
  PolicyShape shape;
  shape.vocab = header.at("V");
  shape.max_len = header.at("L");
  shape.buckets = header.at("B");
  if (step_out) *step_out = header.at("step");
  ToyPolicy policy(shape);
  auto& theta = policy.parameters();
  in.read(reinterpret_cast<char*>(theta.data()),
          static_cast<std::streamsize>(theta.size() * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != theta.size() * sizeof(double)) {
    throw ConfigError("checkpoint tensor truncated: " + path);
  }
  return policy;
}

inline void to_json(nlohmann::json& j, const PreferenceRecord& r) {
  j = {{"prompt", r.prompt_surface},
       {"y_w", r.winning_tokens},
       {"y_l", r.losing_tokens},
       {"t_score", r.t_score},
       {"kind", std::string(perturb_kind_name(r.kind))}};
}

inline void from_json(const nlohmann::json& j, PreferenceRecord& r) {
  r.prompt_surface = j.at("prompt");
  r.winning_tokens = j.at("y_w").get<std::vector<int>>();
  r.losing_tokens = j.at("y_l").get<std::vector<int>>();
  r.t_score = j.at("t_score");
  r.kind = perturb_kind_from_name(j.at("kind").get<std::string>());
}

inline void to_json(nlohmann::json& j, const SimpoConfig& c) {
  j = {{"beta", c.beta},           {"gamma", c.gamma},   {"learning_rate", c.learning_rate},
       {"epochs", c.epochs},       {"batch_size", c.batch_size}, {"steps", c.steps}};
}

inline void from_json(const nlohmann::json& j, SimpoConfig& c) {
  c.beta = j.value("beta", 10.0);
  c.gamma = j.value("gamma", 5.0);
  c.learning_rate = j.value("learning_rate", 4e-5);
  c.epochs = j.value("epochs", 1);
  c.batch_size = j.value("batch_size", 128);
  c.steps = j.value("steps", 200);
}

}  // namespace ospo
