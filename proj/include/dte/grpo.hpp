#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "dte/domain.hpp"
#include "dte/extract.hpp"
#include "dte/text.hpp"

namespace dte {

// --- shaped reward ---

inline double shaped_reward_components(bool correct, bool formatted, std::size_t n_tokens,
                                       const RewardParams& p) {
  return p.w_vote * (correct ? 1.0 : 0.0) + p.w_fmt * (formatted ? 1.0 : 0.0) +
         p.w_brev * std::exp(-static_cast<double>(n_tokens) / p.tau);
}

inline double shaped_reward(std::string_view raw_output, std::string_view y_star, TaskKind kind,
                            const RewardParams& params) {
  if (params.tau <= 0) throw std::invalid_argument("shaped_reward: tau must be positive");
  const std::string extracted = extract_normalized_answer(raw_output, kind);
  const bool correct = !extracted.empty() && extracted == normalize_answer(y_star, kind);
  const bool formatted = extract_xml(raw_output).format_ok;
  return shaped_reward_components(correct, formatted, token_count(raw_output), params);
}

// --- toy contextual categorical policy ---

struct ToyPolicy {
  std::vector<std::vector<double>> logits;  // [n_contexts][n_actions]
  std::vector<std::string> action_labels;

  int n_contexts() const { return static_cast<int>(logits.size()); }
  int n_actions() const { return logits.empty() ? 0 : static_cast<int>(logits[0].size()); }
  bool operator==(const ToyPolicy&) const = default;
};

inline void to_json(json& j, const ToyPolicy& p) {
  j = json{{"logits", p.logits}, {"action_labels", p.action_labels}};
}

inline void from_json(const json& j, ToyPolicy& p) {
  j.at("logits").get_to(p.logits);
  j.at("action_labels").get_to(p.action_labels);
}

inline void validate_policy(const ToyPolicy& p) {
  if (p.logits.empty()) throw std::invalid_argument("policy: no contexts");
  const std::size_t n_actions = p.logits[0].size();
  if (n_actions < 2) throw std::invalid_argument("policy: needs at least 2 actions");
  if (p.action_labels.size() != n_actions)
    throw std::invalid_argument("policy: action_labels size disagrees with logits");
  for (const auto& row : p.logits) {
    if (row.size() != n_actions) throw std::invalid_argument("policy: ragged logits");
    for (double v : row)
      if (!std::isfinite(v)) throw std::invalid_argument("policy: non-finite logit");
  }
}

inline ToyPolicy make_uniform_policy(int n_contexts, std::vector<std::string> labels) {
  if (n_contexts < 1) throw std::invalid_argument("make_uniform_policy: n_contexts < 1");
  if (labels.size() < 2) throw std::invalid_argument("make_uniform_policy: needs >= 2 labels");
  ToyPolicy p;
  p.logits.assign(n_contexts, std::vector<double>(labels.size(), 0.0));
  p.action_labels = std::move(labels);
  return p;
}

namespace detail {
inline void check_context(const ToyPolicy& p, int x) {
  if (x < 0 || x >= p.n_contexts())
    throw std::invalid_argument("context index " + std::to_string(x) + " out of range");
}
inline void check_action(const ToyPolicy& p, int y) {
  if (y < 0 || y >= p.n_actions())
    throw std::invalid_argument("action index " + std::to_string(y) + " out of range");
}
}  // namespace detail

inline double logsumexp(const std::vector<double>& v) {
  double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double log_prob(const ToyPolicy& p, int x, int y) {
  validate_policy(p);
  detail::check_context(p, x);
  detail::check_action(p, y);
  return p.logits[x][y] - logsumexp(p.logits[x]);
}

inline std::vector<double> action_probs(const ToyPolicy& p, int x) {
  detail::check_context(p, x);
  const auto& row = p.logits[x];
  double m = *std::max_element(row.begin(), row.end());
  std::vector<double> out(row.size());
  double s = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    out[i] = std::exp(row[i] - m);
    s += out[i];
  }
  for (double& v : out) v /= s;
  return out;
}

// Temperature-scaled sample; temperature 0 is argmax (lowest index wins ties).
inline int sample_action(const ToyPolicy& p, int x, double temperature, std::mt19937_64& rng) {
  detail::check_context(p, x);
  const auto& row = p.logits[x];
  if (temperature <= 0.0) {
    return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  std::vector<double> scaled(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) scaled[i] = row[i] / temperature;
  double m = *std::max_element(scaled.begin(), scaled.end());
  double s = 0.0;
  for (double& v : scaled) {
    v = std::exp(v - m);
    s += v;
  }
  const double u = u01(rng) * s;
  double acc = 0.0;
  for (std::size_t i = 0; i < scaled.size(); ++i) {
    acc += scaled[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(scaled.size()) - 1;
}

// KL(p || q) over a categorical support, with 0 * ln(0/q) = 0.
inline double kl_categorical(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size())
    throw std::invalid_argument("kl_categorical: support sizes differ");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0)
      throw std::invalid_argument("kl_categorical: q is zero where p is positive (divergence)");
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

// --- GRPO objective and its analytic gradient ---

struct SampleEntry {
  int context = 0;
  int action = 0;
  double reward = 0.0;
  double logprob_old = 0.0;  // log prob under the step-start policy
};

using SampleBatch = std::vector<SampleEntry>;

namespace detail {

inline void check_batch(const ToyPolicy& policy, const ToyPolicy& ref, const SampleBatch& batch) {
  validate_policy(policy);
  validate_policy(ref);
  if (policy.n_contexts() != ref.n_contexts() || policy.n_actions() != ref.n_actions())
    throw std::invalid_argument("grpo: policy and reference shapes differ");
  if (batch.empty()) throw std::invalid_argument("grpo: empty batch");
  for (const auto& e : batch) {
    check_context(policy, e.context);
    check_action(policy, e.action);
    if (!std::isfinite(e.reward)) throw std::invalid_argument("grpo: non-finite reward");
    if (e.logprob_old > 0.0)
      throw std::invalid_argument("grpo: logprob_old must be <= 0");
  }
}

// Per-entry effective rewards; group_mean_baseline subtracts the mean reward
// of each entry's context group within the batch.
inline std::vector<double> effective_rewards(const SampleBatch& batch, const GrpoParams& params) {
  std::vector<double> out(batch.size());
  if (!params.group_mean_baseline) {
    for (std::size_t i = 0; i < batch.size(); ++i) out[i] = batch[i].reward;
    return out;
  }
  std::map<int, std::pair<double, int>> sums;
  for (const auto& e : batch) {
    auto& [sum, n] = sums[e.context];
    sum += e.reward;
    ++n;
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& [sum, n] = sums[batch[i].context];
    out[i] = batch[i].reward - sum / n;
  }
  return out;
}

}  // namespace detail

inline double grpo_objective(const ToyPolicy& policy, const ToyPolicy& ref,
                             const SampleBatch& batch, const GrpoParams& params) {
  detail::check_batch(policy, ref, batch);
  const std::vector<double> rewards = detail::effective_rewards(batch, params);
  const double lo = 1.0 - params.epsilon;
  const double hi = 1.0 + params.epsilon;

  double surrogate = 0.0;
  double kl_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& e = batch[i];
    const double rho = std::exp(log_prob(policy, e.context, e.action) - e.logprob_old);
    const double u = rho * rewards[i];
    const double v = std::clamp(rho, lo, hi) * rewards[i];
    surrogate += std::min(u, v);
    kl_sum += kl_categorical(action_probs(policy, e.context), action_probs(ref, e.context));
  }
  const double n = static_cast<double>(batch.size());
  return surrogate / n - params.beta * (kl_sum / n);
}

// d KL(p_x || q_x) / d logit_a = p_a * ((ln p_a - ln q_a) - KL); the p_a = 0
// limit is 0 (softmax can underflow to exact zero at extreme logit gaps).
inline std::vector<double> kl_gradient_row(const ToyPolicy& policy, const ToyPolicy& ref, int x) {
  const std::vector<double> p = action_probs(policy, x);
  const std::vector<double> q = action_probs(ref, x);
  const double kl = kl_categorical(p, q);
  std::vector<double> g(p.size(), 0.0);
  for (std::size_t a = 0; a < p.size(); ++a) {
    if (p[a] > 0.0) g[a] = p[a] * (std::log(p[a] / q[a]) - kl);
  }
  return g;
}

// Analytic gradient of grpo_objective w.r.t. every logit. On the clipped
// branch the surrogate derivative vanishes (rho sits strictly outside the
// band); ties at the boundary take the unclipped derivative, matching the
// min() evaluation order.
inline std::vector<std::vector<double>> grpo_gradient(const ToyPolicy& policy,
                                                      const ToyPolicy& ref,
                                                      const SampleBatch& batch,
                                                      const GrpoParams& params) {
  detail::check_batch(policy, ref, batch);
  const std::vector<double> rewards = detail::effective_rewards(batch, params);
  const double lo = 1.0 - params.epsilon;
  const double hi = 1.0 + params.epsilon;
  const double n = static_cast<double>(batch.size());

  std::vector<std::vector<double>> g(policy.n_contexts(),
                                     std::vector<double>(policy.n_actions(), 0.0));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& e = batch[i];
    const std::vector<double> p = action_probs(policy, e.context);
    const double rho = std::exp(std::log(p[e.action]) - e.logprob_old);
    const double u = rho * rewards[i];
    const double v = std::clamp(rho, lo, hi) * rewards[i];
    if (u <= v) {
      const double scale = rewards[i] * rho / n;
      for (int a = 0; a < policy.n_actions(); ++a) {
        g[e.context][a] += scale * ((a == e.action ? 1.0 : 0.0) - p[a]);
      }
    }
    const std::vector<double> klg = kl_gradient_row(policy, ref, e.context);
    for (int a = 0; a < policy.n_actions(); ++a) {
      g[e.context][a] -= params.beta * klg[a] / n;
    }
  }
  return g;
}

// --- toy environment and trainer ---

struct ToyTask {
  int context = 0;
  std::vector<double> action_rewards;  // reward per action index
};

struct ToyEnvironment {
  std::vector<ToyTask> tasks;
};

inline void validate_environment(const ToyEnvironment& env, const ToyPolicy& policy) {
  if (env.tasks.empty()) throw std::invalid_argument("environment: no tasks");
  for (const auto& t : env.tasks) {
    detail::check_context(policy, t.context);
    if (static_cast<int>(t.action_rewards.size()) != policy.n_actions())
      throw std::invalid_argument("environment: reward vector size disagrees with actions");
    for (double r : t.action_rewards)
      if (!std::isfinite(r)) throw std::invalid_argument("environment: non-finite reward");
  }
}

struct StepStat {
  int step = 0;
  double objective = 0.0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
};

struct TrainLog {
  std::vector<StepStat> steps;
};

inline std::string render_train_log_csv(const TrainLog& log) {
  std::string out = "step,objective,mean_reward,mean_kl\n";
  char buf[160];
  for (const auto& s : log.steps) {
    std::snprintf(buf, sizeof(buf), "%d,%.12g,%.12g,%.12g\n", s.step, s.objective,
                  s.mean_reward, s.mean_kl);
    out += buf;
  }
  return out;
}

struct TrainResult {
  ToyPolicy policy;
  TrainLog log;
};

// REINFORCE-with-baseline ascent on the objective. Samples from the step-start
// policy so rho = 1 at gradient time; the surrogate gradient is the score-
// function estimator with a per-context running-mean baseline (the value-
// network stand-in), the KL gradient is exact.
inline TrainResult grpo_train(const ToyPolicy& initial, const ToyPolicy& ref,
                              const ToyEnvironment& env, const GrpoParams& params) {
  validate_policy(initial);
  validate_policy(ref);
  validate_environment(env, initial);
  if (initial.n_contexts() != ref.n_contexts() || initial.n_actions() != ref.n_actions())
    throw std::invalid_argument("grpo_train: policy and reference shapes differ");
  if (params.group_size < 1) throw std::invalid_argument("grpo_train: group_size < 1");
  if (params.steps < 0) throw std::invalid_argument("grpo_train: negative step count");

  TrainResult result{initial, {}};
  ToyPolicy& policy = result.policy;
  std::mt19937_64 rng = make_rng(params.seed);

  std::vector<double> baseline_mean(initial.n_contexts(), 0.0);
  std::vector<long> baseline_count(initial.n_contexts(), 0);

  const int n_actions = policy.n_actions();
  for (int step = 0; step < params.steps; ++step) {
    const ToyTask& task = env.tasks[uniform_index(rng, env.tasks.size())];
    const int x = task.context;
    const std::vector<double> p = action_probs(policy, x);

    SampleBatch batch;
    batch.reserve(params.group_size);
    for (int gidx = 0; gidx < params.group_size; ++gidx) {
      const int a = sample_action(policy, x, 1.0, rng);
      batch.push_back({x, a, task.action_rewards[a], std::log(p[a])});
    }

    double mean_reward = 0.0;
    for (const auto& e : batch) mean_reward += e.reward;
    mean_reward /= static_cast<double>(batch.size());

    double baseline;
    if (params.group_mean_baseline) {
      baseline = mean_reward;
    } else {
      baseline = baseline_count[x] > 0 ? baseline_mean[x] : 0.0;
    }

    const double kl_row =
        kl_categorical(action_probs(policy, x), action_probs(ref, x));
    const double objective = grpo_objective(policy, ref, batch, params);
    result.log.steps.push_back({step, objective, mean_reward, kl_row});

    std::vector<double> grad(n_actions, 0.0);
    const double inv_g = 1.0 / static_cast<double>(batch.size());
    for (const auto& e : batch) {
      const double adv = e.reward - baseline;
      for (int a = 0; a < n_actions; ++a) {
        grad[a] += inv_g * adv * ((a == e.action ? 1.0 : 0.0) - p[a]);
      }
    }
    const std::vector<double> klg = kl_gradient_row(policy, ref, x);
    for (int a = 0; a < n_actions; ++a) grad[a] -= params.beta * klg[a];

    for (int a = 0; a < n_actions; ++a) {
      if (!std::isfinite(grad[a]))
        throw TrainingError("non-finite gradient at step " + std::to_string(step));
      policy.logits[x][a] += params.learning_rate * grad[a];
      if (!std::isfinite(policy.logits[x][a]))
        throw TrainingError("non-finite parameter at step " + std::to_string(step));
    }

    for (const auto& e : batch) {
      baseline_count[x] += 1;
      baseline_mean[x] += (e.reward - baseline_mean[x]) / static_cast<double>(baseline_count[x]);
    }
  }

  return result;
}

}  // namespace dte
