#include "corl/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "corl/errors.hpp"
#include "corl/parallel.hpp"
#include "nlohmann/json.hpp"

namespace corl {

void StageConfig::validate() const {
  if (group_size < 2) fail(Errc::config_invalid, "group_size must be at least 2");
  if (!(beta >= 0.0) || !std::isfinite(beta))
    fail(Errc::config_invalid, "beta must be a finite non-negative real");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    fail(Errc::config_invalid, "learning_rate must be positive");
  if (batch_size < 1) fail(Errc::config_invalid, "batch_size must be at least 1");
  if (epochs < 1) fail(Errc::config_invalid, "epochs must be at least 1");
  if (kl_enabled != (beta > 0.0))
    fail(Errc::config_invalid, "kl_enabled must equal (beta > 0)");
  if (clip_epsilon && !(*clip_epsilon > 0.0 && *clip_epsilon < 1.0))
    fail(Errc::config_invalid, "clip_epsilon must lie in (0, 1)");
}

std::vector<double> normalize_advantages(std::span<const double> rewards) {
  const size_t n = rewards.size();
  if (n < 2) fail(Errc::bad_argument, "advantage normalization needs at least 2 rewards");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(n);
  const double std = std::sqrt(var);
  std::vector<double> adv(n, 0.0);
  if (std < 1e-8) return adv; // nothing to rank
  for (size_t i = 0; i < n; ++i) adv[i] = (rewards[i] - mean) / std;
  return adv;
}

RolloutGroup rollout_group(const Policy& policy, const PolicyParams& params_old,
                           const TrainInput& input, int group_size, const Rng& rng) {
  if (group_size < 2) fail(Errc::bad_argument, "group_size must be at least 2");
  RolloutGroup group;
  group.input_id = input.id;
  group.task = input.task;
  group.cond = input.cond;
  group.outputs.resize(static_cast<size_t>(group_size));
  group.old_logprobs.resize(static_cast<size_t>(group_size));
  const OutputKind kind = task_output_kind(input.task);
  for (int j = 0; j < group_size; ++j) {
    Rng child = rng.fork("sample", static_cast<uint64_t>(j));
    group.outputs[static_cast<size_t>(j)] = policy.sample(params_old, input.cond, kind, 1.0, child);
    group.old_logprobs[static_cast<size_t>(j)] = group.outputs[static_cast<size_t>(j)].logprob;
  }
  return group;
}

void RatioStats::add(double r) {
  min = std::min(min, r);
  max = std::max(max, r);
  sum += r;
  ++count;
}

void RatioStats::merge(const RatioStats& other) {
  if (other.count == 0) return;
  min = std::min(min, other.min);
  max = std::max(max, other.max);
  sum += other.sum;
  count += other.count;
}

namespace {

constexpr double kLogRatioClamp = 20.0;

struct RatioTerm {
  double value = 0.0;    // contribution to the surrogate
  double grad_weight = 0.0; // coefficient on d logprob / d theta
  double ratio = 1.0;
};

// Shared ratio/clip arithmetic for one (log-ratio, advantage) pair with an
// overall 1/scale factor. Flat regions (clamped log-ratio, active clip)
// contribute value but no gradient, matching the piecewise-defined objective.
RatioTerm ratio_term(double log_ratio, double advantage, double inv_scale,
                     const std::optional<double>& clip_epsilon) {
  RatioTerm t;
  const bool saturated = log_ratio <= -kLogRatioClamp || log_ratio >= kLogRatioClamp;
  const double clamped = std::clamp(log_ratio, -kLogRatioClamp, kLogRatioClamp);
  t.ratio = std::exp(clamped);
  double effective = t.ratio;
  bool flat = saturated;
  if (clip_epsilon) {
    const double lo = 1.0 - *clip_epsilon;
    const double hi = 1.0 + *clip_epsilon;
    const bool clip_binds =
        (advantage >= 0.0 && t.ratio > hi) || (advantage < 0.0 && t.ratio < lo);
    if (clip_binds) {
      effective = std::clamp(t.ratio, lo, hi);
      flat = true;
    }
  }
  t.value = effective * advantage * inv_scale;
  t.grad_weight = flat ? 0.0 : t.ratio * advantage * inv_scale;
  return t;
}

} // namespace

double surrogate_value_and_grad(const Policy& policy, const RolloutGroup& group,
                                const PolicyParams& params_theta,
                                const PolicyParams& params_old,
                                const PolicyParams* params_ref, const SurrogateOptions& opt,
                                std::span<double> grad, RatioStats* ratio_stats,
                                double* kl_out) {
  const size_t g = group.outputs.size();
  if (g == 0 || group.advantages.size() != g)
    fail(Errc::missing_advantages, "rollout group has no advantages");
  if (opt.beta > 0.0 && params_ref == nullptr)
    fail(Errc::missing_reference, "beta > 0 requires a reference policy");

  const bool want_grad = !grad.empty();
  const double inv_g = 1.0 / static_cast<double>(g);
  double value = 0.0;

  for (size_t i = 0; i < g; ++i) {
    const PolicyOutput& out = group.outputs[i];
    PolicyOutput scored = out;
    policy.score(params_theta, group.cond, scored);
    const double a = group.advantages[i];

    if (!opt.token_level_ratio) {
      const double old_lp = i < group.old_logprobs.size()
                                ? group.old_logprobs[i]
                                : policy.logprob(params_old, group.cond, out);
      const RatioTerm t = ratio_term(scored.logprob - old_lp, a, inv_g, opt.clip_epsilon);
      value += t.value;
      if (ratio_stats) ratio_stats->add(t.ratio);
      if (want_grad && t.grad_weight != 0.0)
        policy.accumulate_grad_logprob(params_theta, group.cond, out, t.grad_weight, grad);
    } else {
      const size_t steps = scored.per_token_logprobs.size();
      std::vector<double> old_lps;
      if (out.per_token_logprobs.size() == steps) {
        old_lps = out.per_token_logprobs;
      } else {
        PolicyOutput old_scored = out;
        policy.score(params_old, group.cond, old_scored);
        old_lps = old_scored.per_token_logprobs;
      }
      const double inv_scale = inv_g / static_cast<double>(steps);
      std::vector<double> weights(steps, 0.0);
      bool any = false;
      for (size_t s = 0; s < steps; ++s) {
        const RatioTerm t =
            ratio_term(scored.per_token_logprobs[s] - old_lps[s], a, inv_scale, opt.clip_epsilon);
        value += t.value;
        weights[s] = t.grad_weight;
        any = any || t.grad_weight != 0.0;
        if (ratio_stats) ratio_stats->add(t.ratio);
      }
      if (want_grad && any)
        policy.accumulate_grad_logprob(params_theta, group.cond, out, weights, grad);
    }
  }

  double kl_mean = 0.0;
  if (opt.beta > 0.0) {
    for (size_t i = 0; i < g; ++i) {
      const double kl = policy.kl_with_grad(params_theta, *params_ref, group.cond,
                                            group.outputs[i], -opt.beta * inv_g, grad);
      kl_mean += kl * inv_g;
    }
    value -= opt.beta * kl_mean;
  }
  if (kl_out) *kl_out = kl_mean;
  return value;
}

void adamw_step(OptimizerState& state, PolicyParams& params, std::span<const double> gradient,
                double lr) {
  const size_t n = params.values.size();
  if (gradient.size() != n) fail(Errc::shape_mismatch, "gradient length mismatch");
  if (state.m.empty()) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
  }
  if (state.m.size() != n || state.v.size() != n)
    fail(Errc::shape_mismatch, "optimizer state length mismatch");

  for (size_t i = 0; i < n; ++i) {
    if (std::isfinite(gradient[i])) continue;
    for (const auto& b : params.blocks)
      if (i >= b.offset && i < b.offset + b.len)
        fail(Errc::nonfinite_gradient, "non-finite gradient in block " + b.name);
    fail(Errc::nonfinite_gradient, "non-finite gradient");
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < n; ++i) {
    double p = params.values[i] * (1.0 - lr * state.weight_decay);
    const double g = -gradient[i]; // maximize: descend on the negated gradient
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params.values[i] = p - lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

std::string metrics_json(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["stage"] = m.stage;
  j["task"] = m.task;
  j["reward_mean"] = m.reward_mean;
  j["reward_components"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : m.reward_components) j["reward_components"][k] = v;
  j["adv_abs_mean"] = m.adv_abs_mean;
  j["ratio_min"] = m.ratio_min;
  j["ratio_max"] = m.ratio_max;
  j["ratio_mean"] = m.ratio_mean;
  j["kl"] = m.kl;
  j["grad_norm"] = m.grad_norm;
  j["lr"] = m.lr;
  return j.dump();
}

namespace {

void check_advantage_invariants(std::span<const double> rewards, std::span<const double> adv) {
  const size_t n = rewards.size();
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double std = std::sqrt(var / static_cast<double>(n));
  if (std <= 1e-8) {
    for (double a : adv)
      if (a != 0.0) fail(Errc::bad_argument, "degenerate group produced nonzero advantages");
    return;
  }
  double amean = 0.0;
  for (double a : adv) amean += a;
  amean /= static_cast<double>(n);
  double avar = 0.0;
  for (double a : adv) avar += (a - amean) * (a - amean);
  const double astd = std::sqrt(avar / static_cast<double>(n));
  if (std::abs(amean) > 1e-9 || std::abs(astd - 1.0) > 1e-9)
    fail(Errc::bad_argument, "advantage standardization invariant violated");
}

// Advantages for a set of groups normalized together (one ranking pool).
void fill_advantages(std::vector<RolloutGroup*> pool) {
  std::vector<double> rewards;
  for (const RolloutGroup* g : pool)
    rewards.insert(rewards.end(), g->rewards.begin(), g->rewards.end());
  const std::vector<double> adv = normalize_advantages(rewards);
  check_advantage_invariants(rewards, adv);
  size_t off = 0;
  for (RolloutGroup* g : pool) {
    g->advantages.assign(adv.begin() + static_cast<std::ptrdiff_t>(off),
                         adv.begin() + static_cast<std::ptrdiff_t>(off + g->rewards.size()));
    off += g->rewards.size();
  }
}

void add_component(std::map<std::string, std::pair<double, size_t>>& acc, const std::string& key,
                   const std::optional<double>& v) {
  if (!v) return;
  auto& slot = acc[key];
  slot.first += *v;
  slot.second += 1;
}

} // namespace

TrainStepResult train_step(const Policy& policy, const std::vector<TrainInput>& batch,
                           PolicyParams& params, const PolicyParams& params_old,
                           const PolicyParams* params_ref, const StageConfig& cfg,
                           const RewardFn& reward_fn, OptimizerState& opt, const Rng& rng,
                           int workers) {
  cfg.validate();
  if (batch.empty()) fail(Errc::bad_argument, "empty training batch");
  if (cfg.beta > 0.0 && params_ref == nullptr)
    fail(Errc::missing_reference, "beta > 0 requires a reference policy");

  const size_t n = batch.size();
  const size_t g = static_cast<size_t>(cfg.group_size);

  // rollouts + reward scoring, one task per (input, sample) slot
  std::vector<RolloutGroup> groups(n);
  for (size_t i = 0; i < n; ++i) {
    groups[i].input_id = batch[i].id;
    groups[i].task = batch[i].task;
    groups[i].cond = batch[i].cond;
    groups[i].outputs.resize(g);
    groups[i].breakdowns.resize(g);
    groups[i].rewards.resize(g);
    groups[i].old_logprobs.resize(g);
  }
  parallel_for(n * g, workers, [&](size_t k) {
    const size_t i = k / g;
    const size_t j = k % g;
    Rng child = rng.fork("rollout", i).fork("sample", j);
    PolicyOutput out = policy.sample(params_old, batch[i].cond,
                                     task_output_kind(batch[i].task), 1.0, child);
    RewardBreakdown bd = reward_fn(batch[i], out);
    groups[i].old_logprobs[j] = out.logprob;
    groups[i].rewards[j] = bd.joint;
    groups[i].breakdowns[j] = std::move(bd);
    groups[i].outputs[j] = std::move(out);
  });

  if (cfg.mixed_groups) {
    for (size_t i = 0; i < n; i += 2) {
      std::vector<RolloutGroup*> pool{&groups[i]};
      if (i + 1 < n) pool.push_back(&groups[i + 1]);
      fill_advantages(std::move(pool));
    }
  } else {
    for (auto& group : groups) fill_advantages({&group});
  }

  // per-group surrogate gradients, then an ordered reduction
  const SurrogateOptions sopt{cfg.beta, cfg.clip_epsilon, cfg.token_level_ratio};
  std::vector<std::vector<double>> grads(n);
  std::vector<double> values(n, 0.0);
  std::vector<double> kls(n, 0.0);
  std::vector<RatioStats> stats(n);
  parallel_for(n, workers, [&](size_t i) {
    grads[i].assign(policy.param_count(), 0.0);
    values[i] = surrogate_value_and_grad(policy, groups[i], params, params_old, params_ref,
                                         sopt, grads[i], &stats[i], &kls[i]);
  });

  std::vector<double> grad(policy.param_count(), 0.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < grad.size(); ++j) grad[j] += grads[i][j];
  const double inv_n = 1.0 / static_cast<double>(n);
  for (double& v : grad) v *= inv_n;

  TrainStepResult result;
  for (double v : values) result.value += v * inv_n;
  double norm2 = 0.0;
  for (double v : grad) norm2 += v * v;
  result.grad_norm = std::sqrt(norm2);

  adamw_step(opt, params, grad, cfg.learning_rate);

  // one metrics row per task present, in fixed task order
  for (Task task : {Task::T2I, Task::MCQ, Task::OE}) {
    StepMetrics m;
    m.task = task_name(task);
    m.lr = cfg.learning_rate;
    m.grad_norm = result.grad_norm;
    double reward_sum = 0.0, adv_sum = 0.0, kl_sum = 0.0;
    size_t n_outputs = 0, n_groups = 0;
    RatioStats rs;
    std::map<std::string, std::pair<double, size_t>> comp;
    for (size_t i = 0; i < n; ++i) {
      if (groups[i].task != task) continue;
      ++n_groups;
      kl_sum += kls[i];
      rs.merge(stats[i]);
      for (size_t j = 0; j < g; ++j) {
        reward_sum += groups[i].rewards[j];
        adv_sum += std::abs(groups[i].advantages[j]);
        const RewardBreakdown& bd = groups[i].breakdowns[j];
        add_component(comp, "cycle", bd.cycle);
        add_component(comp, "tim", bd.tim);
        add_component(comp, "acc", bd.acc);
        add_component(comp, "format", bd.format);
        add_component(comp, "raw_cycle", bd.raw_cycle);
        add_component(comp, "raw_tim", bd.raw_tim);
        ++n_outputs;
      }
    }
    if (n_groups == 0) continue;
    m.reward_mean = reward_sum / static_cast<double>(n_outputs);
    m.adv_abs_mean = adv_sum / static_cast<double>(n_outputs);
    m.kl = kl_sum / static_cast<double>(n_groups);
    m.ratio_min = rs.count == 0 ? 1.0 : rs.min;
    m.ratio_max = rs.count == 0 ? 1.0 : rs.max;
    m.ratio_mean = rs.mean();
    for (const auto& [k, v] : comp)
      m.reward_components[k] = v.first / static_cast<double>(v.second);
    result.metrics.push_back(std::move(m));
  }

  result.groups = std::move(groups);
  return result;
}

} // namespace corl
