#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "corl/policy.hpp"
#include "corl/rewards.hpp"
#include "corl/rng.hpp"

namespace corl {

// Per-stage optimization settings. kl_enabled is stored explicitly so configs
// are self-describing, and validate() rejects any drift from beta.
struct StageConfig {
  int group_size = 8;
  double beta = 0.0;
  double learning_rate = 1e-2;
  int batch_size = 4;
  int epochs = 1;
  bool kl_enabled = false;
  std::optional<double> clip_epsilon; // off by default; ratio clip when set
  bool token_level_ratio = false;     // per-token ratios instead of whole-output
  bool mixed_groups = false;          // normalize advantages across task pairs

  void validate() const; // throws Errc::config_invalid
};

// One training example: what the policy is conditioned on and which task
// scores it. The task fixes the output head.
struct TrainInput {
  uint64_t id = 0;
  Task task = Task::T2I;
  Condition cond;
};

inline OutputKind task_output_kind(Task t) {
  return t == Task::T2I ? OutputKind::image : OutputKind::text;
}

// G sampled outputs for one input with their scores. outputs keep the
// log-probs they were sampled with, which are the old-policy log-probs.
struct RolloutGroup {
  uint64_t input_id = 0;
  Task task = Task::T2I;
  Condition cond;
  std::vector<PolicyOutput> outputs;
  std::vector<RewardBreakdown> breakdowns;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<double> old_logprobs;
  std::optional<std::vector<double>> ref_logprobs;
};

// (r_i - mean) / population std; all zeros when the population std is
// below 1e-8 (a group with no ranking information).
std::vector<double> normalize_advantages(std::span<const double> rewards);

// G independent samples from params_old at temperature 1. Deterministic in
// (input, rng); the caller's rng is forked per sample, never advanced.
RolloutGroup rollout_group(const Policy& policy, const PolicyParams& params_old,
                           const TrainInput& input, int group_size, const Rng& rng);

struct SurrogateOptions {
  double beta = 0.0;
  std::optional<double> clip_epsilon;
  bool token_level_ratio = false;
};

struct RatioStats {
  double min = std::numeric_limits<double>::infinity();
  double max = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  size_t count = 0;

  void add(double r);
  void merge(const RatioStats& other);
  double mean() const { return count == 0 ? 1.0 : sum / static_cast<double>(count); }
};

// Group-mean surrogate: (1/G) sum_i ratio_i * A_i - beta * KL(theta || ref),
// ratio_i = exp(clamp(logprob_theta - logprob_old, +-20)). Returns the value
// and accumulates d value / d theta (an ascent direction) into grad. KL is
// the exact per-step categorical KL averaged over the group's trajectories;
// its value is written to kl_out when non-null (0 when beta == 0).
double surrogate_value_and_grad(const Policy& policy, const RolloutGroup& group,
                                const PolicyParams& params_theta,
                                const PolicyParams& params_old,
                                const PolicyParams* params_ref, const SurrogateOptions& opt,
                                std::span<double> grad, RatioStats* ratio_stats = nullptr,
                                double* kl_out = nullptr);

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled-weight-decay Adam on -gradient: gradients here are ascent
// directions. Lazily sizes the moment vectors on first use.
void adamw_step(OptimizerState& state, PolicyParams& params, std::span<const double> gradient,
                double lr);

struct StepMetrics {
  int64_t step = 0;
  std::string stage;
  std::string task;
  double reward_mean = 0.0;
  std::map<std::string, double> reward_components;
  double adv_abs_mean = 0.0;
  double ratio_min = 1.0;
  double ratio_max = 1.0;
  double ratio_mean = 1.0;
  double kl = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

// One JSON object per line; key order and float formatting are stable so
// equal runs produce byte-equal logs.
std::string metrics_json(const StepMetrics& m);

using RewardFn = std::function<RewardBreakdown(const TrainInput&, const PolicyOutput&)>;

struct TrainStepResult {
  double value = 0.0;
  double grad_norm = 0.0;
  std::vector<StepMetrics> metrics; // one row per task present in the batch
  std::vector<RolloutGroup> groups; // scored groups, in batch order
};

// One GRPO step: roll out a group per input under params_old, score with
// reward_fn, normalize advantages (across task pairs when cfg.mixed_groups),
// average the surrogate gradient over groups, and apply one optimizer step.
// Rollouts and per-group gradients may run on `workers` threads; reductions
// are ordered, so results are bit-identical for any worker count.
TrainStepResult train_step(const Policy& policy, const std::vector<TrainInput>& batch,
                           PolicyParams& params, const PolicyParams& params_old,
                           const PolicyParams* params_ref, const StageConfig& cfg,
                           const RewardFn& reward_fn, OptimizerState& opt, const Rng& rng,
                           int workers = 1);

} // namespace corl
