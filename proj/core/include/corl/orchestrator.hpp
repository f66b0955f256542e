#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "corl/config.hpp"
#include "corl/dataset.hpp"
#include "corl/evalkit.hpp"
#include "corl/grpo.hpp"
#include "corl/policy.hpp"

namespace corl {

// One homogeneous training run: a fixed task mix under one stage config.
// Paths are relative to the experiment directory.
struct BranchRecord {
  std::string name; // "unified", "t2i", "und", "cycle", "mcq", "oe"
  StageConfig config;
  int steps = 0;
  long long rollout_samples = 0;
  std::string metrics_path;
  std::string checkpoint_path;
};

// A pipeline stage. Single-branch stages carry the branch's checkpoint;
// multi-branch stages merge their branch checkpoints into one.
struct StageRecord {
  std::string name; // "unified", "refined_t2i", "refined_und", "t2i", "und", "cycle"
  std::vector<BranchRecord> branches;
  std::string checkpoint_path;
  std::string merge_strategy; // non-empty iff the stage merged its branches
};

struct ExperimentRecord {
  std::string paradigm;
  uint64_t seed = 0;
  uint64_t world_hash = 0;
  uint64_t config_hash = 0;
  std::vector<StageRecord> stages;
  std::string final_checkpoint;
  std::string final_merge_strategy; // non-empty iff the final params are a merge
  EvalReport final_eval;
  int total_steps = 0;
  long long total_rollout_samples = 0;
};

std::string experiment_record_json(const ExperimentRecord& record);
ExperimentRecord experiment_record_from_json(const std::string& text);

// Checks that every referenced artifact exists under the experiment
// directory and carries the record's world hash.
void validate_record(const ExperimentRecord& record, const std::filesystem::path& experiment_dir);

// Artifact plumbing common to every stage of one experiment.
struct StageIo {
  std::filesystem::path experiment_dir;
  uint64_t config_hash = 0;
  uint64_t seed = 0; // experiment seed
  int workers = 1;
};

struct StageResult {
  PolicyParams params;
  BranchRecord record;
};

// Trains with both surfaces per example: a generation group rewarded with
// cycle + matching and an understanding group rewarded with
// lambda * (accuracy + format), summed into one objective per step.
// The stage trains without a KL term; config.beta must be 0.
StageResult run_unified_stage(const Policy& policy, const PolicyParams& init,
                              const Dataset& data, const StageConfig& config, int steps,
                              const RewardConfig& reward, const Rng& rng, const StageIo& io);

// Task-targeted second stage: one group per example rewarded with the
// task's stage-2 reward, KL-regularized against the stage-entry parameters.
// config.beta must be positive.
StageResult run_refined_stage(const Policy& policy, const PolicyParams& entry, Task task,
                              const Dataset& data, const StageConfig& config, int steps,
                              const RewardConfig& reward, const Rng& rng, const StageIo& io);

// Runs one (paradigm, seed) cell end to end under the run configuration:
// builds datasets, executes the paradigm's stage pipeline at matched compute,
// evaluates the final parameters, and writes all artifacts plus record.json
// under <output_dir>/<paradigm>/seed<seed>/.
ExperimentRecord run_experiment(ParadigmKind kind, uint64_t seed, const RunConfig& cfg);

std::vector<ExperimentRecord> run_paradigm(ParadigmKind kind, const std::vector<uint64_t>& seeds,
                                           const RunConfig& cfg);

// The per-step rollout sample count every branch of every paradigm must
// consume for Table-style comparisons to be compute-matched. Derived from
// the unified stage: two groups per example.
long long matched_samples_per_step(const RunConfig& cfg);

// Total optimizer steps and rollout samples the paradigm will consume under
// cfg; fails with config_invalid when the paradigm cannot meet the matched
// budget exactly (e.g. total_steps not divisible by the stage split).
struct ComputePlan {
  int total_steps = 0;
  long long total_rollout_samples = 0;
};
ComputePlan plan_compute(ParadigmKind kind, const RunConfig& cfg);

} // namespace corl
