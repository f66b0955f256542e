#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "corl/grpo.hpp"
#include "corl/policy.hpp"
#include "corl/rewards.hpp"
#include "corl/world.hpp"

namespace corl {

enum class ParadigmKind { separate_t2i, separate_und, separate_merge, cycle, unified, corl };

const char* paradigm_name(ParadigmKind kind);
std::optional<ParadigmKind> paradigm_from_name(const std::string& name);
const std::vector<ParadigmKind>& all_paradigms();

struct EvalSizes {
  int n_gen = 500;
  int n_qa = 500; // per question surface
};

// Full description of one experiment sweep: the world, the policy, the four
// stage configurations, the paradigm to run, and the artifact plumbing.
// Batch sizes count dataset examples per optimizer step; a unified-stage
// example contributes two rollout groups (generation and understanding),
// every other stage one.
struct RunConfig {
  WorldConfig world;
  PolicyConfig policy;
  RewardConfig reward;
  StageConfig unified;
  StageConfig refined_t2i;
  StageConfig refined_mcq;
  StageConfig refined_oe;
  std::string paradigm = "corl";
  std::vector<uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output_dir = "runs";
  bool deterministic = true;
  int total_steps = 2000;
  int cycle_block_length = 50;
  uint64_t dataset_size = 512;
  int difficulty = 1;
  int workers = 1;
  EvalSizes eval;

  void validate() const; // throws Errc::config_invalid with a field path
};

RunConfig default_run_config();

// Parses a JSON object. Missing fields keep their defaults; unknown keys and
// type mismatches are rejected with the offending field path in the message.
RunConfig run_config_from_json(const std::string& text);

// Canonical serialization: fixed key order, every field explicit. Hashing
// this string identifies the configuration.
std::string run_config_json(const RunConfig& cfg);

RunConfig load_run_config(const std::filesystem::path& path);

// Hash over the semantic fields only (world, policy, reward, stages, budgets,
// eval sizes). Seeds, paradigm, output directory, worker count and the
// determinism flag are operational and excluded, so artifacts from one sweep
// agree on the hash no matter where or how parallel they were produced.
uint64_t config_hash(const RunConfig& cfg);

// Canonical JSON for one stage config, as embedded in experiment records.
std::string stage_config_json(const StageConfig& s);
StageConfig stage_config_from_json(const std::string& text, const std::string& field_path);

} // namespace corl
