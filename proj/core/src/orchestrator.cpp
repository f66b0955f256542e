#include "corl/orchestrator.hpp"

#include <filesystem>
#include <utility>

#include "corl/checkpoint.hpp"
#include "corl/errors.hpp"
#include "corl/fsio.hpp"
#include "corl/merge.hpp"
#include "corl/rewards.hpp"
#include "nlohmann/json.hpp"

namespace corl {

namespace fs = std::filesystem;

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

enum class InputMode { both, gen_only, und_only };

// Everything run_branch needs to execute one homogeneous training run.
struct BranchSpec {
  std::string stage_name;  // metrics rows carry this; also the artifact directory
  std::string branch_name; // subdirectory when it differs from the stage
  StageConfig config;
  int steps = 0;
  InputMode mode = InputMode::both;
  double und_scale = 1.0;            // multiplies acc + format (lambda in the unified stage)
  const PolicyParams* ref = nullptr; // KL reference when beta > 0
  int block_length = 0;              // > 0: alternate gen/und blocks (cycle schedule)
};

long long branch_samples_per_step(const BranchSpec& spec) {
  // block alternation trains one task per step even though the branch as a
  // whole covers both
  const bool both_tasks = spec.mode == InputMode::both && spec.block_length == 0;
  const long long groups = (both_tasks ? 2LL : 1LL) * spec.config.batch_size;
  return groups * spec.config.group_size;
}

std::string branch_rel_dir(const BranchSpec& spec) {
  return spec.branch_name == spec.stage_name ? spec.stage_name
                                             : spec.stage_name + "/" + spec.branch_name;
}

Task und_task_of(const DatasetSample& s) {
  return s.qa.qtype == QType::MCQ ? Task::MCQ : Task::OE;
}

std::string metrics_header(uint64_t world_hash, uint64_t config_hash, uint64_t seed,
                           const std::string& stage) {
  ordered_json j{{"world_hash", world_hash},
                 {"config_hash", config_hash},
                 {"seed", seed},
                 {"stage", stage}};
  return j.dump();
}

StageResult run_branch(const Policy& policy, const PolicyParams& init, const Dataset& data,
                       const BranchSpec& spec, const RewardConfig& reward, const Rng& rng,
                       const StageIo& io) {
  spec.config.validate();
  if (spec.steps < 1) fail(Errc::config_invalid, "stage '" + spec.stage_name + "': no steps");
  if (spec.config.beta > 0.0 && spec.ref == nullptr)
    fail(Errc::missing_reference, "stage '" + spec.stage_name + "': beta > 0 without a reference");

  const World& w = policy.world();
  PolicyParams params = init;
  OptimizerState opt;

  std::string metrics =
      metrics_header(w.hash(), io.config_hash, io.seed, spec.stage_name) + "\n";
  long long samples = 0;
  int64_t opt_steps = 0;
  size_t cursor = 0;

  std::vector<DatasetSample> batch_samples;
  for (int step = 0; step < spec.steps; ++step) {
    InputMode mode = spec.mode;
    if (spec.block_length > 0)
      mode = (step / spec.block_length) % 2 == 0 ? InputMode::gen_only : InputMode::und_only;

    batch_samples.clear();
    for (int b = 0; b < spec.config.batch_size; ++b)
      batch_samples.push_back(data.sample(cursor + static_cast<size_t>(b)));
    cursor += static_cast<size_t>(spec.config.batch_size);

    std::vector<TrainInput> batch;
    for (size_t b = 0; b < batch_samples.size(); ++b) {
      const DatasetSample& s = batch_samples[b];
      if (mode != InputMode::und_only)
        batch.push_back({b, Task::T2I, Condition(s.prompt)});
      if (mode != InputMode::gen_only)
        batch.push_back({b, und_task_of(s), Condition(s.qa.question, s.image)});
    }

    const RewardFn reward_fn = [&](const TrainInput& in, const PolicyOutput& out) {
      const DatasetSample& s = batch_samples[in.id];
      RewardBreakdown bd;
      if (in.task == Task::T2I) {
        const ScaledReward cyc = cycle_reward(w, s.image, out.image, s.prompt, reward);
        const ScaledReward tim = tim_reward(w.embed(s.prompt), w.embed(out.image));
        bd.cycle = cyc.normalized;
        bd.raw_cycle = cyc.raw;
        bd.tim = tim.normalized;
        bd.raw_tim = tim.raw;
        bd.joint = stage2_reward(Task::T2I, bd); // cycle + tim, both stages
      } else {
        bd.acc = accuracy_reward(out.text.rendered, s.qa.gold, s.qa.qtype);
        bd.format = format_reward(out.text.rendered);
        bd.joint = spec.und_scale * (*bd.acc + *bd.format);
      }
      return bd;
    };

    const Rng step_rng = rng.fork("step", static_cast<uint64_t>(step));
    if (spec.config.epochs == 1) {
      TrainStepResult res = train_step(policy, batch, params, params, spec.ref, spec.config,
                                       reward_fn, opt, step_rng, io.workers);
      samples += static_cast<long long>(batch.size()) * spec.config.group_size;
      for (StepMetrics& m : res.metrics) {
        m.step = opt_steps;
        m.stage = spec.stage_name;
        metrics += metrics_json(m) + "\n";
      }
      ++opt_steps;
    } else {
      // inner epochs reuse the same rollouts: the step rng is identical, so
      // sampling under the frozen snapshot reproduces them while the moving
      // parameters feed the ratio term
      const PolicyParams snapshot = params;
      for (int epoch = 0; epoch < spec.config.epochs; ++epoch) {
        TrainStepResult res = train_step(policy, batch, params, snapshot, spec.ref, spec.config,
                                         reward_fn, opt, step_rng, io.workers);
        samples += static_cast<long long>(batch.size()) * spec.config.group_size;
        for (StepMetrics& m : res.metrics) {
          m.step = opt_steps;
          m.stage = spec.stage_name;
          metrics += metrics_json(m) + "\n";
        }
        ++opt_steps;
      }
    }
  }

  const std::string rel = branch_rel_dir(spec);
  const fs::path dir = io.experiment_dir / rel;
  fs::create_directories(dir);
  atomic_write_file(dir / "metrics.jsonl", metrics);

  const ordered_json meta{{"config_hash", io.config_hash},
                          {"seed", io.seed},
                          {"stage", spec.stage_name},
                          {"branch", spec.branch_name}};
  save_checkpoint(params, w.hash(), meta.dump(), dir / "checkpoint.bin");

  StageResult result;
  result.record = BranchRecord{spec.branch_name,
                               spec.config,
                               static_cast<int>(opt_steps),
                               samples,
                               rel + "/metrics.jsonl",
                               rel + "/checkpoint.bin"};
  result.params = std::move(params);
  return result;
}

StageRecord single_branch_stage(const std::string& name, const BranchRecord& branch) {
  StageRecord s;
  s.name = name;
  s.branches = {branch};
  s.checkpoint_path = branch.checkpoint_path;
  return s;
}

// Derives the config for one-group-per-example branches (separate and cycle
// paradigms) from the unified stage: doubling the example count per step
// keeps the rollout sample budget identical.
StageConfig separate_config(const RunConfig& cfg) {
  StageConfig s = cfg.unified;
  s.batch_size = 2 * cfg.unified.batch_size;
  return s;
}

void require_matched(const BranchSpec& spec, long long want) {
  const long long got = branch_samples_per_step(spec);
  if (got != want)
    fail(Errc::config_invalid,
         "stage '" + spec.stage_name + "' consumes " + std::to_string(got) +
             " rollout samples per step; the compute-matched budget is " + std::to_string(want));
}

void save_merged(const PolicyParams& params, const Policy& policy, const StageIo& io,
                 const std::string& rel_dir, const std::string& stage_name) {
  const fs::path dir = io.experiment_dir / rel_dir;
  fs::create_directories(dir);
  const ordered_json meta{{"config_hash", io.config_hash},
                          {"seed", io.seed},
                          {"stage", stage_name},
                          {"branch", "merged"}};
  save_checkpoint(params, policy.world().hash(), meta.dump(), dir / "checkpoint.bin");
}

ordered_json branch_json(const BranchRecord& b) {
  return {{"name", b.name},
          {"config", ordered_json::parse(stage_config_json(b.config))},
          {"steps", b.steps},
          {"rollout_samples", b.rollout_samples},
          {"metrics_path", b.metrics_path},
          {"checkpoint_path", b.checkpoint_path}};
}

BranchRecord branch_from_json(const json& j, const std::string& path) {
  BranchRecord b;
  try {
    b.name = j.at("name").get<std::string>();
    b.config = stage_config_from_json(j.at("config").dump(), path + ".config");
    b.steps = j.at("steps").get<int>();
    b.rollout_samples = j.at("rollout_samples").get<long long>();
    b.metrics_path = j.at("metrics_path").get<std::string>();
    b.checkpoint_path = j.at("checkpoint_path").get<std::string>();
  } catch (const json::exception& e) {
    fail(Errc::io_error, "experiment record: bad branch at " + path + ": " + e.what());
  }
  return b;
}

} // namespace

std::string experiment_record_json(const ExperimentRecord& r) {
  ordered_json stages = ordered_json::array();
  for (const StageRecord& s : r.stages) {
    ordered_json branches = ordered_json::array();
    for (const BranchRecord& b : s.branches) branches.push_back(branch_json(b));
    stages.push_back(ordered_json{{"name", s.name},
                                  {"branches", std::move(branches)},
                                  {"checkpoint_path", s.checkpoint_path},
                                  {"merge_strategy", s.merge_strategy}});
  }
  ordered_json j{{"paradigm", r.paradigm},
                 {"seed", r.seed},
                 {"world_hash", r.world_hash},
                 {"config_hash", r.config_hash},
                 {"stages", std::move(stages)},
                 {"final_checkpoint", r.final_checkpoint},
                 {"final_merge_strategy", r.final_merge_strategy},
                 {"final_eval", ordered_json::parse(eval_report_json(r.final_eval))},
                 {"total_steps", r.total_steps},
                 {"total_rollout_samples", r.total_rollout_samples}};
  return j.dump(2);
}

ExperimentRecord experiment_record_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(Errc::io_error, std::string("experiment record is not valid JSON: ") + e.what());
  }
  ExperimentRecord r;
  try {
    r.paradigm = j.at("paradigm").get<std::string>();
    r.seed = j.at("seed").get<uint64_t>();
    r.world_hash = j.at("world_hash").get<uint64_t>();
    r.config_hash = j.at("config_hash").get<uint64_t>();
    const json& stages = j.at("stages");
    for (size_t i = 0; i < stages.size(); ++i) {
      const json& sj = stages[i];
      StageRecord s;
      s.name = sj.at("name").get<std::string>();
      const json& branches = sj.at("branches");
      for (size_t k = 0; k < branches.size(); ++k)
        s.branches.push_back(branch_from_json(
            branches[k], "stages[" + std::to_string(i) + "].branches[" + std::to_string(k) + "]"));
      s.checkpoint_path = sj.at("checkpoint_path").get<std::string>();
      s.merge_strategy = sj.at("merge_strategy").get<std::string>();
      r.stages.push_back(std::move(s));
    }
    r.final_checkpoint = j.at("final_checkpoint").get<std::string>();
    r.final_merge_strategy = j.at("final_merge_strategy").get<std::string>();
    r.final_eval = eval_report_from_json(j.at("final_eval").dump());
    r.total_steps = j.at("total_steps").get<int>();
    r.total_rollout_samples = j.at("total_rollout_samples").get<long long>();
  } catch (const json::exception& e) {
    fail(Errc::io_error, std::string("experiment record is missing fields: ") + e.what());
  }
  return r;
}

void validate_record(const ExperimentRecord& record, const fs::path& experiment_dir) {
  const auto check_checkpoint = [&](const std::string& rel) {
    const fs::path path = experiment_dir / rel;
    if (!fs::exists(path))
      fail(Errc::io_error, "experiment record references a missing file: " + rel);
    (void)load_checkpoint(path, record.world_hash); // world-hash guard
  };
  const auto check_metrics = [&](const std::string& rel) {
    const fs::path path = experiment_dir / rel;
    if (!fs::exists(path))
      fail(Errc::io_error, "experiment record references a missing file: " + rel);
    const std::string content = read_file(path);
    const size_t eol = content.find('\n');
    json header;
    try {
      header = json::parse(content.substr(0, eol));
    } catch (const json::parse_error&) {
      fail(Errc::io_error, "metrics file has no parseable header: " + rel);
    }
    if (header.value("world_hash", uint64_t{0}) != record.world_hash)
      fail(Errc::world_hash_mismatch, "metrics file " + rel + " was written against another world");
    if (header.value("config_hash", uint64_t{0}) != record.config_hash ||
        header.value("seed", record.seed + 1) != record.seed)
      fail(Errc::io_error, "metrics file " + rel + " does not belong to this experiment");
  };

  for (const StageRecord& s : record.stages) {
    for (const BranchRecord& b : s.branches) {
      check_metrics(b.metrics_path);
      check_checkpoint(b.checkpoint_path);
    }
    check_checkpoint(s.checkpoint_path);
  }
  check_checkpoint(record.final_checkpoint);
  if (record.final_eval.world_hash != record.world_hash)
    fail(Errc::world_hash_mismatch, "final evaluation was produced against another world");
}

StageResult run_unified_stage(const Policy& policy, const PolicyParams& init, const Dataset& data,
                              const StageConfig& config, int steps, const RewardConfig& reward,
                              const Rng& rng, const StageIo& io) {
  if (config.beta != 0.0)
    fail(Errc::config_invalid, "the unified stage trains without a KL term; beta must be 0");
  BranchSpec spec;
  spec.stage_name = "unified";
  spec.branch_name = "unified";
  spec.config = config;
  spec.steps = steps;
  spec.mode = InputMode::both;
  spec.und_scale = reward.lambda;
  return run_branch(policy, init, data, spec, reward, rng, io);
}

StageResult run_refined_stage(const Policy& policy, const PolicyParams& entry, Task task,
                              const Dataset& data, const StageConfig& config, int steps,
                              const RewardConfig& reward, const Rng& rng, const StageIo& io) {
  if (config.beta <= 0.0)
    fail(Errc::config_invalid, "refined stages require beta > 0 with the entry params as reference");
  if (task == Task::MCQ && data.mix() != QaMix::mcq_only)
    fail(Errc::task_mismatch, "refined MCQ stage needs an mcq_only dataset");
  if (task == Task::OE && data.mix() != QaMix::oe_only)
    fail(Errc::task_mismatch, "refined OE stage needs an oe_only dataset");

  BranchSpec spec;
  spec.stage_name = std::string("refined_") + (task == Task::T2I ? "t2i" : task_name(task));
  spec.branch_name = spec.stage_name;
  spec.config = config;
  spec.steps = steps;
  spec.mode = task == Task::T2I ? InputMode::gen_only : InputMode::und_only;
  spec.und_scale = 1.0;
  spec.ref = &entry;
  return run_branch(policy, entry, data, spec, reward, rng, io);
}

long long matched_samples_per_step(const RunConfig& cfg) {
  return 2LL * cfg.unified.batch_size * cfg.unified.group_size;
}

ComputePlan plan_compute(ParadigmKind kind, const RunConfig& cfg) {
  const long long per_step = matched_samples_per_step(cfg);
  const int s = cfg.total_steps;
  for (const auto& [name, stage] :
       {std::pair<const char*, const StageConfig*>{"refined_t2i", &cfg.refined_t2i},
        {"refined_mcq", &cfg.refined_mcq},
        {"refined_oe", &cfg.refined_oe}})
    if (stage->epochs != cfg.unified.epochs)
      fail(Errc::config_invalid, std::string("config field 'stages.") + name +
                                     ".epochs': must equal the unified stage's for the step "
                                     "budgets to stay compute-matched");
  const auto need_divisible = [&](int by) {
    if (s % by != 0)
      fail(Errc::config_invalid, "config field 'total_steps': " + std::to_string(s) +
                                     " is not divisible by " + std::to_string(by) +
                                     ", required by paradigm " + paradigm_name(kind));
  };

  switch (kind) {
    case ParadigmKind::separate_t2i:
    case ParadigmKind::separate_und:
    case ParadigmKind::cycle:
    case ParadigmKind::unified:
      break;
    case ParadigmKind::separate_merge:
      need_divisible(2);
      break;
    case ParadigmKind::corl: {
      need_divisible(8);
      for (const auto& [name, stage] :
           {std::pair<const char*, const StageConfig*>{"refined_t2i", &cfg.refined_t2i},
            {"refined_mcq", &cfg.refined_mcq},
            {"refined_oe", &cfg.refined_oe}}) {
        const long long got = 1LL * stage->batch_size * stage->group_size;
        if (got != per_step)
          fail(Errc::config_invalid,
               std::string("config field 'stages.") + name + "': consumes " + std::to_string(got) +
                   " rollout samples per step; the compute-matched budget is " +
                   std::to_string(per_step));
      }
      break;
    }
  }
  return ComputePlan{s * cfg.unified.epochs, per_step * s * cfg.unified.epochs};
}

ExperimentRecord run_experiment(ParadigmKind kind, uint64_t seed, const RunConfig& cfg) {
  cfg.validate();
  const ComputePlan plan = plan_compute(kind, cfg);
  const long long per_step = matched_samples_per_step(cfg);

  World world(cfg.world);
  Policy policy(world, cfg.policy);
  const PolicyParams init = policy.init_params(seed);
  const uint64_t chash = config_hash(cfg);

  const fs::path dir =
      fs::path(cfg.output_dir) / paradigm_name(kind) / ("seed" + std::to_string(seed));
  fs::create_directories(dir);
  const StageIo io{dir, chash, seed, cfg.workers};
  const Rng root(seed);

  const Dataset train(world, seed, cfg.difficulty, cfg.dataset_size, Role::train,
                      QaMix::alternate);

  ExperimentRecord rec;
  rec.paradigm = paradigm_name(kind);
  rec.seed = seed;
  rec.world_hash = world.hash();
  rec.config_hash = chash;

  const int s = cfg.total_steps;
  PolicyParams final_params = init;

  const auto run_separate = [&](const char* name, InputMode mode, int steps) {
    BranchSpec spec;
    spec.stage_name = name;
    spec.branch_name = name;
    spec.config = separate_config(cfg);
    spec.steps = steps;
    spec.mode = mode;
    require_matched(spec, per_step);
    return run_branch(policy, init, train, spec, cfg.reward, root.fork(name), io);
  };

  switch (kind) {
    case ParadigmKind::separate_t2i: {
      StageResult r = run_separate("t2i", InputMode::gen_only, s);
      rec.stages.push_back(single_branch_stage("t2i", r.record));
      final_params = std::move(r.params);
      break;
    }
    case ParadigmKind::separate_und: {
      StageResult r = run_separate("und", InputMode::und_only, s);
      rec.stages.push_back(single_branch_stage("und", r.record));
      final_params = std::move(r.params);
      break;
    }
    case ParadigmKind::separate_merge: {
      StageResult a = run_separate("t2i", InputMode::gen_only, s / 2);
      StageResult b = run_separate("und", InputMode::und_only, s / 2);
      rec.stages.push_back(single_branch_stage("t2i", a.record));
      rec.stages.push_back(single_branch_stage("und", b.record));
      final_params = merge_weights(a.params, b.params, MergeStrategy::gaussian, &init);
      rec.final_merge_strategy = merge_strategy_name(MergeStrategy::gaussian);
      break;
    }
    case ParadigmKind::cycle: {
      BranchSpec spec;
      spec.stage_name = "cycle";
      spec.branch_name = "cycle";
      spec.config = separate_config(cfg);
      spec.steps = s;
      spec.block_length = cfg.cycle_block_length;
      require_matched(spec, per_step);
      StageResult r = run_branch(policy, init, train, spec, cfg.reward, root.fork("cycle"), io);
      rec.stages.push_back(single_branch_stage("cycle", r.record));
      final_params = std::move(r.params);
      break;
    }
    case ParadigmKind::unified: {
      BranchSpec probe;
      probe.stage_name = "unified";
      probe.config = cfg.unified;
      probe.mode = InputMode::both;
      require_matched(probe, per_step);
      StageResult r =
          run_unified_stage(policy, init, train, cfg.unified, s, cfg.reward, root.fork("unified"), io);
      rec.stages.push_back(single_branch_stage("unified", r.record));
      final_params = std::move(r.params);
      break;
    }
    case ParadigmKind::corl: {
      StageResult u = run_unified_stage(policy, init, train, cfg.unified, s / 2, cfg.reward,
                                        root.fork("unified"), io);
      rec.stages.push_back(single_branch_stage("unified", u.record));

      StageResult t = run_refined_stage(policy, u.params, Task::T2I, train, cfg.refined_t2i,
                                        s / 4, cfg.reward, root.fork("refined_t2i"), io);
      rec.stages.push_back(single_branch_stage("refined_t2i", t.record));

      const Dataset train_mcq(world, seed, cfg.difficulty, cfg.dataset_size, Role::train,
                              QaMix::mcq_only);
      const Dataset train_oe(world, seed, cfg.difficulty, cfg.dataset_size, Role::train,
                             QaMix::oe_only);
      StageResult m = run_refined_stage(policy, u.params, Task::MCQ, train_mcq, cfg.refined_mcq,
                                        s / 8, cfg.reward, root.fork("refined_mcq"), io);
      StageResult o = run_refined_stage(policy, u.params, Task::OE, train_oe, cfg.refined_oe,
                                        s / 8, cfg.reward, root.fork("refined_oe"), io);

      const PolicyParams und =
          merge_weights(m.params, o.params, MergeStrategy::gaussian, &u.params);
      save_merged(und, policy, io, "refined_und", "refined_und");
      StageRecord und_stage;
      und_stage.name = "refined_und";
      m.record.name = "mcq";
      o.record.name = "oe";
      und_stage.branches = {m.record, o.record};
      und_stage.checkpoint_path = "refined_und/checkpoint.bin";
      und_stage.merge_strategy = merge_strategy_name(MergeStrategy::gaussian);
      rec.stages.push_back(std::move(und_stage));

      final_params = merge_weights(t.params, und, MergeStrategy::gaussian, &u.params);
      rec.final_merge_strategy = merge_strategy_name(MergeStrategy::gaussian);
      break;
    }
  }

  for (const StageRecord& st : rec.stages)
    for (const BranchRecord& b : st.branches) {
      rec.total_steps += b.steps;
      rec.total_rollout_samples += b.rollout_samples;
    }
  if (rec.total_steps != plan.total_steps ||
      rec.total_rollout_samples != plan.total_rollout_samples)
    fail(Errc::config_invalid,
         "paradigm " + rec.paradigm + " consumed " + std::to_string(rec.total_steps) + " steps / " +
             std::to_string(rec.total_rollout_samples) + " samples; the matched budget is " +
             std::to_string(plan.total_steps) + " / " + std::to_string(plan.total_rollout_samples));

  save_merged(final_params, policy, io, "final", "final");
  rec.final_checkpoint = "final/checkpoint.bin";

  EvalConfig ecfg;
  ecfg.n_gen = cfg.eval.n_gen;
  ecfg.n_qa = cfg.eval.n_qa;
  ecfg.difficulty = cfg.difficulty;
  ecfg.workers = cfg.workers;
  rec.final_eval = evaluate(policy, final_params, root.fork("final_eval").seed(), ecfg);
  atomic_write_file(dir / "final" / "eval.json", eval_report_json(rec.final_eval) + "\n");

  atomic_write_file(dir / "record.json", experiment_record_json(rec) + "\n");
  validate_record(rec, dir);
  return rec;
}

std::vector<ExperimentRecord> run_paradigm(ParadigmKind kind, const std::vector<uint64_t>& seeds,
                                           const RunConfig& cfg) {
  if (seeds.empty()) fail(Errc::bad_argument, "run_paradigm: no seeds");
  std::vector<ExperimentRecord> records;
  records.reserve(seeds.size());
  for (uint64_t seed : seeds) records.push_back(run_experiment(kind, seed, cfg));
  return records;
}

} // namespace corl
