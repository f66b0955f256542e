// corl: operational entry point for training, evaluation, and artifact tools.
//
// Exit codes: 0 success, 1 error (details as JSON on stderr), 2 artifact/world
// hash mismatch. Environment overrides: CORL_OUTPUT_DIR replaces the config's
// output directory, CORL_WORKERS the rollout worker count; nothing else is
// read from the environment.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "corl/checkpoint.hpp"
#include "corl/config.hpp"
#include "corl/dataset.hpp"
#include "corl/errors.hpp"
#include "corl/evalkit.hpp"
#include "corl/fsio.hpp"
#include "corl/grpo.hpp"
#include "corl/merge.hpp"
#include "corl/orchestrator.hpp"
#include "corl/rewards.hpp"
#include "corl/rng.hpp"
#include "nlohmann/json.hpp"

namespace fs = std::filesystem;
using corl::Errc;
using corl::Error;
using nlohmann::ordered_json;

namespace {

void apply_env_overrides(corl::RunConfig& cfg) {
  if (const char* dir = std::getenv("CORL_OUTPUT_DIR")) {
    if (*dir == '\0') corl::fail(Errc::config_invalid, "CORL_OUTPUT_DIR: empty");
    cfg.output_dir = dir;
  }
  if (const char* workers = std::getenv("CORL_WORKERS")) {
    char* end = nullptr;
    const long n = std::strtol(workers, &end, 10);
    if (end == workers || *end != '\0' || n < 1)
      corl::fail(Errc::config_invalid,
                 "CORL_WORKERS: expected a positive integer, got '" + std::string(workers) + "'");
    cfg.workers = static_cast<int>(n);
  }
}

corl::RunConfig load_config(const std::string& path) {
  corl::RunConfig cfg = corl::load_run_config(path);
  apply_env_overrides(cfg);
  cfg.validate();
  return cfg;
}

fs::path experiment_dir(const corl::RunConfig& cfg, const std::string& paradigm, uint64_t seed) {
  return fs::path(cfg.output_dir) / paradigm / ("seed" + std::to_string(seed));
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config_path;
  bool dry_run = false;
};

int cmd_train(const TrainArgs& args) {
  const corl::RunConfig cfg = load_config(args.config_path);
  const corl::ParadigmKind kind = corl::paradigm_from_name(cfg.paradigm).value();
  const corl::ComputePlan plan = corl::plan_compute(kind, cfg);
  const corl::World world(cfg.world);

  if (args.dry_run) {
    ordered_json j{{"paradigm", cfg.paradigm},
                   {"seeds", cfg.seeds},
                   {"config_hash", corl::config_hash(cfg)},
                   {"world_hash", world.hash()},
                   {"matched_samples_per_step", corl::matched_samples_per_step(cfg)},
                   {"total_steps_per_seed", plan.total_steps},
                   {"total_rollout_samples_per_seed", plan.total_rollout_samples},
                   {"output_dir", cfg.output_dir},
                   {"workers", cfg.workers},
                   {"config", ordered_json::parse(corl::run_config_json(cfg))}};
    std::cout << j.dump(2) << "\n";
    return 0;
  }

  for (const uint64_t seed : cfg.seeds) {
    const corl::ExperimentRecord rec = corl::run_experiment(kind, seed, cfg);
    const fs::path dir = experiment_dir(cfg, rec.paradigm, seed);
    ordered_json line{{"paradigm", rec.paradigm},
                      {"seed", rec.seed},
                      {"record", (dir / "record.json").string()},
                      {"gen_overall", rec.final_eval.gen.overall},
                      {"qa_mcq_acc", rec.final_eval.qa_mcq_acc},
                      {"qa_oe_acc", rec.final_eval.qa_oe_acc},
                      {"combined_score", corl::combined_score(rec.final_eval)}};
    std::cout << line.dump() << "\n";
  }
  return 0;
}

// ----------------------------------------------------------------- eval

struct EvalArgs {
  std::string config_path;
  std::string checkpoint;
  std::optional<int> n;
  std::optional<int> n_gen;
  std::optional<int> n_qa;
  uint64_t seed = 0;
  std::optional<double> temperature;
};

int cmd_eval(const EvalArgs& args) {
  const corl::RunConfig cfg = load_config(args.config_path);
  const corl::World world(cfg.world);
  const corl::Policy policy(world, cfg.policy);
  const corl::PolicyParams params = corl::load_checkpoint(args.checkpoint, world.hash());

  corl::EvalConfig ec;
  ec.n_gen = args.n.value_or(cfg.eval.n_gen);
  ec.n_qa = args.n.value_or(cfg.eval.n_qa);
  if (args.n_gen) ec.n_gen = *args.n_gen;
  if (args.n_qa) ec.n_qa = *args.n_qa;
  ec.difficulty = cfg.difficulty;
  if (args.temperature) ec.gen_temperature = *args.temperature;
  ec.workers = cfg.workers;

  const corl::EvalReport report = corl::evaluate(policy, params, args.seed, ec);
  std::cout << corl::eval_report_json(report) << "\n";
  return 0;
}

// ---------------------------------------------------------------- pilot

struct PilotArgs {
  std::string config_path;
};

struct PilotRow {
  std::string paradigm;
  std::string seed; // a number, or "mean" for the per-paradigm aggregate
  std::vector<double> scores;
};

const std::vector<std::string> kPilotColumns = {
    "two_object", "counting",  "position", "color_attr",
    "gen_overall", "qa_mcq_acc", "qa_oe_acc", "combined"};

std::vector<double> pilot_scores(const corl::EvalReport& r) {
  return {r.gen.two_object, r.gen.counting,  r.gen.position, r.gen.color_attr,
          r.gen.overall,    r.qa_mcq_acc,    r.qa_oe_acc,    corl::combined_score(r)};
}

std::string csv_number(double v) {
  return ordered_json(v).dump();
}

std::string pilot_csv(const std::vector<PilotRow>& rows) {
  std::string out = "paradigm,seed";
  for (const std::string& c : kPilotColumns) out += "," + c;
  out += "\n";
  for (const PilotRow& r : rows) {
    out += r.paradigm + "," + r.seed;
    for (const double v : r.scores) out += "," + csv_number(v);
    out += "\n";
  }
  return out;
}

// One curve row per metrics row, tagged with seed and branch so external
// tools can facet; metrics headers (rows without a step) are skipped.
std::string curves_csv(const corl::RunConfig& cfg,
                       const std::vector<corl::ExperimentRecord>& recs) {
  std::string out = "seed,stage,branch,step,task,reward_mean,kl,grad_norm\n";
  for (const corl::ExperimentRecord& rec : recs) {
    const fs::path dir = experiment_dir(cfg, rec.paradigm, rec.seed);
    for (const corl::StageRecord& stage : rec.stages) {
      for (const corl::BranchRecord& branch : stage.branches) {
        const std::string content = corl::read_file(dir / branch.metrics_path);
        size_t pos = 0;
        while (pos < content.size()) {
          size_t eol = content.find('\n', pos);
          if (eol == std::string::npos) eol = content.size();
          const ordered_json row = ordered_json::parse(content.substr(pos, eol - pos));
          pos = eol + 1;
          if (!row.contains("step")) continue;
          out += std::to_string(rec.seed) + "," + stage.name + "," + branch.name + "," +
                 std::to_string(row["step"].get<long long>()) + "," +
                 row["task"].get<std::string>() + "," + csv_number(row["reward_mean"]) + "," +
                 csv_number(row["kl"]) + "," + csv_number(row["grad_norm"]) + "\n";
        }
      }
    }
  }
  return out;
}

int cmd_pilot(const PilotArgs& args) {
  const corl::RunConfig cfg = load_config(args.config_path);
  for (const corl::ParadigmKind kind : corl::all_paradigms())
    (void)corl::plan_compute(kind, cfg); // fail before any training if one cell cannot match

  const fs::path pilot_dir = fs::path(cfg.output_dir) / "pilot";
  fs::create_directories(pilot_dir);

  std::vector<PilotRow> rows;
  for (const corl::ParadigmKind kind : corl::all_paradigms()) {
    const std::vector<corl::ExperimentRecord> recs = corl::run_paradigm(kind, cfg.seeds, cfg);
    std::vector<double> sums(kPilotColumns.size(), 0.0);
    for (const corl::ExperimentRecord& rec : recs) {
      const std::vector<double> scores = pilot_scores(rec.final_eval);
      rows.push_back({rec.paradigm, std::to_string(rec.seed), scores});
      for (size_t i = 0; i < sums.size(); ++i) sums[i] += scores[i];
    }
    for (double& s : sums) s /= static_cast<double>(recs.size());
    rows.push_back({corl::paradigm_name(kind), "mean", sums});

    corl::atomic_write_file(pilot_dir / ("curves_" + std::string(corl::paradigm_name(kind)) + ".csv"),
                            curves_csv(cfg, recs));

    ordered_json summary{{"paradigm", corl::paradigm_name(kind)}, {"seeds", cfg.seeds.size()}};
    for (size_t i = 0; i < kPilotColumns.size(); ++i) summary[kPilotColumns[i]] = sums[i];
    std::cout << summary.dump() << "\n";
  }

  corl::atomic_write_file(pilot_dir / "comparison.csv", pilot_csv(rows));
  std::cout << ordered_json{{"comparison", (pilot_dir / "comparison.csv").string()}}.dump()
            << "\n";
  return 0;
}

// ------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  std::string config_path; // optional; defaults apply when empty
  int trials = 24;
  int coords = 48;
  double tol = 1e-5;
  double fd_step = 1e-5;
  uint64_t seed = 0;
  bool inject_bug = false;
};

std::string block_of(const corl::PolicyParams& params, size_t index) {
  for (const corl::ParamBlock& b : params.blocks)
    if (index >= b.offset && index < b.offset + b.len) return b.name;
  return "?";
}

int cmd_gradcheck(const GradcheckArgs& args) {
  corl::RunConfig cfg = corl::default_run_config();
  if (!args.config_path.empty()) cfg = load_config(args.config_path);
  if (args.trials < 1 || args.coords < 1)
    corl::fail(Errc::bad_argument, "gradcheck: trials and coords must be positive");

  const corl::World world(cfg.world);
  const corl::Policy policy(world, cfg.policy);

  double max_rel_err = 0.0;
  ordered_json worst;

  for (int trial = 0; trial < args.trials; ++trial) {
    const corl::Rng rng = corl::Rng(args.seed).fork("trial", static_cast<uint64_t>(trial));

    corl::SurrogateOptions opt;
    opt.beta = trial % 2 == 0 ? 0.0 : 0.02;
    opt.token_level_ratio = trial % 3 == 0;
    const int group_size = (trial / 2) % 2 == 0 ? 8 : 16;
    const bool gen_task = (trial / 4) % 2 == 0;

    corl::PolicyParams params_old = policy.init_params(rng.fork("old").seed());
    corl::PolicyParams theta = params_old;
    {
      corl::Rng jitter = rng.fork("jitter");
      for (double& v : theta.values) v += 0.01 * jitter.normal();
    }
    corl::PolicyParams ref = params_old;
    {
      corl::Rng jitter = rng.fork("ref");
      for (double& v : ref.values) v += 0.01 * jitter.normal();
    }

    const corl::Scene scene =
        world.generate_scene(rng.fork("scene").seed(), cfg.difficulty);
    corl::TrainInput input;
    if (gen_task) {
      input = {0, corl::Task::T2I, corl::Condition(world.describe_scene(scene))};
    } else {
      const corl::QAItem qa = world.make_qa(scene, corl::QType::MCQ, rng.fork("qa").seed());
      input = {0, corl::Task::MCQ, corl::Condition(qa.question, world.render_scene(scene))};
    }

    corl::RolloutGroup group =
        corl::rollout_group(policy, params_old, input, group_size, rng.fork("rollout"));
    corl::Rng reward_rng = rng.fork("rewards");
    group.rewards.resize(group.outputs.size());
    for (double& r : group.rewards) r = 2.0 * reward_rng.uniform() - 1.0;
    group.advantages = corl::normalize_advantages(group.rewards);

    const corl::PolicyParams* pref = opt.beta > 0.0 ? &ref : nullptr;
    std::vector<double> grad(theta.values.size(), 0.0);
    (void)corl::surrogate_value_and_grad(policy, group, theta, params_old, pref, opt, grad);

    corl::Rng coord_rng = rng.fork("coords");
    std::vector<size_t> coords(static_cast<size_t>(args.coords));
    for (size_t& i : coords) i = coord_rng.uniform_int(theta.values.size());
    if (args.inject_bug) grad[coords[0]] += 0.25; // must be caught by the probe below

    const auto value_at = [&](const corl::PolicyParams& p) {
      std::vector<double> scratch(p.values.size(), 0.0);
      return corl::surrogate_value_and_grad(policy, group, p, params_old, pref, opt, scratch);
    };

    for (const size_t i : coords) {
      corl::PolicyParams probe = theta;
      probe.values[i] = theta.values[i] + args.fd_step;
      const double up = value_at(probe);
      probe.values[i] = theta.values[i] - args.fd_step;
      const double down = value_at(probe);
      const double fd = (up - down) / (2.0 * args.fd_step);
      // absolute floor keeps finite-difference noise on near-zero
      // coordinates from masquerading as gradient error
      const double err =
          std::abs(fd - grad[i]) / std::max(std::abs(fd) + std::abs(grad[i]), 1e-3);
      if (err > max_rel_err) {
        max_rel_err = err;
        worst = ordered_json{{"block", block_of(theta, i)},
                             {"coord", i},
                             {"trial", trial},
                             {"beta", opt.beta},
                             {"group_size", group_size},
                             {"task", gen_task ? "t2i" : "mcq"},
                             {"token_level_ratio", opt.token_level_ratio},
                             {"finite_difference", fd},
                             {"analytic", grad[i]}};
      }
    }
  }

  ordered_json report{{"trials", args.trials},
                      {"coords_per_trial", args.coords},
                      {"fd_step", args.fd_step},
                      {"tolerance", args.tol},
                      {"max_rel_err", max_rel_err},
                      {"worst", worst},
                      {"pass", max_rel_err <= args.tol}};
  std::cout << report.dump(2) << "\n";
  return max_rel_err <= args.tol ? 0 : 1;
}

// ------------------------------------------------------------ reward-eval

struct RewardEvalArgs {
  std::string config_path;
  std::string checkpoint; // empty: score a fresh init instead
  int n = 200;
  uint64_t seed = 0;
};

int cmd_reward_eval(const RewardEvalArgs& args) {
  const corl::RunConfig cfg = load_config(args.config_path);
  if (args.n < 1) corl::fail(Errc::bad_argument, "reward-eval: n must be positive");
  const corl::World world(cfg.world);
  const corl::Policy policy(world, cfg.policy);
  const corl::PolicyParams params =
      args.checkpoint.empty() ? policy.init_params(args.seed)
                              : corl::load_checkpoint(args.checkpoint, world.hash());

  const corl::Dataset data(world, args.seed, cfg.difficulty, static_cast<uint64_t>(args.n),
                           corl::Role::eval, corl::QaMix::alternate);

  double perfect_cycle = 0.0, perfect_tim = 0.0, perfect_acc = 0.0, perfect_format = 0.0;
  double pol_cycle = 0.0, pol_tim = 0.0, pol_acc = 0.0, pol_format = 0.0;
  const corl::Rng root = corl::Rng(args.seed).fork("reward_eval");
  for (int i = 0; i < args.n; ++i) {
    const corl::DatasetSample s = data.sample(static_cast<size_t>(i));
    const auto text_emb = world.embed(s.prompt);

    perfect_cycle += corl::cycle_reward(world, s.image, s.image, s.prompt, cfg.reward).normalized;
    perfect_tim += corl::tim_reward(text_emb, world.embed(s.image)).normalized;
    const std::string ideal = "<think> </think><answer>" + s.qa.gold + "</answer>";
    perfect_acc += corl::accuracy_reward(ideal, s.qa.gold, s.qa.qtype);
    perfect_format += corl::format_reward(ideal);

    const corl::Rng sample_rng = root.fork("sample", static_cast<uint64_t>(i));
    corl::Rng gen_rng = sample_rng.fork("gen");
    const corl::PolicyOutput gen =
        policy.sample(params, corl::Condition(s.prompt), corl::OutputKind::image, 1.0, gen_rng);
    pol_cycle += corl::cycle_reward(world, s.image, gen.image, s.prompt, cfg.reward).normalized;
    pol_tim += corl::tim_reward(text_emb, world.embed(gen.image)).normalized;

    corl::Rng und_rng = sample_rng.fork("und");
    const corl::PolicyOutput ans =
        policy.sample(params, corl::Condition(s.qa.question, s.image), corl::OutputKind::text,
                      1.0, und_rng);
    pol_acc += corl::accuracy_reward(ans.text.rendered, s.qa.gold, s.qa.qtype);
    pol_format += corl::format_reward(ans.text.rendered);
  }

  const double inv = 1.0 / static_cast<double>(args.n);
  ordered_json report{
      {"n", args.n},
      {"seed", args.seed},
      {"world_hash", world.hash()},
      {"policy_source", args.checkpoint.empty() ? "fresh_init" : args.checkpoint},
      {"perfect",
       {{"cycle_mean", perfect_cycle * inv},
        {"tim_mean", perfect_tim * inv},
        {"acc_mean", perfect_acc * inv},
        {"format_mean", perfect_format * inv}}},
      {"policy",
       {{"cycle_mean", pol_cycle * inv},
        {"tim_mean", pol_tim * inv},
        {"acc_mean", pol_acc * inv},
        {"format_mean", pol_format * inv}}}};
  std::cout << report.dump(2) << "\n";
  return 0;
}

// --------------------------------------------------------- policy-inspect

struct InspectArgs {
  std::string checkpoint;
};

int cmd_policy_inspect(const InspectArgs& args) {
  const corl::CheckpointData cd = corl::load_checkpoint(args.checkpoint);

  ordered_json meta;
  try {
    meta = ordered_json::parse(cd.meta);
  } catch (const nlohmann::json::exception&) {
    meta = cd.meta; // free-form metadata stays a string
  }

  ordered_json blocks = ordered_json::array();
  for (const corl::ParamBlock& b : cd.params.blocks) {
    double l2 = 0.0, lo = 0.0, hi = 0.0;
    for (size_t i = b.offset; i < b.offset + b.len; ++i) {
      const double v = cd.params.values[i];
      l2 += v * v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    blocks.push_back(ordered_json{
        {"name", b.name}, {"len", b.len}, {"l2", std::sqrt(l2)}, {"min", lo}, {"max", hi}});
  }

  ordered_json j{{"checkpoint", args.checkpoint},
                 {"world_hash", cd.world_hash},
                 {"meta", meta},
                 {"n_params", cd.params.values.size()},
                 {"all_finite", cd.params.all_finite()},
                 {"blocks", blocks}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

// ----------------------------------------------------------------- merge

struct MergeArgs {
  std::string a;
  std::string b;
  std::string out;
  std::string strategy = "gaussian";
  std::string anchor;
};

int cmd_merge(const MergeArgs& args) {
  const std::optional<corl::MergeStrategy> strategy =
      corl::merge_strategy_from_name(args.strategy);
  if (!strategy)
    corl::fail(Errc::bad_argument, "merge: unknown strategy '" + args.strategy + "'");
  const corl::CheckpointData ca = corl::load_checkpoint(args.a);
  const corl::CheckpointData cb = corl::load_checkpoint(args.b);
  if (ca.world_hash != cb.world_hash)
    corl::fail(Errc::world_hash_mismatch, "merge: inputs come from different worlds");

  std::optional<corl::PolicyParams> anchor;
  if (!args.anchor.empty()) anchor = corl::load_checkpoint(args.anchor, ca.world_hash);

  const corl::PolicyParams merged = corl::merge_weights(
      ca.params, cb.params, *strategy, anchor ? &*anchor : nullptr);

  const ordered_json meta{{"merged_from", {args.a, args.b}},
                          {"strategy", args.strategy},
                          {"anchor", args.anchor.empty() ? ordered_json(nullptr)
                                                         : ordered_json(args.anchor)}};
  corl::save_checkpoint(merged, ca.world_hash, meta.dump(), args.out);
  std::cout << ordered_json{{"out", args.out}, {"world_hash", ca.world_hash}}.dump() << "\n";
  return 0;
}

int guarded(int (*fn)(void*), void* args) {
  try {
    return fn(args);
  } catch (const Error& e) {
    std::cerr << ordered_json{{"error", {{"code", e.code_name()}, {"message", e.what()}}}}.dump()
              << "\n";
    return e.code() == Errc::world_hash_mismatch ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << ordered_json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump()
              << "\n";
    return 1;
  }
}

template <typename Args, int (*Fn)(const Args&)>
void wire(CLI::App* sub, std::shared_ptr<Args> args, int& rc) {
  sub->callback([args, &rc] {
    rc = guarded([](void* a) { return Fn(*static_cast<const Args*>(a)); }, args.get());
  });
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"seeded grid-world testbed for joint generation/understanding RL"};
  app.require_subcommand(1);
  app.footer("exit codes: 0 ok, 1 error (JSON on stderr), 2 checkpoint/world hash mismatch\n"
             "environment: CORL_OUTPUT_DIR overrides output_dir, CORL_WORKERS the worker count");

  int rc = 0;

  auto train_args = std::make_shared<TrainArgs>();
  CLI::App* train = app.add_subcommand("train", "run the configured paradigm over its seeds");
  train->add_option("--config", train_args->config_path, "run config JSON path")->required();
  train->add_flag("--dry-run", train_args->dry_run,
                  "validate and print the resolved plan without training");
  wire<TrainArgs, cmd_train>(train, train_args, rc);

  auto eval_args = std::make_shared<EvalArgs>();
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out stream");
  eval->add_option("--config", eval_args->config_path, "run config JSON path")->required();
  eval->add_option("--checkpoint", eval_args->checkpoint, "checkpoint path")->required();
  eval->add_option("--n", eval_args->n, "sample count for both surfaces");
  eval->add_option("--n-gen", eval_args->n_gen, "generation sample count override");
  eval->add_option("--n-qa", eval_args->n_qa, "QA sample count override");
  eval->add_option("--seed", eval_args->seed, "evaluation seed (default 0)");
  eval->add_option("--temperature", eval_args->temperature, "generation sampling temperature");
  wire<EvalArgs, cmd_eval>(eval, eval_args, rc);

  auto pilot_args = std::make_shared<PilotArgs>();
  CLI::App* pilot = app.add_subcommand(
      "pilot", "run every paradigm over the seed set and emit comparison tables");
  pilot->add_option("--config", pilot_args->config_path, "run config JSON path")->required();
  wire<PilotArgs, cmd_pilot>(pilot, pilot_args, rc);

  auto grad_args = std::make_shared<GradcheckArgs>();
  CLI::App* grad = app.add_subcommand("gradcheck",
                                      "compare analytic gradients against finite differences");
  grad->add_option("--config", grad_args->config_path, "run config JSON path (default config)");
  grad->add_option("--trials", grad_args->trials, "random configurations to test");
  grad->add_option("--coords", grad_args->coords, "coordinates probed per trial");
  grad->add_option("--tol", grad_args->tol, "max relative error accepted");
  grad->add_option("--fd-step", grad_args->fd_step, "central difference step");
  grad->add_option("--seed", grad_args->seed, "rng seed");
  grad->add_flag("--inject-bug", grad_args->inject_bug,
                 "corrupt one analytic coordinate (negative control; must fail)");
  wire<GradcheckArgs, cmd_gradcheck>(grad, grad_args, rc);

  auto reward_args = std::make_shared<RewardEvalArgs>();
  CLI::App* reward = app.add_subcommand(
      "reward-eval", "score reward components for ideal outputs and a policy");
  reward->add_option("--config", reward_args->config_path, "run config JSON path")->required();
  reward->add_option("--checkpoint", reward_args->checkpoint,
                     "checkpoint to score (default: fresh init)");
  reward->add_option("--n", reward_args->n, "sample count");
  reward->add_option("--seed", reward_args->seed, "rng seed");
  wire<RewardEvalArgs, cmd_reward_eval>(reward, reward_args, rc);

  auto inspect_args = std::make_shared<InspectArgs>();
  CLI::App* inspect = app.add_subcommand("policy-inspect",
                                         "print checkpoint metadata and parameter statistics");
  inspect->add_option("--checkpoint", inspect_args->checkpoint, "checkpoint path")->required();
  wire<InspectArgs, cmd_policy_inspect>(inspect, inspect_args, rc);

  auto merge_args = std::make_shared<MergeArgs>();
  CLI::App* merge = app.add_subcommand("merge", "merge two checkpoints into a new one");
  merge->add_option("--a", merge_args->a, "first checkpoint")->required();
  merge->add_option("--b", merge_args->b, "second checkpoint")->required();
  merge->add_option("--out", merge_args->out, "output checkpoint path")->required();
  merge->add_option("--strategy", merge_args->strategy, "average or gaussian");
  merge->add_option("--anchor", merge_args->anchor,
                    "shared pre-training checkpoint (required for gaussian)");
  wire<MergeArgs, cmd_merge>(merge, merge_args, rc);

  CLI11_PARSE(app, argc, argv);
  return rc;
}
