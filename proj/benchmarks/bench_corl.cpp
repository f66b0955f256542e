#include <benchmark/benchmark.h>

#include "corl/config.hpp"
#include "corl/evalkit.hpp"
#include "corl/grpo.hpp"
#include "corl/merge.hpp"
#include "corl/policy.hpp"
#include "corl/rewards.hpp"
#include "corl/world.hpp"

using namespace corl;

namespace {

struct Fixture {
  RunConfig cfg = default_run_config();
  World world{cfg.world};
  Policy policy{world, cfg.policy};
  PolicyParams params = policy.init_params(1);
  Scene scene = world.generate_scene(7, 1);
  TokenGrid image = world.render_scene(scene);
  TextSequence prompt = world.describe_scene(scene);
};

Fixture& fix() {
  static Fixture f;
  return f;
}

void bench_sample_image(benchmark::State& state) {
  Fixture& f = fix();
  uint64_t i = 0;
  for (auto _ : state) {
    Rng rng(i++);
    benchmark::DoNotOptimize(
        f.policy.sample(f.params, Condition(f.prompt), OutputKind::image, 1.0, rng));
  }
}
BENCHMARK(bench_sample_image);

void bench_sample_text(benchmark::State& state) {
  Fixture& f = fix();
  const QAItem qa = f.world.make_qa(f.scene, QType::MCQ, 3);
  uint64_t i = 0;
  for (auto _ : state) {
    Rng rng(i++);
    benchmark::DoNotOptimize(
        f.policy.sample(f.params, Condition(qa.question, f.image), OutputKind::text, 1.0, rng));
  }
}
BENCHMARK(bench_sample_text);

void bench_logprob_grad(benchmark::State& state) {
  Fixture& f = fix();
  Rng rng(11);
  const PolicyOutput out =
      f.policy.sample(f.params, Condition(f.prompt), OutputKind::image, 1.0, rng);
  std::vector<double> grad(f.params.values.size());
  for (auto _ : state) {
    std::fill(grad.begin(), grad.end(), 0.0);
    f.policy.accumulate_grad_logprob(f.params, Condition(f.prompt), out, 1.0, grad);
    benchmark::DoNotOptimize(grad.data());
  }
}
BENCHMARK(bench_logprob_grad);

void bench_cycle_reward(benchmark::State& state) {
  Fixture& f = fix();
  const TokenGrid other = f.world.render_scene(f.world.generate_scene(9, 1));
  for (auto _ : state)
    benchmark::DoNotOptimize(cycle_reward(f.world, f.image, other, f.prompt, f.cfg.reward));
}
BENCHMARK(bench_cycle_reward);

void bench_tim_reward(benchmark::State& state) {
  Fixture& f = fix();
  const auto text_emb = f.world.embed(f.prompt);
  const auto img_emb = f.world.embed(f.image);
  for (auto _ : state) benchmark::DoNotOptimize(tim_reward(text_emb, img_emb));
}
BENCHMARK(bench_tim_reward);

// one unified-stage optimizer step at the default desk configuration; the
// per-seed training budget is total_steps of these
void bench_train_step(benchmark::State& state) {
  Fixture& f = fix();
  const StageConfig stage = f.cfg.unified;
  const QAItem qa = f.world.make_qa(f.scene, QType::MCQ, 3);
  std::vector<TrainInput> batch;
  for (int b = 0; b < stage.batch_size; ++b) {
    batch.push_back({static_cast<uint64_t>(2 * b), Task::T2I, Condition(f.prompt)});
    batch.push_back(
        {static_cast<uint64_t>(2 * b + 1), Task::MCQ, Condition(qa.question, f.image)});
  }
  const RewardFn reward = [&](const TrainInput& in, const PolicyOutput& out) {
    RewardBreakdown bd;
    if (in.task == Task::T2I) {
      bd.joint = cycle_reward(f.world, f.image, out.image, f.prompt, f.cfg.reward).normalized;
    } else {
      bd.joint = accuracy_reward(out.text.rendered, qa.gold, qa.qtype);
    }
    return bd;
  };
  const int workers = static_cast<int>(state.range(0));
  PolicyParams params = f.params;
  OptimizerState opt;
  uint64_t step = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(train_step(f.policy, batch, params, params, nullptr, stage, reward,
                                        opt, Rng(step++), workers));
  }
}
BENCHMARK(bench_train_step)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

void bench_evaluate(benchmark::State& state) {
  Fixture& f = fix();
  EvalConfig ec;
  ec.n_gen = 50;
  ec.n_qa = 50;
  ec.workers = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(f.policy, f.params, 1, ec));
}
BENCHMARK(bench_evaluate)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

void bench_gaussian_merge(benchmark::State& state) {
  Fixture& f = fix();
  PolicyParams a = f.params, b = f.params;
  Rng rng(5);
  for (double& v : a.values) v += 0.01 * rng.normal();
  for (double& v : b.values) v += 0.01 * rng.normal();
  for (auto _ : state)
    benchmark::DoNotOptimize(merge_weights(a, b, MergeStrategy::gaussian, &f.params));
}
BENCHMARK(bench_gaussian_merge);

} // namespace

BENCHMARK_MAIN();
