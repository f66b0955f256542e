#include "corl/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "corl/errors.hpp"
#include "doctest.h"
#include "nlohmann/json.hpp"

using namespace corl;

namespace {

// direct restatement of the standardization rule, kept separate from the
// library implementation
std::vector<double> advantage_oracle(const std::vector<double>& r) {
  const double n = static_cast<double>(r.size());
  double mean = 0.0;
  for (double x : r) mean += x / n;
  double var = 0.0;
  for (double x : r) var += (x - mean) * (x - mean) / n;
  const double std = std::sqrt(var);
  std::vector<double> a(r.size(), 0.0);
  if (std < 1e-8) return a;
  for (size_t i = 0; i < r.size(); ++i) a[i] = (r[i] - mean) / std;
  return a;
}

World small_world() { return World(WorldConfig{2, 2, 2, 2, 4, 5}); }

PolicyConfig tiny_policy_config() {
  PolicyConfig cfg;
  cfg.hidden = 2;
  cfg.cond_embed_dim = 2;
  cfg.max_text_len = 2;
  return cfg;
}

PolicyParams spiced(const Policy& pi, uint64_t seed, double scale) {
  PolicyParams p = pi.init_params(seed);
  Rng rng = Rng(seed).fork("spice");
  for (auto& v : p.values) v = v * scale + 0.05 * rng.normal();
  return p;
}

TrainInput gen_input(const World& w, uint64_t id) {
  TrainInput in;
  in.id = id;
  in.task = Task::T2I;
  in.cond = Condition(w.describe_scene(w.generate_scene(id, 1)));
  return in;
}

TrainInput qa_input(const World& w, uint64_t id, Task task) {
  const Scene s = w.generate_scene(id, 1);
  const QAItem qa = w.make_qa(s, task == Task::MCQ ? QType::MCQ : QType::OE, id);
  TrainInput in;
  in.id = id;
  in.task = task;
  in.cond = Condition(qa.question, w.render_scene(s));
  return in;
}

// reward that depends on the output tokens, so groups have variance
double token_checksum(const PolicyOutput& out) {
  const std::vector<int>& toks =
      out.kind == OutputKind::image ? out.image.tokens : out.text.tokens;
  double acc = static_cast<double>(toks.size());
  for (int t : toks) acc += static_cast<double>(t % 7);
  return std::fmod(acc, 11.0) / 11.0;
}

RewardFn checksum_reward() {
  return [](const TrainInput&, const PolicyOutput& out) {
    RewardBreakdown bd;
    bd.joint = token_checksum(out);
    bd.cycle = bd.joint;
    return bd;
  };
}

RolloutGroup scored_group(const Policy& pi, const PolicyParams& old_params,
                          const TrainInput& in, int g, uint64_t salt) {
  RolloutGroup group = rollout_group(pi, old_params, in, g, Rng(salt));
  for (const auto& out : group.outputs) group.rewards.push_back(token_checksum(out));
  group.advantages = normalize_advantages(group.rewards);
  return group;
}

double batch_value(const Policy& pi, const std::vector<RolloutGroup>& groups,
                   const PolicyParams& theta, const PolicyParams& old_params,
                   const PolicyParams* ref, const SurrogateOptions& opt) {
  double v = 0.0;
  for (const auto& g : groups)
    v += surrogate_value_and_grad(pi, g, theta, old_params, ref, opt, {});
  return v / static_cast<double>(groups.size());
}

} // namespace

TEST_CASE("advantage normalization follows the standardization rule") {
  const std::vector<double> a = normalize_advantages(std::vector<double>{1.0, 2.0, 3.0});
  CHECK(a[0] == doctest::Approx(-1.2247).epsilon(1e-4));
  CHECK(a[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(a[2] == doctest::Approx(1.2247).epsilon(1e-4));
  CHECK(a[0] == doctest::Approx(-std::sqrt(1.5)).epsilon(1e-12));

  const std::vector<double> zeros = normalize_advantages(std::vector<double>{5.0, 5.0, 5.0, 5.0});
  for (double z : zeros) CHECK(z == 0.0);

  // sub-threshold variance also degrades to zeros rather than amplifying noise
  const std::vector<double> tiny =
      normalize_advantages(std::vector<double>{1.0, 1.0 + 1e-9, 1.0 - 1e-9});
  for (double z : tiny) CHECK(z == 0.0);

  CHECK_THROWS_AS((void)normalize_advantages(std::vector<double>{1.0}), Error);

  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const size_t n = 2 + rng.uniform_int(63);
    std::vector<double> r(n);
    for (auto& x : r) x = rng.normal() * 3.0;
    const auto got = normalize_advantages(r);
    const auto want = advantage_oracle(r);
    for (size_t i = 0; i < n; ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-9));

    // invariance to positive affine reward transforms
    std::vector<double> shifted(n);
    for (size_t i = 0; i < n; ++i) shifted[i] = 3.7 * r[i] - 2.25;
    const auto same = normalize_advantages(shifted);
    for (size_t i = 0; i < n; ++i) CHECK(same[i] == doctest::Approx(got[i]).epsilon(1e-9));
  }
}

TEST_CASE("rollout groups are seeded and carry old log-probs") {
  World w = small_world();
  Policy pi(w, PolicyConfig{});
  const PolicyParams p = spiced(pi, 1, 3.0);
  const TrainInput in = gen_input(w, 4);

  for (int g : {8, 16}) {
    const RolloutGroup group = rollout_group(pi, p, in, g, Rng(7));
    CHECK(group.outputs.size() == static_cast<size_t>(g));
    CHECK(group.old_logprobs.size() == static_cast<size_t>(g));
    CHECK(group.rewards.empty());
    CHECK(group.advantages.empty());
    for (size_t i = 0; i < group.outputs.size(); ++i) {
      CHECK(group.outputs[i].kind == OutputKind::image);
      CHECK(group.old_logprobs[i] == group.outputs[i].logprob);
    }
  }

  const RolloutGroup g1 = rollout_group(pi, p, in, 8, Rng(7));
  const RolloutGroup g2 = rollout_group(pi, p, in, 8, Rng(7));
  const RolloutGroup g3 = rollout_group(pi, p, in, 8, Rng(8));
  bool identical = true, differs = false;
  for (size_t i = 0; i < 8; ++i) {
    identical = identical && g1.outputs[i].image.tokens == g2.outputs[i].image.tokens;
    differs = differs || g1.outputs[i].image.tokens != g3.outputs[i].image.tokens;
  }
  CHECK(identical);
  CHECK(differs);

  const TrainInput qin = qa_input(w, 2, Task::OE);
  const RolloutGroup tq = rollout_group(pi, p, qin, 4, Rng(1));
  for (const auto& out : tq.outputs) CHECK(out.kind == OutputKind::text);

  CHECK_THROWS_AS((void)rollout_group(pi, p, in, 1, Rng(0)), Error);
}

TEST_CASE("surrogate at the old policy reduces to the advantage mean and REINFORCE") {
  World w = small_world();
  Policy pi(w, PolicyConfig{});
  const PolicyParams p = spiced(pi, 9, 3.0);
  const TrainInput in = gen_input(w, 6);
  RolloutGroup group = scored_group(pi, p, in, 8, 12);
  REQUIRE(*std::max_element(group.advantages.begin(), group.advantages.end()) > 0.0);

  std::vector<double> grad(pi.param_count(), 0.0);
  const double value =
      surrogate_value_and_grad(pi, group, p, p, nullptr, SurrogateOptions{}, grad);
  CHECK(std::abs(value) <= 1e-12);

  std::vector<double> reinforce(pi.param_count(), 0.0);
  for (size_t i = 0; i < group.outputs.size(); ++i)
    pi.accumulate_grad_logprob(p, group.cond, group.outputs[i],
                               group.advantages[i] / static_cast<double>(group.outputs.size()),
                               reinforce);
  for (size_t j = 0; j < grad.size(); ++j)
    CHECK(std::abs(grad[j] - reinforce[j]) <= 1e-10);

  // with theta == old == ref the KL term vanishes too
  std::vector<double> grad2(pi.param_count(), 0.0);
  SurrogateOptions with_kl;
  with_kl.beta = 0.02;
  double kl = -1.0;
  const double v2 = surrogate_value_and_grad(pi, group, p, p, &p, with_kl, grad2, nullptr, &kl);
  CHECK(kl == 0.0);
  CHECK(std::abs(v2) <= 1e-12);

  // token-level mode has the same fixed point
  SurrogateOptions token_mode;
  token_mode.token_level_ratio = true;
  const double v3 = surrogate_value_and_grad(pi, group, p, p, nullptr, token_mode, {});
  CHECK(std::abs(v3) <= 1e-12);
}

TEST_CASE("surrogate errors") {
  World w = small_world();
  Policy pi(w, PolicyConfig{});
  const PolicyParams p = spiced(pi, 2, 3.0);
  const TrainInput in = gen_input(w, 1);
  RolloutGroup group = rollout_group(pi, p, in, 4, Rng(3));

  try {
    (void)surrogate_value_and_grad(pi, group, p, p, nullptr, SurrogateOptions{}, {});
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::missing_advantages);
  }

  for (const auto& out : group.outputs) group.rewards.push_back(token_checksum(out));
  group.advantages = normalize_advantages(group.rewards);
  SurrogateOptions opt;
  opt.beta = 0.02;
  try {
    (void)surrogate_value_and_grad(pi, group, p, p, nullptr, opt, {});
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::missing_reference);
  }
}

TEST_CASE("surrogate gradient matches finite differences across configurations") {
  World w = small_world();
  Policy pi(w, PolicyConfig{});
  Rng rng(77);
  int config_id = 0;
  for (double beta : {0.0, 0.02}) {
    for (bool token_mode : {false, true}) {
      for (bool clip : {false, true}) {
        for (Task task : {Task::T2I, Task::OE}) {
          ++config_id;
          const uint64_t salt = static_cast<uint64_t>(config_id);
          const PolicyParams old_params = spiced(pi, salt, 3.0);
          PolicyParams theta = old_params;
          // move theta off the rollout policy so ratios are non-trivial
          Rng jitter = rng.fork("jitter", salt);
          for (auto& v : theta.values) v += 0.02 * jitter.normal();
          const PolicyParams ref = spiced(pi, salt + 500, 3.0);

          const TrainInput in =
              task == Task::T2I ? gen_input(w, salt) : qa_input(w, salt, task);
          const RolloutGroup group = scored_group(pi, old_params, in, 4, salt + 9);

          SurrogateOptions opt;
          opt.beta = beta;
          opt.token_level_ratio = token_mode;
          if (clip) opt.clip_epsilon = 0.2;
          const PolicyParams* pref = beta > 0 ? &ref : nullptr;

          std::vector<double> grad(pi.param_count(), 0.0);
          (void)surrogate_value_and_grad(pi, group, theta, old_params, pref, opt, grad);

          const double h = 1e-5;
          double worst = 0.0;
          for (int k = 0; k < 12; ++k) {
            const auto blocks = pi.layout();
            const auto& b = blocks[rng.uniform_int(blocks.size())];
            const size_t idx = b.offset + rng.uniform_int(b.len);
            PolicyParams up = theta;
            up.values[idx] += h;
            PolicyParams dn = theta;
            dn.values[idx] -= h;
            const double fd = (surrogate_value_and_grad(pi, group, up, old_params, pref, opt, {}) -
                               surrogate_value_and_grad(pi, group, dn, old_params, pref, opt, {})) /
                              (2 * h);
            worst = std::max(worst, std::abs(grad[idx] - fd) /
                                        std::max(std::abs(grad[idx]) + std::abs(fd), 1e-3));
          }
          CAPTURE(beta);
          CAPTURE(token_mode);
          CAPTURE(clip);
          CHECK(worst < 1e-5);
        }
      }
    }
  }
}

TEST_CASE("ratio clamp and clip produce flat regions") {
  World w = small_world();
  Policy pi(w, PolicyConfig{});
  const PolicyParams p = spiced(pi, 5, 3.0);
  const TrainInput in = gen_input(w, 3);
  RolloutGroup group = rollout_group(pi, p, in, 2, Rng(2));
  group.rewards = {2.0, 0.0};
  group.advantages = normalize_advantages(group.rewards); // {1, -1}

  // shift stored old log-probs so both ratios are exp(0.3)
  group.old_logprobs[0] = group.outputs[0].logprob - 0.3;
  group.old_logprobs[1] = group.outputs[1].logprob - 0.3;
  const double ratio = std::exp(0.3);

  SurrogateOptions opt;
  opt.clip_epsilon = 0.2;
  std::vector<double> grad(pi.param_count(), 0.0);
  RatioStats rs;
  const double value = surrogate_value_and_grad(pi, group, p, p, nullptr, opt, grad, &rs);

  // output 0: advantage +1, ratio above 1.2 -> clipped flat at 1.2
  // output 1: advantage -1, ratio above the band -> unclipped, gradient flows
  CHECK(value == doctest::Approx((1.2 * 1.0 + ratio * -1.0) / 2.0).epsilon(1e-12));
  CHECK(rs.min == doctest::Approx(ratio).epsilon(1e-12));
  CHECK(rs.max == doctest::Approx(ratio).epsilon(1e-12));

  std::vector<double> hand(pi.param_count(), 0.0);
  pi.accumulate_grad_logprob(p, group.cond, group.outputs[1], ratio * -1.0 / 2.0, hand);
  for (size_t j = 0; j < grad.size(); ++j)
    CHECK(grad[j] == doctest::Approx(hand[j]).epsilon(1e-12));

  // log-ratio far outside the clamp: value saturates, gradient is zero
  RolloutGroup far = group;
  far.old_logprobs[0] = far.outputs[0].logprob - 25.0;
  far.old_logprobs[1] = far.outputs[1].logprob + 25.0;
  std::vector<double> gfar(pi.param_count(), 0.0);
  const double vfar =
      surrogate_value_and_grad(pi, far, p, p, nullptr, SurrogateOptions{}, gfar);
  CHECK(vfar == doctest::Approx((std::exp(20.0) * 1.0 + std::exp(-20.0) * -1.0) / 2.0)
                    .epsilon(1e-12));
  for (double gv : gfar) CHECK(gv == 0.0);
}

TEST_CASE("optimizer follows the decoupled weight-decay recurrence") {
  // scalar oracle evaluated by hand alongside the call
  PolicyParams p;
  p.values = {0.5};
  p.blocks = {{"w", 0, 1}};
  OptimizerState st;

  double m = 0.0, v = 0.0, x = 0.5;
  const double lr = 0.1;
  for (int t = 1; t <= 3; ++t) {
    adamw_step(st, p, std::vector<double>{1.0}, lr);
    const double g = -1.0; // ascent gradient 1 becomes descent gradient -1
    x *= 1.0 - lr * st.weight_decay;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    x -= lr * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(p.values[0] == doctest::Approx(x).epsilon(1e-15));
    CHECK(st.step == t);
  }
  CHECK(p.values[0] > 0.5); // ascent on a positive gradient increases the param

  // step 1 magnitude: the bias-corrected ratio is 1, so the move is
  // lr/(1 + eps) up to the decay term
  PolicyParams q;
  q.values = {0.0};
  q.blocks = {{"w", 0, 1}};
  OptimizerState st2;
  adamw_step(st2, q, std::vector<double>{1.0}, lr);
  CHECK(q.values[0] == doctest::Approx(lr / (1.0 + 1e-8)).epsilon(1e-10));

  // zero gradient and zero decay is a fixed point
  PolicyParams r;
  r.values = {1.25, -0.5};
  r.blocks = {{"w", 0, 2}};
  OptimizerState st3;
  st3.weight_decay = 0.0;
  adamw_step(st3, r, std::vector<double>{0.0, 0.0}, lr);
  CHECK(r.values[0] == 1.25);
  CHECK(r.values[1] == -0.5);

  // identical inputs give bit-identical results
  PolicyParams a1, a2;
  a1.values = a2.values = {0.3, 0.7, -0.2};
  a1.blocks = a2.blocks = {{"w", 0, 3}};
  OptimizerState s1, s2;
  const std::vector<double> grads = {0.1, -0.4, 0.9};
  for (int t = 0; t < 5; ++t) {
    adamw_step(s1, a1, grads, lr);
    adamw_step(s2, a2, grads, lr);
  }
  CHECK(a1.values == a2.values);

  // non-finite gradients name the offending block
  PolicyParams b;
  b.values = {0.0, 0.0};
  b.blocks = {{"first", 0, 1}, {"second", 1, 1}};
  OptimizerState st4;
  try {
    adamw_step(st4, b, std::vector<double>{0.0, std::nan("")}, lr);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::nonfinite_gradient);
    CHECK(std::string(e.what()).find("second") != std::string::npos);
  }
}

TEST_CASE("stage config validation") {
  StageConfig ok;
  ok.validate();

  StageConfig bad_g = ok;
  bad_g.group_size = 1;
  CHECK_THROWS_AS(bad_g.validate(), Error);

  StageConfig bad_kl = ok;
  bad_kl.beta = 0.02; // kl_enabled still false
  CHECK_THROWS_AS(bad_kl.validate(), Error);

  StageConfig good_kl = ok;
  good_kl.beta = 0.02;
  good_kl.kl_enabled = true;
  good_kl.validate();

  StageConfig bad_lr = ok;
  bad_lr.learning_rate = 0.0;
  CHECK_THROWS_AS(bad_lr.validate(), Error);

  StageConfig bad_clip = ok;
  bad_clip.clip_epsilon = 1.5;
  CHECK_THROWS_AS(bad_clip.validate(), Error);
}

TEST_CASE("metrics rows carry the full schema") {
  StepMetrics m;
  m.step = 12;
  m.stage = "unified";
  m.task = "t2i";
  m.reward_mean = 0.5;
  m.reward_components = {{"cycle", 0.25}, {"tim", 0.75}};
  m.adv_abs_mean = 0.8;
  m.ratio_min = 0.9;
  m.ratio_max = 1.1;
  m.ratio_mean = 1.0;
  m.kl = 0.01;
  m.grad_norm = 2.5;
  m.lr = 1e-2;

  const std::string row = metrics_json(m);
  CHECK(metrics_json(m) == row); // stable serialization

  const auto j = nlohmann::json::parse(row);
  for (const char* key : {"step", "stage", "task", "reward_mean", "reward_components",
                          "adv_abs_mean", "ratio_min", "ratio_max", "ratio_mean", "kl",
                          "grad_norm", "lr"})
    CHECK(j.contains(key));
  CHECK(j["step"] == 12);
  CHECK(j["reward_components"]["cycle"] == 0.25);
}

TEST_CASE("train step is deterministic and worker-count independent") {
  World w = small_world();
  Policy pi(w, PolicyConfig{});
  StageConfig cfg;
  cfg.group_size = 4;
  cfg.batch_size = 3;

  const std::vector<TrainInput> batch = {gen_input(w, 1), qa_input(w, 2, Task::MCQ),
                                         qa_input(w, 3, Task::OE)};

  auto run = [&](int workers) {
    PolicyParams params = spiced(pi, 42, 3.0);
    const PolicyParams old_params = params;
    OptimizerState opt;
    const TrainStepResult res = train_step(pi, batch, params, old_params, nullptr, cfg,
                                           checksum_reward(), opt, Rng(99), workers);
    std::string rows;
    for (const auto& m : res.metrics) rows += metrics_json(m) + "\n";
    return std::make_pair(params.values, rows);
  };

  const auto [v1, rows1] = run(1);
  const auto [v4, rows4] = run(4);
  const auto [v7, rows7] = run(7);
  CHECK(v1 == v4);
  CHECK(v1 == v7);
  CHECK(rows1 == rows4);
  CHECK(rows1 == rows7);

  // one metrics row per task, in fixed task order
  const auto first = nlohmann::json::parse(rows1.substr(0, rows1.find('\n')));
  CHECK(first["task"] == "t2i");
  CHECK(std::count(rows1.begin(), rows1.end(), '\n') == 3);
}

TEST_CASE("constant rewards leave parameters unchanged without decay") {
  World w = small_world();
  Policy pi(w, PolicyConfig{});
  StageConfig cfg;
  cfg.group_size = 4;

  const std::vector<TrainInput> batch = {gen_input(w, 1), gen_input(w, 2)};
  PolicyParams params = spiced(pi, 8, 3.0);
  const PolicyParams before = params;
  OptimizerState opt;
  opt.weight_decay = 0.0;
  const RewardFn flat = [](const TrainInput&, const PolicyOutput&) {
    RewardBreakdown bd;
    bd.joint = 0.75;
    return bd;
  };
  const TrainStepResult res =
      train_step(pi, batch, params, before, nullptr, cfg, flat, opt, Rng(5), 1);
  CHECK(params.values == before.values);
  CHECK(res.grad_norm == 0.0);
  for (const auto& m : res.metrics) CHECK(m.adv_abs_mean == 0.0);
}

TEST_CASE("mixed-group mode standardizes across task pairs") {
  World w = small_world();
  Policy pi(w, PolicyConfig{});
  StageConfig cfg;
  cfg.group_size = 4;
  cfg.mixed_groups = true;

  const std::vector<TrainInput> batch = {gen_input(w, 1), qa_input(w, 1, Task::MCQ)};
  PolicyParams params = spiced(pi, 10, 3.0);
  const PolicyParams old_params = params;
  OptimizerState opt;
  const TrainStepResult res = train_step(pi, batch, params, old_params, nullptr, cfg,
                                         checksum_reward(), opt, Rng(31), 1);

  std::vector<double> pooled = res.groups[0].rewards;
  pooled.insert(pooled.end(), res.groups[1].rewards.begin(), res.groups[1].rewards.end());
  const auto want = advantage_oracle(pooled);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(res.groups[0].advantages[i] == want[i]);
    CHECK(res.groups[1].advantages[i] == want[i + 4]);
  }

  // default mode standardizes each group alone
  StageConfig per_task = cfg;
  per_task.mixed_groups = false;
  PolicyParams params2 = spiced(pi, 10, 3.0);
  OptimizerState opt2;
  const TrainStepResult sep = train_step(pi, batch, params2, old_params, nullptr, per_task,
                                         checksum_reward(), opt2, Rng(31), 1);
  for (const auto& group : sep.groups) {
    double mean = 0.0;
    for (double a : group.advantages) mean += a;
    CHECK(std::abs(mean) < 1e-9);
  }
}

TEST_CASE("train step agrees with a finite-difference oracle end to end") {
  World w(WorldConfig{1, 1, 1, 1, 4, 6});
  Policy pi(w, tiny_policy_config());
  StageConfig cfg;
  cfg.group_size = 2;
  cfg.beta = 0.02;
  cfg.kl_enabled = true;
  cfg.learning_rate = 1e-2;

  const PolicyParams old_params = spiced(pi, 1, 4.0);
  const PolicyParams ref = spiced(pi, 2, 4.0);
  const std::vector<TrainInput> batch = {gen_input(w, 1), qa_input(w, 2, Task::OE)};

  // materialize the same groups train_step would build
  std::vector<RolloutGroup> groups;
  for (size_t i = 0; i < batch.size(); ++i) {
    RolloutGroup g = rollout_group(pi, old_params, batch[i], cfg.group_size,
                                   Rng(55).fork("rollout", i));
    for (const auto& out : g.outputs) g.rewards.push_back(token_checksum(out));
    g.advantages = normalize_advantages(g.rewards);
    groups.push_back(std::move(g));
  }

  SurrogateOptions opt;
  opt.beta = cfg.beta;
  std::vector<double> analytic(pi.param_count(), 0.0);
  for (const auto& g : groups) {
    std::vector<double> part(pi.param_count(), 0.0);
    (void)surrogate_value_and_grad(pi, g, old_params, old_params, &ref, opt, part);
    for (size_t j = 0; j < analytic.size(); ++j)
      analytic[j] += part[j] / static_cast<double>(groups.size());
  }

  // full-vector central differences of the batched value
  std::vector<double> fd(pi.param_count(), 0.0);
  const double h = 1e-5;
  for (size_t j = 0; j < fd.size(); ++j) {
    PolicyParams up = old_params;
    up.values[j] += h;
    PolicyParams dn = old_params;
    dn.values[j] -= h;
    fd[j] = (batch_value(pi, groups, up, old_params, &ref, opt) -
             batch_value(pi, groups, dn, old_params, &ref, opt)) /
            (2 * h);
  }
  double worst = 0.0;
  for (size_t j = 0; j < fd.size(); ++j)
    worst = std::max(worst, std::abs(analytic[j] - fd[j]) /
                                std::max(std::abs(analytic[j]) + std::abs(fd[j]), 1e-3));
  CHECK(worst < 1e-5);

  // optimizer steps from either gradient land on the same parameters
  PolicyParams pa = old_params;
  OptimizerState sa;
  adamw_step(sa, pa, analytic, cfg.learning_rate);
  PolicyParams pf = old_params;
  OptimizerState sf;
  adamw_step(sf, pf, fd, cfg.learning_rate);
  double worst_param = 0.0;
  for (size_t j = 0; j < pa.values.size(); ++j)
    worst_param = std::max(worst_param, std::abs(pa.values[j] - pf.values[j]) /
                                            std::max(std::abs(pa.values[j]), 1e-6));
  CHECK(worst_param < 1e-6);
}

TEST_CASE("zero-advantage updates reduce divergence from the reference") {
  World w(WorldConfig{1, 1, 1, 1, 4, 6});
  Policy pi(w, tiny_policy_config());
  SurrogateOptions opt;
  opt.beta = 0.02;

  int decreased_at_smallest = 0;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    const PolicyParams theta = spiced(pi, seed, 4.0);
    const PolicyParams ref = spiced(pi, seed + 1000, 4.0);
    const TrainInput in = gen_input(w, seed);
    RolloutGroup group = rollout_group(pi, theta, in, 4, Rng(seed));
    group.rewards.assign(4, 0.5);
    group.advantages = normalize_advantages(group.rewards); // all zero

    std::vector<double> grad(pi.param_count(), 0.0);
    (void)surrogate_value_and_grad(pi, group, theta, theta, &ref, opt, grad);

    const double kl0 = pi.kl_to(theta, ref, group.cond, group.outputs);
    bool smallest_decreased = false;
    for (double lr : {3e-4, 3e-5}) {
      PolicyParams stepped = theta;
      OptimizerState st;
      st.weight_decay = 0.0;
      adamw_step(st, stepped, grad, lr);
      const double kl1 = pi.kl_to(stepped, ref, group.cond, group.outputs);
      if (lr == 3e-5) smallest_decreased = kl1 < kl0;
    }
    if (smallest_decreased) ++decreased_at_smallest;
  }
  CHECK(decreased_at_smallest == 100);
}
