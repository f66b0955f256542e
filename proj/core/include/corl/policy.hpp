#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "corl/rng.hpp"
#include "corl/world.hpp"

namespace corl {

// What an output is conditioned on. Generation conditions on a prompt only;
// understanding conditions on a question plus the image it is about.
struct Condition {
  TextSequence text;
  std::optional<TokenGrid> image;

  Condition() = default;
  Condition(TextSequence t) : text(std::move(t)) {} // NOLINT: prompt-only conditions convert
  Condition(TextSequence t, TokenGrid img) : text(std::move(t)), image(std::move(img)) {}
};

enum class OutputKind { image, text };

// One sampled or scored output. Text outputs hold content tokens only; an
// output shorter than max_text_len is end-token terminated and its final
// per-step log-prob is the end token's, so the token list alone fixes the
// probability factorization.
struct PolicyOutput {
  OutputKind kind = OutputKind::text;
  TokenGrid image;
  TextSequence text;
  double logprob = 0.0;
  std::vector<double> per_token_logprobs;
  double sample_temperature = 1.0;

  int steps() const {
    return static_cast<int>(per_token_logprobs.size());
  }
};

struct ParamBlock {
  std::string name;
  size_t offset = 0;
  size_t len = 0;
};

struct PolicyParams {
  std::vector<double> values;
  std::vector<ParamBlock> blocks; // in storage order, covering values exactly

  std::span<double> block(const std::string& name);
  std::span<const double> block(const std::string& name) const;
  bool same_shape(const PolicyParams& other) const;
  bool all_finite() const;
};

struct PolicyConfig {
  int hidden = 64;
  int cond_embed_dim = 8;
  int max_text_len = 32;
  double init_scale = 0.01;

  void validate() const; // throws Errc::config_invalid
};

// KL(p ‖ q) between two categorical distributions given as log-probabilities.
double kl_categorical(std::span<const double> logp, std::span<const double> logq);

// Shared-trunk two-head autoregressive policy over the world's token spaces.
//
// Each step's categorical distribution conditions on (condition, previously
// emitted tokens, step index) through a fixed feature vector plus two learned
// condition-embedding tables; a single tanh hidden layer feeds either the
// image head (grid tokens, exactly H*W steps) or the text head (closed text
// vocabulary, end-token semantics, at most max_text_len content tokens).
// The fixed features reuse the world's exact parsers, playing the role a
// pretrained backbone's comprehension plays at full scale; learning is left
// to discover output structure and content selection.
class Policy {
 public:
  Policy(const World& world, const PolicyConfig& config);

  const PolicyConfig& config() const { return cfg_; }
  const World& world() const { return *world_; }
  int feature_dim() const { return feat_dim_; }
  size_t param_count() const;
  std::vector<ParamBlock> layout() const;

  PolicyParams init_params(uint64_t seed) const;

  // Recomputes logprob/per_token_logprobs for out's tokens in place.
  void score(const PolicyParams& params, const Condition& cond, PolicyOutput& out) const;
  double logprob(const PolicyParams& params, const Condition& cond, PolicyOutput out) const;

  PolicyOutput sample(const PolicyParams& params, const Condition& cond, OutputKind kind,
                      double temperature, Rng& rng) const;
  PolicyOutput greedy(const PolicyParams& params, const Condition& cond, OutputKind kind) const;

  // d logprob(output) / d params, accumulated into grad (scaled by weight).
  // grad must have param_count() entries.
  void accumulate_grad_logprob(const PolicyParams& params, const Condition& cond,
                               const PolicyOutput& out, double weight,
                               std::span<double> grad) const;

  // Same, but with one weight per autoregressive step (token-level objectives).
  void accumulate_grad_logprob(const PolicyParams& params, const Condition& cond,
                               const PolicyOutput& out, std::span<const double> step_weights,
                               std::span<double> grad) const;

  // Exact per-step KL(p ‖ q) along each prefix trajectory, summed over steps,
  // averaged over prefixes.
  double kl_to(const PolicyParams& params_p, const PolicyParams& params_q, const Condition& cond,
               const std::vector<PolicyOutput>& prefixes) const;

  // Same value as kl_to for a single trajectory, also accumulating
  // d KL / d params_p (scaled by weight) into grad when grad is non-empty.
  double kl_with_grad(const PolicyParams& params_p, const PolicyParams& params_q,
                      const Condition& cond, const PolicyOutput& prefix, double weight,
                      std::span<double> grad) const;

 private:
  struct Workspace;
  int head_vocab(OutputKind kind) const;
  PolicyOutput run(const PolicyParams& params, const Condition& cond, OutputKind kind,
                   double temperature, Rng* rng, bool greedy,
                   const PolicyOutput* to_score) const;

  const World* world_;
  PolicyConfig cfg_;
  int feat_dim_ = 0;
};

} // namespace corl
