#include "corl/policy.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "corl/errors.hpp"

namespace corl {

namespace {

constexpr int kClassSlots = kMaxShapes * kMaxColors; // fixed 16 regardless of world size
constexpr int kBands = 9;
constexpr int kPosEnc = 8;
constexpr int kCaptionFeat = 4 * kClassSlots + 2;
constexpr int kEvidenceSlots = 26; // digits 0-9, colors, bands, yes, no, none
constexpr int kQuestionFeat = 5 + 5 + 5 + kEvidenceSlots + 4 + 1;
constexpr int kPrefixFeat = 7;

int class_slot(int shape, int color) { return color * kMaxShapes + shape; }

int evidence_slot(const std::string& v) {
  if (!v.empty() && std::all_of(v.begin(), v.end(), [](char c) { return c >= '0' && c <= '9'; }))
    return std::min<int>(9, v.size() == 1 ? v[0] - '0' : 9);
  for (int c = 0; c < kMaxColors; ++c)
    if (v == World::color_name(c)) return 10 + c;
  if (auto b = World::band_id(v)) return 14 + *b;
  if (v == "yes") return 23;
  if (v == "no") return 24;
  if (v == "none") return 25;
  return -1;
}

void log_softmax(std::span<const double> logits, std::span<double> out) {
  double m = logits[0];
  for (double z : logits) m = std::max(m, z);
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) sum += std::exp(logits[i] - m);
  const double lse = m + std::log(sum);
  for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

// Step-dependent fixed features. Everything here is a pure function of
// (condition, emitted prefix, step); the learned pooled slots at the front of
// the input vector are handled by the policy itself.
struct Featurizer {
  const World& w;
  const Condition& cond;
  OutputKind kind;
  int max_text_len;

  bool caption_ok = false;
  std::array<double, kClassSlots> wanted_global{};
  std::array<std::array<double, kClassSlots>, kBands> wanted_band{};

  bool question_ok = false;
  std::array<double, 5> qkind{};
  std::array<double, 5> qshape{};
  std::array<double, 5> qcolor{};
  std::array<double, kEvidenceSlots> evidence{};
  std::array<double, 4> match_bits{};
  double n_choices = 0.0;

  // running state
  std::array<double, kClassSlots> placed_global{};
  std::array<std::array<double, kClassSlots>, kBands> placed_band{};
  std::array<int, kBands> cells_left{};
  std::array<int, 4> tag_counts{};
  int since_answer_open = 0;
  int step = 0;
  int prev_token = -1;

  Featurizer(const World& world, const Condition& c, OutputKind k, int mtl)
      : w(world), cond(c), kind(k), max_text_len(mtl) {
    if (auto parsed = w.parse_caption(cond.text)) {
      caption_ok = true;
      for (const auto& e : *parsed) {
        wanted_global[static_cast<size_t>(class_slot(e.shape, e.color))] += 0.25;
        wanted_band[static_cast<size_t>(e.band)][static_cast<size_t>(class_slot(e.shape, e.color))] +=
            0.25;
      }
    }
    if (auto q = w.parse_question(cond.text)) {
      question_ok = true;
      qkind[static_cast<size_t>(q->kind)] = 1.0;
      if (q->shape >= 0 && q->shape < kMaxShapes) {
        qshape[static_cast<size_t>(q->shape)] = 1.0;
        qshape[4] = 1.0;
      }
      if (q->color >= 0 && q->color < kMaxColors) {
        qcolor[static_cast<size_t>(q->color)] = 1.0;
        qcolor[4] = 1.0;
      }
      if (cond.image) {
        const std::string ans = w.derive_answer(*cond.image, *q);
        const int slot = evidence_slot(ans);
        if (slot >= 0) evidence[static_cast<size_t>(slot)] = 1.0;
        for (size_t k2 = 0; k2 < q->choices.size() && k2 < 4; ++k2)
          if (q->choices[k2] == ans) match_bits[k2] = 1.0;
      }
      n_choices = static_cast<double>(q->choices.size()) / 4.0;
    }
    if (kind == OutputKind::image) {
      for (int r = 0; r < w.config().grid_h; ++r)
        for (int c2 = 0; c2 < w.config().grid_w; ++c2)
          ++cells_left[static_cast<size_t>(w.band_of_cell(r, c2))];
    }
  }

  int total_steps_cap() const {
    return kind == OutputKind::image ? w.config().grid_h * w.config().grid_w : max_text_len;
  }

  void fill(std::span<double> x) const {
    std::fill(x.begin(), x.end(), 0.0);
    size_t off = 0;
    x[off + (kind == OutputKind::image ? 0 : 1)] = 1.0;
    off += 2;
    for (int i = 0; i < kPosEnc / 2; ++i) {
      const double omega = std::pow(1000.0, -static_cast<double>(i) / (kPosEnc / 2));
      x[off + static_cast<size_t>(2 * i)] = std::sin(step * omega);
      x[off + static_cast<size_t>(2 * i + 1)] = std::cos(step * omega);
    }
    off += kPosEnc;
    const int d = w.config().embed_dim;
    if (prev_token >= 0) {
      const auto& table = kind == OutputKind::image ? w.visual_table() : w.text_table();
      const auto row = table.row(static_cast<size_t>(prev_token));
      const size_t base = kind == OutputKind::image ? off : off + static_cast<size_t>(d);
      for (int j = 0; j < d; ++j) x[base + static_cast<size_t>(j)] = row[j];
    }
    off += 2 * static_cast<size_t>(d);

    // caption block
    for (int k2 = 0; k2 < kClassSlots; ++k2) {
      x[off + static_cast<size_t>(k2)] = wanted_global[static_cast<size_t>(k2)];
      x[off + kClassSlots + static_cast<size_t>(k2)] = placed_global[static_cast<size_t>(k2)];
    }
    if (kind == OutputKind::image && step < total_steps_cap()) {
      const int r = step / w.config().grid_w;
      const int c2 = step % w.config().grid_w;
      const int band = w.band_of_cell(r, c2);
      for (int k2 = 0; k2 < kClassSlots; ++k2) {
        x[off + 2 * kClassSlots + static_cast<size_t>(k2)] =
            wanted_band[static_cast<size_t>(band)][static_cast<size_t>(k2)];
        x[off + 3 * kClassSlots + static_cast<size_t>(k2)] =
            placed_band[static_cast<size_t>(band)][static_cast<size_t>(k2)];
      }
      x[off + 4 * kClassSlots] = cells_left[static_cast<size_t>(band)] / 36.0;
    }
    x[off + 4 * kClassSlots + 1] = static_cast<double>(total_steps_cap() - step) / 36.0;
    off += kCaptionFeat;

    // question block
    for (size_t i = 0; i < qkind.size(); ++i) x[off + i] = qkind[i];
    off += qkind.size();
    for (size_t i = 0; i < qshape.size(); ++i) x[off + i] = qshape[i];
    off += qshape.size();
    for (size_t i = 0; i < qcolor.size(); ++i) x[off + i] = qcolor[i];
    off += qcolor.size();
    for (size_t i = 0; i < evidence.size(); ++i) x[off + i] = evidence[i];
    off += evidence.size();
    for (size_t i = 0; i < match_bits.size(); ++i) x[off + i] = match_bits[i];
    off += match_bits.size();
    x[off++] = n_choices;

    // emitted-prefix block (text structure)
    for (size_t i = 0; i < tag_counts.size(); ++i) x[off + i] = tag_counts[i] / 4.0;
    const bool in_think = tag_counts[0] > tag_counts[1];
    const bool in_answer = tag_counts[2] > tag_counts[3];
    x[off + 4] = in_think ? 1.0 : 0.0;
    x[off + 5] = in_answer ? 1.0 : 0.0;
    x[off + 6] = in_answer ? since_answer_open / 8.0 : 0.0;
  }

  void advance(int token) {
    if (kind == OutputKind::image) {
      const int r = step / w.config().grid_w;
      const int c2 = step % w.config().grid_w;
      const int band = w.band_of_cell(r, c2);
      --cells_left[static_cast<size_t>(band)];
      int shape, color;
      if (w.decode_token(token, shape, color)) {
        placed_global[static_cast<size_t>(class_slot(shape, color))] += 0.25;
        placed_band[static_cast<size_t>(band)][static_cast<size_t>(class_slot(shape, color))] +=
            0.25;
      }
    } else {
      if (token >= tok::kThinkOpen && token <= tok::kAnswerClose)
        ++tag_counts[static_cast<size_t>(token - tok::kThinkOpen)];
      if (token == tok::kAnswerOpen)
        since_answer_open = 0;
      else if (tag_counts[2] > tag_counts[3])
        ++since_answer_open;
    }
    prev_token = token;
    ++step;
  }
};

} // namespace

std::span<double> PolicyParams::block(const std::string& name) {
  for (const auto& b : blocks)
    if (b.name == name) return {values.data() + b.offset, b.len};
  fail(Errc::bad_argument, "unknown parameter block: " + name);
}

std::span<const double> PolicyParams::block(const std::string& name) const {
  for (const auto& b : blocks)
    if (b.name == name) return {values.data() + b.offset, b.len};
  fail(Errc::bad_argument, "unknown parameter block: " + name);
}

bool PolicyParams::same_shape(const PolicyParams& other) const {
  if (values.size() != other.values.size() || blocks.size() != other.blocks.size()) return false;
  for (size_t i = 0; i < blocks.size(); ++i)
    if (blocks[i].name != other.blocks[i].name || blocks[i].offset != other.blocks[i].offset ||
        blocks[i].len != other.blocks[i].len)
      return false;
  return true;
}

bool PolicyParams::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

void PolicyConfig::validate() const {
  auto bad = [](const std::string& m) { fail(Errc::config_invalid, "policy: " + m); };
  if (hidden < 1 || hidden > 4096) bad("hidden must be in [1,4096]");
  if (cond_embed_dim < 1 || cond_embed_dim > 256) bad("cond_embed_dim must be in [1,256]");
  if (max_text_len < 1 || max_text_len > 256) bad("max_text_len must be in [1,256]");
  if (!(init_scale > 0.0) || init_scale > 1.0) bad("init_scale must be in (0,1]");
}

double kl_categorical(std::span<const double> logp, std::span<const double> logq) {
  if (logp.size() != logq.size()) fail(Errc::dim_mismatch, "kl_categorical: size mismatch");
  double kl = 0.0;
  for (size_t i = 0; i < logp.size(); ++i) kl += std::exp(logp[i]) * (logp[i] - logq[i]);
  return kl;
}

Policy::Policy(const World& world, const PolicyConfig& config) : world_(&world), cfg_(config) {
  cfg_.validate();
  feat_dim_ = 2 * cfg_.cond_embed_dim + 2 + kPosEnc + 2 * world.config().embed_dim + kCaptionFeat +
              kQuestionFeat + kPrefixFeat;
}

int Policy::head_vocab(OutputKind kind) const {
  return kind == OutputKind::image ? world_->visual_vocab() : text_vocab_size();
}

std::vector<ParamBlock> Policy::layout() const {
  const size_t e = static_cast<size_t>(cfg_.cond_embed_dim);
  const size_t h = static_cast<size_t>(cfg_.hidden);
  const size_t f = static_cast<size_t>(feat_dim_);
  const size_t vt = static_cast<size_t>(text_vocab_size());
  const size_t vi = static_cast<size_t>(world_->visual_vocab());
  std::vector<ParamBlock> out;
  size_t off = 0;
  auto add = [&](const char* name, size_t len) {
    out.push_back(ParamBlock{name, off, len});
    off += len;
  };
  add("cond_text_embed", vt * e);
  add("cond_image_embed", vi * e);
  add("trunk_w", h * f);
  add("trunk_b", h);
  add("image_head_w", vi * h);
  add("image_head_b", vi);
  add("text_head_w", vt * h);
  add("text_head_b", vt);
  return out;
}

size_t Policy::param_count() const {
  size_t n = 0;
  for (const auto& b : layout()) n += b.len;
  return n;
}

PolicyParams Policy::init_params(uint64_t seed) const {
  PolicyParams p;
  p.blocks = layout();
  p.values.assign(param_count(), 0.0);
  Rng base(seed);
  for (const auto& b : p.blocks) {
    if (b.name == "trunk_b" || b.name == "image_head_b" || b.name == "text_head_b")
      continue; // biases start at zero
    Rng r = base.fork(b.name);
    for (size_t i = 0; i < b.len; ++i) p.values[b.offset + i] = cfg_.init_scale * r.normal();
  }
  return p;
}

namespace {

// spans into one parameter vector, resolved once per call
struct ParamView {
  std::span<const double> cond_text, cond_image, trunk_w, trunk_b, head_w, head_b;
};

} // namespace

PolicyOutput Policy::run(const PolicyParams& params, const Condition& cond, OutputKind kind,
                         double temperature, Rng* rng, bool greedy,
                         const PolicyOutput* to_score) const {
  const int vocab = head_vocab(kind);
  const int h = cfg_.hidden;
  const int f = feat_dim_;
  const int e = cfg_.cond_embed_dim;
  ParamView pv{params.block("cond_text_embed"),
               params.block("cond_image_embed"),
               params.block("trunk_w"),
               params.block("trunk_b"),
               params.block(kind == OutputKind::image ? "image_head_w" : "text_head_w"),
               params.block(kind == OutputKind::image ? "image_head_b" : "text_head_b")};

  PolicyOutput out;
  out.kind = kind;
  out.sample_temperature = to_score ? to_score->sample_temperature : temperature;
  if (kind == OutputKind::image) {
    out.image.h = world_->config().grid_h;
    out.image.w = world_->config().grid_w;
    out.image.vocab = vocab;
  }

  // learned pooled condition slots, constant across steps
  std::vector<double> x(static_cast<size_t>(f), 0.0);
  if (!cond.text.tokens.empty()) {
    const double inv = 1.0 / static_cast<double>(cond.text.tokens.size());
    for (int t : cond.text.tokens) {
      if (t < 0 || t >= text_vocab_size()) fail(Errc::unknown_token, "condition text token");
      for (int j = 0; j < e; ++j)
        x[static_cast<size_t>(j)] += pv.cond_text[static_cast<size_t>(t * e + j)] * inv;
    }
  }
  if (cond.image) {
    if (cond.image->h != world_->config().grid_h || cond.image->w != world_->config().grid_w)
      fail(Errc::dim_mismatch, "condition image dims do not match world");
    const double inv = 1.0 / static_cast<double>(cond.image->tokens.size());
    for (int t : cond.image->tokens) {
      if (t < 0 || t >= world_->visual_vocab()) fail(Errc::unknown_token, "condition image token");
      for (int j = 0; j < e; ++j)
        x[static_cast<size_t>(e + j)] += pv.cond_image[static_cast<size_t>(t * e + j)] * inv;
    }
  }

  Featurizer feat(*world_, cond, kind, cfg_.max_text_len);
  const int max_steps = feat.total_steps_cap();

  // validate a trajectory being scored
  int score_len = 0;
  if (to_score) {
    if (to_score->kind != kind) fail(Errc::bad_argument, "score: output kind mismatch");
    if (kind == OutputKind::image) {
      if (static_cast<int>(to_score->image.tokens.size()) != max_steps)
        fail(Errc::shape_mismatch, "score: image token count != H*W");
      for (int t : to_score->image.tokens)
        if (t < 0 || t >= vocab) fail(Errc::unknown_token, "score: image token out of vocab");
      score_len = max_steps;
    } else {
      score_len = static_cast<int>(to_score->text.tokens.size());
      if (score_len > cfg_.max_text_len) fail(Errc::shape_mismatch, "score: text too long");
      for (int t : to_score->text.tokens) {
        if (t < 0 || t >= vocab) fail(Errc::unknown_token, "score: text token out of vocab");
        if (t == tok::kEos) fail(Errc::bad_argument, "score: content contains end token");
      }
    }
  }

  std::vector<double> z(static_cast<size_t>(h));
  std::vector<double> logits(static_cast<size_t>(vocab));
  std::vector<double> logp(static_cast<size_t>(vocab));
  std::vector<double> logp_sample;
  std::vector<int> text_tokens;
  double total = 0.0;

  for (int step = 0; step < max_steps; ++step) {
    feat.fill(std::span<double>(x).subspan(static_cast<size_t>(2 * e)));
    for (int i = 0; i < h; ++i) {
      double acc = pv.trunk_b[static_cast<size_t>(i)];
      const double* wrow = pv.trunk_w.data() + static_cast<size_t>(i) * f;
      for (int j = 0; j < f; ++j) acc += wrow[j] * x[static_cast<size_t>(j)];
      z[static_cast<size_t>(i)] = std::tanh(acc);
    }
    for (int v = 0; v < vocab; ++v) {
      double acc = pv.head_b[static_cast<size_t>(v)];
      const double* wrow = pv.head_w.data() + static_cast<size_t>(v) * h;
      for (int i = 0; i < h; ++i) acc += wrow[i] * z[static_cast<size_t>(i)];
      logits[static_cast<size_t>(v)] = acc;
    }
    log_softmax(logits, logp);

    int token;
    if (to_score) {
      if (kind == OutputKind::image)
        token = to_score->image.tokens[static_cast<size_t>(step)];
      else
        token = step < score_len ? to_score->text.tokens[static_cast<size_t>(step)] : tok::kEos;
    } else if (greedy) {
      token = 0;
      for (int v = 1; v < vocab; ++v)
        if (logits[static_cast<size_t>(v)] > logits[static_cast<size_t>(token)]) token = v;
    } else {
      if (temperature <= 0.0) fail(Errc::bad_argument, "sample: temperature must be positive");
      if (temperature == 1.0) {
        logp_sample = logp;
      } else {
        logp_sample.resize(static_cast<size_t>(vocab));
        for (int v = 0; v < vocab; ++v)
          logp_sample[static_cast<size_t>(v)] = logits[static_cast<size_t>(v)] / temperature;
        log_softmax(logp_sample, logp_sample);
      }
      const double u = rng->uniform();
      double cum = 0.0;
      token = vocab - 1;
      for (int v = 0; v < vocab; ++v) {
        cum += std::exp(logp_sample[static_cast<size_t>(v)]);
        if (u < cum) {
          token = v;
          break;
        }
      }
    }

    out.per_token_logprobs.push_back(logp[static_cast<size_t>(token)]);
    total += logp[static_cast<size_t>(token)];

    if (kind == OutputKind::image) {
      out.image.tokens.push_back(token);
      feat.advance(token);
    } else {
      if (token == tok::kEos) break; // end token consumes a step but is not content
      text_tokens.push_back(token);
      feat.advance(token);
    }
  }

  if (kind == OutputKind::text) out.text = make_text(std::move(text_tokens));
  out.logprob = total;
  return out;
}

void Policy::score(const PolicyParams& params, const Condition& cond, PolicyOutput& out) const {
  PolicyOutput scored = run(params, cond, out.kind, 1.0, nullptr, false, &out);
  out.logprob = scored.logprob;
  out.per_token_logprobs = std::move(scored.per_token_logprobs);
}

double Policy::logprob(const PolicyParams& params, const Condition& cond, PolicyOutput out) const {
  score(params, cond, out);
  return out.logprob;
}

PolicyOutput Policy::sample(const PolicyParams& params, const Condition& cond, OutputKind kind,
                            double temperature, Rng& rng) const {
  return run(params, cond, kind, temperature, &rng, false, nullptr);
}

PolicyOutput Policy::greedy(const PolicyParams& params, const Condition& cond,
                            OutputKind kind) const {
  return run(params, cond, kind, 1.0, nullptr, true, nullptr);
}

namespace {

// replayed forward pass with everything the backward pass needs
struct StepTrace {
  std::vector<double> x;    // feature vector
  std::vector<double> act;  // tanh activations
  std::vector<double> logp; // log-softmax over head vocab
  std::vector<double> prob; // exp(logp)
  int token = 0;
};

} // namespace

// Shared forward-with-trace + backward. mode 0: d logprob / d params.
// mode 1: d KL(p ‖ q) / d params_p, with q evaluated on the same trajectory.
// Returns total logprob (mode 0) or total KL (mode 1).
static double backprop_pass(const Policy& self, const PolicyParams& params,
                            const PolicyParams* q_params, const Condition& cond,
                            const PolicyOutput& out, double weight, std::span<double> grad,
                            std::span<const double> step_weights = {}) {
  const World& w = self.world();
  const PolicyConfig& cfg = self.config();
  const OutputKind kind = out.kind;
  const int vocab = kind == OutputKind::image ? w.visual_vocab() : text_vocab_size();
  const int h = cfg.hidden;
  const int f = self.feature_dim();
  const int e = cfg.cond_embed_dim;

  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != self.param_count())
    fail(Errc::shape_mismatch, "gradient buffer size mismatch");

  // First recompute the trajectory under `params` (also validates tokens).
  PolicyOutput scored = out;
  self.score(params, cond, scored);
  std::optional<PolicyOutput> q_scored;
  if (q_params) {
    q_scored = out;
    self.score(*q_params, cond, *q_scored);
  }

  // Replay the forward pass collecting traces. This duplicates score()'s
  // arithmetic; keeping the sampling path lean matters more than sharing.
  ParamView pv{params.block("cond_text_embed"),
               params.block("cond_image_embed"),
               params.block("trunk_w"),
               params.block("trunk_b"),
               params.block(kind == OutputKind::image ? "image_head_w" : "text_head_w"),
               params.block(kind == OutputKind::image ? "image_head_b" : "text_head_b")};
  ParamView qv;
  if (q_params)
    qv = ParamView{q_params->block("cond_text_embed"),
                   q_params->block("cond_image_embed"),
                   q_params->block("trunk_w"),
                   q_params->block("trunk_b"),
                   q_params->block(kind == OutputKind::image ? "image_head_w" : "text_head_w"),
                   q_params->block(kind == OutputKind::image ? "image_head_b" : "text_head_b")};

  auto pooled_slots = [&](const ParamView& view, std::vector<double>& x) {
    std::fill(x.begin(), x.begin() + 2 * e, 0.0);
    if (!cond.text.tokens.empty()) {
      const double inv = 1.0 / static_cast<double>(cond.text.tokens.size());
      for (int t : cond.text.tokens)
        for (int j = 0; j < e; ++j)
          x[static_cast<size_t>(j)] += view.cond_text[static_cast<size_t>(t * e + j)] * inv;
    }
    if (cond.image) {
      const double inv = 1.0 / static_cast<double>(cond.image->tokens.size());
      for (int t : cond.image->tokens)
        for (int j = 0; j < e; ++j)
          x[static_cast<size_t>(e + j)] += view.cond_image[static_cast<size_t>(t * e + j)] * inv;
    }
  };

  auto forward_head = [&](const ParamView& view, const std::vector<double>& x,
                          std::vector<double>& act, std::vector<double>& logp) {
    for (int i = 0; i < h; ++i) {
      double acc = view.trunk_b[static_cast<size_t>(i)];
      const double* wrow = view.trunk_w.data() + static_cast<size_t>(i) * f;
      for (int j = 0; j < f; ++j) acc += wrow[j] * x[static_cast<size_t>(j)];
      act[static_cast<size_t>(i)] = std::tanh(acc);
    }
    std::vector<double> logits(static_cast<size_t>(vocab));
    for (int v = 0; v < vocab; ++v) {
      double acc = view.head_b[static_cast<size_t>(v)];
      const double* wrow = view.head_w.data() + static_cast<size_t>(v) * h;
      for (int i = 0; i < h; ++i) acc += wrow[i] * act[static_cast<size_t>(i)];
      logits[static_cast<size_t>(v)] = acc;
    }
    log_softmax(logits, logp);
  };

  const int n_steps = scored.steps();
  if (!step_weights.empty() && step_weights.size() != static_cast<size_t>(n_steps))
    fail(Errc::shape_mismatch, "per-step weight count does not match step count");
  const int content_len =
      kind == OutputKind::image ? n_steps : static_cast<int>(out.text.tokens.size());

  std::vector<StepTrace> traces(static_cast<size_t>(n_steps));
  std::vector<std::vector<double>> q_logps;
  if (q_params) q_logps.resize(static_cast<size_t>(n_steps));

  {
    Featurizer feat(w, cond, kind, cfg.max_text_len);
    std::vector<double> x(static_cast<size_t>(f), 0.0);
    pooled_slots(pv, x);
    std::vector<double> qx;
    if (q_params) {
      qx.assign(static_cast<size_t>(f), 0.0);
      pooled_slots(qv, qx);
    }
    std::vector<double> qact(static_cast<size_t>(h));
    for (int step = 0; step < n_steps; ++step) {
      StepTrace& tr = traces[static_cast<size_t>(step)];
      feat.fill(std::span<double>(x).subspan(static_cast<size_t>(2 * e)));
      tr.x = x;
      tr.act.resize(static_cast<size_t>(h));
      tr.logp.resize(static_cast<size_t>(vocab));
      forward_head(pv, x, tr.act, tr.logp);
      tr.prob.resize(static_cast<size_t>(vocab));
      for (int v = 0; v < vocab; ++v)
        tr.prob[static_cast<size_t>(v)] = std::exp(tr.logp[static_cast<size_t>(v)]);
      if (q_params) {
        std::copy(x.begin() + 2 * e, x.end(), qx.begin() + 2 * e);
        q_logps[static_cast<size_t>(step)].resize(static_cast<size_t>(vocab));
        forward_head(qv, qx, qact, q_logps[static_cast<size_t>(step)]);
      }
      if (kind == OutputKind::image) {
        tr.token = out.image.tokens[static_cast<size_t>(step)];
        feat.advance(tr.token);
      } else if (step < content_len) {
        tr.token = out.text.tokens[static_cast<size_t>(step)];
        feat.advance(tr.token);
      } else {
        tr.token = tok::kEos;
      }
    }
  }

  // backward
  double total = 0.0;
  std::vector<double> dlogits(static_cast<size_t>(vocab));
  std::vector<double> dact(static_cast<size_t>(h));
  std::vector<double> dx(static_cast<size_t>(f));

  const auto& blocks = params.blocks;
  auto block_span = [&](const char* name) -> std::span<double> {
    for (const auto& b : blocks)
      if (b.name == name) return grad.subspan(b.offset, b.len);
    fail(Errc::bad_argument, std::string("unknown block ") + name);
  };
  std::span<double> g_cond_text, g_cond_image, g_trunk_w, g_trunk_b, g_head_w, g_head_b;
  if (want_grad) {
    g_cond_text = block_span("cond_text_embed");
    g_cond_image = block_span("cond_image_embed");
    g_trunk_w = block_span("trunk_w");
    g_trunk_b = block_span("trunk_b");
    g_head_w = block_span(kind == OutputKind::image ? "image_head_w" : "text_head_w");
    g_head_b = block_span(kind == OutputKind::image ? "image_head_b" : "text_head_b");
  }

  for (int step = 0; step < n_steps; ++step) {
    const StepTrace& tr = traces[static_cast<size_t>(step)];
    const double wstep =
        step_weights.empty() ? weight : step_weights[static_cast<size_t>(step)];
    if (!q_params) {
      // d logprob(token) / d logits = onehot - p
      total += tr.logp[static_cast<size_t>(tr.token)];
      if (!want_grad) continue;
      for (int v = 0; v < vocab; ++v) dlogits[static_cast<size_t>(v)] = -tr.prob[static_cast<size_t>(v)];
      dlogits[static_cast<size_t>(tr.token)] += 1.0;
    } else {
      const auto& qlp = q_logps[static_cast<size_t>(step)];
      const double kl = kl_categorical(tr.logp, qlp);
      total += kl;
      if (!want_grad) continue;
      // d KL / d logits_v = p_v ((log p_v - log q_v) - KL)
      for (int v = 0; v < vocab; ++v)
        dlogits[static_cast<size_t>(v)] =
            tr.prob[static_cast<size_t>(v)] *
            ((tr.logp[static_cast<size_t>(v)] - qlp[static_cast<size_t>(v)]) - kl);
    }
    if (wstep == 0.0) continue;

    for (int v = 0; v < vocab; ++v) {
      const double dv = wstep * dlogits[static_cast<size_t>(v)];
      if (dv == 0.0) continue;
      g_head_b[static_cast<size_t>(v)] += dv;
      double* wg = g_head_w.data() + static_cast<size_t>(v) * h;
      for (int i = 0; i < h; ++i) wg[i] += dv * tr.act[static_cast<size_t>(i)];
    }
    std::fill(dact.begin(), dact.end(), 0.0);
    const std::span<const double> head_w = pv.head_w;
    for (int v = 0; v < vocab; ++v) {
      const double dv = dlogits[static_cast<size_t>(v)];
      if (dv == 0.0) continue;
      const double* wrow = head_w.data() + static_cast<size_t>(v) * h;
      for (int i = 0; i < h; ++i) dact[static_cast<size_t>(i)] += dv * wrow[i];
    }
    // through tanh
    for (int i = 0; i < h; ++i) {
      const double a = tr.act[static_cast<size_t>(i)];
      dact[static_cast<size_t>(i)] *= 1.0 - a * a;
    }
    std::fill(dx.begin(), dx.end(), 0.0);
    for (int i = 0; i < h; ++i) {
      const double dz = dact[static_cast<size_t>(i)];
      if (dz == 0.0) continue;
      g_trunk_b[static_cast<size_t>(i)] += wstep * dz;
      double* wg = g_trunk_w.data() + static_cast<size_t>(i) * f;
      const double* wrow = pv.trunk_w.data() + static_cast<size_t>(i) * f;
      for (int j = 0; j < f; ++j) {
        wg[j] += wstep * dz * tr.x[static_cast<size_t>(j)];
        dx[static_cast<size_t>(j)] += dz * wrow[j];
      }
    }
    // learned pooled condition slots feed the embedding tables
    if (!cond.text.tokens.empty()) {
      const double inv = wstep / static_cast<double>(cond.text.tokens.size());
      for (int t : cond.text.tokens)
        for (int j = 0; j < e; ++j)
          g_cond_text[static_cast<size_t>(t * e + j)] += dx[static_cast<size_t>(j)] * inv;
    }
    if (cond.image) {
      const double inv = wstep / static_cast<double>(cond.image->tokens.size());
      for (int t : cond.image->tokens)
        for (int j = 0; j < e; ++j)
          g_cond_image[static_cast<size_t>(t * e + j)] += dx[static_cast<size_t>(e + j)] * inv;
    }
  }
  return total;
}

void Policy::accumulate_grad_logprob(const PolicyParams& params, const Condition& cond,
                                     const PolicyOutput& out, double weight,
                                     std::span<double> grad) const {
  if (grad.empty()) fail(Errc::bad_argument, "accumulate_grad_logprob: empty gradient buffer");
  backprop_pass(*this, params, nullptr, cond, out, weight, grad);
}

void Policy::accumulate_grad_logprob(const PolicyParams& params, const Condition& cond,
                                     const PolicyOutput& out,
                                     std::span<const double> step_weights,
                                     std::span<double> grad) const {
  if (grad.empty()) fail(Errc::bad_argument, "accumulate_grad_logprob: empty gradient buffer");
  backprop_pass(*this, params, nullptr, cond, out, 0.0, grad, step_weights);
}

double Policy::kl_to(const PolicyParams& params_p, const PolicyParams& params_q,
                     const Condition& cond, const std::vector<PolicyOutput>& prefixes) const {
  if (!params_p.same_shape(params_q)) fail(Errc::shape_mismatch, "kl_to: parameter shape mismatch");
  if (prefixes.empty()) fail(Errc::bad_argument, "kl_to: no prefixes");
  double total = 0.0;
  for (const auto& out : prefixes)
    total += backprop_pass(*this, params_p, &params_q, cond, out, 0.0, {});
  return total / static_cast<double>(prefixes.size());
}

double Policy::kl_with_grad(const PolicyParams& params_p, const PolicyParams& params_q,
                            const Condition& cond, const PolicyOutput& prefix, double weight,
                            std::span<double> grad) const {
  if (!params_p.same_shape(params_q))
    fail(Errc::shape_mismatch, "kl_with_grad: parameter shape mismatch");
  return backprop_pass(*this, params_p, &params_q, cond, prefix, weight, grad);
}

} // namespace corl
