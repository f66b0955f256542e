#include "corl/rewards.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <map>
#include <tuple>

#include "corl/errors.hpp"

namespace corl {

const char* task_name(Task t) {
  switch (t) {
    case Task::T2I: return "t2i";
    case Task::MCQ: return "mcq";
    case Task::OE: return "oe";
  }
  return "?";
}

std::optional<Task> task_from_name(const std::string& name) {
  if (name == "t2i") return Task::T2I;
  if (name == "mcq") return Task::MCQ;
  if (name == "oe") return Task::OE;
  return std::nullopt;
}

void RewardConfig::validate(const WorldConfig& world) const {
  auto bad = [](const std::string& m) { fail(Errc::config_invalid, "rewards: " + m); };
  if (!(lambda >= 0.0 && lambda <= 1.0)) bad("lambda must be in [0,1]");
  if (patch_size < 1) bad("patch_size must be positive");
  if (world.grid_h % patch_size != 0 || world.grid_w % patch_size != 0)
    bad("patch_size must divide both grid dimensions");
}

namespace {

// Cosine with exact-case shortcuts so that bitwise-identical vectors score
// exactly 1 and bitwise-negated vectors exactly -1 regardless of rounding.
// `fallback` is returned when either vector has zero norm.
double cosine_or(std::span<const double> a, std::span<const double> b, double fallback) {
  bool same = true, negated = true;
  for (size_t i = 0; i < a.size(); ++i) {
    same = same && a[i] == b[i];
    negated = negated && a[i] == -b[i];
  }
  double na = 0.0, nb = 0.0, dot = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    na += a[i] * a[i];
    nb += b[i] * b[i];
    dot += a[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return fallback;
  if (same) return 1.0;
  if (negated) return -1.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

std::string_view trim(std::string_view s) {
  const char* ws = " \t\r\n";
  const auto first = s.find_first_not_of(ws);
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(ws);
  return s.substr(first, last - first + 1);
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool parse_number(std::string_view s, double& out) {
  if (s.empty()) return false;
  const std::string buf(s);
  char* end = nullptr;
  out = std::strtod(buf.c_str(), &end);
  return end == buf.c_str() + buf.size() && std::isfinite(out);
}

constexpr std::string_view kThinkOpen = "<think>";
constexpr std::string_view kThinkClose = "</think>";
constexpr std::string_view kAnswerOpen = "<answer>";
constexpr std::string_view kAnswerClose = "</answer>";

bool contains_tag(std::string_view s) {
  for (std::string_view tag : {kThinkOpen, kThinkClose, kAnswerOpen, kAnswerClose})
    if (s.find(tag) != std::string_view::npos) return true;
  return false;
}

} // namespace

double patch_embedding_distance(const EmbeddingMatrix& a, const EmbeddingMatrix& b, int h, int w,
                                int patch_size) {
  if (a.dim != b.dim || a.rows != b.rows)
    fail(Errc::shape_mismatch, "patch_embedding_distance: matrix shapes differ");
  if (a.rows != static_cast<size_t>(h) * static_cast<size_t>(w))
    fail(Errc::shape_mismatch, "patch_embedding_distance: rows do not cover the grid");
  const int p = patch_size;
  if (p < 1 || h % p != 0 || w % p != 0)
    fail(Errc::bad_argument, "patch_embedding_distance: patch_size must divide grid dims");
  const int d = a.dim;
  const int ph = h / p, pw = w / p;

  std::vector<double> va(static_cast<size_t>(d)), vb(static_cast<size_t>(d));
  double total = 0.0;
  for (int br = 0; br < ph; ++br) {
    for (int bc = 0; bc < pw; ++bc) {
      std::fill(va.begin(), va.end(), 0.0);
      std::fill(vb.begin(), vb.end(), 0.0);
      for (int r = br * p; r < (br + 1) * p; ++r) {
        for (int c = bc * p; c < (bc + 1) * p; ++c) {
          const size_t cell = static_cast<size_t>(r) * w + c;
          const auto ra = a.row(cell);
          const auto rb = b.row(cell);
          for (int j = 0; j < d; ++j) {
            va[static_cast<size_t>(j)] += ra[j];
            vb[static_cast<size_t>(j)] += rb[j];
          }
        }
      }
      const double n = 1.0 / (p * p);
      for (int j = 0; j < d; ++j) {
        va[static_cast<size_t>(j)] *= n;
        vb[static_cast<size_t>(j)] *= n;
      }
      // zero-norm pooled patches that are not bitwise equal read as neutral
      total += (1.0 - cosine_or(va, vb, 0.0)) / 2.0;
    }
  }
  return total / (ph * pw);
}

double perceptual_distance(const World& w, const TokenGrid& real, const TokenGrid& gen,
                           const RewardConfig& cfg) {
  if (real.h != gen.h || real.w != gen.w)
    fail(Errc::dim_mismatch, "perceptual_distance: grid dims differ");
  if (real.h != w.config().grid_h || real.w != w.config().grid_w)
    fail(Errc::dim_mismatch, "perceptual_distance: grid dims do not match world");

  if (cfg.perceptual == PerceptualMetric::hamming) {
    int diff = 0;
    for (size_t i = 0; i < real.tokens.size(); ++i)
      if (real.tokens[i] != gen.tokens[i]) ++diff;
    return static_cast<double>(diff) / static_cast<double>(real.tokens.size());
  }
  return patch_embedding_distance(w.embed(real), w.embed(gen), real.h, real.w, cfg.patch_size);
}

double textual_consistency(const World& w, const TextSequence& prompt, const TextSequence& recap) {
  using Tuple = std::tuple<int, int, int>; // color, shape, band or -1
  auto tuples = [&](const TextSequence& t) {
    std::map<Tuple, int> counts;
    const auto parsed = w.parse_caption(t);
    if (parsed) {
      for (const auto& e : *parsed) {
        ++counts[{e.color, e.shape, -1}];
        ++counts[{e.color, e.shape, e.band}];
      }
    }
    return counts;
  };
  const auto a = tuples(prompt);
  const auto b = tuples(recap);
  size_t na = 0, nb = 0, overlap = 0;
  for (const auto& [k, v] : a) na += static_cast<size_t>(v);
  for (const auto& [k, v] : b) nb += static_cast<size_t>(v);
  if (na == 0 && nb == 0) return 1.0;
  for (const auto& [k, v] : a) {
    auto it = b.find(k);
    if (it != b.end()) overlap += static_cast<size_t>(std::min(v, it->second));
  }
  return 2.0 * static_cast<double>(overlap) / static_cast<double>(na + nb);
}

ScaledReward cycle_reward(const World& w, const TokenGrid& real, const TokenGrid& gen,
                          const TextSequence& prompt, const RewardConfig& cfg) {
  const double pd = perceptual_distance(w, real, gen, cfg);
  const double tc = textual_consistency(w, prompt, w.recaption(gen));
  ScaledReward r;
  r.raw = (1.0 - pd) + tc;
  r.normalized = r.raw / 2.0;
  return r;
}

ScaledReward tim_reward(const EmbeddingMatrix& text, const EmbeddingMatrix& image) {
  if (text.dim != image.dim) fail(Errc::dim_mismatch, "tim_reward: embedding dims differ");
  if (text.rows == 0 || image.rows == 0)
    fail(Errc::bad_argument, "tim_reward: empty embedding matrix");
  for (const auto* m : {&text, &image})
    for (size_t i = 0; i < m->rows; ++i) {
      double n = 0.0;
      for (double x : m->row(i)) n += x * x;
      if (n == 0.0) fail(Errc::bad_argument, "tim_reward: zero-norm embedding row");
    }

  auto directional = [](const EmbeddingMatrix& from, const EmbeddingMatrix& to) {
    double sum = 0.0;
    for (size_t i = 0; i < from.rows; ++i) {
      double best = -1.0;
      for (size_t j = 0; j < to.rows; ++j)
        best = std::max(best, cosine_or(from.row(i), to.row(j), 0.0));
      sum += best;
    }
    return sum / static_cast<double>(from.rows);
  };

  ScaledReward r;
  r.raw = 0.5 * (directional(image, text) + directional(text, image));
  r.normalized = (r.raw + 1.0) / 2.0;
  return r;
}

double clip_style_reward(const EmbeddingMatrix& text, const EmbeddingMatrix& image) {
  if (text.dim != image.dim) fail(Errc::dim_mismatch, "clip_style_reward: embedding dims differ");
  if (text.rows == 0 || image.rows == 0)
    fail(Errc::bad_argument, "clip_style_reward: empty embedding matrix");
  const int d = text.dim;
  std::vector<double> pt(static_cast<size_t>(d), 0.0), pi(static_cast<size_t>(d), 0.0);
  for (size_t i = 0; i < text.rows; ++i) {
    const auto row = text.row(i);
    for (int j = 0; j < d; ++j) pt[static_cast<size_t>(j)] += row[j];
  }
  for (size_t i = 0; i < image.rows; ++i) {
    const auto row = image.row(i);
    for (int j = 0; j < d; ++j) pi[static_cast<size_t>(j)] += row[j];
  }
  for (int j = 0; j < d; ++j) {
    pt[static_cast<size_t>(j)] /= static_cast<double>(text.rows);
    pi[static_cast<size_t>(j)] /= static_cast<double>(image.rows);
  }
  // cosine_or maps a zero pooled vector to 0, i.e. the neutral reward 0.5
  return (cosine_or(pt, pi, 0.0) + 1.0) / 2.0;
}

std::optional<std::string> parse_answer(const std::string& text) {
  const auto close = text.rfind(kAnswerClose);
  if (close == std::string::npos) return std::nullopt;
  const auto open = text.rfind(kAnswerOpen, close);
  if (open == std::string::npos) return std::nullopt;
  const auto begin = open + kAnswerOpen.size();
  if (begin > close) return std::nullopt; // overlapping tags
  return std::string(trim(std::string_view(text).substr(begin, close - begin)));
}

double accuracy_reward(const std::string& text, const std::string& gold, QType qtype) {
  const auto parsed = parse_answer(text);
  if (!parsed || parsed->empty() || gold.empty()) return 0.0;
  if (qtype == QType::MCQ) {
    const char got = static_cast<char>(std::toupper(static_cast<unsigned char>((*parsed)[0])));
    return got == gold[0] ? 1.0 : 0.0;
  }
  const std::string a = lower(trim(*parsed));
  const std::string b = lower(trim(gold));
  if (a == b) return 1.0;
  double x, y;
  if (parse_number(a, x) && parse_number(b, y))
    return std::abs(x - y) <= 1e-6 * std::max(std::abs(x), std::abs(y)) ? 1.0 : 0.0;
  return 0.0;
}

double format_reward(const std::string& text) {
  std::string_view s(text);
  auto eat_ws = [&] {
    const auto n = s.find_first_not_of(" \t\r\n");
    s.remove_prefix(n == std::string_view::npos ? s.size() : n);
  };
  auto eat_block = [&](std::string_view open, std::string_view close, std::string_view& body) {
    if (s.substr(0, open.size()) != open) return false;
    s.remove_prefix(open.size());
    const auto end = s.find(close);
    if (end == std::string_view::npos) return false;
    body = s.substr(0, end);
    s.remove_prefix(end + close.size());
    return true;
  };
  std::string_view think, answer;
  eat_ws();
  if (!eat_block(kThinkOpen, kThinkClose, think)) return 0.0;
  eat_ws();
  if (!eat_block(kAnswerOpen, kAnswerClose, answer)) return 0.0;
  eat_ws();
  if (!s.empty()) return 0.0;
  if (contains_tag(think) || contains_tag(answer)) return 0.0;
  return 1.0;
}

namespace {

double require_component(const std::optional<double>& v, const char* name) {
  if (!v) fail(Errc::task_mismatch, std::string("reward component missing: ") + name);
  return *v;
}

} // namespace

double joint_reward(const RewardBreakdown& b, double lambda) {
  return require_component(b.cycle, "cycle") + require_component(b.tim, "tim") +
         lambda * (require_component(b.acc, "acc") + require_component(b.format, "format"));
}

double stage2_reward(Task task, const RewardBreakdown& b) {
  switch (task) {
    case Task::T2I:
      return require_component(b.cycle, "cycle") + require_component(b.tim, "tim");
    case Task::MCQ:
    case Task::OE:
      return require_component(b.acc, "acc") + require_component(b.format, "format");
  }
  fail(Errc::bad_argument, "stage2_reward: unknown task");
}

} // namespace corl
