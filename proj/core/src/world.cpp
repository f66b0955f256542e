#include "corl/world.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <tuple>
#include <unordered_map>

#include "corl/errors.hpp"
#include "corl/hashing.hpp"

namespace corl {

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

namespace {

// Frozen vocabulary. Appending is safe lexically but changes vocab size and
// therefore every policy shape and world hash; never reorder.
const std::vector<std::string>& vocab_list() {
  static const std::vector<std::string> v = {
      "<eos>", "<think>", "</think>", "<answer>", "</answer>",
      "a", "nothing", "at", "and", ";",
      "red", "green", "blue", "yellow",
      "square", "circle", "triangle", "cross",
      "squares", "circles", "triangles", "crosses",
      "top-left", "top", "top-right", "left", "center", "right",
      "bottom-left", "bottom", "bottom-right",
      "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
      "how", "many", "what", "color", "is", "the", "where", "there", "are",
      "yes", "no", "?",
      "A", "B", "C", "D",
  };
  return v;
}

constexpr int kColorBase = 10;
constexpr int kShapeSingularBase = 14;
constexpr int kShapePluralBase = 18;
constexpr int kBandBase = 22;
constexpr int kDigitBase = 31;
constexpr int kHow = 41, kMany = 42, kWhat = 43, kColorWord = 44, kIs = 45,
              kThe = 46, kWhere = 47, kThere = 48, kAre = 49, kYes = 50,
              kNo = 51, kQmark = 52;
constexpr int kLabelBase = 53;
constexpr int kMaxChoices = 4;

const std::unordered_map<std::string, int>& vocab_map() {
  static const std::unordered_map<std::string, int> m = [] {
    std::unordered_map<std::string, int> mm;
    const auto& v = vocab_list();
    for (size_t i = 0; i < v.size(); ++i) mm.emplace(v[i], static_cast<int>(i));
    return mm;
  }();
  return m;
}

bool is_digit_token(int id) { return id >= kDigitBase && id < kDigitBase + 10; }
int digit_value(int id) { return id - kDigitBase; }

} // namespace

int text_vocab_size() { return static_cast<int>(vocab_list().size()); }

const std::string& token_name(int id) {
  const auto& v = vocab_list();
  if (id < 0 || id >= static_cast<int>(v.size()))
    fail(Errc::unknown_token, "text token id out of range: " + std::to_string(id));
  return v[static_cast<size_t>(id)];
}

std::optional<int> token_id(const std::string& word) {
  const auto& m = vocab_map();
  auto it = m.find(word);
  if (it == m.end()) return std::nullopt;
  return it->second;
}

std::string render_tokens(const std::vector<int>& tokens) {
  std::string s;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += token_name(tokens[i]);
  }
  return s;
}

TextSequence make_text(std::vector<int> tokens) {
  TextSequence t;
  t.rendered = render_tokens(tokens);
  t.tokens = std::move(tokens);
  return t;
}

std::optional<TextSequence> tokenize_text(const std::string& s) {
  std::vector<int> toks;
  std::istringstream in(s);
  std::string w;
  while (in >> w) {
    auto id = token_id(w);
    if (!id) return std::nullopt;
    toks.push_back(*id);
  }
  return make_text(std::move(toks));
}

// ---------------------------------------------------------------------------
// WorldConfig
// ---------------------------------------------------------------------------

void WorldConfig::validate() const {
  auto bad = [](const std::string& m) { fail(Errc::config_invalid, "world: " + m); };
  if (grid_h < 1 || grid_h > 64) bad("grid_h must be in [1,64]");
  if (grid_w < 1 || grid_w > 64) bad("grid_w must be in [1,64]");
  if (n_shapes < 1 || n_shapes > kMaxShapes) bad("n_shapes must be in [1,4]");
  if (n_colors < 1 || n_colors > kMaxColors) bad("n_colors must be in [1,4]");
  if (embed_dim < 2 || embed_dim > 256) bad("embed_dim must be in [2,256]");
}

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

namespace {

EmbeddingMatrix draw_table(Rng rng, size_t rows, int dim) {
  EmbeddingMatrix m;
  m.rows = rows;
  m.dim = dim;
  m.values.resize(rows * static_cast<size_t>(dim));
  for (size_t r = 0; r < rows; ++r) {
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (int j = 0; j < dim; ++j) {
        const double x = rng.normal();
        m.values[r * dim + j] = x;
        norm2 += x * x;
      }
    } while (norm2 < 1e-24);
    const double inv = 1.0 / std::sqrt(norm2);
    for (int j = 0; j < dim; ++j) m.values[r * dim + j] *= inv;
  }
  return m;
}

} // namespace

World::World(const WorldConfig& config) : cfg_(config) {
  cfg_.validate();
  Rng base(cfg_.seed);
  text_table_ = draw_table(base.fork("text_table"), static_cast<size_t>(text_vocab_size()),
                           cfg_.embed_dim);
  visual_table_ = draw_table(base.fork("visual_table"), static_cast<size_t>(visual_vocab()),
                             cfg_.embed_dim);
  HashStream hs;
  hs.str("corl-world-v1");
  hs.i64(cfg_.grid_h);
  hs.i64(cfg_.grid_w);
  hs.i64(cfg_.n_shapes);
  hs.i64(cfg_.n_colors);
  hs.i64(cfg_.embed_dim);
  hs.u64(cfg_.seed);
  hs.f64s(text_table_.values);
  hs.f64s(visual_table_.values);
  hash_ = hs.h;
}

bool World::decode_token(int token, int& shape, int& color) const {
  if (token <= 0 || token >= visual_vocab()) return false;
  shape = (token - 1) % cfg_.n_shapes;
  color = (token - 1) / cfg_.n_shapes;
  return true;
}

int World::band_of_cell(int row, int col) const {
  const int br = std::min(row * 3 / cfg_.grid_h, 2);
  const int bc = std::min(col * 3 / cfg_.grid_w, 2);
  return br * 3 + bc;
}

const std::string& World::band_name(int band) {
  return token_name(kBandBase + band);
}

std::optional<int> World::band_id(const std::string& name) {
  auto id = token_id(name);
  if (!id || *id < kBandBase || *id >= kBandBase + 9) return std::nullopt;
  return *id - kBandBase;
}

const std::string& World::shape_name(int shape, bool plural) {
  return token_name((plural ? kShapePluralBase : kShapeSingularBase) + shape);
}

const std::string& World::color_name(int color) {
  return token_name(kColorBase + color);
}

Scene World::generate_scene(uint64_t seed, int difficulty) const {
  if (difficulty < 0 || difficulty > 3)
    fail(Errc::bad_argument, "difficulty must be in [0,3]");
  Rng rng = Rng(seed).fork("scene");
  int n = 1;
  for (int level = 0; level < difficulty; ++level)
    n += 1 + static_cast<int>(rng.uniform_int(2));
  const int cells = cfg_.grid_h * cfg_.grid_w;
  n = std::min(n, cells);

  Scene s;
  s.grid_h = cfg_.grid_h;
  s.grid_w = cfg_.grid_w;
  s.seed = seed;
  std::vector<char> used(static_cast<size_t>(cells), 0);
  for (int i = 0; i < n; ++i) {
    Entity e;
    e.shape = static_cast<int>(rng.uniform_int(cfg_.n_shapes));
    e.color = static_cast<int>(rng.uniform_int(cfg_.n_colors));
    int cell;
    do {
      cell = static_cast<int>(rng.uniform_int(cells));
    } while (used[static_cast<size_t>(cell)]);
    used[static_cast<size_t>(cell)] = 1;
    e.row = cell / cfg_.grid_w;
    e.col = cell % cfg_.grid_w;
    s.entities.push_back(e);
  }
  return s;
}

TokenGrid World::render_scene(const Scene& scene) const {
  if (scene.grid_h != cfg_.grid_h || scene.grid_w != cfg_.grid_w)
    fail(Errc::dim_mismatch, "scene dims do not match world config");
  TokenGrid g;
  g.h = cfg_.grid_h;
  g.w = cfg_.grid_w;
  g.vocab = visual_vocab();
  g.tokens.assign(static_cast<size_t>(g.h) * g.w, background_token());
  for (const auto& e : scene.entities) g.at(e.row, e.col) = encode_token(e.shape, e.color);
  return g;
}

std::vector<Entity> World::decode_grid(const TokenGrid& grid) const {
  if (grid.h != cfg_.grid_h || grid.w != cfg_.grid_w)
    fail(Errc::dim_mismatch, "grid dims do not match world config");
  std::vector<Entity> out;
  for (int r = 0; r < grid.h; ++r) {
    for (int c = 0; c < grid.w; ++c) {
      int shape, color;
      if (decode_token(grid.at(r, c), shape, color))
        out.push_back(Entity{shape, color, r, c});
    }
  }
  return out;
}

TextSequence World::caption_of_entities(std::vector<Entity> entities) const {
  std::vector<int> toks;
  if (entities.empty()) {
    toks.push_back(*token_id("nothing"));
    return make_text(std::move(toks));
  }
  std::sort(entities.begin(), entities.end(), [](const Entity& a, const Entity& b) {
    return std::tie(a.color, a.shape, a.row, a.col) < std::tie(b.color, b.shape, b.row, b.col);
  });
  size_t i = 0;
  bool first_group = true;
  while (i < entities.size()) {
    size_t j = i;
    while (j < entities.size() && entities[j].color == entities[i].color &&
           entities[j].shape == entities[i].shape)
      ++j;
    const int count = static_cast<int>(j - i);
    if (!first_group) toks.push_back(*token_id(";"));
    first_group = false;
    if (count == 1) {
      toks.push_back(*token_id("a"));
    } else {
      for (char d : std::to_string(count)) toks.push_back(kDigitBase + (d - '0'));
    }
    toks.push_back(kColorBase + entities[i].color);
    toks.push_back((count == 1 ? kShapeSingularBase : kShapePluralBase) + entities[i].shape);
    toks.push_back(*token_id("at"));
    for (size_t k = i; k < j; ++k) {
      if (k > i) toks.push_back(*token_id("and"));
      toks.push_back(kBandBase + band_of_cell(entities[k].row, entities[k].col));
    }
    i = j;
  }
  return make_text(std::move(toks));
}

TextSequence World::describe_scene(const Scene& scene) const {
  if (scene.grid_h != cfg_.grid_h || scene.grid_w != cfg_.grid_w)
    fail(Errc::dim_mismatch, "scene dims do not match world config");
  return caption_of_entities(scene.entities);
}

TextSequence World::recaption(const TokenGrid& grid) const {
  return caption_of_entities(decode_grid(grid));
}

std::optional<std::vector<CaptionEntity>> World::parse_caption(const TextSequence& caption) const {
  const auto& t = caption.tokens;
  if (t.empty()) return std::nullopt;
  if (t.size() == 1 && t[0] == *token_id("nothing")) return std::vector<CaptionEntity>{};

  std::vector<CaptionEntity> out;
  size_t i = 0;
  const int tok_a = *token_id("a");
  const int tok_at = *token_id("at");
  const int tok_and = *token_id("and");
  const int tok_sep = *token_id(";");
  for (;;) {
    // count
    int count;
    if (i < t.size() && t[i] == tok_a) {
      count = 1;
      ++i;
    } else {
      if (i >= t.size() || !is_digit_token(t[i])) return std::nullopt;
      if (digit_value(t[i]) == 0) return std::nullopt; // no leading zeros
      long v = 0;
      while (i < t.size() && is_digit_token(t[i])) {
        v = v * 10 + digit_value(t[i]);
        if (v > 4096) return std::nullopt;
        ++i;
      }
      if (v < 2) return std::nullopt; // canonical captions use "a" for one
      count = static_cast<int>(v);
    }
    // color
    if (i >= t.size() || t[i] < kColorBase || t[i] >= kColorBase + cfg_.n_colors)
      return std::nullopt;
    const int color = t[i++] - kColorBase;
    // shape, number agreement enforced
    const int shape_base = count == 1 ? kShapeSingularBase : kShapePluralBase;
    if (i >= t.size() || t[i] < shape_base || t[i] >= shape_base + cfg_.n_shapes)
      return std::nullopt;
    const int shape = t[i++] - shape_base;
    // "at" plus count positions separated by "and"
    if (i >= t.size() || t[i] != tok_at) return std::nullopt;
    ++i;
    for (int k = 0; k < count; ++k) {
      if (k > 0) {
        if (i >= t.size() || t[i] != tok_and) return std::nullopt;
        ++i;
      }
      if (i >= t.size() || t[i] < kBandBase || t[i] >= kBandBase + 9) return std::nullopt;
      out.push_back(CaptionEntity{color, shape, t[i] - kBandBase});
      ++i;
    }
    if (i == t.size()) break;
    if (t[i] != tok_sep) return std::nullopt;
    ++i;
  }
  return out;
}

std::optional<QuestionParse> World::parse_question(const TextSequence& question) const {
  const auto& t = question.tokens;
  size_t i = 0;
  auto eat = [&](int id) {
    if (i < t.size() && t[i] == id) {
      ++i;
      return true;
    }
    return false;
  };
  auto color_at = [&]() -> int {
    if (i < t.size() && t[i] >= kColorBase && t[i] < kColorBase + cfg_.n_colors)
      return t[i++] - kColorBase;
    return -1;
  };
  auto shape_at = [&](bool plural) -> int {
    const int base = plural ? kShapePluralBase : kShapeSingularBase;
    if (i < t.size() && t[i] >= base && t[i] < base + cfg_.n_shapes) return t[i++] - base;
    return -1;
  };

  QuestionParse q;
  if (eat(kHow)) {
    if (!eat(kMany)) return std::nullopt;
    q.color = color_at(); // optional
    q.shape = shape_at(true);
    if (q.shape < 0) return std::nullopt;
    if (!eat(kAre) || !eat(kThere)) return std::nullopt;
    q.kind = q.color >= 0 ? QKind::CountClass : QKind::CountShape;
  } else if (eat(kWhat)) {
    if (!eat(kColorWord) || !eat(kIs) || !eat(kThe)) return std::nullopt;
    q.shape = shape_at(false);
    if (q.shape < 0) return std::nullopt;
    q.kind = QKind::ColorOf;
  } else if (eat(kWhere)) {
    if (!eat(kIs) || !eat(kThe)) return std::nullopt;
    q.color = color_at();
    if (q.color < 0) return std::nullopt;
    q.shape = shape_at(false);
    if (q.shape < 0) return std::nullopt;
    q.kind = QKind::Where;
  } else if (eat(kIs)) {
    if (!eat(kThere) || !eat(*token_id("a"))) return std::nullopt;
    q.color = color_at();
    if (q.color < 0) return std::nullopt;
    q.shape = shape_at(false);
    if (q.shape < 0) return std::nullopt;
    q.kind = QKind::Exists;
  } else {
    return std::nullopt;
  }
  if (!eat(kQmark)) return std::nullopt;
  // optional MCQ choice list: A v B v ...
  int label = 0;
  while (i < t.size()) {
    if (t[i] != kLabelBase + label) return std::nullopt;
    ++i;
    if (i >= t.size()) return std::nullopt;
    q.choices.push_back(token_name(t[i]));
    ++i;
    ++label;
    if (label > kMaxChoices) return std::nullopt;
  }
  if (!q.choices.empty() && q.choices.size() < 2) return std::nullopt;
  return q;
}

std::string World::answer_for(const std::vector<Entity>& entities, const QuestionParse& q) const {
  auto matches = [&](const Entity& e) {
    if (q.shape >= 0 && e.shape != q.shape) return false;
    if (q.color >= 0 && e.color != q.color) return false;
    return true;
  };
  switch (q.kind) {
    case QKind::CountShape:
    case QKind::CountClass: {
      int n = 0;
      for (const auto& e : entities)
        if (matches(e)) ++n;
      return std::to_string(n);
    }
    case QKind::ColorOf: {
      const Entity* found = nullptr;
      int n = 0;
      for (const auto& e : entities)
        if (e.shape == q.shape) {
          if (!found) found = &e;
          ++n;
        }
      return n == 1 ? color_name(found->color) : "none";
    }
    case QKind::Where: {
      const Entity* found = nullptr;
      int n = 0;
      for (const auto& e : entities)
        if (matches(e)) {
          if (!found) found = &e;
          ++n;
        }
      return n == 1 ? band_name(band_of_cell(found->row, found->col)) : "none";
    }
    case QKind::Exists: {
      for (const auto& e : entities)
        if (matches(e)) return "yes";
      return "no";
    }
  }
  return "none";
}

std::string World::derive_answer(const TokenGrid& grid, const QuestionParse& q) const {
  return answer_for(decode_grid(grid), q);
}

QAItem World::make_qa(const Scene& scene, QType qtype, uint64_t seed) const {
  if (scene.entities.empty()) fail(Errc::bad_argument, "scene has no entities");
  if (qtype == QType::MCQ && scene.entities.size() > 9)
    fail(Errc::bad_argument, "MCQ count choices render as single digit tokens; scene too large");
  Rng rng = Rng(seed).fork("qa");

  // shapes/classes with exactly one instance (for ColorOf / Where)
  std::vector<int> shape_count(static_cast<size_t>(cfg_.n_shapes), 0);
  std::vector<int> class_count(static_cast<size_t>(cfg_.n_shapes * cfg_.n_colors), 0);
  for (const auto& e : scene.entities) {
    ++shape_count[static_cast<size_t>(e.shape)];
    ++class_count[static_cast<size_t>(e.color * cfg_.n_shapes + e.shape)];
  }
  std::vector<int> unique_shapes, unique_classes;
  for (int s = 0; s < cfg_.n_shapes; ++s)
    if (shape_count[static_cast<size_t>(s)] == 1) unique_shapes.push_back(s);
  for (int k = 0; k < cfg_.n_shapes * cfg_.n_colors; ++k)
    if (class_count[static_cast<size_t>(k)] == 1) unique_classes.push_back(k);

  std::vector<QKind> kinds = {QKind::CountShape, QKind::CountClass};
  if (!unique_shapes.empty()) kinds.push_back(QKind::ColorOf);
  if (!unique_classes.empty()) kinds.push_back(QKind::Where);
  if (qtype == QType::OE) kinds.push_back(QKind::Exists);
  const QKind kind = kinds[rng.uniform_int(kinds.size())];

  QuestionParse q;
  q.kind = kind;
  auto random_entity = [&]() -> const Entity& {
    return scene.entities[rng.uniform_int(scene.entities.size())];
  };
  switch (kind) {
    case QKind::CountShape:
      q.shape = rng.uniform() < 0.75 ? random_entity().shape
                                     : static_cast<int>(rng.uniform_int(cfg_.n_shapes));
      break;
    case QKind::CountClass:
      if (rng.uniform() < 0.75) {
        const Entity& e = random_entity();
        q.shape = e.shape;
        q.color = e.color;
      } else {
        q.shape = static_cast<int>(rng.uniform_int(cfg_.n_shapes));
        q.color = static_cast<int>(rng.uniform_int(cfg_.n_colors));
      }
      break;
    case QKind::ColorOf:
      q.shape = unique_shapes[rng.uniform_int(unique_shapes.size())];
      break;
    case QKind::Where: {
      const int k = unique_classes[rng.uniform_int(unique_classes.size())];
      q.shape = k % cfg_.n_shapes;
      q.color = k / cfg_.n_shapes;
      break;
    }
    case QKind::Exists:
      if (rng.uniform() < 0.5) {
        const Entity& e = random_entity();
        q.shape = e.shape;
        q.color = e.color;
      } else {
        q.shape = static_cast<int>(rng.uniform_int(cfg_.n_shapes));
        q.color = static_cast<int>(rng.uniform_int(cfg_.n_colors));
      }
      break;
  }

  const std::string gold_value = answer_for(scene.entities, q);

  std::vector<int> toks;
  switch (kind) {
    case QKind::CountShape:
      toks = {kHow, kMany, kShapePluralBase + q.shape, kAre, kThere, kQmark};
      break;
    case QKind::CountClass:
      toks = {kHow, kMany, kColorBase + q.color, kShapePluralBase + q.shape, kAre, kThere, kQmark};
      break;
    case QKind::ColorOf:
      toks = {kWhat, kColorWord, kIs, kThe, kShapeSingularBase + q.shape, kQmark};
      break;
    case QKind::Where:
      toks = {kWhere, kIs, kThe, kColorBase + q.color, kShapeSingularBase + q.shape, kQmark};
      break;
    case QKind::Exists:
      toks = {kIs, kThere, *token_id("a"), kColorBase + q.color, kShapeSingularBase + q.shape,
              kQmark};
      break;
  }

  QAItem item;
  item.qtype = qtype;
  item.kind = kind;

  if (qtype == QType::OE) {
    item.gold = gold_value;
    item.question = make_text(std::move(toks));
    return item;
  }

  // MCQ: distractors are valid-but-wrong values from the same answer domain.
  std::vector<std::string> domain;
  switch (kind) {
    case QKind::CountShape:
    case QKind::CountClass:
      for (int v = 0; v <= 9; ++v) domain.push_back(std::to_string(v));
      break;
    case QKind::ColorOf:
      for (int c = 0; c < cfg_.n_colors; ++c) domain.push_back(color_name(c));
      break;
    case QKind::Where:
      for (int b = 0; b < 9; ++b) domain.push_back(band_name(b));
      break;
    case QKind::Exists:
      break; // never MCQ
  }
  std::vector<std::string> wrong;
  for (const auto& v : domain)
    if (v != gold_value) wrong.push_back(v);
  const int n_choices = std::min<int>(kMaxChoices, 1 + static_cast<int>(wrong.size()));
  std::vector<std::string> distractors;
  for (int k = 0; k < n_choices - 1; ++k) {
    const size_t pick = rng.uniform_int(wrong.size());
    distractors.push_back(wrong[pick]);
    wrong.erase(wrong.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  const int slot = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_choices)));
  item.choices.resize(static_cast<size_t>(n_choices));
  size_t di = 0;
  for (int k = 0; k < n_choices; ++k)
    item.choices[static_cast<size_t>(k)] = (k == slot) ? gold_value : distractors[di++];
  item.gold = std::string(1, static_cast<char>('A' + slot));

  for (int k = 0; k < n_choices; ++k) {
    toks.push_back(kLabelBase + k);
    const auto vid = token_id(item.choices[static_cast<size_t>(k)]);
    if (!vid) fail(Errc::unknown_token, "choice value not in vocabulary");
    toks.push_back(*vid);
  }
  item.question = make_text(std::move(toks));
  return item;
}

EmbeddingMatrix World::embed(const TextSequence& seq) const {
  EmbeddingMatrix m;
  m.rows = seq.tokens.size();
  m.dim = cfg_.embed_dim;
  m.values.reserve(m.rows * static_cast<size_t>(m.dim));
  for (int id : seq.tokens) {
    if (id < 0 || id >= text_vocab_size())
      fail(Errc::unknown_token, "text token id out of range: " + std::to_string(id));
    const auto row = text_table_.row(static_cast<size_t>(id));
    m.values.insert(m.values.end(), row.begin(), row.end());
  }
  return m;
}

EmbeddingMatrix World::embed(const TokenGrid& grid) const {
  if (grid.h != cfg_.grid_h || grid.w != cfg_.grid_w)
    fail(Errc::dim_mismatch, "grid dims do not match world config");
  EmbeddingMatrix m;
  m.rows = grid.tokens.size();
  m.dim = cfg_.embed_dim;
  m.values.reserve(m.rows * static_cast<size_t>(m.dim));
  for (int id : grid.tokens) {
    if (id < 0 || id >= visual_vocab())
      fail(Errc::unknown_token, "visual token id out of range: " + std::to_string(id));
    const auto row = visual_table_.row(static_cast<size_t>(id));
    m.values.insert(m.values.end(), row.begin(), row.end());
  }
  return m;
}

} // namespace corl
