#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "corl/rng.hpp"

namespace corl {

// ---------------------------------------------------------------------------
// Fixed text vocabulary and tokenizer
// ---------------------------------------------------------------------------
//
// The text vocabulary is a closed word list shared by captions, questions and
// policy text outputs. Token ids are the indices below and are frozen; the
// rendered form of a sequence is the tokens joined by single spaces.

namespace tok {
inline constexpr int kEos = 0;
inline constexpr int kThinkOpen = 1;
inline constexpr int kThinkClose = 2;
inline constexpr int kAnswerOpen = 3;
inline constexpr int kAnswerClose = 4;
} // namespace tok

int text_vocab_size();
const std::string& token_name(int id);
std::optional<int> token_id(const std::string& word);

struct TextSequence {
  std::vector<int> tokens;
  std::string rendered;
};

TextSequence make_text(std::vector<int> tokens);
std::optional<TextSequence> tokenize_text(const std::string& s);
std::string render_tokens(const std::vector<int>& tokens);

// ---------------------------------------------------------------------------
// World types
// ---------------------------------------------------------------------------

inline constexpr int kMaxShapes = 4;
inline constexpr int kMaxColors = 4;

struct WorldConfig {
  int grid_h = 6;
  int grid_w = 6;
  int n_shapes = 4; // prefix of the fixed shape alphabet
  int n_colors = 4; // prefix of the fixed color alphabet
  int embed_dim = 8;
  uint64_t seed = 1;

  void validate() const; // throws Errc::config_invalid
};

struct Entity {
  int shape = 0;
  int color = 0;
  int row = 0;
  int col = 0;
};

struct Scene {
  std::vector<Entity> entities;
  int grid_h = 0;
  int grid_w = 0;
  uint64_t seed = 0;
};

struct TokenGrid {
  std::vector<int> tokens; // row-major, size h*w
  int h = 0;
  int w = 0;
  int vocab = 0;

  int at(int r, int c) const { return tokens[static_cast<size_t>(r) * w + c]; }
  int& at(int r, int c) { return tokens[static_cast<size_t>(r) * w + c]; }
};

enum class QType { MCQ, OE };
enum class QKind { CountShape, CountClass, ColorOf, Where, Exists };

struct QAItem {
  TextSequence question;
  QType qtype = QType::OE;
  QKind kind = QKind::CountShape;
  std::vector<std::string> choices; // MCQ: value strings in label order (A, B, ...)
  std::string gold;                 // MCQ: label string; OE: value string
};

struct EmbeddingMatrix {
  size_t rows = 0;
  int dim = 0;
  std::vector<double> values; // rows * dim

  std::span<const double> row(size_t i) const {
    return {values.data() + i * static_cast<size_t>(dim), static_cast<size_t>(dim)};
  }
};

// Parsed caption element: one entity at caption granularity (coarse band).
struct CaptionEntity {
  int color = 0;
  int shape = 0;
  int band = 0; // 0..8, row band * 3 + col band
};

struct QuestionParse {
  QKind kind = QKind::CountShape;
  int shape = -1; // -1 when the kind has no shape target
  int color = -1; // -1 when absent ("how many circles")
  std::vector<std::string> choices; // MCQ values in label order; empty for OE
};

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------
//
// Deterministic task generator. Everything is a pure function of the config
// and the seeds passed in; the embedding tables are drawn once at
// construction and frozen.

class World {
 public:
  explicit World(const WorldConfig& config);

  const WorldConfig& config() const { return cfg_; }
  uint64_t hash() const { return hash_; }

  int visual_vocab() const { return cfg_.n_shapes * cfg_.n_colors + 1; }
  int background_token() const { return 0; }
  int encode_token(int shape, int color) const { return 1 + color * cfg_.n_shapes + shape; }
  bool decode_token(int token, int& shape, int& color) const;

  // coarse 3x3 position bands
  int band_of_cell(int row, int col) const;
  static const std::string& band_name(int band);
  static std::optional<int> band_id(const std::string& name);

  static const std::string& shape_name(int shape, bool plural);
  static const std::string& color_name(int color);

  Scene generate_scene(uint64_t seed, int difficulty) const;
  TokenGrid render_scene(const Scene& scene) const;
  std::vector<Entity> decode_grid(const TokenGrid& grid) const; // drops background/invalid
  TextSequence describe_scene(const Scene& scene) const;
  TextSequence recaption(const TokenGrid& grid) const;
  QAItem make_qa(const Scene& scene, QType qtype, uint64_t seed) const;

  EmbeddingMatrix embed(const TextSequence& seq) const;
  EmbeddingMatrix embed(const TokenGrid& grid) const;
  const EmbeddingMatrix& text_table() const { return text_table_; }
  const EmbeddingMatrix& visual_table() const { return visual_table_; }

  // Caption grammar:  caption := "nothing" | group (";" group)*
  //                   group   := count color shape "at" pos ("and" pos)*
  //                   count   := "a" | digit+        (multi-digit, decimal)
  // count 1 uses "a" + singular shape; counts >= 2 use digits + plural.
  // Positions are listed one per entity. Returns nullopt on any deviation.
  std::optional<std::vector<CaptionEntity>> parse_caption(const TextSequence& caption) const;

  std::optional<QuestionParse> parse_question(const TextSequence& question) const;

  // Ground-truth answer for a question about a grid, recomputed from the grid
  // itself (decode then count/lookup). "none" when the question's uniqueness
  // assumption does not hold in this grid.
  std::string derive_answer(const TokenGrid& grid, const QuestionParse& q) const;

 private:
  TextSequence caption_of_entities(std::vector<Entity> entities) const;
  std::string answer_for(const std::vector<Entity>& entities, const QuestionParse& q) const;

  WorldConfig cfg_;
  EmbeddingMatrix text_table_;
  EmbeddingMatrix visual_table_;
  uint64_t hash_ = 0;
};

} // namespace corl
