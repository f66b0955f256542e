#pragma once

#include <optional>
#include <string>

#include "corl/world.hpp"

namespace corl {

enum class Task { T2I, MCQ, OE };

const char* task_name(Task t);
std::optional<Task> task_from_name(const std::string& name);

// Per-output reward components. Only the components a task computes are
// populated; the composition ops below require presence and refuse to
// default-fill a missing component.
struct RewardBreakdown {
  std::optional<double> cycle;     // [0,1]
  std::optional<double> tim;       // [0,1]
  std::optional<double> acc;       // {0,1}
  std::optional<double> format;    // {0,1}
  std::optional<double> raw_cycle; // [0,2]
  std::optional<double> raw_tim;   // [-1,1]
  double joint = 0.0;
};

enum class PerceptualMetric {
  embedding, // patch-pooled embedding cosine distance
  hamming,   // per-cell token mismatch rate (pixel-space ablation)
};

struct RewardConfig {
  double lambda = 0.8;
  int patch_size = 2;
  PerceptualMetric perceptual = PerceptualMetric::embedding;

  void validate(const WorldConfig& world) const; // throws Errc::config_invalid
};

// Kernel of the embedding perceptual metric: the matrices hold one row per
// cell of an h x w grid (row-major); the grid is split into non-overlapping
// patch_size x patch_size patches, each patch is mean-pooled, and the result
// is the mean over patches of (1 - cos)/2 between corresponding pooled
// vectors. Bitwise-identical pooled vectors give exactly 0, bitwise-negated
// ones exactly 1.
double patch_embedding_distance(const EmbeddingMatrix& a, const EmbeddingMatrix& b, int h, int w,
                                int patch_size);

// Embeds both grids with the world's visual table and applies
// patch_embedding_distance (or, for the pixel-space ablation metric, the
// per-cell token mismatch rate). 0 for identical grids.
double perceptual_distance(const World& w, const TokenGrid& real, const TokenGrid& gen,
                           const RewardConfig& cfg);

// F1 between the entity-attribute tuple multisets of the two captions, where
// each entity contributes (color, shape) and (color, shape, band). Captions
// that fail to parse contribute the empty multiset; two empty multisets
// score 1.
double textual_consistency(const World& w, const TextSequence& prompt, const TextSequence& recap);

struct ScaledReward {
  double raw = 0.0;
  double normalized = 0.0;
};

// raw = (1 - perceptual_distance) + textual_consistency(prompt, recaption(gen)),
// normalized = raw / 2.
ScaledReward cycle_reward(const World& w, const TokenGrid& real, const TokenGrid& gen,
                          const TextSequence& prompt, const RewardConfig& cfg);

// raw = ( mean over image rows of max-over-text cosine
//       + mean over text rows of max-over-image cosine ) / 2,
// normalized = (raw + 1) / 2. Rows must be nonzero.
ScaledReward tim_reward(const EmbeddingMatrix& text, const EmbeddingMatrix& image);

// Cosine between mean-pooled text and image embeddings mapped to [0,1].
// A zero pooled vector gives the neutral value 0.5. Ablation baseline only.
double clip_style_reward(const EmbeddingMatrix& text, const EmbeddingMatrix& image);

// Content of the last well-formed <answer>...</answer> span, whitespace
// trimmed. nullopt when no well-formed span exists.
std::optional<std::string> parse_answer(const std::string& text);

// MCQ: first letter of the parsed answer, uppercased, equals the gold label.
// OE: trimmed case-folded match, or numeric match at relative tolerance 1e-6
// when both sides parse fully as numbers. Unparseable answers score 0.
double accuracy_reward(const std::string& text, const std::string& gold, QType qtype);

// 1 iff the text is exactly: optional whitespace, one <think>...</think>
// block, optional whitespace, one <answer>...</answer> block, optional
// trailing whitespace, with no tag tokens inside either block.
double format_reward(const std::string& text);

// cycle + tim + lambda * (acc + format); all four components required.
double joint_reward(const RewardBreakdown& b, double lambda);

// T2I: cycle + tim.  MCQ / OE: acc + format.  Missing components error.
double stage2_reward(Task task, const RewardBreakdown& b);

} // namespace corl
