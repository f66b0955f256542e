#pragma once

#include <cstdint>
#include <string>

#include "corl/policy.hpp"
#include "corl/world.hpp"

namespace corl {

// Per-sample category outcomes for one generated grid against its scene.
struct GenCategoryFlags {
  bool two_object = false;
  bool counting = false;
  bool position = false;
  bool color_attr = false;
};

struct GenScore {
  double two_object = 0.0;
  double counting = 0.0;
  double position = 0.0;
  double color_attr = 0.0;
  double overall = 0.0; // mean of the four categories
};

struct EvalConfig {
  int n_gen = 500;
  int n_qa = 500; // per question surface
  int difficulty = 1;
  bool exact_cells = false;     // position by exact cell instead of coarse relation
  double gen_temperature = 1.0; // question answering always decodes greedily
  int workers = 1;
};

struct EvalReport {
  GenScore gen;
  double qa_mcq_acc = 0.0;
  double qa_oe_acc = 0.0;
  double mcq_chance = 0.0; // mean 1/n_choices over the MCQ eval items
  int n_gen = 0;
  int n_mcq = 0;
  int n_oe = 0;
  uint64_t seed = 0;
  uint64_t world_hash = 0;
  std::string checkpoint_id; // content hash of the evaluated parameters
};

// Scores one generated grid against the scene it was prompted from. A class
// is a (shape, color) pair; entities come from decoding the grid.
//   two_object: the generated class set equals the scene's class set.
//   counting:   per-class counts match exactly.
//   position:   class sets equal, and for every pair of classes that are
//               unique in both grids the coarse relations (left-of, above by
//               3x3 band; exact cell order when exact_cells) match the scene.
//   color_attr: at least one entity, and every generated entity's
//               (shape, color) combination occurs in the scene.
// The class-set equality gate keeps a token-uniform random policy at
// chance level near zero in every category.
GenCategoryFlags compositional_score(const World& w, const TokenGrid& gen_grid,
                                     const Scene& scene, bool exact_cells = false);

// Fresh-scene evaluation: generation sampled at gen_temperature with a fixed
// eval stream, question answering decoded greedily. Scene seeds are forced
// odd; training datasets force theirs even, so the surfaces never overlap.
EvalReport evaluate(const Policy& policy, const PolicyParams& params, uint64_t eval_seed,
                    const EvalConfig& cfg);

std::string eval_report_json(const EvalReport& report);
EvalReport eval_report_from_json(const std::string& text);

// (gen overall + mean of the two QA accuracies) / 2 — the scalar used to
// compare paradigms.
double combined_score(const EvalReport& report);

} // namespace corl
