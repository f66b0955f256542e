#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "corl/rng.hpp"
#include "corl/world.hpp"

namespace corl {

enum class Role { train, eval };

// Question-type schedule for a dataset's QA pairs.
enum class QaMix { alternate, mcq_only, oe_only };

const char* qa_mix_name(QaMix m);
std::optional<QaMix> qa_mix_from_name(const std::string& name);

// One fully materialized example: a reference image, its prompt, and one QA
// pair about the same scene.
struct DatasetSample {
  Scene scene;
  TokenGrid image;
  TextSequence prompt;
  QAItem qa;
  uint64_t scene_seed = 0;
};

// Virtual seeded collection. Samples are generated on demand and depend only
// on (world, seed, difficulty, size, role, mix, index), so a dataset is a
// value, not a file. Train datasets force scene seeds even and evaluation
// forces them odd, which keeps the two scene populations disjoint however
// the individual seeds are drawn.
class Dataset {
 public:
  Dataset(const World& w, uint64_t seed, int difficulty, size_t size, Role role,
          QaMix mix = QaMix::alternate);

  const World& world() const { return *world_; }
  size_t size() const { return size_; }
  int difficulty() const { return difficulty_; }
  Role role() const { return role_; }
  QaMix mix() const { return mix_; }

  DatasetSample sample(size_t index) const; // index taken modulo size

 private:
  const World* world_;
  Rng root_;
  int difficulty_ = 1;
  size_t size_ = 0;
  Role role_ = Role::train;
  QaMix mix_ = QaMix::alternate;
};

} // namespace corl
