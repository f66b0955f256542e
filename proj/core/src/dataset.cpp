#include "corl/dataset.hpp"

#include "corl/errors.hpp"

namespace corl {

const char* qa_mix_name(QaMix m) {
  switch (m) {
    case QaMix::alternate: return "alternate";
    case QaMix::mcq_only: return "mcq_only";
    case QaMix::oe_only: return "oe_only";
  }
  return "alternate";
}

std::optional<QaMix> qa_mix_from_name(const std::string& name) {
  if (name == "alternate") return QaMix::alternate;
  if (name == "mcq_only") return QaMix::mcq_only;
  if (name == "oe_only") return QaMix::oe_only;
  return std::nullopt;
}

Dataset::Dataset(const World& w, uint64_t seed, int difficulty, size_t size, Role role, QaMix mix)
    : world_(&w), root_(seed), difficulty_(difficulty), size_(size), role_(role), mix_(mix) {
  if (size == 0) fail(Errc::config_invalid, "dataset size must be positive");
  if (difficulty < 0 || difficulty > 3) fail(Errc::config_invalid, "difficulty must be in [0,3]");
}

DatasetSample Dataset::sample(size_t index) const {
  const size_t i = index % size_;
  uint64_t scene_seed = root_.fork("scene", i).seed();
  scene_seed = role_ == Role::train ? (scene_seed & ~1ull) : (scene_seed | 1ull);

  DatasetSample s;
  s.scene_seed = scene_seed;
  s.scene = world_->generate_scene(scene_seed, difficulty_);
  s.image = world_->render_scene(s.scene);
  s.prompt = world_->describe_scene(s.scene);
  const QType qtype = mix_ == QaMix::mcq_only   ? QType::MCQ
                      : mix_ == QaMix::oe_only  ? QType::OE
                      : (i % 2 == 0 ? QType::MCQ : QType::OE);
  s.qa = world_->make_qa(s.scene, qtype, root_.fork("qa", i).seed());
  return s;
}

} // namespace corl
