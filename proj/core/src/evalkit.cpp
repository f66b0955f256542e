#include "corl/evalkit.hpp"

#include <algorithm>
#include <map>
#include <utility>
#include <vector>

#include "corl/errors.hpp"
#include "corl/hashing.hpp"
#include "corl/parallel.hpp"
#include "corl/rewards.hpp"
#include "nlohmann/json.hpp"

namespace corl {

namespace {

using ClassKey = std::pair<int, int>; // (shape, color)

std::map<ClassKey, std::vector<Entity>> by_class(const std::vector<Entity>& entities) {
  std::map<ClassKey, std::vector<Entity>> m;
  for (const Entity& e : entities) m[{e.shape, e.color}].push_back(e);
  return m;
}

int sign(int x) { return x < 0 ? -1 : (x > 0 ? 1 : 0); }

} // namespace

GenCategoryFlags compositional_score(const World& w, const TokenGrid& gen_grid,
                                     const Scene& scene, bool exact_cells) {
  if (gen_grid.h != scene.grid_h || gen_grid.w != scene.grid_w)
    fail(Errc::shape_mismatch, "generated grid does not match the scene dimensions");

  std::vector<Entity> want;
  for (const Entity& e : scene.entities) want.push_back(e);
  const std::vector<Entity> got = w.decode_grid(gen_grid);

  const auto want_classes = by_class(want);
  const auto got_classes = by_class(got);

  GenCategoryFlags flags;

  bool same_class_set = want_classes.size() == got_classes.size();
  if (same_class_set)
    for (const auto& [key, entities] : want_classes)
      same_class_set = same_class_set && got_classes.count(key) > 0;
  flags.two_object = same_class_set;

  bool counts_match = same_class_set;
  if (counts_match)
    for (const auto& [key, entities] : want_classes)
      counts_match = counts_match && got_classes.at(key).size() == entities.size();
  flags.counting = counts_match;

  // coarse pairwise relations between classes that are unique on both sides
  bool relations = same_class_set;
  if (relations) {
    std::vector<std::pair<Entity, Entity>> pairs; // (scene entity, generated entity)
    for (const auto& [key, entities] : want_classes) {
      const auto& theirs = got_classes.at(key);
      if (entities.size() == 1 && theirs.size() == 1)
        pairs.emplace_back(entities[0], theirs[0]);
    }
    for (size_t i = 0; i < pairs.size() && relations; ++i) {
      for (size_t j = i + 1; j < pairs.size() && relations; ++j) {
        const Entity& sa = pairs[i].first;
        const Entity& sb = pairs[j].first;
        const Entity& ga = pairs[i].second;
        const Entity& gb = pairs[j].second;
        if (exact_cells) {
          relations = sa.row == ga.row && sa.col == ga.col && sb.row == gb.row &&
                      sb.col == gb.col;
        } else {
          const int s_row = sign(w.band_of_cell(sa.row, sa.col) / 3 -
                                 w.band_of_cell(sb.row, sb.col) / 3);
          const int s_col = sign(w.band_of_cell(sa.row, sa.col) % 3 -
                                 w.band_of_cell(sb.row, sb.col) % 3);
          const int g_row = sign(w.band_of_cell(ga.row, ga.col) / 3 -
                                 w.band_of_cell(gb.row, gb.col) / 3);
          const int g_col = sign(w.band_of_cell(ga.row, ga.col) % 3 -
                                 w.band_of_cell(gb.row, gb.col) % 3);
          relations = s_row == g_row && s_col == g_col;
        }
      }
    }
  }
  flags.position = relations;

  bool colors_ok = !got.empty();
  for (const Entity& e : got)
    colors_ok = colors_ok && want_classes.count({e.shape, e.color}) > 0;
  flags.color_attr = colors_ok;

  return flags;
}

EvalReport evaluate(const Policy& policy, const PolicyParams& params, uint64_t eval_seed,
                    const EvalConfig& cfg) {
  if (cfg.n_gen <= 0 || cfg.n_qa <= 0) fail(Errc::bad_argument, "evaluation needs n > 0");
  const World& w = policy.world();
  const Rng root(eval_seed);

  EvalReport report;
  report.seed = eval_seed;
  report.world_hash = w.hash();
  {
    HashStream hs;
    hs.str("params");
    hs.f64s(params.values);
    report.checkpoint_id = hex64(hs.h);
  }

  // generation surface: sample, then score against the prompting scene
  const size_t n_gen = static_cast<size_t>(cfg.n_gen);
  std::vector<GenCategoryFlags> gen_flags(n_gen);
  parallel_for(n_gen, cfg.workers, [&](size_t i) {
    const uint64_t scene_seed = root.fork("gen_scene", i).seed() | 1ull;
    const Scene scene = w.generate_scene(scene_seed, cfg.difficulty);
    const Condition cond(w.describe_scene(scene));
    Rng sampler = root.fork("gen_sample", i);
    const PolicyOutput out =
        policy.sample(params, cond, OutputKind::image, cfg.gen_temperature, sampler);
    gen_flags[i] = compositional_score(w, out.image, scene, cfg.exact_cells);
  });
  for (const GenCategoryFlags& f : gen_flags) {
    report.gen.two_object += f.two_object ? 1.0 : 0.0;
    report.gen.counting += f.counting ? 1.0 : 0.0;
    report.gen.position += f.position ? 1.0 : 0.0;
    report.gen.color_attr += f.color_attr ? 1.0 : 0.0;
  }
  report.gen.two_object /= static_cast<double>(n_gen);
  report.gen.counting /= static_cast<double>(n_gen);
  report.gen.position /= static_cast<double>(n_gen);
  report.gen.color_attr /= static_cast<double>(n_gen);
  report.gen.overall = (report.gen.two_object + report.gen.counting + report.gen.position +
                        report.gen.color_attr) /
                       4.0;
  report.n_gen = cfg.n_gen;

  // question answering: greedy decoding, accuracy via the answer grammar
  const size_t n_qa = static_cast<size_t>(cfg.n_qa);
  for (QType qt : {QType::MCQ, QType::OE}) {
    const char* label = qt == QType::MCQ ? "mcq" : "oe";
    std::vector<double> acc(n_qa, 0.0);
    std::vector<double> chance(n_qa, 0.0);
    parallel_for(n_qa, cfg.workers, [&](size_t i) {
      const uint64_t scene_seed = root.fork("qa_scene", i).fork(label).seed() | 1ull;
      const Scene scene = w.generate_scene(scene_seed, cfg.difficulty);
      const QAItem qa = w.make_qa(scene, qt, root.fork("qa_item", i).fork(label).seed());
      const Condition cond(qa.question, w.render_scene(scene));
      const PolicyOutput out = policy.greedy(params, cond, OutputKind::text);
      acc[i] = accuracy_reward(out.text.rendered, qa.gold, qt);
      if (qt == QType::MCQ) chance[i] = 1.0 / static_cast<double>(qa.choices.size());
    });
    double total = 0.0, chance_total = 0.0;
    for (size_t i = 0; i < n_qa; ++i) {
      total += acc[i];
      chance_total += chance[i];
    }
    if (qt == QType::MCQ) {
      report.qa_mcq_acc = total / static_cast<double>(n_qa);
      report.mcq_chance = chance_total / static_cast<double>(n_qa);
      report.n_mcq = cfg.n_qa;
    } else {
      report.qa_oe_acc = total / static_cast<double>(n_qa);
      report.n_oe = cfg.n_qa;
    }
  }
  return report;
}

std::string eval_report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["gen"] = {{"two_object", r.gen.two_object},
              {"counting", r.gen.counting},
              {"position", r.gen.position},
              {"color_attr", r.gen.color_attr},
              {"overall", r.gen.overall}};
  j["qa_mcq_acc"] = r.qa_mcq_acc;
  j["qa_oe_acc"] = r.qa_oe_acc;
  j["mcq_chance"] = r.mcq_chance;
  j["n_gen"] = r.n_gen;
  j["n_mcq"] = r.n_mcq;
  j["n_oe"] = r.n_oe;
  j["seed"] = r.seed;
  j["world_hash"] = r.world_hash;
  j["checkpoint_id"] = r.checkpoint_id;
  j["combined"] = combined_score(r);
  return j.dump();
}

EvalReport eval_report_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(Errc::io_error, std::string("evaluation report is not valid JSON: ") + e.what());
  }
  EvalReport r;
  try {
    r.gen.two_object = j.at("gen").at("two_object").get<double>();
    r.gen.counting = j.at("gen").at("counting").get<double>();
    r.gen.position = j.at("gen").at("position").get<double>();
    r.gen.color_attr = j.at("gen").at("color_attr").get<double>();
    r.gen.overall = j.at("gen").at("overall").get<double>();
    r.qa_mcq_acc = j.at("qa_mcq_acc").get<double>();
    r.qa_oe_acc = j.at("qa_oe_acc").get<double>();
    r.mcq_chance = j.at("mcq_chance").get<double>();
    r.n_gen = j.at("n_gen").get<int>();
    r.n_mcq = j.at("n_mcq").get<int>();
    r.n_oe = j.at("n_oe").get<int>();
    r.seed = j.at("seed").get<uint64_t>();
    r.world_hash = j.at("world_hash").get<uint64_t>();
    r.checkpoint_id = j.at("checkpoint_id").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::io_error, std::string("evaluation report is missing fields: ") + e.what());
  }
  return r;
}

double combined_score(const EvalReport& r) {
  return (r.gen.overall + 0.5 * (r.qa_mcq_acc + r.qa_oe_acc)) / 2.0;
}

} // namespace corl
