#include "corl/config.hpp"

#include <set>

#include "corl/errors.hpp"
#include "corl/fsio.hpp"
#include "corl/hashing.hpp"
#include "nlohmann/json.hpp"

namespace corl {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

[[noreturn]] void bad_field(const std::string& path, const std::string& why) {
  fail(Errc::config_invalid, "config field '" + path + "': " + why);
}

std::string join(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

// Reads known keys off one JSON object, then rejects whatever is left so
// typos surface as errors instead of silently keeping defaults.
struct ObjReader {
  const json& obj;
  std::string path;
  std::set<std::string> seen;

  ObjReader(const json& o, std::string p) : obj(o), path(std::move(p)) {
    if (!o.is_object()) bad_field(path.empty() ? "(root)" : path, "expected an object");
  }

  const json* take(const std::string& key) {
    seen.insert(key);
    const auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
  }

  void integer(const std::string& key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) bad_field(join(path, key), "expected an integer");
      out = v->get<int>();
    }
  }

  void unsigned64(const std::string& key, uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) bad_field(join(path, key), "expected a non-negative integer");
      out = v->get<uint64_t>();
    }
  }

  void real(const std::string& key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) bad_field(join(path, key), "expected a number");
      out = v->get<double>();
    }
  }

  void boolean(const std::string& key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) bad_field(join(path, key), "expected a boolean");
      out = v->get<bool>();
    }
  }

  void string(const std::string& key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) bad_field(join(path, key), "expected a string");
      out = v->get<std::string>();
    }
  }

  void optional_real(const std::string& key, std::optional<double>& out) {
    if (const json* v = take(key)) {
      if (v->is_null()) {
        out.reset();
      } else if (v->is_number()) {
        out = v->get<double>();
      } else {
        bad_field(join(path, key), "expected a number or null");
      }
    }
  }

  void done() const {
    for (auto it = obj.begin(); it != obj.end(); ++it)
      if (!seen.count(it.key())) bad_field(join(path, it.key()), "unknown key");
  }
};

void read_world(const json& j, const std::string& path, WorldConfig& w) {
  ObjReader r(j, path);
  r.integer("grid_h", w.grid_h);
  r.integer("grid_w", w.grid_w);
  r.integer("n_shapes", w.n_shapes);
  r.integer("n_colors", w.n_colors);
  r.integer("embed_dim", w.embed_dim);
  r.unsigned64("seed", w.seed);
  r.done();
}

void read_policy(const json& j, const std::string& path, PolicyConfig& p) {
  ObjReader r(j, path);
  r.integer("hidden", p.hidden);
  r.integer("cond_embed_dim", p.cond_embed_dim);
  r.integer("max_text_len", p.max_text_len);
  r.real("init_scale", p.init_scale);
  r.done();
}

void read_reward(const json& j, const std::string& path, RewardConfig& c) {
  ObjReader r(j, path);
  r.real("lambda", c.lambda);
  r.integer("patch_size", c.patch_size);
  std::string metric = c.perceptual == PerceptualMetric::embedding ? "embedding" : "hamming";
  r.string("perceptual", metric);
  if (metric == "embedding") {
    c.perceptual = PerceptualMetric::embedding;
  } else if (metric == "hamming") {
    c.perceptual = PerceptualMetric::hamming;
  } else {
    bad_field(join(path, "perceptual"), "expected \"embedding\" or \"hamming\"");
  }
  r.done();
}

void read_stage(const json& j, const std::string& path, StageConfig& s) {
  ObjReader r(j, path);
  r.integer("group_size", s.group_size);
  r.real("beta", s.beta);
  r.real("learning_rate", s.learning_rate);
  r.integer("batch_size", s.batch_size);
  r.integer("epochs", s.epochs);
  r.boolean("kl_enabled", s.kl_enabled);
  r.optional_real("clip_epsilon", s.clip_epsilon);
  r.boolean("token_level_ratio", s.token_level_ratio);
  r.boolean("mixed_groups", s.mixed_groups);
  r.done();
}

void read_eval(const json& j, const std::string& path, EvalSizes& e) {
  ObjReader r(j, path);
  r.integer("n_gen", e.n_gen);
  r.integer("n_qa", e.n_qa);
  r.done();
}

ordered_json world_json(const WorldConfig& w) {
  return {{"grid_h", w.grid_h},   {"grid_w", w.grid_w},       {"n_shapes", w.n_shapes},
          {"n_colors", w.n_colors}, {"embed_dim", w.embed_dim}, {"seed", w.seed}};
}

ordered_json policy_json(const PolicyConfig& p) {
  return {{"hidden", p.hidden},
          {"cond_embed_dim", p.cond_embed_dim},
          {"max_text_len", p.max_text_len},
          {"init_scale", p.init_scale}};
}

ordered_json reward_json(const RewardConfig& c) {
  return {{"lambda", c.lambda},
          {"patch_size", c.patch_size},
          {"perceptual", c.perceptual == PerceptualMetric::embedding ? "embedding" : "hamming"}};
}

ordered_json stage_json(const StageConfig& s) {
  ordered_json j{{"group_size", s.group_size},
                 {"beta", s.beta},
                 {"learning_rate", s.learning_rate},
                 {"batch_size", s.batch_size},
                 {"epochs", s.epochs},
                 {"kl_enabled", s.kl_enabled}};
  j["clip_epsilon"] = s.clip_epsilon ? ordered_json(*s.clip_epsilon) : ordered_json(nullptr);
  j["token_level_ratio"] = s.token_level_ratio;
  j["mixed_groups"] = s.mixed_groups;
  return j;
}

void validate_stage(const char* name, const StageConfig& s) {
  try {
    s.validate();
  } catch (const Error& e) {
    fail(Errc::config_invalid, std::string("config field 'stages.") + name + "': " + e.what());
  }
}

} // namespace

const char* paradigm_name(ParadigmKind kind) {
  switch (kind) {
    case ParadigmKind::separate_t2i: return "separate_t2i";
    case ParadigmKind::separate_und: return "separate_und";
    case ParadigmKind::separate_merge: return "separate_merge";
    case ParadigmKind::cycle: return "cycle";
    case ParadigmKind::unified: return "unified";
    case ParadigmKind::corl: return "corl";
  }
  return "unified";
}

std::optional<ParadigmKind> paradigm_from_name(const std::string& name) {
  for (ParadigmKind kind : all_paradigms())
    if (name == paradigm_name(kind)) return kind;
  return std::nullopt;
}

const std::vector<ParadigmKind>& all_paradigms() {
  static const std::vector<ParadigmKind> kinds{
      ParadigmKind::separate_t2i, ParadigmKind::separate_und, ParadigmKind::separate_merge,
      ParadigmKind::cycle,        ParadigmKind::unified,      ParadigmKind::corl};
  return kinds;
}

void RunConfig::validate() const {
  try {
    world.validate();
  } catch (const Error& e) {
    fail(Errc::config_invalid, std::string("config field 'world': ") + e.what());
  }
  try {
    policy.validate();
  } catch (const Error& e) {
    fail(Errc::config_invalid, std::string("config field 'policy': ") + e.what());
  }
  try {
    reward.validate(world);
  } catch (const Error& e) {
    fail(Errc::config_invalid, std::string("config field 'reward': ") + e.what());
  }
  validate_stage("unified", unified);
  validate_stage("refined_t2i", refined_t2i);
  validate_stage("refined_mcq", refined_mcq);
  validate_stage("refined_oe", refined_oe);
  if (unified.beta != 0.0)
    fail(Errc::config_invalid, "config field 'stages.unified.beta': the unified stage trains "
                               "without a KL term");
  for (const auto& [name, stage] :
       {std::pair<const char*, const StageConfig*>{"refined_t2i", &refined_t2i},
        {"refined_mcq", &refined_mcq},
        {"refined_oe", &refined_oe}})
    if (stage->beta <= 0.0)
      fail(Errc::config_invalid, std::string("config field 'stages.") + name +
                                     ".beta': refined stages require a positive KL coefficient");
  if (!paradigm_from_name(paradigm))
    fail(Errc::config_invalid, "config field 'paradigm': unknown paradigm '" + paradigm + "'");
  if (seeds.empty()) fail(Errc::config_invalid, "config field 'seeds': must be non-empty");
  if (output_dir.empty()) fail(Errc::config_invalid, "config field 'output_dir': must be set");
  if (total_steps < 1) fail(Errc::config_invalid, "config field 'total_steps': must be positive");
  if (cycle_block_length < 1)
    fail(Errc::config_invalid, "config field 'cycle_block_length': must be positive");
  if (dataset_size < 1) fail(Errc::config_invalid, "config field 'dataset_size': must be positive");
  if (difficulty < 0 || difficulty > 3)
    fail(Errc::config_invalid, "config field 'difficulty': must be in [0,3]");
  if (workers < 1) fail(Errc::config_invalid, "config field 'workers': must be positive");
  if (eval.n_gen < 1) fail(Errc::config_invalid, "config field 'eval.n_gen': must be positive");
  if (eval.n_qa < 1) fail(Errc::config_invalid, "config field 'eval.n_qa': must be positive");
}

RunConfig default_run_config() {
  RunConfig cfg;
  cfg.unified.group_size = 8;
  cfg.unified.beta = 0.0;
  cfg.unified.kl_enabled = false;
  cfg.unified.batch_size = 2;
  cfg.unified.learning_rate = 1e-2;
  for (StageConfig* s : {&cfg.refined_t2i, &cfg.refined_mcq, &cfg.refined_oe}) {
    s->group_size = 16;
    s->beta = 0.02;
    s->kl_enabled = true;
    s->batch_size = 2;
    s->learning_rate = 2.5e-3; // stage-1 rate / 4, the published ratio
  }
  return cfg;
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(Errc::config_invalid, std::string("config is not valid JSON: ") + e.what());
  }

  RunConfig cfg = default_run_config();
  ObjReader r(j, "");
  if (const json* v = r.take("world")) read_world(*v, "world", cfg.world);
  if (const json* v = r.take("policy")) read_policy(*v, "policy", cfg.policy);
  if (const json* v = r.take("reward")) read_reward(*v, "reward", cfg.reward);
  if (const json* v = r.take("stages")) {
    ObjReader sr(*v, "stages");
    if (const json* s = sr.take("unified")) read_stage(*s, "stages.unified", cfg.unified);
    if (const json* s = sr.take("refined_t2i")) read_stage(*s, "stages.refined_t2i", cfg.refined_t2i);
    if (const json* s = sr.take("refined_mcq")) read_stage(*s, "stages.refined_mcq", cfg.refined_mcq);
    if (const json* s = sr.take("refined_oe")) read_stage(*s, "stages.refined_oe", cfg.refined_oe);
    sr.done();
  }
  r.string("paradigm", cfg.paradigm);
  if (const json* v = r.take("seeds")) {
    if (!v->is_array()) bad_field("seeds", "expected an array");
    cfg.seeds.clear();
    for (size_t i = 0; i < v->size(); ++i) {
      const json& s = (*v)[i];
      if (!s.is_number_unsigned())
        bad_field("seeds[" + std::to_string(i) + "]", "expected a non-negative integer");
      cfg.seeds.push_back(s.get<uint64_t>());
    }
  }
  r.string("output_dir", cfg.output_dir);
  r.boolean("deterministic", cfg.deterministic);
  r.integer("total_steps", cfg.total_steps);
  r.integer("cycle_block_length", cfg.cycle_block_length);
  r.unsigned64("dataset_size", cfg.dataset_size);
  r.integer("difficulty", cfg.difficulty);
  r.integer("workers", cfg.workers);
  if (const json* v = r.take("eval")) read_eval(*v, "eval", cfg.eval);
  r.done();

  cfg.validate();
  return cfg;
}

std::string run_config_json(const RunConfig& cfg) {
  ordered_json j;
  j["world"] = world_json(cfg.world);
  j["policy"] = policy_json(cfg.policy);
  j["reward"] = reward_json(cfg.reward);
  j["stages"] = {{"unified", stage_json(cfg.unified)},
                 {"refined_t2i", stage_json(cfg.refined_t2i)},
                 {"refined_mcq", stage_json(cfg.refined_mcq)},
                 {"refined_oe", stage_json(cfg.refined_oe)}};
  j["paradigm"] = cfg.paradigm;
  j["seeds"] = cfg.seeds;
  j["output_dir"] = cfg.output_dir;
  j["deterministic"] = cfg.deterministic;
  j["total_steps"] = cfg.total_steps;
  j["cycle_block_length"] = cfg.cycle_block_length;
  j["dataset_size"] = cfg.dataset_size;
  j["difficulty"] = cfg.difficulty;
  j["workers"] = cfg.workers;
  j["eval"] = {{"n_gen", cfg.eval.n_gen}, {"n_qa", cfg.eval.n_qa}};
  return j.dump(2);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(read_file(path));
}

uint64_t config_hash(const RunConfig& cfg) {
  // Only fields that change what gets computed. Operational knobs (seeds,
  // output_dir, workers, deterministic, paradigm) stay out: reruns with a
  // different worker pool or output root must produce byte-identical
  // artifacts, and artifacts across paradigms of one sweep must agree on
  // their configuration hash to assert comparability.
  ordered_json j;
  j["world"] = world_json(cfg.world);
  j["policy"] = policy_json(cfg.policy);
  j["reward"] = reward_json(cfg.reward);
  j["stages"] = {{"unified", stage_json(cfg.unified)},
                 {"refined_t2i", stage_json(cfg.refined_t2i)},
                 {"refined_mcq", stage_json(cfg.refined_mcq)},
                 {"refined_oe", stage_json(cfg.refined_oe)}};
  j["total_steps"] = cfg.total_steps;
  j["cycle_block_length"] = cfg.cycle_block_length;
  j["dataset_size"] = cfg.dataset_size;
  j["difficulty"] = cfg.difficulty;
  j["eval"] = {{"n_gen", cfg.eval.n_gen}, {"n_qa", cfg.eval.n_qa}};
  return fnv1a64(j.dump());
}

std::string stage_config_json(const StageConfig& s) { return stage_json(s).dump(); }

StageConfig stage_config_from_json(const std::string& text, const std::string& field_path) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    bad_field(field_path, std::string("not valid JSON: ") + e.what());
  }
  StageConfig s;
  read_stage(j, field_path, s);
  return s;
}

} // namespace corl
