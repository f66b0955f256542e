// End-to-end tests for the corl binary: exit codes, stdout/stderr contracts,
// artifact layout, and the environment overrides.

#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "corl/fsio.hpp"
#include "nlohmann/json.hpp"
#include "doctest.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CmdResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

int run_count = 0;

// the command line goes through /bin/sh, so env prefixes and cd work
CmdResult run_shell(const std::string& cmd_line) {
  const fs::path errfile =
      fs::temp_directory_path() / ("corl_cli_err_" + std::to_string(run_count++));
  const std::string cmd = "{ " + cmd_line + " ; } 2>" + errfile.string();
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CmdResult r;
  char buf[4096];
  size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  if (fs::exists(errfile)) {
    r.err = corl::read_file(errfile);
    fs::remove(errfile);
  }
  return r;
}

CmdResult run_cli(const std::string& args) {
  return run_shell(std::string(CORL_CLI_PATH) + " " + args);
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("corl_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_tiny_config(const fs::path& dir, const json& overrides = json::object()) {
  json cfg = {
      {"policy", {{"hidden", 8}, {"cond_embed_dim", 4}}},
      {"stages",
       {{"unified", {{"group_size", 4}, {"batch_size", 1}}},
        {"refined_t2i", {{"group_size", 8}, {"batch_size", 1}}},
        {"refined_mcq", {{"group_size", 8}, {"batch_size", 1}}},
        {"refined_oe", {{"group_size", 8}, {"batch_size", 1}}}}},
      {"paradigm", "unified"},
      {"seeds", {1}},
      {"output_dir", (dir / "runs").string()},
      {"total_steps", 16},
      {"dataset_size", 8},
      {"workers", 2},
      {"eval", {{"n_gen", 16}, {"n_qa", 8}}},
  };
  for (const auto& [k, v] : overrides.items()) cfg[k] = v;
  const fs::path path = dir / "config.json";
  corl::atomic_write_file(path, cfg.dump(2));
  return path;
}

json stderr_error(const CmdResult& r) {
  const json j = json::parse(r.err);
  REQUIRE(j.contains("error"));
  return j["error"];
}

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(root))
    if (entry.is_regular_file())
      files[fs::relative(entry.path(), root).string()] = corl::read_file(entry.path());
  return files;
}

} // namespace

TEST_CASE("train --dry-run prints the resolved plan without training") {
  const fs::path dir = scratch_dir("dry_run");
  const fs::path cfg = write_tiny_config(dir);

  const CmdResult r = run_cli("train --config " + cfg.string() + " --dry-run");
  CHECK(r.exit_code == 0);
  const json plan = json::parse(r.out);
  CHECK(plan["paradigm"] == "unified");
  CHECK(plan["matched_samples_per_step"] == 8);
  CHECK(plan["total_steps_per_seed"] == 16);
  CHECK(plan["total_rollout_samples_per_seed"] == 128);
  CHECK(plan["config_hash"].get<uint64_t>() != 0);
  CHECK(plan["config"]["stages"]["unified"]["group_size"] == 4);
  CHECK_FALSE(fs::exists(dir / "runs"));
}

TEST_CASE("a missing config file fails with an error naming the path") {
  const CmdResult r = run_cli("train --config /no/such/config.json");
  CHECK(r.exit_code == 1);
  const json err = stderr_error(r);
  CHECK(err["code"] == "io-error");
  CHECK(err["message"].get<std::string>().find("/no/such/config.json") != std::string::npos);
}

TEST_CASE("config errors carry the offending field path") {
  const fs::path dir = scratch_dir("bad_config");
  const fs::path cfg = write_tiny_config(dir, {{"difficulty", 9}});
  const CmdResult r = run_cli("train --config " + cfg.string());
  CHECK(r.exit_code == 1);
  const json err = stderr_error(r);
  CHECK(err["code"] == "config-invalid");
  CHECK(err["message"].get<std::string>().find("difficulty") != std::string::npos);
}

TEST_CASE("train writes records and reruns reproduce the tree byte for byte") {
  const fs::path dir = scratch_dir("train_repro");
  const fs::path cfg = write_tiny_config(dir);

  const CmdResult first = run_cli("train --config " + cfg.string());
  CHECK(first.exit_code == 0);
  const json line = json::parse(first.out);
  CHECK(line["paradigm"] == "unified");
  CHECK(line["seed"] == 1);
  CHECK(fs::exists(line["record"].get<std::string>()));
  CHECK(line.contains("combined_score"));

  const auto tree = tree_contents(dir / "runs");
  CHECK(tree.size() >= 4); // metrics, checkpoints, eval report, record
  const CmdResult second = run_cli("train --config " + cfg.string());
  CHECK(second.exit_code == 0);
  CHECK(tree_contents(dir / "runs") == tree);
}

TEST_CASE("eval prints a report and exits 2 on a world mismatch") {
  const fs::path dir = scratch_dir("eval");
  const fs::path cfg = write_tiny_config(dir);
  REQUIRE(run_cli("train --config " + cfg.string()).exit_code == 0);
  const std::string ckpt = (dir / "runs/unified/seed1/final/checkpoint.bin").string();

  const CmdResult r = run_cli("eval --config " + cfg.string() + " --checkpoint " + ckpt +
                              " --n 8 --seed 7");
  CHECK(r.exit_code == 0);
  const json rep = json::parse(r.out);
  CHECK(rep["n_gen"] == 8);
  CHECK(rep["seed"] == 7);
  CHECK(rep["gen"].contains("overall"));
  CHECK(rep.contains("checkpoint_id"));

  const fs::path other = write_tiny_config(scratch_dir("eval_other"),
                                           {{"world", {{"n_shapes", 3}}}});
  const CmdResult bad =
      run_cli("eval --config " + other.string() + " --checkpoint " + ckpt + " --n 4");
  CHECK(bad.exit_code == 2);
  CHECK(stderr_error(bad)["code"] == "world-hash-mismatch");
}

TEST_CASE("gradcheck passes clean and fails the injected-bug control") {
  const fs::path dir = scratch_dir("gradcheck");
  const fs::path cfg = write_tiny_config(dir);

  const CmdResult ok = run_cli("gradcheck --config " + cfg.string() + " --trials 6 --coords 12");
  CHECK(ok.exit_code == 0);
  const json rep = json::parse(ok.out);
  CHECK(rep["pass"] == true);
  CHECK(rep["max_rel_err"].get<double>() < 1e-5);
  CHECK(rep["worst"].contains("block"));

  const CmdResult bug =
      run_cli("gradcheck --config " + cfg.string() + " --trials 2 --coords 4 --inject-bug");
  CHECK(bug.exit_code == 1);
  CHECK(json::parse(bug.out)["pass"] == false);
}

TEST_CASE("reward-eval scores ideal outputs at the ceiling") {
  const fs::path dir = scratch_dir("reward_eval");
  const fs::path cfg = write_tiny_config(dir);
  const CmdResult r = run_cli("reward-eval --config " + cfg.string() + " --n 32");
  CHECK(r.exit_code == 0);
  const json rep = json::parse(r.out);
  CHECK(rep["perfect"]["cycle_mean"] == 1.0);
  CHECK(rep["perfect"]["acc_mean"] == 1.0);
  CHECK(rep["perfect"]["format_mean"] == 1.0);
  CHECK(rep["perfect"]["tim_mean"].get<double>() > 0.5);
  CHECK(rep["policy"]["acc_mean"].get<double>() <= 1.0);
}

TEST_CASE("policy-inspect reports metadata and per-block statistics") {
  const fs::path dir = scratch_dir("inspect");
  const fs::path cfg = write_tiny_config(dir);
  REQUIRE(run_cli("train --config " + cfg.string()).exit_code == 0);

  const CmdResult r = run_cli("policy-inspect --checkpoint " +
                              (dir / "runs/unified/seed1/final/checkpoint.bin").string());
  CHECK(r.exit_code == 0);
  const json rep = json::parse(r.out);
  CHECK(rep["meta"]["seed"] == 1);
  CHECK(rep["all_finite"] == true);
  CHECK(rep["n_params"].get<size_t>() > 0);
  CHECK(!rep["blocks"].empty());
  CHECK(rep["blocks"][0].contains("l2"));
}

TEST_CASE("merge combines checkpoints and insists on an anchor for gaussian") {
  const fs::path dir = scratch_dir("merge");
  const fs::path cfg = write_tiny_config(dir, {{"paradigm", "separate_merge"}});
  REQUIRE(run_cli("train --config " + cfg.string()).exit_code == 0);
  const std::string a = (dir / "runs/separate_merge/seed1/t2i/checkpoint.bin").string();
  const std::string b = (dir / "runs/separate_merge/seed1/und/checkpoint.bin").string();

  const CmdResult avg = run_cli("merge --a " + a + " --b " + b + " --strategy average --out " +
                                (dir / "avg.bin").string());
  CHECK(avg.exit_code == 0);
  CHECK(fs::exists(dir / "avg.bin"));

  const CmdResult bad = run_cli("merge --a " + a + " --b " + b + " --strategy gaussian --out " +
                                (dir / "g.bin").string());
  CHECK(bad.exit_code == 1);
  CHECK(stderr_error(bad)["code"] == "bad-argument");
}

TEST_CASE("pilot emits a comparison table whose aggregates recompute") {
  const fs::path dir = scratch_dir("pilot");
  const fs::path cfg = write_tiny_config(
      dir, {{"seeds", {1, 2}}, {"total_steps", 8}, {"eval", {{"n_gen", 8}, {"n_qa", 4}}}});

  const CmdResult r = run_cli("pilot --config " + cfg.string());
  CHECK(r.exit_code == 0);

  const std::string csv = corl::read_file(dir / "runs/pilot/comparison.csv");
  std::vector<std::vector<std::string>> rows;
  size_t pos = 0;
  while (pos < csv.size()) {
    size_t eol = csv.find('\n', pos);
    if (eol == std::string::npos) eol = csv.size();
    std::vector<std::string> cells;
    size_t p = pos;
    while (p < eol) {
      size_t comma = csv.find(',', p);
      if (comma == std::string::npos || comma > eol) comma = eol;
      cells.push_back(csv.substr(p, comma - p));
      p = comma + 1;
    }
    if (!cells.empty()) rows.push_back(cells);
    pos = eol + 1;
  }
  REQUIRE(rows.size() == 1 + 6 * 3); // header + 6 paradigms x (2 seeds + mean)

  // every aggregate row is the arithmetic mean of its per-seed rows
  std::map<std::string, std::vector<std::vector<double>>> per_seed;
  std::map<std::string, std::vector<double>> mean_row;
  for (size_t i = 1; i < rows.size(); ++i) {
    std::vector<double> vals;
    for (size_t c = 2; c < rows[i].size(); ++c) vals.push_back(std::stod(rows[i][c]));
    if (rows[i][1] == "mean") {
      mean_row[rows[i][0]] = vals;
    } else {
      per_seed[rows[i][0]].push_back(vals);
    }
  }
  REQUIRE(mean_row.size() == 6);
  for (const auto& [paradigm, seeds] : per_seed) {
    REQUIRE(seeds.size() == 2);
    for (size_t c = 0; c < seeds[0].size(); ++c) {
      const double mean = (seeds[0][c] + seeds[1][c]) / 2.0;
      CHECK(mean_row[paradigm][c] == doctest::Approx(mean).epsilon(1e-12));
    }
  }

  for (const std::string p : {"separate_t2i", "separate_und", "separate_merge", "cycle",
                              "unified", "corl"}) {
    const std::string curves = corl::read_file(dir / ("runs/pilot/curves_" + p + ".csv"));
    CHECK(curves.rfind("seed,stage,branch,step,task,", 0) == 0);
    CHECK(curves.find("\n1,") != std::string::npos); // rows for seed 1 present
  }
}

TEST_CASE("environment variables override output dir and workers only") {
  const fs::path dir = scratch_dir("env_override");
  const fs::path redirect = scratch_dir("env_redirect");
  const fs::path cfg = write_tiny_config(dir);

  const CmdResult r = run_shell("CORL_OUTPUT_DIR=" + redirect.string() + " CORL_WORKERS=3 " +
                                std::string(CORL_CLI_PATH) + " train --config " + cfg.string());
  CHECK(r.exit_code == 0);
  CHECK_FALSE(fs::exists(dir / "runs"));
  CHECK(fs::exists(redirect / "unified/seed1/record.json"));

  const CmdResult bad = run_shell("CORL_WORKERS=zero " + std::string(CORL_CLI_PATH) +
                                  " train --config " + cfg.string());
  CHECK(bad.exit_code != 0);
  CHECK(stderr_error(bad)["code"] == "config-invalid");
}

TEST_CASE("the training process writes nowhere outside the output directory") {
  const fs::path dir = scratch_dir("containment");
  const fs::path cwd = scratch_dir("containment_cwd");
  const fs::path cfg = write_tiny_config(dir);

  const CmdResult r = run_shell("cd " + cwd.string() + " && " + std::string(CORL_CLI_PATH) +
                                " train --config " + cfg.string());
  CHECK(r.exit_code == 0);
  CHECK(fs::is_empty(cwd));
  CHECK(fs::exists(dir / "runs/unified/seed1/record.json"));
}
