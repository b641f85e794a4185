#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "avsink/errors.hpp"
#include "avsink/pipeline.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace avsink;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("avsink_test_" + name);
  fs::remove_all(p);
  return p;
}

RunConfig small(const fs::path& out) {
  RunConfig c;
  c.out = out.string();
  c.n_samples = 12;
  c.n_captions = 6;
  c.sink.probe_count = 3;
  return c;
}

std::vector<std::string> csv_rows(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::vector<std::string> rows;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') rows.push_back(line);
  return rows;
}

int run_cli(const std::string& args) {
  const int rc = std::system((std::string(AVSINK_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("config parsing") {
  const RunConfig c = run_config_from_json_text(
      R"({"seed": 3, "sink": {"n": [2], "tau": 2.5}, "guidance": {"method": "pai", "alpha": 0.3}, "threads": 2})");
  CHECK(c.seed == 3);
  CHECK(c.sink.n == std::vector<int>{2});
  CHECK(c.sink.tau == 2.5);
  CHECK(c.guidance.method == "pai");
  CHECK(c.guidance.asd.alpha == 0.3);
  CHECK(c.threads == 2);
  CHECK_FALSE(run_config_from_json_text(R"({"sink": {"tau": "auto"}})").sink.tau.has_value());
  CHECK_THROWS_AS(run_config_from_json_text(R"({"seeed": 3})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json_text(R"({"sink": {"m": 3}})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json_text(R"({"seed": "x"})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json_text("[1,2"), ConfigError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("config validation and hashing") {
  RunConfig c;
  c.validate();
  RunConfig d = c;
  d.out = "/elsewhere";
  d.threads = 4;
  CHECK(d.config_hash() == c.config_hash());
  d.seed = 8;
  CHECK(d.config_hash() != c.config_hash());
  RunConfig bad = c;
  bad.guidance.method = "beam";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.strategies = {"everything"};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.sink.n = {};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.corruption = "none";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
}

TEST_CASE("parallel_for keeps index order and propagates errors") {
  std::vector<int> out(50, -1);
  parallel_for(50, 4, [&](int i) { out[i] = i * i; });
  for (int i = 0; i < 50; ++i) CHECK(out[i] == i * i);
  CHECK_THROWS_AS(parallel_for(10, 3, [](int i) {
                    if (i == 7) throw DataError("boom");
                  }),
                  DataError);
}

TEST_CASE("pipeline artifacts") {
  const fs::path out = scratch("pipeline");
  RunConfig c = small(out);
  c.sink.n = {2, 3, 4};
  std::ostringstream log;
  cmd_gen(c, log);
  CHECK(log.str().find("D_sink") != std::string::npos);
  for (const char* f : {"model.bin", "dataset.jsonl", "captions.jsonl", "vocab.json", "filter.json"})
    CHECK(fs::exists(out / f));

  const auto filter = nlohmann::json::parse(slurp(out / "filter.json"));
  CHECK(filter["retained"].size() > 0);
  CHECK(filter["_meta"]["config_hash"] == c.config_hash());

  cmd_trace(c, log);
  const auto rows = csv_rows(out / "table.csv");
  REQUIRE(!rows.empty());
  CHECK(rows[0] == "modality,ablation,ie_clean,ie_corr,n_tokens");
  int sink_rows = 0;
  std::map<std::string, std::string> ntok;
  for (const auto& r : rows) {
    std::vector<std::string> f;
    std::stringstream ss(r);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (f[0] == "audio" && f[1].rfind("sink_n", 0) == 0) ++sink_rows;
    ntok[f[0] + "/" + f[1]] = f[4];
  }
  CHECK(sink_rows == 3);
  for (const char* n : {"2", "3", "4"})
    for (const char* m : {"audio", "video"})
      CHECK(ntok[std::string(m) + "/random_n" + n] == ntok[std::string(m) + "/sink_n" + n]);
  const std::string first_line = slurp(out / "traces.jsonl").substr(0, 8);
  CHECK(first_line == "{\"_meta\"");

  RunConfig only_all = c;
  only_all.strategies = {"all"};
  cmd_trace(only_all, log);
  CHECK(csv_rows(out / "table.csv").size() == 3u);  // header + audio + video

  cmd_sinks(c, log);
  const auto sinks = nlohmann::json::parse(slurp(out / "sinks.json"));
  CHECK(sinks["partition"]["audio"]["uni"].size() == sinks["partition"]["audio"]["cross"].size());
  CHECK(log.str().find("matches the planted routing") != std::string::npos);
  const std::string mds_csv = slurp(out / "mds.csv");
  cmd_sinks(c, log);
  CHECK(slurp(out / "mds.csv") == mds_csv);

  for (const char* m : {"vanilla", "asd"}) {
    RunConfig d = c;
    d.guidance.method = m;
    cmd_decode(d, log);
  }
  CHECK(fs::exists(out / "guidance_asd.jsonl"));
  CHECK_FALSE(fs::exists(out / "guidance_vanilla.jsonl"));
  cmd_eval(c, log);
  const auto ev = csv_rows(out / "eval.csv");
  REQUIRE(ev.size() == 3u);
  CHECK(ev[0] == "method,c_s,c_i,f1");
  const auto js = nlohmann::json::parse(slurp(out / "eval_asd.json"));
  for (const char* k : {"c_s", "c_i", "f1"}) {
    CHECK(js[k].get<double>() >= 0);
    CHECK(js[k].get<double>() <= 1);
  }
  CHECK(js["per_caption"].size() == 6u);

  // Threads do not change artifacts.
  const std::string table = slurp(out / "table.csv");
  RunConfig threaded = only_all;
  threaded.threads = 3;
  cmd_trace(only_all, log);
  const std::string one = slurp(out / "traces.jsonl");
  cmd_trace(threaded, log);
  CHECK(slurp(out / "traces.jsonl") == one);
  fs::remove_all(out);
}

TEST_CASE("pipeline errors") {
  const fs::path out = scratch("errors");
  RunConfig c = small(out);
  CHECK_THROWS_AS(cmd_trace(c, std::cout), DataError);  // no model yet
  CHECK_THROWS_AS(cmd_eval(c, std::cout), ConfigError);  // vocabulary missing
  std::ostringstream log;
  cmd_gen(c, log);
  CHECK_THROWS_AS(cmd_eval(c, log), DataError);  // nothing decoded
  // A filter file that keeps nothing leaves the trace with no samples.
  {
    auto f = nlohmann::json::parse(slurp(out / "filter.json"));
    f["retained"] = nlohmann::json::array();
    std::ofstream(out / "filter.json") << f.dump();
  }
  CHECK_THROWS_WITH_AS(cmd_trace(c, log), doctest::Contains("dominance filter"), DataError);
  fs::remove_all(out);
}

TEST_CASE("command-line exit codes") {
  const fs::path out = scratch("cli");
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 2);
  CHECK(run_cli("gen --bogus") == 2);
  CHECK(run_cli("gen --config /nonexistent.json") == 2);
  CHECK(run_cli("trace --out " + out.string()) == 3);
  {
    fs::create_directories(out);
    std::ofstream(out / "cfg.json") << R"({"n_samples": 4, "n_captions": 3, "sink": {"probe_count": 2}})";
  }
  const std::string cfg = "--config " + (out / "cfg.json").string();
  CHECK(run_cli("decode --guidance nonsense " + cfg + " --out " + out.string()) == 2);
  const std::string env = std::string("AVSINK_OUT=") + (out / "viaenv").string() + " ";
  const int rc = std::system((env + AVSINK_CLI_PATH + " gen " + cfg + " >/dev/null 2>&1").c_str());
  CHECK(WEXITSTATUS(rc) == 0);
  CHECK(fs::exists(out / "viaenv" / "model.bin"));
  CHECK(run_cli("decode --guidance asd --alpha 0.3 --n 2 --threads 2 " + cfg + " --out " + (out / "viaenv").string()) ==
        0);
  CHECK(run_cli("eval " + cfg + " --out " + (out / "viaenv").string()) == 0);
  fs::remove_all(out);
}
