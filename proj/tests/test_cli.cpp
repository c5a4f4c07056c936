#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "dte/domain.hpp"

using namespace dte;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("dte-cli-" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

CliResult run_cli(const TempDir& dir, const std::string& args) {
  const fs::path out_file = dir.path / "_stdout.txt";
  const fs::path err_file = dir.path / "_stderr.txt";
  const std::string command = "cd '" + dir.path.string() + "' && '" + DTE_CLI_PATH + "' " +
                              args + " > '" + out_file.string() + "' 2> '" +
                              err_file.string() + "'";
  const int status = std::system(command.c_str());
  CliResult result;
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  result.out = slurp(out_file);
  result.err = slurp(err_file);
  return result;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

std::string mock_script(const json& table) { return table.dump(); }

// Three GSM-style queries plus a pool whose second query needs one debate
// round and whose third never converges.
void write_debate_fixture(const TempDir& dir) {
  write_file(dir.path / "data.jsonl",
             R"({"question": "What is 2+2?", "answer": "Two twos. #### 4"})"
             "\n"
             R"({"question": "What is 3*5?", "answer": "Three fives. #### 15"})"
             "\n"
             R"({"question": "What is 10-3?", "answer": "Take three. #### 7"})"
             "\n");

  json pool = json::array();
  pool.push_back({{"agent_id", 1},
                  {"backend", "mock"},
                  {"temperature", 0.0},
                  {"backend_params",
                   {{"script_json",
                     mock_script({{"demo:test:2",
                                   {{"0", "Five threes. \\boxed{14}"},
                                    {"*", "Corrected after review. \\boxed{15}"}}},
                                  {"demo:test:3", {{"*", "Seven stay. \\boxed{7}"}}},
                                  {"*", {{"*", "I add carefully. \\boxed{4}"}}}})}}}});
  pool.push_back({{"agent_id", 2},
                  {"backend", "mock"},
                  {"temperature", 0.0},
                  {"backend_params",
                   {{"script_json",
                     mock_script({{"demo:test:2", {{"*", "Adding five thrice. \\boxed{15}"}}},
                                  {"demo:test:3", {{"*", "Stubbornly four. \\boxed{4}"}}},
                                  {"*", {{"*", "Plainly four. \\boxed{4}"}}}})}}}});
  pool.push_back({{"agent_id", 3},
                  {"backend", "mock"},
                  {"temperature", 0.0},
                  {"backend_params",
                   {{"script_json",
                     mock_script({{"demo:test:2", {{"*", "Triple five. \\boxed{15}"}}},
                                  {"demo:test:3", {{"*", "Seven remain. \\boxed{7}"}}},
                                  {"*", {{"*", "Four total. \\boxed{4}"}}}})}}}});

  const json config = {{"dataset",
                        {{"path", "data.jsonl"},
                         {"name", "demo"},
                         {"split", "test"},
                         {"task_kind", "math"},
                         {"expected_count", 3}}},
                       {"agent_pool", pool},
                       {"debate", {{"max_rounds", 5}}},
                       {"output_dir", "out"},
                       {"seed", 7}};
  write_file(dir.path / "config.json", config.dump(2));
  write_file(dir.path / "data.jsonl.manifest.json",
             R"({"name": "demo", "split": "test", "task_kind": "math", "expected_count": 3})");
}

int count_lines(const fs::path& path) {
  std::ifstream in(path);
  int n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("debate run writes records plus a metrics report and is idempotent") {
  TempDir dir;
  write_debate_fixture(dir);

  const CliResult first = run_cli(dir, "debate run --config config.json");
  INFO(first.err);
  CHECK(first.exit_code == 0);
  CHECK_THAT(first.out, Catch::Matchers::ContainsSubstring("wrote 3 records"));

  REQUIRE(fs::exists(dir.path / "out" / "records.jsonl"));
  CHECK(count_lines(dir.path / "out" / "records.jsonl") == 3);

  const json report = json::parse(slurp(dir.path / "out" / "metrics.json"));
  CHECK(report.at("accuracy").get<double>() == Catch::Approx(1.0));
  CHECK(report.at("n_queries").get<int>() == 3);
  CHECK(report.at("i_to_c").get<int>() == 1);

  const std::string records_before = slurp(dir.path / "out" / "records.jsonl");
  const CliResult second = run_cli(dir, "debate run --config config.json");
  CHECK(second.exit_code == 0);
  CHECK(slurp(dir.path / "out" / "records.jsonl") == records_before);
}

TEST_CASE("debate run reports per-query failures and exits 2") {
  TempDir dir;
  write_debate_fixture(dir);
  // Break agent 3's script for the third query only.
  json config = json::parse(slurp(dir.path / "config.json"));
  auto& params = config["agent_pool"][2]["backend_params"];
  params["script_json"] =
      mock_script({{"demo:test:2", {{"*", "Triple five. \\boxed{15}"}}},
                   {"demo:test:1", {{"*", "Four total. \\boxed{4}"}}}});
  write_file(dir.path / "config.json", config.dump(2));

  const CliResult result = run_cli(dir, "debate run --config config.json");
  CHECK(result.exit_code == 2);
  CHECK_THAT(result.out, Catch::Matchers::ContainsSubstring("wrote 2 records"));
  CHECK_THAT(result.err, Catch::Matchers::ContainsSubstring("demo:test:3"));
  CHECK(count_lines(dir.path / "out" / "records.jsonl") == 2);
}

TEST_CASE("traces extract honors strategies including the hyphenated spelling") {
  TempDir dir;
  write_debate_fixture(dir);
  REQUIRE(run_cli(dir, "debate run --config config.json").exit_code == 0);

  const CliResult all = run_cli(
      dir, "traces extract --records out/records.jsonl --strategy all_traces --out all.jsonl");
  CHECK(all.exit_code == 0);
  CHECK(count_lines(dir.path / "all.jsonl") == 3);

  const CliResult debate_only = run_cli(
      dir, "traces extract --records out/records.jsonl --strategy debate-only --out d.jsonl");
  CHECK(debate_only.exit_code == 0);
  CHECK(count_lines(dir.path / "d.jsonl") == 2);

  const CliResult random_k = run_cli(
      dir, "traces extract --records out/records.jsonl --strategy random_k:2:9 --out r1.jsonl");
  CHECK(random_k.exit_code == 0);
  CHECK(count_lines(dir.path / "r1.jsonl") == 2);
  REQUIRE(run_cli(dir, "traces extract --records out/records.jsonl --strategy random_k:2:9 "
                       "--out r2.jsonl")
              .exit_code == 0);
  CHECK(slurp(dir.path / "r1.jsonl") == slurp(dir.path / "r2.jsonl"));

  const CliResult bad = run_cli(
      dir, "traces extract --records out/records.jsonl --strategy random_q --out x.jsonl");
  CHECK(bad.exit_code == 1);
  CHECK_THAT(bad.err, Catch::Matchers::ContainsSubstring("unknown selection strategy"));
}

TEST_CASE("traces extract on consensus-only records with debate-only yields an empty file") {
  TempDir dir;
  write_file(dir.path / "data.jsonl",
             R"({"question": "What is 2+2?", "answer": "#### 4"})"
             "\n");
  json pool = json::array();
  for (int id = 1; id <= 2; ++id) {
    pool.push_back({{"agent_id", id},
                    {"backend", "mock"},
                    {"temperature", 0.0},
                    {"backend_params",
                     {{"script_json", mock_script({{"*", {{"*", "Easy. \\boxed{4}"}}}})}}}});
  }
  const json config = {{"dataset",
                        {{"path", "data.jsonl"},
                         {"name", "demo"},
                         {"split", "test"},
                         {"task_kind", "math"}}},
                       {"agent_pool", pool},
                       {"output_dir", "out"}};
  write_file(dir.path / "config.json", config.dump(2));

  REQUIRE(run_cli(dir, "debate run --config config.json").exit_code == 0);
  const CliResult result = run_cli(
      dir, "traces extract --records out/records.jsonl --strategy debate-only --out d.jsonl");
  CHECK(result.exit_code == 0);
  CHECK(fs::exists(dir.path / "d.jsonl"));
  CHECK(count_lines(dir.path / "d.jsonl") == 0);
}

TEST_CASE("train toy fits a policy from traces and writes its artifacts") {
  TempDir dir;
  write_debate_fixture(dir);
  REQUIRE(run_cli(dir, "debate run --config config.json").exit_code == 0);
  REQUIRE(run_cli(dir, "traces extract --records out/records.jsonl --strategy all_traces "
                       "--out all.jsonl")
              .exit_code == 0);

  const json train_config = {
      {"evolution", {{"toy", {{"action_labels", {"4", "7", "15"}}, {"n_contexts", 2}}}}},
      {"grpo", {{"steps", 120}, {"learning_rate", 0.1}, {"seed", 5}}},
      {"output_dir", "train_out"}};
  write_file(dir.path / "train.json", train_config.dump(2));

  const CliResult result = run_cli(dir, "train toy --traces all.jsonl --config train.json");
  INFO(result.err);
  CHECK(result.exit_code == 0);
  REQUIRE(fs::exists(dir.path / "train_out" / "policy.json"));
  REQUIRE(fs::exists(dir.path / "train_out" / "objective.csv"));

  const json policy = json::parse(slurp(dir.path / "train_out" / "policy.json"));
  CHECK(policy.at("action_labels") == json({"4", "7", "15"}));
  const std::string csv = slurp(dir.path / "train_out" / "objective.csv");
  CHECK_THAT(csv, Catch::Matchers::StartsWith("step,objective,mean_reward,mean_kl\n"));
  CHECK(count_lines(dir.path / "train_out" / "objective.csv") == 121);

  const CliResult missing_labels = run_cli(dir, "train toy --traces all.jsonl");
  CHECK(missing_labels.exit_code == 1);
}

TEST_CASE("evolve run drives the loop end to end from a config file") {
  TempDir dir;
  std::ostringstream train, holdout;
  for (int i = 0; i < 12; ++i)
    train << R"({"question": "Train )" << i << R"(?", "answer": "#### 4"})" << '\n';
  for (int i = 0; i < 6; ++i)
    holdout << R"({"question": "Holdout )" << i << R"(?", "answer": "#### 4"})" << '\n';
  write_file(dir.path / "train.jsonl", train.str());
  write_file(dir.path / "holdout.jsonl", holdout.str());

  json pool = json::array();
  pool.push_back({{"agent_id", 1},
                  {"backend", "mock"},
                  {"temperature", 0.0},
                  {"backend_params",
                   {{"script_json", mock_script({{"*", {{"*", "Correct sum. \\boxed{4}"}}}})}}}});
  pool.push_back({{"agent_id", 2},
                  {"backend", "mock"},
                  {"temperature", 0.0},
                  {"backend_params",
                   {{"script_json", mock_script({{"*", {{"*", "Agreed fully. \\boxed{4}"}}}})}}}});
  pool.push_back(
      {{"agent_id", 3}, {"backend", "toy"}, {"temperature", 1.0}, {"backend_params", json::object()}});

  const json config = {
      {"dataset",
       {{"path", "train.jsonl"}, {"name", "evo"}, {"split", "train"}, {"task_kind", "math"}}},
      {"holdout",
       {{"path", "holdout.jsonl"},
        {"name", "evo_holdout"},
        {"split", "validation"},
        {"task_kind", "math"}}},
      {"agent_pool", pool},
      {"debate", {{"max_rounds", 5}}},
      {"evolution",
       {{"max_iterations", 4},
        {"batch_size", 6},
        {"stopping_threshold", 0.01},
        {"patience", 1},
        {"trainer", "toy_grpo"},
        {"student_agent_id", 3},
        {"toy", {{"action_labels", {"4", "7", "9", "13"}}, {"n_contexts", 1}}}}},
      {"grpo", {{"steps", 120}, {"learning_rate", 0.1}, {"group_size", 8}}},
      {"output_dir", "evo_out"},
      {"parallelism", 2},
      {"seed", 20260822}};
  write_file(dir.path / "evolve.json", config.dump(2));

  const CliResult result = run_cli(dir, "evolve run --config evolve.json");
  INFO(result.err);
  CHECK(result.exit_code == 0);
  CHECK_THAT(result.out, Catch::Matchers::ContainsSubstring("baseline reward"));

  REQUIRE(fs::exists(dir.path / "evo_out" / "summary.json"));
  REQUIRE(fs::exists(dir.path / "evo_out" / "state.json"));
  const json summary = json::parse(slurp(dir.path / "evo_out" / "summary.json"));
  const json state = json::parse(slurp(dir.path / "evo_out" / "state.json"));
  const int iterations = summary.at("iterations").get<int>();
  CHECK(iterations >= 1);
  CHECK(iterations <= 4);
  CHECK(summary.at("halt_reason").get<std::string>().empty());
  REQUIRE(fs::exists(dir.path / "evo_out" / "iter_1" / "records.jsonl"));
  REQUIRE(fs::exists(dir.path / "evo_out" / "iter_1" / "traces.jsonl"));
  REQUIRE(fs::exists(dir.path / "evo_out" / "iter_1" / "policy.json"));

  const auto history = state.at("validation_reward_history").get<std::vector<double>>();
  REQUIRE(static_cast<int>(history.size()) == iterations);
  CHECK(history.front() > summary.at("baseline_reward").get<double>());
}

TEST_CASE("evolve run against an unreachable backend exits 2 with a transport diagnostic") {
  TempDir dir;
  write_file(dir.path / "train.jsonl", R"({"question": "T?", "answer": "#### 4"})"
                                       "\n");
  write_file(dir.path / "holdout.jsonl", R"({"question": "H?", "answer": "#### 4"})"
                                         "\n");
  json pool = json::array();
  for (int id = 1; id <= 2; ++id) {
    pool.push_back({{"agent_id", id},
                    {"backend", "http"},
                    {"temperature", 0.0},
                    {"backend_params",
                     {{"base_url", "http://127.0.0.1:9"},
                      {"model", "m"},
                      {"max_attempts", "2"},
                      {"retry_backoff_ms", "1"},
                      {"timeout_ms", "200"}}}});
  }
  const json config = {
      {"dataset",
       {{"path", "train.jsonl"}, {"name", "t"}, {"split", "train"}, {"task_kind", "math"}}},
      {"holdout",
       {{"path", "holdout.jsonl"}, {"name", "h"}, {"split", "validation"}, {"task_kind", "math"}}},
      {"agent_pool", pool},
      {"debate", {{"max_rounds", 2}}},
      {"evolution", {{"max_iterations", 2}, {"batch_size", 1}, {"trainer", "none"}}},
      {"output_dir", "http_out"},
      {"seed", 1}};
  write_file(dir.path / "evolve.json", config.dump(2));

  const CliResult result = run_cli(dir, "evolve run --config evolve.json");
  CHECK(result.exit_code == 2);
  CHECK_THAT(result.err, Catch::Matchers::ContainsSubstring("transport"));
}

TEST_CASE("metrics report scores records against a gold dataset") {
  TempDir dir;
  write_debate_fixture(dir);
  REQUIRE(run_cli(dir, "debate run --config config.json").exit_code == 0);

  const CliResult result = run_cli(
      dir,
      "metrics report --records out/records.jsonl --gold data.jsonl --baseline 0.6 "
      "--out report.json");
  INFO(result.err);
  CHECK(result.exit_code == 0);

  const json report = json::parse(result.out);
  CHECK(report.at("accuracy").get<double>() == Catch::Approx(1.0));
  CHECK(report.at("delta_vs_baseline").get<double>() == Catch::Approx(0.4));
  CHECK(report.at("n_queries").get<int>() == 3);
  CHECK(json::parse(slurp(dir.path / "report.json")) == report);

  SECTION("a missing manifest is a config error") {
    fs::remove(dir.path / "data.jsonl.manifest.json");
    const CliResult missing = run_cli(
        dir, "metrics report --records out/records.jsonl --gold data.jsonl");
    CHECK(missing.exit_code == 1);
    CHECK_THAT(missing.err, Catch::Matchers::ContainsSubstring("gold-manifest"));
  }
}

TEST_CASE("export csv flattens the report with one column per metric") {
  TempDir dir;
  write_debate_fixture(dir);
  REQUIRE(run_cli(dir, "debate run --config config.json").exit_code == 0);
  REQUIRE(run_cli(dir, "metrics report --records out/records.jsonl --gold data.jsonl "
                       "--out report.json")
              .exit_code == 0);

  const CliResult to_stdout = run_cli(dir, "export csv --report report.json");
  CHECK(to_stdout.exit_code == 0);
  CHECK_THAT(to_stdout.out,
             Catch::Matchers::StartsWith(
                 "accuracy,delta_vs_baseline,avg_debate_rounds,sycophancy_per_query,"
                 "c_to_i,i_to_c,debate_helped,n_queries\n"));
  CHECK_THAT(to_stdout.out, Catch::Matchers::ContainsSubstring("\n1.0,0.0,2.0,0.0,0,1,0,3\n"));

  const CliResult to_file = run_cli(dir, "export csv --report report.json --out report.csv");
  CHECK(to_file.exit_code == 0);
  CHECK(slurp(dir.path / "report.csv") == to_stdout.out);
}

TEST_CASE("bad invocations exit 1 with usage text") {
  TempDir dir;
  const CliResult unknown_flag = run_cli(dir, "debate run --config missing.json --bogus x");
  CHECK(unknown_flag.exit_code == 1);
  CHECK_THAT(unknown_flag.err, Catch::Matchers::ContainsSubstring("Usage") ||
                                   Catch::Matchers::ContainsSubstring("Subcommands"));

  const CliResult no_subcommand = run_cli(dir, "");
  CHECK(no_subcommand.exit_code == 1);

  const CliResult missing_file = run_cli(dir, "debate run --config missing.json");
  CHECK(missing_file.exit_code == 1);

  const CliResult help = run_cli(dir, "--help");
  CHECK(help.exit_code == 0);
  CHECK_THAT(help.out, Catch::Matchers::ContainsSubstring("debate"));
}
