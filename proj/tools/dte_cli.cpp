// Pipeline driver: debates, trace extraction, toy training, evolution runs,
// metric reports, and CSV export over the library's JSON artifacts.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dte/datasets.hpp"
#include "dte/debate.hpp"
#include "dte/evolve.hpp"
#include "dte/metrics.hpp"
#include "dte/traces.hpp"

namespace fs = std::filesystem;
using namespace dte;

namespace {

struct DatasetRef {
  std::string path;
  DatasetManifest manifest;
};

DatasetRef parse_dataset_ref(const json& j) {
  DatasetRef ref;
  ref.path = j.at("path").get<std::string>();
  ref.manifest = j.get<DatasetManifest>();
  return ref;
}

// One JSON document drives every subcommand; sections it does not need are
// simply ignored. Flags override the matching keys.
struct RunConfig {
  std::optional<DatasetRef> dataset;
  std::optional<DatasetRef> holdout;
  std::vector<AgentConfig> agent_pool;
  DebateConfig debate;
  EvolutionConfig evolution;
  RewardParams reward;
  GrpoParams grpo;
  std::string output_dir = "out";
  int parallelism = 4;
  std::uint64_t seed = 0;
  std::optional<std::string> templates_dir;
  std::optional<int> limit;
};

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("bad JSON in " + path + ": " + e.what());
  }
  RunConfig c;
  try {
    if (j.contains("dataset")) c.dataset = parse_dataset_ref(j.at("dataset"));
    if (j.contains("holdout")) c.holdout = parse_dataset_ref(j.at("holdout"));
    if (j.contains("agent_pool"))
      c.agent_pool = j.at("agent_pool").get<std::vector<AgentConfig>>();
    if (j.contains("debate")) c.debate = j.at("debate").get<DebateConfig>();
    if (j.contains("evolution")) c.evolution = j.at("evolution").get<EvolutionConfig>();
    if (j.contains("reward")) c.reward = j.at("reward").get<RewardParams>();
    if (j.contains("grpo")) c.grpo = j.at("grpo").get<GrpoParams>();
    if (j.contains("output_dir")) j.at("output_dir").get_to(c.output_dir);
    if (j.contains("parallelism")) j.at("parallelism").get_to(c.parallelism);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("templates_dir"))
      c.templates_dir = j.at("templates_dir").get<std::string>();
    if (j.contains("limit")) c.limit = j.at("limit").get<int>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("bad config in " + path + ": " + e.what());
  }
  return c;
}

// Flag-side overrides shared by the run-style subcommands.
struct Overrides {
  std::optional<std::string> output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> parallelism;
  std::optional<int> limit;
};

void apply(const Overrides& o, RunConfig& c) {
  if (o.output_dir) c.output_dir = *o.output_dir;
  if (o.seed) c.seed = *o.seed;
  if (o.parallelism) c.parallelism = *o.parallelism;
  if (o.limit) c.limit = *o.limit;
}

PromptTemplates templates_of(const RunConfig& c) {
  return c.templates_dir ? PromptTemplates::load_dir(*c.templates_dir)
                         : PromptTemplates::defaults();
}

std::vector<Query> load_queries(const DatasetRef& ref, const std::optional<int>& limit) {
  std::vector<Query> queries = load_dataset(ref.path, ref.manifest);
  if (limit && *limit >= 0 && static_cast<std::size_t>(*limit) < queries.size())
    queries.resize(static_cast<std::size_t>(*limit));
  return queries;
}

// Toy pool members need a policy to sample from; outside an evolution run the
// CLI freezes a uniform policy over the configured action labels.
BackendFactoryOptions factory_options_of(const RunConfig& c) {
  BackendFactoryOptions options;
  const bool any_toy = std::any_of(c.agent_pool.begin(), c.agent_pool.end(), [](const auto& a) {
    return a.backend == BackendKind::toy;
  });
  if (!any_toy) return options;
  if (c.evolution.toy.action_labels.size() < 2)
    throw ConfigError("toy agents in the pool need evolution.toy.action_labels (>= 2 labels)");
  auto policy = std::make_shared<const ToyPolicy>(
      make_uniform_policy(c.evolution.toy.n_contexts, c.evolution.toy.action_labels));
  options.policy_provider = [policy] { return policy; };
  return options;
}

std::vector<DebateRecord> load_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read records file " + path);
  std::vector<DebateRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      records.push_back(json::parse(line).get<DebateRecord>());
    } catch (const std::exception& e) {
      throw std::runtime_error("bad record at " + path + " line " + std::to_string(line_no) +
                               ": " + e.what());
    }
  }
  return records;
}

void write_json_file(const json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("bad JSON in " + path + ": " + e.what());
  }
  return j;
}

int cmd_debate_run(const std::string& config_path, const Overrides& overrides) {
  RunConfig c = load_run_config(config_path);
  apply(overrides, c);
  if (!c.dataset) throw ConfigError("debate run: config needs a dataset section");
  if (c.agent_pool.empty()) throw ConfigError("debate run: config needs a non-empty agent_pool");
  c.debate.prompt_template_set = c.dataset->manifest.task_kind;

  const std::vector<Query> queries = load_queries(*c.dataset, c.limit);
  const PromptTemplates templates = templates_of(c);
  fs::create_directories(c.output_dir);

  DebateEngine engine(c.agent_pool, c.debate, templates, c.seed, factory_options_of(c));
  const std::vector<DebateOutcome> outcomes = engine.run_batch(queries, c.parallelism);

  const fs::path records_path = fs::path(c.output_dir) / "records.jsonl";
  std::ofstream records_out(records_path, std::ios::binary | std::ios::trunc);
  if (!records_out) throw std::runtime_error("cannot write " + records_path.string());

  std::vector<PerRecordMetrics> scored;
  int failures = 0;
  bool transport = false;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const DebateOutcome& outcome = outcomes[i];
    if (!outcome.record) {
      ++failures;
      transport = transport || outcome.transport_error;
      std::cerr << "query " << queries[i].id << ": " << outcome.error << '\n';
      continue;
    }
    records_out << canonical_json(*outcome.record) << '\n';
    if (queries[i].gold_answer)
      scored.push_back(score_record(*outcome.record, *queries[i].gold_answer));
  }
  records_out.close();

  if (!scored.empty()) {
    const MetricsReport report = aggregate(scored, static_cast<int>(scored.size()));
    write_json_file(json(report), fs::path(c.output_dir) / "metrics.json");
  }
  std::cout << "wrote " << (outcomes.size() - failures) << " records to " << records_path.string()
            << " (" << failures << " failed)" << '\n';
  if (failures > 0) {
    std::cerr << (transport ? "transport errors occurred" : "per-query errors occurred") << '\n';
    return 2;
  }
  return 0;
}

int cmd_traces_extract(const std::string& records_path, std::string strategy_text,
                       const std::string& out_path,
                       const std::optional<std::string>& config_path) {
  // Accept hyphenated strategy spellings from the command line.
  std::replace(strategy_text.begin(), strategy_text.end(), '-', '_');
  const SelectionStrategy strategy = parse_selection_strategy(strategy_text);
  const RewardParams reward =
      config_path ? load_run_config(*config_path).reward : RewardParams{};

  const std::vector<DebateRecord> records = load_records(records_path);
  std::vector<TrainingExample> examples;
  for (const auto& record : records) {
    if (auto example = extract_training_example(record, reward)) examples.push_back(*example);
  }
  const std::vector<TrainingExample> selected = select(examples, strategy);
  persist(selected, out_path);
  std::cout << "wrote " << selected.size() << " traces to " << out_path << " (from "
            << records.size() << " records)" << '\n';
  return 0;
}

int cmd_train_toy(const std::string& traces_path, const std::optional<std::string>& config_path,
                  const Overrides& overrides) {
  RunConfig c = config_path ? load_run_config(*config_path) : RunConfig{};
  apply(overrides, c);
  if (c.evolution.toy.action_labels.size() < 2)
    throw ConfigError("train toy: config needs evolution.toy.action_labels (>= 2 labels)");
  if (overrides.seed) c.grpo.seed = *overrides.seed;

  const std::vector<TrainingExample> examples = load_traces(traces_path);
  if (examples.empty()) throw TrainingError("train toy: no training examples in " + traces_path);

  const ToyEnvironment env = make_toy_environment(examples, c.evolution.toy, c.reward);
  const ToyPolicy initial =
      make_uniform_policy(c.evolution.toy.n_contexts, c.evolution.toy.action_labels);
  const TrainResult result = grpo_train(initial, initial, env, c.grpo);

  fs::create_directories(c.output_dir);
  write_json_file(json(result.policy), fs::path(c.output_dir) / "policy.json");
  detail::write_text_file(render_train_log_csv(result.log),
                          fs::path(c.output_dir) / "objective.csv");
  const double final_objective = result.log.steps.empty() ? 0.0 : result.log.steps.back().objective;
  std::cout << "trained " << c.grpo.steps << " steps on " << examples.size()
            << " traces; final objective " << final_objective << "; policy in " << c.output_dir
            << '\n';
  return 0;
}

int cmd_evolve_run(const std::string& config_path, const Overrides& overrides) {
  RunConfig c = load_run_config(config_path);
  apply(overrides, c);
  if (!c.dataset) throw ConfigError("evolve run: config needs a dataset section");
  if (!c.holdout) throw ConfigError("evolve run: config needs a holdout section");
  if (c.agent_pool.empty()) throw ConfigError("evolve run: config needs a non-empty agent_pool");

  const std::vector<Query> train = load_queries(*c.dataset, c.limit);
  const std::vector<Query> holdout = load_queries(*c.holdout, c.limit);
  const PromptTemplates templates = templates_of(c);
  c.debate.prompt_template_set = c.dataset->manifest.task_kind;
  fs::create_directories(c.output_dir);

  const EvolutionResult result =
      run_evolution(train, holdout, c.agent_pool, c.debate, c.evolution, c.reward, c.grpo,
                    c.output_dir, c.seed, c.parallelism, templates);

  std::cout << "completed " << result.state.iteration << " iterations; baseline reward "
            << result.baseline_reward;
  if (!result.state.validation_reward_history.empty())
    std::cout << "; final validation reward " << result.state.validation_reward_history.back();
  std::cout << "; artifacts in " << result.out_dir.string() << '\n';
  if (!result.halt_reason.empty()) {
    std::cerr << "halted: " << result.halt_reason << '\n';
    return 2;
  }
  return 0;
}

int cmd_metrics_report(const std::string& records_path, const std::string& gold_path,
                       const std::optional<std::string>& manifest_path,
                       const std::optional<double>& baseline,
                       const std::optional<std::string>& out_path) {
  DatasetManifest manifest;
  if (manifest_path) {
    manifest = read_dataset_manifest(*manifest_path);
  } else {
    const std::string sidecar = gold_path + ".manifest.json";
    if (!fs::exists(sidecar))
      throw ConfigError("metrics report: pass --gold-manifest or provide the sidecar " + sidecar);
    manifest = read_dataset_manifest(sidecar);
  }
  const std::vector<Query> queries = load_dataset(gold_path, manifest);
  std::map<std::string, std::string> gold;
  for (const auto& q : queries) {
    if (q.gold_answer) gold[q.id] = *q.gold_answer;
  }

  const std::vector<DebateRecord> records = load_records(records_path);
  if (records.empty()) throw std::runtime_error("metrics report: no records in " + records_path);
  std::vector<PerRecordMetrics> scored;
  for (const auto& record : records) {
    auto it = gold.find(record.query.id);
    if (it == gold.end())
      throw std::runtime_error("metrics report: no gold answer for query " + record.query.id);
    scored.push_back(score_record(record, it->second));
  }
  const MetricsReport report = aggregate(scored, static_cast<int>(scored.size()), baseline);

  const json j(report);
  std::cout << j.dump(2) << '\n';
  if (out_path) write_json_file(j, *out_path);
  return 0;
}

int cmd_export_csv(const std::string& report_path, const std::optional<std::string>& out_path) {
  const json j = read_json_file(report_path);
  MetricsReport report;
  try {
    report = j.get<MetricsReport>();
  } catch (const std::exception& e) {
    throw std::runtime_error("bad metrics report in " + report_path + ": " + e.what());
  }
  const json row(report);

  static const char* kColumns[] = {"accuracy",      "delta_vs_baseline",
                                   "avg_debate_rounds", "sycophancy_per_query",
                                   "c_to_i",        "i_to_c",
                                   "debate_helped", "n_queries"};
  std::string csv;
  for (const char* column : kColumns) {
    csv += column;
    csv += (column == kColumns[std::size(kColumns) - 1]) ? '\n' : ',';
  }
  for (const char* column : kColumns) {
    csv += row.at(column).dump();
    csv += (column == kColumns[std::size(kColumns) - 1]) ? '\n' : ',';
  }

  if (out_path) {
    detail::write_text_file(csv, *out_path);
    std::cout << "wrote " << *out_path << '\n';
  } else {
    std::cout << csv;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-agent debate, trace distillation, and policy evolution driver"};
  app.require_subcommand(1);
  std::function<int()> action;

  auto add_overrides = [](CLI::App* sub, Overrides& o) {
    sub->add_option("--output-dir", o.output_dir, "Override the configured output directory");
    sub->add_option("--seed", o.seed, "Override the configured global seed");
    sub->add_option("--parallelism", o.parallelism, "Override the configured worker bound");
    sub->add_option("--limit", o.limit, "Use only the first N queries of each split");
  };

  // debate run
  auto* debate = app.add_subcommand("debate", "Run multi-agent debates over a dataset");
  debate->require_subcommand(1);
  {
    auto* run = debate->add_subcommand("run", "Debate every query and write records + metrics");
    auto config = std::make_shared<std::string>();
    auto overrides = std::make_shared<Overrides>();
    run->add_option("--config", *config, "Run configuration JSON")
        ->required()
        ->check(CLI::ExistingFile);
    add_overrides(run, *overrides);
    run->callback([&action, config, overrides] {
      action = [config, overrides] { return cmd_debate_run(*config, *overrides); };
    });
  }

  // traces extract
  auto* traces = app.add_subcommand("traces", "Work with training traces");
  traces->require_subcommand(1);
  {
    auto* extract = traces->add_subcommand("extract", "Extract and select traces from records");
    auto records = std::make_shared<std::string>();
    auto strategy = std::make_shared<std::string>("all_traces");
    auto out = std::make_shared<std::string>("traces.jsonl");
    auto config = std::make_shared<std::optional<std::string>>();
    extract->add_option("--records", *records, "Debate records JSON Lines")
        ->required()
        ->check(CLI::ExistingFile);
    extract->add_option("--strategy", *strategy,
                        "all_traces | debate_only | random_k:K[:SEED] (hyphens accepted)");
    extract->add_option("--out", *out, "Trace file to write");
    extract->add_option("--config", *config, "Run configuration JSON for reward parameters");
    extract->callback([&action, records, strategy, out, config] {
      action = [records, strategy, out, config] {
        return cmd_traces_extract(*records, *strategy, *out, *config);
      };
    });
  }

  // train toy
  auto* train = app.add_subcommand("train", "Train policies from traces");
  train->require_subcommand(1);
  {
    auto* toy = train->add_subcommand("toy", "Fit the toy policy to a trace file");
    auto traces_path = std::make_shared<std::string>();
    auto config = std::make_shared<std::optional<std::string>>();
    auto overrides = std::make_shared<Overrides>();
    toy->add_option("--traces", *traces_path, "Training trace JSON Lines")
        ->required()
        ->check(CLI::ExistingFile);
    toy->add_option("--config", *config, "Run configuration JSON");
    add_overrides(toy, *overrides);
    toy->callback([&action, traces_path, config, overrides] {
      action = [traces_path, config, overrides] {
        return cmd_train_toy(*traces_path, *config, *overrides);
      };
    });
  }

  // evolve run
  auto* evolve = app.add_subcommand("evolve", "Run the debate-train-evolve loop");
  evolve->require_subcommand(1);
  {
    auto* run = evolve->add_subcommand("run", "Iterate debates, training, and pool updates");
    auto config = std::make_shared<std::string>();
    auto overrides = std::make_shared<Overrides>();
    run->add_option("--config", *config, "Run configuration JSON")
        ->required()
        ->check(CLI::ExistingFile);
    add_overrides(run, *overrides);
    run->callback([&action, config, overrides] {
      action = [config, overrides] { return cmd_evolve_run(*config, *overrides); };
    });
  }

  // metrics report
  auto* metrics = app.add_subcommand("metrics", "Score debate records");
  metrics->require_subcommand(1);
  {
    auto* report = metrics->add_subcommand("report", "Aggregate records against gold answers");
    auto records = std::make_shared<std::string>();
    auto gold = std::make_shared<std::string>();
    auto manifest = std::make_shared<std::optional<std::string>>();
    auto baseline = std::make_shared<std::optional<double>>();
    auto out = std::make_shared<std::optional<std::string>>();
    report->add_option("--records", *records, "Debate records JSON Lines")
        ->required()
        ->check(CLI::ExistingFile);
    report->add_option("--gold", *gold, "Dataset file holding the gold answers")
        ->required()
        ->check(CLI::ExistingFile);
    report->add_option("--gold-manifest", *manifest,
                       "Dataset manifest JSON (default: <gold>.manifest.json)");
    report->add_option("--baseline", *baseline, "Single-model accuracy for the delta column");
    report->add_option("--out", *out, "Also write the report JSON here");
    report->callback([&action, records, gold, manifest, baseline, out] {
      action = [records, gold, manifest, baseline, out] {
        return cmd_metrics_report(*records, *gold, *manifest, *baseline, *out);
      };
    });
  }

  // export csv
  auto* exporter = app.add_subcommand("export", "Convert artifacts for plotting");
  exporter->require_subcommand(1);
  {
    auto* csv = exporter->add_subcommand("csv", "Flatten a metrics report to CSV");
    auto report = std::make_shared<std::string>();
    auto out = std::make_shared<std::optional<std::string>>();
    csv->add_option("--report", *report, "Metrics report JSON")
        ->required()
        ->check(CLI::ExistingFile);
    csv->add_option("--out", *out, "CSV file to write (default: stdout)");
    csv->callback([&action, report, out] {
      action = [report, out] { return cmd_export_csv(*report, *out); };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    std::cerr << "error: " << e.what() << "\n\n" << app.help() << '\n';
    return 1;
  }

  try {
    return action();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const TransportError& e) {
    std::cerr << "transport error: " << e.what() << '\n';
    return 2;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
