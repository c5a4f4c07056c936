#pragma once

#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dte/agents.hpp"
#include "dte/debate.hpp"
#include "dte/domain.hpp"
#include "dte/grpo.hpp"
#include "dte/metrics.hpp"
#include "dte/traces.hpp"
#include "dte/util.hpp"

namespace dte {

enum class TrainerKind { toy_grpo, external_command, none };

inline std::string to_string(TrainerKind k) {
  switch (k) {
    case TrainerKind::toy_grpo: return "toy_grpo";
    case TrainerKind::external_command: return "external_command";
    case TrainerKind::none: return "none";
  }
  throw std::invalid_argument("unknown trainer kind");
}

inline TrainerKind trainer_kind_from_string(const std::string& s) {
  if (s == "toy_grpo") return TrainerKind::toy_grpo;
  if (s == "external_command") return TrainerKind::external_command;
  if (s == "none") return TrainerKind::none;
  throw ConfigError("unknown trainer kind: " + s);
}

// Toy-policy shape used when trainer = toy_grpo. Action labels double as the
// answers the evolved member emits, so they should already be in canonical
// answer form.
struct ToyTrainerConfig {
  std::vector<std::string> action_labels;
  int n_contexts = 1;
  bool operator==(const ToyTrainerConfig&) const = default;
};

inline void to_json(json& j, const ToyTrainerConfig& c) {
  j = json{{"action_labels", c.action_labels}, {"n_contexts", c.n_contexts}};
}

inline void from_json(const json& j, ToyTrainerConfig& c) {
  c = ToyTrainerConfig{};
  if (j.contains("action_labels")) j.at("action_labels").get_to(c.action_labels);
  if (j.contains("n_contexts")) j.at("n_contexts").get_to(c.n_contexts);
}

struct EvolutionConfig {
  int max_iterations = 5;           // K
  int batch_size = 8;               // queries debated per iteration
  double stopping_threshold = 0.01; // relative improvement gate
  int patience = 1;                 // consecutive sub-threshold iterations to stop
  bool small_model = false;         // enables the temperature decay schedule
  double temp_start = 0.7;
  double temp_end = 0.3;
  TrainerKind trainer = TrainerKind::none;
  std::string trainer_command;      // external_command template
  int student_agent_id = -1;        // -1: lowest agent id in the pool
  SelectionStrategy selection = SelectionStrategy::all_traces();
  ToyTrainerConfig toy;
  bool operator==(const EvolutionConfig&) const = default;
};

inline void to_json(json& j, const EvolutionConfig& c) {
  j = json{{"max_iterations", c.max_iterations},
           {"batch_size", c.batch_size},
           {"stopping_threshold", c.stopping_threshold},
           {"patience", c.patience},
           {"small_model", c.small_model},
           {"temp_start", c.temp_start},
           {"temp_end", c.temp_end},
           {"trainer", to_string(c.trainer)},
           {"trainer_command", c.trainer_command},
           {"student_agent_id", c.student_agent_id},
           {"selection", c.selection},
           {"toy", c.toy}};
}

inline void from_json(const json& j, EvolutionConfig& c) {
  c = EvolutionConfig{};
  if (j.contains("max_iterations")) j.at("max_iterations").get_to(c.max_iterations);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("stopping_threshold")) j.at("stopping_threshold").get_to(c.stopping_threshold);
  if (j.contains("patience")) j.at("patience").get_to(c.patience);
  if (j.contains("small_model")) j.at("small_model").get_to(c.small_model);
  if (j.contains("temp_start")) j.at("temp_start").get_to(c.temp_start);
  if (j.contains("temp_end")) j.at("temp_end").get_to(c.temp_end);
  if (j.contains("trainer"))
    c.trainer = trainer_kind_from_string(j.at("trainer").get<std::string>());
  if (j.contains("trainer_command")) j.at("trainer_command").get_to(c.trainer_command);
  if (j.contains("student_agent_id")) j.at("student_agent_id").get_to(c.student_agent_id);
  if (j.contains("selection")) j.at("selection").get_to(c.selection);
  if (j.contains("toy")) j.at("toy").get_to(c.toy);
}

inline void validate_evolution_config(const EvolutionConfig& c) {
  if (c.max_iterations < 1) throw ConfigError("evolution: max_iterations must be >= 1");
  if (c.batch_size < 1) throw ConfigError("evolution: batch_size must be >= 1");
  if (!(c.stopping_threshold > 0.0 && c.stopping_threshold < 1.0))
    throw ConfigError("evolution: stopping_threshold must be in (0, 1)");
  if (c.patience < 1) throw ConfigError("evolution: patience must be >= 1");
  if (c.temp_end > c.temp_start)
    throw ConfigError("evolution: temp_end must not exceed temp_start");
  if (c.trainer == TrainerKind::external_command && c.trainer_command.empty())
    throw ConfigError("evolution: external_command trainer needs trainer_command");
  if (c.trainer == TrainerKind::toy_grpo) {
    if (c.toy.action_labels.size() < 2)
      throw ConfigError("evolution: toy trainer needs at least 2 action labels");
    if (c.toy.n_contexts < 1) throw ConfigError("evolution: toy n_contexts must be >= 1");
  }
}

// Debate temperature for evolution iteration k (1-based). Small models decay
// linearly from temp_start to temp_end across the run; everything else stays
// at temp_start.
inline double temperature_for_round(int k, const EvolutionConfig& config) {
  if (k < 1 || k > config.max_iterations)
    throw std::invalid_argument("temperature_for_round: k out of range");
  if (!config.small_model) return config.temp_start;
  const double span = config.temp_start - config.temp_end;
  const double step = static_cast<double>(k - 1) / std::max(config.max_iterations - 1, 1);
  return std::max(config.temp_end, config.temp_start - span * step);
}

// Stops once the trailing `patience` relative improvements all fall below the
// threshold, or when the iteration cap is reached.
inline bool should_stop(const std::vector<double>& history, const EvolutionConfig& config) {
  if (static_cast<int>(history.size()) >= config.max_iterations) return true;
  if (static_cast<int>(history.size()) < config.patience + 1) return false;
  for (std::size_t i = history.size() - config.patience; i < history.size(); ++i) {
    const double previous = history[i - 1];
    const double improvement =
        (history[i] - previous) / std::max(std::abs(previous), 1e-12);
    if (improvement >= config.stopping_threshold) return false;
  }
  return true;
}

inline void ensure_disjoint_splits(const std::vector<Query>& train,
                                   const std::vector<Query>& holdout) {
  std::set<std::string> train_ids;
  for (const auto& q : train) train_ids.insert(q.id);
  for (const auto& q : holdout) {
    if (train_ids.count(q.id))
      throw ConfigError("evolution: query " + q.id + " appears in both splits");
  }
}

// --- validation reward ---

// Mean shaped reward of policy samples against each query's gold answer.
// Components are scored directly (formatted, zero-length output), matching
// the toy member's idealized emission.
inline double evaluate_validation_reward(const ToyPolicy& policy,
                                         const std::vector<Query>& holdout,
                                         const RewardParams& reward_params, int n_contexts,
                                         std::uint64_t seed) {
  if (holdout.empty()) throw ConfigError("validation: empty held-out split");
  validate_policy(policy);
  double total = 0.0;
  for (const auto& q : holdout) {
    if (!q.gold_answer) throw ConfigError("validation: query " + q.id + " has no gold answer");
    const int ctx =
        ToyPolicyAgent::context_of(q.id, std::min(n_contexts, policy.n_contexts()));
    std::mt19937_64 rng = make_rng(mix_seed({seed, fnv1a(q.id)}));
    const int action = sample_action(policy, ctx, 1.0, rng);
    const bool correct =
        answers_equal(policy.action_labels[action], *q.gold_answer, q.task_kind);
    total += shaped_reward_components(correct, true, 0, reward_params);
  }
  return total / static_cast<double>(holdout.size());
}

// Mean shaped reward of one backend's single-pass (round-0) outputs.
inline double evaluate_validation_reward(AgentBackend& backend, const AgentConfig& agent,
                                         const std::vector<Query>& holdout,
                                         const RewardParams& reward_params,
                                         const PromptTemplates& templates,
                                         std::uint64_t seed) {
  if (holdout.empty()) throw ConfigError("validation: empty held-out split");
  double total = 0.0;
  for (const auto& q : holdout) {
    if (!q.gold_answer) throw ConfigError("validation: query " + q.id + " has no gold answer");
    AgentRequest request;
    request.prompt = build_round0_prompt(q, templates);
    request.temperature = agent.temperature;
    request.seed = mix_seed({seed, fnv1a(q.id), static_cast<std::uint64_t>(agent.agent_id)});
    TurnContext context;
    context.query_id = q.id;
    context.round = 0;
    context.task_kind = q.task_kind;
    context.gold_answer = q.gold_answer;
    const std::string raw = backend.respond(request, context);
    total += shaped_reward(raw, *q.gold_answer, q.task_kind, reward_params);
  }
  return total / static_cast<double>(holdout.size());
}

// --- external trainer ---

namespace detail {

// Runs the external trainer command; success is exit 0 plus exactly one
// non-empty stdout line naming the updated agent identity.
inline std::string run_external_trainer(const std::string& command_template,
                                        const std::filesystem::path& traces_path,
                                        int iteration) {
  const std::string command = render_template(
      command_template, {{"traces_path", traces_path.string()},
                         {"iteration", std::to_string(iteration)}});
  FILE* pipe = ::popen(command.c_str(), "r");
  if (!pipe) throw TrainingError("trainer command failed to launch: " + command);
  std::string output;
  char buffer[4096];
  std::size_t n;
  while ((n = std::fread(buffer, 1, sizeof buffer, pipe)) > 0) output.append(buffer, n);
  const int status = ::pclose(pipe);
  if (status == -1 || !WIFEXITED(status) || WEXITSTATUS(status) != 0)
    throw TrainingError("trainer command exited with failure: " + command);
  while (!output.empty() && (output.back() == '\n' || output.back() == '\r'))
    output.pop_back();
  if (output.empty() || output.find('\n') != std::string::npos)
    throw TrainingError("trainer command must print exactly one identifier line");
  return output;
}

inline void write_json_file(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline void write_text_file(const std::string& text, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace detail

// Bandit environment over a trace set: one task per example, context hashed
// from the query id, full reward on the consensus label and the format plus
// brevity terms elsewhere.
inline ToyEnvironment make_toy_environment(const std::vector<TrainingExample>& examples,
                                           const ToyTrainerConfig& toy,
                                           const RewardParams& reward_params) {
  ToyEnvironment env;
  for (const auto& e : examples) {
    ToyTask task;
    task.context = ToyPolicyAgent::context_of(e.query_id, toy.n_contexts);
    for (const auto& label : toy.action_labels) {
      task.action_rewards.push_back(
          shaped_reward_components(label == e.y_star, true, 0, reward_params));
    }
    env.tasks.push_back(std::move(task));
  }
  return env;
}

// --- the evolution loop ---

struct EvolutionResult {
  EvolutionState state;
  double baseline_reward = 0.0;
  std::string halt_reason;          // non-empty when a failure stopped the run early
  std::filesystem::path out_dir;
};

inline EvolutionResult run_evolution(const std::vector<Query>& train_queries,
                                     const std::vector<Query>& holdout_queries,
                                     const std::vector<AgentConfig>& initial_pool,
                                     const DebateConfig& debate_config,
                                     const EvolutionConfig& config,
                                     const RewardParams& reward_params,
                                     const GrpoParams& grpo_params,
                                     const std::filesystem::path& out_dir,
                                     std::uint64_t seed, int parallelism = 4,
                                     const PromptTemplates& templates = PromptTemplates::defaults()) {
  validate_evolution_config(config);
  if (train_queries.empty()) throw ConfigError("evolution: no training queries");
  if (holdout_queries.empty()) throw ConfigError("evolution: empty held-out split");
  if (initial_pool.empty()) throw ConfigError("evolution: empty agent pool");
  ensure_disjoint_splits(train_queries, holdout_queries);

  int student_id = config.student_agent_id;
  if (student_id < 0) {
    student_id = initial_pool.front().agent_id;
    for (const auto& a : initial_pool) student_id = std::min(student_id, a.agent_id);
  }
  const auto student_of = [&](std::vector<AgentConfig>& pool) -> AgentConfig& {
    for (auto& a : pool) {
      if (a.agent_id == student_id) return a;
    }
    throw ConfigError("evolution: student agent " + std::to_string(student_id) +
                      " is not in the pool");
  };

  std::vector<AgentConfig> pool = initial_pool;
  AgentConfig& student_init = student_of(pool);
  if (config.trainer == TrainerKind::toy_grpo && student_init.backend != BackendKind::toy)
    throw ConfigError("evolution: toy_grpo trainer needs a toy-backed student agent");

  // Shared toy-policy slot; the factory's provider reads it so every rebuild
  // of the backends sees the latest trained policy.
  struct PolicySlot {
    std::mutex m;
    std::shared_ptr<const ToyPolicy> current;
  };
  auto slot = std::make_shared<PolicySlot>();
  std::shared_ptr<const ToyPolicy> reference;
  BackendFactoryOptions factory_options;
  const bool uses_toy =
      std::any_of(pool.begin(), pool.end(),
                  [](const AgentConfig& a) { return a.backend == BackendKind::toy; });
  if (uses_toy) {
    if (config.toy.action_labels.size() < 2)
      throw ConfigError("evolution: toy-backed agents need toy.action_labels");
    auto initial_policy = std::make_shared<const ToyPolicy>(
        make_uniform_policy(config.toy.n_contexts, config.toy.action_labels));
    slot->current = initial_policy;
    reference = initial_policy;
    factory_options.policy_provider = [slot]() {
      std::lock_guard lock(slot->m);
      return slot->current;
    };
    for (auto& a : pool) {
      if (a.backend == BackendKind::toy)
        a.backend_params["n_contexts"] = std::to_string(config.toy.n_contexts);
    }
  }

  std::filesystem::create_directories(out_dir);

  const auto validation_reward = [&](const std::vector<AgentConfig>& current_pool,
                                     std::uint64_t eval_seed) {
    if (config.trainer == TrainerKind::toy_grpo) {
      std::shared_ptr<const ToyPolicy> policy;
      {
        std::lock_guard lock(slot->m);
        policy = slot->current;
      }
      return evaluate_validation_reward(*policy, holdout_queries, reward_params,
                                        config.toy.n_contexts, eval_seed);
    }
    std::vector<AgentConfig> snapshot = current_pool;
    AgentConfig student = student_of(snapshot);
    auto backend = make_backend(student, factory_options);
    return evaluate_validation_reward(*backend, student, holdout_queries, reward_params,
                                      templates, eval_seed);
  };

  EvolutionResult result;
  result.out_dir = out_dir;
  result.state.iteration = 0;
  result.state.max_iterations = config.max_iterations;
  result.state.agent_pool = pool;
  result.baseline_reward = validation_reward(pool, mix_seed({seed, 0x7641, 0}));

  for (int k = 1; k <= config.max_iterations; ++k) {
    const auto iter_dir = out_dir / ("iter_" + std::to_string(k));
    std::filesystem::create_directories(iter_dir);

    // Seeded batch sample without replacement.
    std::vector<std::size_t> indices(train_queries.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    auto batch_rng = make_rng(mix_seed({seed, static_cast<std::uint64_t>(k), 0xBA7C}));
    const std::size_t take =
        std::min<std::size_t>(config.batch_size, train_queries.size());
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + uniform_index(batch_rng, indices.size() - i);
      std::swap(indices[i], indices[j]);
    }
    std::vector<Query> batch;
    batch.reserve(take);
    for (std::size_t i = 0; i < take; ++i) batch.push_back(train_queries[indices[i]]);

    // Debates at the scheduled temperature.
    std::vector<AgentConfig> debate_pool = pool;
    if (config.small_model) {
      const double temperature = temperature_for_round(k, config);
      for (auto& a : debate_pool) a.temperature = temperature;
    }
    DebateEngine engine(debate_pool, debate_config, templates,
                        mix_seed({seed, static_cast<std::uint64_t>(k)}), factory_options);
    const auto outcomes = engine.run_batch(batch, parallelism);

    std::vector<DebateRecord> records;
    for (const auto& o : outcomes) {
      if (o.record) records.push_back(*o.record);
    }
    {
      std::ofstream rec_out(iter_dir / "records.jsonl", std::ios::binary | std::ios::trunc);
      for (const auto& r : records) rec_out << canonical_json(r) << '\n';
    }

    // A batch with no surviving debate can never produce traces; halt with the
    // first per-query diagnostic instead of spinning through empty iterations.
    if (records.empty()) {
      std::string first_error;
      bool transport = false;
      for (const auto& o : outcomes) {
        if (o.error.empty()) continue;
        if (o.transport_error) {
          first_error = o.error;
          transport = true;
          break;
        }
        if (first_error.empty()) first_error = o.error;
      }
      result.halt_reason = "iteration " + std::to_string(k) + ": no debate records";
      if (!first_error.empty())
        result.halt_reason += std::string("; ") + (transport ? "transport: " : "") + first_error;
      break;
    }

    std::vector<TrainingExample> examples;
    for (const auto& r : records) {
      if (auto e = extract_training_example(r, reward_params)) examples.push_back(*e);
    }
    const std::vector<TrainingExample> selected = select(examples, config.selection);
    const auto traces_path = iter_dir / "traces.jsonl";
    persist(selected, traces_path);

    // Trainer invocation; a failure halts with the state of iteration k-1.
    try {
      switch (config.trainer) {
        case TrainerKind::none:
          break;
        case TrainerKind::toy_grpo: {
          if (selected.empty())
            throw TrainingError("iteration " + std::to_string(k) + ": no training examples");
          const ToyEnvironment env = make_toy_environment(selected, config.toy, reward_params);
          GrpoParams params = grpo_params;
          params.seed = mix_seed({seed, static_cast<std::uint64_t>(k), 0x6772});
          std::shared_ptr<const ToyPolicy> before;
          {
            std::lock_guard lock(slot->m);
            before = slot->current;
          }
          TrainResult trained = grpo_train(*before, *reference, env, params);
          {
            std::lock_guard lock(slot->m);
            slot->current = std::make_shared<const ToyPolicy>(trained.policy);
          }
          detail::write_json_file(json(trained.policy), iter_dir / "policy.json");
          detail::write_text_file(render_train_log_csv(trained.log),
                                  iter_dir / "objective.csv");
          student_of(pool).backend_params["policy_version"] = std::to_string(k);
          break;
        }
        case TrainerKind::external_command: {
          const std::string identity =
              detail::run_external_trainer(config.trainer_command, traces_path, k);
          student_of(pool).backend_params["model"] = identity;
          break;
        }
      }
    } catch (const std::exception& e) {
      result.halt_reason = e.what();
      break;
    }

    // Iteration bookkeeping and artifacts.
    std::vector<PerRecordMetrics> scored;
    for (const auto& r : records) {
      if (r.query.gold_answer) scored.push_back(score_record(r, *r.query.gold_answer));
    }
    if (!scored.empty()) {
      const MetricsReport report = aggregate(scored, static_cast<int>(scored.size()));
      detail::write_json_file(json(report), iter_dir / "metrics.json");
    }

    RunManifest manifest;
    manifest.dataset = batch.empty() ? "" : batch.front().dataset;
    manifest.agent_pool = pool;
    manifest.config_hash = config_hash_of(json{{"debate", debate_config},
                                               {"evolution", config},
                                               {"reward", reward_params},
                                               {"grpo", grpo_params},
                                               {"seed", seed}});
    manifest.n_records = static_cast<int>(records.size());
    manifest.n_examples = static_cast<int>(selected.size());
    write_manifest(manifest, iter_dir / "manifest.json");

    const double reward =
        validation_reward(pool, mix_seed({seed, 0x7641, static_cast<std::uint64_t>(k)}));
    result.state.iteration = k;
    result.state.agent_pool = pool;
    result.state.validation_reward_history.push_back(reward);
    result.state.trace_sets.push_back("iter_" + std::to_string(k) + "/traces.jsonl");

    if (should_stop(result.state.validation_reward_history, config)) break;
  }

  detail::write_json_file(json(result.state), out_dir / "state.json");
  detail::write_json_file(json{{"baseline_reward", result.baseline_reward},
                               {"iterations", result.state.iteration},
                               {"halt_reason", result.halt_reason}},
                          out_dir / "summary.json");
  return result;
}

}  // namespace dte
