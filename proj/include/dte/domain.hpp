#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dte/util.hpp"

namespace dte {

using json = nlohmann::json;

enum class TaskKind { math, science, commonsense };
enum class BackendKind { mock, probabilistic, http, toy };
enum class TerminationKind { consensus, majority_vote };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::math: return "math";
    case TaskKind::science: return "science";
    case TaskKind::commonsense: return "commonsense";
  }
  throw std::invalid_argument("unknown TaskKind");
}

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "math") return TaskKind::math;
  if (s == "science") return TaskKind::science;
  if (s == "commonsense") return TaskKind::commonsense;
  throw std::invalid_argument("unknown task_kind: " + s);
}

inline std::string to_string(BackendKind b) {
  switch (b) {
    case BackendKind::mock: return "mock";
    case BackendKind::probabilistic: return "probabilistic";
    case BackendKind::http: return "http";
    case BackendKind::toy: return "toy";
  }
  throw std::invalid_argument("unknown BackendKind");
}

inline BackendKind backend_from_string(const std::string& s) {
  if (s == "mock") return BackendKind::mock;
  if (s == "probabilistic") return BackendKind::probabilistic;
  if (s == "http") return BackendKind::http;
  if (s == "toy") return BackendKind::toy;
  throw std::invalid_argument("unknown backend: " + s);
}

struct Choice {
  std::string label;
  std::string text;
  bool operator==(const Choice&) const = default;
};

struct Query {
  std::string id;
  std::string text;
  TaskKind task_kind = TaskKind::math;
  std::optional<std::vector<Choice>> choices;
  std::optional<std::string> gold_answer;
  std::string dataset;
  bool operator==(const Query&) const = default;
};

struct AgentConfig {
  int agent_id = 0;
  BackendKind backend = BackendKind::mock;
  double temperature = 0.0;
  std::map<std::string, std::string> backend_params;
  bool operator==(const AgentConfig&) const = default;
};

struct AgentTurn {
  int agent_id = 0;
  int round = 0;
  std::string answer;     // normalized extraction of raw_text; "" if extraction failed
  std::string rationale;
  std::string raw_text;
  bool novel_step = true;
  bool operator==(const AgentTurn&) const = default;
};

struct Termination {
  TerminationKind kind = TerminationKind::majority_vote;
  std::optional<int> round;  // present iff kind == consensus
  bool operator==(const Termination&) const = default;
};

struct DebateRecord {
  Query query;
  std::vector<std::vector<AgentTurn>> rounds;  // outer index = round t
  std::string final_answer;
  Termination termination;
  int agent_count = 0;
  int max_rounds = 0;
  bool operator==(const DebateRecord&) const = default;
};

struct TrainingExample {
  std::string query_id;
  std::string x;
  std::string y_star;
  std::string rationale;
  int source_round_count = 0;  // debate rounds t >= 1 in the source record
  double reward = 0.0;
  bool operator==(const TrainingExample&) const = default;
};

struct RewardParams {
  double w_vote = 2.0;
  double w_fmt = 0.5;
  double w_brev = 0.5;
  double tau = 120.0;
  bool operator==(const RewardParams&) const = default;
};

struct GrpoParams {
  double epsilon = 0.2;
  double beta = 0.02;
  double learning_rate = 0.1;
  int steps = 200;
  int group_size = 8;
  std::uint64_t seed = 0;
  bool group_mean_baseline = false;
  bool operator==(const GrpoParams&) const = default;
};

struct EvolutionState {
  int iteration = 0;
  int max_iterations = 5;
  std::vector<AgentConfig> agent_pool;
  std::vector<double> validation_reward_history;
  std::vector<std::string> trace_sets;
  bool operator==(const EvolutionState&) const = default;
};

struct MetricsReport {
  double accuracy = 0.0;
  double delta_vs_baseline = 0.0;
  double avg_debate_rounds = 0.0;
  double sycophancy_per_query = 0.0;
  std::int64_t c_to_i = 0;
  std::int64_t i_to_c = 0;
  std::int64_t debate_helped = 0;
  std::int64_t n_queries = 0;
  bool operator==(const MetricsReport&) const = default;
};

// --- canonical JSON codecs (field names as listed; absent optionals omitted) ---

inline void to_json(json& j, const Choice& c) { j = json{{"label", c.label}, {"text", c.text}}; }
inline void from_json(const json& j, Choice& c) {
  j.at("label").get_to(c.label);
  j.at("text").get_to(c.text);
}

inline void to_json(json& j, const Query& q) {
  j = json{{"id", q.id},
           {"text", q.text},
           {"task_kind", to_string(q.task_kind)},
           {"dataset", q.dataset}};
  if (q.choices) j["choices"] = *q.choices;
  if (q.gold_answer) j["gold_answer"] = *q.gold_answer;
}

inline void from_json(const json& j, Query& q) {
  j.at("id").get_to(q.id);
  j.at("text").get_to(q.text);
  q.task_kind = task_kind_from_string(j.at("task_kind").get<std::string>());
  j.at("dataset").get_to(q.dataset);
  if (j.contains("choices")) q.choices = j.at("choices").get<std::vector<Choice>>();
  else q.choices.reset();
  if (j.contains("gold_answer")) q.gold_answer = j.at("gold_answer").get<std::string>();
  else q.gold_answer.reset();
}

inline void to_json(json& j, const AgentConfig& a) {
  j = json{{"agent_id", a.agent_id},
           {"backend", to_string(a.backend)},
           {"temperature", a.temperature},
           {"backend_params", a.backend_params}};
}

inline void from_json(const json& j, AgentConfig& a) {
  j.at("agent_id").get_to(a.agent_id);
  a.backend = backend_from_string(j.at("backend").get<std::string>());
  j.at("temperature").get_to(a.temperature);
  if (j.contains("backend_params"))
    a.backend_params = j.at("backend_params").get<std::map<std::string, std::string>>();
  else
    a.backend_params.clear();
}

inline void to_json(json& j, const AgentTurn& t) {
  j = json{{"agent_id", t.agent_id}, {"round", t.round},   {"answer", t.answer},
           {"rationale", t.rationale}, {"raw_text", t.raw_text}, {"novel_step", t.novel_step}};
}

inline void from_json(const json& j, AgentTurn& t) {
  j.at("agent_id").get_to(t.agent_id);
  j.at("round").get_to(t.round);
  j.at("answer").get_to(t.answer);
  j.at("rationale").get_to(t.rationale);
  j.at("raw_text").get_to(t.raw_text);
  j.at("novel_step").get_to(t.novel_step);
}

inline void to_json(json& j, const Termination& t) {
  if (t.kind == TerminationKind::consensus)
    j = json{{"kind", "consensus"}, {"round", t.round.value_or(0)}};
  else
    j = json{{"kind", "majority_vote"}};
}

inline void from_json(const json& j, Termination& t) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "consensus") {
    t.kind = TerminationKind::consensus;
    t.round = j.at("round").get<int>();
  } else if (kind == "majority_vote") {
    t.kind = TerminationKind::majority_vote;
    t.round.reset();
  } else {
    throw std::invalid_argument("unknown termination kind: " + kind);
  }
}

inline void to_json(json& j, const DebateRecord& r) {
  j = json{{"query", r.query},
           {"rounds", r.rounds},
           {"final_answer", r.final_answer},
           {"termination", r.termination},
           {"agent_count", r.agent_count},
           {"max_rounds", r.max_rounds}};
}

inline void from_json(const json& j, DebateRecord& r) {
  j.at("query").get_to(r.query);
  j.at("rounds").get_to(r.rounds);
  j.at("final_answer").get_to(r.final_answer);
  j.at("termination").get_to(r.termination);
  j.at("agent_count").get_to(r.agent_count);
  j.at("max_rounds").get_to(r.max_rounds);
}

inline void to_json(json& j, const TrainingExample& e) {
  j = json{{"query_id", e.query_id}, {"x", e.x},
           {"y_star", e.y_star},     {"rationale", e.rationale},
           {"source_round_count", e.source_round_count}, {"reward", e.reward}};
}

inline void from_json(const json& j, TrainingExample& e) {
  j.at("query_id").get_to(e.query_id);
  j.at("x").get_to(e.x);
  j.at("y_star").get_to(e.y_star);
  j.at("rationale").get_to(e.rationale);
  j.at("source_round_count").get_to(e.source_round_count);
  j.at("reward").get_to(e.reward);
}

inline void to_json(json& j, const RewardParams& p) {
  j = json{{"w_vote", p.w_vote}, {"w_fmt", p.w_fmt}, {"w_brev", p.w_brev}, {"tau", p.tau}};
}

inline void from_json(const json& j, RewardParams& p) {
  p = RewardParams{};
  if (j.contains("w_vote")) j.at("w_vote").get_to(p.w_vote);
  if (j.contains("w_fmt")) j.at("w_fmt").get_to(p.w_fmt);
  if (j.contains("w_brev")) j.at("w_brev").get_to(p.w_brev);
  if (j.contains("tau")) j.at("tau").get_to(p.tau);
}

inline void to_json(json& j, const GrpoParams& p) {
  j = json{{"epsilon", p.epsilon},
           {"beta", p.beta},
           {"learning_rate", p.learning_rate},
           {"steps", p.steps},
           {"group_size", p.group_size},
           {"seed", p.seed},
           {"group_mean_baseline", p.group_mean_baseline}};
}

inline void from_json(const json& j, GrpoParams& p) {
  p = GrpoParams{};
  if (j.contains("epsilon")) j.at("epsilon").get_to(p.epsilon);
  if (j.contains("beta")) j.at("beta").get_to(p.beta);
  if (j.contains("learning_rate")) j.at("learning_rate").get_to(p.learning_rate);
  if (j.contains("steps")) j.at("steps").get_to(p.steps);
  if (j.contains("group_size")) j.at("group_size").get_to(p.group_size);
  if (j.contains("seed")) j.at("seed").get_to(p.seed);
  if (j.contains("group_mean_baseline")) j.at("group_mean_baseline").get_to(p.group_mean_baseline);
}

inline void to_json(json& j, const EvolutionState& s) {
  j = json{{"iteration", s.iteration},
           {"max_iterations", s.max_iterations},
           {"agent_pool", s.agent_pool},
           {"validation_reward_history", s.validation_reward_history},
           {"trace_sets", s.trace_sets}};
}

inline void from_json(const json& j, EvolutionState& s) {
  j.at("iteration").get_to(s.iteration);
  j.at("max_iterations").get_to(s.max_iterations);
  j.at("agent_pool").get_to(s.agent_pool);
  j.at("validation_reward_history").get_to(s.validation_reward_history);
  j.at("trace_sets").get_to(s.trace_sets);
}

inline void to_json(json& j, const MetricsReport& m) {
  j = json{{"accuracy", m.accuracy},
           {"delta_vs_baseline", m.delta_vs_baseline},
           {"avg_debate_rounds", m.avg_debate_rounds},
           {"sycophancy_per_query", m.sycophancy_per_query},
           {"c_to_i", m.c_to_i},
           {"i_to_c", m.i_to_c},
           {"debate_helped", m.debate_helped},
           {"n_queries", m.n_queries}};
}

inline void from_json(const json& j, MetricsReport& m) {
  j.at("accuracy").get_to(m.accuracy);
  j.at("delta_vs_baseline").get_to(m.delta_vs_baseline);
  j.at("avg_debate_rounds").get_to(m.avg_debate_rounds);
  j.at("sycophancy_per_query").get_to(m.sycophancy_per_query);
  j.at("c_to_i").get_to(m.c_to_i);
  j.at("i_to_c").get_to(m.i_to_c);
  j.at("debate_helped").get_to(m.debate_helped);
  j.at("n_queries").get_to(m.n_queries);
}

template <typename T>
std::string canonical_json(const T& value) {
  return json(value).dump();
}

// --- record validation ---

namespace detail {
inline bool round_all_agree(const std::vector<AgentTurn>& turns) {
  if (turns.empty()) return false;
  for (const auto& t : turns) {
    if (t.answer.empty() || t.answer != turns.front().answer) return false;
  }
  return true;
}
}  // namespace detail

// Total function: collects every invariant violation, naming field and rule.
inline std::vector<std::string> validate(const DebateRecord& r) {
  std::vector<std::string> out;

  const bool has_choices = r.query.choices.has_value();
  if ((r.query.task_kind == TaskKind::math) == has_choices) {
    out.push_back("query.choices: present iff task_kind is not math");
  }
  if (has_choices) {
    std::set<std::string> labels;
    for (const auto& c : *r.query.choices) {
      if (!labels.insert(c.label).second) {
        out.push_back("query.choices: duplicate label \"" + c.label + "\"");
      }
    }
  }

  const int n_rounds = static_cast<int>(r.rounds.size());
  if (n_rounds < 1 || n_rounds > r.max_rounds + 1) {
    out.push_back("rounds: length must be in [1, max_rounds+1], got " + std::to_string(n_rounds));
  }
  for (int t = 0; t < n_rounds; ++t) {
    const auto& round = r.rounds[t];
    if (static_cast<int>(round.size()) != r.agent_count) {
      out.push_back("rounds[" + std::to_string(t) + "] size: expected agent_count=" +
                    std::to_string(r.agent_count) + ", got " + std::to_string(round.size()));
    }
    std::set<int> ids;
    for (const auto& turn : round) {
      if (turn.round != t) {
        out.push_back("rounds[" + std::to_string(t) + "]: turn.round=" +
                      std::to_string(turn.round) + " disagrees with its position");
      }
      if (!ids.insert(turn.agent_id).second) {
        out.push_back("rounds[" + std::to_string(t) + "]: duplicate agent_id " +
                      std::to_string(turn.agent_id));
      }
      if (t == 0 && !turn.novel_step) {
        out.push_back("rounds[0]: novel_step must be true for every round-0 turn");
      }
    }
  }

  if (r.termination.kind == TerminationKind::consensus) {
    if (!r.termination.round) {
      out.push_back("termination: consensus requires a round");
    } else {
      const int t = *r.termination.round;
      if (t < 0 || t >= n_rounds) {
        out.push_back("termination: consensus round " + std::to_string(t) + " out of range");
      } else {
        if (!detail::round_all_agree(r.rounds[t])) {
          out.push_back("termination: consensus(" + std::to_string(t) +
                        ") but round answers do not all agree");
        }
        for (int earlier = 0; earlier < t; ++earlier) {
          if (detail::round_all_agree(r.rounds[earlier])) {
            out.push_back("termination: consensus(" + std::to_string(t) +
                          ") is not minimal; round " + std::to_string(earlier) + " already agrees");
            break;
          }
        }
        if (t != n_rounds - 1) {
          out.push_back("termination: consensus round must be the last stored round");
        }
      }
    }
  } else {
    if (n_rounds != r.max_rounds + 1) {
      out.push_back("termination: majority_vote requires max_rounds+1 stored rounds, got " +
                    std::to_string(n_rounds));
    }
    if (r.termination.round) {
      out.push_back("termination: majority_vote must not carry a round");
    }
  }

  return out;
}

}  // namespace dte
