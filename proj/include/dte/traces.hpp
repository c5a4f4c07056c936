#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dte/domain.hpp"
#include "dte/extract.hpp"
#include "dte/grpo.hpp"
#include "dte/text.hpp"
#include "dte/util.hpp"

namespace dte {

// --- selection strategies ---

enum class SelectionKind { all_traces, debate_only, random_k };

struct SelectionStrategy {
  SelectionKind kind = SelectionKind::all_traces;
  int k = 0;                 // random_k only
  std::uint64_t seed = 0;    // random_k only

  static SelectionStrategy all_traces() { return {SelectionKind::all_traces, 0, 0}; }
  static SelectionStrategy debate_only() { return {SelectionKind::debate_only, 0, 0}; }
  static SelectionStrategy random_k(int k, std::uint64_t seed) {
    return {SelectionKind::random_k, k, seed};
  }
  bool operator==(const SelectionStrategy&) const = default;
};

inline std::string to_string(SelectionKind k) {
  switch (k) {
    case SelectionKind::all_traces: return "all_traces";
    case SelectionKind::debate_only: return "debate_only";
    case SelectionKind::random_k: return "random_k";
  }
  throw std::invalid_argument("unknown selection kind");
}

inline void to_json(json& j, const SelectionStrategy& s) {
  j = json{{"kind", to_string(s.kind)}};
  if (s.kind == SelectionKind::random_k) {
    j["k"] = s.k;
    j["seed"] = s.seed;
  }
}

inline void from_json(const json& j, SelectionStrategy& s) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "all_traces") s = SelectionStrategy::all_traces();
  else if (kind == "debate_only") s = SelectionStrategy::debate_only();
  else if (kind == "random_k")
    s = SelectionStrategy::random_k(j.at("k").get<int>(),
                                    j.value("seed", std::uint64_t{0}));
  else throw ConfigError("unknown selection strategy: " + kind);
}

// CLI form: "all_traces", "debate_only", or "random_k:<k>[:<seed>]".
inline SelectionStrategy parse_selection_strategy(const std::string& text) {
  if (text == "all_traces") return SelectionStrategy::all_traces();
  if (text == "debate_only") return SelectionStrategy::debate_only();
  if (text.rfind("random_k:", 0) == 0) {
    const std::string rest = text.substr(9);
    const std::size_t colon = rest.find(':');
    try {
      const int k = std::stoi(rest.substr(0, colon));
      const std::uint64_t seed =
          colon == std::string::npos ? 0 : std::stoull(rest.substr(colon + 1));
      return SelectionStrategy::random_k(k, seed);
    } catch (const std::exception&) {
      throw ConfigError("bad random_k strategy: " + text);
    }
  }
  throw ConfigError("unknown selection strategy: " + text);
}

// --- trace extraction ---

// Compresses one finished debate into a training example. The winning agent
// is the highest shaped-reward terminal turn matching the final answer; its
// rationale keeps sentences that either recur in a peer's terminal rationale
// (token-set Jaccard >= 0.6) or introduce a math token unseen in the previous
// round, falling back to the full rationale when nothing qualifies.
inline std::optional<TrainingExample> extract_training_example(
    const DebateRecord& record, const RewardParams& reward_params = RewardParams{}) {
  if (record.rounds.empty()) return std::nullopt;
  const TaskKind kind = record.query.task_kind;
  const std::string y_star = normalize_answer(record.final_answer, kind);
  if (y_star.empty()) return std::nullopt;

  const auto& terminal = record.rounds.back();
  const AgentTurn* winner = nullptr;
  double winner_reward = 0.0;
  for (const auto& turn : terminal) {
    if (normalize_answer(turn.answer, kind) != y_star) continue;
    const double reward = shaped_reward(turn.raw_text, y_star, kind, reward_params);
    const bool better =
        !winner || reward > winner_reward ||
        (reward == winner_reward &&
         (token_count(turn.rationale) < token_count(winner->rationale) ||
          (token_count(turn.rationale) == token_count(winner->rationale) &&
           turn.agent_id < winner->agent_id)));
    if (better) {
      winner = &turn;
      winner_reward = reward;
    }
  }
  if (!winner) return std::nullopt;

  std::vector<std::set<std::string>> peer_sentences;
  for (const auto& turn : terminal) {
    if (turn.agent_id == winner->agent_id) continue;
    for (const auto& s : split_sentences(turn.rationale))
      peer_sentences.push_back(sentence_token_set(s));
  }

  const bool has_previous_round = record.rounds.size() >= 2;
  std::set<std::string> previous_tokens;
  if (has_previous_round) {
    for (const auto& turn : record.rounds[record.rounds.size() - 2]) {
      const auto tokens = math_tokens(turn.rationale);
      previous_tokens.insert(tokens.begin(), tokens.end());
    }
  }

  std::vector<std::string> kept;
  for (const auto& sentence : split_sentences(winner->rationale)) {
    const auto tokens = sentence_token_set(sentence);
    bool keep = false;
    for (const auto& peer : peer_sentences) {
      if (jaccard(tokens, peer) >= 0.6) {
        keep = true;
        break;
      }
    }
    if (!keep && has_previous_round) {
      for (const auto& tok : math_tokens(sentence)) {
        if (!previous_tokens.count(tok)) {
          keep = true;
          break;
        }
      }
    }
    if (keep) kept.push_back(sentence);
  }

  std::string rationale;
  if (kept.empty()) {
    rationale = trim(winner->rationale);
  } else {
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (i) rationale += ". ";
      rationale += kept[i];
    }
  }

  TrainingExample example;
  example.query_id = record.query.id;
  example.x = record.query.text;
  example.y_star = y_star;
  example.rationale = std::move(rationale);
  example.source_round_count = static_cast<int>(record.rounds.size()) - 1;
  example.reward = winner_reward;
  return example;
}

// --- selection ---

inline std::vector<TrainingExample> select(const std::vector<TrainingExample>& examples,
                                           const SelectionStrategy& strategy) {
  switch (strategy.kind) {
    case SelectionKind::all_traces:
      return examples;
    case SelectionKind::debate_only: {
      std::vector<TrainingExample> out;
      for (const auto& e : examples) {
        if (e.source_round_count >= 1) out.push_back(e);
      }
      return out;
    }
    case SelectionKind::random_k: {
      if (strategy.k < 1) throw std::invalid_argument("random_k: k must be >= 1");
      const std::size_t n = examples.size();
      const std::size_t k = std::min<std::size_t>(strategy.k, n);
      std::vector<std::size_t> indices(n);
      for (std::size_t i = 0; i < n; ++i) indices[i] = i;
      auto rng = make_rng(strategy.seed);
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + uniform_index(rng, n - i);
        std::swap(indices[i], indices[j]);
      }
      std::vector<std::size_t> chosen(indices.begin(), indices.begin() + k);
      std::sort(chosen.begin(), chosen.end());
      std::vector<TrainingExample> out;
      out.reserve(k);
      for (std::size_t i : chosen) out.push_back(examples[i]);
      return out;
    }
  }
  throw std::invalid_argument("unknown selection strategy");
}

// --- persistence ---

inline void persist(const std::vector<TrainingExample>& examples,
                    const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write trace file " + path.string());
  for (const auto& e : examples) out << canonical_json(e) << '\n';
  if (!out) throw std::runtime_error("short write to trace file " + path.string());
}

inline std::vector<TrainingExample> load_traces(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read trace file " + path.string());
  std::vector<TrainingExample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(json::parse(line).get<TrainingExample>());
    } catch (const std::exception& e) {
      throw std::runtime_error("bad trace at " + path.string() + " line " +
                               std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// --- run manifest ---

struct RunManifest {
  std::string dataset;
  std::vector<AgentConfig> agent_pool;
  std::string config_hash;   // fnv1a of the canonical config JSON, hex
  int n_records = 0;
  int n_examples = 0;
  bool operator==(const RunManifest&) const = default;
};

inline void to_json(json& j, const RunManifest& m) {
  j = json{{"dataset", m.dataset},
           {"agent_pool", m.agent_pool},
           {"config_hash", m.config_hash},
           {"n_records", m.n_records},
           {"n_examples", m.n_examples}};
}

inline void from_json(const json& j, RunManifest& m) {
  j.at("dataset").get_to(m.dataset);
  j.at("agent_pool").get_to(m.agent_pool);
  j.at("config_hash").get_to(m.config_hash);
  j.at("n_records").get_to(m.n_records);
  j.at("n_examples").get_to(m.n_examples);
}

inline std::string config_hash_of(const json& config) {
  std::ostringstream hex;
  hex << std::hex << fnv1a(config.dump());
  return hex.str();
}

inline void write_manifest(const RunManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << canonical_json(manifest) << '\n';
}

inline RunManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("bad manifest " + path.string() + ": " + e.what());
  }
  return j.get<RunManifest>();
}

}  // namespace dte
