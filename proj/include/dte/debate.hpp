#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <future>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dte/agents.hpp"
#include "dte/domain.hpp"
#include "dte/extract.hpp"
#include "dte/text.hpp"

namespace dte {

struct DebateConfig {
  int max_rounds = 5;            // T; stored rounds never exceed T+1
  int agent_count = 0;           // 0 derives N from the pool
  bool consensus_on_normalized = true;
  TaskKind prompt_template_set = TaskKind::math;
  bool operator==(const DebateConfig&) const = default;
};

inline void to_json(json& j, const DebateConfig& c) {
  j = json{{"max_rounds", c.max_rounds},
           {"agent_count", c.agent_count},
           {"consensus_on_normalized", c.consensus_on_normalized},
           {"prompt_template_set", to_string(c.prompt_template_set)}};
}

inline void from_json(const json& j, DebateConfig& c) {
  c = DebateConfig{};
  if (j.contains("max_rounds")) j.at("max_rounds").get_to(c.max_rounds);
  if (j.contains("agent_count")) j.at("agent_count").get_to(c.agent_count);
  if (j.contains("consensus_on_normalized"))
    j.at("consensus_on_normalized").get_to(c.consensus_on_normalized);
  if (j.contains("prompt_template_set"))
    c.prompt_template_set = task_kind_from_string(j.at("prompt_template_set").get<std::string>());
}

// --- prompt templates ---

namespace templates {

// Refine-round templates. Placeholders: {self.agent_id}, {question},
// {own_previous}, {context}, {round_num}. The literal {answer} inside the
// boxed-format instruction is part of the text, not a placeholder.
inline constexpr std::string_view kRcrMath =
    "You are Agent {self.agent_id} in a multi-agent debate to solve the following math "
    "problem:\n"
    "\n"
    "Problem: {question}\n"
    "\n"
    "{own_previous}\n"
    "\n"
    "Here are the solutions from other agents:\n"
    "{context}\n"
    "\n"
    "This is debate round {round_num}. Please carefully analyze all solutions—including "
    "your own—identify any errors in reasoning, and provide your revised solution.\n"
    "\n"
    "- If you believe your previous answer is correct, explain why and defend it.\n"
    "- If you believe you made an error, explain the error and provide a corrected solution.\n"
    "- If you believe another agent's answer is correct, explain why you agree with it.\n"
    "\n"
    "Your final answer must be in the format \\boxed{answer} at the end.";

inline constexpr std::string_view kRcrScience =
    "You are Agent {self.agent_id} in a multi-agent debate to solve the following scientific "
    "problem:\n"
    "\n"
    "Problem: {question}\n"
    "\n"
    "{own_previous}\n"
    "\n"
    "Here are the solutions from other agents:\n"
    "\n"
    "{context}\n"
    "\n"
    "This is debate round {round_num}. Please carefully analyze all solutions—including "
    "your own—identify any misconceptions or flawed scientific reasoning, and provide "
    "your revised solution.\n"
    "\n"
    "- If you believe your previous answer is correct, explain the scientific principles "
    "supporting your answer.\n"
    "- If you believe you made an error, explain the scientific misconception and provide a "
    "corrected solution.\n"
    "- If you believe another agent's answer is correct, explain why their scientific "
    "reasoning is sound.\n"
    "\n"
    "Your final answer must be in the format \\boxed{answer} at the end.";

inline constexpr std::string_view kRcrCommonsense =
    "You are Agent {self.agent_id} in a multi-agent debate to solve the following commonsense "
    "reasoning problem:\n"
    "\n"
    "Problem: {question}\n"
    "\n"
    "{own_previous}\n"
    "\n"
    "Here are the solutions from other agents:\n"
    "\n"
    "{context}\n"
    "\n"
    "This is debate round {round_num}. Please carefully analyze all solutions—including "
    "your own—identify any flawed assumptions or logical inconsistencies, and provide "
    "your revised solution.\n"
    "\n"
    "- If you believe your previous answer is correct, explain the logical reasoning and "
    "real-world knowledge supporting it.\n"
    "- If you believe you made an error, explain the flawed assumption or inconsistency and "
    "provide a corrected solution.\n"
    "- If you believe another agent's answer is correct, explain why their reasoning aligns "
    "with commonsense knowledge.\n"
    "\n"
    "Your final answer must be in the format \\boxed{answer} at the end.";

inline constexpr std::string_view kRound0Math =
    "Solve the following math problem.\n"
    "\n"
    "Problem: {question}\n"
    "\n"
    "Reason step by step, and make sure your final answer is in the format \\boxed{answer} "
    "at the end.";

inline constexpr std::string_view kRound0Science =
    "Solve the following scientific problem.\n"
    "\n"
    "Problem: {question}\n"
    "\n"
    "Reason step by step, and make sure your final answer is in the format \\boxed{answer} "
    "at the end.";

inline constexpr std::string_view kRound0Commonsense =
    "Solve the following commonsense reasoning problem.\n"
    "\n"
    "Problem: {question}\n"
    "\n"
    "Reason step by step, and make sure your final answer is in the format \\boxed{answer} "
    "at the end.";

}  // namespace templates

struct PromptTemplates {
  std::array<std::string, 3> rcr;     // indexed by TaskKind
  std::array<std::string, 3> round0;  // indexed by TaskKind

  static PromptTemplates defaults() {
    PromptTemplates t;
    t.rcr = {std::string(templates::kRcrMath), std::string(templates::kRcrScience),
             std::string(templates::kRcrCommonsense)};
    t.round0 = {std::string(templates::kRound0Math), std::string(templates::kRound0Science),
                std::string(templates::kRound0Commonsense)};
    return t;
  }

  // Overrides defaults with <kind>.txt / round0_<kind>.txt files when present.
  // A single trailing newline (LF or CRLF) is stripped so editor-terminated
  // files render identically to the embedded defaults.
  static PromptTemplates load_dir(const std::filesystem::path& dir) {
    PromptTemplates t = defaults();
    for (int k = 0; k < 3; ++k) {
      const std::string kind = to_string(static_cast<TaskKind>(k));
      if (auto text = read_file(dir / (kind + ".txt"))) t.rcr[k] = *text;
      if (auto text = read_file(dir / ("round0_" + kind + ".txt"))) t.round0[k] = *text;
    }
    return t;
  }

 private:
  static std::optional<std::string> read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) return std::nullopt;
    std::ostringstream ss;
    ss << in.rdbuf();
    std::string text = ss.str();
    if (!text.empty() && text.back() == '\n') {
      text.pop_back();
      if (!text.empty() && text.back() == '\r') text.pop_back();
    }
    return text;
  }
};

namespace detail {

// Single-pass placeholder substitution; substituted values are copied verbatim
// and never re-scanned, so agent text cannot inject placeholders.
inline std::string render_template(std::string_view tmpl,
                                   const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const std::size_t close = tmpl.find('}', i + 1);
      if (close != std::string_view::npos) {
        const std::string name(tmpl.substr(i + 1, close - i - 1));
        auto it = values.find(name);
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(tmpl[i]);
    ++i;
  }
  return out;
}

inline std::string render_question(const Query& query) {
  std::string out = query.text;
  if (query.choices) {
    for (const auto& c : *query.choices) out += "\n(" + c.label + ") " + c.text;
  }
  return out;
}

}  // namespace detail

inline std::string build_round0_prompt(const Query& query,
                                       const PromptTemplates& templates = PromptTemplates::defaults()) {
  if (trim(query.text).empty())
    throw std::invalid_argument("build_round0_prompt: query text is empty");
  const std::string& tmpl = templates.round0[static_cast<int>(query.task_kind)];
  if (tmpl.empty())
    throw ConfigError("no round-0 template for task kind " + to_string(query.task_kind));
  return detail::render_template(tmpl, {{"question", detail::render_question(query)}});
}

inline std::string build_rcr_prompt(const Query& query, int agent_id,
                                    const std::optional<AgentTurn>& own_previous,
                                    const std::vector<AgentTurn>& peer_turns, int round_num,
                                    const PromptTemplates& templates = PromptTemplates::defaults()) {
  if (round_num < 1) throw std::invalid_argument("build_rcr_prompt: round_num must be >= 1");
  if (trim(query.text).empty())
    throw std::invalid_argument("build_rcr_prompt: query text is empty");
  const std::string& tmpl = templates.rcr[static_cast<int>(query.task_kind)];
  if (tmpl.empty()) throw ConfigError("no debate template for task kind " + to_string(query.task_kind));

  std::string own;
  if (own_previous) {
    own = "Your previous answer: " + own_previous->answer +
          "\nYour previous reasoning: " + own_previous->rationale;
  }

  std::vector<const AgentTurn*> peers;
  for (const auto& t : peer_turns) peers.push_back(&t);
  std::sort(peers.begin(), peers.end(),
            [](const AgentTurn* a, const AgentTurn* b) { return a->agent_id < b->agent_id; });
  std::string context;
  for (const AgentTurn* p : peers) {
    if (!context.empty()) context += "\n\n";
    context += "Agent " + std::to_string(p->agent_id) + " answer: " + p->answer +
               "\nAgent " + std::to_string(p->agent_id) + " reasoning: " + p->rationale;
  }

  return detail::render_template(tmpl, {{"self.agent_id", std::to_string(agent_id)},
                                        {"question", detail::render_question(query)},
                                        {"own_previous", own},
                                        {"context", context},
                                        {"round_num", std::to_string(round_num)}});
}

// --- consensus, voting, novelty ---

// True iff every turn's normalized answer is the same non-empty string.
inline bool check_consensus(const std::vector<AgentTurn>& turns, TaskKind kind) {
  if (turns.empty()) return false;
  const std::string first = normalize_answer(turns.front().answer, kind);
  if (first.empty()) return false;
  for (const auto& t : turns) {
    if (normalize_answer(t.answer, kind) != first) return false;
  }
  return true;
}

// Highest-count normalized answer; ties go to the answer whose earliest
// proposer has the lowest agent_id. Empty answers are ignored unless every
// answer is empty.
inline std::string majority_vote(const std::vector<AgentTurn>& turns, TaskKind kind) {
  if (turns.empty()) throw std::invalid_argument("majority_vote: no turns");
  struct Tally {
    int count = 0;
    int earliest_agent = std::numeric_limits<int>::max();
  };
  std::map<std::string, Tally> tallies;
  for (const auto& t : turns) {
    const std::string key = normalize_answer(t.answer, kind);
    if (key.empty()) continue;
    Tally& tally = tallies[key];
    tally.count += 1;
    tally.earliest_agent = std::min(tally.earliest_agent, t.agent_id);
  }
  if (tallies.empty()) return "";
  const std::pair<const std::string, Tally>* best = nullptr;
  for (const auto& entry : tallies) {
    if (!best || entry.second.count > best->second.count ||
        (entry.second.count == best->second.count &&
         entry.second.earliest_agent < best->second.earliest_agent)) {
      best = &entry;
    }
  }
  return best->first;
}

// A rationale adds a novel step when at least one of its sentences is
// dissimilar (token-set Jaccard < 0.6) to every sentence the agent or its
// peers wrote in the previous round.
inline bool detect_novel_step(const std::string& new_rationale, const std::string& own_previous,
                              const std::vector<std::string>& peer_rationales) {
  std::vector<std::set<std::string>> seen;
  for (const auto& s : split_sentences(own_previous)) seen.push_back(sentence_token_set(s));
  for (const auto& peer : peer_rationales)
    for (const auto& s : split_sentences(peer)) seen.push_back(sentence_token_set(s));

  for (const auto& sentence : split_sentences(new_rationale)) {
    const auto tokens = sentence_token_set(sentence);
    bool novel = true;
    for (const auto& prior : seen) {
      if (jaccard(tokens, prior) >= 0.6) {
        novel = false;
        break;
      }
    }
    if (novel) return true;
  }
  return false;
}

// --- debate execution ---

namespace detail {

inline AgentTurn make_agent_turn(int agent_id, int round, std::string raw, TaskKind kind) {
  AgentTurn turn;
  turn.agent_id = agent_id;
  turn.round = round;
  turn.raw_text = std::move(raw);
  turn.answer = extract_normalized_answer(turn.raw_text, kind);
  turn.rationale = extract_rationale(turn.raw_text);
  turn.novel_step = true;
  return turn;
}

// Consensus on raw extracted answer text instead of normalized answers; the
// non-default comparison mode.
inline bool raw_consensus(const std::vector<std::string>& raw_texts) {
  if (raw_texts.empty()) return false;
  auto first = extract_answer_text(raw_texts.front());
  if (!first || first->empty()) return false;
  for (const auto& raw : raw_texts) {
    auto a = extract_answer_text(raw);
    if (!a || *a != *first) return false;
  }
  return true;
}

}  // namespace detail

inline DebateRecord run_debate(const Query& query, const std::vector<AgentConfig>& agents,
                               const DebateConfig& config, const BackendSet& backends,
                               const PromptTemplates& templates, std::uint64_t run_seed) {
  if (agents.empty()) throw ConfigError("run_debate: empty agent pool");
  if (config.max_rounds < 1) throw ConfigError("run_debate: max_rounds must be >= 1");
  const int n = static_cast<int>(agents.size());
  if (config.agent_count != 0 && config.agent_count != n)
    throw ConfigError("run_debate: config.agent_count disagrees with the pool size");

  std::vector<AgentConfig> pool = agents;
  std::sort(pool.begin(), pool.end(),
            [](const AgentConfig& a, const AgentConfig& b) { return a.agent_id < b.agent_id; });
  for (const auto& a : pool) {
    if (!backends.count(a.agent_id))
      throw ConfigError("run_debate: no backend for agent " + std::to_string(a.agent_id));
  }

  const TaskKind kind = query.task_kind;
  const int T = config.max_rounds;

  DebateRecord record;
  record.query = query;
  record.agent_count = n;
  record.max_rounds = T;

  auto run_round = [&](int round) {
    std::vector<std::future<std::string>> futures;
    futures.reserve(pool.size());
    for (const auto& agent : pool) {
      futures.push_back(std::async(std::launch::async, [&, agent, round]() {
        AgentRequest request;
        request.temperature = agent.temperature;
        request.seed = mix_seed({run_seed, fnv1a(query.id),
                                 static_cast<std::uint64_t>(agent.agent_id),
                                 static_cast<std::uint64_t>(round)});

        TurnContext context;
        context.query_id = query.id;
        context.round = round;
        context.task_kind = kind;
        context.gold_answer = query.gold_answer;

        if (round == 0) {
          request.prompt = build_round0_prompt(query, templates);
        } else {
          const auto& prev = record.rounds[round - 1];
          std::optional<AgentTurn> own;
          std::vector<AgentTurn> peers;
          for (const auto& t : prev) {
            if (t.agent_id == agent.agent_id) own = t;
            else peers.push_back(t);
          }
          request.prompt =
              build_rcr_prompt(query, agent.agent_id, own, peers, round, templates);
          context.previous_majority = majority_vote(prev, kind);
          if (own) context.own_previous_answer = own->answer;
        }
        return backends.at(agent.agent_id)->respond(request, context);
      }));
    }

    std::vector<AgentTurn> turns;
    turns.reserve(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
      turns.push_back(detail::make_agent_turn(pool[i].agent_id, round, futures[i].get(), kind));
    }
    if (round > 0) {
      const auto& prev = record.rounds[round - 1];
      for (auto& turn : turns) {
        std::string own_prev;
        std::vector<std::string> peer_prev;
        for (const auto& t : prev) {
          if (t.agent_id == turn.agent_id) own_prev = t.rationale;
          else peer_prev.push_back(t.rationale);
        }
        turn.novel_step = detect_novel_step(turn.rationale, own_prev, peer_prev);
      }
    }
    record.rounds.push_back(std::move(turns));
  };

  auto consensus_now = [&](const std::vector<AgentTurn>& turns) {
    if (config.consensus_on_normalized) return check_consensus(turns, kind);
    std::vector<std::string> raws;
    for (const auto& t : turns) raws.push_back(t.raw_text);
    return detail::raw_consensus(raws);
  };

  for (int round = 0; round <= T; ++round) {
    run_round(round);
    if (consensus_now(record.rounds.back())) {
      record.termination = {TerminationKind::consensus, round};
      record.final_answer = normalize_answer(record.rounds.back().front().answer, kind);
      return record;
    }
    if (round == T) break;
  }

  record.termination = {TerminationKind::majority_vote, std::nullopt};
  record.final_answer = majority_vote(record.rounds.back(), kind);
  return record;
}

// --- batch engine ---

struct DebateOutcome {
  std::optional<DebateRecord> record;
  std::string error;            // empty on success
  bool transport_error = false;
};

class DebateEngine {
 public:
  DebateEngine(std::vector<AgentConfig> pool, DebateConfig config,
               PromptTemplates templates = PromptTemplates::defaults(), std::uint64_t seed = 0,
               BackendFactoryOptions backend_options = {})
      : pool_(std::move(pool)),
        config_(config),
        templates_(std::move(templates)),
        seed_(seed),
        backends_(make_backends(pool_, backend_options)) {}

  DebateRecord run_one(const Query& query) const {
    return run_debate(query, pool_, config_, backends_, templates_, seed_);
  }

  // Processes queries with a bounded worker pool; outcome order matches input
  // order, and per-query failures never abort the batch.
  std::vector<DebateOutcome> run_batch(const std::vector<Query>& queries,
                                       int parallelism = 4) const {
    std::vector<DebateOutcome> outcomes(queries.size());
    if (queries.empty()) return outcomes;
    parallelism = std::clamp<int>(parallelism, 1, static_cast<int>(queries.size()));

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= queries.size()) return;
        try {
          outcomes[i].record = run_one(queries[i]);
        } catch (const TransportError& e) {
          outcomes[i].error = e.what();
          outcomes[i].transport_error = true;
        } catch (const std::exception& e) {
          outcomes[i].error = e.what();
        }
      }
    };
    std::vector<std::thread> threads;
    threads.reserve(parallelism);
    for (int i = 0; i < parallelism; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    return outcomes;
  }

  const std::vector<AgentConfig>& pool() const { return pool_; }
  const DebateConfig& config() const { return config_; }
  const PromptTemplates& prompt_templates() const { return templates_; }
  std::uint64_t seed() const { return seed_; }

 private:
  std::vector<AgentConfig> pool_;
  DebateConfig config_;
  PromptTemplates templates_;
  std::uint64_t seed_;
  BackendSet backends_;
};

}  // namespace dte
