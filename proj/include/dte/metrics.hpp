#pragma once

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dte/debate.hpp"
#include "dte/domain.hpp"
#include "dte/extract.hpp"
#include "dte/grpo.hpp"
#include "dte/text.hpp"

namespace dte {

struct TransitionCounts {
  int c_to_i = 0;
  int i_to_c = 0;
  bool operator==(const TransitionCounts&) const = default;
};

struct PerRecordMetrics {
  bool correct = false;
  int debate_rounds = 0;
  TransitionCounts transitions;
  int sycophancy_events = 0;
  bool debate_helped = false;
  bool operator==(const PerRecordMetrics&) const = default;
};

// Scores one finished debate against the gold answer. A sycophancy event
// needs all four conditions: the agent changed its answer, the new answer
// matches some peer's previous-round answer, that answer is wrong, and the
// turn added no novel step.
inline PerRecordMetrics score_record(const DebateRecord& record, const std::string& gold) {
  if (gold.empty()) throw std::invalid_argument("score_record: empty gold answer");
  if (record.rounds.empty()) throw std::invalid_argument("score_record: record has no rounds");

  const TaskKind kind = record.query.task_kind;
  const std::string gold_norm = normalize_answer(gold, kind);
  auto norm = [&](const AgentTurn& t) { return normalize_answer(t.answer, kind); };
  auto is_correct = [&](const std::string& normalized) {
    return !normalized.empty() && normalized == gold_norm;
  };

  PerRecordMetrics m;
  m.correct = answers_equal(record.final_answer, gold, kind);
  m.debate_rounds = static_cast<int>(record.rounds.size()) - 1;

  for (std::size_t t = 1; t < record.rounds.size(); ++t) {
    const auto& prev = record.rounds[t - 1];
    const auto& curr = record.rounds[t];
    for (const auto& turn : curr) {
      const AgentTurn* own_prev = nullptr;
      for (const auto& p : prev) {
        if (p.agent_id == turn.agent_id) own_prev = &p;
      }
      if (!own_prev) continue;

      const std::string before = norm(*own_prev);
      const std::string after = norm(turn);
      if (is_correct(before) && !is_correct(after)) m.transitions.c_to_i += 1;
      if (!is_correct(before) && is_correct(after)) m.transitions.i_to_c += 1;

      if (after != before && !after.empty() && !is_correct(after) && !turn.novel_step) {
        for (const auto& p : prev) {
          if (p.agent_id != turn.agent_id && norm(p) == after) {
            m.sycophancy_events += 1;
            break;
          }
        }
      }
    }
  }

  const auto& round0 = record.rounds.front();
  const std::string round0_majority = majority_vote(round0, kind);
  int round0_correct = 0;
  for (const auto& t : round0) {
    if (is_correct(norm(t))) round0_correct += 1;
  }
  const bool strict_correct_majority = 2 * round0_correct > static_cast<int>(round0.size());
  m.debate_helped = m.correct && (!is_correct(round0_majority) || !strict_correct_majority);
  return m;
}

inline MetricsReport aggregate(const std::vector<PerRecordMetrics>& per_record, int n_queries,
                               std::optional<double> baseline_accuracy = std::nullopt) {
  if (n_queries < 1) throw std::invalid_argument("aggregate: n_queries must be >= 1");

  MetricsReport report;
  report.n_queries = n_queries;
  int correct = 0;
  long long rounds = 0;
  long long events = 0;
  for (const auto& m : per_record) {
    correct += m.correct ? 1 : 0;
    rounds += m.debate_rounds;
    events += m.sycophancy_events;
    report.c_to_i += m.transitions.c_to_i;
    report.i_to_c += m.transitions.i_to_c;
    report.debate_helped += m.debate_helped ? 1 : 0;
  }
  report.accuracy = static_cast<double>(correct) / n_queries;
  report.avg_debate_rounds = static_cast<double>(rounds) / n_queries;
  report.sycophancy_per_query = static_cast<double>(events) / n_queries;
  report.delta_vs_baseline = baseline_accuracy ? report.accuracy - *baseline_accuracy : 0.0;
  return report;
}

// Fgt_2 on an accuracy trajectory: how much of the earlier peak the final
// model gives back. May be negative when accuracy only improved.
inline double forgetting(const std::vector<double>& acc_history) {
  if (acc_history.size() < 3)
    throw std::invalid_argument("forgetting: need at least 3 accuracy points");
  return std::max(acc_history[0] - acc_history[2], acc_history[1] - acc_history[2]);
}

// Mean rationale token length of turns that voted with the round's adopted
// (majority) answer minus the mean for dissenting turns, over rounds with
// disagreement. Unset when either group is empty.
inline std::optional<double> verbosity_gap(const DebateRecord& record) {
  const TaskKind kind = record.query.task_kind;
  long long adopted_tokens = 0, other_tokens = 0;
  int adopted_n = 0, other_n = 0;
  for (const auto& round : record.rounds) {
    if (check_consensus(round, kind)) continue;
    const std::string majority = majority_vote(round, kind);
    if (majority.empty()) continue;
    for (const auto& turn : round) {
      const int tokens = static_cast<int>(token_count(turn.rationale));
      if (normalize_answer(turn.answer, kind) == majority) {
        adopted_tokens += tokens;
        adopted_n += 1;
      } else {
        other_tokens += tokens;
        other_n += 1;
      }
    }
  }
  if (adopted_n == 0 || other_n == 0) return std::nullopt;
  return static_cast<double>(adopted_tokens) / adopted_n -
         static_cast<double>(other_tokens) / other_n;
}

}  // namespace dte
