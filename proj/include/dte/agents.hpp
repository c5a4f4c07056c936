#pragma once

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "dte/domain.hpp"
#include "dte/extract.hpp"
#include "dte/grpo.hpp"

namespace dte {

struct AgentRequest {
  std::string prompt;
  double temperature = 0.0;
  int max_tokens = 512;
  std::optional<std::uint64_t> seed;
};

// What a backend may consult beyond the prompt. Scripted and simulated
// backends key off these fields; the HTTP backend ignores them.
struct TurnContext {
  std::string query_id;
  int round = 0;
  TaskKind task_kind = TaskKind::math;
  std::optional<std::string> gold_answer;
  std::optional<std::string> previous_majority;
  std::optional<std::string> own_previous_answer;
};

class AgentBackend {
 public:
  virtual ~AgentBackend() = default;
  // Must be safe for concurrent invocation across distinct queries.
  virtual std::string respond(const AgentRequest& request, const TurnContext& context) = 0;
};

// --- scripted mock backend ---

// Script table: query_id -> round -> raw text, with "*" wildcards on either
// key. Lookup order: exact, (*, round), (query_id, *), (*, *).
class MockAgent : public AgentBackend {
 public:
  explicit MockAgent(std::map<std::string, std::map<std::string, std::string>> script)
      : script_(std::move(script)) {}

  static std::map<std::string, std::map<std::string, std::string>> parse_script(const json& j) {
    return j.get<std::map<std::string, std::map<std::string, std::string>>>();
  }

  std::string respond(const AgentRequest&, const TurnContext& context) override {
    const std::string round_key = std::to_string(context.round);
    for (const auto& [qid, rkey] :
         {std::pair{context.query_id, round_key}, std::pair{std::string("*"), round_key},
          std::pair{context.query_id, std::string("*")},
          std::pair{std::string("*"), std::string("*")}}) {
      auto q = script_.find(qid);
      if (q == script_.end()) continue;
      auto r = q->second.find(rkey);
      if (r != q->second.end()) return r->second;
    }
    throw ConfigError("mock agent: no script entry for (query " + context.query_id + ", round " +
                      round_key + ")");
  }

 private:
  std::map<std::string, std::map<std::string, std::string>> script_;
};

// --- probabilistic simulation backend ---

struct ProbabilisticAgentParams {
  double p_correct = 1.0;
  double sycophancy = 0.0;
  std::vector<std::string> answer_space;
};

class ProbabilisticAgent : public AgentBackend {
 public:
  ProbabilisticAgent(int agent_id, ProbabilisticAgentParams params)
      : agent_id_(agent_id), params_(std::move(params)) {
    if (params_.p_correct < 0 || params_.p_correct > 1)
      throw ConfigError("probabilistic agent: p_correct outside [0,1]");
    if (params_.sycophancy < 0 || params_.sycophancy > 1)
      throw ConfigError("probabilistic agent: sycophancy outside [0,1]");
    if (params_.answer_space.empty())
      throw ConfigError("probabilistic agent: empty answer_space");
  }

  std::string respond(const AgentRequest& request, const TurnContext& context) override {
    std::mt19937_64 rng = make_rng(request.seed ? *request.seed
                                                : mix_seed({fnv1a(context.query_id),
                                                            static_cast<std::uint64_t>(agent_id_),
                                                            static_cast<std::uint64_t>(context.round)}));
    std::string answer;
    if (context.round == 0) {
      if (!context.gold_answer)
        throw ConfigError("probabilistic agent: round 0 requires the gold answer in context");
      const std::string& gold = *context.gold_answer;
      if (u01(rng) < params_.p_correct) {
        answer = gold;
      } else {
        std::vector<const std::string*> wrong;
        for (const auto& a : params_.answer_space) {
          if (!answers_equal(a, gold, context.task_kind)) wrong.push_back(&a);
        }
        answer = wrong.empty() ? gold : *wrong[uniform_index(rng, wrong.size())];
      }
    } else {
      const bool adopt = u01(rng) < params_.sycophancy;
      if (adopt && context.previous_majority && !context.previous_majority->empty()) {
        answer = *context.previous_majority;
      } else if (context.own_previous_answer) {
        answer = *context.own_previous_answer;
      } else {
        throw ConfigError("probabilistic agent: later rounds require the previous own answer");
      }
    }
    return std::string(kRationale) + " \\boxed{" + answer + "}";
  }

  static constexpr std::string_view kRationale =
      "I worked through the problem step by step and checked the result.";

 private:
  int agent_id_;
  ProbabilisticAgentParams params_;
};

// --- toy-policy backend ---

// Samples an answer label from a shared toy policy; the provider indirection
// lets the evolution loop swap in a newly trained policy between iterations.
class ToyPolicyAgent : public AgentBackend {
 public:
  using PolicyProvider = std::function<std::shared_ptr<const ToyPolicy>()>;

  ToyPolicyAgent(PolicyProvider provider, int n_contexts)
      : provider_(std::move(provider)), n_contexts_(n_contexts) {
    if (!provider_) throw ConfigError("toy agent: missing policy provider");
    if (n_contexts_ < 1) throw ConfigError("toy agent: n_contexts < 1");
  }

  static int context_of(const std::string& query_id, int n_contexts) {
    return static_cast<int>(fnv1a(query_id) % static_cast<std::uint64_t>(n_contexts));
  }

  std::string respond(const AgentRequest& request, const TurnContext& context) override {
    std::shared_ptr<const ToyPolicy> policy = provider_();
    if (!policy) throw ConfigError("toy agent: provider returned no policy");
    const int ctx = context_of(context.query_id, std::min(n_contexts_, policy->n_contexts()));
    std::mt19937_64 rng = make_rng(request.seed ? *request.seed : fnv1a(context.query_id));
    const int action = sample_action(*policy, ctx, request.temperature, rng);
    const std::string& label = policy->action_labels[action];
    return "<reasoning>Sampled from policy.</reasoning>\n<answer>\\boxed{" + label +
           "}</answer>";
  }

 private:
  PolicyProvider provider_;
  int n_contexts_;
};

// --- HTTP backend (OpenAI-compatible chat completions) ---

namespace detail {

class Semaphore {
 public:
  explicit Semaphore(int count) : count_(count) {}
  void acquire() {
    std::unique_lock lock(m_);
    cv_.wait(lock, [&] { return count_ > 0; });
    --count_;
  }
  void release() {
    {
      std::lock_guard lock(m_);
      ++count_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex m_;
  std::condition_variable cv_;
  int count_;
};

struct SemaphoreGuard {
  Semaphore& s;
  explicit SemaphoreGuard(Semaphore& sem) : s(sem) { s.acquire(); }
  ~SemaphoreGuard() { s.release(); }
};

struct ParsedUrl {
  std::string host_port;  // scheme://host:port
  std::string path_prefix;
};

inline ParsedUrl parse_base_url(const std::string& base_url) {
  const auto scheme_end = base_url.find("://");
  if (scheme_end == std::string::npos)
    throw ConfigError("http agent: base_url must include a scheme: " + base_url);
  const auto path_begin = base_url.find('/', scheme_end + 3);
  ParsedUrl out;
  if (path_begin == std::string::npos) {
    out.host_port = base_url;
  } else {
    out.host_port = base_url.substr(0, path_begin);
    out.path_prefix = base_url.substr(path_begin);
    while (!out.path_prefix.empty() && out.path_prefix.back() == '/') out.path_prefix.pop_back();
  }
  return out;
}

}  // namespace detail

struct HttpAgentOptions {
  std::string base_url;
  std::string model;
  std::string api_key_env = "OPENAI_API_KEY";
  int timeout_ms = 30000;
  int max_attempts = 3;
  int retry_backoff_ms = 250;
  int max_in_flight = 4;
};

class HttpAgent : public AgentBackend {
 public:
  explicit HttpAgent(HttpAgentOptions options)
      : options_(std::move(options)),
        url_(detail::parse_base_url(options_.base_url)),
        semaphore_(options_.max_in_flight) {
    if (options_.model.empty()) throw ConfigError("http agent: model name required");
    if (options_.max_attempts < 1) throw ConfigError("http agent: max_attempts < 1");
  }

  std::string respond(const AgentRequest& request, const TurnContext&) override {
    detail::SemaphoreGuard guard(semaphore_);

    json body{{"model", options_.model},
              {"messages", json::array({json{{"role", "user"}, {"content", request.prompt}}})},
              {"temperature", request.temperature},
              {"max_tokens", request.max_tokens}};
    if (request.seed) body["seed"] = *request.seed;
    const std::string payload = body.dump();

    int last_status = 0;
    std::string last_detail;
    for (int attempt = 1; attempt <= options_.max_attempts; ++attempt) {
      if (attempt > 1) {
        const auto backoff =
            std::chrono::milliseconds(options_.retry_backoff_ms << (attempt - 2));
        std::this_thread::sleep_for(backoff);
      }
      httplib::Client client(url_.host_port);
      client.set_connection_timeout(std::chrono::milliseconds(options_.timeout_ms));
      client.set_read_timeout(std::chrono::milliseconds(options_.timeout_ms));
      client.set_write_timeout(std::chrono::milliseconds(options_.timeout_ms));
      if (const char* key = std::getenv(options_.api_key_env.c_str()); key && *key) {
        client.set_default_headers({{"Authorization", std::string("Bearer ") + key}});
      }

      auto res = client.Post(url_.path_prefix + "/chat/completions", payload, "application/json");
      if (!res) {
        last_status = 0;
        last_detail = "connection failed or timed out";
        continue;
      }
      last_status = res->status;
      if (res->status < 200 || res->status >= 300) {
        last_detail = "HTTP status " + std::to_string(res->status);
        continue;
      }
      try {
        json parsed = json::parse(res->body);
        return parsed.at("choices").at(0).at("message").at("content").get<std::string>();
      } catch (const std::exception& e) {
        last_detail = std::string("malformed response body: ") + e.what();
        continue;
      }
    }
    throw TransportError("http agent: " + options_.base_url + ": " + last_detail + " after " +
                             std::to_string(options_.max_attempts) + " attempts",
                         last_status, options_.max_attempts);
  }

 private:
  HttpAgentOptions options_;
  detail::ParsedUrl url_;
  detail::Semaphore semaphore_;
};

// --- backend construction from AgentConfig ---

namespace detail {

inline std::string param_or(const std::map<std::string, std::string>& params,
                            const std::string& key, const std::string& fallback) {
  auto it = params.find(key);
  return it == params.end() ? fallback : it->second;
}

inline double param_double(const std::map<std::string, std::string>& params,
                           const std::string& key, double fallback) {
  auto it = params.find(key);
  if (it == params.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw ConfigError("backend_params." + key + ": not a number: " + it->second);
  }
}

inline int param_int(const std::map<std::string, std::string>& params, const std::string& key,
                     int fallback) {
  auto it = params.find(key);
  if (it == params.end()) return fallback;
  try {
    return std::stoi(it->second);
  } catch (const std::exception&) {
    throw ConfigError("backend_params." + key + ": not an integer: " + it->second);
  }
}

}  // namespace detail

struct BackendFactoryOptions {
  // Required for toy backends; shared across the pool so training swaps reach
  // every toy member at once.
  ToyPolicyAgent::PolicyProvider policy_provider;
};

inline std::shared_ptr<AgentBackend> make_backend(const AgentConfig& config,
                                                  const BackendFactoryOptions& options = {}) {
  const auto& params = config.backend_params;
  switch (config.backend) {
    case BackendKind::mock: {
      json script;
      if (auto it = params.find("script_json"); it != params.end()) {
        try {
          script = json::parse(it->second);
        } catch (const std::exception& e) {
          throw ConfigError(std::string("mock agent: bad script_json: ") + e.what());
        }
      } else if (auto file = params.find("script_file"); file != params.end()) {
        std::ifstream in(file->second);
        if (!in) throw ConfigError("mock agent: cannot read script_file " + file->second);
        try {
          in >> script;
        } catch (const std::exception& e) {
          throw ConfigError(std::string("mock agent: bad script_file: ") + e.what());
        }
      } else {
        throw ConfigError("mock agent: backend_params needs script_json or script_file");
      }
      return std::make_shared<MockAgent>(MockAgent::parse_script(script));
    }
    case BackendKind::probabilistic: {
      ProbabilisticAgentParams p;
      p.p_correct = detail::param_double(params, "p_correct", 1.0);
      p.sycophancy = detail::param_double(params, "sycophancy", 0.0);
      const std::string space = detail::param_or(params, "answer_space", "");
      if (space.empty())
        throw ConfigError("probabilistic agent: backend_params.answer_space required");
      try {
        json arr = json::parse(space);
        p.answer_space = arr.get<std::vector<std::string>>();
      } catch (const std::exception& e) {
        throw ConfigError(std::string("probabilistic agent: answer_space must be a JSON array: ") +
                          e.what());
      }
      return std::make_shared<ProbabilisticAgent>(config.agent_id, std::move(p));
    }
    case BackendKind::http: {
      HttpAgentOptions o;
      o.base_url = detail::param_or(params, "base_url", "");
      if (o.base_url.empty()) throw ConfigError("http agent: backend_params.base_url required");
      o.model = detail::param_or(params, "model", "");
      o.api_key_env = detail::param_or(params, "api_key_env", "OPENAI_API_KEY");
      o.timeout_ms = detail::param_int(params, "timeout_ms", 30000);
      o.max_attempts = detail::param_int(params, "max_attempts", 3);
      o.retry_backoff_ms = detail::param_int(params, "retry_backoff_ms", 250);
      o.max_in_flight = detail::param_int(params, "max_in_flight", 4);
      return std::make_shared<HttpAgent>(std::move(o));
    }
    case BackendKind::toy: {
      if (!options.policy_provider)
        throw ConfigError("toy agent: a policy provider must be supplied by the caller");
      const int n_contexts = detail::param_int(params, "n_contexts", 1);
      return std::make_shared<ToyPolicyAgent>(options.policy_provider, n_contexts);
    }
  }
  throw ConfigError("unknown backend kind");
}

using BackendSet = std::map<int, std::shared_ptr<AgentBackend>>;

inline BackendSet make_backends(const std::vector<AgentConfig>& pool,
                                const BackendFactoryOptions& options = {}) {
  BackendSet out;
  for (const auto& config : pool) {
    if (!out.emplace(config.agent_id, make_backend(config, options)).second)
      throw ConfigError("agent pool: duplicate agent_id " + std::to_string(config.agent_id));
  }
  return out;
}

// --- analytic oracle for the probabilistic simulator ---

// Probability that a majority of n independent agents, each correct with
// probability p, votes the correct answer.
inline double estimate_majority_accuracy(double p, int n_agents) {
  if (n_agents < 1 || n_agents % 2 == 0)
    throw std::invalid_argument("estimate_majority_accuracy: n_agents must be odd and positive");
  if (p < 0.0 || p > 1.0)
    throw std::invalid_argument("estimate_majority_accuracy: p outside [0,1]");
  double total = 0.0;
  double binom = 1.0;  // C(n, 0)
  for (int j = 0; j <= n_agents; ++j) {
    if (j > n_agents / 2) {
      total += binom * std::pow(p, j) * std::pow(1.0 - p, n_agents - j);
    }
    binom = binom * (n_agents - j) / (j + 1);
  }
  return total;
}

}  // namespace dte
