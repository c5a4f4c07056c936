#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dte/domain.hpp"
#include "dte/extract.hpp"
#include "dte/text.hpp"

namespace dte {

enum class Split { train, validation, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  throw std::invalid_argument("unknown split");
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split: " + s);
}

struct DatasetManifest {
  std::string name;
  Split split = Split::test;
  std::optional<int> expected_count;
  TaskKind task_kind = TaskKind::math;
  bool operator==(const DatasetManifest&) const = default;
};

inline void to_json(json& j, const DatasetManifest& m) {
  j = json{{"name", m.name},
           {"split", to_string(m.split)},
           {"task_kind", to_string(m.task_kind)}};
  if (m.expected_count) j["expected_count"] = *m.expected_count;
}

inline void from_json(const json& j, DatasetManifest& m) {
  m = DatasetManifest{};
  j.at("name").get_to(m.name);
  m.split = split_from_string(j.at("split").get<std::string>());
  m.task_kind = task_kind_from_string(j.at("task_kind").get<std::string>());
  if (j.contains("expected_count")) m.expected_count = j.at("expected_count").get<int>();
}

// Published split sizes for the five benchmarks; absent entries carry no
// constraint.
inline std::optional<int> published_split_count(const std::string& name, Split split) {
  struct Row {
    const char* name;
    int train, validation, test;  // -1 when the split does not exist
  };
  static constexpr Row rows[] = {
      {"gsm8k", 7473, -1, 1319},         {"gsm_plus", -1, 10552, 2400},
      {"arc_easy", 2251, 570, 2376},     {"arc_challenge", 1119, 299, 1172},
      {"commonsenseqa", 9741, 1221, 1140}};
  for (const Row& row : rows) {
    if (row.name != name) continue;
    const int n = split == Split::train ? row.train
                : split == Split::validation ? row.validation
                                             : row.test;
    if (n < 0) return std::nullopt;
    return n;
  }
  return std::nullopt;
}

inline void validate_manifest(const DatasetManifest& m) {
  if (m.name.empty()) throw ConfigError("dataset manifest: empty name");
  if (!m.expected_count) return;
  if (*m.expected_count < 0) throw ConfigError("dataset manifest: negative expected_count");
  if (auto published = published_split_count(m.name, m.split);
      published && *published != *m.expected_count) {
    throw ConfigError("dataset manifest: " + m.name + " " + to_string(m.split) +
                      " has " + std::to_string(*published) + " examples, manifest says " +
                      std::to_string(*m.expected_count));
  }
}

namespace detail {

inline std::runtime_error dataset_error(const std::filesystem::path& path, int line,
                                        const std::string& what) {
  return std::runtime_error("bad dataset line in " + path.string() + " line " +
                            std::to_string(line) + ": " + what);
}

// Gold for GSM-style answers: text after the final "#### " marker.
inline std::string gsm_gold(const std::string& answer) {
  const std::size_t at = answer.rfind("#### ");
  if (at == std::string::npos) throw std::invalid_argument("no #### answer marker");
  const std::string gold = normalize_answer(trim(answer.substr(at + 5)), TaskKind::math);
  if (gold.empty()) throw std::invalid_argument("empty gold after #### marker");
  return gold;
}

}  // namespace detail

// Loads a JSON Lines benchmark file. Math manifests expect {question, answer}
// with a "#### gold" marker; multiple-choice manifests expect
// {question, choices: [{label, text}...], answerKey}.
inline std::vector<Query> load_dataset(const std::filesystem::path& path,
                                       const DatasetManifest& manifest) {
  validate_manifest(manifest);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read dataset file " + path.string());

  const bool is_math = manifest.task_kind == TaskKind::math;
  std::vector<Query> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      throw detail::dataset_error(path, line_no, e.what());
    }

    Query q;
    q.id = manifest.name + ":" + to_string(manifest.split) + ":" + std::to_string(line_no);
    q.task_kind = manifest.task_kind;
    q.dataset = manifest.name;
    try {
      q.text = j.at("question").get<std::string>();
      if (is_math) {
        q.gold_answer = detail::gsm_gold(j.at("answer").get<std::string>());
      } else {
        std::vector<Choice> choices;
        for (const auto& c : j.at("choices")) {
          choices.push_back({c.at("label").get<std::string>(), c.at("text").get<std::string>()});
        }
        if (choices.empty()) throw std::invalid_argument("empty choices list");
        q.choices = std::move(choices);
        const std::string key =
            normalize_answer(j.at("answerKey").get<std::string>(), manifest.task_kind);
        if (key.empty()) throw std::invalid_argument("empty answerKey");
        q.gold_answer = key;
      }
    } catch (const std::exception& e) {
      throw detail::dataset_error(path, line_no, e.what());
    }
    out.push_back(std::move(q));
  }

  if (manifest.expected_count && static_cast<int>(out.size()) != *manifest.expected_count) {
    throw std::runtime_error("dataset " + manifest.name + " " + to_string(manifest.split) +
                             ": expected " + std::to_string(*manifest.expected_count) +
                             " examples, got " + std::to_string(out.size()));
  }
  return out;
}

inline DatasetManifest read_dataset_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read dataset manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("bad dataset manifest " + path.string() + ": " + e.what());
  }
  return j.get<DatasetManifest>();
}

inline void write_dataset_manifest(const DatasetManifest& manifest,
                                   const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dataset manifest " + path.string());
  out << canonical_json(manifest) << '\n';
}

}  // namespace dte
