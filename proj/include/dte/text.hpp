#pragma once

#include <algorithm>
#include <cctype>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "dte/util.hpp"

namespace dte {

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
inline bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }
inline bool is_alpha(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }
inline bool is_alnum(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline std::string to_upper(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return out;
}

inline std::string collapse_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool in_ws = false;
  for (char c : s) {
    if (is_space(c)) {
      in_ws = true;
      continue;
    }
    if (in_ws && !out.empty()) out.push_back(' ');
    in_ws = false;
    out.push_back(c);
  }
  return out;
}

inline std::vector<std::string> whitespace_tokens(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && is_space(s[i])) ++i;
    std::size_t j = i;
    while (j < s.size() && !is_space(s[j])) ++j;
    if (j > i) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

// Length |y| used by the brevity reward term.
inline std::size_t token_count(std::string_view s) { return whitespace_tokens(s).size(); }

// Sentences are runs delimited by '.', '?', '!' or newline; empty runs drop out.
inline std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == '.' || c == '?' || c == '!' || c == '\n') {
      std::string t = trim(cur);
      if (!t.empty()) out.push_back(std::move(t));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  std::string t = trim(cur);
  if (!t.empty()) out.push_back(std::move(t));
  return out;
}

// Lowercased, punctuation stripped, whitespace collapsed; the comparison form
// behind sentence-level similarity.
inline std::string normalize_sentence(std::string_view s) {
  std::string kept;
  kept.reserve(s.size());
  for (char c : s) {
    if (is_alnum(c) || is_space(c)) kept.push_back(c);
  }
  return collapse_whitespace(to_lower(kept));
}

inline std::set<std::string> sentence_token_set(std::string_view sentence) {
  std::set<std::string> out;
  for (auto& t : whitespace_tokens(normalize_sentence(sentence))) out.insert(std::move(t));
  return out;
}

// Jaccard similarity over token sets. Both empty -> 1.0, exactly one empty -> 0.0.
inline double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() && b.empty()) return 1.0;
  if (a.empty() || b.empty()) return 0.0;
  std::size_t inter = 0;
  for (const auto& t : a) inter += b.count(t);
  std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double sentence_similarity(std::string_view a, std::string_view b) {
  return jaccard(sentence_token_set(a), sentence_token_set(b));
}

namespace detail {
// Multi-byte operator glyphs recognized alongside the ASCII ones.
inline bool match_utf8_op(std::string_view s, std::size_t i, std::string* out) {
  static constexpr std::string_view ops[] = {"×", "÷", "−"};
  for (auto op : ops) {
    if (s.substr(i, op.size()) == op) {
      *out = std::string(op);
      return true;
    }
  }
  return false;
}
}  // namespace detail

// Tokens that carry mathematical content: numbers (with optional decimal
// point), operator symbols, and standalone single letters (variables).
inline std::set<std::string> math_tokens(std::string_view sentence) {
  std::set<std::string> out;
  const std::string_view s = sentence;
  std::size_t i = 0;
  while (i < s.size()) {
    char c = s[i];
    if (is_digit(c)) {
      std::size_t j = i;
      bool dot = false;
      while (j < s.size() && (is_digit(s[j]) || (s[j] == '.' && !dot && j + 1 < s.size() && is_digit(s[j + 1])))) {
        if (s[j] == '.') dot = true;
        ++j;
      }
      out.insert(std::string(s.substr(i, j - i)));
      i = j;
      continue;
    }
    if (c == '+' || c == '-' || c == '*' || c == '/' || c == '=' || c == '<' ||
        c == '>' || c == '^' || c == '%') {
      out.insert(std::string(1, c));
      ++i;
      continue;
    }
    std::string op;
    if (detail::match_utf8_op(s, i, &op)) {
      out.insert(op);
      i += op.size();
      continue;
    }
    if (is_alpha(c)) {
      std::size_t j = i;
      while (j < s.size() && is_alpha(s[j])) ++j;
      if (j - i == 1) out.insert(to_lower(s.substr(i, 1)));
      i = j;
      continue;
    }
    ++i;
  }
  return out;
}

}  // namespace dte
