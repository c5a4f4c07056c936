#pragma once

#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>

#include "dte/domain.hpp"
#include "dte/text.hpp"

namespace dte {

struct ExtractedOutput {
  std::optional<std::string> reasoning;
  std::optional<std::string> answer;
  bool format_ok = false;
  bool operator==(const ExtractedOutput&) const = default;
};

// Content of the last balanced \boxed{...} group, trimmed; absent if none balances.
inline std::optional<std::string> extract_boxed(std::string_view text) {
  static constexpr std::string_view marker = "\\boxed{";
  std::size_t pos = text.rfind(marker);
  while (pos != std::string_view::npos) {
    std::size_t i = pos + marker.size();
    int depth = 1;
    for (std::size_t j = i; j < text.size(); ++j) {
      if (text[j] == '{') ++depth;
      else if (text[j] == '}') {
        --depth;
        if (depth == 0) return trim(text.substr(i, j - i));
      }
    }
    if (pos == 0) break;
    pos = text.rfind(marker, pos - 1);
  }
  return std::nullopt;
}

namespace detail {

struct TagBlock {
  std::size_t open_begin = 0;   // index of '<'
  std::size_t close_end = 0;    // one past the closing tag
  std::string inner;
};

inline std::optional<TagBlock> first_tag_block(std::string_view text, std::string_view tag) {
  const std::string open = "<" + std::string(tag) + ">";
  const std::string close = "</" + std::string(tag) + ">";
  std::size_t b = text.find(open);
  if (b == std::string_view::npos) return std::nullopt;
  std::size_t inner_begin = b + open.size();
  std::size_t e = text.find(close, inner_begin);
  if (e == std::string_view::npos) return std::nullopt;
  TagBlock out;
  out.open_begin = b;
  out.close_end = e + close.size();
  out.inner = std::string(text.substr(inner_begin, e - inner_begin));
  return out;
}

inline std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t n = 0, pos = 0;
  while ((pos = text.find(needle, pos)) != std::string_view::npos) {
    ++n;
    pos += needle.size();
  }
  return n;
}

}  // namespace detail

// format_ok iff the trimmed text is exactly one <reasoning> block, optional
// whitespace, one <answer> block. Fields carry the first-match inner contents
// whenever tags parse, even when the overall format check fails.
inline ExtractedOutput extract_xml(std::string_view text) {
  ExtractedOutput out;
  auto reasoning = detail::first_tag_block(text, "reasoning");
  auto answer = detail::first_tag_block(text, "answer");
  if (reasoning) out.reasoning = reasoning->inner;
  if (answer) out.answer = answer->inner;

  if (!reasoning || !answer) return out;
  if (detail::count_occurrences(text, "<reasoning>") != 1 ||
      detail::count_occurrences(text, "</reasoning>") != 1 ||
      detail::count_occurrences(text, "<answer>") != 1 ||
      detail::count_occurrences(text, "</answer>") != 1) {
    return out;
  }

  const std::string t = trim(text);
  const std::string_view tv = t;
  auto r2 = detail::first_tag_block(tv, "reasoning");
  auto a2 = detail::first_tag_block(tv, "answer");
  if (!r2 || !a2) return out;
  if (r2->open_begin != 0) return out;
  if (a2->open_begin < r2->close_end) return out;
  if (!trim(tv.substr(r2->close_end, a2->open_begin - r2->close_end)).empty()) return out;
  if (a2->close_end != tv.size()) return out;
  out.format_ok = true;
  return out;
}

namespace detail {

struct NumericToken {
  bool negative = false;
  std::string int_digits;   // digits before the decimal point (may be empty)
  std::string frac_digits;  // digits after the decimal point (may be empty)
  bool is_fraction = false;
  std::string denom_digits;  // fraction denominator digits
};

// Scans for numeric tokens: decimals like "-12.50" and simple fractions "a/b"
// (integer numerator and denominator). Returns the last one found.
inline std::optional<NumericToken> last_numeric_token(std::string_view s) {
  std::optional<NumericToken> found;
  std::size_t i = 0;
  while (i < s.size()) {
    bool neg = false;
    std::size_t start = i;
    if ((s[i] == '-' || s[i] == '+') && i + 1 < s.size() &&
        (is_digit(s[i + 1]) || (s[i + 1] == '.' && i + 2 < s.size() && is_digit(s[i + 2])))) {
      neg = (s[i] == '-');
      ++i;
    }
    if (i < s.size() && (is_digit(s[i]) || (s[i] == '.' && i + 1 < s.size() && is_digit(s[i + 1])))) {
      NumericToken tok;
      tok.negative = neg;
      while (i < s.size() && is_digit(s[i])) tok.int_digits.push_back(s[i++]);
      if (i < s.size() && s[i] == '.' && i + 1 < s.size() && is_digit(s[i + 1])) {
        ++i;
        while (i < s.size() && is_digit(s[i])) tok.frac_digits.push_back(s[i++]);
      }
      if (tok.frac_digits.empty() && i < s.size() && s[i] == '/' && i + 1 < s.size() &&
          is_digit(s[i + 1])) {
        std::size_t j = i + 1;
        std::string denom;
        while (j < s.size() && is_digit(s[j])) denom.push_back(s[j++]);
        // "3/4.5" has no integer denominator; abandon the fraction scan
        if (j >= s.size() || s[j] != '.') {
          tok.is_fraction = true;
          tok.denom_digits = std::move(denom);
          i = j;
        }
      }
      found = std::move(tok);
      continue;
    }
    i = start + 1;
  }
  return found;
}

inline std::string strip_zeros_int(std::string digits) {
  std::size_t b = 0;
  while (b + 1 < digits.size() && digits[b] == '0') ++b;
  return digits.substr(b);
}

inline std::string strip_zeros_frac(std::string digits) {
  std::size_t e = digits.size();
  while (e > 0 && digits[e - 1] == '0') --e;
  return digits.substr(0, e);
}

inline std::string render_decimal(bool negative, std::string int_digits, std::string frac_digits) {
  if (int_digits.empty()) int_digits = "0";
  int_digits = strip_zeros_int(std::move(int_digits));
  frac_digits = strip_zeros_frac(std::move(frac_digits));
  std::string out = int_digits;
  if (!frac_digits.empty()) out += "." + frac_digits;
  const bool zero = (int_digits == "0" && frac_digits.empty());
  if (negative && !zero) out.insert(out.begin(), '-');
  return out;
}

// Exact decimal rendering of num/den by long division when the expansion
// terminates (den has only factors 2 and 5 after reduction); absent otherwise.
inline std::optional<std::string> fraction_to_decimal(std::uint64_t num, std::uint64_t den,
                                                      bool negative) {
  std::uint64_t d = den;
  while (d % 2 == 0) d /= 2;
  while (d % 5 == 0) d /= 5;
  if (d != 1) return std::nullopt;
  std::string int_part = std::to_string(num / den);
  std::uint64_t rem = num % den;
  std::string frac_part;
  while (rem != 0 && frac_part.size() < 128) {
    const unsigned __int128 scaled = static_cast<unsigned __int128>(rem) * 10;
    frac_part.push_back(static_cast<char>('0' + static_cast<int>(scaled / den)));
    rem = static_cast<std::uint64_t>(scaled % den);
  }
  if (rem != 0) return std::nullopt;
  return render_decimal(negative, std::move(int_part), std::move(frac_part));
}

inline std::string normalize_math(std::string_view raw) {
  std::string cleaned;
  cleaned.reserve(raw.size());
  for (char c : raw) {
    if (c == '$' || c == ',' || c == '%') continue;
    cleaned.push_back(c);
  }
  auto tok = last_numeric_token(cleaned);
  if (!tok) return to_lower(trim(raw));

  if (!tok->is_fraction) {
    return render_decimal(tok->negative, tok->int_digits, tok->frac_digits);
  }

  std::uint64_t num = 0, den = 0;
  try {
    num = std::stoull(tok->int_digits);
    den = std::stoull(tok->denom_digits);
  } catch (const std::exception&) {
    return to_lower(trim(raw));
  }
  if (den == 0) return to_lower(trim(raw));
  if (num == 0) return "0";
  const std::uint64_t g = std::gcd(num, den);
  num /= g;
  den /= g;
  if (auto dec = fraction_to_decimal(num, den, tok->negative)) return *dec;
  std::string out = std::to_string(num) + "/" + std::to_string(den);
  if (tok->negative) out.insert(out.begin(), '-');
  return out;
}

// Word boundaries for the lone-letter scan; apostrophes are word-internal so
// contractions contribute no lone letters.
inline bool mc_word_char(char c) { return is_alnum(c) || c == '\''; }

inline std::string normalize_mc(std::string_view raw) {
  const std::string t = trim(raw);
  std::optional<char> lone;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!is_alpha(t[i])) continue;
    const bool left_ok = (i == 0) || !mc_word_char(t[i - 1]);
    const bool right_ok = (i + 1 == t.size()) || !mc_word_char(t[i + 1]);
    if (left_ok && right_ok) lone = t[i];
  }
  if (lone) return std::string(1, static_cast<char>(std::toupper(static_cast<unsigned char>(*lone))));
  return to_upper(t);
}

}  // namespace detail

// Canonical comparison form for answers; total (falls back to trimmed
// lowercased input when nothing parses).
inline std::string normalize_answer(std::string_view raw, TaskKind kind) {
  if (kind == TaskKind::math) return detail::normalize_math(raw);
  return detail::normalize_mc(raw);
}

inline bool answers_equal(std::string_view a, std::string_view b, TaskKind kind) {
  return normalize_answer(a, kind) == normalize_answer(b, kind);
}

// Raw final-answer text of a model output: last balanced \boxed{} group if
// any, else the <answer> block. Absent when neither parses.
inline std::optional<std::string> extract_answer_text(std::string_view raw) {
  if (auto boxed = extract_boxed(raw)) return boxed;
  auto xml = extract_xml(raw);
  if (xml.answer) {
    // the answer block may itself wrap its content in \boxed{}
    if (auto boxed = extract_boxed(*xml.answer)) return boxed;
    return trim(*xml.answer);
  }
  return std::nullopt;
}

// Normalized final answer; empty string when extraction fails (unequal to
// every gold, so it scores incorrect without crashing anything).
inline std::string extract_normalized_answer(std::string_view raw, TaskKind kind) {
  auto text = extract_answer_text(raw);
  if (!text) return "";
  return normalize_answer(*text, kind);
}

// Rationale of a model output: the <reasoning> block when present, else the
// raw text with the final \boxed{} construct removed.
inline std::string extract_rationale(std::string_view raw) {
  auto xml = extract_xml(raw);
  if (xml.reasoning) return trim(*xml.reasoning);
  static constexpr std::string_view marker = "\\boxed{";
  std::size_t pos = raw.rfind(marker);
  while (pos != std::string_view::npos) {
    std::size_t i = pos + marker.size();
    int depth = 1;
    for (std::size_t j = i; j < raw.size(); ++j) {
      if (raw[j] == '{') ++depth;
      else if (raw[j] == '}') {
        --depth;
        if (depth == 0) {
          std::string remainder(raw.substr(0, pos));
          remainder += raw.substr(j + 1);
          std::string trimmed = trim(remainder);
          if (!trimmed.empty()) return trimmed;
          return trim(raw);
        }
      }
    }
    if (pos == 0) break;
    pos = raw.rfind(marker, pos - 1);
  }
  return trim(raw);
}

}  // namespace dte
