#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dte/extract.hpp"

using namespace dte;

namespace {

// Reference for extract_boxed: scan left to right, collect every balanced
// group, report the one whose opening marker starts last.
std::optional<std::string> boxed_oracle(const std::string& text) {
  const std::string marker = "\\boxed{";
  std::optional<std::string> last;
  std::size_t pos = 0;
  while ((pos = text.find(marker, pos)) != std::string::npos) {
    std::size_t i = pos + marker.size();
    int depth = 1;
    for (std::size_t j = i; j < text.size(); ++j) {
      if (text[j] == '{') ++depth;
      if (text[j] == '}') {
        --depth;
        if (depth == 0) {
          last = trim(text.substr(i, j - i));
          break;
        }
      }
    }
    ++pos;
  }
  return last;
}

// Exact-rational check that a normalized math answer denotes num/den and is in
// canonical form. Avoids re-deriving the string the implementation builds.
bool denotes_fraction(const std::string& out, std::int64_t num, std::int64_t den) {
  REQUIRE(den > 0);
  const bool neg = !out.empty() && out[0] == '-';
  const std::string body = neg ? out.substr(1) : out;
  const auto slash = body.find('/');
  if (slash != std::string::npos) {
    if (slash == 0 || slash + 1 >= body.size()) return false;
    const std::int64_t p = std::stoll(body.substr(0, slash));
    const std::int64_t q = std::stoll(body.substr(slash + 1));
    if (p <= 0 || q <= 0) return false;
    if (std::gcd(p, q) != 1) return false;  // lowest terms
    std::int64_t qq = q;
    while (qq % 2 == 0) qq /= 2;
    while (qq % 5 == 0) qq /= 5;
    if (qq == 1) return false;  // would terminate; should have been a decimal
    return (neg ? -p : p) * den == num * q;
  }
  const auto dot = body.find('.');
  const std::string int_part = dot == std::string::npos ? body : body.substr(0, dot);
  const std::string frac_part = dot == std::string::npos ? "" : body.substr(dot + 1);
  if (int_part.empty()) return false;
  if (int_part.size() > 1 && int_part[0] == '0') return false;      // no leading zeros
  if (!frac_part.empty() && frac_part.back() == '0') return false;  // no trailing zeros
  if (dot != std::string::npos && frac_part.empty()) return false;
  std::int64_t value = std::stoll(int_part);
  std::int64_t scale = 1;
  for (char c : frac_part) {
    value = value * 10 + (c - '0');
    scale *= 10;
  }
  if (neg) value = -value;
  if (neg && value == 0) return false;  // "-0" is not canonical
  return value * den == num * scale;
}

std::string random_boxed_soup(std::mt19937_64& rng, std::size_t len) {
  static const std::string alphabet = "\\boxed{}ab12 ";
  std::string s;
  for (std::size_t i = 0; i < len; ++i) s.push_back(alphabet[rng() % alphabet.size()]);
  return s;
}

}  // namespace

TEST_CASE("extract_boxed pinned examples") {
  CHECK(extract_boxed("... so \\boxed{42}") == "42");
  CHECK(extract_boxed("\\boxed{1} wait \\boxed{3/4}") == "3/4");
  CHECK(extract_boxed("\\boxed{\\frac{1}{2}}") == "\\frac{1}{2}");
  CHECK_FALSE(extract_boxed("no box here").has_value());
  CHECK_FALSE(extract_boxed("\\boxed{unclosed").has_value());
  CHECK(extract_boxed("\\boxed{ 7 }") == "7");
  CHECK(extract_boxed("\\boxed{}") == "");
}

TEST_CASE("extract_boxed matches the scan oracle on structured fuzz") {
  std::mt19937_64 rng(20240817);
  for (int i = 0; i < 4000; ++i) {
    std::string s = random_boxed_soup(rng, 1 + rng() % 60);
    auto got = extract_boxed(s);
    auto want = boxed_oracle(s);
    REQUIRE(got == want);
  }
}

TEST_CASE("extract_boxed never throws on arbitrary byte strings") {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 2000; ++i) {
    std::string s;
    std::size_t len = rng() % 80;
    for (std::size_t j = 0; j < len; ++j) s.push_back(static_cast<char>(rng() & 0xff));
    CHECK_NOTHROW(extract_boxed(s));
    CHECK_NOTHROW(extract_xml(s));
    CHECK_NOTHROW(normalize_answer(s, TaskKind::math));
    CHECK_NOTHROW(normalize_answer(s, TaskKind::science));
  }
}

TEST_CASE("extract_xml pinned examples") {
  auto a = extract_xml("<reasoning>a</reasoning>\n<answer>5</answer>");
  CHECK(a.reasoning == "a");
  CHECK(a.answer == "5");
  CHECK(a.format_ok);

  auto b = extract_xml("<answer>5</answer>");
  CHECK_FALSE(b.reasoning.has_value());
  CHECK(b.answer == "5");
  CHECK_FALSE(b.format_ok);

  auto c = extract_xml("<reasoning>a</reasoning><answer>5</answer><answer>6</answer>");
  CHECK_FALSE(c.format_ok);
  CHECK(c.answer == "5");

  auto d = extract_xml("  <reasoning>r</reasoning>  <answer>4</answer>  ");
  CHECK(d.format_ok);

  auto e = extract_xml("<reasoning>a</reasoning> tail <answer>5</answer>");
  CHECK_FALSE(e.format_ok);
}

TEST_CASE("extract_xml agrees with an exhaustive small-grammar oracle") {
  struct Token {
    std::string text;
    enum Kind { reasoning, answer, ws, junk } kind;
    std::string inner;
  };
  const std::vector<Token> tokens = {
      {"<reasoning>a</reasoning>", Token::reasoning, "a"},
      {"<reasoning>b b</reasoning>", Token::reasoning, "b b"},
      {"<answer>5</answer>", Token::answer, "5"},
      {"<answer>6</answer>", Token::answer, "6"},
      {" ", Token::ws, ""},
      {"\n", Token::ws, ""},
      {"x", Token::junk, ""},
  };

  std::vector<std::vector<int>> sequences;
  const int n = static_cast<int>(tokens.size());
  for (int a = 0; a < n; ++a) {
    sequences.push_back({a});
    for (int b = 0; b < n; ++b) {
      sequences.push_back({a, b});
      for (int c = 0; c < n; ++c) sequences.push_back({a, b, c});
    }
  }

  for (const auto& seq : sequences) {
    std::string text;
    std::vector<int> solid;  // non-whitespace token indices in order
    int n_reasoning = 0, n_answer = 0;
    std::optional<std::string> first_reasoning, first_answer;
    for (int idx : seq) {
      const Token& t = tokens[idx];
      text += t.text;
      if (t.kind == Token::reasoning) {
        ++n_reasoning;
        if (!first_reasoning) first_reasoning = t.inner;
      }
      if (t.kind == Token::answer) {
        ++n_answer;
        if (!first_answer) first_answer = t.inner;
      }
      if (t.kind != Token::ws) solid.push_back(idx);
    }
    const bool want_ok = solid.size() == 2 && tokens[solid[0]].kind == Token::reasoning &&
                         tokens[solid[1]].kind == Token::answer;

    auto got = extract_xml(text);
    INFO("text = " << text);
    CHECK(got.format_ok == want_ok);
    CHECK(got.reasoning == first_reasoning);
    CHECK(got.answer == first_answer);
  }
}

TEST_CASE("math normalization pinned examples") {
  CHECK(normalize_answer("$1,000", TaskKind::math) == "1000");
  CHECK(normalize_answer("2/4", TaskKind::math) == "0.5");
  CHECK(normalize_answer("42.0", TaskKind::math) == "42");
  CHECK(normalize_answer("The total is 18 dollars", TaskKind::math) == "18");
  CHECK(normalize_answer("-3.50", TaskKind::math) == "-3.5");
  CHECK(normalize_answer(".5", TaskKind::math) == "0.5");
  CHECK(normalize_answer("007", TaskKind::math) == "7");
  CHECK(normalize_answer("1/3", TaskKind::math) == "1/3");
  CHECK(normalize_answer("2/6", TaskKind::math) == "1/3");
  CHECK(normalize_answer("-0.000", TaskKind::math) == "0");
  CHECK(normalize_answer("50%", TaskKind::math) == "50");
  CHECK(normalize_answer("no idea", TaskKind::math) == "no idea");
  CHECK(normalize_answer("", TaskKind::math) == "");
}

TEST_CASE("fraction normalization agrees with exact rational arithmetic") {
  for (std::int64_t num = 0; num <= 30; ++num) {
    for (std::int64_t den = 1; den <= 30; ++den) {
      std::string in = std::to_string(num) + "/" + std::to_string(den);
      std::string out = normalize_answer(in, TaskKind::math);
      INFO(in << " -> " << out);
      CHECK(denotes_fraction(out, num, den));
    }
  }
  CHECK(denotes_fraction(normalize_answer("-3/4", TaskKind::math), -3, 4));
  CHECK(denotes_fraction(normalize_answer("-7/6", TaskKind::math), -7, 6));
}

TEST_CASE("MC normalization pinned examples") {
  CHECK(normalize_answer(" (C) ", TaskKind::science) == "C");
  CHECK(normalize_answer("c", TaskKind::science) == "C");
  CHECK(normalize_answer("The answer is B", TaskKind::commonsense) == "B");
  CHECK(normalize_answer("a", TaskKind::commonsense) == "A");
  CHECK(normalize_answer("bank teller", TaskKind::commonsense) == "BANK TELLER");
  CHECK(normalize_answer("don't know", TaskKind::commonsense) == "DON'T KNOW");
  CHECK(normalize_answer("", TaskKind::science) == "");
}

TEST_CASE("answers_equal pinned examples and equivalence relation") {
  CHECK(answers_equal("42", "42.0", TaskKind::math));
  CHECK(answers_equal("C", "c", TaskKind::science));
  CHECK_FALSE(answers_equal("7", "8", TaskKind::math));
  CHECK_FALSE(answers_equal("1/3", "0.333", TaskKind::math));
  CHECK(answers_equal("1/2", "0.5", TaskKind::math));

  const std::vector<std::string> sample = {"42",  "42.0", "0.5", "1/2", "2/4",  "7",
                                           "7.0", "x",    "X",   "",    "857.", "1/3"};
  for (auto kind : {TaskKind::math, TaskKind::science}) {
    for (const auto& a : sample) CHECK(answers_equal(a, a, kind));
    for (const auto& a : sample)
      for (const auto& b : sample) CHECK(answers_equal(a, b, kind) == answers_equal(b, a, kind));
    for (const auto& a : sample)
      for (const auto& b : sample)
        for (const auto& c : sample)
          if (answers_equal(a, b, kind) && answers_equal(b, c, kind))
            CHECK(answers_equal(a, c, kind));
  }
}

TEST_CASE("normalization is idempotent") {
  std::mt19937_64 rng(7);
  std::vector<std::string> cases = {"$1,000", "2/4",  "42.0", " (C) ", "a",  "-0.00",
                                    "1/3",    "12/8", ".25",  "x = 9", "",   "100%",
                                    "3/4.5",  "007",  "-5"};
  for (int i = 0; i < 1000; ++i) cases.push_back(random_boxed_soup(rng, rng() % 30));
  for (const auto& raw : cases) {
    for (auto kind : {TaskKind::math, TaskKind::science, TaskKind::commonsense}) {
      std::string once = normalize_answer(raw, kind);
      std::string twice = normalize_answer(once, kind);
      INFO("raw = [" << raw << "], kind = " << to_string(kind));
      CHECK(once == twice);
    }
  }
}

TEST_CASE("answer and rationale extraction from full outputs") {
  const std::string boxed = "Step one. Step two. The answer is \\boxed{42}";
  CHECK(extract_normalized_answer(boxed, TaskKind::math) == "42");
  CHECK(extract_rationale(boxed) == "Step one. Step two. The answer is");

  const std::string xml = "<reasoning>Because of X.</reasoning>\n<answer>\\boxed{7}</answer>";
  CHECK(extract_normalized_answer(xml, TaskKind::math) == "7");
  CHECK(extract_rationale(xml) == "Because of X.");

  const std::string xml_plain = "<reasoning>r</reasoning>\n<answer> B </answer>";
  CHECK(extract_normalized_answer(xml_plain, TaskKind::science) == "B");

  CHECK(extract_normalized_answer("nothing to see", TaskKind::math) == "");
  CHECK(extract_rationale("just text, no box") == "just text, no box");
}
