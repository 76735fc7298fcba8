#pragma once

// Synthetic prompt/answer corpora with exact oracles, and order-1 Markov
// sources whose joint over K positions can be enumerated exactly.

#include "tad/distribution.hpp"
#include "tad/rng.hpp"
#include "tad/vocab.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tad {

enum class TaskKind { kArithmetic, kCopy, kReverse };

inline std::string_view task_name(TaskKind k) {
  switch (k) {
    case TaskKind::kArithmetic: return "arith";
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
  }
  return "?";
}

inline TaskKind parse_task(std::string_view name) {
  if (name == "arith" || name == "arithmetic") return TaskKind::kArithmetic;
  if (name == "copy") return TaskKind::kCopy;
  if (name == "reverse" || name == "rev") return TaskKind::kReverse;
  throw std::invalid_argument("unknown task id '" + std::string(name) + "'");
}

inline TokenId task_marker(TaskKind k) {
  switch (k) {
    case TaskKind::kArithmetic: return tok::kArith;
    case TaskKind::kCopy: return tok::kCopy;
    case TaskKind::kReverse: return tok::kReverse;
  }
  return tok::kPad;
}

struct TaskSpec {
  TaskKind kind = TaskKind::kArithmetic;
  std::size_t gen_len = 8;
  // arithmetic chains of single-digit operands
  int min_terms = 2;
  int max_terms = 3;
  int modulus = 10;
  bool allow_minus = false;
  // copy / reverse strings
  int min_len = 2;
  int max_len = 6;
  int letters = 26;

  void validate() const {
    if (gen_len == 0) throw std::invalid_argument("gen_len must be >= 1");
    if (min_terms < 1 || max_terms < min_terms) throw std::invalid_argument("bad term range");
    if (modulus < 2) throw std::invalid_argument("modulus must be >= 2");
    if (min_len < 1 || max_len < min_len) throw std::invalid_argument("bad string length range");
    if (letters < 1 || letters > 26) throw std::invalid_argument("letters must lie in [1, 26]");
    if (kind != TaskKind::kArithmetic && static_cast<std::size_t>(max_len) > gen_len)
      throw std::invalid_argument("answers longer than the generation budget");
    if (kind == TaskKind::kArithmetic &&
        std::to_string(modulus - 1).size() > gen_len)
      throw std::invalid_argument("arithmetic answers longer than the generation budget");
  }
};

/// Prompt ids start with the task marker; the answer is padded with PAD to gen_len.
struct PromptAnswerPair {
  TaskKind task = TaskKind::kArithmetic;
  std::vector<TokenId> prompt;
  std::vector<TokenId> answer;

  std::string prompt_text() const { return content_text(prompt); }
  std::string answer_text() const { return content_text(answer); }

  friend bool operator==(const PromptAnswerPair&, const PromptAnswerPair&) = default;
};

inline std::vector<TokenId> strip_trailing_pad(std::span<const TokenId> ids) {
  std::size_t n = ids.size();
  while (n > 0 && ids[n - 1] == tok::kPad) --n;
  return {ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n)};
}

inline std::vector<TokenId> digits_of(int value) {
  std::vector<TokenId> out;
  for (char c : std::to_string(value)) out.push_back(tok::digit(c - '0'));
  return out;
}

namespace detail {

inline std::vector<TokenId> pad_to(std::vector<TokenId> v, std::size_t n) {
  v.resize(n, tok::kPad);
  return v;
}

inline int positive_mod(int v, int m) { return ((v % m) + m) % m; }

/// Evaluates "d op d op ... =" left to right modulo m; nullopt if malformed.
inline std::optional<int> eval_chain(std::span<const TokenId> body, int modulus) {
  if (body.size() < 2 || body.back() != tok::kEquals) return std::nullopt;
  auto expr = body.first(body.size() - 1);
  if (expr.size() % 2 == 0) return std::nullopt;
  int acc = 0;
  int sign = 1;
  for (std::size_t i = 0; i < expr.size(); ++i) {
    if (i % 2 == 0) {
      if (!tok::is_digit(expr[i])) return std::nullopt;
      acc += sign * (expr[i] - tok::kDigit0);
    } else if (expr[i] == tok::kPlus) {
      sign = 1;
    } else if (expr[i] == tok::kMinus) {
      sign = -1;
    } else {
      return std::nullopt;
    }
  }
  return positive_mod(acc, modulus);
}

}  // namespace detail

inline PromptAnswerPair make_pair(const TaskSpec& spec, Rng& rng) {
  PromptAnswerPair p;
  p.task = spec.kind;
  p.prompt.push_back(task_marker(spec.kind));
  if (spec.kind == TaskKind::kArithmetic) {
    const int terms = rng.between(spec.min_terms, spec.max_terms);
    int acc = 0;
    for (int i = 0; i < terms; ++i) {
      int sign = 1;
      if (i > 0) {
        sign = (spec.allow_minus && rng.bernoulli(0.5)) ? -1 : 1;
        p.prompt.push_back(sign > 0 ? tok::kPlus : tok::kMinus);
      }
      const int d = rng.between(0, 9);
      p.prompt.push_back(tok::digit(d));
      acc += sign * d;
    }
    p.prompt.push_back(tok::kEquals);
    p.answer = detail::pad_to(digits_of(detail::positive_mod(acc, spec.modulus)), spec.gen_len);
  } else {
    const int len = rng.between(spec.min_len, spec.max_len);
    std::vector<TokenId> s;
    for (int i = 0; i < len; ++i) s.push_back(tok::letter(rng.between(0, spec.letters - 1)));
    p.prompt.insert(p.prompt.end(), s.begin(), s.end());
    if (spec.kind == TaskKind::kReverse) std::reverse(s.begin(), s.end());
    p.answer = detail::pad_to(std::move(s), spec.gen_len);
  }
  return p;
}

inline std::vector<PromptAnswerPair> generate_corpus(const TaskSpec& spec, std::size_t n, Rng& rng) {
  if (n == 0) throw std::invalid_argument("corpus size must be > 0");
  spec.validate();
  std::vector<PromptAnswerPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_pair(spec, rng));
  return out;
}

/// Draws each item's task uniformly from `specs`.
inline std::vector<PromptAnswerPair> generate_mixed_corpus(std::span<const TaskSpec> specs,
                                                           std::size_t n, Rng& rng) {
  if (n == 0) throw std::invalid_argument("corpus size must be > 0");
  if (specs.empty()) throw std::invalid_argument("no tasks in mix");
  for (const auto& s : specs) s.validate();
  std::vector<PromptAnswerPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_pair(specs[rng.below(specs.size())], rng));
  return out;
}

struct TaskOracle {
  TaskKind task = TaskKind::kArithmetic;
  int modulus = 10;

  /// Trailing PAD is ignored; any other deviation (MASK, extra tokens) fails.
  bool check(std::span<const TokenId> prompt, std::span<const TokenId> output) const {
    if (prompt.empty() || prompt[0] != task_marker(task)) return false;
    const auto body = prompt.subspan(1);
    const auto got = strip_trailing_pad(output);
    std::vector<TokenId> want;
    if (task == TaskKind::kArithmetic) {
      const auto v = detail::eval_chain(body, modulus);
      if (!v) return false;
      want = digits_of(*v);
    } else {
      for (TokenId t : body)
        if (!tok::is_letter(t)) return false;
      want.assign(body.begin(), body.end());
      if (task == TaskKind::kReverse) std::reverse(want.begin(), want.end());
    }
    return got == want;
  }
};

inline bool oracle_check(const TaskOracle& oracle, std::span<const TokenId> prompt,
                         std::span<const TokenId> output) {
  return oracle.check(prompt, output);
}

inline TaskOracle oracle_for(TaskKind k, int modulus = 10) { return TaskOracle{k, modulus}; }

/// Picks the oracle for an item's task.
using OracleLookup = std::function<TaskOracle(TaskKind)>;

inline OracleLookup default_oracles(int modulus = 10) {
  return [modulus](TaskKind k) { return oracle_for(k, modulus); };
}

// ---------------------------------------------------------------------------
// Corpus files: one JSON object per line.

inline nlohmann::json to_json(const PromptAnswerPair& p) {
  return {{"task", task_name(p.task)},
          {"prompt_ids", p.prompt},
          {"answer_ids", p.answer},
          {"prompt_text", p.prompt_text()},
          {"answer_text", p.answer_text()}};
}

inline void save_corpus(std::span<const PromptAnswerPair> items, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const auto& p : items) f << to_json(p).dump() << '\n';
}

inline std::vector<PromptAnswerPair> load_corpus(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open corpus file '" + path + "'");
  std::vector<PromptAnswerPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PromptAnswerPair p;
      p.task = parse_task(j.at("task").get<std::string>());
      p.prompt = j.at("prompt_ids").get<std::vector<TokenId>>();
      p.answer = j.at("answer_ids").get<std::vector<TokenId>>();
      out.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Markov sources.

struct MarkovSource {
  int alphabet = 2;
  std::vector<double> initial;
  std::vector<double> transition;  // row-major alphabet x alphabet

  std::span<const double> row(int from) const {
    return {transition.data() + static_cast<std::size_t>(from * alphabet),
            static_cast<std::size_t>(alphabet)};
  }

  void validate() const {
    const auto a = static_cast<std::size_t>(alphabet);
    if (alphabet < 1 || initial.size() != a || transition.size() != a * a)
      throw std::invalid_argument("Markov source dimensions do not match the alphabet");
    auto check = [](std::span<const double> r, const char* what) {
      double s = 0.0;
      for (double v : r) {
        if (v < 0.0) throw std::invalid_argument(std::string(what) + " has a negative entry");
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument(std::string(what) + " does not sum to 1");
    };
    check(initial, "initial distribution");
    for (int i = 0; i < alphabet; ++i) check(row(i), "transition row");
  }

  static MarkovSource iid(std::vector<double> p) {
    MarkovSource s;
    s.alphabet = static_cast<int>(p.size());
    s.initial = p;
    for (int i = 0; i < s.alphabet; ++i) s.transition.insert(s.transition.end(), p.begin(), p.end());
    return s;
  }

  /// Binary chain that keeps its symbol with probability `stay`, uniform start.
  static MarkovSource sticky_binary(double stay) {
    return MarkovSource{2, {0.5, 0.5}, {stay, 1.0 - stay, 1.0 - stay, stay}};
  }
};

/// Exact joint over all alphabet^K sequences by the chain rule.
inline DistributionTable enumerate_joint(const MarkovSource& source, int length) {
  source.validate();
  if (length < 1) throw std::invalid_argument("length K must be >= 1");
  checked_power(source.alphabet, length);
  ChainConditionals chain;
  chain.alphabet = source.alphabet;
  chain.length = length;
  const auto a = static_cast<std::size_t>(source.alphabet);
  for (int k = 0; k < length; ++k) {
    const std::size_t prefixes = checked_power(source.alphabet, k);
    std::vector<double> level;
    level.reserve(prefixes * a);
    for (std::size_t p = 0; p < prefixes; ++p) {
      auto r = k == 0 ? std::span<const double>(source.initial)
                      : source.row(static_cast<int>(p % a));
      level.insert(level.end(), r.begin(), r.end());
    }
    chain.levels.push_back(std::move(level));
  }
  return DistributionTable::from_chain(std::move(chain));
}

}  // namespace tad
