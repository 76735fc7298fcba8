#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tad {

using TokenId = std::int32_t;

// Shared alphabet: specials, task markers, digits, operators, lowercase letters.
namespace tok {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kMask = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kCopy = 4;
inline constexpr TokenId kReverse = 5;
inline constexpr TokenId kArith = 6;
inline constexpr TokenId kDigit0 = 7;
inline constexpr TokenId kPlus = 17;
inline constexpr TokenId kMinus = 18;
inline constexpr TokenId kEquals = 19;
inline constexpr TokenId kLetterA = 20;
inline constexpr int kStandardSize = 46;

inline constexpr TokenId digit(int d) { return kDigit0 + d; }
inline constexpr TokenId letter(int i) { return kLetterA + i; }
inline constexpr bool is_digit(TokenId t) { return t >= kDigit0 && t < kDigit0 + 10; }
inline constexpr bool is_letter(TokenId t) { return t >= kLetterA && t < kLetterA + 26; }
}  // namespace tok

struct Vocabulary {
  int size = tok::kStandardSize;
  TokenId mask_id = tok::kMask;
  TokenId pad_id = tok::kPad;

  static Vocabulary standard() { return {}; }

  void validate() const {
    if (mask_id == pad_id) throw std::invalid_argument("mask_id and pad_id must differ");
    if (mask_id < 0 || mask_id >= size || pad_id < 0 || pad_id >= size)
      throw std::invalid_argument("special token ids must lie inside the vocabulary");
  }

  bool contains(TokenId t) const { return t >= 0 && t < size; }
};

inline std::string token_text(TokenId t) {
  if (tok::is_digit(t)) return std::string(1, static_cast<char>('0' + (t - tok::kDigit0)));
  if (tok::is_letter(t)) return std::string(1, static_cast<char>('a' + (t - tok::kLetterA)));
  switch (t) {
    case tok::kPad: return "_";
    case tok::kMask: return "?";
    case tok::kEos: return "$";
    case tok::kSep: return "|";
    case tok::kCopy: return "<copy>";
    case tok::kReverse: return "<rev>";
    case tok::kArith: return "<arith>";
    case tok::kPlus: return "+";
    case tok::kMinus: return "-";
    case tok::kEquals: return "=";
    default: return "<" + std::to_string(t) + ">";
  }
}

/// Renders only content tokens (digits, operators, letters); specials are dropped.
inline std::string content_text(std::span<const TokenId> ids) {
  std::string out;
  for (TokenId t : ids) {
    if (tok::is_digit(t) || tok::is_letter(t) || t == tok::kPlus || t == tok::kMinus ||
        t == tok::kEquals)
      out += token_text(t);
  }
  return out;
}

inline std::string debug_text(std::span<const TokenId> ids) {
  std::string out;
  for (TokenId t : ids) out += token_text(t);
  return out;
}

inline std::vector<TokenId> tokens_from_text(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (char c : text) {
    if (c >= '0' && c <= '9') ids.push_back(tok::digit(c - '0'));
    else if (c >= 'a' && c <= 'z') ids.push_back(tok::letter(c - 'a'));
    else if (c == '+') ids.push_back(tok::kPlus);
    else if (c == '-') ids.push_back(tok::kMinus);
    else if (c == '=') ids.push_back(tok::kEquals);
    else throw std::invalid_argument(std::string("no token for character '") + c + "'");
  }
  return ids;
}

}  // namespace tad
