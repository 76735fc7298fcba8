#pragma once

// Forward masking process: each response slot independently becomes MASK
// with probability t. The prompt (and any privileged segment) is never masked.

#include "tad/rng.hpp"
#include "tad/vocab.hpp"

#include <algorithm>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tad {

struct MaskedState {
  std::vector<TokenId> prompt;
  /// Privileged answer segment, present only on teacher inputs.
  std::optional<std::vector<TokenId>> privileged;
  std::vector<TokenId> response;

  std::size_t length() const { return response.size(); }

  std::vector<std::size_t> masked_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < response.size(); ++i)
      if (response[i] == tok::kMask) out.push_back(i);
    return out;
  }

  std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count(response.begin(), response.end(), tok::kMask));
  }

  bool is_masked(std::size_t i) const { return response.at(i) == tok::kMask; }

  void validate() const {
    if (std::find(prompt.begin(), prompt.end(), tok::kMask) != prompt.end())
      throw std::invalid_argument("prompt region contains MASK");
    if (privileged &&
        std::find(privileged->begin(), privileged->end(), tok::kMask) != privileged->end())
      throw std::invalid_argument("privileged segment contains MASK");
  }

  friend bool operator==(const MaskedState&, const MaskedState&) = default;
};

/// Fully masked response of length `gen_len` after `prompt`.
inline MaskedState fully_masked(std::vector<TokenId> prompt, std::size_t gen_len) {
  return MaskedState{std::move(prompt), std::nullopt, std::vector<TokenId>(gen_len, tok::kMask)};
}

/// Bernoulli(t) masking per response position. Swapping to a fixed
/// floor(t*L)-count mask only changes the loop body.
inline MaskedState corrupt(std::vector<TokenId> prompt, std::span<const TokenId> clean_response,
                           double t, Rng& rng) {
  if (!(t >= 0.0 && t <= 1.0))
    throw std::invalid_argument("corruption level t must lie in [0, 1], got " + std::to_string(t));
  if (std::find(clean_response.begin(), clean_response.end(), tok::kMask) != clean_response.end())
    throw std::invalid_argument("clean sequence contains MASK");
  MaskedState s{std::move(prompt), std::nullopt, {clean_response.begin(), clean_response.end()}};
  s.validate();
  for (TokenId& v : s.response)
    if (rng.uniform() < t) v = tok::kMask;
  return s;
}

inline MaskedState corrupt(std::span<const TokenId> clean_response, double t, Rng& rng) {
  return corrupt({}, clean_response, t, rng);
}

}  // namespace tad
