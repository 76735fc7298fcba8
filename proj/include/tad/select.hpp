#pragma once

// Greedy choices shared by the teacher rollout and the decoders.

#include "tad/corruption.hpp"
#include "tad/model.hpp"

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>

namespace tad {

struct TokenChoice {
  TokenId token = tok::kPad;
  double confidence = 0.0;
};

/// Highest-probability token other than MASK; ties go to the lowest id.
inline TokenChoice best_token(std::span<const double> row) {
  TokenChoice best{-1, -1.0};
  for (std::size_t v = 0; v < row.size(); ++v) {
    if (static_cast<TokenId>(v) == tok::kMask) continue;
    if (row[v] > best.confidence) best = {static_cast<TokenId>(v), row[v]};
  }
  if (best.token < 0 || !(best.confidence > 0.0) || !std::isfinite(best.confidence))
    throw NumericsError("invalid model distribution: no token with positive probability");
  return best;
}

/// Entropy of a full vocabulary row, in nats.
inline double entropy_nats(std::span<const double> row) {
  double h = 0.0;
  for (double p : row)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

struct PositionChoice {
  std::size_t position = 0;
  TokenChoice choice;
};

/// argmax over masked positions of the max-probability; ties go to the lowest position.
/// Only positions in [begin, end) are considered.
inline PositionChoice most_confident_masked(const DenoiserOutput& out, const MaskedState& state,
                                            std::size_t begin = 0,
                                            std::size_t end = std::numeric_limits<std::size_t>::max()) {
  end = std::min(end, state.response.size());
  bool found = false;
  PositionChoice best;
  for (std::size_t i = begin; i < end; ++i) {
    if (!state.is_masked(i)) continue;
    const TokenChoice c = best_token(out.response_probs(i));
    if (!found || c.confidence > best.choice.confidence) {
      best = {i, c};
      found = true;
    }
  }
  if (!found) throw std::logic_error("no masked position to choose from");
  return best;
}

}  // namespace tad
