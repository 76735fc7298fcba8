#pragma once

// Explicit probability tables over all sequences of length K from a small
// alphabet, optionally carrying the chain-rule conditionals they were built from.

#include "tad/rng.hpp"

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tad {

inline constexpr std::size_t kMaxTableEntries = 1'000'000;

inline std::size_t checked_power(int base, int exponent) {
  if (base < 1 || exponent < 0) throw std::invalid_argument("alphabet and length must be positive");
  std::size_t n = 1;
  for (int i = 0; i < exponent; ++i) {
    n *= static_cast<std::size_t>(base);
    if (n > kMaxTableEntries)
      throw std::length_error("table of " + std::to_string(base) + "^" + std::to_string(exponent) +
                              " entries exceeds the enumeration limit of 10^6");
  }
  return n;
}

/// p(x_k | x_<k) for every k and every prefix. Level k holds alphabet^k rows
/// of `alphabet` probabilities, prefixes indexed most-significant-first.
struct ChainConditionals {
  int alphabet = 0;
  int length = 0;
  std::vector<std::vector<double>> levels;

  std::span<const double> row(int k, std::size_t prefix_index) const {
    const auto a = static_cast<std::size_t>(alphabet);
    return {levels.at(static_cast<std::size_t>(k)).data() + prefix_index * a, a};
  }

  void validate(double tol = 1e-9) const {
    if (static_cast<int>(levels.size()) != length)
      throw std::invalid_argument("chain conditionals: wrong number of levels");
    for (int k = 0; k < length; ++k) {
      const std::size_t prefixes = checked_power(alphabet, k);
      if (levels[static_cast<std::size_t>(k)].size() != prefixes * static_cast<std::size_t>(alphabet))
        throw std::invalid_argument("chain conditionals: level size mismatch");
      for (std::size_t p = 0; p < prefixes; ++p) {
        double s = 0.0;
        for (double v : row(k, p)) {
          if (v < 0.0) throw std::invalid_argument("chain conditionals: negative probability");
          s += v;
        }
        if (std::abs(s - 1.0) > tol)
          throw std::invalid_argument("chain conditionals: row does not sum to 1");
      }
    }
  }
};

class DistributionTable {
 public:
  DistributionTable(int alphabet, int length, std::vector<double> probs)
      : alphabet_(alphabet), length_(length), probs_(std::move(probs)) {
    if (probs_.size() != checked_power(alphabet, length))
      throw std::invalid_argument("distribution table size does not equal alphabet^K");
    double s = 0.0;
    for (double p : probs_) {
      if (!(p >= 0.0)) throw std::invalid_argument("distribution table has a negative entry");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9)
      throw std::invalid_argument("distribution table sums to " + std::to_string(s) + ", not 1");
  }

  /// Enumerates the chain-rule product of `chain` over every sequence.
  static DistributionTable from_chain(ChainConditionals chain) {
    chain.validate();
    const std::size_t n = checked_power(chain.alphabet, chain.length);
    std::vector<double> probs(n);
    std::vector<int> seq(static_cast<std::size_t>(chain.length));
    for (std::size_t idx = 0; idx < n; ++idx) {
      decode_into(idx, chain.alphabet, seq);
      double p = 1.0;
      std::size_t prefix = 0;
      for (int k = 0; k < chain.length; ++k) {
        p *= chain.row(k, prefix)[static_cast<std::size_t>(seq[static_cast<std::size_t>(k)])];
        prefix = prefix * static_cast<std::size_t>(chain.alphabet) +
                 static_cast<std::size_t>(seq[static_cast<std::size_t>(k)]);
      }
      probs[idx] = p;
    }
    DistributionTable t(chain.alphabet, chain.length, std::move(probs));
    t.chain_ = std::move(chain);
    return t;
  }

  /// Product of independent per-position distributions.
  static DistributionTable product(const std::vector<std::vector<double>>& marginals) {
    if (marginals.empty()) throw std::invalid_argument("product of zero marginals");
    ChainConditionals chain;
    chain.alphabet = static_cast<int>(marginals[0].size());
    chain.length = static_cast<int>(marginals.size());
    for (int k = 0; k < chain.length; ++k) {
      const std::size_t prefixes = checked_power(chain.alphabet, k);
      std::vector<double> level;
      level.reserve(prefixes * marginals[0].size());
      for (std::size_t p = 0; p < prefixes; ++p)
        level.insert(level.end(), marginals[static_cast<std::size_t>(k)].begin(),
                     marginals[static_cast<std::size_t>(k)].end());
      chain.levels.push_back(std::move(level));
    }
    return from_chain(std::move(chain));
  }

  int alphabet() const { return alphabet_; }
  int length() const { return length_; }
  std::size_t size() const { return probs_.size(); }
  std::span<const double> probabilities() const { return probs_; }
  double operator[](std::size_t idx) const { return probs_[idx]; }

  double prob(std::span<const int> seq) const { return probs_.at(encode(seq)); }

  std::size_t encode(std::span<const int> seq) const {
    if (static_cast<int>(seq.size()) != length_) throw std::invalid_argument("sequence length != K");
    std::size_t idx = 0;
    for (int s : seq) {
      if (s < 0 || s >= alphabet_) throw std::out_of_range("symbol outside alphabet");
      idx = idx * static_cast<std::size_t>(alphabet_) + static_cast<std::size_t>(s);
    }
    return idx;
  }

  std::vector<int> decode(std::size_t idx) const {
    std::vector<int> seq(static_cast<std::size_t>(length_));
    decode_into(idx, alphabet_, seq);
    return seq;
  }

  /// Single-position marginals by summing the table.
  std::vector<std::vector<double>> marginals() const {
    std::vector<std::vector<double>> m(static_cast<std::size_t>(length_),
                                       std::vector<double>(static_cast<std::size_t>(alphabet_)));
    std::vector<int> seq(static_cast<std::size_t>(length_));
    for (std::size_t idx = 0; idx < probs_.size(); ++idx) {
      decode_into(idx, alphabet_, seq);
      for (int k = 0; k < length_; ++k)
        m[static_cast<std::size_t>(k)][static_cast<std::size_t>(seq[static_cast<std::size_t>(k)])] +=
            probs_[idx];
    }
    return m;
  }

  /// P(x_<k = prefix), summing out the suffix.
  double prefix_probability(std::span<const int> prefix) const {
    const std::size_t k = prefix.size();
    const std::size_t block = checked_power(alphabet_, length_ - static_cast<int>(k));
    std::size_t base = 0;
    for (int s : prefix) base = base * static_cast<std::size_t>(alphabet_) + static_cast<std::size_t>(s);
    base *= block;
    double s = 0.0;
    for (std::size_t i = 0; i < block; ++i) s += probs_[base + i];
    return s;
  }

  /// p(x_k | x_<k = prefix). Uses the stored chain when available, otherwise
  /// marginalizes the table (uniform for zero-mass prefixes).
  std::vector<double> conditional(std::span<const int> prefix) const {
    const int k = static_cast<int>(prefix.size());
    if (k >= length_) throw std::out_of_range("prefix must be shorter than K");
    if (chain_) {
      std::size_t p = 0;
      for (int s : prefix) p = p * static_cast<std::size_t>(alphabet_) + static_cast<std::size_t>(s);
      auto r = chain_->row(k, p);
      return {r.begin(), r.end()};
    }
    std::vector<double> out(static_cast<std::size_t>(alphabet_));
    std::vector<int> ext(prefix.begin(), prefix.end());
    ext.push_back(0);
    double total = 0.0;
    for (int v = 0; v < alphabet_; ++v) {
      ext.back() = v;
      out[static_cast<std::size_t>(v)] = prefix_probability(ext);
      total += out[static_cast<std::size_t>(v)];
    }
    for (double& v : out) v = total > 0.0 ? v / total : 1.0 / alphabet_;
    return out;
  }

  bool has_chain() const { return chain_.has_value(); }

  /// Shannon entropy in nats.
  double entropy() const {
    double h = 0.0;
    for (double p : probs_)
      if (p > 0.0) h -= p * std::log(p);
    return h;
  }

 private:
  static void decode_into(std::size_t idx, int alphabet, std::vector<int>& seq) {
    for (std::size_t k = seq.size(); k-- > 0;) {
      seq[k] = static_cast<int>(idx % static_cast<std::size_t>(alphabet));
      idx /= static_cast<std::size_t>(alphabet);
    }
  }

  int alphabet_;
  int length_;
  std::vector<double> probs_;
  std::optional<ChainConditionals> chain_;
};

/// Strictly positive random distribution (normalized uniform(0.05, 1) weights).
inline std::vector<double> random_distribution(int alphabet, Rng& rng) {
  std::vector<double> p(static_cast<std::size_t>(alphabet));
  double s = 0.0;
  for (double& v : p) {
    v = rng.uniform(0.05, 1.0);
    s += v;
  }
  for (double& v : p) v /= s;
  return p;
}

/// Random full-history chain: every prefix gets its own conditional.
inline ChainConditionals random_chain(int alphabet, int length, Rng& rng) {
  ChainConditionals c;
  c.alphabet = alphabet;
  c.length = length;
  for (int k = 0; k < length; ++k) {
    const std::size_t prefixes = checked_power(alphabet, k);
    std::vector<double> level;
    for (std::size_t p = 0; p < prefixes; ++p) {
      auto row = random_distribution(alphabet, rng);
      level.insert(level.end(), row.begin(), row.end());
    }
    c.levels.push_back(std::move(level));
  }
  return c;
}

}  // namespace tad
