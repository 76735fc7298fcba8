#pragma once

// Inference-time decoding with forward-pass accounting.
//
// Parallel decoding consumes fixed-length blocks left to right. The active
// window is the current block (lowest block that still has masks) plus at
// most one look-ahead block, which joins once the committed fraction of the
// current block reaches `decoded_token_threshold`. Per forward:
//   - current block: commit every masked slot with entropy < entropy_threshold;
//   - look-ahead block: additionally require confidence >= 1 - block_add_threshold;
//   - if nothing qualified, commit the single most confident slot of the current block.

#include "tad/corruption.hpp"
#include "tad/model.hpp"
#include "tad/select.hpp"
#include "tad/tasks.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tad {

enum class DecodeMode { kTokenByToken, kParallel };

inline DecodeMode parse_decode_mode(std::string_view s) {
  if (s == "tbt") return DecodeMode::kTokenByToken;
  if (s == "parallel") return DecodeMode::kParallel;
  throw std::invalid_argument("unknown decode mode '" + std::string(s) + "' (tbt | parallel)");
}

inline std::string_view decode_mode_name(DecodeMode m) {
  return m == DecodeMode::kTokenByToken ? "tbt" : "parallel";
}

struct DecodeConfig {
  std::size_t gen_len = 8;
  std::size_t block_len = 8;
  double entropy_threshold = 0.5;  // nats
  double block_add_threshold = 0.1;
  double decoded_token_threshold = 0.95;
  DecodeMode mode = DecodeMode::kParallel;

  void validate() const {
    if (gen_len < 1) throw std::invalid_argument("gen_len must be >= 1");
    if (block_len < 1 || block_len > gen_len)
      throw std::invalid_argument("block_len must lie in [1, gen_len]");
    if (!(entropy_threshold >= 0.0)) throw std::invalid_argument("entropy_threshold must be >= 0");
    if (!(block_add_threshold >= 0.0 && block_add_threshold <= 1.0))
      throw std::invalid_argument("block_add_threshold must lie in [0, 1]");
    if (!(decoded_token_threshold >= 0.0 && decoded_token_threshold <= 1.0))
      throw std::invalid_argument("decoded_token_threshold must lie in [0, 1]");
  }
};

struct DecodeStep {
  std::vector<std::size_t> committed;
  std::vector<double> entropies;  // of the committed slots, same order
};

struct DecodeResult {
  std::vector<TokenId> output;
  std::size_t forwards = 0;
  std::size_t generated = 0;
  std::vector<DecodeStep> steps;

  double tpf() const {
    return forwards == 0 ? 0.0 : static_cast<double>(generated) / static_cast<double>(forwards);
  }
};

/// One commit per forward at the most confident masked slot (no privilege).
inline DecodeResult decode_tbt(const DenoiserParams& params, std::span<const TokenId> prompt,
                               std::size_t gen_len) {
  if (gen_len < 1) throw std::invalid_argument("gen_len must be >= 1");
  MaskedState x = fully_masked({prompt.begin(), prompt.end()}, gen_len);
  DecodeResult r;
  for (std::size_t s = 0; s < gen_len; ++s) {
    const DenoiserOutput out = denoise_forward(params, x);
    ++r.forwards;
    const PositionChoice pick = most_confident_masked(out, x);
    x.response[pick.position] = pick.choice.token;
    ++r.generated;
    r.steps.push_back({{pick.position}, {entropy_nats(out.response_probs(pick.position))}});
  }
  r.output = std::move(x.response);
  return r;
}

inline DecodeResult decode_parallel(const DenoiserParams& params, std::span<const TokenId> prompt,
                                    const DecodeConfig& cfg) {
  cfg.validate();
  const std::size_t L = cfg.gen_len;
  const std::size_t B = cfg.block_len;
  const std::size_t n_blocks = (L + B - 1) / B;
  auto block_begin = [&](std::size_t b) { return b * B; };
  auto block_end = [&](std::size_t b) { return std::min(L, (b + 1) * B); };

  MaskedState x = fully_masked({prompt.begin(), prompt.end()}, L);
  DecodeResult r;
  auto committed_in = [&](std::size_t b) {
    std::size_t n = 0;
    for (std::size_t i = block_begin(b); i < block_end(b); ++i) n += x.is_masked(i) ? 0 : 1;
    return n;
  };

  std::size_t current = 0;
  bool lookahead = false;
  while (r.generated < L) {
    while (current < n_blocks && committed_in(current) == block_end(current) - block_begin(current)) {
      ++current;
      lookahead = false;
    }
    if (current >= n_blocks)
      throw std::logic_error("decoder made no progress: all blocks complete but gen_len unmet");
    const std::size_t cur_size = block_end(current) - block_begin(current);
    if (!lookahead && current + 1 < n_blocks &&
        static_cast<double>(committed_in(current)) >=
            cfg.decoded_token_threshold * static_cast<double>(cur_size))
      lookahead = true;

    const DenoiserOutput out = denoise_forward(params, x);
    ++r.forwards;
    DecodeStep step;
    std::vector<std::pair<std::size_t, TokenId>> commits;
    const std::size_t window_end = lookahead ? block_end(current + 1) : block_end(current);
    for (std::size_t i = block_begin(current); i < window_end; ++i) {
      if (!x.is_masked(i)) continue;
      const auto row = out.response_probs(i);
      const double h = entropy_nats(row);
      const TokenChoice c = best_token(row);
      bool ok = h < cfg.entropy_threshold;
      if (i >= block_end(current)) ok = ok && c.confidence >= 1.0 - cfg.block_add_threshold;
      if (ok) {
        commits.emplace_back(i, c.token);
        step.committed.push_back(i);
        step.entropies.push_back(h);
      }
    }
    if (commits.empty()) {
      const PositionChoice pick =
          most_confident_masked(out, x, block_begin(current), block_end(current));
      commits.emplace_back(pick.position, pick.choice.token);
      step.committed.push_back(pick.position);
      step.entropies.push_back(entropy_nats(out.response_probs(pick.position)));
    }
    for (auto [i, t] : commits) x.response[i] = t;
    r.generated += commits.size();
    r.steps.push_back(std::move(step));
  }
  r.output = std::move(x.response);
  return r;
}

inline DecodeResult decode(const DenoiserParams& params, std::span<const TokenId> prompt,
                           const DecodeConfig& cfg) {
  return cfg.mode == DecodeMode::kTokenByToken ? decode_tbt(params, prompt, cfg.gen_len)
                                               : decode_parallel(params, prompt, cfg);
}

// ---------------------------------------------------------------------------
// Evaluation over a prompt set.

struct DecodeRecord {
  std::vector<TokenId> prompt;
  DecodeResult result;
  bool oracle_pass = false;
};

struct EvalSummary {
  std::size_t count = 0;
  double accuracy = 0.0;  // percent
  double mean_tpf = 0.0;
  std::size_t total_generated = 0;
  std::size_t total_forwards = 0;
  std::vector<DecodeRecord> records;
};

inline EvalSummary evaluate(const DenoiserParams& params, std::span<const PromptAnswerPair> eval_set,
                            const DecodeConfig& cfg,
                            const OracleLookup& oracles = default_oracles()) {
  if (eval_set.empty()) throw std::invalid_argument("evaluation set is empty");
  EvalSummary s;
  std::size_t pass = 0;
  double tpf_sum = 0.0;
  for (const auto& item : eval_set) {
    DecodeRecord rec{item.prompt, decode(params, item.prompt, cfg), false};
    rec.oracle_pass = oracles(item.task).check(item.prompt, rec.result.output);
    pass += rec.oracle_pass ? 1 : 0;
    tpf_sum += rec.result.tpf();
    s.total_generated += rec.result.generated;
    s.total_forwards += rec.result.forwards;
    s.records.push_back(std::move(rec));
  }
  s.count = eval_set.size();
  s.accuracy = 100.0 * static_cast<double>(pass) / static_cast<double>(s.count);
  s.mean_tpf = tpf_sum / static_cast<double>(s.count);
  return s;
}

inline nlohmann::json to_json(const DecodeRecord& rec) {
  nlohmann::json per_step = nlohmann::json::array();
  for (const auto& st : rec.result.steps)
    per_step.push_back({{"committed_positions", st.committed}, {"entropies", st.entropies}});
  return {{"prompt_ids", rec.prompt},
          {"output_ids", rec.result.output},
          {"forwards", rec.result.forwards},
          {"generated", rec.result.generated},
          {"tpf", rec.result.tpf()},
          {"oracle_pass", rec.oracle_pass},
          {"per_step", per_step}};
}

inline void save_decode_log(std::span<const DecodeRecord> records, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const auto& r : records) f << to_json(r).dump() << '\n';
}

}  // namespace tad
