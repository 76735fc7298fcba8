#pragma once

// Tiny bidirectional transformer denoiser: predicts a categorical
// distribution over clean tokens at every position of a masked state.

#include "tad/corruption.hpp"
#include "tad/numerics.hpp"
#include "tad/optim.hpp"
#include "tad/rng.hpp"
#include "tad/tasks.hpp"
#include "tad/vocab.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tad {

using num::NodeId;
using num::Tape;
using num::Tensor;

struct DenoiserConfig {
  int vocab_size = tok::kStandardSize;
  int layers = 4;
  int width = 128;
  int heads = 4;
  int ff_mult = 4;
  int max_len = 96;

  void validate() const {
    if (vocab_size < 4 || layers < 1 || width < 1 || heads < 1 || ff_mult < 1 || max_len < 1)
      throw std::invalid_argument("denoiser hyperparameters must be positive");
    if (width % heads != 0) throw std::invalid_argument("width must be divisible by heads");
  }

  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

struct DenoiserParams {
  DenoiserConfig config;
  Tensor token_embedding;     // vocab x width
  Tensor position_embedding;  // max_len x width
  std::vector<LayerParams> layers;
  Tensor final_gain, final_bias;
  Tensor w_out;  // width x vocab
  Tensor b_out;  // 1 x vocab

  /// Visits every tensor in declaration order: f(name, tensor).
  template <class Self, class F>
  static void visit(Self& p, F&& f) {
    f("token_embedding", p.token_embedding);
    f("position_embedding", p.position_embedding);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      auto& L = p.layers[l];
      f("ln1_gain", L.ln1_gain);
      f("ln1_bias", L.ln1_bias);
      f("wq", L.wq);
      f("bq", L.bq);
      f("wk", L.wk);
      f("bk", L.bk);
      f("wv", L.wv);
      f("bv", L.bv);
      f("wo", L.wo);
      f("bo", L.bo);
      f("ln2_gain", L.ln2_gain);
      f("ln2_bias", L.ln2_bias);
      f("w1", L.w1);
      f("b1", L.b1);
      f("w2", L.w2);
      f("b2", L.b2);
    }
    f("final_gain", p.final_gain);
    f("final_bias", p.final_bias);
    f("w_out", p.w_out);
    f("b_out", p.b_out);
  }

  static DenoiserParams shaped(const DenoiserConfig& c) {
    c.validate();
    const auto V = static_cast<std::size_t>(c.vocab_size);
    const auto d = static_cast<std::size_t>(c.width);
    const auto h = d * static_cast<std::size_t>(c.ff_mult);
    DenoiserParams p;
    p.config = c;
    p.token_embedding = Tensor(V, d);
    p.position_embedding = Tensor(static_cast<std::size_t>(c.max_len), d);
    for (int l = 0; l < c.layers; ++l) {
      LayerParams L{Tensor(1, d, 1.0), Tensor(1, d), Tensor(d, d), Tensor(1, d), Tensor(d, d),
                    Tensor(1, d),      Tensor(d, d), Tensor(1, d), Tensor(d, d), Tensor(1, d),
                    Tensor(1, d, 1.0), Tensor(1, d), Tensor(d, h), Tensor(1, h), Tensor(h, d),
                    Tensor(1, d)};
      p.layers.push_back(std::move(L));
    }
    p.final_gain = Tensor(1, d, 1.0);
    p.final_bias = Tensor(1, d);
    p.w_out = Tensor(d, V);
    p.b_out = Tensor(1, V);
    return p;
  }

  static DenoiserParams zeros_like(const DenoiserParams& like) {
    DenoiserParams z = like;
    visit(z, [](auto, Tensor& t) { std::fill(t.data().begin(), t.data().end(), 0.0); });
    return z;
  }

  /// Random init; the output head starts at zero so untrained rows are uniform.
  static DenoiserParams initialize(const DenoiserConfig& c, Rng& rng) {
    DenoiserParams p = shaped(c);
    auto fill = [&](Tensor& t, double stddev) {
      for (double& v : t.data()) v = stddev * rng.normal();
    };
    fill(p.token_embedding, 0.5);
    fill(p.position_embedding, 0.5);
    for (auto& L : p.layers) {
      for (Tensor* w : {&L.wq, &L.wk, &L.wv, &L.wo, &L.w1})
        fill(*w, 1.0 / std::sqrt(static_cast<double>(w->rows())));
      fill(L.w2, 0.5 / std::sqrt(static_cast<double>(L.w2.rows())));
    }
    return p;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit(*this, [&](auto, const Tensor& t) { n += t.size(); });
    return n;
  }

  friend bool operator==(const DenoiserParams& a, const DenoiserParams& b) {
    if (!(a.config == b.config)) return false;
    std::vector<const Tensor*> ta, tb;
    visit(a, [&](auto, const Tensor& t) { ta.push_back(&t); });
    visit(b, [&](auto, const Tensor& t) { tb.push_back(&t); });
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i)
      if (!(*ta[i] == *tb[i])) return false;
    return true;
  }
};

/// Token sequence fed to the network. The response keeps the same position
/// ids whether or not a privileged segment is present: prompt at 0..|q|-1,
/// response at |q|..|q|+L-1, separator and privileged tokens after that.
/// Sequence order is q, [SEP, a], response.
struct ModelInput {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> positions;
  std::size_t response_begin = 0;
  std::size_t response_len = 0;
};

inline ModelInput layout(const MaskedState& s) {
  s.validate();
  ModelInput in;
  const std::size_t q = s.prompt.size();
  const std::size_t L = s.response.size();
  for (std::size_t i = 0; i < q; ++i) {
    in.tokens.push_back(s.prompt[i]);
    in.positions.push_back(i);
  }
  if (s.privileged) {
    in.tokens.push_back(tok::kSep);
    in.positions.push_back(q + L);
    for (std::size_t j = 0; j < s.privileged->size(); ++j) {
      in.tokens.push_back((*s.privileged)[j]);
      in.positions.push_back(q + L + 1 + j);
    }
  }
  in.response_begin = in.tokens.size();
  in.response_len = L;
  for (std::size_t i = 0; i < L; ++i) {
    in.tokens.push_back(s.response[i]);
    in.positions.push_back(q + i);
  }
  return in;
}

/// Per-position distributions (and the logits they came from).
struct DenoiserOutput {
  Tensor logits;
  Tensor probs;
  std::size_t response_begin = 0;
  std::size_t response_len = 0;

  std::size_t rows() const { return probs.rows(); }
  std::size_t vocab() const { return probs.cols(); }
  std::span<const double> response_probs(std::size_t i) const {
    return probs.row_span(response_begin + i);
  }
  std::span<const double> response_logits(std::size_t i) const {
    return logits.row_span(response_begin + i);
  }

  /// Builds an output directly from response-row probabilities (logits = log p).
  static DenoiserOutput from_probabilities(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw std::invalid_argument("no rows");
    DenoiserOutput o;
    const std::size_t V = rows[0].size();
    o.logits = Tensor(rows.size(), V);
    o.probs = Tensor(rows.size(), V);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != V) throw std::invalid_argument("ragged probability rows");
      for (std::size_t c = 0; c < V; ++c) {
        o.probs(r, c) = rows[r][c];
        o.logits(r, c) = std::log(std::max(rows[r][c], 1e-300));
      }
    }
    o.response_len = rows.size();
    return o;
  }

  static DenoiserOutput from_logits(Tensor logits, std::size_t response_begin,
                                    std::size_t response_len) {
    DenoiserOutput o;
    o.probs = logits;
    for (std::size_t r = 0; r < o.probs.rows(); ++r) num::softmax_inplace(o.probs.row_span(r));
    o.logits = std::move(logits);
    o.response_begin = response_begin;
    o.response_len = response_len;
    if (!o.probs.all_finite()) throw NumericsError("denoiser produced non-finite probabilities");
    for (std::size_t r = 0; r < o.probs.rows(); ++r) {
      double s = 0.0;
      for (double v : o.probs.row_span(r)) s += v;
      if (std::abs(s - 1.0) > 1e-9) throw NumericsError("denoiser row does not sum to 1");
    }
    return o;
  }
};

struct ForwardGraph {
  NodeId logits;
  std::vector<NodeId> params;  // visit order
  ModelInput input;
};

inline void check_input(const DenoiserConfig& c, const ModelInput& in) {
  if (in.tokens.size() > static_cast<std::size_t>(c.max_len))
    throw std::length_error("input length " + std::to_string(in.tokens.size()) +
                            " exceeds max length " + std::to_string(c.max_len));
  for (TokenId t : in.tokens)
    if (t < 0 || t >= c.vocab_size)
      throw std::out_of_range("token id " + std::to_string(t) + " outside vocabulary");
}

/// Records the forward pass on `tape`. Parameters are borrowed, so `params`
/// must outlive the tape.
inline ForwardGraph build_forward(Tape& tape, const DenoiserParams& params, ModelInput in,
                                  bool track_grads = true) {
  const DenoiserConfig& c = params.config;
  check_input(c, in);
  ForwardGraph g;
  DenoiserParams::visit(params, [&](auto, const Tensor& t) {
    g.params.push_back(tape.leaf_ref(t, track_grads));
  });
  std::size_t k = 0;
  auto next = [&]() { return g.params[k++]; };

  const NodeId tok_emb = next();
  const NodeId pos_emb = next();
  std::vector<std::size_t> token_rows(in.tokens.begin(), in.tokens.end());
  NodeId x = tape.add(tape.gather_rows(tok_emb, std::move(token_rows)),
                      tape.gather_rows(pos_emb, in.positions));

  const auto d = static_cast<std::size_t>(c.width);
  const auto heads = static_cast<std::size_t>(c.heads);
  const std::size_t dh = d / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto norm = [&](NodeId v, NodeId gain, NodeId bias) {
    return tape.add_row(tape.mul_row(tape.layer_norm_rows(v), gain), bias);
  };
  auto linear = [&](NodeId v, NodeId w, NodeId b) { return tape.add_row(tape.matmul(v, w), b); };

  for (int l = 0; l < c.layers; ++l) {
    const NodeId ln1g = next(), ln1b = next();
    const NodeId wq = next(), bq = next(), wk = next(), bk = next(), wv = next(), bv = next();
    const NodeId wo = next(), bo = next();
    const NodeId ln2g = next(), ln2b = next();
    const NodeId w1 = next(), b1 = next(), w2 = next(), b2 = next();

    const NodeId h = norm(x, ln1g, ln1b);
    const NodeId q = linear(h, wq, bq);
    const NodeId kk = linear(h, wk, bk);
    const NodeId v = linear(h, wv, bv);
    std::vector<NodeId> head_out;
    head_out.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const NodeId qh = tape.slice_cols(q, hd * dh, dh);
      const NodeId kh = tape.slice_cols(kk, hd * dh, dh);
      const NodeId vh = tape.slice_cols(v, hd * dh, dh);
      const NodeId att = tape.softmax_rows(tape.scale(tape.matmul_transposed(qh, kh), att_scale));
      head_out.push_back(tape.matmul(att, vh));
    }
    x = tape.add(x, linear(tape.concat_cols(head_out), wo, bo));
    const NodeId h2 = norm(x, ln2g, ln2b);
    x = tape.add(x, linear(tape.gelu(linear(h2, w1, b1)), w2, b2));
  }
  const NodeId fg = next(), fb = next(), wout = next(), bout = next();
  g.logits = linear(norm(x, fg, fb), wout, bout);
  g.input = std::move(in);
  return g;
}

inline DenoiserOutput denoise_forward(const DenoiserParams& params, const MaskedState& state) {
  Tape tape;
  ForwardGraph g = build_forward(tape, params, layout(state), false);
  return DenoiserOutput::from_logits(tape.value(g.logits), g.input.response_begin,
                                     g.input.response_len);
}

/// Adds `scale * dLoss/dParam` (from the last backward on `tape`) into `acc`.
inline void accumulate_grads(DenoiserParams& acc, const Tape& tape, const ForwardGraph& g,
                             double scale = 1.0) {
  std::size_t k = 0;
  DenoiserParams::visit(acc, [&](auto, Tensor& t) {
    const Tensor gr = tape.grad(g.params[k++]);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += scale * gr[i];
  });
}

// ---------------------------------------------------------------------------
// MDLM objective: (1/t) * sum over masked response positions of -log p(x0_i | x_t).

inline constexpr double kMinCorruption = 0.01;

inline double sample_corruption_level(Rng& rng) {
  return std::clamp(rng.uniform(), kMinCorruption, 1.0);
}

/// Records the loss for a fixed corrupted state. Returns a constant zero node
/// when nothing is masked.
inline NodeId mdlm_loss_node(Tape& tape, const ForwardGraph& g, const MaskedState& x_t,
                             std::span<const TokenId> clean, double t) {
  if (!(t > 0.0)) throw std::invalid_argument("corruption level t must be > 0 for the MDLM loss");
  const auto masked = x_t.masked_positions();
  if (masked.empty()) return tape.constant(Tensor::scalar(0.0));
  std::vector<std::size_t> rows;
  std::vector<std::size_t> picks;
  const std::size_t V = tape.value(g.logits).cols();
  for (std::size_t k = 0; k < masked.size(); ++k) {
    rows.push_back(g.input.response_begin + masked[k]);
    picks.push_back(k * V + static_cast<std::size_t>(clean[masked[k]]));
  }
  const NodeId logp = tape.log_softmax_rows(tape.gather_rows(g.logits, std::move(rows)));
  return tape.scale(tape.sum(tape.gather(logp, std::move(picks))), -1.0 / t);
}

inline double mdlm_loss_fixed(const DenoiserParams& params, const MaskedState& x_t,
                              std::span<const TokenId> clean, double t) {
  if (!(t > 0.0)) throw std::invalid_argument("corruption level t must be > 0 for the MDLM loss");
  Tape tape;
  const ForwardGraph g = build_forward(tape, params, layout(x_t), false);
  return tape.value(mdlm_loss_node(tape, g, x_t, clean, t)).item();
}

/// Corrupts `clean` at level t and evaluates the loss on the sample.
inline double mdlm_loss(const DenoiserParams& params, std::span<const TokenId> prompt,
                        std::span<const TokenId> clean, double t, Rng& rng) {
  if (!(t > 0.0)) throw std::invalid_argument("corruption level t must be > 0 for the MDLM loss");
  const MaskedState x_t = corrupt({prompt.begin(), prompt.end()}, clean, t, rng);
  return mdlm_loss_fixed(params, x_t, clean, t);
}

// ---------------------------------------------------------------------------
// Base training.

struct BaseTrainConfig {
  int epochs = 10;
  int batch = 16;
  AdamWConfig optimizer{};
  /// Probability that a training example carries the privileged answer
  /// segment, so the shared backbone learns to read it.
  double hint_prob = 0.5;
};

struct EpochReport {
  int epoch = 0;
  double mean_loss = 0.0;
  std::size_t steps = 0;
};

using EpochCallback = std::function<bool(const EpochReport&, const DenoiserParams&)>;

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One optimizer step of MDLM training over `batch`; returns the batch mean loss.
inline double mdlm_train_step(DenoiserParams& params, AdamW<DenoiserParams>& opt,
                              std::span<const PromptAnswerPair* const> batch, double hint_prob,
                              Rng& rng) {
  DenoiserParams grads = DenoiserParams::zeros_like(params);
  double total = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const PromptAnswerPair* item : batch) {
    const double t = sample_corruption_level(rng);
    MaskedState x_t = corrupt(item->prompt, item->answer, t, rng);
    if (rng.bernoulli(hint_prob)) x_t.privileged = item->answer;
    Tape tape;
    const ForwardGraph g = build_forward(tape, params, layout(x_t), true);
    const NodeId loss = mdlm_loss_node(tape, g, x_t, item->answer, t);
    const double lv = tape.value(loss).item();
    if (!std::isfinite(lv)) throw TrainingDiverged("MDLM loss is not finite");
    total += lv;
    if (tape.requires_grad(loss)) {
      tape.backward(loss);
      accumulate_grads(grads, tape, g, inv_b);
    }
  }
  opt.step(params, grads);
  return total * inv_b;
}

struct BaseTrainResult {
  DenoiserParams params;
  std::vector<EpochReport> history;
};

/// Gradient descent on the MDLM objective. `on_epoch` may stop training early
/// by returning false.
inline BaseTrainResult train_base(const DenoiserConfig& model, const BaseTrainConfig& cfg,
                                  std::span<const PromptAnswerPair> corpus, Rng& rng,
                                  const EpochCallback& on_epoch = {}) {
  if (corpus.empty()) throw std::invalid_argument("training corpus is empty");
  Rng init_rng = rng.fork("init");
  BaseTrainResult r{DenoiserParams::initialize(model, init_rng), {}};
  AdamW<DenoiserParams> opt(r.params, cfg.optimizer);
  std::vector<const PromptAnswerPair*> order;
  for (const auto& p : corpus) order.push_back(&p);
  const std::size_t B = static_cast<std::size_t>(std::max(1, cfg.batch));
  for (int e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(std::span<const PromptAnswerPair*>(order));
    EpochReport rep{e + 1, 0.0, 0};
    for (std::size_t i = 0; i < order.size(); i += B) {
      const std::size_t n = std::min(B, order.size() - i);
      double l = 0.0;
      try {
        l = mdlm_train_step(r.params, opt, std::span(order).subspan(i, n), cfg.hint_prob, rng);
      } catch (const NumericsError& err) {
        throw TrainingDiverged("base training diverged at epoch " + std::to_string(e + 1) +
                               ", step " + std::to_string(rep.steps + 1) + ": " + err.what());
      }
      rep.mean_loss += l;
      ++rep.steps;
    }
    rep.mean_loss /= static_cast<double>(rep.steps);
    if (!std::isfinite(rep.mean_loss))
      throw TrainingDiverged("base training loss is NaN at epoch " + std::to_string(e + 1));
    r.history.push_back(rep);
    if (on_epoch && !on_epoch(rep, r.params)) break;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, six int32 hyperparameters, uint64 value count,
// then raw little-endian float64 values in visit order.

inline constexpr std::array<char, 8> kCheckpointMagic = {'T', 'A', 'D', 'C', 'K', 'P', 'T', '1'};

inline void save_checkpoint(const DenoiserParams& p, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint '" + path + "' for writing");
  f.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  const std::array<std::int32_t, 6> hdr = {p.config.vocab_size, p.config.layers, p.config.width,
                                           p.config.heads,      p.config.ff_mult, p.config.max_len};
  f.write(reinterpret_cast<const char*>(hdr.data()), sizeof(hdr));
  const std::uint64_t count = p.parameter_count();
  f.write(reinterpret_cast<const char*>(&count), sizeof(count));
  DenoiserParams::visit(p, [&](auto, const Tensor& t) {
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
  });
  if (!f) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

inline DenoiserParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::array<char, 8> magic{};
  f.read(magic.data(), magic.size());
  if (!f || magic != kCheckpointMagic)
    throw std::runtime_error("'" + path + "' is not a checkpoint (bad magic)");
  std::array<std::int32_t, 6> hdr{};
  f.read(reinterpret_cast<char*>(hdr.data()), sizeof(hdr));
  std::uint64_t count = 0;
  f.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (!f) throw std::runtime_error("checkpoint '" + path + "' has a truncated header");
  DenoiserConfig c{hdr[0], hdr[1], hdr[2], hdr[3], hdr[4], hdr[5]};
  DenoiserParams p = DenoiserParams::shaped(c);
  if (p.parameter_count() != count)
    throw std::runtime_error("checkpoint '" + path + "' value count does not match its header");
  DenoiserParams::visit(p, [&](auto, Tensor& t) {
    f.read(reinterpret_cast<char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
  });
  if (!f) throw std::runtime_error("checkpoint '" + path + "' is truncated");
  return p;
}

}  // namespace tad
