#pragma once

// Temporal-aware self-distillation: each masked slot of a trajectory state is
// supervised either by the token the teacher actually revealed (if that
// happens within the next delta steps) or by the teacher's softened
// single-step distribution (if it happens later).

#include "tad/model.hpp"
#include "tad/optim.hpp"
#include "tad/rng.hpp"
#include "tad/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tad {

inline constexpr double kProbabilityFloor = 1e-12;

enum class DistillMode { kQuality, kSpeed, kCustom };

/// tad: near CE + lambda * distant KL. global_ce: every masked slot is near.
/// near_only: lambda forced to 0. kl_only: every masked slot is distant.
enum class DistillObjective { kTad, kGlobalCe, kNearOnly, kKlOnly };

inline DistillMode parse_distill_mode(std::string_view s) {
  if (s == "quality") return DistillMode::kQuality;
  if (s == "speed") return DistillMode::kSpeed;
  if (s == "custom") return DistillMode::kCustom;
  throw std::invalid_argument("unknown distill mode '" + std::string(s) + "' (quality | speed | custom)");
}

inline std::string_view distill_mode_name(DistillMode m) {
  switch (m) {
    case DistillMode::kQuality: return "quality";
    case DistillMode::kSpeed: return "speed";
    case DistillMode::kCustom: return "custom";
  }
  return "?";
}

inline DistillObjective parse_objective(std::string_view s) {
  if (s == "tad") return DistillObjective::kTad;
  if (s == "global_ce") return DistillObjective::kGlobalCe;
  if (s == "near_only") return DistillObjective::kNearOnly;
  if (s == "kl_only") return DistillObjective::kKlOnly;
  throw std::invalid_argument("unknown objective '" + std::string(s) +
                              "' (tad | global_ce | near_only | kl_only)");
}

inline std::string_view objective_name(DistillObjective o) {
  switch (o) {
    case DistillObjective::kTad: return "tad";
    case DistillObjective::kGlobalCe: return "global_ce";
    case DistillObjective::kNearOnly: return "near_only";
    case DistillObjective::kKlOnly: return "kl_only";
  }
  return "?";
}

struct DistillConfig {
  int delta = 4;
  double lambda = 1.0;
  double tau = 1.0;
  AdamWConfig optimizer{};
  int epochs = 4;
  int batch = 16;
  DistillMode mode = DistillMode::kCustom;
  DistillObjective objective = DistillObjective::kTad;

  void validate() const {
    if (delta < 1) throw std::invalid_argument("delta must be >= 1");
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
    if (!(tau > 0.0)) throw std::invalid_argument("tau must be > 0");
    if (epochs < 0 || batch < 1) throw std::invalid_argument("epochs must be >= 0 and batch >= 1");
  }
};

// ---------------------------------------------------------------------------
// Partition.

struct Partition {
  std::vector<std::size_t> near;
  std::vector<TokenId> near_labels;  // aligned with `near`
  std::vector<std::size_t> distant;

  friend bool operator==(const Partition&, const Partition&) = default;
};

/// Positions still masked at x_s, split by whether they are revealed before
/// step s + delta. delta = 0 puts every masked slot in `distant`.
inline Partition partition_masked(const Trajectory& traj, std::size_t s, std::size_t delta) {
  if (s < 1 || s > traj.T()) throw std::out_of_range("step s must lie in [1, T]");
  const auto reveal = traj.reveal_steps();
  Partition p;
  for (std::size_t pos = 0; pos < reveal.size(); ++pos) {
    const std::size_t r = reveal[pos];
    if (r < s) continue;
    if (r < s + delta) {
      p.near.push_back(pos);
      p.near_labels.push_back(traj.steps[r - 1].token);
    } else {
      p.distant.push_back(pos);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Losses on fixed outputs.

inline double log_softmax_at(std::span<const double> logits, std::size_t v, double scale = 1.0) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : logits) m = std::max(m, x * scale);
  double z = 0.0;
  for (double x : logits) z += std::exp(x * scale - m);
  return logits[v] * scale - m - std::log(z);
}

/// Mean over near slots of -log p_S(label).
inline double near_loss(const DenoiserOutput& student, const Partition& part) {
  if (part.near_labels.size() != part.near.size())
    throw std::invalid_argument("missing label for a near position");
  if (part.near.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t k = 0; k < part.near.size(); ++k)
    s -= log_softmax_at(student.response_logits(part.near[k]),
                        static_cast<std::size_t>(part.near_labels[k]));
  return s / static_cast<double>(part.near.size());
}

/// tau^2 * KL(softmax(teacher/tau) || softmax(student/tau)) for one row.
inline double softened_kl(std::span<const double> teacher_logits,
                          std::span<const double> student_logits, double tau) {
  if (teacher_logits.size() != student_logits.size())
    throw std::invalid_argument("teacher and student rows differ in vocabulary size");
  const double inv = 1.0 / tau;
  double kl = 0.0;
  for (std::size_t v = 0; v < teacher_logits.size(); ++v) {
    const double p = std::exp(log_softmax_at(teacher_logits, v, inv));
    if (p <= 0.0) continue;
    kl += p * (std::log(std::max(p, kProbabilityFloor)) - log_softmax_at(student_logits, v, inv));
  }
  return tau * tau * std::max(kl, 0.0);
}

/// Mean over distant slots of the softened KL.
inline double distant_loss(const DenoiserOutput& teacher, const DenoiserOutput& student,
                           const Partition& part, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be > 0");
  if (part.distant.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t pos : part.distant)
    s += softened_kl(teacher.response_logits(pos), student.response_logits(pos), tau);
  return s / static_cast<double>(part.distant.size());
}

// ---------------------------------------------------------------------------
// Differentiable forms (student side only; the teacher enters as constants).

inline NodeId near_loss_node(Tape& tape, const ForwardGraph& student, const Partition& part) {
  if (part.near_labels.size() != part.near.size())
    throw std::invalid_argument("missing label for a near position");
  if (part.near.empty()) return tape.constant(Tensor::scalar(0.0));
  const std::size_t V = tape.value(student.logits).cols();
  std::vector<std::size_t> rows, picks;
  for (std::size_t k = 0; k < part.near.size(); ++k) {
    rows.push_back(student.input.response_begin + part.near[k]);
    picks.push_back(k * V + static_cast<std::size_t>(part.near_labels[k]));
  }
  const NodeId logp = tape.log_softmax_rows(tape.gather_rows(student.logits, std::move(rows)));
  return tape.scale(tape.sum(tape.gather(logp, std::move(picks))),
                    -1.0 / static_cast<double>(part.near.size()));
}

inline NodeId distant_loss_node(Tape& tape, const ForwardGraph& student,
                                const DenoiserOutput& teacher, const Partition& part, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be > 0");
  if (part.distant.empty()) return tape.constant(Tensor::scalar(0.0));
  const std::size_t V = tape.value(student.logits).cols();
  const std::size_t n = part.distant.size();
  Tensor p(n, V);
  double neg_entropy = 0.0;  // sum p log p, constant w.r.t. the student
  std::vector<std::size_t> rows;
  for (std::size_t k = 0; k < n; ++k) {
    const auto tl = teacher.response_logits(part.distant[k]);
    for (std::size_t v = 0; v < V; ++v) {
      const double pv = std::exp(log_softmax_at(tl, v, 1.0 / tau));
      p(k, v) = pv;
      if (pv > 0.0) neg_entropy += pv * std::log(std::max(pv, kProbabilityFloor));
    }
    rows.push_back(student.input.response_begin + part.distant[k]);
  }
  const NodeId logq =
      tape.log_softmax_rows(tape.scale(tape.gather_rows(student.logits, std::move(rows)), 1.0 / tau));
  const NodeId cross = tape.sum(tape.mul(tape.constant(std::move(p)), logq));  // sum p log q
  const NodeId kl = tape.add(tape.constant(Tensor::scalar(neg_entropy)), tape.scale(cross, -1.0));
  return tape.scale(kl, tau * tau / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Training.

struct LossRecord {
  std::size_t step = 0;
  double near = 0.0;
  double distant = 0.0;
  double total = 0.0;
};

struct DistillResult {
  DenoiserParams student;
  std::vector<LossRecord> losses;
};

class DistillationDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Window and weight actually used for an objective.
inline std::pair<std::size_t, double> effective_window(const DistillConfig& cfg, std::size_t T) {
  switch (cfg.objective) {
    case DistillObjective::kTad: return {static_cast<std::size_t>(cfg.delta), cfg.lambda};
    case DistillObjective::kGlobalCe: return {T, cfg.lambda};
    case DistillObjective::kNearOnly: return {static_cast<std::size_t>(cfg.delta), 0.0};
    case DistillObjective::kKlOnly: return {0, cfg.lambda};
  }
  return {static_cast<std::size_t>(cfg.delta), cfg.lambda};
}

struct ItemLoss {
  double near = 0.0;
  double distant = 0.0;
  double total = 0.0;
};

/// Loss of one (trajectory, s) item; with `grads` the scaled student gradient
/// is accumulated into it.
inline ItemLoss tad_item_loss(const DenoiserParams& student, const DenoiserParams& teacher,
                              const Trajectory& traj, std::size_t s, std::size_t delta,
                              double lambda, double tau, DenoiserParams* grads = nullptr,
                              double grad_scale = 1.0) {
  const Partition part = partition_masked(traj, s, delta);
  const MaskedState x_s = traj.state_at(s);
  Tape tape;
  const ForwardGraph g = build_forward(tape, student, layout(student_input(traj.prompt, x_s)),
                                       grads != nullptr);
  const NodeId near = near_loss_node(tape, g, part);
  NodeId total = near;
  ItemLoss r;
  r.near = tape.value(near).item();
  if (!part.distant.empty()) {
    const DenoiserOutput t_out = denoise_forward(
        teacher, teacher_input(traj.prompt, traj.answer, x_s,
                               static_cast<std::size_t>(teacher.config.max_len)));
    const NodeId distant = distant_loss_node(tape, g, t_out, part, tau);
    r.distant = tape.value(distant).item();
    total = tape.add(near, tape.scale(distant, lambda));
  }
  r.total = tape.value(total).item();
  if (grads && tape.requires_grad(total)) {
    tape.backward(total);
    accumulate_grads(*grads, tape, g, grad_scale);
  }
  return r;
}

using DistillStepCallback = std::function<void(const LossRecord&)>;

/// Each epoch draws one step s per trajectory, shuffles, and takes one
/// optimizer step per batch. The teacher is read only.
inline DistillResult tad_train(DenoiserParams student, const DenoiserParams& teacher,
                               std::span<const Trajectory> trajs, const DistillConfig& cfg, Rng& rng,
                               const DistillStepCallback& on_step = {}) {
  cfg.validate();
  if (trajs.empty()) throw std::invalid_argument("no trajectories to distill from");
  if (!(student.config == teacher.config))
    throw std::invalid_argument("student and teacher must share one architecture");
  DistillResult out;
  AdamW<DenoiserParams> opt(student, cfg.optimizer);
  const std::size_t B = static_cast<std::size_t>(cfg.batch);
  std::vector<std::pair<std::size_t, std::size_t>> items;  // (trajectory index, s)
  for (int e = 0; e < cfg.epochs; ++e) {
    items.clear();
    for (std::size_t i = 0; i < trajs.size(); ++i)
      items.emplace_back(i, 1 + rng.below(trajs[i].T()));
    rng.shuffle(std::span(items));
    for (std::size_t b = 0; b < items.size(); b += B) {
      const std::size_t n = std::min(B, items.size() - b);
      DenoiserParams grads = DenoiserParams::zeros_like(student);
      LossRecord rec{out.losses.size() + 1, 0.0, 0.0, 0.0};
      for (std::size_t k = b; k < b + n; ++k) {
        const auto [ti, s] = items[k];
        const auto [delta, lambda] = effective_window(cfg, trajs[ti].T());
        ItemLoss l;
        try {
          l = tad_item_loss(student, teacher, trajs[ti], s, delta, lambda, cfg.tau, &grads,
                            1.0 / static_cast<double>(n));
        } catch (const NumericsError& err) {
          throw DistillationDiverged("non-finite value on trajectory " + std::to_string(ti) +
                                     " (step s=" + std::to_string(s) + "): " + err.what());
        }
        if (!std::isfinite(l.total))
          throw DistillationDiverged("NaN loss on trajectory " + std::to_string(ti) +
                                     " (step s=" + std::to_string(s) + ")");
        rec.near += l.near / static_cast<double>(n);
        rec.distant += l.distant / static_cast<double>(n);
        rec.total += l.total / static_cast<double>(n);
      }
      opt.step(student, grads);
      out.losses.push_back(rec);
      if (on_step) on_step(rec);
    }
  }
  out.student = std::move(student);
  return out;
}

inline void save_loss_csv(std::span<const LossRecord> losses, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f.precision(17);
  f << "step,near_loss,distant_loss,total\n";
  for (const auto& r : losses) f << r.step << ',' << r.near << ',' << r.distant << ',' << r.total << '\n';
}

// ---------------------------------------------------------------------------
// Window calibration from the student's look-ahead confidence.

struct DeltaCalibration {
  /// curve[d-1]: mean student probability of the token revealed d-1 steps
  /// after the current one (d = 1 is the token about to be decoded).
  std::vector<double> curve;
  std::vector<std::size_t> counts;
  std::size_t delta_quality = 0;
  std::size_t delta_speed = 0;
};

/// Smallest d whose curve value falls below `threshold`; `fallback` if none.
/// Entries without samples (NaN) never count as a crossing.
inline std::size_t delta_from_curve(std::span<const double> curve, double threshold,
                                    std::size_t fallback) {
  for (std::size_t i = 0; i < curve.size(); ++i)
    if (curve[i] < threshold) return i + 1;
  return fallback;
}

inline DeltaCalibration calibrate_delta(const DenoiserParams& student,
                                        std::span<const Trajectory> trajs,
                                        std::size_t sample_count, Rng& rng) {
  if (trajs.empty()) throw std::invalid_argument("no trajectories to calibrate on");
  std::size_t T = 0;
  for (const auto& t : trajs) T = std::max(T, t.T());
  DeltaCalibration c;
  std::vector<double> sum(T, 0.0);
  c.counts.assign(T, 0);
  for (std::size_t n = 0; n < sample_count; ++n) {
    const Trajectory& tr = trajs[rng.below(trajs.size())];
    const std::size_t s = 1 + rng.below(tr.T());
    const DenoiserOutput out = denoise_forward(student, student_input(tr.prompt, tr.state_at(s)));
    for (std::size_t r = s; r <= tr.T(); ++r) {
      const auto& st = tr.steps[r - 1];
      sum[r - s] += out.response_probs(st.position)[static_cast<std::size_t>(st.token)];
      ++c.counts[r - s];
    }
  }
  c.curve.resize(T);
  for (std::size_t d = 0; d < T; ++d)
    c.curve[d] = c.counts[d] ? sum[d] / static_cast<double>(c.counts[d])
                             : std::numeric_limits<double>::quiet_NaN();
  c.delta_quality = delta_from_curve(c.curve, 0.5, T);
  c.delta_speed = delta_from_curve(c.curve, 0.2, T);
  return c;
}

}  // namespace tad
