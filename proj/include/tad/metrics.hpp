#pragma once

// Accuracy under parallelism, factorization gaps on enumerable sources,
// the KL = sum(CE) - H identity, and per-step confidence profiles.

#include "tad/decoder.hpp"
#include "tad/distribution.hpp"
#include "tad/model.hpp"
#include "tad/select.hpp"
#include "tad/tasks.hpp"
#include "tad/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tad {

struct CurvePoint {
  double tpf = 1.0;       // rho
  double accuracy = 0.0;  // percent

  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

/// (TPF, accuracy) pairs, strictly increasing in TPF.
struct ParallelismCurve {
  std::vector<CurvePoint> points;

  void validate() const {
    if (points.empty()) throw std::invalid_argument("parallelism curve is empty");
    if (!(points.front().tpf >= 1.0)) throw std::invalid_argument("first TPF must be >= 1");
    for (std::size_t i = 0; i < points.size(); ++i) {
      const auto& p = points[i];
      if (!std::isfinite(p.tpf) || !(p.accuracy >= 0.0 && p.accuracy <= 100.0))
        throw std::invalid_argument("curve point " + std::to_string(i) +
                                    ": accuracy must lie in [0, 100] and TPF be finite");
      if (i > 0 && !(p.tpf > points[i - 1].tpf))
        throw std::invalid_argument("curve TPF values must be strictly increasing");
    }
  }

  double max_accuracy() const {
    double m = 0.0;
    for (const auto& p : points) m = std::max(m, p.accuracy);
    return m;
  }
};

inline double aup_weight(double y, double y_max, double alpha) {
  if (!(y_max > 0.0)) return 1.0;
  return std::min(std::exp(-alpha * (1.0 - y / y_max)), 1.0);
}

struct AupSegment {
  double rho_lo = 0.0, rho_hi = 0.0;
  double y_lo = 0.0, y_hi = 0.0;
  double w_lo = 1.0, w_hi = 1.0;
  double contribution = 0.0;
};

struct AupReport {
  double value = 0.0;
  double y_max = 0.0;
  std::size_t kept_points = 0;
  std::size_t excluded_points = 0;
  /// First entry is the rho_1 * y_1 rectangle (rho_lo = 0).
  std::vector<AupSegment> segments;
};

struct AupOptions {
  double alpha = 3.0;
  /// Best accuracy on the task; defaults to the maximum over the supplied curve.
  std::optional<double> y_max;
};

/// The curve is cut at the first point with y < y_1 - 5; later points are dropped.
inline AupReport aup_report(const ParallelismCurve& curve, const AupOptions& opt = {}) {
  curve.validate();
  AupReport r;
  r.y_max = opt.y_max.value_or(curve.max_accuracy());
  const auto& pts = curve.points;
  const double y_min = pts.front().accuracy - 5.0;
  std::size_t n = 1;
  while (n < pts.size() && !(pts[n].accuracy < y_min)) ++n;
  r.kept_points = n;
  r.excluded_points = pts.size() - n;

  const double y1 = pts.front().accuracy;
  r.segments.push_back({0.0, pts.front().tpf, y1, y1, 1.0, 1.0, pts.front().tpf * y1});
  r.value = r.segments.back().contribution;
  for (std::size_t i = 1; i < n; ++i) {
    AupSegment s;
    s.rho_lo = pts[i - 1].tpf;
    s.rho_hi = pts[i].tpf;
    s.y_lo = pts[i - 1].accuracy;
    s.y_hi = pts[i].accuracy;
    s.w_lo = aup_weight(s.y_lo, r.y_max, opt.alpha);
    s.w_hi = aup_weight(s.y_hi, r.y_max, opt.alpha);
    s.contribution = (s.rho_hi - s.rho_lo) * (s.y_lo * s.w_lo + s.y_hi * s.w_hi) / 2.0;
    r.value += s.contribution;
    r.segments.push_back(s);
  }
  return r;
}

inline double aup(const ParallelismCurve& curve, double alpha = 3.0) {
  return aup_report(curve, {alpha, std::nullopt}).value;
}

// ---------------------------------------------------------------------------
// Curve and AUP files.

/// Rows "tpf,accuracy"; '#' lines are skipped and a non-numeric first
/// remaining line is taken as a header.
inline ParallelismCurve load_curve_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open curve file '" + path + "'");
  ParallelismCurve c;
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const bool header_allowed = std::exchange(first, false);
    std::stringstream ss(line);
    std::string a, b;
    std::getline(ss, a, ',');
    std::getline(ss, b, ',');
    try {
      std::size_t ua = 0, ub = 0;
      const double tpf = std::stod(a, &ua);
      const double acc = std::stod(b, &ub);
      c.points.push_back({tpf, acc});
    } catch (const std::exception&) {
      if (header_allowed) continue;
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 'tpf,accuracy'");
    }
  }
  c.validate();
  return c;
}

inline void save_curve_csv(const ParallelismCurve& c, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f.precision(17);
  f << "tpf,accuracy\n";
  for (const auto& p : c.points) f << p.tpf << ',' << p.accuracy << '\n';
}

inline void save_aup_breakdown_csv(const AupReport& r, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f.precision(17);
  f << "rho_lo,rho_hi,y_lo,y_hi,w_lo,w_hi,contribution\n";
  for (const auto& s : r.segments)
    f << s.rho_lo << ',' << s.rho_hi << ',' << s.y_lo << ',' << s.y_hi << ',' << s.w_lo << ','
      << s.w_hi << ',' << s.contribution << '\n';
  f << "# aup=" << r.value << " y_max=" << r.y_max << " kept=" << r.kept_points
    << " excluded=" << r.excluded_points << '\n';
}

// ---------------------------------------------------------------------------
// Threshold sweeps.

struct SweepRow {
  double threshold = 0.0;
  double accuracy = 0.0;
  double mean_tpf = 1.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // one per threshold, in input order
  ParallelismCurve curve;      // sorted by TPF, equal TPF merged by max accuracy
};

inline ParallelismCurve curve_from_rows(std::span<const SweepRow> rows) {
  std::vector<CurvePoint> pts;
  for (const auto& r : rows) pts.push_back({r.mean_tpf, r.accuracy});
  std::sort(pts.begin(), pts.end(), [](const CurvePoint& a, const CurvePoint& b) {
    return a.tpf < b.tpf || (a.tpf == b.tpf && a.accuracy > b.accuracy);
  });
  ParallelismCurve c;
  for (const auto& p : pts)
    if (c.points.empty() || p.tpf != c.points.back().tpf) c.points.push_back(p);
  return c;
}

inline SweepResult sweep_parallelism(const DenoiserParams& params,
                                     std::span<const PromptAnswerPair> eval_set,
                                     std::span<const double> thresholds, const DecodeConfig& base,
                                     const OracleLookup& oracles = default_oracles()) {
  if (eval_set.empty()) throw std::invalid_argument("evaluation set is empty");
  if (thresholds.empty()) throw std::invalid_argument("no thresholds to sweep");
  if (!std::is_sorted(thresholds.begin(), thresholds.end()))
    throw std::invalid_argument("thresholds must be sorted ascending");
  SweepResult out;
  for (double th : thresholds) {
    DecodeConfig cfg = base;
    cfg.mode = DecodeMode::kParallel;
    cfg.entropy_threshold = th;
    const EvalSummary s = evaluate(params, eval_set, cfg, oracles);
    out.rows.push_back({th, s.accuracy, s.mean_tpf});
  }
  out.curve = curve_from_rows(out.rows);
  return out;
}

// ---------------------------------------------------------------------------
// Factorization gap.

struct GapReport {
  double gap = 0.0;       // nats; +inf when the product misses joint mass
  bool infinite = false;
  std::size_t support = 0;  // sequences with nonzero joint mass
};

inline GapReport factorization_gap(const DistributionTable& joint,
                                   const std::vector<std::vector<double>>& marginals) {
  const int K = joint.length();
  if (static_cast<int>(marginals.size()) != K)
    throw std::invalid_argument("need one marginal per position");
  for (const auto& m : marginals)
    if (static_cast<int>(m.size()) != joint.alphabet())
      throw std::invalid_argument("marginal alphabet does not match the joint");
  GapReport r;
  for (std::size_t idx = 0; idx < joint.size(); ++idx) {
    const double p = joint[idx];
    if (p <= 0.0) continue;
    ++r.support;
    const auto seq = joint.decode(idx);
    double log_q = 0.0;
    for (int k = 0; k < K; ++k) {
      const double q = marginals[static_cast<std::size_t>(k)][static_cast<std::size_t>(seq[static_cast<std::size_t>(k)])];
      if (q <= 0.0) {
        r.infinite = true;
        r.gap = std::numeric_limits<double>::infinity();
        return r;
      }
      log_q += std::log(q);
    }
    r.gap += p * (std::log(p) - log_q);
  }
  r.gap = std::max(r.gap, 0.0);
  return r;
}

inline GapReport factorization_gap(const DistributionTable& joint) {
  return factorization_gap(joint, joint.marginals());
}

inline double entropy_of(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

/// Total correlation of K steps of a Markov source without enumeration:
/// sum_k H(pi_k) - [H(pi_1) + sum_{k>=2} E_{pi_{k-1}} H(P(.|x))].
inline double markov_total_correlation(const MarkovSource& src, int K) {
  src.validate();
  if (K < 1) throw std::invalid_argument("length K must be >= 1");
  std::vector<double> pi = src.initial;
  double sum_marginal = entropy_of(pi);
  double joint = entropy_of(pi);
  for (int k = 1; k < K; ++k) {
    std::vector<double> next(pi.size(), 0.0);
    for (int i = 0; i < src.alphabet; ++i) {
      const auto r = src.row(i);
      joint += pi[static_cast<std::size_t>(i)] * entropy_of(r);
      for (int j = 0; j < src.alphabet; ++j)
        next[static_cast<std::size_t>(j)] += pi[static_cast<std::size_t>(i)] * r[static_cast<std::size_t>(j)];
    }
    pi = std::move(next);
    sum_marginal += entropy_of(pi);
  }
  return sum_marginal - joint;
}

// ---------------------------------------------------------------------------
// KL(p_T || prod q_k) = sum_k E_{x<k}[CE(p_T(.|x<k), q_k)] - H(p_T)

struct KlIdentityReport {
  double lhs = 0.0;
  double rhs = 0.0;
  double residual = 0.0;
};

/// lhs by enumerating the joint table; rhs walks prefixes and uses only
/// conditionals, so the two sides share no summation.
inline KlIdentityReport validate_kl_identity(const DistributionTable& teacher,
                                        const std::vector<std::vector<double>>& student) {
  const int K = teacher.length();
  const int A = teacher.alphabet();
  if (static_cast<int>(student.size()) != K)
    throw std::invalid_argument("need one student marginal per position");

  KlIdentityReport r;
  for (std::size_t idx = 0; idx < teacher.size(); ++idx) {
    const double p = teacher[idx];
    if (p <= 0.0) continue;
    const auto seq = teacher.decode(idx);
    double log_q = 0.0;
    for (int k = 0; k < K; ++k)
      log_q += std::log(student[static_cast<std::size_t>(k)][static_cast<std::size_t>(seq[static_cast<std::size_t>(k)])]);
    r.lhs += p * (std::log(p) - log_q);
  }

  double ce_sum = 0.0;
  double entropy = 0.0;
  for (int k = 0; k < K; ++k) {
    const std::size_t prefixes = checked_power(A, k);
    std::vector<int> prefix(static_cast<std::size_t>(k));
    for (std::size_t pi = 0; pi < prefixes; ++pi) {
      std::size_t rem = pi;
      for (int j = k; j-- > 0;) {
        prefix[static_cast<std::size_t>(j)] = static_cast<int>(rem % static_cast<std::size_t>(A));
        rem /= static_cast<std::size_t>(A);
      }
      const double w = teacher.prefix_probability(prefix);
      if (w <= 0.0) continue;
      const auto cond = teacher.conditional(prefix);
      double ce = 0.0, h = 0.0;
      for (int v = 0; v < A; ++v) {
        const double c = cond[static_cast<std::size_t>(v)];
        if (c <= 0.0) continue;
        ce -= c * std::log(student[static_cast<std::size_t>(k)][static_cast<std::size_t>(v)]);
        h -= c * std::log(c);
      }
      ce_sum += w * ce;
      entropy += w * h;
    }
  }
  r.rhs = ce_sum - entropy;
  r.residual = std::abs(r.lhs - r.rhs);
  return r;
}

// ---------------------------------------------------------------------------
// Confidence profiles.

/// Mean over trajectories of the max-probability at the committed slot, per
/// step index. Trajectories shorter than the longest one stop contributing.
inline std::vector<double> confidence_profile(const DenoiserParams& params,
                                              std::span<const Trajectory> trajs, bool privileged) {
  if (trajs.empty()) throw std::invalid_argument("no trajectories for the confidence profile");
  std::size_t T = 0;
  for (const auto& t : trajs) T = std::max(T, t.T());
  std::vector<double> sum(T, 0.0);
  std::vector<std::size_t> count(T, 0);
  const auto max_len = static_cast<std::size_t>(params.config.max_len);
  for (const auto& t : trajs) {
    for (std::size_t s = 1; s <= t.T(); ++s) {
      const DenoiserOutput out = denoise_forward(params, rollout_input(t, s, privileged, max_len));
      sum[s - 1] += best_token(out.response_probs(t.steps[s - 1].position)).confidence;
      ++count[s - 1];
    }
  }
  for (std::size_t i = 0; i < T; ++i) sum[i] /= static_cast<double>(count[i]);
  return sum;
}

}  // namespace tad
