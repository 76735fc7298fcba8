#pragma once

// Experiment stages. Each stage reads its inputs from files, writes its
// artifacts into the output directory, and stamps every artifact with the
// version string and the resolved configuration.

#include "tad/config.hpp"
#include "tad/decoder.hpp"
#include "tad/distill.hpp"
#include "tad/metrics.hpp"
#include "tad/model.hpp"
#include "tad/tasks.hpp"
#include "tad/trajectory.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tad {

namespace fs = std::filesystem;

struct PipelinePaths {
  fs::path out = "out";
  std::optional<fs::path> checkpoint;
  std::optional<fs::path> trajectories;
};

class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, PipelinePaths paths, std::ostream* log = nullptr)
      : cfg_(std::move(cfg)), paths_(std::move(paths)), log_(log) {
    cfg_.validate();
  }

  const ExperimentConfig& config() const { return cfg_; }
  fs::path out(const std::string& name) const { return paths_.out / name; }

  // -------------------------------------------------------------------------
  // Datasets, each from its own named stream.

  std::vector<PromptAnswerPair> train_corpus() const { return corpus("data-train", cfg_.train_size); }
  std::vector<PromptAnswerPair> eval_set() const { return corpus("data-eval", cfg_.eval_size); }
  std::vector<PromptAnswerPair> collect_prompts() const {
    return corpus("data-collect", cfg_.collect_size);
  }

  // -------------------------------------------------------------------------
  // Commands.

  /// -> base.ckpt, base_train.csv
  DenoiserParams train_base_cmd() {
    prepare();
    const auto data = train_corpus();
    const auto evals = eval_set();
    Rng rng = cfg_.stream("base-train");
    const bool band = cfg_.base_stop_min >= 0.0;
    std::vector<std::pair<EpochReport, double>> rows;
    auto on_epoch = [&](const EpochReport& r, const DenoiserParams& p) {
      double acc = -1.0;
      if (band) acc = tbt_accuracy(p, evals);
      rows.emplace_back(r, acc);
      say("epoch " + std::to_string(r.epoch) + " loss " + cfg_detail::fmt(r.mean_loss) +
          (band ? " eval_accuracy " + cfg_detail::fmt(acc) : ""));
      return !(band && acc >= cfg_.base_stop_min && acc <= cfg_.base_stop_max);
    };
    BaseTrainResult res = train_base(cfg_.model, cfg_.base_train(), data, rng, on_epoch);

    const fs::path ckpt = out("base.ckpt");
    save_checkpoint(res.params, ckpt.string());
    write_meta(ckpt);
    std::ofstream f = open_csv(out("base_train.csv"));
    f << "epoch,mean_loss,steps,eval_accuracy\n";
    for (const auto& [r, acc] : rows)
      f << r.epoch << ',' << cfg_detail::fmt(r.mean_loss) << ',' << r.steps << ','
        << (acc >= 0.0 ? cfg_detail::fmt(acc) : std::string()) << '\n';
    return res.params;
  }

  struct CollectReport {
    std::size_t kept = 0;
    std::size_t dropped = 0;
    double privileged_pass_rate = 0.0;
    double unprivileged_pass_rate = 0.0;
  };

  /// -> trajectories.jsonl (kept only), collect_report.json
  CollectReport collect_cmd() {
    prepare();
    const DenoiserParams teacher = load_params(checkpoint_path("base.ckpt"));
    const auto prompts = collect_prompts();
    const auto oracles = cfg_.oracles();
    std::vector<Trajectory> all;
    std::size_t plain_pass = 0;
    for (const auto& p : prompts) {
      all.push_back(collect_trajectory(teacher, p, cfg_.gen_len, std::span<const TokenId>(p.answer),
                                       oracles));
      plain_pass += collect_trajectory(teacher, p, cfg_.gen_len, std::nullopt, oracles).oracle_pass;
    }
    const FilterResult kept = filter_trajectories(all, oracles);
    const fs::path traj = out("trajectories.jsonl");
    save_trajectories(kept.kept, traj.string());
    write_meta(traj);

    CollectReport r{kept.kept_count, kept.dropped_count,
                    100.0 * static_cast<double>(kept.kept_count) / static_cast<double>(all.size()),
                    100.0 * static_cast<double>(plain_pass) / static_cast<double>(all.size())};
    nlohmann::json j = stamp();
    j["kept"] = r.kept;
    j["dropped"] = r.dropped;
    j["privileged_pass_rate"] = r.privileged_pass_rate;
    j["unprivileged_pass_rate"] = r.unprivileged_pass_rate;
    write_json(out("collect_report.json"), j);
    say("kept " + std::to_string(r.kept) + " dropped " + std::to_string(r.dropped));
    return r;
  }

  /// -> delta_report.json, delta_curve.csv
  DeltaCalibration calibrate_cmd() {
    prepare();
    const DenoiserParams student = load_params(checkpoint_path("base.ckpt"));
    const auto trajs = load_trajs();
    Rng rng = cfg_.stream("calibrate");
    const DeltaCalibration c = calibrate_delta(student, trajs, cfg_.calibrate_samples, rng);
    const auto teacher_profile = confidence_profile(student, trajs, true);
    const auto student_profile = confidence_profile(student, trajs, false);

    nlohmann::json j = stamp();
    j["curve"] = nan_to_null(c.curve);
    j["counts"] = c.counts;
    j["delta_quality"] = c.delta_quality;
    j["delta_speed"] = c.delta_speed;
    j["teacher_confidence_profile"] = teacher_profile;
    j["student_confidence_profile"] = student_profile;
    write_json(out("delta_report.json"), j);
    std::ofstream f = open_csv(out("delta_curve.csv"));
    f << "d,mean_probability,count\n";
    for (std::size_t d = 0; d < c.curve.size(); ++d)
      f << d + 1 << ',' << cfg_detail::fmt(c.curve[d]) << ',' << c.counts[d] << '\n';
    say("delta_quality " + std::to_string(c.delta_quality) + " delta_speed " +
        std::to_string(c.delta_speed));
    return c;
  }

  /// -> distilled.ckpt, loss.csv
  DistillResult distill_cmd() {
    prepare();
    const DenoiserParams base = load_params(checkpoint_path("base.ckpt"));
    const auto trajs = load_trajs();
    DistillConfig dc = resolved_distill();
    Rng rng = cfg_.stream("distill");
    DistillResult r = tad_train(base, base, trajs, dc, rng);
    const fs::path ckpt = out("distilled.ckpt");
    save_checkpoint(r.student, ckpt.string());
    write_meta(ckpt);
    write_losses(out("loss.csv"), r.losses);
    return r;
  }

  /// -> decode_<tag>.jsonl, eval_<tag>.csv
  EvalSummary eval_cmd() {
    prepare();
    const fs::path ck = checkpoint_path("base.ckpt");
    const DenoiserParams p = load_params(ck);
    const std::string tag = ck.stem().string();
    const EvalSummary s = evaluate(p, eval_set(), cfg_.decode, cfg_.oracles());
    const fs::path log = out("decode_" + tag + ".jsonl");
    save_decode_log(s.records, log.string());
    write_meta(log);
    std::ofstream f = open_csv(out("eval_" + tag + ".csv"));
    f << "checkpoint,count,accuracy,mean_tpf,total_generated,total_forwards\n";
    f << tag << ',' << s.count << ',' << cfg_detail::fmt(s.accuracy) << ','
      << cfg_detail::fmt(s.mean_tpf) << ',' << s.total_generated << ',' << s.total_forwards << '\n';
    say("accuracy " + cfg_detail::fmt(s.accuracy) + " mean_tpf " + cfg_detail::fmt(s.mean_tpf));
    return s;
  }

  struct SweepOutput {
    SweepResult sweep;
    AupReport aup;
  };

  /// -> sweep_<tag>.csv, curve_<tag>.csv, aup_<tag>.csv
  SweepOutput sweep_cmd() {
    prepare();
    const fs::path ck = checkpoint_path("base.ckpt");
    const DenoiserParams p = load_params(ck);
    const std::string tag = ck.stem().string();
    SweepOutput o{run_sweep(p), {}};
    o.aup = aup_report(o.sweep.curve, {cfg_.aup_alpha, std::nullopt});
    std::ofstream f = open_csv(out("sweep_" + tag + ".csv"));
    f << "threshold,accuracy,mean_tpf\n";
    for (const auto& r : o.sweep.rows)
      f << cfg_detail::fmt(r.threshold) << ',' << cfg_detail::fmt(r.accuracy) << ','
        << cfg_detail::fmt(r.mean_tpf) << '\n';
    f.close();
    std::ofstream c = open_csv(out("curve_" + tag + ".csv"));
    c << "tpf,accuracy\n";
    for (const auto& pt : o.sweep.curve.points)
      c << cfg_detail::fmt(pt.tpf) << ',' << cfg_detail::fmt(pt.accuracy) << '\n';
    c.close();
    std::ofstream a = open_csv(out("aup_" + tag + ".csv"));
    write_aup(a, o.aup);
    say("aup " + cfg_detail::fmt(o.aup.value));
    return o;
  }

  struct AblationRow {
    std::string variant;
    DistillObjective objective = DistillObjective::kTad;
    int delta = 0;
    double lambda = 0.0;
    LossRecord final_loss;
    double accuracy = 0.0;
    double mean_tpf = 0.0;
    double aup = 0.0;
  };

  /// -> ablation.csv
  std::vector<AblationRow> ablate_cmd() {
    prepare();
    const DenoiserParams base = load_params(checkpoint_path("base.ckpt"));
    const auto trajs = load_trajs();
    const auto evals = eval_set();
    const DistillConfig ref = resolved_distill();
    const int T = static_cast<int>(cfg_.gen_len);

    std::vector<std::tuple<std::string, DistillObjective, int, double>> plan = {
        {"global_ce", DistillObjective::kGlobalCe, T, ref.lambda},
        {"near_only", DistillObjective::kNearOnly, ref.delta, 0.0},
        {"kl_only", DistillObjective::kKlOnly, ref.delta, ref.lambda},
        {"tad", DistillObjective::kTad, ref.delta, ref.lambda},
    };
    for (int d : cfg_.ablate_deltas)
      plan.emplace_back("delta_" + std::to_string(d), DistillObjective::kTad, d, ref.lambda);
    for (double l : cfg_.ablate_lambdas)
      plan.emplace_back("lambda_" + cfg_detail::fmt(l), DistillObjective::kTad, ref.delta, l);

    std::vector<AblationRow> rows;
    for (const auto& [name, obj, delta, lambda] : plan) {
      DistillConfig dc = ref;
      dc.objective = obj;
      dc.delta = delta;
      dc.lambda = lambda;
      Rng rng = cfg_.stream("distill");
      const DistillResult r = tad_train(base, base, trajs, dc, rng);
      const EvalSummary s = evaluate(r.student, evals, cfg_.decode, cfg_.oracles());
      const double a = aup_report(run_sweep(r.student).curve, {cfg_.aup_alpha, std::nullopt}).value;
      rows.push_back({name, obj, delta, lambda, r.losses.empty() ? LossRecord{} : r.losses.back(),
                      s.accuracy, s.mean_tpf, a});
      say(name + " accuracy " + cfg_detail::fmt(s.accuracy) + " tpf " + cfg_detail::fmt(s.mean_tpf) +
          " aup " + cfg_detail::fmt(a));
    }
    std::ofstream f = open_csv(out("ablation.csv"));
    f << "variant,objective,delta,lambda,final_near,final_distant,final_total,accuracy,mean_tpf,aup\n";
    for (const auto& r : rows)
      f << r.variant << ',' << objective_name(r.objective) << ',' << r.delta << ','
        << cfg_detail::fmt(r.lambda) << ',' << cfg_detail::fmt(r.final_loss.near) << ','
        << cfg_detail::fmt(r.final_loss.distant) << ',' << cfg_detail::fmt(r.final_loss.total) << ','
        << cfg_detail::fmt(r.accuracy) << ',' << cfg_detail::fmt(r.mean_tpf) << ','
        << cfg_detail::fmt(r.aup) << '\n';
    return rows;
  }

  struct GapRow {
    int K = 0;
    double gap = 0.0;
    double identity = 0.0;
  };

  /// -> gap.csv over K on the sticky binary Markov source
  std::vector<GapRow> gap_cmd() {
    prepare();
    const MarkovSource src = MarkovSource::sticky_binary(cfg_.gap_stay);
    std::vector<GapRow> rows;
    for (int K = cfg_.gap_k_min; K <= cfg_.gap_k_max; ++K)
      rows.push_back({K, factorization_gap(enumerate_joint(src, K)).gap, markov_total_correlation(src, K)});
    std::ofstream f = open_csv(out("gap.csv"));
    f << "K,gap,identity,abs_diff\n";
    for (const auto& r : rows)
      f << r.K << ',' << cfg_detail::fmt(r.gap) << ',' << cfg_detail::fmt(r.identity) << ','
        << cfg_detail::fmt(std::abs(r.gap - r.identity)) << '\n';
    return rows;
  }

  /// -> kl_identity.csv
  std::vector<KlIdentityReport> validate_theorem_cmd() {
    prepare();
    Rng rng = cfg_.stream("validate");
    std::vector<KlIdentityReport> rows;
    double worst = 0.0;
    for (std::size_t i = 0; i < cfg_.theorem_instances; ++i) {
      const auto teacher =
          DistributionTable::from_chain(random_chain(cfg_.theorem_alphabet, cfg_.theorem_length, rng));
      std::vector<std::vector<double>> student;
      for (int k = 0; k < cfg_.theorem_length; ++k)
        student.push_back(random_distribution(cfg_.theorem_alphabet, rng));
      rows.push_back(validate_kl_identity(teacher, student));
      worst = std::max(worst, rows.back().residual);
    }
    std::ofstream f = open_csv(out("kl_identity.csv"));
    f << "instance,lhs,rhs,residual\n";
    for (std::size_t i = 0; i < rows.size(); ++i)
      f << i << ',' << cfg_detail::fmt(rows[i].lhs) << ',' << cfg_detail::fmt(rows[i].rhs) << ','
        << cfg_detail::fmt(rows[i].residual) << '\n';
    f << "# max_residual=" << cfg_detail::fmt(worst) << '\n';
    say("max residual " + cfg_detail::fmt(worst));
    return rows;
  }

  // -------------------------------------------------------------------------

  SweepResult run_sweep(const DenoiserParams& p) const {
    const auto evals = eval_set();
    if (cfg_.decode.mode == DecodeMode::kTokenByToken) {
      const EvalSummary s = evaluate(p, evals, cfg_.decode, cfg_.oracles());
      SweepResult r;
      r.rows.push_back({0.0, s.accuracy, s.mean_tpf});
      r.curve = curve_from_rows(r.rows);
      return r;
    }
    return sweep_parallelism(p, evals, cfg_.sweep_thresholds, cfg_.decode, cfg_.oracles());
  }

  /// The window used for distillation: from the calibration report in
  /// quality/speed mode, otherwise the `delta` key.
  DistillConfig resolved_distill() const {
    DistillConfig dc = cfg_.distill;
    dc.optimizer.weight_decay = cfg_.weight_decay;
    dc.optimizer.max_grad_norm = cfg_.grad_clip;
    if (dc.mode == DistillMode::kCustom) return dc;
    const fs::path rep = out("delta_report.json");
    std::ifstream f(rep);
    if (!f)
      throw std::runtime_error("mode '" + std::string(distill_mode_name(dc.mode)) + "' needs '" +
                               rep.string() + "' (run calibrate first)");
    const auto j = nlohmann::json::parse(f);
    dc.delta = j.at(dc.mode == DistillMode::kQuality ? "delta_quality" : "delta_speed").get<int>();
    return dc;
  }

 private:
  std::vector<PromptAnswerPair> corpus(std::string_view stream, std::size_t n) const {
    Rng rng = cfg_.stream(stream);
    const auto specs = cfg_.task_specs();
    return generate_mixed_corpus(specs, n, rng);
  }

  double tbt_accuracy(const DenoiserParams& p, std::span<const PromptAnswerPair> evals) const {
    DecodeConfig d = cfg_.decode;
    d.mode = DecodeMode::kTokenByToken;
    return evaluate(p, evals, d, cfg_.oracles()).accuracy;
  }

  fs::path checkpoint_path(const std::string& fallback) const {
    return paths_.checkpoint.value_or(out(fallback));
  }

  DenoiserParams load_params(const fs::path& p) const {
    if (!fs::exists(p)) throw std::runtime_error("checkpoint not found: '" + p.string() + "'");
    DenoiserParams params = load_checkpoint(p.string());
    if (!(params.config == cfg_.model))
      say("note: checkpoint architecture differs from the config; using the checkpoint's");
    return params;
  }

  std::vector<Trajectory> load_trajs() const {
    const fs::path p = paths_.trajectories.value_or(out("trajectories.jsonl"));
    if (!fs::exists(p)) throw std::runtime_error("trajectory file not found: '" + p.string() + "'");
    auto t = load_trajectories(p.string());
    if (t.empty()) throw std::runtime_error("trajectory file '" + p.string() + "' has no trajectories");
    return t;
  }

  void prepare() {
    fs::create_directories(paths_.out);
    std::ofstream f(out("config.resolved.txt"));
    if (!f) throw std::runtime_error("cannot write into output directory '" + paths_.out.string() + "'");
    f << header();
  }

  std::string header() const {
    std::string h = std::string("# version = ") + kVersion + "\n";
    std::istringstream in(resolved_text(cfg_));
    for (std::string line; std::getline(in, line);) h += "# " + line + "\n";
    return h;
  }

  nlohmann::json stamp() const {
    nlohmann::json c = nlohmann::json::object();
    for (const auto& k : config_keys()) c[k.name] = k.get(cfg_);
    return {{"version", kVersion}, {"config", c}};
  }

  std::ofstream open_csv(const fs::path& p) const {
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot open '" + p.string() + "' for writing");
    f << header();
    return f;
  }

  void write_meta(const fs::path& artifact) const {
    std::ofstream f(artifact.string() + ".meta");
    if (!f) throw std::runtime_error("cannot write metadata for '" + artifact.string() + "'");
    f << header();
  }

  void write_json(const fs::path& p, const nlohmann::json& j) const {
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot open '" + p.string() + "' for writing");
    f << j.dump(2) << '\n';
  }

  void write_losses(const fs::path& p, std::span<const LossRecord> losses) const {
    std::ofstream f = open_csv(p);
    f << "step,near_loss,distant_loss,total\n";
    for (const auto& r : losses)
      f << r.step << ',' << cfg_detail::fmt(r.near) << ',' << cfg_detail::fmt(r.distant) << ','
        << cfg_detail::fmt(r.total) << '\n';
  }

  static void write_aup(std::ostream& f, const AupReport& r) {
    f << "rho_lo,rho_hi,y_lo,y_hi,w_lo,w_hi,contribution\n";
    for (const auto& s : r.segments)
      f << cfg_detail::fmt(s.rho_lo) << ',' << cfg_detail::fmt(s.rho_hi) << ','
        << cfg_detail::fmt(s.y_lo) << ',' << cfg_detail::fmt(s.y_hi) << ','
        << cfg_detail::fmt(s.w_lo) << ',' << cfg_detail::fmt(s.w_hi) << ','
        << cfg_detail::fmt(s.contribution) << '\n';
    f << "# aup = " << cfg_detail::fmt(r.value) << "\n# y_max = " << cfg_detail::fmt(r.y_max)
      << "\n# kept_points = " << r.kept_points << "\n# excluded_points = " << r.excluded_points
      << '\n';
  }

  static nlohmann::json nan_to_null(const std::vector<double>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (double x : v) a.push_back(std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x));
    return a;
  }

  void say(const std::string& s) const {
    if (log_) *log_ << s << '\n';
  }

  ExperimentConfig cfg_;
  PipelinePaths paths_;
  std::ostream* log_;
};

}  // namespace tad
