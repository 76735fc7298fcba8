#pragma once

// Experiment configuration as plain "key = value" text. Every key has a
// default; `resolved_text` echoes the full key set in documented order.

#include "tad/decoder.hpp"
#include "tad/distill.hpp"
#include "tad/model.hpp"
#include "tad/rng.hpp"
#include "tad/tasks.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#ifndef TAD_VERSION
#define TAD_VERSION "0.1.0+unknown"
#endif

namespace tad {

inline constexpr const char* kVersion = TAD_VERSION;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  std::uint64_t seed = 7;

  // data
  std::vector<TaskKind> tasks = {TaskKind::kArithmetic, TaskKind::kCopy, TaskKind::kReverse};
  std::size_t gen_len = 8;
  int arith_min_terms = 2;
  int arith_max_terms = 3;
  int modulus = 10;
  bool allow_minus = false;
  int letters = 26;
  int seq_min_len = 2;
  int seq_max_len = 6;
  std::size_t train_size = 3000;
  std::size_t eval_size = 200;
  std::size_t collect_size = 1000;

  DenoiserConfig model{};

  // base training
  int base_epochs = 10;
  int base_batch = 16;
  double base_lr = 1e-3;
  double hint_prob = 0.5;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  double base_stop_min = -1.0;  // < 0 disables the accuracy band stop
  double base_stop_max = 100.0;

  // distillation
  DistillConfig distill{};
  std::size_t calibrate_samples = 200;

  DecodeConfig decode{};
  std::vector<double> sweep_thresholds = {0.0, 0.1, 0.25, 0.5, 1.0, 2.0};
  double aup_alpha = 3.0;

  std::vector<int> ablate_deltas = {1, 2, 4, 8};
  std::vector<double> ablate_lambdas = {0.0, 0.5, 1.0, 2.0};

  double gap_stay = 0.9;
  int gap_k_min = 2;
  int gap_k_max = 6;

  std::size_t theorem_instances = 100;
  int theorem_alphabet = 3;
  int theorem_length = 3;

  ExperimentConfig() {
    distill.optimizer.lr = 5e-4;
    decode.gen_len = gen_len;
    decode.block_len = gen_len;
  }

  std::vector<TaskSpec> task_specs() const {
    std::vector<TaskSpec> out;
    for (TaskKind k : tasks) {
      TaskSpec s;
      s.kind = k;
      s.gen_len = gen_len;
      s.min_terms = arith_min_terms;
      s.max_terms = arith_max_terms;
      s.modulus = modulus;
      s.allow_minus = allow_minus;
      s.min_len = seq_min_len;
      s.max_len = seq_max_len;
      s.letters = letters;
      out.push_back(s);
    }
    return out;
  }

  BaseTrainConfig base_train() const {
    BaseTrainConfig b;
    b.epochs = base_epochs;
    b.batch = base_batch;
    b.hint_prob = hint_prob;
    b.optimizer.lr = base_lr;
    b.optimizer.weight_decay = weight_decay;
    b.optimizer.max_grad_norm = grad_clip;
    return b;
  }

  OracleLookup oracles() const { return default_oracles(modulus); }

  /// Root stream for a named stage (base-train, data-train, collect, ...).
  Rng stream(std::string_view name) const { return Rng::stream(seed, name); }

  void validate() const {
    if (tasks.empty()) throw ConfigError("tasks: at least one task is required");
    for (const auto& s : task_specs()) s.validate();
    if (train_size == 0 || eval_size == 0 || collect_size == 0)
      throw ConfigError("train_size, eval_size and collect_size must be > 0");
    if (model.layers < 1 || model.width < 1 || model.heads < 1 || model.width % model.heads != 0)
      throw ConfigError("model: width must be a positive multiple of heads");
    if (model.vocab_size < tok::kStandardSize) throw ConfigError("vocab_size too small for the token set");
    if (!(hint_prob >= 0.0 && hint_prob <= 1.0)) throw ConfigError("hint_prob must lie in [0, 1]");
    if (base_epochs < 0 || base_batch < 1) throw ConfigError("base_epochs >= 0 and base_batch >= 1");
    distill.validate();
    if (decode.gen_len != gen_len) throw ConfigError("decode gen_len must equal gen_len");
    decode.validate();
    if (sweep_thresholds.empty() ||
        !std::is_sorted(sweep_thresholds.begin(), sweep_thresholds.end()))
      throw ConfigError("sweep_thresholds must be a non-empty ascending list");
    if (gap_k_min < 1 || gap_k_max < gap_k_min) throw ConfigError("gap K range is empty");
    if (!(gap_stay >= 0.0 && gap_stay <= 1.0)) throw ConfigError("gap_stay must lie in [0, 1]");
  }
};

// ---------------------------------------------------------------------------
// Value formatting and parsing.

namespace cfg_detail {

inline std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}
template <class I>
  requires std::is_integral_v<I>
inline std::string fmt(I v) {
  return std::to_string(v);
}
inline std::string fmt(bool v) { return v ? "true" : "false"; }

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

template <class T>
T parse_number(const std::string& s) {
  T v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ConfigError("'" + s + "' is not a valid number");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("'" + s + "' is not a boolean (true | false)");
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

}  // namespace cfg_detail

struct ConfigKey {
  const char* name;
  const char* doc;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

/// The documented key list, in echo order.
inline const std::vector<ConfigKey>& config_keys() {
  using namespace cfg_detail;
  using C = ExperimentConfig;
  auto num = [](auto member, const char* name, const char* doc) {
    return ConfigKey{name, doc, [member](const C& c) { return fmt(c.*member); },
                     [member](C& c, const std::string& v) {
                       using T = std::remove_cvref_t<decltype(c.*member)>;
                       if constexpr (std::is_same_v<T, bool>) c.*member = parse_bool(v);
                       else c.*member = parse_number<T>(v);
                     }};
  };
  static const std::vector<ConfigKey> keys = {
      num(&C::seed, "seed", "root seed for every named random stream"),
      {"tasks", "comma list of arith, copy, reverse",
       [](const C& c) {
         std::string s;
         for (std::size_t i = 0; i < c.tasks.size(); ++i)
           s += (i ? "," : "") + std::string(task_name(c.tasks[i]));
         return s;
       },
       [](C& c, const std::string& v) {
         c.tasks.clear();
         for (const auto& t : split(v)) c.tasks.push_back(parse_task(t));
       }},
      {"gen_len", "response slots per answer (also the decode length)",
       [](const C& c) { return fmt(c.gen_len); },
       [](C& c, const std::string& v) {
         c.gen_len = parse_number<std::size_t>(v);
         c.decode.gen_len = c.gen_len;
         c.decode.block_len = std::min(c.decode.block_len, c.gen_len);
       }},
      num(&C::arith_min_terms, "arith_min_terms", "fewest operands in an arithmetic chain"),
      num(&C::arith_max_terms, "arith_max_terms", "most operands in an arithmetic chain"),
      num(&C::modulus, "modulus", "arithmetic results are reduced modulo this"),
      num(&C::allow_minus, "allow_minus", "arithmetic chains may subtract"),
      num(&C::letters, "letters", "letters available to copy/reverse (1..26)"),
      num(&C::seq_min_len, "seq_min_len", "shortest copy/reverse string"),
      num(&C::seq_max_len, "seq_max_len", "longest copy/reverse string"),
      num(&C::train_size, "train_size", "base-training corpus size"),
      num(&C::eval_size, "eval_size", "evaluation prompts"),
      num(&C::collect_size, "collect_size", "prompts rolled out by the teacher"),
      {"layers", "transformer blocks", [](const C& c) { return fmt(c.model.layers); },
       [](C& c, const std::string& v) { c.model.layers = parse_number<int>(v); }},
      {"width", "model width", [](const C& c) { return fmt(c.model.width); },
       [](C& c, const std::string& v) { c.model.width = parse_number<int>(v); }},
      {"heads", "attention heads", [](const C& c) { return fmt(c.model.heads); },
       [](C& c, const std::string& v) { c.model.heads = parse_number<int>(v); }},
      {"ff_mult", "feed-forward expansion", [](const C& c) { return fmt(c.model.ff_mult); },
       [](C& c, const std::string& v) { c.model.ff_mult = parse_number<int>(v); }},
      {"max_len", "longest model input", [](const C& c) { return fmt(c.model.max_len); },
       [](C& c, const std::string& v) { c.model.max_len = parse_number<int>(v); }},
      num(&C::base_epochs, "base_epochs", "base-training epochs"),
      num(&C::base_batch, "base_batch", "base-training batch size"),
      num(&C::base_lr, "base_lr", "base-training learning rate"),
      num(&C::hint_prob, "hint_prob", "fraction of base examples that carry the answer segment"),
      num(&C::weight_decay, "weight_decay", "AdamW decoupled weight decay"),
      num(&C::grad_clip, "grad_clip", "global gradient-norm clip (<= 0 disables)"),
      num(&C::base_stop_min, "base_stop_min",
          "stop base training at the first epoch whose eval accuracy is in [min, max]; < 0 disables"),
      num(&C::base_stop_max, "base_stop_max", "upper edge of the stop band"),
      {"delta", "near window in steps", [](const C& c) { return fmt(c.distill.delta); },
       [](C& c, const std::string& v) { c.distill.delta = parse_number<int>(v); }},
      {"lambda", "distant-loss weight", [](const C& c) { return fmt(c.distill.lambda); },
       [](C& c, const std::string& v) { c.distill.lambda = parse_number<double>(v); }},
      {"tau", "distillation temperature", [](const C& c) { return fmt(c.distill.tau); },
       [](C& c, const std::string& v) { c.distill.tau = parse_number<double>(v); }},
      {"lr", "distillation learning rate", [](const C& c) { return fmt(c.distill.optimizer.lr); },
       [](C& c, const std::string& v) { c.distill.optimizer.lr = parse_number<double>(v); }},
      {"epochs", "distillation epochs", [](const C& c) { return fmt(c.distill.epochs); },
       [](C& c, const std::string& v) { c.distill.epochs = parse_number<int>(v); }},
      {"batch", "distillation batch size", [](const C& c) { return fmt(c.distill.batch); },
       [](C& c, const std::string& v) { c.distill.batch = parse_number<int>(v); }},
      {"mode", "quality | speed (delta from the calibration report) | custom (delta key)",
       [](const C& c) { return std::string(distill_mode_name(c.distill.mode)); },
       [](C& c, const std::string& v) { c.distill.mode = parse_distill_mode(v); }},
      {"objective", "tad | global_ce | near_only | kl_only",
       [](const C& c) { return std::string(objective_name(c.distill.objective)); },
       [](C& c, const std::string& v) { c.distill.objective = parse_objective(v); }},
      num(&C::calibrate_samples, "calibrate_samples", "(trajectory, step) draws for delta calibration"),
      {"block_len", "decode block length", [](const C& c) { return fmt(c.decode.block_len); },
       [](C& c, const std::string& v) { c.decode.block_len = parse_number<std::size_t>(v); }},
      {"entropy_threshold", "commit slots below this entropy (nats)",
       [](const C& c) { return fmt(c.decode.entropy_threshold); },
       [](C& c, const std::string& v) { c.decode.entropy_threshold = parse_number<double>(v); }},
      {"block_add_threshold", "look-ahead block slots need confidence >= 1 - this",
       [](const C& c) { return fmt(c.decode.block_add_threshold); },
       [](C& c, const std::string& v) { c.decode.block_add_threshold = parse_number<double>(v); }},
      {"decoded_token_threshold", "committed fraction that opens the look-ahead block",
       [](const C& c) { return fmt(c.decode.decoded_token_threshold); },
       [](C& c, const std::string& v) { c.decode.decoded_token_threshold = parse_number<double>(v); }},
      {"decode_mode", "tbt | parallel", [](const C& c) { return std::string(decode_mode_name(c.decode.mode)); },
       [](C& c, const std::string& v) { c.decode.mode = parse_decode_mode(v); }},
      {"sweep_thresholds", "ascending entropy thresholds for the sweep",
       [](const C& c) { return join(c.sweep_thresholds); },
       [](C& c, const std::string& v) {
         c.sweep_thresholds.clear();
         for (const auto& t : split(v)) c.sweep_thresholds.push_back(parse_number<double>(t));
       }},
      num(&C::aup_alpha, "aup_alpha", "AUP penalty factor"),
      {"ablate_deltas", "delta grid for ablate", [](const C& c) { return join(c.ablate_deltas); },
       [](C& c, const std::string& v) {
         c.ablate_deltas.clear();
         for (const auto& t : split(v)) c.ablate_deltas.push_back(parse_number<int>(t));
       }},
      {"ablate_lambdas", "lambda grid for ablate", [](const C& c) { return join(c.ablate_lambdas); },
       [](C& c, const std::string& v) {
         c.ablate_lambdas.clear();
         for (const auto& t : split(v)) c.ablate_lambdas.push_back(parse_number<double>(t));
       }},
      num(&C::gap_stay, "gap_stay", "stay probability of the binary Markov source"),
      num(&C::gap_k_min, "gap_k_min", "shortest sequence length for gap"),
      num(&C::gap_k_max, "gap_k_max", "longest sequence length for gap"),
      num(&C::theorem_instances, "theorem_instances", "random instances for validate-theorem"),
      num(&C::theorem_alphabet, "theorem_alphabet", "alphabet size for validate-theorem"),
      num(&C::theorem_length, "theorem_length", "sequence length for validate-theorem"),
  };
  return keys;
}

inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys()) {
    if (key != k.name) continue;
    try {
      k.set(c, value);
    } catch (const std::exception& e) {
      throw ConfigError("key '" + key + "': " + e.what());
    }
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Lines are "key = value"; '#' starts a comment.
inline ExperimentConfig parse_config(std::istream& in, const std::string& origin = "<config>") {
  ExperimentConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = cfg_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    try {
      set_config_value(c, cfg_detail::trim(line.substr(0, eq)), cfg_detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(f, path);
}

/// Every key with its resolved value, one "key = value" per line.
inline std::string resolved_text(const ExperimentConfig& c) {
  std::string out;
  for (const auto& k : config_keys()) out += std::string(k.name) + " = " + k.get(c) + "\n";
  return out;
}

inline std::string config_help() {
  std::string out;
  const ExperimentConfig defaults;
  for (const auto& k : config_keys())
    out += std::string(k.name) + " (default " + k.get(defaults) + "): " + k.doc + "\n";
  return out;
}

}  // namespace tad
