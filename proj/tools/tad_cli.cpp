// tad: command-line driver for the distillation lab.

#include "tad/config.hpp"
#include "tad/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Trajectory self-distillation lab for masked diffusion denoisers"};
  app.set_version_flag("--version", std::string(tad::kVersion));
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::string checkpoint;
  std::string trajectories;
  std::vector<std::string> overrides;
  bool quiet = false;
  app.add_option("--config", config_path, "key = value config file");
  app.add_option("--seed", seed, "root seed (overrides the config)");
  app.add_option("--out", out_dir, "output directory")->capture_default_str();
  app.add_option("--checkpoint", checkpoint, "checkpoint to read (default: <out>/base.ckpt)");
  app.add_option("--trajectories", trajectories,
                 "trajectory file to read (default: <out>/trajectories.jsonl)");
  app.add_option("--set", overrides, "extra key=value settings applied after the config file");
  app.add_flag("-q,--quiet", quiet, "suppress progress output");

  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"train-base", "train the base denoiser -> base.ckpt"},
      {"collect", "privileged teacher rollouts -> trajectories.jsonl"},
      {"calibrate", "look-ahead confidence curve -> delta_report.json"},
      {"distill", "temporal-aware distillation -> distilled.ckpt, loss.csv"},
      {"eval", "decode the eval set -> decode log and summary CSV"},
      {"sweep", "entropy-threshold sweep -> curve CSV and AUP"},
      {"ablate", "objective, delta and lambda variants -> ablation.csv"},
      {"gap", "factorization gap over K -> gap.csv"},
      {"validate-theorem", "KL vs summed cross-entropy identity -> kl_identity.csv"},
      {"config-keys", "list every config key with its default"},
  };
  for (const auto& c : commands) app.add_subcommand(c.name, c.help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "config-keys") {
      std::cout << tad::config_help();
      return 0;
    }
    tad::ExperimentConfig cfg = config_path.empty() ? tad::ExperimentConfig{} : tad::load_config(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw tad::ConfigError("--set expects key=value, got '" + kv + "'");
      tad::set_config_value(cfg, tad::cfg_detail::trim(kv.substr(0, eq)),
                            tad::cfg_detail::trim(kv.substr(eq + 1)));
    }
    if (seed) cfg.seed = *seed;
    cfg.validate();

    tad::PipelinePaths paths;
    paths.out = out_dir;
    if (!checkpoint.empty()) paths.checkpoint = checkpoint;
    if (!trajectories.empty()) paths.trajectories = trajectories;
    tad::Pipeline p(cfg, paths, quiet ? nullptr : &std::cerr);

    if (cmd == "train-base") p.train_base_cmd();
    else if (cmd == "collect") p.collect_cmd();
    else if (cmd == "calibrate") p.calibrate_cmd();
    else if (cmd == "distill") p.distill_cmd();
    else if (cmd == "eval") p.eval_cmd();
    else if (cmd == "sweep") p.sweep_cmd();
    else if (cmd == "ablate") p.ablate_cmd();
    else if (cmd == "gap") p.gap_cmd();
    else if (cmd == "validate-theorem") p.validate_theorem_cmd();
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "tad: error: " << e.what() << '\n';
    return 1;
  }
}
