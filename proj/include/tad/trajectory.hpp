#pragma once

// Teacher rollouts that reveal exactly one token per step, optionally
// conditioned on the ground-truth answer as privileged input.

#include "tad/corruption.hpp"
#include "tad/model.hpp"
#include "tad/select.hpp"
#include "tad/tasks.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tad {

/// Concat(q, a, x_s): the response region keeps its position ids (see layout()).
inline MaskedState teacher_input(std::span<const TokenId> prompt, std::span<const TokenId> answer,
                                 const MaskedState& state,
                                 std::size_t max_len = std::numeric_limits<std::size_t>::max()) {
  MaskedState s{{prompt.begin(), prompt.end()},
                std::vector<TokenId>(answer.begin(), answer.end()),
                state.response};
  const std::size_t total = s.prompt.size() + 1 + s.privileged->size() + s.response.size();
  if (total > max_len)
    throw std::length_error("teacher input length " + std::to_string(total) +
                            " exceeds max length " + std::to_string(max_len));
  return s;
}

/// Concat(q, x_s).
inline MaskedState student_input(std::span<const TokenId> prompt, const MaskedState& state) {
  return MaskedState{{prompt.begin(), prompt.end()}, std::nullopt, state.response};
}

struct TrajectoryStep {
  int s = 0;                 // 1-based step index
  std::size_t position = 0;  // revealed response slot
  TokenId token = tok::kPad;
  double confidence = 0.0;

  friend bool operator==(const TrajectoryStep&, const TrajectoryStep&) = default;
};

/// States are implicit: x_1 is fully masked and x_{s+1} is x_s with step s applied.
struct Trajectory {
  TaskKind task = TaskKind::kArithmetic;
  std::vector<TokenId> prompt;
  std::vector<TokenId> answer;
  std::size_t gen_len = 0;
  std::vector<TrajectoryStep> steps;
  bool oracle_pass = false;

  std::size_t T() const { return steps.size(); }

  /// x_s for s in 1..T+1.
  MaskedState state_at(std::size_t s) const {
    if (s < 1 || s > steps.size() + 1) throw std::out_of_range("trajectory step out of range");
    MaskedState x = fully_masked(prompt, gen_len);
    for (std::size_t k = 0; k + 1 < s; ++k) x.response[steps[k].position] = steps[k].token;
    return x;
  }

  std::vector<TokenId> final_response() const { return state_at(steps.size() + 1).response; }

  /// Step (1-based) at which each response slot is revealed.
  std::vector<std::size_t> reveal_steps() const {
    std::vector<std::size_t> r(gen_len, 0);
    for (const auto& st : steps) r.at(st.position) = static_cast<std::size_t>(st.s);
    return r;
  }

  void validate() const {
    if (gen_len == 0 || steps.empty()) throw std::invalid_argument("trajectory has no steps (T = 0)");
    if (steps.size() != gen_len)
      throw std::invalid_argument("trajectory must reveal every slot: T != gen_len");
    std::set<std::size_t> seen;
    for (std::size_t k = 0; k < steps.size(); ++k) {
      const auto& st = steps[k];
      if (st.s != static_cast<int>(k + 1)) throw std::invalid_argument("step indices must be 1..T");
      if (st.position >= gen_len) throw std::invalid_argument("revealed position out of range");
      if (!seen.insert(st.position).second)
        throw std::invalid_argument("position revealed twice in one trajectory");
      if (st.token == tok::kMask) throw std::invalid_argument("trajectory reveals a MASK token");
      if (!(st.confidence > 0.0 && st.confidence <= 1.0))
        throw std::invalid_argument("step confidence must lie in (0, 1]");
    }
  }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// The input the teacher saw at step s (privileged when `answer` is given).
inline MaskedState rollout_input(const Trajectory& traj, std::size_t s, bool privileged,
                                 std::size_t max_len = std::numeric_limits<std::size_t>::max()) {
  const MaskedState x = traj.state_at(s);
  return privileged ? teacher_input(traj.prompt, traj.answer, x, max_len)
                    : student_input(traj.prompt, x);
}

/// Strict one-token-per-step rollout. With `privileged_answer` the teacher
/// sees Concat(q, a, x_s); without it the rollout is the plain greedy decode.
inline Trajectory collect_trajectory(const DenoiserParams& teacher, const PromptAnswerPair& pair,
                                     std::size_t gen_len,
                                     std::optional<std::span<const TokenId>> privileged_answer,
                                     const OracleLookup& oracles = default_oracles()) {
  if (gen_len < 1) throw std::invalid_argument("gen_len must be >= 1");
  Trajectory traj;
  traj.task = pair.task;
  traj.prompt = pair.prompt;
  traj.answer = pair.answer;
  traj.gen_len = gen_len;
  MaskedState x = fully_masked(pair.prompt, gen_len);
  const auto max_len = static_cast<std::size_t>(teacher.config.max_len);
  for (std::size_t s = 1; s <= gen_len; ++s) {
    const MaskedState in = privileged_answer
                               ? teacher_input(pair.prompt, *privileged_answer, x, max_len)
                               : student_input(pair.prompt, x);
    const DenoiserOutput out = denoise_forward(teacher, in);
    const PositionChoice pick = most_confident_masked(out, x);
    traj.steps.push_back({static_cast<int>(s), pick.position, pick.choice.token, pick.choice.confidence});
    x.response[pick.position] = pick.choice.token;
  }
  traj.oracle_pass = oracles(pair.task).check(pair.prompt, x.response);
  return traj;
}

/// Privileged rollout conditioned on the pair's own answer.
inline Trajectory collect_trajectory(const DenoiserParams& teacher, const PromptAnswerPair& pair,
                                     std::size_t gen_len) {
  return collect_trajectory(teacher, pair, gen_len, std::span<const TokenId>(pair.answer));
}

struct FilterResult {
  std::vector<Trajectory> kept;
  std::size_t kept_count = 0;
  std::size_t dropped_count = 0;
};

inline FilterResult filter_trajectories(std::span<const Trajectory> trajs,
                                        const OracleLookup& oracle = default_oracles()) {
  FilterResult r;
  for (const auto& t : trajs) {
    if (oracle(t.task).check(t.prompt, t.final_response())) {
      r.kept.push_back(t);
      ++r.kept_count;
    } else {
      ++r.dropped_count;
    }
  }
  return r;
}

inline FilterResult filter_trajectories(std::span<const Trajectory> trajs, const TaskOracle& oracle) {
  return filter_trajectories(trajs, [&](TaskKind) { return oracle; });
}

// ---------------------------------------------------------------------------
// Trajectory files: one JSON object per line.

inline nlohmann::json to_json(const Trajectory& t) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& st : t.steps)
    steps.push_back({{"s", st.s}, {"pos", st.position}, {"token", st.token}, {"conf", st.confidence}});
  return {{"task", task_name(t.task)}, {"prompt_ids", t.prompt},   {"answer_ids", t.answer},
          {"gen_len", t.gen_len},      {"steps", steps},           {"final_ids", t.final_response()},
          {"oracle_pass", t.oracle_pass}};
}

inline Trajectory trajectory_from_json(const nlohmann::json& j) {
  Trajectory t;
  t.task = parse_task(j.at("task").get<std::string>());
  t.prompt = j.at("prompt_ids").get<std::vector<TokenId>>();
  t.answer = j.at("answer_ids").get<std::vector<TokenId>>();
  t.gen_len = j.at("gen_len").get<std::size_t>();
  for (const auto& st : j.at("steps"))
    t.steps.push_back({st.at("s").get<int>(), st.at("pos").get<std::size_t>(),
                       st.at("token").get<TokenId>(), st.at("conf").get<double>()});
  t.oracle_pass = j.at("oracle_pass").get<bool>();
  t.validate();
  if (j.at("final_ids").get<std::vector<TokenId>>() != t.final_response())
    throw std::invalid_argument("final_ids disagree with the recorded steps");
  return t;
}

inline void save_trajectories(std::span<const Trajectory> trajs, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const auto& t : trajs) f << to_json(t).dump() << '\n';
  if (!f) throw std::runtime_error("failed writing '" + path + "'");
}

inline std::vector<Trajectory> load_trajectories(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open trajectory file '" + path + "'");
  std::vector<Trajectory> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(trajectory_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace tad
