#include "tad/distill.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace tad;
using fixture::random_model;
using fixture::tiny_config;

namespace {

/// Reveals order[k] at step k+1; slot i holds letter(i).
Trajectory ordered_trajectory(std::vector<std::size_t> order) {
  Trajectory t;
  t.task = TaskKind::kCopy;
  t.gen_len = order.size();
  t.prompt = {tok::kCopy};
  for (std::size_t i = 0; i < order.size(); ++i) {
    t.prompt.push_back(tok::letter(static_cast<int>(i)));
    t.answer.push_back(tok::letter(static_cast<int>(i)));
  }
  for (std::size_t k = 0; k < order.size(); ++k)
    t.steps.push_back({static_cast<int>(k + 1), order[k], tok::letter(static_cast<int>(order[k])), 0.5});
  t.oracle_pass = true;
  return t;
}

std::vector<Trajectory> rollouts(const DenoiserParams& teacher, std::size_t n, std::uint64_t seed) {
  TaskSpec spec;
  spec.kind = TaskKind::kCopy;
  spec.gen_len = 4;
  spec.letters = 4;
  spec.max_len = 3;
  Rng rng(seed);
  std::vector<Trajectory> out;
  for (const auto& p : generate_corpus(spec, n, rng)) out.push_back(collect_trajectory(teacher, p, 4));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Partition.

TEST(Partition, SplitsMaskedSlotsByRevealStep) {
  // reveal steps: slot0 -> 2, slot1 -> 3, slot2 -> 1, slot3 -> 4
  const Trajectory t = ordered_trajectory({2, 0, 1, 3});
  const Partition p = partition_masked(t, 2, 2);
  EXPECT_EQ(p.near, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(p.near_labels, (std::vector<TokenId>{tok::letter(0), tok::letter(1)}));
  EXPECT_EQ(p.distant, (std::vector<std::size_t>{3}));
}

TEST(Partition, FirstStepWithUnitWindowHasOneNearSlot) {
  const Trajectory t = ordered_trajectory({2, 0, 1, 3});
  const Partition p = partition_masked(t, 1, 1);
  EXPECT_EQ(p.near, (std::vector<std::size_t>{2}));
  EXPECT_EQ(p.distant.size(), 3u);
}

TEST(Partition, ZeroWindowMakesEverythingDistant) {
  const Trajectory t = ordered_trajectory({1, 0, 2});
  const Partition p = partition_masked(t, 1, 0);
  EXPECT_TRUE(p.near.empty());
  EXPECT_EQ(p.distant.size(), 3u);
}

TEST(Partition, WideWindowLeavesNothingDistant) {
  const Trajectory t = ordered_trajectory({1, 0, 2, 3});
  for (std::size_t s = 1; s <= 4; ++s) {
    const Partition p = partition_masked(t, s, 4);
    EXPECT_TRUE(p.distant.empty());
    EXPECT_EQ(p.near.size(), 4 - s + 1);
  }
}

TEST(Partition, LastStepHasOnlyTheFinalSlot) {
  const Trajectory t = ordered_trajectory({1, 0, 2});
  const Partition p = partition_masked(t, 3, 1);
  EXPECT_EQ(p.near, (std::vector<std::size_t>{2}));
  EXPECT_TRUE(p.distant.empty());
}

TEST(Partition, StepOutsideTrajectoryIsRejected) {
  const Trajectory t = ordered_trajectory({0, 1});
  EXPECT_THROW(partition_masked(t, 0, 1), std::out_of_range);
  EXPECT_THROW(partition_masked(t, 3, 1), std::out_of_range);
}

// ---------------------------------------------------------------------------
// Loss values on fixed outputs.

TEST(NearLoss, ZeroWhenStudentIsCertainAndRight) {
  std::vector<double> row(16, 0.0);
  row[5] = 1.0;
  const auto out = DenoiserOutput::from_probabilities({row, row});
  const Partition p{{0, 1}, {5, 5}, {}};
  EXPECT_NEAR(near_loss(out, p), 0.0, 1e-12);
}

TEST(NearLoss, UniformStudentGivesLogV) {
  const auto out = DenoiserOutput::from_probabilities({std::vector<double>(16, 1.0 / 16)});
  EXPECT_NEAR(near_loss(out, Partition{{0}, {3}, {}}), std::log(16.0), 1e-12);
  EXPECT_NEAR(std::log(16.0), 2.7726, 1e-4);
}

TEST(NearLoss, EmptyNearSetIsZeroAndMissingLabelIsAnError) {
  const auto out = DenoiserOutput::from_probabilities({std::vector<double>(4, 0.25)});
  EXPECT_EQ(near_loss(out, Partition{}), 0.0);
  EXPECT_THROW(near_loss(out, Partition{{0}, {}, {}}), std::invalid_argument);
}

TEST(DistantLoss, ZeroForIdenticalRows) {
  const auto out = DenoiserOutput::from_probabilities({{0.2, 0.3, 0.5}, {0.6, 0.3, 0.1}});
  EXPECT_NEAR(distant_loss(out, out, Partition{{}, {}, {0, 1}}, 1.0), 0.0, 1e-15);
  EXPECT_NEAR(distant_loss(out, out, Partition{{}, {}, {0, 1}}, 2.5), 0.0, 1e-15);
}

TEST(DistantLoss, KnownBinaryValue) {
  const auto teacher = DenoiserOutput::from_probabilities({{0.5, 0.5}});
  const auto student = DenoiserOutput::from_probabilities({{0.75, 0.25}});
  const double want = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
  EXPECT_NEAR(distant_loss(teacher, student, Partition{{}, {}, {0}}, 1.0), want, 1e-12);
  EXPECT_NEAR(want, 0.1438, 1e-4);
}

TEST(DistantLoss, HighTemperatureFlattensBothRows) {
  const auto teacher = DenoiserOutput::from_probabilities({{0.5, 0.5}});
  const auto student = DenoiserOutput::from_probabilities({{0.75, 0.25}});
  const double tau = 100.0;
  const double scaled = distant_loss(teacher, student, Partition{{}, {}, {0}}, tau);
  // The unscaled KL between the softened rows vanishes ...
  EXPECT_LT(scaled / (tau * tau), 1e-3);
  // ... while tau^2 * KL tends to (logit gap)^2 / 8 for two classes.
  EXPECT_NEAR(scaled, std::pow(std::log(3.0), 2) / 8.0, 1e-4);
}

TEST(DistantLoss, RejectsNonPositiveTemperature) {
  const auto out = DenoiserOutput::from_probabilities({{0.5, 0.5}});
  EXPECT_THROW(distant_loss(out, out, Partition{{}, {}, {0}}, 0.0), std::invalid_argument);
}

TEST(DistantLoss, ZeroTeacherProbabilitiesContributeNothing) {
  const auto teacher = DenoiserOutput::from_probabilities({{1.0, 0.0, 0.0}});
  const auto student = DenoiserOutput::from_probabilities({{0.5, 0.25, 0.25}});
  const double kl = distant_loss(teacher, student, Partition{{}, {}, {0}}, 1.0);
  EXPECT_TRUE(std::isfinite(kl));
  EXPECT_NEAR(kl, std::log(2.0), 1e-9);
}

// ---------------------------------------------------------------------------
// Item loss on real models.

TEST(ItemLoss, IsAffineInLambda) {
  const DenoiserParams teacher = random_model(tiny_config(), 41);
  const DenoiserParams student = random_model(tiny_config(), 42);
  const Trajectory t = rollouts(teacher, 1, 43).front();
  const auto l0 = tad_item_loss(student, teacher, t, 1, 1, 0.0, 1.0);
  const auto l1 = tad_item_loss(student, teacher, t, 1, 1, 1.0, 1.0);
  const auto l2 = tad_item_loss(student, teacher, t, 1, 1, 2.0, 1.0);
  EXPECT_GT(l1.distant, 0.0);
  EXPECT_DOUBLE_EQ(l0.total, l0.near);
  EXPECT_NEAR(l1.total - l0.total, l2.total - l1.total, 1e-12);
  EXPECT_NEAR(l1.total, l1.near + l1.distant, 1e-12);
}

TEST(ItemLoss, NonNegativeEverywhere) {
  const DenoiserParams teacher = random_model(tiny_config(), 44);
  const DenoiserParams student = random_model(tiny_config(), 45);
  for (const auto& t : rollouts(teacher, 10, 46))
    for (std::size_t s = 1; s <= t.T(); ++s)
      for (std::size_t delta : {0u, 1u, 2u, 4u}) {
        const auto l = tad_item_loss(student, teacher, t, s, delta, 0.7, 1.3);
        EXPECT_GE(l.near, 0.0);
        EXPECT_GE(l.distant, 0.0);
      }
}

TEST(ItemLoss, GradientMatchesFiniteDifferences) {
  const DenoiserParams teacher = random_model(tiny_config(), 47);
  DenoiserParams student = random_model(tiny_config(), 48);
  const Trajectory t = rollouts(teacher, 1, 49).front();
  DenoiserParams grads = DenoiserParams::zeros_like(student);
  tad_item_loss(student, teacher, t, 2, 1, 0.8, 1.5, &grads);

  std::vector<Tensor*> ps, gs;
  DenoiserParams::visit(student, [&](auto, Tensor& v) { ps.push_back(&v); });
  DenoiserParams::visit(grads, [&](auto, Tensor& v) { gs.push_back(&v); });
  Rng pick(50);
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t k = 0; k < ps.size(); ++k)
    for (int j = 0; j < 2; ++j) {
      const std::size_t i = pick.below(ps[k]->size());
      const double fd = fixture::central_difference(
          [&] { return tad_item_loss(student, teacher, t, 2, 1, 0.8, 1.5).total; }, (*ps[k])[i]);
      const double a = (*gs[k])[i];
      diff += (a - fd) * (a - fd);
      na += a * a;
      nn += fd * fd;
    }
  EXPECT_LT(std::sqrt(diff) / std::max(std::sqrt(na), std::sqrt(nn)), 1e-6);
}

// ---------------------------------------------------------------------------
// Training.

TEST(Distill, TeacherIsNeverModified) {
  const DenoiserParams teacher = random_model(tiny_config(), 51);
  const DenoiserParams copy = teacher;
  DistillConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 4;
  Rng rng(52);
  const auto r = tad_train(random_model(tiny_config(), 53), teacher, rollouts(teacher, 8, 54), cfg, rng);
  EXPECT_TRUE(teacher == copy);
  EXPECT_FALSE(r.student == teacher);
  EXPECT_EQ(r.losses.size(), 4u);
}

TEST(Distill, ZeroLearningRateLeavesStudentUnchanged) {
  const DenoiserParams teacher = random_model(tiny_config(), 55);
  const DenoiserParams student = random_model(tiny_config(), 56);
  DistillConfig cfg;
  cfg.epochs = 1;
  cfg.optimizer.lr = 0.0;
  Rng rng(57);
  EXPECT_TRUE(tad_train(student, teacher, rollouts(teacher, 6, 58), cfg, rng).student == student);
}

TEST(Distill, LossDecreasesWhenStudentStartsFromScratch) {
  const DenoiserParams teacher = random_model(tiny_config(), 59, 2.0);
  Rng init(60);
  const DenoiserParams student = DenoiserParams::initialize(tiny_config(), init);
  DistillConfig cfg;
  cfg.epochs = 6;
  cfg.batch = 8;
  cfg.optimizer.lr = 5e-3;
  Rng rng(61);
  const auto r = tad_train(student, teacher, rollouts(teacher, 32, 62), cfg, rng);
  const std::size_t n = r.losses.size();
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    head += r.losses[i].total;
    tail += r.losses[n - 1 - i].total;
  }
  EXPECT_LT(tail, head);
}

TEST(Distill, NonFiniteStudentAbortsNamingTheTrajectory) {
  const DenoiserParams teacher = random_model(tiny_config(), 63);
  DenoiserParams student = teacher;
  student.b_out[0] = std::nan("");
  DistillConfig cfg;
  cfg.epochs = 1;
  Rng rng(64);
  try {
    tad_train(student, teacher, rollouts(teacher, 3, 65), cfg, rng);
    FAIL() << "expected divergence";
  } catch (const DistillationDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("trajectory"), std::string::npos) << e.what();
  }
}

TEST(Distill, RejectsMismatchedArchitecturesAndEmptyInput) {
  const DenoiserParams teacher = random_model(tiny_config(), 66);
  DistillConfig cfg;
  Rng rng(67);
  EXPECT_THROW(tad_train(teacher, teacher, {}, cfg, rng), std::invalid_argument);
  EXPECT_THROW(tad_train(random_model(tiny_config(1, 32, 2, 32), 68), teacher, rollouts(teacher, 2, 69), cfg, rng),
               std::invalid_argument);
}

TEST(Distill, ObjectiveWindows) {
  DistillConfig c;
  c.delta = 3;
  c.lambda = 0.5;
  c.objective = DistillObjective::kTad;
  EXPECT_EQ(effective_window(c, 8), (std::pair<std::size_t, double>{3, 0.5}));
  c.objective = DistillObjective::kGlobalCe;
  EXPECT_EQ(effective_window(c, 8).first, 8u);
  c.objective = DistillObjective::kNearOnly;
  EXPECT_EQ(effective_window(c, 8).second, 0.0);
  c.objective = DistillObjective::kKlOnly;
  EXPECT_EQ(effective_window(c, 8).first, 0u);
  EXPECT_EQ(parse_objective("kl_only"), DistillObjective::kKlOnly);
  EXPECT_THROW(parse_objective("bogus"), std::invalid_argument);
}

TEST(Distill, ConfigValidation) {
  DistillConfig c;
  c.delta = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.tau = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.lambda = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Window calibration.

TEST(Calibration, DeltaFromCurve) {
  const std::vector<double> curve = {0.9, 0.6, 0.45, 0.3, 0.15};
  EXPECT_EQ(delta_from_curve(curve, 0.5, 5), 3u);
  EXPECT_EQ(delta_from_curve(curve, 0.2, 5), 5u);
  const std::vector<double> flat(5, 0.8);
  EXPECT_EQ(delta_from_curve(flat, 0.5, 5), 5u);
}

TEST(Calibration, CountsCoverEveryLookAheadDistance) {
  const DenoiserParams teacher = random_model(tiny_config(), 70);
  const auto trajs = rollouts(teacher, 5, 71);
  Rng rng(72);
  const DeltaCalibration c = calibrate_delta(teacher, trajs, 40, rng);
  ASSERT_EQ(c.curve.size(), 4u);
  EXPECT_GT(c.counts[0], 0u);
  EXPECT_EQ(c.counts[0], 40u);
  for (std::size_t d = 1; d < 4; ++d) EXPECT_LE(c.counts[d], c.counts[d - 1]);
  for (std::size_t d = 0; d < 4; ++d)
    if (c.counts[d]) EXPECT_TRUE(c.curve[d] > 0.0 && c.curve[d] <= 1.0);
  EXPECT_GE(c.delta_speed, c.delta_quality);
}

TEST(Calibration, TeacherScoresItsOwnNextTokenAtItsRecordedConfidence) {
  // On unprivileged rollouts, d = 1 reads exactly the confidence the teacher
  // recorded when it picked that token.
  const DenoiserParams m = random_model(tiny_config(), 73);
  TaskSpec spec;
  spec.kind = TaskKind::kCopy;
  spec.gen_len = 4;
  spec.letters = 4;
  spec.max_len = 3;
  Rng data(74);
  const auto p = generate_corpus(spec, 1, data).front();
  const Trajectory t = collect_trajectory(m, p, 4, std::nullopt);
  Rng rng(75);
  const DeltaCalibration c = calibrate_delta(m, std::vector<Trajectory>{t}, 1, rng);
  double expect_any = 0.0;
  bool matched = false;
  for (const auto& st : t.steps) {
    expect_any = st.confidence;
    if (std::abs(c.curve[0] - expect_any) < 1e-12) matched = true;
  }
  EXPECT_TRUE(matched);
}
