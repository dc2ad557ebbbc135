#include <gtest/gtest.h>

#include <random>

#include "pformer/errors.hpp"
#include "pformer/planner.hpp"

using namespace pformer;

namespace {

struct BoxProblem {
  TaskSpec spec = TaskSpec::defaults(TaskId::kBoxPush);
  SceneState scene;
  CostSpec cost;
  PlanConfig cfg;

  explicit BoxProblem(std::uint64_t seed, double distance = 0.1, double rotation = 0.3)
      : scene(create_scene(spec, seed)),
        cost(CostSpec::from_initial(PointSet(box_push_target(scene, distance, rotation)),
                                    PointSet(scene.particles().object_positions()), spec.workspace)),
        cfg(PlanConfig::for_task(spec)) {
    cfg.samples = 16;
    cfg.horizon = 5;
  }
  Mat zero_plan() const { return Mat::Zero(cfg.horizon, 3); }
};

}  // namespace

TEST(PlanConfigCheck, TaskBoundsRespectSpeedLimit) {
  for (TaskId t : {TaskId::kBoxPush, TaskId::kClothGather, TaskId::kRopeSweep}) {
    const TaskSpec spec = TaskSpec::defaults(t);
    const PlanConfig c = PlanConfig::for_task(spec);
    Vec3 corner;
    for (int k = 0; k < 3; ++k) corner[k] = std::max(std::abs(c.action_lower[k]), std::abs(c.action_upper[k]));
    EXPECT_LE(corner.norm(), spec.max_step());
    const bool planar = t != TaskId::kClothGather;
    EXPECT_EQ(c.action_upper[2] == 0.0, planar);
  }
  PlanConfig bad;
  bad.temperature = 0;
  EXPECT_THROW(bad.validate(), InvalidInput);
  bad = PlanConfig{};
  bad.action_lower[0] = 1;
  EXPECT_THROW(bad.validate(), InvalidInput);
}

TEST(Cost, NormalizedAtStartAndZeroTargetFallback) {
  BoxProblem p(100);
  const PointSet start(p.scene.particles().object_positions());
  EXPECT_NEAR(goal_cost(start, p.cost), 1.0, 1e-12);
  EXPECT_TRUE(p.cost.normalized);
  const CostSpec same = CostSpec::from_initial(start, start, p.spec.workspace);
  EXPECT_FALSE(same.normalized);
  EXPECT_EQ(same.normalizer, 1.0);
  EXPECT_EQ(goal_cost(start, same), 0.0);
}

TEST(Actions, ClipAndShift) {
  PlanConfig c;
  Mat a(2, 3);
  a << 1, -1, 0.5, 0.001, 0.002, 0;
  const Mat clipped = clip_actions(a, c);
  EXPECT_EQ(clipped(0, 0), c.action_upper[0]);
  EXPECT_EQ(clipped(0, 1), c.action_lower[1]);
  EXPECT_EQ(clipped(0, 2), 0.0);
  EXPECT_EQ(clipped.row(1), a.row(1));
  const Mat shifted = shift_plan(a);
  EXPECT_EQ(shifted.row(0), a.row(1));
  EXPECT_TRUE(shifted.row(1).isZero());
}

TEST(Mppi, ZeroNoiseReturnsNominal) {
  BoxProblem p(100);
  p.cfg.noise_std = 0.0;
  Mat nominal = Mat::Constant(p.cfg.horizon, 3, 0.004);
  nominal.col(2).setZero();
  const PlanResult r = mppi_plan(SimulatorDynamics(p.spec), p.scene, p.cost, p.cfg, nominal, 1);
  EXPECT_EQ(r.actions, nominal);
  EXPECT_DOUBLE_EQ(r.weighted_cost, r.mean_cost);
  EXPECT_DOUBLE_EQ(r.min_cost, r.mean_cost);
}

TEST(Mppi, HugeTemperatureGivesSampleMean) {
  BoxProblem p(101);
  p.cfg.temperature = 1e6;
  const Mat nominal = p.zero_plan();
  const std::uint64_t seed = 42;
  const PlanResult r = mppi_plan(PersistenceDynamics(), p.scene, p.cost, p.cfg, nominal, seed);
  // Re-draw the same samples: standard normal per entry, row-major, scaled.
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Mat mean = Mat::Zero(p.cfg.horizon, 3);
  for (int k = 0; k < p.cfg.samples; ++k) {
    Mat eps(p.cfg.horizon, 3);
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = p.cfg.noise_std * g(rng);
    mean += clip_actions(nominal + eps, p.cfg) / p.cfg.samples;
  }
  EXPECT_LE((r.actions - mean).cwiseAbs().maxCoeff(), 1e-6);
  for (double w : r.weights) EXPECT_NEAR(w, 1.0 / p.cfg.samples, 1e-6);
}

TEST(Mppi, SoftminDominanceAndBounds) {
  BoxProblem p(102);
  const SimulatorDynamics sim(p.spec);
  Mat nominal = p.zero_plan();
  for (int call = 0; call < 5; ++call) {
    const PlanResult r = mppi_plan(sim, p.scene, p.cost, p.cfg, nominal, 7 + call);
    EXPECT_LE(r.weighted_cost, r.mean_cost + 1e-12);
    EXPECT_GE(r.weighted_cost, r.min_cost - 1e-12);
    double wsum = 0;
    for (double w : r.weights) wsum += w;
    EXPECT_NEAR(wsum, 1.0, 1e-12);
    EXPECT_EQ(clip_actions(r.actions, p.cfg), r.actions);
    nominal = shift_plan(r.actions);
  }
}

TEST(Mppi, SameSeedSamePlan) {
  BoxProblem p(103);
  const SimulatorDynamics sim(p.spec);
  const PlanResult a = mppi_plan(sim, p.scene, p.cost, p.cfg, p.zero_plan(), 3);
  const PlanResult b = mppi_plan(sim, p.scene, p.cost, p.cfg, p.zero_plan(), 3);
  EXPECT_EQ(a.actions, b.actions);
  EXPECT_EQ(a.sample_costs, b.sample_costs);
  EXPECT_NE(mppi_plan(sim, p.scene, p.cost, p.cfg, p.zero_plan(), 4).actions, a.actions);
}

TEST(Mppi, RejectsWrongNominalShape) {
  BoxProblem p(100);
  EXPECT_THROW(mppi_plan(PersistenceDynamics(), p.scene, p.cost, p.cfg, Mat::Zero(2, 3), 0), InvalidShape);
}

TEST(Scoring, PersistenceCostIsConstant) {
  BoxProblem p(100);
  const SequenceCost c = score_sequence(PersistenceDynamics(), p.scene, p.zero_plan(), p.cost, p.cfg);
  EXPECT_TRUE(c.feasible);
  EXPECT_NEAR(c.cost, (p.cfg.horizon + p.cfg.terminal_weight) * 1.0, 1e-12);
}

TEST(Scoring, LeavingWorkspaceIsPenalized) {
  BoxProblem p(100);
  p.cfg.action_lower = {-1, -1, 0};
  p.cfg.action_upper = {1, 1, 0};
  // Walk far enough to cross the low-x wall.
  p.cfg.horizon = 80;
  Mat away = Mat::Zero(80, 3);
  away.col(0).setConstant(-0.01);
  const SequenceCost c = score_sequence(SimulatorDynamics(p.spec), p.scene, away, p.cost, p.cfg);
  EXPECT_FALSE(c.feasible);
  const SequenceCost l = score_sequence(PersistenceDynamics(), p.scene, away, p.cost, p.cfg);
  EXPECT_FALSE(l.feasible);
}

TEST(ClosedLoop, TargetEqualToStartSucceedsImmediately) {
  BoxProblem p(100);
  const PointSet start(p.scene.particles().object_positions());
  const CostSpec same = CostSpec::from_initial(start, start, p.spec.workspace);
  const ClosedLoopResult r = closed_loop_control(p.scene, p.spec, PersistenceDynamics(), same, p.cfg, 10, 0);
  EXPECT_TRUE(r.success);
  EXPECT_TRUE(r.log.empty());
  EXPECT_FALSE(r.normalized);
}

TEST(ClosedLoop, SimulatorModelReachesBoxGoal) {
  BoxProblem p(100);
  p.cfg = PlanConfig::for_task(p.spec);
  const ClosedLoopResult r = closed_loop_control(p.scene, p.spec, SimulatorDynamics(p.spec), p.cost, p.cfg, 30, 1);
  EXPECT_TRUE(r.success) << "final goal " << r.final_goal;
  EXPECT_LT(r.final_goal, 0.3);
  EXPECT_LE(r.log.size(), 30u);
  for (const ControlStep& s : r.log) EXPECT_LE(s.weighted_cost, s.mean_cost + 1e-12);
  const std::string csv = control_log_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,goal,min_cost,mean_cost,weighted_cost,rejected,action");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(r.log.size()) + 1);
}

TEST(ClosedLoop, PersistenceModelCannotPlan) {
  BoxProblem p(100);
  const ClosedLoopResult r = closed_loop_control(p.scene, p.spec, PersistenceDynamics(), p.cost, p.cfg, 5, 1);
  EXPECT_FALSE(r.success);
  EXPECT_NEAR(r.initial_goal, 1.0, 1e-12);
}

TEST(Target, BoxTargetIsRigidMotionOfBox) {
  BoxProblem p(100);
  const Mat start = p.scene.particles().object_positions();
  const Mat target = box_push_target(p.scene, 0.1, 0.3);
  ASSERT_EQ(target.rows(), start.rows());
  for (Eigen::Index i = 0; i < start.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < start.rows(); ++j) {
      EXPECT_NEAR((target.row(i) - target.row(j)).norm(), (start.row(i) - start.row(j)).norm(), 1e-12);
    }
  }
  const Mat moved = box_push_target(p.scene, 0.1, 0.0);
  for (Eigen::Index i = 0; i < start.rows(); ++i) EXPECT_NEAR((moved.row(i) - start.row(i)).norm(), 0.1, 1e-12);
  EXPECT_LE((box_push_target(p.scene, 0, 0) - start).cwiseAbs().maxCoeff(), 1e-12);
}
