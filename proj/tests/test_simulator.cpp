#include <gtest/gtest.h>

#include <cmath>

#include "pformer/errors.hpp"
#include "pformer/simulator.hpp"

using namespace pformer;

namespace {

constexpr TaskId kAllTasks[] = {TaskId::kBoxPush, TaskId::kRope,        TaskId::kGranular,
                                TaskId::kCloth,   TaskId::kClothGather, TaskId::kRopeSweep};

// Scene states of a generated episode, recovered by replaying its actions.
std::vector<SceneState> replay(const TaskSpec& spec, int horizon, std::uint64_t seed, EpisodeRecord* out = nullptr) {
  EpisodeRecord rec = generate_episode_record(spec, horizon, seed);
  std::vector<SceneState> states{create_scene(spec, derive_seed(seed, 0))};
  for (const Mat& a : rec.group_actions) states.push_back(step(states.back(), expand_action(states.back(), a), spec));
  if (out) *out = std::move(rec);
  return states;
}

double kinetic_proxy(const SceneState& a, const SceneState& b) { return (b.objects - a.objects).squaredNorm(); }

// Puts the single pusher at `anchor` (xy), keeping its height and shape.
void place_pusher(SceneState& s, const Eigen::Vector2d& anchor) {
  const Vec3 shift(anchor.x() - s.anchors[0].x(), anchor.y() - s.anchors[0].y(), 0.0);
  s.anchors[0] += shift;
  for (Eigen::Index i = 0; i < s.effector.rows(); ++i) s.effector.row(i) += shift.transpose();
}

// Pushes the box along its long axis with the pusher offset sideways by
// `lateral` (body frame) and returns the accumulated rotation.
double push_box(double lateral) {
  const TaskSpec spec = TaskSpec::defaults(TaskId::kBoxPush);
  SceneState s = create_scene(spec, 4);
  const RigidBody& b = *s.body;
  const Eigen::Vector2d ax(std::cos(b.theta), std::sin(b.theta)), ay(-ax.y(), ax.x());
  const Eigen::Vector2d c(b.x, b.y);
  place_pusher(s, c - (b.half_x + spec.pusher_radius + 0.003) * ax + lateral * ay);
  const double theta0 = s.body->theta;
  Mat a(1, 3);
  a << 0.8 * spec.max_step() * ax.x(), 0.8 * spec.max_step() * ax.y(), 0.0;
  for (int t = 0; t < 6; ++t) s = step(s, expand_action(s, a), spec);
  return s.body->theta - theta0;
}

}  // namespace

TEST(SimulatorScene, SameSeedIsBitwiseIdentical) {
  for (TaskId task : kAllTasks) {
    const TaskSpec spec = TaskSpec::defaults(task);
    const SceneState a = create_scene(spec, 0), b = create_scene(spec, 0);
    EXPECT_EQ(a.objects, b.objects) << task_name(task);
    EXPECT_EQ(a.effector, b.effector) << task_name(task);
    EXPECT_NE(a.objects, create_scene(spec, 1).objects) << task_name(task);
  }
}

TEST(SimulatorScene, RopeRestLengthArithmetic) {
  TaskSpec spec = TaskSpec::defaults(TaskId::kRope);
  spec.rope_count = 17;
  spec.rope_segment = 0.05;
  spec.workspace.x_max = 2.0;
  spec.workspace.y_max = 2.0;
  const SceneState s = create_scene(spec, 0);
  ASSERT_EQ(s.rope_links.size(), 16u);
  double total = 0;
  for (const auto& l : s.rope_links) total += l.rest;
  EXPECT_NEAR(total, 0.80, 1e-12);
}

TEST(SimulatorScene, GranularStartsWithoutOverlap) {
  TaskSpec spec = TaskSpec::defaults(TaskId::kGranular);
  spec.granular_count = 32;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SceneState s = create_scene(spec, seed);
    for (int i = s.granular.begin; i < s.granular.end(); ++i) {
      for (int j = i + 1; j < s.granular.end(); ++j) {
        EXPECT_GE((s.objects.row(i) - s.objects.row(j)).head<2>().norm(), 2 * spec.granular_radius - 1e-12);
      }
    }
  }
}

TEST(SimulatorScene, OvercrowdedWorkspaceIsRejected) {
  TaskSpec spec = TaskSpec::defaults(TaskId::kGranular);
  spec.granular_count = 5000;
  EXPECT_THROW(create_scene(spec, 0), InvalidInput);
}

TEST(SimulatorInvariants, HoldOnFiftyStepEpisodesOfEveryTask) {
  for (TaskId task : kAllTasks) {
    const TaskSpec spec = TaskSpec::defaults(task);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      for (const SceneState& s : replay(spec, 50, seed)) {
        const SceneDiagnostics d = diagnose(s, spec);
        EXPECT_LE(d.max_rope_strain, 0.01) << task_name(task);
        EXPECT_LE(d.max_rigid_distortion, 1e-9) << task_name(task);
        EXPECT_GE(d.min_z, -1e-9) << task_name(task);
        EXPECT_LE(d.max_granular_overlap, 1e-6) << task_name(task);
      }
    }
  }
}

TEST(SimulatorInvariants, PassiveDissipation) {
  for (TaskId task : kAllTasks) {
    const TaskSpec spec = TaskSpec::defaults(task);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      // Start from a mid-episode state so objects carry residual effects.
      SceneState s = replay(spec, 20, seed).back();
      const Mat zero = Mat::Zero(s.effector.rows(), 3);
      double prev = std::numeric_limits<double>::infinity();
      for (int t = 0; t < 10; ++t) {
        const SceneState next = step(s, zero, spec);
        const double k = kinetic_proxy(s, next);
        EXPECT_LE(k, prev + 1e-18) << task_name(task) << " seed " << seed << " step " << t;
        prev = k;
        s = next;
      }
    }
  }
}

TEST(SimulatorInvariants, SettledSceneStaysAtRest) {
  for (TaskId task : kAllTasks) {
    const TaskSpec spec = TaskSpec::defaults(task);
    SceneState s = create_scene(spec, 2);
    const Mat zero = Mat::Zero(s.effector.rows(), 3);
    for (int t = 0; t < 3; ++t) s = step(s, zero, spec);
    const SceneState next = step(s, zero, spec);
    EXPECT_LE((next.objects - s.objects).cwiseAbs().maxCoeff(), 1e-9) << task_name(task);
    EXPECT_EQ(next.effector, s.effector);
  }
}

TEST(SimulatorEpisode, EffectorPosesIntegrateMotions) {
  for (TaskId task : kAllTasks) {
    const TaskSpec spec = TaskSpec::defaults(task);
    const Episode ep = generate_episode(spec, 12, 5);
    for (int t = 1; t < ep.horizon(); ++t) {
      const ParticleSet f = ep.frame(t);
      const Mat delta = f.effector_positions() - ep.effector_positions(t - 1);
      EXPECT_EQ(Mat(f.motion().bottomRows(f.num_effectors())), delta) << task_name(task);
      EXPECT_TRUE(f.motion().topRows(f.num_objects()).isZero()) << task_name(task);
    }
  }
}

TEST(SimulatorEpisode, TwoFramesRecordOneTransition) {
  const EpisodeRecord rec = generate_episode_record(TaskSpec::defaults(TaskId::kRope), 2, 0);
  EXPECT_EQ(rec.episode.horizon(), 2);
  EXPECT_EQ(rec.group_actions.size(), 1u);
  EXPECT_THROW(generate_episode(TaskSpec::defaults(TaskId::kRope), 1, 0), InvalidInput);
}

TEST(SimulatorEpisode, DatasetDeterminism) {
  const TaskSpec spec = TaskSpec::defaults(TaskId::kGranular);
  const Dataset a = generate_dataset(spec, 3, 10, 11), b = generate_dataset(spec, 3, 10, 11);
  ASSERT_EQ(a.episodes.size(), 3u);
  for (int e = 0; e < 3; ++e) {
    EXPECT_EQ(a.episodes[e].horizon(), 10);
    for (int t = 0; t < 10; ++t) EXPECT_EQ(a.episodes[e].positions[t], b.episodes[e].positions[t]);
  }
  EXPECT_THROW(generate_dataset(spec, 0, 10, 0), InvalidInput);
}

TEST(SimulatorStep, RejectsExcessiveSpeed) {
  const TaskSpec spec = TaskSpec::defaults(TaskId::kBoxPush);
  const SceneState s = create_scene(spec, 0);
  Mat a = Mat::Zero(1, 3);
  a(0, 0) = spec.max_step() * 1.01;
  EXPECT_THROW(step(s, expand_action(s, a), spec), InvalidAction);
  a(0, 0) = spec.max_step() * 0.99;
  EXPECT_NO_THROW(step(s, expand_action(s, a), spec));
}

TEST(SimulatorStep, RejectsSplitGroupMotion) {
  const TaskSpec spec = TaskSpec::defaults(TaskId::kBoxPush);
  const SceneState s = create_scene(spec, 0);
  Mat m = Mat::Zero(s.effector.rows(), 3);
  m(0, 0) = 0.001;
  EXPECT_THROW(step(s, m, spec), InvalidAction);
}

TEST(SimulatorStep, CentralPushTranslatesWithoutRotation) {
  EXPECT_LE(std::abs(push_box(0.0)), 1e-6);
}

TEST(SimulatorStep, OffsetPushRotationSignFollowsCrossProduct) {
  // Contact left of the push line (positive body-frame y): offset x push
  // direction points down, so the box turns clockwise, and vice versa.
  EXPECT_LT(push_box(0.02), -1e-4);
  EXPECT_GT(push_box(-0.02), 1e-4);
}

TEST(TaskSpecConfig, KvRoundTripAndValidation) {
  for (TaskId task : kAllTasks) {
    TaskSpec spec = TaskSpec::defaults(task);
    spec.friction = 0.37;
    spec.dt = 0.05;
    EXPECT_EQ(TaskSpec::from_kv(spec.to_kv()), spec) << task_name(task);
    EXPECT_EQ(task_from_name(task_name(task)), task);
  }
  EXPECT_THROW(task_from_name("juggling"), InvalidInput);
  TaskSpec bad = TaskSpec::defaults(TaskId::kBoxPush);
  bad.dt = 0.0;
  EXPECT_THROW(bad.validate(), InvalidInput);
  bad = TaskSpec::defaults(TaskId::kBoxPush);
  bad.workspace.x_max = bad.workspace.x_min;
  EXPECT_THROW(bad.validate(), InvalidInput);
  bad = TaskSpec::defaults(TaskId::kRope);
  bad.rope_count = 0;
  EXPECT_THROW(bad.validate(), InvalidInput);
}

TEST(DeriveSeed, StreamsDiffer) {
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
  EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
  EXPECT_EQ(derive_seed(9, 3), derive_seed(9, 3));
}
