#pragma once

// Deterministic quasi-static multi-material particle simulator used as the
// ground-truth oracle and data generator.
//
// Everything is position based: rigid boxes move by pose updates resolving
// pusher penetration, ropes and cloth are chains/grids of distance
// constraints, granular media are non-overlapping spheres. Objects respond
// to the effector pose at the start of a step; the effector then moves
// kinematically. The object configuration at t+1 is therefore a function of
// the state at t (positions and the last effector motion).

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pformer/kv_config.hpp"
#include "pformer/particle_set.hpp"
#include "pformer/types.hpp"

namespace pformer {

enum class TaskId { kBoxPush, kRope, kGranular, kCloth, kClothGather, kRopeSweep };

std::string_view task_name(TaskId task);
TaskId task_from_name(std::string_view name);

enum class EffectorKind { kCylinder, kFlatPusher, kGripper };

struct Workspace {
  double x_min = 0.0, x_max = 0.7;
  double y_min = 0.0, y_max = 0.55;
  double z_max = 0.3;

  bool contains(const Vec3& p, double margin = 0.0) const;
  bool operator==(const Workspace&) const = default;
};

struct TaskSpec {
  TaskId task = TaskId::kBoxPush;

  int rigid_count = 0;
  int rope_count = 0;
  int cloth_side = 0;  // cloth particles = side * side
  int granular_count = 0;

  Workspace workspace;
  double friction = 0.5;
  double dt = 0.1;          // seconds per step
  double max_speed = 0.15;  // m/s per effector point
  int solver_iterations = 8;

  int effector_points = 8;
  double pusher_radius = 0.02;   // cylindrical pusher
  double pusher_length = 0.12;   // flat pusher
  double gripper_width = 0.02;   // finger separation

  double box_length = 0.12, box_width = 0.08, box_height = 0.05;
  double rope_segment = 0.015;   // rest length between consecutive rope particles
  double rope_radius = 0.005;
  double cloth_spacing = 0.04;
  double granular_radius = 0.012;

  static TaskSpec defaults(TaskId task);

  int num_objects() const;
  int effector_groups() const;
  EffectorKind effector_kind() const;
  double max_step() const { return max_speed * dt; }

  void validate() const;

  KvConfig to_kv() const;
  // Starts from defaults(task) and overrides any keys present.
  static TaskSpec from_kv(const KvConfig& kv);
  bool operator==(const TaskSpec&) const = default;
};

struct IndexRange {
  int begin = 0;
  int count = 0;
  int end() const { return begin + count; }
  bool contains(int i) const { return i >= begin && i < end(); }
};

struct DistanceConstraint {
  int i = 0, j = 0;
  double rest = 0.0;
};

struct RigidBody {
  Mat body_points;  // N×3: x, y in the body frame, z absolute
  double x = 0.0, y = 0.0, theta = 0.0;
  double half_x = 0.0, half_y = 0.0;
};

// ParticleSet view plus the simulator's hidden state.
struct SceneState {
  Mat objects;                       // N×3
  std::vector<Material> object_materials;
  Mat effector;                      // M×3
  std::vector<int> effector_group;   // group of each effector point
  std::vector<Vec3> anchors;         // per group: pusher center / grasp point
  Mat last_motion;                   // M×3, last commanded effector delta

  IndexRange rigid, rope, cloth, granular;
  std::optional<RigidBody> body;
  std::vector<DistanceConstraint> rope_links;
  std::vector<std::pair<int, int>> rope_pins;  // (object index, group)
  std::vector<DistanceConstraint> cloth_links;
  int cloth_side = 0;
  int cloth_grasp = -1;  // object index pinned to group 0, or -1
  double flat_pusher_angle = 0.0;
  // Squared object motion of the last step if it was undriven, else infinity.
  double passive_motion = std::numeric_limits<double>::infinity();

  ParticleSet particles() const;
  Mat group_anchors() const;  // groups×3
};

SceneState create_scene(const TaskSpec& spec, std::uint64_t seed);

// Advances one step with per-point effector motion (M×3). Points of one
// effector group must share the same motion.
SceneState step(const SceneState& scene, const Mat& ee_motion, const TaskSpec& spec);

// Per-group action (groups×3) to per-point motion (M×3).
Mat expand_action(const SceneState& scene, const Mat& group_motion);

// Invariant residuals, used by tests and the acceptance suite.
struct SceneDiagnostics {
  double max_rope_strain = 0.0;        // max |len - rest| / rest over rope links
  double max_rigid_distortion = 0.0;   // max pairwise distance change vs body frame
  double min_z = 0.0;                  // lowest particle coordinate
  double max_granular_overlap = 0.0;
};
SceneDiagnostics diagnose(const SceneState& scene, const TaskSpec& spec);

// One recorded trajectory: positions and motions for every frame.
struct Episode {
  std::vector<Material> materials;
  std::vector<Mat> positions;  // T of (N+M)×3
  std::vector<Mat> motions;    // T of (N+M)×3

  int horizon() const { return static_cast<int>(positions.size()); }
  ParticleSet frame(int t) const;
  Mat object_positions(int t) const;
  Mat effector_positions(int t) const;
};

struct Dataset {
  TaskSpec spec;
  std::vector<Episode> episodes;
};

struct EpisodeRecord {
  Episode episode;
  std::vector<Mat> group_actions;  // T-1 commanded group motions
};

Episode generate_episode(const TaskSpec& spec, int horizon, std::uint64_t seed);
EpisodeRecord generate_episode_record(const TaskSpec& spec, int horizon, std::uint64_t seed);

// Builds an episode from scene states (frame t = states[t]).
Episode record_episode(const std::vector<SceneState>& states);

Dataset generate_dataset(const TaskSpec& spec, int episodes, int horizon, std::uint64_t seed);

// Per-episode seed derived from a dataset seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace pformer
