#pragma once

// Sampling-based model-predictive control (MPPI) over per-effector-group
// translations, scored by a normalized Chamfer + Hausdorff goal cost.

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pformer/model.hpp"
#include "pformer/pointcloud_metrics.hpp"
#include "pformer/simulator.hpp"

namespace pformer {

struct PlanConfig {
  int horizon = 10;           // H
  int samples = 64;           // K
  double temperature = 0.1;   // lambda
  double noise_std = 0.01;    // sigma, meters per step per action dim
  // Elementwise action bounds per effector group (x, y, z), meters per step.
  std::array<double, 3> action_lower{-0.0105, -0.0105, 0.0};
  std::array<double, 3> action_upper{0.0105, 0.0105, 0.0};
  double terminal_weight = 2.0;
  double collision_penalty = 10.0;    // effector below the floor
  double infeasible_penalty = 10.0;   // effector outside the workspace / rejected action
  int iterations = 1;                 // MPPI refinements per replan
  double goal_threshold = 0.3;        // closed loop stops below this goal term

  void validate() const;
  // Bounds that keep every group's motion within the simulator's speed limit;
  // planar tasks get zero vertical range.
  static PlanConfig for_task(const TaskSpec& spec);
};

struct CostSpec {
  PointSet target;
  double goal_weight = 1.0;
  double normalizer = 1.0;  // (CD+HD)(initial, target), fixed at control start
  bool normalized = true;   // false when the initial distance was zero
  Workspace workspace;

  explicit CostSpec(PointSet target_points) : target(std::move(target_points)) {}
  // Normalizes by the initial distance; falls back to the raw distance when
  // the initial state already matches the target.
  static CostSpec from_initial(PointSet target, const PointSet& initial, const Workspace& workspace);
};

// Goal term: goal_weight * (chamfer + exact hausdorff)(pred, target) / normalizer.
double goal_cost(const PointSet& pred, const CostSpec& spec);

// Predicted object positions after each of a sequence of group actions.
struct DynamicsPrediction {
  std::vector<Mat> objects;    // per step, N×3
  std::vector<Mat> effectors;  // per step, M×3
  int rejected_step = -1;      // first step the dynamics refused, or -1
};

class DynamicsModel {
 public:
  virtual ~DynamicsModel() = default;
  // actions[j] is a groups×3 motion.
  virtual DynamicsPrediction predict(const SceneState& scene, std::span<const Mat> actions) const = 0;
  virtual std::string name() const = 0;
};

// Uses only the observable particle set of the scene.
class LearnedDynamics : public DynamicsModel {
 public:
  explicit LearnedDynamics(ModelParams params) : params_(std::move(params)) {}
  DynamicsPrediction predict(const SceneState& scene, std::span<const Mat> actions) const override;
  std::string name() const override { return "learned"; }

 private:
  ModelParams params_;
};

// Ground-truth simulator as the model.
class SimulatorDynamics : public DynamicsModel {
 public:
  explicit SimulatorDynamics(TaskSpec spec) : spec_(std::move(spec)) {}
  DynamicsPrediction predict(const SceneState& scene, std::span<const Mat> actions) const override;
  std::string name() const override { return "simulator"; }

 private:
  TaskSpec spec_;
};

// Objects never move.
class PersistenceDynamics : public DynamicsModel {
 public:
  DynamicsPrediction predict(const SceneState& scene, std::span<const Mat> actions) const override;
  std::string name() const override { return "persistence"; }
};

struct PlanResult {
  Mat actions;                       // H × (groups*3), row j = step j
  std::vector<double> sample_costs;  // last iteration
  std::vector<double> weights;       // last iteration
  double weighted_cost = 0.0;        // sum_k w_k c_k, last iteration
  double mean_cost = 0.0;            // (1/K) sum_k c_k, last iteration
  double min_cost = 0.0;
  std::vector<double> nominal_cost_trace;  // weighted cost per iteration
  int feasible_samples = 0;
};

class PlanningFailed : public std::runtime_error {
 public:
  PlanningFailed(const std::string& what, PlanResult best) : std::runtime_error(what), best_(std::move(best)) {}
  const PlanResult& best() const { return best_; }

 private:
  PlanResult best_;
};

// Cost of one action sequence (H × groups*3) and whether a penalty fired.
struct SequenceCost {
  double cost = 0.0;
  bool feasible = true;
};
SequenceCost score_sequence(const DynamicsModel& model, const SceneState& scene, const Mat& actions,
                            const CostSpec& cost, const PlanConfig& cfg);

// Clips every row of a sequence to the configured bounds.
Mat clip_actions(const Mat& actions, const PlanConfig& cfg);

// Drops the first step and appends a zero action.
Mat shift_plan(const Mat& actions);

PlanResult mppi_plan(const DynamicsModel& model, const SceneState& scene, const CostSpec& cost,
                     const PlanConfig& cfg, const Mat& nominal, std::uint64_t seed);

struct ControlStep {
  int step = 0;
  double goal = 0.0;  // goal term after executing the action
  double min_cost = 0.0, mean_cost = 0.0, weighted_cost = 0.0;
  Mat action;         // groups×3
  bool rejected = false;
};

struct ClosedLoopResult {
  std::vector<SceneState> states;  // states[0] is the start
  std::vector<ControlStep> log;
  double initial_goal = 0.0;
  double final_goal = 0.0;
  bool success = false;
  bool normalized = true;
  int rejections = 0;
};

ClosedLoopResult closed_loop_control(const SceneState& start, const TaskSpec& spec, const DynamicsModel& model,
                                     const CostSpec& cost, const PlanConfig& cfg, int max_steps,
                                     std::uint64_t seed);

std::string control_log_csv(const ClosedLoopResult& result);

// Box-push goal: the box translated by `distance` along the pusher-to-box
// direction and rotated by `rotation` radians.
Mat box_push_target(const SceneState& scene, double distance, double rotation);

}  // namespace pformer
