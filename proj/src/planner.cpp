#include "pformer/planner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "pformer/errors.hpp"

namespace pformer {
namespace {

int action_dim(const SceneState& scene) { return static_cast<int>(scene.anchors.size()) * 3; }

Mat row_to_groups(const Mat& actions, Eigen::Index row, Eigen::Index groups) {
  Mat a(groups, 3);
  for (Eigen::Index g = 0; g < groups; ++g) a.row(g) = actions.block(row, 3 * g, 1, 3);
  return a;
}

std::vector<Mat> sequence_to_groups(const Mat& actions, Eigen::Index groups) {
  std::vector<Mat> out;
  for (Eigen::Index j = 0; j < actions.rows(); ++j) out.push_back(row_to_groups(actions, j, groups));
  return out;
}

std::vector<Mat> kinematic_effectors(const SceneState& scene, std::span<const Mat> actions) {
  std::vector<Mat> out;
  Mat ee = scene.effector;
  for (const Mat& a : actions) {
    ee = ee + expand_action(scene, a);
    out.push_back(ee);
  }
  return out;
}

}  // namespace

void PlanConfig::validate() const {
  auto fail = [](const std::string& msg) { throw InvalidInput("PlanConfig: " + msg); };
  if (horizon < 1) fail("horizon must be at least 1");
  if (samples < 1) fail("samples must be at least 1");
  if (!(temperature > 0)) fail("temperature must be positive");
  if (!(noise_std >= 0)) fail("noise_std must be non-negative");
  if (iterations < 1) fail("iterations must be at least 1");
  for (int d = 0; d < 3; ++d) {
    if (!(action_lower[static_cast<std::size_t>(d)] <= action_upper[static_cast<std::size_t>(d)])) {
      fail("action bounds are inverted");
    }
  }
  if (!(terminal_weight >= 0) || !(collision_penalty >= 0) || !(infeasible_penalty >= 0)) {
    fail("weights must be non-negative");
  }
}

PlanConfig PlanConfig::for_task(const TaskSpec& spec) {
  PlanConfig c;
  const bool planar = spec.task == TaskId::kBoxPush || spec.task == TaskId::kRope ||
                      spec.task == TaskId::kGranular || spec.task == TaskId::kRopeSweep;
  const double b = 0.9 * spec.max_step() / std::sqrt(planar ? 2.0 : 3.0);
  c.action_lower = {-b, -b, planar ? 0.0 : -b};
  c.action_upper = {b, b, planar ? 0.0 : b};
  return c;
}

CostSpec CostSpec::from_initial(PointSet target, const PointSet& initial, const Workspace& workspace) {
  CostSpec c(std::move(target));
  c.workspace = workspace;
  const double d0 = chamfer_distance(initial, c.target) + hausdorff_distance(initial, c.target);
  if (d0 > 0.0) {
    c.normalizer = d0;
    c.normalized = true;
  } else {
    c.normalizer = 1.0;
    c.normalized = false;
  }
  return c;
}

double goal_cost(const PointSet& pred, const CostSpec& spec) {
  if (!(spec.normalizer > 0)) throw InvalidInput("goal_cost: normalizer must be positive");
  return spec.goal_weight * (chamfer_distance(pred, spec.target) + hausdorff_distance(pred, spec.target)) /
         spec.normalizer;
}

// ---- dynamics --------------------------------------------------------------

DynamicsPrediction LearnedDynamics::predict(const SceneState& scene, std::span<const Mat> actions) const {
  DynamicsPrediction p;
  p.effectors = kinematic_effectors(scene, actions);
  const auto states = rollout(scene.particles(), p.effectors, params_, static_cast<int>(actions.size()));
  for (const auto& s : states) p.objects.push_back(s.object_positions());
  return p;
}

DynamicsPrediction SimulatorDynamics::predict(const SceneState& scene, std::span<const Mat> actions) const {
  DynamicsPrediction p;
  SceneState s = scene;
  for (std::size_t j = 0; j < actions.size(); ++j) {
    if (p.rejected_step < 0) {
      try {
        s = step(s, expand_action(s, actions[j]), spec_);
      } catch (const InvalidAction&) {
        p.rejected_step = static_cast<int>(j);
      }
    }
    p.objects.push_back(s.objects);
    p.effectors.push_back(s.effector);
  }
  return p;
}

DynamicsPrediction PersistenceDynamics::predict(const SceneState& scene, std::span<const Mat> actions) const {
  DynamicsPrediction p;
  p.effectors = kinematic_effectors(scene, actions);
  p.objects.assign(actions.size(), scene.objects);
  return p;
}

// ---- MPPI ------------------------------------------------------------------

Mat clip_actions(const Mat& actions, const PlanConfig& cfg) {
  Mat out = actions;
  for (Eigen::Index j = 0; j < out.rows(); ++j) {
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
      const auto d = static_cast<std::size_t>(c % 3);
      out(j, c) = std::clamp(out(j, c), cfg.action_lower[d], cfg.action_upper[d]);
    }
  }
  return out;
}

Mat shift_plan(const Mat& actions) {
  Mat out = Mat::Zero(actions.rows(), actions.cols());
  if (actions.rows() > 1) out.topRows(actions.rows() - 1) = actions.bottomRows(actions.rows() - 1);
  return out;
}

SequenceCost score_sequence(const DynamicsModel& model, const SceneState& scene, const Mat& actions,
                            const CostSpec& cost, const PlanConfig& cfg) {
  const auto groups = static_cast<Eigen::Index>(scene.anchors.size());
  const std::vector<Mat> seq = sequence_to_groups(actions, groups);
  const DynamicsPrediction pred = model.predict(scene, seq);
  SequenceCost out;
  const Workspace& ws = cost.workspace;
  for (std::size_t j = 0; j < seq.size(); ++j) {
    const double g = goal_cost(PointSet(pred.objects[j]), cost);
    out.cost += g;
    if (j + 1 == seq.size()) out.cost += cfg.terminal_weight * g;
    const Mat& ee = pred.effectors[j];
    if (ee.col(2).minCoeff() < 0.0) {
      out.cost += cfg.collision_penalty * cost.goal_weight;
      out.feasible = false;
    }
    bool outside = pred.rejected_step >= 0 && static_cast<int>(j) >= pred.rejected_step;
    for (Eigen::Index k = 0; k < ee.rows() && !outside; ++k) {
      outside = ee(k, 0) < ws.x_min || ee(k, 0) > ws.x_max || ee(k, 1) < ws.y_min || ee(k, 1) > ws.y_max ||
                ee(k, 2) > ws.z_max;
    }
    if (outside) {
      out.cost += cfg.infeasible_penalty * cost.goal_weight;
      out.feasible = false;
    }
  }
  return out;
}

PlanResult mppi_plan(const DynamicsModel& model, const SceneState& scene, const CostSpec& cost,
                     const PlanConfig& cfg, const Mat& nominal_in, std::uint64_t seed) {
  cfg.validate();
  const int dim = action_dim(scene);
  if (nominal_in.rows() != cfg.horizon || nominal_in.cols() != dim) {
    throw InvalidShape("mppi_plan: nominal must be " + std::to_string(cfg.horizon) + "x" + std::to_string(dim));
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Mat nominal = clip_actions(nominal_in, cfg);
  PlanResult res;
  PlanResult best;
  double best_cost = std::numeric_limits<double>::infinity();

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    std::vector<Mat> samples;
    std::vector<double> costs;
    int feasible = 0;
    for (int k = 0; k < cfg.samples; ++k) {
      Mat eps(cfg.horizon, dim);
      for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = cfg.noise_std * noise(rng);
      Mat sample = clip_actions(nominal + eps, cfg);
      const SequenceCost sc = score_sequence(model, scene, sample, cost, cfg);
      feasible += sc.feasible ? 1 : 0;
      if (sc.cost < best_cost) {
        best_cost = sc.cost;
        best.actions = sample;
        best.min_cost = sc.cost;
      }
      samples.push_back(std::move(sample));
      costs.push_back(sc.cost);
    }
    if (feasible == 0) {
      best.sample_costs = costs;
      throw PlanningFailed("mppi_plan: all " + std::to_string(cfg.samples) + " samples are infeasible",
                           std::move(best));
    }
    const double cmin = *std::min_element(costs.begin(), costs.end());
    std::vector<double> w(costs.size());
    double z = 0.0;
    for (std::size_t k = 0; k < costs.size(); ++k) {
      w[k] = std::exp(-(costs[k] - cmin) / cfg.temperature);
      z += w[k];
    }
    Mat update = Mat::Zero(cfg.horizon, dim);
    double weighted = 0.0, mean = 0.0;
    for (std::size_t k = 0; k < costs.size(); ++k) {
      w[k] /= z;
      update += w[k] * (samples[k] - nominal);
      weighted += w[k] * costs[k];
      mean += costs[k];
    }
    mean /= static_cast<double>(costs.size());
    nominal = clip_actions(nominal + update, cfg);

    res.sample_costs = std::move(costs);
    res.weights = std::move(w);
    res.weighted_cost = weighted;
    res.mean_cost = mean;
    res.min_cost = cmin;
    res.feasible_samples = feasible;
    res.nominal_cost_trace.push_back(weighted);
  }
  res.actions = nominal;
  return res;
}

// ---- closed loop -----------------------------------------------------------

ClosedLoopResult closed_loop_control(const SceneState& start, const TaskSpec& spec, const DynamicsModel& model,
                                     const CostSpec& cost, const PlanConfig& cfg_in, int max_steps,
                                     std::uint64_t seed) {
  if (max_steps < 0) throw InvalidInput("closed_loop_control: max_steps must be non-negative");
  cfg_in.validate();
  PlanConfig cfg = cfg_in;
  ClosedLoopResult out;
  out.normalized = cost.normalized;
  out.states.push_back(start);
  SceneState scene = start;
  out.initial_goal = goal_cost(PointSet(scene.objects), cost);
  out.final_goal = out.initial_goal;
  if (out.final_goal < cfg.goal_threshold) {
    out.success = true;
    return out;
  }
  const auto groups = static_cast<Eigen::Index>(scene.anchors.size());
  Mat nominal = Mat::Zero(cfg.horizon, action_dim(scene));
  for (int t = 0; t < max_steps; ++t) {
    ControlStep entry;
    entry.step = t;
    PlanResult plan;
    try {
      plan = mppi_plan(model, scene, cost, cfg, nominal, derive_seed(seed, static_cast<std::uint64_t>(t)));
    } catch (const PlanningFailed& e) {
      plan = e.best();
      plan.actions = clip_actions(plan.actions, cfg);
    }
    entry.min_cost = plan.min_cost;
    entry.mean_cost = plan.mean_cost;
    entry.weighted_cost = plan.weighted_cost;
    entry.action = row_to_groups(plan.actions, 0, groups);
    try {
      scene = step(scene, expand_action(scene, entry.action), spec);
      nominal = shift_plan(plan.actions);
      cfg = cfg_in;
    } catch (const InvalidAction&) {
      // Replan from the same state with tighter bounds.
      entry.rejected = true;
      ++out.rejections;
      for (std::size_t d = 0; d < 3; ++d) {
        cfg.action_lower[d] *= 0.5;
        cfg.action_upper[d] *= 0.5;
      }
      nominal = Mat::Zero(cfg.horizon, action_dim(scene));
    }
    entry.goal = goal_cost(PointSet(scene.objects), cost);
    out.final_goal = entry.goal;
    out.log.push_back(entry);
    out.states.push_back(scene);
    if (entry.goal < cfg.goal_threshold) {
      out.success = true;
      break;
    }
  }
  return out;
}

std::string control_log_csv(const ClosedLoopResult& result) {
  std::ostringstream out;
  out.precision(17);
  out << "step,goal,min_cost,mean_cost,weighted_cost,rejected,action\n";
  for (const ControlStep& s : result.log) {
    out << s.step << ',' << s.goal << ',' << s.min_cost << ',' << s.mean_cost << ',' << s.weighted_cost << ','
        << (s.rejected ? 1 : 0) << ',';
    for (Eigen::Index i = 0; i < s.action.size(); ++i) out << (i ? " " : "") << s.action.data()[i];
    out << '\n';
  }
  return out.str();
}

Mat box_push_target(const SceneState& scene, double distance, double rotation) {
  if (!scene.body) throw InvalidInput("box_push_target: scene has no rigid body");
  const RigidBody& b = *scene.body;
  Eigen::Vector2d dir(b.x - scene.anchors[0].x(), b.y - scene.anchors[0].y());
  if (dir.norm() < 1e-12) dir = {1.0, 0.0};
  dir.normalize();
  const double x = b.x + distance * dir.x(), y = b.y + distance * dir.y(), th = b.theta + rotation;
  const double c = std::cos(th), s = std::sin(th);
  Mat out(b.body_points.rows(), 3);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double bx = b.body_points(i, 0), by = b.body_points(i, 1);
    out.row(i) << x + c * bx - s * by, y + s * bx + c * by, b.body_points(i, 2);
  }
  return out;
}

}  // namespace pformer
