#pragma once

// k-step autoregressive training with hybrid point-set supervision, plus the
// evaluation harness (tracked MSE, Chamfer, Chamfer + Hausdorff).

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pformer/checkpoint.hpp"
#include "pformer/kv_config.hpp"
#include "pformer/model.hpp"
#include "pformer/pointcloud_metrics.hpp"
#include "pformer/simulator.hpp"

namespace pformer {

struct TrainConfig {
  int rollout_steps = 5;  // k
  int batch_size = 8;
  double learning_rate = 1e-3;
  // Cosine decay from learning_rate to final_lr_fraction * learning_rate
  // over all epochs; 1 keeps the rate constant.
  double final_lr_fraction = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  int epochs = 10;
  // 0 derives ceil(training start frames / batch size).
  int iterations_per_epoch = 0;
  // Planar augmentation of each sampled rollout: a uniform yaw in
  // [-pi, pi] about the start frame's object centroid (when on) and a
  // uniform xy shift in [-augment_shift, augment_shift] meters.
  bool augment_rotation = false;
  double augment_shift = 0.0;
  LossConfig loss;
  double eval_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  KvConfig to_kv() const;
  // Starts from defaults and overrides any keys present.
  static TrainConfig from_kv(const KvConfig& kv);
  bool operator==(const TrainConfig&) const = default;
};

struct EpisodeSplit {
  std::vector<int> train;
  std::vector<int> eval;
};

// Seeded by-episode split; at least one evaluation episode when count ≥ 2.
EpisodeSplit split_episodes(int count, std::uint64_t seed, double eval_fraction = 0.1);

struct StartFrame {
  int episode = 0;
  int t = 0;
  // Rigid planar transform applied to the whole rollout (positions rotate
  // about the start frame's object centroid, then shift; motions rotate).
  double yaw = 0.0;
  double shift_x = 0.0, shift_y = 0.0;
};

// Sum over rollout steps of each loss term, averaged over the batch.
struct LossBreakdown {
  double total = 0.0;
  double chamfer = 0.0;
  double soft_hausdorff = 0.0;
};

// Loss (and, when `grads` is given, its gradient per parameter block) of a
// batch of k-step rollouts. Only object rows are supervised.
LossBreakdown batch_loss(const ModelParams& params, const Dataset& data, std::span<const StartFrame> batch,
                         int rollout_steps, const LossConfig& loss, std::vector<Mat>* grads = nullptr);

// Learning rate of a given optimizer step (0-based) out of total_steps.
double scheduled_learning_rate(const TrainConfig& cfg, long step, long total_steps);

// Adam with bias correction. Gradients are used as given (clip beforehand).
void adam_update(ModelParams& params, AdamState& state, const std::vector<Mat>& grads, const TrainConfig& cfg);

// Scales gradients in place so their global norm is at most max_norm;
// returns the norm before scaling.
double clip_global_norm(std::vector<Mat>& grads, double max_norm);

struct TrainResult {
  ModelParams params;
  TrainingState state;
  EpisodeSplit split;
  long iterations = 0;
  double seconds = 0.0;
};

struct TrainHooks {
  // Continue from a saved state (epochs already completed are skipped).
  const Checkpoint* resume = nullptr;
  // Called after each epoch with its mean loss.
  std::function<void(int epoch, double loss)> on_epoch;
};

TrainResult train(const Dataset& data, const ModelConfig& model_config, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

// Predicted object positions (N×3) for steps 1..h from start frame t.
using Predictor = std::function<std::vector<Mat>(const Episode& episode, int t, int steps)>;

Predictor model_predictor(const ModelParams& params);
Predictor persistence_predictor();   // objects frozen at frame t
Predictor ground_truth_predictor();  // recorded simulator outcome

struct MetricStat {
  double mean = 0.0;
  double std = 0.0;
};

struct HorizonMetrics {
  int horizon = 0;
  long count = 0;
  MetricStat mse, cd, cd_hd;
};

struct MetricsReport {
  std::string task;
  std::vector<HorizonMetrics> horizons;

  const HorizonMetrics& at(int horizon) const;
  std::string to_csv() const;
  bool operator==(const MetricsReport& o) const;
};

// Every start frame of every listed episode that has h future frames.
MetricsReport evaluate_predictor(const Predictor& predictor, const Dataset& data, std::span<const int> episodes,
                                 std::span<const int> horizons);
MetricsReport evaluate(const ModelParams& params, const Dataset& data, std::span<const int> episodes,
                       std::span<const int> horizons);

std::string loss_curve_csv(const std::vector<double>& curve);

struct AblationArm {
  double alpha = 0.0;
  TrainResult result;
  MetricsReport report;
};

// Trains one model per alpha with identical seeds and data order and
// evaluates each on the held-out split.
std::vector<AblationArm> ablate_hybrid(const Dataset& data, const ModelConfig& model_config, const TrainConfig& base,
                                       std::span<const double> alphas, std::span<const int> horizons);

}  // namespace pformer
