#include "pformer/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "pformer/errors.hpp"

namespace pformer {
namespace {

std::vector<Mat> effector_trajectory(const Episode& ep, int t, int steps) {
  std::vector<Mat> out;
  out.reserve(static_cast<std::size_t>(steps));
  for (int j = 1; j <= steps; ++j) out.push_back(ep.effector_positions(t + j));
  return out;
}

std::vector<Eigen::Index> object_rows(const Episode& ep) {
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < ep.materials.size(); ++i) {
    if (ep.materials[i] != Material::kEffector) rows.push_back(static_cast<Eigen::Index>(i));
  }
  return rows;
}

// Planar rigid transform of a StartFrame; identity when all fields are zero.
struct PlanarTransform {
  double c = 1.0, s = 0.0;
  Eigen::RowVector3d pivot = Eigen::RowVector3d::Zero();
  Eigen::RowVector3d shift = Eigen::RowVector3d::Zero();
  bool identity = true;

  PlanarTransform(const StartFrame& sf, const Mat& objects) {
    identity = sf.yaw == 0.0 && sf.shift_x == 0.0 && sf.shift_y == 0.0;
    c = std::cos(sf.yaw);
    s = std::sin(sf.yaw);
    pivot = objects.colwise().mean();
    pivot(2) = 0.0;
    shift << sf.shift_x, sf.shift_y, 0.0;
  }
  Mat rotate(const Mat& m) const {
    Mat out = m;
    out.col(0) = c * m.col(0) - s * m.col(1);
    out.col(1) = s * m.col(0) + c * m.col(1);
    return out;
  }
  Mat points(const Mat& p) const {
    if (identity) return p;
    return rotate(p.rowwise() - pivot).rowwise() + (pivot + shift);
  }
  Mat vectors(const Mat& v) const { return identity ? v : rotate(v); }
};

std::vector<Mat> zero_like(const ModelParams& params) {
  std::vector<Mat> out;
  params.for_each_block([&](const std::string&, const Mat& m) { out.push_back(Mat::Zero(m.rows(), m.cols())); });
  return out;
}

MetricStat summarize(const std::vector<double>& v) {
  MetricStat s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(acc / static_cast<double>(v.size()));
  return s;
}

std::string fmt(double v) { return format_double(v); }

}  // namespace

// ---- configuration ---------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw InvalidInput("TrainConfig: " + msg); };
  if (rollout_steps < 1) fail("rollout_steps (k) must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (!(learning_rate > 0)) fail("learning_rate must be positive");
  if (!(final_lr_fraction > 0 && final_lr_fraction <= 1)) fail("final_lr_fraction must lie in (0, 1]");
  if (!(clip_norm > 0)) fail("clip_norm must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("Adam betas must lie in [0, 1)");
  if (!(epsilon > 0)) fail("epsilon must be positive");
  if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
  if (epochs < 0) fail("epochs must be non-negative");
  if (iterations_per_epoch < 0) fail("iterations_per_epoch must be non-negative");
  if (!(augment_shift >= 0)) fail("augment_shift must be non-negative");
  if (!(eval_fraction >= 0 && eval_fraction < 1)) fail("eval_fraction must lie in [0, 1)");
  loss.validate();
}

KvConfig TrainConfig::to_kv() const {
  KvConfig kv;
  kv.set_number("rollout_steps", rollout_steps);
  kv.set_number("batch_size", batch_size);
  kv.set_number("learning_rate", learning_rate);
  kv.set_number("final_lr_fraction", final_lr_fraction);
  kv.set_number("beta1", beta1);
  kv.set_number("beta2", beta2);
  kv.set_number("epsilon", epsilon);
  kv.set_number("weight_decay", weight_decay);
  kv.set_number("clip_norm", clip_norm);
  kv.set_number("epochs", epochs);
  kv.set_number("iterations_per_epoch", iterations_per_epoch);
  kv.set("augment_rotation", augment_rotation ? "true" : "false");
  kv.set_number("augment_shift", augment_shift);
  kv.set_number("alpha", loss.alpha);
  kv.set_number("beta_max", loss.beta_max);
  kv.set_number("tau_min", loss.tau_min);
  kv.set_number("eval_fraction", eval_fraction);
  kv.set_number("seed", seed);
  return kv;
}

TrainConfig TrainConfig::from_kv(const KvConfig& kv) {
  TrainConfig c;
  c.rollout_steps = static_cast<int>(kv.get_int("rollout_steps", c.rollout_steps));
  c.batch_size = static_cast<int>(kv.get_int("batch_size", c.batch_size));
  c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
  c.final_lr_fraction = kv.get_double("final_lr_fraction", c.final_lr_fraction);
  c.beta1 = kv.get_double("beta1", c.beta1);
  c.beta2 = kv.get_double("beta2", c.beta2);
  c.epsilon = kv.get_double("epsilon", c.epsilon);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.clip_norm = kv.get_double("clip_norm", c.clip_norm);
  c.epochs = static_cast<int>(kv.get_int("epochs", c.epochs));
  c.iterations_per_epoch = static_cast<int>(kv.get_int("iterations_per_epoch", c.iterations_per_epoch));
  c.augment_rotation = kv.get_bool("augment_rotation", c.augment_rotation);
  c.augment_shift = kv.get_double("augment_shift", c.augment_shift);
  c.loss.alpha = kv.get_double("alpha", c.loss.alpha);
  c.loss.beta_max = kv.get_double("beta_max", c.loss.beta_max);
  c.loss.tau_min = kv.get_double("tau_min", c.loss.tau_min);
  c.eval_fraction = kv.get_double("eval_fraction", c.eval_fraction);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long>(c.seed)));
  c.validate();
  return c;
}

EpisodeSplit split_episodes(int count, std::uint64_t seed, double eval_fraction) {
  if (count < 1) throw InvalidInput("split_episodes: no episodes");
  std::vector<int> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0x5117));
  std::shuffle(order.begin(), order.end(), rng);
  int n_eval = static_cast<int>(std::lround(eval_fraction * count));
  if (count >= 2 && eval_fraction > 0) n_eval = std::max(n_eval, 1);
  n_eval = std::min(n_eval, count - 1);
  EpisodeSplit s;
  s.eval.assign(order.begin(), order.begin() + n_eval);
  s.train.assign(order.begin() + n_eval, order.end());
  std::sort(s.eval.begin(), s.eval.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

// ---- loss and optimizer ----------------------------------------------------

LossBreakdown batch_loss(const ModelParams& params, const Dataset& data, std::span<const StartFrame> batch,
                         int rollout_steps, const LossConfig& loss, std::vector<Mat>* grads) {
  if (batch.empty()) throw InvalidInput("batch_loss: empty batch");
  loss.validate();
  LossBreakdown out;
  if (grads) *grads = zero_like(params);
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const StartFrame& sf : batch) {
    const Episode& ep = data.episodes.at(static_cast<std::size_t>(sf.episode));
    if (sf.t < 0 || sf.t + rollout_steps >= ep.horizon()) {
      throw InvalidInput("batch_loss: start frame " + std::to_string(sf.t) + " leaves fewer than " +
                         std::to_string(rollout_steps) + " future frames");
    }
    const auto rows = object_rows(ep);
    ad::Tape tape;
    BoundModel model(tape, params, grads != nullptr);
    const PlanarTransform xf(sf, ep.object_positions(sf.t));
    std::vector<Mat> traj = effector_trajectory(ep, sf.t, rollout_steps);
    for (Mat& m : traj) m = xf.points(m);
    const ParticleSet start(xf.points(ep.positions[static_cast<std::size_t>(sf.t)]), ep.materials,
                            xf.vectors(ep.motions[static_cast<std::size_t>(sf.t)]));
    const auto steps = rollout_on_tape(model, start, traj, rollout_steps);

    std::vector<ad::Var> terms;
    for (int j = 0; j < rollout_steps; ++j) {
      const ad::Var pred = ad::gather_rows(steps[static_cast<std::size_t>(j)].positions, rows);
      const ad::Var gt = tape.constant(xf.points(ep.object_positions(sf.t + j + 1)));
      ad::Var term;
      if (loss.alpha > 0.0) {
        const ad::Var cd = diff::chamfer_distance(pred, gt);
        out.chamfer += inv * cd.scalar();
        term = loss.alpha >= 1.0 ? cd : ad::scale(cd, loss.alpha);
      }
      if (loss.alpha < 1.0) {
        const ad::Var hd = diff::soft_hausdorff(pred, gt, loss.beta_max, loss.tau_min);
        out.soft_hausdorff += inv * hd.scalar();
        const ad::Var weighted = loss.alpha <= 0.0 ? hd : ad::scale(hd, 1.0 - loss.alpha);
        term = term.valid() ? term + weighted : weighted;
      }
      terms.push_back(term);
    }
    ad::Var total = terms[0];
    for (std::size_t j = 1; j < terms.size(); ++j) total = total + terms[j];
    out.total += inv * total.scalar();
    if (grads) {
      tape.backward(total);
      const auto& blocks = model.blocks();
      for (std::size_t b = 0; b < blocks.size(); ++b) (*grads)[b] += inv * blocks[b].grad();
    }
  }
  return out;
}

double clip_global_norm(std::vector<Mat>& grads, double max_norm) {
  double sq = 0.0;
  for (const Mat& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Mat& g : grads) g *= s;
  }
  return norm;
}

double scheduled_learning_rate(const TrainConfig& cfg, long step, long total_steps) {
  if (cfg.final_lr_fraction == 1.0 || total_steps <= 1) return cfg.learning_rate;
  const double progress = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps - 1), 0.0, 1.0);
  const double floor = cfg.final_lr_fraction * cfg.learning_rate;
  return floor + 0.5 * (cfg.learning_rate - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

void adam_update(ModelParams& params, AdamState& state, const std::vector<Mat>& grads, const TrainConfig& cfg) {
  if (state.first_moment.empty()) {
    state.first_moment = zero_like(params);
    state.second_moment = zero_like(params);
  }
  if (grads.size() != state.first_moment.size()) throw InvalidInput("adam_update: gradient count mismatch");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  std::size_t b = 0;
  params.for_each_block([&](const std::string&, Mat& p) {
    Mat g = grads[b];
    if (cfg.weight_decay > 0) g += cfg.weight_decay * p;
    Mat& m = state.first_moment[b];
    Mat& v = state.second_moment[b];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    p.array() -= cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
    ++b;
  });
}

// ---- training loop ---------------------------------------------------------

TrainResult train(const Dataset& data, const ModelConfig& model_config, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  cfg.validate();
  model_config.validate();
  if (data.episodes.empty()) throw InvalidInput("train: dataset has no episodes");
  for (std::size_t e = 0; e < data.episodes.size(); ++e) {
    if (data.episodes[e].horizon() < cfg.rollout_steps + 1) {
      throw InvalidInput("train: episode " + std::to_string(e) + " has horizon " +
                         std::to_string(data.episodes[e].horizon()) + ", need at least k+1 = " +
                         std::to_string(cfg.rollout_steps + 1));
    }
  }
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res;
  res.split = split_episodes(static_cast<int>(data.episodes.size()), cfg.seed, cfg.eval_fraction);
  if (hooks.resume) {
    if (!(hooks.resume->params.config == model_config)) throw InvalidInput("train: resume checkpoint config differs");
    if (!hooks.resume->training) throw InvalidInput("train: resume checkpoint has no training state");
    res.params = hooks.resume->params;
    res.state = *hooks.resume->training;
  } else {
    res.params = ModelParams::initialize(model_config, derive_seed(cfg.seed, 0x1417));
    res.state.optimizer.first_moment = zero_like(res.params);
    res.state.optimizer.second_moment = zero_like(res.params);
  }

  long frames = 0;
  for (int e : res.split.train) frames += data.episodes[static_cast<std::size_t>(e)].horizon() - cfg.rollout_steps;
  const int per_epoch = cfg.iterations_per_epoch > 0
                            ? cfg.iterations_per_epoch
                            : static_cast<int>((frames + cfg.batch_size - 1) / cfg.batch_size);
  const int batch = std::min<int>(cfg.batch_size, static_cast<int>(res.split.train.size()));

  long iteration = res.state.optimizer.step;
  const long total_steps = static_cast<long>(cfg.epochs) * per_epoch;
  std::vector<Mat> grads;
  for (int epoch = static_cast<int>(res.state.epochs_completed); epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(cfg.seed, 0x10000 + static_cast<std::uint64_t>(epoch)));
    double acc = 0.0;
    for (int it = 0; it < per_epoch; ++it) {
      // Distinct episodes per batch, one uniformly drawn start frame each.
      std::vector<int> pool = res.split.train;
      std::vector<StartFrame> starts;
      for (int b = 0; b < batch; ++b) {
        std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(b), pool.size() - 1);
        std::swap(pool[static_cast<std::size_t>(b)], pool[pick(rng)]);
        const int e = pool[static_cast<std::size_t>(b)];
        const int last = data.episodes[static_cast<std::size_t>(e)].horizon() - cfg.rollout_steps - 1;
        StartFrame sf{e, std::uniform_int_distribution<int>(0, last)(rng)};
        if (cfg.augment_rotation) sf.yaw = std::uniform_real_distribution<double>(-std::numbers::pi, std::numbers::pi)(rng);
        if (cfg.augment_shift > 0.0) {
          std::uniform_real_distribution<double> shift(-cfg.augment_shift, cfg.augment_shift);
          sf.shift_x = shift(rng);
          sf.shift_y = shift(rng);
        }
        starts.push_back(sf);
      }
      const LossBreakdown l = batch_loss(res.params, data, starts, cfg.rollout_steps, cfg.loss, &grads);
      bool finite = std::isfinite(l.total);
      for (const Mat& g : grads) finite = finite && g.allFinite();
      if (!finite) {
        throw TrainingDiverged(iteration, "training diverged at iteration " + std::to_string(iteration) +
                                              " (non-finite loss or gradient)");
      }
      clip_global_norm(grads, cfg.clip_norm);
      TrainConfig step_cfg = cfg;
      step_cfg.learning_rate = scheduled_learning_rate(cfg, iteration, total_steps);
      adam_update(res.params, res.state.optimizer, grads, step_cfg);
      acc += l.total;
      ++iteration;
    }
    const double mean = per_epoch > 0 ? acc / per_epoch : 0.0;
    res.state.loss_curve.push_back(mean);
    res.state.epochs_completed = epoch + 1;
    if (hooks.on_epoch) hooks.on_epoch(epoch, mean);
  }
  res.iterations = iteration;
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---- evaluation ------------------------------------------------------------

Predictor model_predictor(const ModelParams& params) {
  return [params](const Episode& ep, int t, int steps) {
    const std::vector<Mat> traj = effector_trajectory(ep, t, steps);
    const auto states = rollout(ep.frame(t), traj, params, steps);
    std::vector<Mat> out;
    for (const auto& s : states) out.push_back(s.object_positions());
    return out;
  };
}

Predictor persistence_predictor() {
  return [](const Episode& ep, int t, int steps) {
    return std::vector<Mat>(static_cast<std::size_t>(steps), ep.object_positions(t));
  };
}

Predictor ground_truth_predictor() {
  return [](const Episode& ep, int t, int steps) {
    std::vector<Mat> out;
    for (int j = 1; j <= steps; ++j) out.push_back(ep.object_positions(t + j));
    return out;
  };
}

const HorizonMetrics& MetricsReport::at(int horizon) const {
  for (const auto& h : horizons) {
    if (h.horizon == horizon) return h;
  }
  throw InvalidInput("MetricsReport: no horizon " + std::to_string(horizon));
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out << "task,horizon,count,mse_mean,mse_std,cd_mean,cd_std,cdhd_mean,cdhd_std\n";
  for (const auto& h : horizons) {
    out << task << ',' << h.horizon << ',' << h.count << ',' << fmt(h.mse.mean) << ',' << fmt(h.mse.std) << ','
        << fmt(h.cd.mean) << ',' << fmt(h.cd.std) << ',' << fmt(h.cd_hd.mean) << ',' << fmt(h.cd_hd.std) << '\n';
  }
  return out.str();
}

bool MetricsReport::operator==(const MetricsReport& o) const {
  if (task != o.task || horizons.size() != o.horizons.size()) return false;
  for (std::size_t i = 0; i < horizons.size(); ++i) {
    const auto &a = horizons[i], &b = o.horizons[i];
    if (a.horizon != b.horizon || a.count != b.count || a.mse.mean != b.mse.mean || a.mse.std != b.mse.std ||
        a.cd.mean != b.cd.mean || a.cd.std != b.cd.std || a.cd_hd.mean != b.cd_hd.mean || a.cd_hd.std != b.cd_hd.std) {
      return false;
    }
  }
  return true;
}

MetricsReport evaluate_predictor(const Predictor& predictor, const Dataset& data, std::span<const int> episodes,
                                 std::span<const int> horizons) {
  MetricsReport report;
  report.task = std::string(task_name(data.spec.task));
  for (int h : horizons) {
    if (h < 1) throw InvalidInput("evaluate: horizons must be at least 1");
    std::vector<double> mse, cd, cdhd;
    for (int e : episodes) {
      const Episode& ep = data.episodes.at(static_cast<std::size_t>(e));
      for (int t = 0; t + h < ep.horizon(); ++t) {
        const std::vector<Mat> pred = predictor(ep, t, h);
        const PointSet p(pred.back()), g(ep.object_positions(t + h));
        const double c = chamfer_distance(p, g);
        mse.push_back(tracked_mse(p, g));
        cd.push_back(c);
        cdhd.push_back(c + hausdorff_distance(p, g));
      }
    }
    HorizonMetrics m;
    m.horizon = h;
    m.count = static_cast<long>(cd.size());
    m.mse = summarize(mse);
    m.cd = summarize(cd);
    m.cd_hd = summarize(cdhd);
    report.horizons.push_back(m);
  }
  return report;
}

MetricsReport evaluate(const ModelParams& params, const Dataset& data, std::span<const int> episodes,
                       std::span<const int> horizons) {
  return evaluate_predictor(model_predictor(params), data, episodes, horizons);
}

std::string loss_curve_csv(const std::vector<double>& curve) {
  std::string out = "epoch,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) out += std::to_string(i + 1) + "," + fmt(curve[i]) + "\n";
  return out;
}

std::vector<AblationArm> ablate_hybrid(const Dataset& data, const ModelConfig& model_config, const TrainConfig& base,
                                       std::span<const double> alphas, std::span<const int> horizons) {
  std::vector<AblationArm> arms;
  for (double alpha : alphas) {
    TrainConfig cfg = base;
    cfg.loss.alpha = alpha;
    AblationArm arm;
    arm.alpha = alpha;
    arm.result = train(data, model_config, cfg);
    arm.report = evaluate(arm.result.params, data, arm.result.split.eval, horizons);
    arms.push_back(std::move(arm));
  }
  return arms;
}

}  // namespace pformer
