#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "pformer/errors.hpp"
#include "pformer/training.hpp"
#include "support.hpp"

using namespace pformer;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.embed_dim = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  c.ff_hidden = 8;
  c.decoder_hidden = 8;
  return c;
}

// 4 box particles and 8 pusher points.
TaskSpec twelve_particle_box() {
  TaskSpec spec = TaskSpec::defaults(TaskId::kBoxPush);
  spec.rigid_count = 4;
  return spec;
}

const Dataset& small_dataset() {
  static const Dataset ds = generate_dataset(twelve_particle_box(), 6, 8, 21);
  return ds;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.rollout_steps = 2;
  c.batch_size = 3;
  c.epochs = 3;
  c.iterations_per_epoch = 4;
  c.eval_fraction = 0.2;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(Split, ByEpisodeDisjointAndSeeded) {
  for (int count : {2, 7, 50}) {
    const EpisodeSplit s = split_episodes(count, 3, 0.1);
    EXPECT_GE(s.eval.size(), 1u);
    std::set<int> all(s.train.begin(), s.train.end());
    for (int e : s.eval) EXPECT_TRUE(all.insert(e).second);
    EXPECT_EQ(static_cast<int>(all.size()), count);
    EXPECT_EQ(split_episodes(count, 3, 0.1).eval, s.eval);
  }
  EXPECT_EQ(split_episodes(50, 3, 0.1).eval.size(), 5u);
  EXPECT_NE(split_episodes(50, 3, 0.1).eval, split_episodes(50, 4, 0.1).eval);
}

TEST(TrainConfigCheck, ValidationAndKvRoundTrip) {
  TrainConfig c = quick_config();
  c.final_lr_fraction = 0.1;
  c.augment_rotation = true;
  c.augment_shift = 0.05;
  c.loss.alpha = 0.25;
  EXPECT_EQ(TrainConfig::from_kv(c.to_kv()), c);
  TrainConfig bad = c;
  bad.rollout_steps = 0;
  EXPECT_THROW(bad.validate(), InvalidInput);
  bad = c;
  bad.learning_rate = 0;
  EXPECT_THROW(bad.validate(), InvalidInput);
  bad = c;
  bad.clip_norm = -1;
  EXPECT_THROW(bad.validate(), InvalidInput);
}

TEST(Training, ZeroEpochsReturnInitialParams) {
  TrainConfig c = quick_config();
  c.epochs = 0;
  const TrainResult r = train(small_dataset(), tiny_model(), c);
  EXPECT_TRUE(r.params == ModelParams::initialize(tiny_model(), derive_seed(c.seed, 0x1417)));
  EXPECT_TRUE(r.state.loss_curve.empty());
  EXPECT_EQ(r.iterations, 0);
}

TEST(Training, InitialLossIsFrozenObjectLoss) {
  const Dataset& ds = small_dataset();
  const ModelParams p = ModelParams::initialize(tiny_model(), 1);
  const LossConfig lc;
  const std::vector<StartFrame> batch{{0, 0}, {2, 3}, {4, 5}};
  const LossBreakdown l = batch_loss(p, ds, batch, 2, lc);
  double cd = 0, hd = 0;
  for (const StartFrame& sf : batch) {
    const Episode& ep = ds.episodes[static_cast<std::size_t>(sf.episode)];
    const Mat frozen = ep.object_positions(sf.t);
    for (int j = 1; j <= 2; ++j) {
      cd += oracle::chamfer(frozen, ep.object_positions(sf.t + j)) / 3.0;
      hd += oracle::soft_hausdorff(frozen, ep.object_positions(sf.t + j), lc.beta_max, lc.tau_min) / 3.0;
    }
  }
  EXPECT_NEAR(l.chamfer, cd, 1e-12);
  EXPECT_NEAR(l.soft_hausdorff, hd, 1e-12);
  EXPECT_NEAR(l.total, 0.5 * (cd + hd), 1e-12);
}

TEST(Training, ModelAndLossGradientMatchesFiniteDifferences) {
  const Dataset& ds = small_dataset();
  ASSERT_EQ(ds.episodes[0].positions[0].rows(), 12);
  std::mt19937_64 rng(3);
  const ModelParams p = oracle::random_params(tiny_model(), rng, 0.3);
  const std::vector<StartFrame> batch{{1, 2}};
  const LossConfig lc;
  std::vector<Mat> grads;
  batch_loss(p, ds, batch, 3, lc, &grads);

  // Every block receives gradient.
  for (const Mat& g : grads) EXPECT_GT(g.cwiseAbs().maxCoeff(), 0.0);

  // Central differences on a random subset of coordinates of every block.
  const double h = 1e-5;
  double worst = 0;
  std::size_t b = 0;
  ModelParams q = p;
  q.for_each_block([&](const std::string& name, Mat& m) {
    for (int s = 0; s < 3; ++s) {
      const Eigen::Index i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(m.size()));
      const double keep = m.data()[i];
      m.data()[i] = keep + h;
      const double up = batch_loss(q, ds, batch, 3, lc).total;
      m.data()[i] = keep - h;
      const double down = batch_loss(q, ds, batch, 3, lc).total;
      m.data()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grads[b].data()[i];
      const double err = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      worst = std::max(worst, err);
      EXPECT_LT(err, 1e-4) << name << "[" << i << "] analytic " << analytic << " numeric " << numeric;
    }
    ++b;
  });
  EXPECT_LT(worst, 1e-4);
}

TEST(Training, EffectorRowsCarryNoLossGradient) {
  const Dataset& ds = small_dataset();
  std::mt19937_64 rng(4);
  const ModelParams p = oracle::random_params(tiny_model(), rng);
  const Episode& ep = ds.episodes[0];
  ad::Tape tape;
  BoundModel model(tape, p, true);
  std::vector<Mat> traj{ep.effector_positions(1), ep.effector_positions(2)};
  const auto steps = rollout_on_tape(model, ep.frame(0), traj, 2);
  const ParticleSet f = ep.frame(0);
  std::vector<Eigen::Index> rows(f.object_rows().begin(), f.object_rows().end());
  ad::Var total;
  for (int j = 0; j < 2; ++j) {
    const ad::Var pred = ad::gather_rows(steps[j].positions, rows);
    const ad::Var l = diff::hybrid_loss(pred, tape.constant(ep.object_positions(j + 1)), LossConfig{});
    total = j == 0 ? l : total + l;
  }
  tape.backward(total);
  for (int j = 0; j < 2; ++j) {
    const Mat& g = steps[j].displacement.grad();
    for (Eigen::Index r : f.effector_rows()) EXPECT_TRUE(g.row(r).isZero());
    EXPECT_GT(g.topRows(f.num_objects()).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Optimizer, ZeroGradientLeavesParamsUnchanged) {
  std::mt19937_64 rng(6);
  ModelParams p = oracle::random_params(tiny_model(), rng);
  const ModelParams before = p;
  AdamState st;
  std::vector<Mat> zero;
  p.for_each_block([&](const std::string&, const Mat& m) { zero.push_back(Mat::Zero(m.rows(), m.cols())); });
  for (int i = 0; i < 3; ++i) adam_update(p, st, zero, TrainConfig{});
  EXPECT_TRUE(p == before);
  EXPECT_EQ(st.step, 3u);
}

TEST(Optimizer, FirstStepMovesEachCoordinateByLearningRate) {
  ModelParams p = ModelParams::zeros(tiny_model());
  AdamState st;
  std::vector<Mat> g;
  p.for_each_block([&](const std::string&, const Mat& m) { g.push_back(Mat::Constant(m.rows(), m.cols(), -2.0)); });
  TrainConfig c;
  c.epsilon = 0;
  adam_update(p, st, g, c);
  EXPECT_NEAR(p.proj1.weight(0, 0), c.learning_rate, 1e-15);
}

TEST(Optimizer, ClipGlobalNorm) {
  std::vector<Mat> g{Mat::Constant(1, 1, 3.0), Mat::Constant(1, 1, 4.0)};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0](0, 0), 0.6, 1e-15);
  EXPECT_NEAR(g[1](0, 0), 0.8, 1e-15);
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 10.0), 1.0);
  EXPECT_NEAR(g[1](0, 0), 0.8, 1e-15);
}

TEST(Optimizer, CosineScheduleEndpoints) {
  TrainConfig c;
  c.learning_rate = 1e-3;
  EXPECT_EQ(scheduled_learning_rate(c, 50, 100), 1e-3);
  c.final_lr_fraction = 0.1;
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(c, 0, 101), 1e-3);
  EXPECT_NEAR(scheduled_learning_rate(c, 50, 101), 0.55e-3, 1e-15);
  EXPECT_NEAR(scheduled_learning_rate(c, 100, 101), 1e-4, 1e-15);
}

TEST(Training, SameSeedGivesIdenticalCurves) {
  const TrainResult a = train(small_dataset(), tiny_model(), quick_config());
  const TrainResult b = train(small_dataset(), tiny_model(), quick_config());
  EXPECT_EQ(a.state.loss_curve, b.state.loss_curve);
  EXPECT_TRUE(a.params == b.params);
  TrainConfig other = quick_config();
  other.seed = 6;
  EXPECT_NE(train(small_dataset(), tiny_model(), other).state.loss_curve, a.state.loss_curve);
}

TEST(Training, ResumeMatchesUnbrokenRun) {
  TrainConfig c = quick_config();
  c.epochs = 4;
  c.augment_rotation = true;
  c.augment_shift = 0.05;
  const TrainResult full = train(small_dataset(), tiny_model(), c);
  TrainConfig first = c;
  first.epochs = 2;
  const TrainResult half = train(small_dataset(), tiny_model(), first);
  const Checkpoint reloaded = decode_checkpoint(encode_checkpoint(Checkpoint{half.params, {}, half.state}));
  TrainHooks hooks;
  hooks.resume = &reloaded;
  const TrainResult resumed = train(small_dataset(), tiny_model(), c, hooks);
  ASSERT_EQ(resumed.state.loss_curve.size(), 4u);
  for (int e = 0; e < 4; ++e) EXPECT_NEAR(resumed.state.loss_curve[e], full.state.loss_curve[e], 1e-9);
  std::vector<Mat> a, b;
  full.params.for_each_block([&](const std::string&, const Mat& m) { a.push_back(m); });
  resumed.params.for_each_block([&](const std::string&, const Mat& m) { b.push_back(m); });
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LE((a[i] - b[i]).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_EQ(resumed.state.optimizer.step, full.state.optimizer.step);
}

TEST(Training, RejectsShortEpisodesAndDivergence) {
  TrainConfig c = quick_config();
  c.rollout_steps = 8;
  EXPECT_THROW(train(small_dataset(), tiny_model(), c), InvalidInput);
  c = quick_config();
  c.learning_rate = 1e300;
  c.epochs = 5;
  try {
    train(small_dataset(), tiny_model(), c);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_GE(e.iteration(), 1);
  }
}

TEST(Evaluation, HorizonOneMatchesLossTerms) {
  const Dataset& ds = small_dataset();
  std::mt19937_64 rng(7);
  const ModelParams p = oracle::random_params(tiny_model(), rng, 0.2);
  const std::vector<int> eps{0, 3};
  const std::vector<int> hs{1};
  const MetricsReport r = evaluate(p, ds, eps, hs);
  std::vector<StartFrame> all;
  for (int e : eps)
    for (int t = 0; t + 1 < ds.episodes[e].horizon(); ++t) all.push_back({e, t});
  LossConfig lc;
  lc.alpha = 1.0;
  const LossBreakdown l = batch_loss(p, ds, all, 1, lc);
  EXPECT_EQ(r.at(1).count, static_cast<long>(all.size()));
  EXPECT_NEAR(r.at(1).cd.mean, l.chamfer, 1e-9);
}

TEST(Evaluation, OracleIsZeroAndPersistencePositive) {
  const Dataset& ds = small_dataset();
  const std::vector<int> eps{0, 1, 2};
  const std::vector<int> hs{1, 5};
  const MetricsReport gt = evaluate_predictor(ground_truth_predictor(), ds, eps, hs);
  for (const auto& h : gt.horizons) {
    EXPECT_EQ(h.mse.mean, 0.0);
    EXPECT_EQ(h.cd.mean, 0.0);
    EXPECT_EQ(h.cd_hd.mean, 0.0);
  }
  const MetricsReport frozen = evaluate_predictor(persistence_predictor(), ds, eps, hs);
  EXPECT_GT(frozen.at(1).cd_hd.mean, 0.0);
  EXPECT_GT(frozen.at(5).cd_hd.mean, frozen.at(1).cd_hd.mean);
  EXPECT_EQ(frozen.horizons.size(), 2u);
}

TEST(Evaluation, MetricsAgreeWithOracles) {
  const Dataset& ds = small_dataset();
  const std::vector<int> eps{2};
  const std::vector<int> hs{2};
  const MetricsReport r = evaluate_predictor(persistence_predictor(), ds, eps, hs);
  const Episode& ep = ds.episodes[2];
  double mse = 0, cdhd = 0;
  int n = 0;
  for (int t = 0; t + 2 < ep.horizon(); ++t, ++n) {
    mse += oracle::tracked_mse(ep.object_positions(t), ep.object_positions(t + 2));
    cdhd += oracle::chamfer(ep.object_positions(t), ep.object_positions(t + 2)) +
            oracle::hausdorff(ep.object_positions(t), ep.object_positions(t + 2));
  }
  EXPECT_NEAR(r.at(2).mse.mean, mse / n, 1e-15);
  EXPECT_NEAR(r.at(2).cd_hd.mean, cdhd / n, 1e-14);
  EXPECT_NE(r.to_csv().find("task,horizon"), std::string::npos);
}

TEST(Ablation, ChamferOnlyArmReportsChamferAsHybrid) {
  TrainConfig c = quick_config();
  c.epochs = 1;
  c.loss.alpha = 1.0;
  std::vector<StartFrame> b{{0, 1}};
  const ModelParams p = ModelParams::initialize(tiny_model(), 2);
  const LossBreakdown l = batch_loss(p, small_dataset(), b, 2, c.loss);
  EXPECT_EQ(l.total, l.chamfer);
  EXPECT_EQ(l.soft_hausdorff, 0.0);

  const std::vector<double> alphas{0.5, 0.5};
  const std::vector<int> hs{1};
  const auto arms = ablate_hybrid(small_dataset(), tiny_model(), c, alphas, hs);
  ASSERT_EQ(arms.size(), 2u);
  EXPECT_TRUE(arms[0].report == arms[1].report);
  EXPECT_EQ(arms[0].result.state.loss_curve, arms[1].result.state.loss_curve);
}

TEST(Training, LossDropsOnBoxPush) {
  // 200 iterations on the 32-particle box scene, measured on a fixed frame
  // grid of the training episodes. Observed ratios for seeds 0..2 were
  // 0.87, 0.91 and 0.82.
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Dataset ds = generate_dataset(TaskSpec::defaults(TaskId::kBoxPush), 50, 30, seed);
    TrainConfig c;
    c.rollout_steps = 1;
    c.batch_size = 8;
    c.epochs = 10;
    c.iterations_per_epoch = 20;
    c.learning_rate = 3e-3;
    c.loss.alpha = 1.0;
    c.seed = seed;
    ModelConfig m;
    m.embed_dim = 16;
    m.num_layers = 2;
    m.num_heads = 4;
    m.ff_hidden = 32;
    m.decoder_hidden = 16;
    const EpisodeSplit split = split_episodes(50, seed, c.eval_fraction);
    std::vector<StartFrame> frames;
    for (int e : split.train) {
      for (int t = 0; t + 1 < 30; t += 3) frames.push_back({e, t});
    }
    const double before = batch_loss(ModelParams::initialize(m, derive_seed(seed, 0x1417)), ds, frames, 1, c.loss).total;
    const TrainResult r = train(ds, m, c);
    ASSERT_EQ(r.state.loss_curve.size(), 10u);
    EXPECT_LT(batch_loss(r.params, ds, frames, 1, c.loss).total, 0.95 * before) << "seed " << seed;
  }
}
