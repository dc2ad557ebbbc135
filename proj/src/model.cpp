#include "pformer/model.hpp"

#include <cmath>
#include <random>

#include "pformer/errors.hpp"

namespace pformer {
namespace {

Linear make_linear(int in, int out) {
  return Linear{Mat::Zero(in, out), Mat::Zero(1, out)};
}

LayerNorm make_norm(int d) {
  return LayerNorm{Mat::Ones(1, d), Mat::Zero(1, d)};
}

BoundLinear bind(ad::Tape& t, const Linear& l, bool trainable, std::vector<ad::Var>& out) {
  BoundLinear b{trainable ? t.leaf(l.weight) : t.constant(l.weight),
                trainable ? t.leaf(l.bias) : t.constant(l.bias)};
  out.push_back(b.weight);
  out.push_back(b.bias);
  return b;
}

BoundLayerNorm bind(ad::Tape& t, const LayerNorm& n, bool trainable, std::vector<ad::Var>& out) {
  BoundLayerNorm b{trainable ? t.leaf(n.gain) : t.constant(n.gain),
                   trainable ? t.leaf(n.bias) : t.constant(n.bias)};
  out.push_back(b.gain);
  out.push_back(b.bias);
  return b;
}

ad::Var apply(const BoundLinear& l, const ad::Var& x) {
  return ad::add_row(ad::matmul(x, l.weight), l.bias);
}

void check_embeddings(const Mat& z, const ModelConfig& cfg, const char* what) {
  if (z.rows() < 1 || z.cols() != cfg.embed_dim) {
    throw InvalidShape(std::string(what) + ": embeddings must be n×" +
                       std::to_string(cfg.embed_dim) + ", got " + std::to_string(z.rows()) +
                       "x" + std::to_string(z.cols()));
  }
}

void check_ee_pose(const Mat& pose, Eigen::Index m) {
  if (pose.rows() != m || pose.cols() != 3) {
    throw InvalidShape("commanded effector pose must be " + std::to_string(m) + "x3");
  }
  if (!pose.allFinite()) {
    throw InvalidInput("commanded effector pose is not finite");
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (embed_dim < 1 || num_layers < 1 || num_heads < 1 || ff_hidden < 1 || decoder_hidden < 1) {
    throw InvalidInput("ModelConfig: all sizes must be positive");
  }
  if (embed_dim % num_heads != 0) {
    throw InvalidInput("ModelConfig: embed_dim " + std::to_string(embed_dim) +
                       " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (!(position_scale > 0.0) || !(motion_scale > 0.0) || !(output_scale > 0.0)) {
    throw InvalidInput("ModelConfig: feature scales must be positive");
  }
}

ModelParams ModelParams::zeros(const ModelConfig& config) {
  config.validate();
  const int d = config.embed_dim;
  ModelParams p;
  p.config = config;
  p.proj1 = make_linear(kFeatureWidth, d);
  p.proj2 = make_linear(d, d);
  p.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (EncoderLayer& l : p.layers) {
    l.norm1 = make_norm(d);
    l.query = make_linear(d, d);
    l.key = make_linear(d, d);
    l.value = make_linear(d, d);
    l.out = make_linear(d, d);
    l.norm2 = make_norm(d);
    l.ff1 = make_linear(d, config.ff_hidden);
    l.ff2 = make_linear(config.ff_hidden, d);
  }
  p.dec1 = make_linear(d, config.decoder_hidden);
  p.dec2 = make_linear(config.decoder_hidden, 3);
  return p;
}

ModelParams ModelParams::initialize(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = zeros(config);
  std::mt19937_64 rng(seed);
  auto fill = [&rng](Linear& l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.weight.rows()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = u(rng);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias.data()[i] = u(rng);
  };
  fill(p.proj1);
  fill(p.proj2);
  for (EncoderLayer& l : p.layers) {
    fill(l.query);
    fill(l.key);
    fill(l.value);
    fill(l.out);
    fill(l.ff1);
    fill(l.ff2);
  }
  fill(p.dec1);
  // dec2 stays zero: the untrained model predicts no object motion.
  return p;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for_each_block([&n](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

void ModelParams::validate() const {
  config.validate();
  const ModelParams shape = zeros(config);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> expected;
  shape.for_each_block([&](const std::string&, const Mat& m) { expected.emplace_back(m.rows(), m.cols()); });
  if (layers.size() != shape.layers.size()) {
    throw InvalidShape("ModelParams: layer count does not match config");
  }
  std::size_t i = 0;
  for_each_block([&](const std::string& name, const Mat& m) {
    if (m.rows() != expected[i].first || m.cols() != expected[i].second) {
      throw InvalidShape("ModelParams: block " + name + " has shape " + std::to_string(m.rows()) +
                         "x" + std::to_string(m.cols()) + ", expected " +
                         std::to_string(expected[i].first) + "x" + std::to_string(expected[i].second));
    }
    if (!m.allFinite()) {
      throw InvalidInput("ModelParams: block " + name + " has non-finite entries");
    }
    ++i;
  });
}

bool ModelParams::operator==(const ModelParams& other) const {
  if (!(config == other.config) || layers.size() != other.layers.size()) return false;
  std::vector<const Mat*> mine;
  for_each_block([&](const std::string&, const Mat& m) { mine.push_back(&m); });
  std::size_t i = 0;
  bool same = true;
  other.for_each_block([&](const std::string&, const Mat& m) {
    const Mat& a = *mine[i++];
    if (a.rows() != m.rows() || a.cols() != m.cols() || a != m) same = false;
  });
  return same;
}

// ---- BoundModel ----------------------------------------------------------------

BoundModel::BoundModel(ad::Tape& tape, const ModelParams& params, bool trainable)
    : tape_(&tape), config_(params.config) {
  params.validate();
  proj1_ = bind(tape, params.proj1, trainable, blocks_);
  proj2_ = bind(tape, params.proj2, trainable, blocks_);
  for (const EncoderLayer& l : params.layers) {
    BoundEncoderLayer b;
    b.norm1 = bind(tape, l.norm1, trainable, blocks_);
    b.query = bind(tape, l.query, trainable, blocks_);
    b.key = bind(tape, l.key, trainable, blocks_);
    b.value = bind(tape, l.value, trainable, blocks_);
    b.out = bind(tape, l.out, trainable, blocks_);
    b.norm2 = bind(tape, l.norm2, trainable, blocks_);
    b.ff1 = bind(tape, l.ff1, trainable, blocks_);
    b.ff2 = bind(tape, l.ff2, trainable, blocks_);
    layers_.push_back(b);
  }
  dec1_ = bind(tape, params.dec1, trainable, blocks_);
  dec2_ = bind(tape, params.dec2, trainable, blocks_);
}

ad::Var BoundModel::features(const ad::Var& positions, const Mat& one_hot,
                             const ad::Var& motion) const {
  Mat offset(1, 3);
  offset << -config_.position_offset[0], -config_.position_offset[1], -config_.position_offset[2];
  const ad::Var parts[] = {
      ad::scale(ad::add_row(positions, tape_->constant(offset)), config_.position_scale),
      tape_->constant(one_hot),
      ad::scale(motion, config_.motion_scale),
  };
  return ad::concat_cols(parts);
}

ad::Var BoundModel::embed(const ad::Var& features) const {
  if (features.cols() != kFeatureWidth) {
    throw InvalidShape("embed: feature rows must have width " + std::to_string(kFeatureWidth));
  }
  return apply(proj2_, ad::gelu(apply(proj1_, features)));
}

ad::Var BoundModel::transition(ad::Var z, AttentionMap* capture) const {
  if (z.cols() != config_.embed_dim) {
    throw InvalidShape("transition: embedding width mismatch");
  }
  const int heads = config_.num_heads;
  const Eigen::Index head_dim = config_.embed_dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  if (capture) capture->clear();
  for (const BoundEncoderLayer& layer : layers_) {
    const ad::Var h = ad::layer_norm_rows(z, layer.norm1.gain, layer.norm1.bias);
    const ad::Var q = apply(layer.query, h);
    const ad::Var k = apply(layer.key, h);
    const ad::Var v = apply(layer.value, h);
    std::vector<ad::Var> head_out;
    std::vector<Mat> maps;
    for (int hd = 0; hd < heads; ++hd) {
      const Eigen::Index start = hd * head_dim;
      const ad::Var qh = ad::slice_cols(q, start, head_dim);
      const ad::Var kh = ad::slice_cols(k, start, head_dim);
      const ad::Var vh = ad::slice_cols(v, start, head_dim);
      const ad::Var weights =
          ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt));
      if (capture) maps.push_back(weights.value());
      head_out.push_back(ad::matmul(weights, vh));
    }
    if (capture) capture->push_back(std::move(maps));
    z = z + apply(layer.out, ad::concat_cols(head_out));
    const ad::Var h2 = ad::layer_norm_rows(z, layer.norm2.gain, layer.norm2.bias);
    z = z + apply(layer.ff2, ad::gelu(apply(layer.ff1, h2)));
  }
  return z;
}

ad::Var BoundModel::decode(const ad::Var& z) const {
  if (z.cols() != config_.embed_dim) {
    throw InvalidShape("decode: embedding width mismatch");
  }
  return ad::scale(apply(dec2_, ad::gelu(apply(dec1_, z))), config_.output_scale);
}

std::vector<TapeRolloutStep> rollout_on_tape(const BoundModel& model, const ParticleSet& initial,
                                             std::span<const Mat> ee_trajectory, int steps) {
  if (steps < 1) {
    throw InvalidInput("rollout: steps must be at least 1");
  }
  if (static_cast<int>(ee_trajectory.size()) < steps) {
    throw InvalidInput("rollout: effector trajectory has " + std::to_string(ee_trajectory.size()) +
                       " poses, need " + std::to_string(steps));
  }
  ad::Tape& tape = model.tape();
  const auto ee_rows = initial.effector_rows();
  const Mat one_hot = initial.material_one_hot();
  const Eigen::Index n = initial.size();

  ad::Var pos = tape.constant(initial.positions());
  ad::Var motion = tape.constant(initial.motion());
  Mat prev_ee = initial.effector_positions();

  std::vector<TapeRolloutStep> out;
  out.reserve(static_cast<std::size_t>(steps));
  for (int j = 0; j < steps; ++j) {
    const Mat& next_ee = ee_trajectory[static_cast<std::size_t>(j)];
    check_ee_pose(next_ee, initial.num_effectors());
    const ad::Var z = model.transition(model.embed(model.features(pos, one_hot, motion)), nullptr);
    const ad::Var disp = model.decode(z);
    const ad::Var next = ad::overwrite_rows(pos + disp, ee_rows, next_ee);

    const Mat ee_delta = next_ee - prev_ee;
    if (model.config().feed_back_object_motion) {
      motion = ad::overwrite_rows(next - pos, ee_rows, ee_delta);
    } else {
      Mat m = Mat::Zero(n, 3);
      for (std::size_t k = 0; k < ee_rows.size(); ++k) {
        m.row(ee_rows[k]) = ee_delta.row(static_cast<Eigen::Index>(k));
      }
      motion = tape.constant(std::move(m));
    }
    prev_ee = next_ee;
    pos = next;
    out.push_back(TapeRolloutStep{next, disp});
  }
  return out;
}

// ---- value-level operations ------------------------------------------------------

Mat particle_features(const ParticleSet& state) {
  Mat f(state.size(), kFeatureWidth);
  f.leftCols(3) = state.positions();
  f.middleCols(3, kNumMaterials) = state.material_one_hot();
  f.rightCols(3) = state.motion();
  return f;
}

Mat embed_particles(const ParticleSet& state, const ModelParams& params) {
  ad::Tape tape;
  BoundModel model(tape, params, false);
  const ad::Var pos = tape.constant(state.positions());
  const ad::Var motion = tape.constant(state.motion());
  return model.embed(model.features(pos, state.material_one_hot(), motion)).value();
}

TransitionResult dynamics_transition(const Mat& z, const ModelParams& params,
                                     bool capture_attention) {
  check_embeddings(z, params.config, "dynamics_transition");
  ad::Tape tape;
  BoundModel model(tape, params, false);
  TransitionResult result;
  AttentionMap maps;
  result.embeddings = model.transition(tape.constant(z), capture_attention ? &maps : nullptr).value();
  if (capture_attention) result.attention = std::move(maps);
  return result;
}

Mat predict_displacements(const Mat& z_next, const ModelParams& params) {
  check_embeddings(z_next, params.config, "predict_displacements");
  ad::Tape tape;
  BoundModel model(tape, params, false);
  return model.decode(tape.constant(z_next)).value();
}

ParticleSet forward(const ParticleSet& state, const Mat& next_ee_positions,
                    const ModelParams& params) {
  return rollout(state, std::span<const Mat>(&next_ee_positions, 1), params, 1).front();
}

std::vector<ParticleSet> rollout(const ParticleSet& initial, std::span<const Mat> ee_trajectory,
                                 const ModelParams& params, int steps) {
  ad::Tape tape;
  BoundModel model(tape, params, false);
  const auto tape_steps = rollout_on_tape(model, initial, ee_trajectory, steps);
  std::vector<ParticleSet> out;
  out.reserve(tape_steps.size());
  Mat prev_ee = initial.effector_positions();
  for (std::size_t j = 0; j < tape_steps.size(); ++j) {
    const Mat& next_ee = ee_trajectory[j];
    out.push_back(initial.advanced(tape_steps[j].positions.value(), next_ee - prev_ee));
    prev_ee = next_ee;
  }
  return out;
}

}  // namespace pformer
