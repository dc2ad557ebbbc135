#pragma once

// Transformer particle dynamics model.
//
// Each particle's feature [position, material one-hot, motion] is projected
// to a d-dimensional embedding, a stack of pre-norm self-attention encoder
// layers mixes the whole set (no positional encodings), and a shared MLP
// decodes a displacement per particle. Effector rows of a prediction are
// replaced by the commanded effector pose.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pformer/autodiff.hpp"
#include "pformer/particle_set.hpp"
#include "pformer/types.hpp"

namespace pformer {

struct ModelConfig {
  int embed_dim = 64;
  int num_layers = 3;
  int num_heads = 4;
  int ff_hidden = 128;
  int decoder_hidden = 64;

  // Fixed input/output scaling applied inside the projector and decoder so
  // that network activations are O(1) at workspace scale.
  std::array<double, 3> position_offset{0.35, 0.275, 0.0};
  double position_scale = 10.0;   // 1 unit = 10 cm
  double motion_scale = 100.0;    // 1 unit = 1 cm per step
  double output_scale = 0.01;     // decoder unit = 1 cm per step

  // Feed each step's predicted object displacement back as the object motion
  // input during rollout. Off: object motion input stays zero.
  bool feed_back_object_motion = false;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

inline constexpr int kFeatureWidth = 3 + kNumMaterials + 3;

struct Linear {
  Mat weight;  // in × out
  Mat bias;    // 1 × out
};

struct LayerNorm {
  Mat gain;  // 1 × d
  Mat bias;  // 1 × d
};

struct EncoderLayer {
  LayerNorm norm1;
  Linear query, key, value, out;
  LayerNorm norm2;
  Linear ff1, ff2;
};

struct ModelParams {
  ModelConfig config;
  Linear proj1, proj2;
  std::vector<EncoderLayer> layers;
  Linear dec1, dec2;

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, unit/zero
  // layer norms, zero final decoder layer.
  static ModelParams initialize(const ModelConfig& config, std::uint64_t seed);
  // All blocks zero-shaped to the config (layer-norm gains included).
  static ModelParams zeros(const ModelConfig& config);

  // Visits named blocks in a fixed order.
  template <class F>
  void for_each_block(F&& f);
  template <class F>
  void for_each_block(F&& f) const;

  std::size_t parameter_count() const;
  void validate() const;
  bool operator==(const ModelParams& other) const;
};

// Per layer, per head (N+M)×(N+M) row-stochastic attention matrices.
using AttentionMap = std::vector<std::vector<Mat>>;

// ---- tape-level model ----------------------------------------------------------

struct BoundLinear {
  ad::Var weight, bias;
};
struct BoundLayerNorm {
  ad::Var gain, bias;
};
struct BoundEncoderLayer {
  BoundLayerNorm norm1;
  BoundLinear query, key, value, out;
  BoundLayerNorm norm2;
  BoundLinear ff1, ff2;
};

// Model parameters placed on a tape, as leaves (trainable) or constants.
class BoundModel {
 public:
  BoundModel(ad::Tape& tape, const ModelParams& params, bool trainable);

  ad::Tape& tape() const { return *tape_; }
  const ModelConfig& config() const { return config_; }
  // Leaves in ModelParams::for_each_block order.
  const std::vector<ad::Var>& blocks() const { return blocks_; }

  ad::Var embed(const ad::Var& features) const;
  ad::Var transition(ad::Var z, AttentionMap* capture) const;
  // Displacement in meters (output scale applied).
  ad::Var decode(const ad::Var& z) const;

  // Scaled n×10 features for a state whose positions live on the tape.
  ad::Var features(const ad::Var& positions, const Mat& one_hot, const ad::Var& motion) const;

 private:
  ad::Tape* tape_;
  ModelConfig config_;
  BoundLinear proj1_, proj2_;
  std::vector<BoundEncoderLayer> layers_;
  BoundLinear dec1_, dec2_;
  std::vector<ad::Var> blocks_;
};

struct TapeRolloutStep {
  ad::Var positions;     // (N+M)×3 prediction after effector override
  ad::Var displacement;  // (N+M)×3 raw decoder output in meters
};

// Autoregressive rollout on a tape. ee_trajectory[j] holds the commanded
// effector positions (M×3) for step j+1.
std::vector<TapeRolloutStep> rollout_on_tape(const BoundModel& model, const ParticleSet& initial,
                                             std::span<const Mat> ee_trajectory, int steps);

// ---- value-level operations ------------------------------------------------------

// Raw (unscaled) n×10 feature rows: position, material one-hot, motion.
Mat particle_features(const ParticleSet& state);

Mat embed_particles(const ParticleSet& state, const ModelParams& params);

struct TransitionResult {
  Mat embeddings;
  std::optional<AttentionMap> attention;
};
TransitionResult dynamics_transition(const Mat& z, const ModelParams& params,
                                     bool capture_attention);

Mat predict_displacements(const Mat& z_next, const ModelParams& params);

// One step: positions + displacement, effector rows set to next_ee_positions
// and effector motion to next_ee_positions minus the current effector rows.
ParticleSet forward(const ParticleSet& state, const Mat& next_ee_positions,
                    const ModelParams& params);

std::vector<ParticleSet> rollout(const ParticleSet& initial, std::span<const Mat> ee_trajectory,
                                 const ModelParams& params, int steps);

// ---- template definitions ------------------------------------------------------

template <class F>
void ModelParams::for_each_block(F&& f) {
  auto linear = [&](const std::string& name, Linear& l) {
    f(name + ".weight", l.weight);
    f(name + ".bias", l.bias);
  };
  auto norm = [&](const std::string& name, LayerNorm& n) {
    f(name + ".gain", n.gain);
    f(name + ".bias", n.bias);
  };
  linear("proj.0", proj1);
  linear("proj.1", proj2);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i);
    EncoderLayer& l = layers[i];
    norm(p + ".norm1", l.norm1);
    linear(p + ".attn.query", l.query);
    linear(p + ".attn.key", l.key);
    linear(p + ".attn.value", l.value);
    linear(p + ".attn.out", l.out);
    norm(p + ".norm2", l.norm2);
    linear(p + ".ff.0", l.ff1);
    linear(p + ".ff.1", l.ff2);
  }
  linear("decoder.0", dec1);
  linear("decoder.1", dec2);
}

template <class F>
void ModelParams::for_each_block(F&& f) const {
  const_cast<ModelParams*>(this)->for_each_block(
      [&](const std::string& name, Mat& m) { f(name, static_cast<const Mat&>(m)); });
}

}  // namespace pformer
