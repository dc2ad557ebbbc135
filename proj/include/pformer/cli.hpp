#pragma once

// Command-line front end: simulate, train, eval, plan, attn-export.
//
// Every run appends one JSON line to <out>/manifest.jsonl recording the
// subcommand, resolved configuration, seed, inputs, outputs, status and
// timing. Output files are written atomically.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "pformer/kv_config.hpp"
#include "pformer/model.hpp"
#include "pformer/planner.hpp"

namespace pformer::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,          // unexpected error
  kUsage = 2,            // bad flags or configuration
  kIo = 3,               // unreadable input or unwritable output
  kFormat = 4,           // malformed or foreign binary file
  kDiverged = 5,         // training produced a non-finite loss
  kIncompatible = 6,     // checkpoint and dataset disagree
  kGoalNotReached = 7,   // closed-loop control ended above the goal threshold
};

inline constexpr const char* kOutDirEnv = "PFORMER_OUT_DIR";
inline constexpr const char* kVersion = "0.1.0";

// Model architecture keys: embed_dim, num_layers, num_heads, ff_hidden,
// decoder_hidden, position_scale, motion_scale, output_scale,
// feed_back_object_motion.
KvConfig model_config_to_kv(const ModelConfig& c);
ModelConfig model_config_from_kv(const KvConfig& kv);

// Planner keys: plan_horizon, samples, temperature, noise_std, iterations,
// terminal_weight, collision_penalty, infeasible_penalty, goal_threshold.
// Action bounds default to PlanConfig::for_task(spec).
KvConfig plan_config_to_kv(const PlanConfig& c);
PlanConfig plan_config_from_kv(const KvConfig& kv, const TaskSpec& spec);

// Material-block order used by attention export: rows sorted by material
// code (rigid, granular, rope, cloth, effector), stable within a block.
std::vector<Eigen::Index> material_block_order(const std::vector<Material>& materials);

// Binary P5 graymap with value round(255 * clamp(m, 0, 1)).
std::string encode_pgm(const Mat& m);
Mat decode_pgm(const std::string& bytes);

// Target point set as CSV rows "x,y,z"; an optional non-numeric header line
// is skipped.
Mat parse_points_csv(const std::string& text, const std::string& source);

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pformer::cli
