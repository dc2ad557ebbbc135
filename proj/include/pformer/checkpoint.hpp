#pragma once

// Versioned binary checkpoint:
//
//   "PFMCKPT\0"  magic (8 bytes)
//   u32          format version
//   config       i32 embed_dim, num_layers, num_heads, ff_hidden, decoder_hidden;
//                f64 position_offset[3], position_scale, motion_scale, output_scale;
//                u8 feed_back_object_motion
//   meta         string task id; u32 count + one material code byte per particle
//   u32          block count, then per block: string name, i64 rows, i64 cols,
//                rows*cols little-endian f64 (row-major)
//   u8           training state present; if 1: i64 epochs completed, u64
//                optimizer step, first then second moments as matrices in block
//                order, u64 count + f64 per-epoch losses
//
// Strings are u32 length + bytes. All integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pformer/model.hpp"

namespace pformer {

inline constexpr char kCheckpointMagic[8] = {'P', 'F', 'M', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Scene the model was trained on; used to refuse incompatible datasets.
struct CheckpointMeta {
  std::string task;
  std::vector<Material> materials;

  bool operator==(const CheckpointMeta&) const = default;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<Mat> first_moment;
  std::vector<Mat> second_moment;
};

struct TrainingState {
  std::int64_t epochs_completed = 0;
  AdamState optimizer;
  std::vector<double> loss_curve;
};

struct Checkpoint {
  ModelParams params;
  CheckpointMeta meta;
  std::optional<TrainingState> training;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string bytes, const std::string& source = "<memory>");

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pformer
