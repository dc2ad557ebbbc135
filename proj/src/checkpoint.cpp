#include "pformer/checkpoint.hpp"

#include <string_view>

#include "pformer/binary_io.hpp"

namespace pformer {
namespace {

void put_config(io::ByteWriter& w, const ModelConfig& c) {
  w.put_i32(c.embed_dim);
  w.put_i32(c.num_layers);
  w.put_i32(c.num_heads);
  w.put_i32(c.ff_hidden);
  w.put_i32(c.decoder_hidden);
  for (double v : c.position_offset) w.put_f64(v);
  w.put_f64(c.position_scale);
  w.put_f64(c.motion_scale);
  w.put_f64(c.output_scale);
  w.put_u8(c.feed_back_object_motion ? 1 : 0);
}

ModelConfig get_config(io::ByteReader& r) {
  ModelConfig c;
  c.embed_dim = r.i32();
  c.num_layers = r.i32();
  c.num_heads = r.i32();
  c.ff_hidden = r.i32();
  c.decoder_hidden = r.i32();
  for (double& v : c.position_offset) v = r.f64();
  c.position_scale = r.f64();
  c.motion_scale = r.f64();
  c.output_scale = r.f64();
  c.feed_back_object_motion = r.u8() != 0;
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw FormatError(r.source() + ": invalid model config: " + e.what());
  }
  return c;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  ckpt.params.validate();
  io::ByteWriter w;
  w.put_bytes(std::string_view(kCheckpointMagic, sizeof(kCheckpointMagic)));
  w.put_u32(kCheckpointVersion);
  put_config(w, ckpt.params.config);

  w.put_string(ckpt.meta.task);
  w.put_u32(static_cast<std::uint32_t>(ckpt.meta.materials.size()));
  for (Material m : ckpt.meta.materials) w.put_u8(static_cast<std::uint8_t>(m));

  std::uint32_t blocks = 0;
  ckpt.params.for_each_block([&](const std::string&, const Mat&) { ++blocks; });
  w.put_u32(blocks);
  ckpt.params.for_each_block([&](const std::string& name, const Mat& m) {
    w.put_string(name);
    w.put_matrix(m);
  });

  w.put_u8(ckpt.training ? 1 : 0);
  if (ckpt.training) {
    const TrainingState& t = *ckpt.training;
    if (t.optimizer.first_moment.size() != blocks || t.optimizer.second_moment.size() != blocks) {
      throw InvalidInput("checkpoint: optimizer state does not match parameter blocks");
    }
    w.put_i64(t.epochs_completed);
    w.put_u64(t.optimizer.step);
    for (const Mat& m : t.optimizer.first_moment) w.put_matrix(m);
    for (const Mat& m : t.optimizer.second_moment) w.put_matrix(m);
    w.put_u64(t.loss_curve.size());
    for (double v : t.loss_curve) w.put_f64(v);
  }
  return w.bytes();
}

Checkpoint decode_checkpoint(std::string bytes, const std::string& source) {
  io::ByteReader r(std::move(bytes), source);
  if (r.take(sizeof(kCheckpointMagic)) != std::string_view(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw FormatError(source + ": not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.params = ModelParams::zeros(get_config(r));

  ckpt.meta.task = r.string();
  const std::uint32_t count = r.u32();
  if (count > r.remaining()) throw FormatError(source + ": truncated material list");
  ckpt.meta.materials.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) ckpt.meta.materials.push_back(material_from_code(r.u8()));

  std::uint32_t expected = 0;
  ckpt.params.for_each_block([&](const std::string&, const Mat&) { ++expected; });
  const std::uint32_t blocks = r.u32();
  if (blocks != expected) {
    throw FormatError(source + ": expected " + std::to_string(expected) + " parameter blocks, found " +
                      std::to_string(blocks));
  }
  ckpt.params.for_each_block([&](const std::string& name, Mat& m) {
    const std::string stored = r.string();
    if (stored != name) {
      throw FormatError(source + ": expected block " + name + ", found " + stored);
    }
    Mat v = r.matrix();
    if (v.rows() != m.rows() || v.cols() != m.cols()) {
      throw FormatError(source + ": block " + name + " has the wrong shape");
    }
    m = std::move(v);
  });

  if (r.u8() != 0) {
    TrainingState t;
    t.epochs_completed = r.i64();
    t.optimizer.step = r.u64();
    for (std::uint32_t i = 0; i < blocks; ++i) t.optimizer.first_moment.push_back(r.matrix());
    for (std::uint32_t i = 0; i < blocks; ++i) t.optimizer.second_moment.push_back(r.matrix());
    const std::uint64_t n = r.u64();
    if (n > r.remaining() / 8) throw FormatError(source + ": truncated loss curve");
    for (std::uint64_t i = 0; i < n; ++i) t.loss_curve.push_back(r.f64());
    ckpt.training = std::move(t);
  }
  if (!r.at_end()) {
    throw FormatError(source + ": trailing bytes after checkpoint");
  }
  try {
    ckpt.params.validate();
  } catch (const std::exception& e) {
    throw FormatError(source + ": " + e.what());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

}  // namespace pformer
