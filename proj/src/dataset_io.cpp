#include "pformer/dataset_io.hpp"

#include <cstdio>

#include "pformer/binary_io.hpp"
#include "pformer/errors.hpp"

namespace pformer {

std::string encode_dataset(const Dataset& ds) {
  io::ByteWriter w;
  w.put_bytes(std::string_view(kDatasetMagic, sizeof(kDatasetMagic)));
  w.put_u32(kDatasetVersion);
  w.put_string(ds.spec.to_kv().to_text());
  w.put_u32(static_cast<std::uint32_t>(ds.episodes.size()));
  for (const Episode& ep : ds.episodes) {
    std::uint32_t n = 0, m = 0;
    for (Material mat : ep.materials) (mat == Material::kEffector ? m : n)++;
    w.put_u32(static_cast<std::uint32_t>(ep.horizon()));
    w.put_u32(n);
    w.put_u32(m);
    for (Material mat : ep.materials) w.put_u8(static_cast<std::uint8_t>(mat));
    for (int t = 0; t < ep.horizon(); ++t) {
      const Mat& p = ep.positions[static_cast<std::size_t>(t)];
      const Mat& u = ep.motions[static_cast<std::size_t>(t)];
      if (p.rows() != n + m || p.cols() != 3 || u.rows() != p.rows() || u.cols() != 3) {
        throw InvalidShape("encode_dataset: frame shape does not match the material list");
      }
      w.put_values(p);
      w.put_values(u);
    }
  }
  return w.bytes();
}

Dataset decode_dataset(std::string bytes, const std::string& source) {
  io::ByteReader r(std::move(bytes), source);
  if (r.take(sizeof(kDatasetMagic)) != std::string_view(kDatasetMagic, sizeof(kDatasetMagic))) {
    throw FormatError(source + ": not a dataset file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError(source + ": unsupported dataset version " + std::to_string(version));
  }
  Dataset ds;
  try {
    ds.spec = TaskSpec::from_kv(KvConfig::parse(r.string(), source + " (task spec)"));
  } catch (const InvalidInput& e) {
    throw FormatError(source + ": bad task spec: " + e.what());
  }
  const std::uint32_t episodes = r.u32();
  for (std::uint32_t e = 0; e < episodes; ++e) {
    Episode ep;
    const std::uint32_t horizon = r.u32(), n = r.u32(), m = r.u32();
    const std::uint64_t rows = static_cast<std::uint64_t>(n) + m;
    if (rows > r.remaining()) throw FormatError(source + ": truncated episode header");
    for (std::uint64_t i = 0; i < rows; ++i) {
      const Material mat = material_from_code(r.u8());
      if ((i < n) == (mat == Material::kEffector)) {
        throw FormatError(source + ": episode " + std::to_string(e) + ": material codes disagree with N and M");
      }
      ep.materials.push_back(mat);
    }
    if (horizon > 0 && rows * 48 > r.remaining() / horizon) {
      throw FormatError(source + ": episode " + std::to_string(e) + " is truncated");
    }
    for (std::uint32_t t = 0; t < horizon; ++t) {
      ep.positions.push_back(r.values(static_cast<std::int64_t>(rows), 3));
      ep.motions.push_back(r.values(static_cast<std::int64_t>(rows), 3));
    }
    ds.episodes.push_back(std::move(ep));
  }
  if (!r.at_end()) throw FormatError(source + ": trailing bytes after dataset");
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_dataset(ds));
}

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(io::read_file(path), path.string()); }

std::string digest_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace pformer
