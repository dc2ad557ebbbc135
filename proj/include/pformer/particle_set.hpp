#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "pformer/types.hpp"

namespace pformer {

// Material vocabulary. Effector particles carry an all-zero material row.
enum class Material : std::uint8_t {
  kRigid = 0,
  kGranular = 1,
  kRope = 2,
  kCloth = 3,
  kEffector = 4,
};

inline constexpr int kNumMaterials = 4;

std::string_view material_name(Material m);
Material material_from_code(std::uint8_t code);

// Positions, materials and per-step motion for N object particles and M
// end-effector particles. Object motion rows are always zero; effector motion
// rows hold the last commanded pose delta.
class ParticleSet {
 public:
  ParticleSet(Mat positions, std::vector<Material> materials, Mat motion);

  const Mat& positions() const { return positions_; }
  const Mat& motion() const { return motion_; }
  const std::vector<Material>& materials() const { return materials_; }

  Eigen::Index size() const { return positions_.rows(); }
  Eigen::Index num_objects() const { return static_cast<Eigen::Index>(object_rows_.size()); }
  Eigen::Index num_effectors() const { return static_cast<Eigen::Index>(effector_rows_.size()); }
  bool is_ee(Eigen::Index i) const { return materials_[static_cast<std::size_t>(i)] == Material::kEffector; }

  std::span<const Eigen::Index> object_rows() const { return object_rows_; }
  std::span<const Eigen::Index> effector_rows() const { return effector_rows_; }

  // (N+M)×4 one-hot rows; effector rows are zero.
  Mat material_one_hot() const;
  Mat object_positions() const;
  Mat effector_positions() const;

  // Same materials, new positions and effector motion (object motion stays 0).
  ParticleSet advanced(Mat positions, const Mat& effector_motion) const;
  // Row i of the result is row perm[i] of this set.
  ParticleSet permuted(std::span<const Eigen::Index> perm) const;

 private:
  Mat positions_;
  std::vector<Material> materials_;
  Mat motion_;
  std::vector<Eigen::Index> object_rows_;
  std::vector<Eigen::Index> effector_rows_;
};

}  // namespace pformer
