#include "pformer/particle_set.hpp"

#include <string>

#include "pformer/errors.hpp"

namespace pformer {

std::string_view material_name(Material m) {
  switch (m) {
    case Material::kRigid: return "rigid";
    case Material::kGranular: return "granular";
    case Material::kRope: return "rope";
    case Material::kCloth: return "cloth";
    case Material::kEffector: return "effector";
  }
  return "unknown";
}

Material material_from_code(std::uint8_t code) {
  if (code > static_cast<std::uint8_t>(Material::kEffector)) {
    throw FormatError("unknown material code " + std::to_string(code));
  }
  return static_cast<Material>(code);
}

ParticleSet::ParticleSet(Mat positions, std::vector<Material> materials, Mat motion)
    : positions_(std::move(positions)), materials_(std::move(materials)), motion_(std::move(motion)) {
  const Eigen::Index n = positions_.rows();
  if (positions_.cols() != 3 || motion_.cols() != 3 || motion_.rows() != n ||
      static_cast<Eigen::Index>(materials_.size()) != n) {
    throw InvalidShape("ParticleSet: positions, motion and materials must describe the same " +
                       std::to_string(n) + " particles with 3 coordinates");
  }
  if (!positions_.allFinite() || !motion_.allFinite()) {
    throw InvalidInput("ParticleSet: non-finite position or motion");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (materials_[static_cast<std::size_t>(i)] == Material::kEffector) {
      effector_rows_.push_back(i);
    } else {
      object_rows_.push_back(i);
      if (!motion_.row(i).isZero(0.0)) {
        throw InvalidInput("ParticleSet: object particle " + std::to_string(i) +
                           " has non-zero motion");
      }
    }
  }
  if (object_rows_.empty()) {
    throw InvalidInput("ParticleSet: need at least one object particle");
  }
}

Mat ParticleSet::material_one_hot() const {
  Mat out = Mat::Zero(size(), kNumMaterials);
  for (Eigen::Index i = 0; i < size(); ++i) {
    const Material m = materials_[static_cast<std::size_t>(i)];
    if (m != Material::kEffector) {
      out(i, static_cast<int>(m)) = 1.0;
    }
  }
  return out;
}

Mat ParticleSet::object_positions() const {
  Mat out(num_objects(), 3);
  for (std::size_t k = 0; k < object_rows_.size(); ++k) {
    out.row(static_cast<Eigen::Index>(k)) = positions_.row(object_rows_[k]);
  }
  return out;
}

Mat ParticleSet::effector_positions() const {
  Mat out(num_effectors(), 3);
  for (std::size_t k = 0; k < effector_rows_.size(); ++k) {
    out.row(static_cast<Eigen::Index>(k)) = positions_.row(effector_rows_[k]);
  }
  return out;
}

ParticleSet ParticleSet::advanced(Mat positions, const Mat& effector_motion) const {
  if (effector_motion.rows() != num_effectors() || effector_motion.cols() != 3) {
    throw InvalidShape("ParticleSet::advanced: effector motion must be M×3");
  }
  Mat motion = Mat::Zero(size(), 3);
  for (std::size_t k = 0; k < effector_rows_.size(); ++k) {
    motion.row(effector_rows_[k]) = effector_motion.row(static_cast<Eigen::Index>(k));
  }
  return ParticleSet(std::move(positions), materials_, std::move(motion));
}

ParticleSet ParticleSet::permuted(std::span<const Eigen::Index> perm) const {
  if (static_cast<Eigen::Index>(perm.size()) != size()) {
    throw InvalidShape("ParticleSet::permuted: permutation length mismatch");
  }
  Mat pos(size(), 3), mot(size(), 3);
  std::vector<Material> mats(perm.size());
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const Eigen::Index src = perm[i];
    if (src < 0 || src >= size() || seen[static_cast<std::size_t>(src)]) {
      throw InvalidInput("ParticleSet::permuted: not a permutation");
    }
    seen[static_cast<std::size_t>(src)] = true;
    pos.row(static_cast<Eigen::Index>(i)) = positions_.row(src);
    mot.row(static_cast<Eigen::Index>(i)) = motion_.row(src);
    mats[i] = materials_[static_cast<std::size_t>(src)];
  }
  return ParticleSet(std::move(pos), std::move(mats), std::move(mot));
}

}  // namespace pformer
