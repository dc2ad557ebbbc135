#pragma once

#include <Eigen/Core>

namespace pformer {

// Dense row-major matrix used for every numeric array in the project.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec3 = Eigen::Vector3d;

}  // namespace pformer
