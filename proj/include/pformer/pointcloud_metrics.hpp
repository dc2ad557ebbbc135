#pragma once

// Set-to-set distances between point clouds and the hybrid training loss.
//
// Every function here is pure. Exact variants work on PointSet; the
// differentiable variants under `diff` build the same quantities on an
// autodiff tape so training can backpropagate through them.

#include <array>
#include <initializer_list>

#include "pformer/autodiff.hpp"
#include "pformer/types.hpp"

namespace pformer {

// Non-empty, finite set of 3-D points stored one per row.
class PointSet {
 public:
  explicit PointSet(Mat points);
  PointSet(std::initializer_list<std::array<double, 3>> points);

  const Mat& points() const { return points_; }
  Eigen::Index size() const { return points_.rows(); }

 private:
  Mat points_;
};

struct LossConfig {
  double alpha = 0.5;
  double beta_max = 50.0;  // soft-max temperature (outer max)
  double tau_min = 0.02;   // soft-min temperature (inner min), meters

  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

enum class DistancePower { kEuclidean, kSquared };

double chamfer_distance(const PointSet& a, const PointSet& b,
                        DistancePower power = DistancePower::kEuclidean);

// max over p in a of min over q in b of |p - q|.
double directed_hausdorff(const PointSet& a, const PointSet& b);
double hausdorff_distance(const PointSet& a, const PointSet& b);

// Smooth Hausdorff surrogate. Per point, a soft-min over its distances to
// the other set: the distance average under softmax(-d / tau) weights. Per
// direction, a soft-max over those values: logsumexp(beta * v) / beta. The
// result is the larger of the two directed values. Both smoothings
// overestimate, so the result is >= the exact distance and decreases to it
// as beta grows and tau shrinks.
double soft_hausdorff(const PointSet& a, const PointSet& b, double beta, double tau);

double hybrid_loss(const PointSet& pred, const PointSet& gt, const LossConfig& cfg);

// Mean squared distance between corresponding rows.
double tracked_mse(const PointSet& pred, const PointSet& gt);

namespace diff {

// Each takes n×3 and m×3 Vars (gt may be a tape constant) and returns a 1×1 Var.
ad::Var chamfer_distance(const ad::Var& pred, const ad::Var& gt);
ad::Var soft_hausdorff(const ad::Var& pred, const ad::Var& gt, double beta, double tau);
ad::Var hybrid_loss(const ad::Var& pred, const ad::Var& gt, const LossConfig& cfg);
ad::Var tracked_mse(const ad::Var& pred, const ad::Var& gt);

}  // namespace diff

}  // namespace pformer
