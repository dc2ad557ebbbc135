#include "pformer/pointcloud_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pformer/errors.hpp"

namespace pformer {
namespace {

Mat distance_matrix(const Mat& a, const Mat& b) {
  Mat d(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      d(i, j) = (a.row(i) - b.row(j)).norm();
    }
  }
  return d;
}

// Per row, the average of d under softmax(-d / tau) weights.
Eigen::VectorXd soft_min_rows(const Mat& d, double tau) {
  Eigen::VectorXd out(d.rows());
  for (Eigen::Index r = 0; r < d.rows(); ++r) {
    const double lo = d.row(r).minCoeff();
    const Eigen::ArrayXd w = (-(d.row(r).array() - lo) / tau).exp().transpose();
    out(r) = (w * d.row(r).array().transpose()).sum() / w.sum();
  }
  return out;
}

double soft_max(const Eigen::VectorXd& v, double beta) {
  const double hi = v.maxCoeff();
  const double s = ((v.array() - hi) * beta).exp().sum();
  return hi + std::log(s) / beta;
}

void check_temperatures(double beta, double tau) {
  if (!(beta > 0.0) || !(tau > 0.0) || !std::isfinite(beta) || !std::isfinite(tau)) {
    throw InvalidInput("soft_hausdorff: temperatures must be positive and finite (beta=" +
                       std::to_string(beta) + ", tau=" + std::to_string(tau) + ")");
  }
}

void check_cloud(const ad::Var& v, const char* what) {
  if (v.cols() != 3 || v.rows() < 1) {
    throw InvalidShape(std::string(what) + ": expected a non-empty n×3 point array, got " +
                       std::to_string(v.rows()) + "x" + std::to_string(v.cols()));
  }
}

}  // namespace

PointSet::PointSet(Mat points) : points_(std::move(points)) {
  if (points_.rows() < 1) {
    throw InvalidInput("PointSet: empty point set");
  }
  if (points_.cols() != 3) {
    throw InvalidShape("PointSet: points must have 3 columns, got " +
                       std::to_string(points_.cols()));
  }
  if (!points_.allFinite()) {
    throw InvalidInput("PointSet: non-finite coordinate");
  }
}

PointSet::PointSet(std::initializer_list<std::array<double, 3>> points)
    : PointSet([&] {
        Mat m(static_cast<Eigen::Index>(points.size()), 3);
        Eigen::Index r = 0;
        for (const auto& p : points) {
          m.row(r++) << p[0], p[1], p[2];
        }
        return m;
      }()) {}

void LossConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw InvalidInput("LossConfig: alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  check_temperatures(beta_max, tau_min);
}

double chamfer_distance(const PointSet& a, const PointSet& b, DistancePower power) {
  Mat d = distance_matrix(a.points(), b.points());
  if (power == DistancePower::kSquared) {
    d = d.cwiseAbs2();
  }
  return d.rowwise().minCoeff().mean() + d.colwise().minCoeff().mean();
}

double directed_hausdorff(const PointSet& a, const PointSet& b) {
  return distance_matrix(a.points(), b.points()).rowwise().minCoeff().maxCoeff();
}

double hausdorff_distance(const PointSet& a, const PointSet& b) {
  const Mat d = distance_matrix(a.points(), b.points());
  return std::max(d.rowwise().minCoeff().maxCoeff(), d.colwise().minCoeff().maxCoeff());
}

double soft_hausdorff(const PointSet& a, const PointSet& b, double beta, double tau) {
  check_temperatures(beta, tau);
  const Mat d = distance_matrix(a.points(), b.points());
  return std::max(soft_max(soft_min_rows(d, tau), beta), soft_max(soft_min_rows(d.transpose(), tau), beta));
}

double hybrid_loss(const PointSet& pred, const PointSet& gt, const LossConfig& cfg) {
  cfg.validate();
  double total = 0.0;
  if (cfg.alpha > 0.0) {
    total += cfg.alpha * chamfer_distance(pred, gt);
  }
  if (cfg.alpha < 1.0) {
    total += (1.0 - cfg.alpha) * soft_hausdorff(pred, gt, cfg.beta_max, cfg.tau_min);
  }
  return total;
}

double tracked_mse(const PointSet& pred, const PointSet& gt) {
  if (pred.size() != gt.size()) {
    throw InvalidInput("tracked_mse: point counts differ (" + std::to_string(pred.size()) +
                       " vs " + std::to_string(gt.size()) + ")");
  }
  return (pred.points() - gt.points()).rowwise().squaredNorm().mean();
}

namespace diff {

ad::Var chamfer_distance(const ad::Var& pred, const ad::Var& gt) {
  check_cloud(pred, "chamfer_distance");
  check_cloud(gt, "chamfer_distance");
  const ad::Var d = ad::pairwise_distance(pred, gt);
  const ad::Var forward = ad::mean(ad::min_rows(d));
  const ad::Var backward = ad::mean(ad::min_rows(ad::transpose(d)));
  return forward + backward;
}

ad::Var soft_hausdorff(const ad::Var& pred, const ad::Var& gt, double beta, double tau) {
  check_cloud(pred, "soft_hausdorff");
  check_cloud(gt, "soft_hausdorff");
  check_temperatures(beta, tau);
  const ad::Var d = ad::pairwise_distance(pred, gt);
  auto directed = [&](const ad::Var& m) {
    const ad::Var w = ad::softmax_rows(ad::scale(m, -1.0 / tau));
    const ad::Var ones = m.tape()->constant(Mat::Ones(m.cols(), 1));
    const ad::Var inner = ad::matmul(ad::mul(w, m), ones);
    return ad::scale(ad::logsumexp_all(ad::scale(inner, beta)), 1.0 / beta);
  };
  const ad::Var ab = directed(d);
  const ad::Var ba = directed(ad::transpose(d));
  // Ties go to the pred -> gt direction.
  return ab.scalar() >= ba.scalar() ? ab : ba;
}

ad::Var hybrid_loss(const ad::Var& pred, const ad::Var& gt, const LossConfig& cfg) {
  cfg.validate();
  if (cfg.alpha >= 1.0) {
    return chamfer_distance(pred, gt);
  }
  if (cfg.alpha <= 0.0) {
    return soft_hausdorff(pred, gt, cfg.beta_max, cfg.tau_min);
  }
  return ad::scale(chamfer_distance(pred, gt), cfg.alpha) +
         ad::scale(soft_hausdorff(pred, gt, cfg.beta_max, cfg.tau_min), 1.0 - cfg.alpha);
}

ad::Var tracked_mse(const ad::Var& pred, const ad::Var& gt) {
  check_cloud(pred, "tracked_mse");
  check_cloud(gt, "tracked_mse");
  if (pred.rows() != gt.rows()) {
    throw InvalidInput("tracked_mse: point counts differ");
  }
  const ad::Var diff = pred - gt;
  return ad::scale(ad::sum(ad::mul(diff, diff)), 1.0 / static_cast<double>(pred.rows()));
}

}  // namespace diff

}  // namespace pformer
