#pragma once

// Independent scalar re-implementations used as test oracles, plus small
// random-input helpers. Nothing here calls into the library's numerics.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "pformer/model.hpp"
#include "pformer/types.hpp"

namespace oracle {

using pformer::Mat;

inline Mat random_points(std::mt19937_64& rng, int n, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(n, 3);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) m(i, c) = u(rng);
  return m;
}

inline Mat random_matrix(std::mt19937_64& rng, int r, int c, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Mat m(r, c);
  for (int i = 0; i < r * c; ++i) m.data()[i] = g(rng);
  return m;
}

inline double dist(const Mat& a, int i, const Mat& b, int j) {
  double s = 0;
  for (int c = 0; c < 3; ++c) s += (a(i, c) - b(j, c)) * (a(i, c) - b(j, c));
  return std::sqrt(s);
}

inline double nearest(const Mat& a, int i, const Mat& b) {
  double best = std::numeric_limits<double>::infinity();
  for (int j = 0; j < b.rows(); ++j) best = std::min(best, dist(a, i, b, j));
  return best;
}

inline double chamfer(const Mat& a, const Mat& b, bool squared = false) {
  double ab = 0, ba = 0;
  for (int i = 0; i < a.rows(); ++i) {
    const double d = nearest(a, i, b);
    ab += squared ? d * d : d;
  }
  for (int j = 0; j < b.rows(); ++j) {
    const double d = nearest(b, j, a);
    ba += squared ? d * d : d;
  }
  return ab / a.rows() + ba / b.rows();
}

inline double directed_hausdorff(const Mat& a, const Mat& b) {
  double worst = 0;
  for (int i = 0; i < a.rows(); ++i) worst = std::max(worst, nearest(a, i, b));
  return worst;
}

inline double hausdorff(const Mat& a, const Mat& b) {
  return std::max(directed_hausdorff(a, b), directed_hausdorff(b, a));
}

// Softmin-weighted mean distance per point, log-sum-exp over points, larger
// direction wins.
inline double soft_directed(const Mat& a, const Mat& b, double beta, double tau) {
  std::vector<double> inner;
  for (int i = 0; i < a.rows(); ++i) {
    const double lo = nearest(a, i, b);
    double wsum = 0, acc = 0;
    for (int j = 0; j < b.rows(); ++j) {
      const double d = dist(a, i, b, j);
      const double w = std::exp(-(d - lo) / tau);
      wsum += w;
      acc += w * d;
    }
    inner.push_back(acc / wsum);
  }
  const double hi = *std::max_element(inner.begin(), inner.end());
  double s = 0;
  for (double v : inner) s += std::exp(beta * (v - hi));
  return hi + std::log(s) / beta;
}

inline double soft_hausdorff(const Mat& a, const Mat& b, double beta, double tau) {
  return std::max(soft_directed(a, b, beta, tau), soft_directed(b, a, beta, tau));
}

inline double tracked_mse(const Mat& a, const Mat& b) {
  double s = 0;
  for (int i = 0; i < a.rows(); ++i) s += dist(a, i, b, i) * dist(a, i, b, i);
  return s / a.rows();
}

// ---- model ------------------------------------------------------------------

using Rows = std::vector<std::vector<double>>;

inline Rows to_rows(const Mat& m) {
  Rows r(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) r[i][j] = m(i, j);
  return r;
}

inline Mat to_mat(const Rows& r) {
  Mat m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.empty() ? 0 : r[0].size()));
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t j = 0; j < r[i].size(); ++j) m(i, j) = r[i][j];
  return m;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Rows linear(const Rows& x, const pformer::Linear& l) {
  Rows out(x.size(), std::vector<double>(static_cast<std::size_t>(l.weight.cols())));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (int o = 0; o < l.weight.cols(); ++o) {
      double s = l.bias(0, o);
      for (int k = 0; k < l.weight.rows(); ++k) s += x[i][k] * l.weight(k, o);
      out[i][o] = s;
    }
  }
  return out;
}

inline Rows apply_gelu(Rows x) {
  for (auto& r : x)
    for (auto& v : r) v = gelu(v);
  return x;
}

inline Rows layer_norm(const Rows& x, const pformer::LayerNorm& n) {
  Rows out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mu = 0, var = 0;
    for (double v : x[i]) mu += v;
    mu /= static_cast<double>(x[i].size());
    for (double v : x[i]) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x[i].size());
    for (std::size_t j = 0; j < x[i].size(); ++j) {
      out[i][j] = (x[i][j] - mu) / std::sqrt(var + 1e-5) * n.gain(0, j) + n.bias(0, j);
    }
  }
  return out;
}

inline Rows add(Rows a, const Rows& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

// Scaled features: (position - offset) * position_scale, one-hot, motion * motion_scale.
inline Rows features(const Mat& pos, const std::vector<pformer::Material>& mats, const Mat& motion,
                     const pformer::ModelConfig& c) {
  Rows f;
  for (int i = 0; i < pos.rows(); ++i) {
    std::vector<double> r;
    for (int k = 0; k < 3; ++k) r.push_back((pos(i, k) - c.position_offset[k]) * c.position_scale);
    for (int k = 0; k < pformer::kNumMaterials; ++k) r.push_back(static_cast<int>(mats[i]) == k ? 1.0 : 0.0);
    for (int k = 0; k < 3; ++k) r.push_back(motion(i, k) * c.motion_scale);
    f.push_back(r);
  }
  return f;
}

inline Rows embed(const Rows& feats, const pformer::ModelParams& p) {
  return linear(apply_gelu(linear(feats, p.proj1)), p.proj2);
}

inline Rows transition(Rows z, const pformer::ModelParams& p, std::vector<std::vector<Mat>>* maps = nullptr) {
  const int d = p.config.embed_dim, heads = p.config.num_heads, hd = d / heads;
  const std::size_t n = z.size();
  for (const auto& layer : p.layers) {
    const Rows h = layer_norm(z, layer.norm1);
    const Rows q = linear(h, layer.query), k = linear(h, layer.key), v = linear(h, layer.value);
    Rows cat(n, std::vector<double>(static_cast<std::size_t>(d), 0.0));
    std::vector<Mat> layer_maps;
    for (int head = 0; head < heads; ++head) {
      Mat w(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n);
        double hi = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
          double dot = 0;
          for (int c = 0; c < hd; ++c) dot += q[i][head * hd + c] * k[j][head * hd + c];
          s[j] = dot / std::sqrt(static_cast<double>(hd));
          hi = std::max(hi, s[j]);
        }
        double tot = 0;
        for (double& x : s) tot += (x = std::exp(x - hi));
        for (std::size_t j = 0; j < n; ++j) w(i, j) = s[j] / tot;
        for (int c = 0; c < hd; ++c) {
          double acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += w(i, j) * v[j][head * hd + c];
          cat[i][head * hd + c] = acc;
        }
      }
      layer_maps.push_back(w);
    }
    if (maps) maps->push_back(layer_maps);
    z = add(z, linear(cat, layer.out));
    const Rows h2 = layer_norm(z, layer.norm2);
    z = add(z, linear(apply_gelu(linear(h2, layer.ff1)), layer.ff2));
  }
  return z;
}

inline Rows decode(const Rows& z, const pformer::ModelParams& p) {
  Rows out = linear(apply_gelu(linear(z, p.dec1)), p.dec2);
  for (auto& r : out)
    for (auto& v : r) v *= p.config.output_scale;
  return out;
}

// Fills every block with N(0, scale) entries (layer-norm gains around 1).
inline pformer::ModelParams random_params(const pformer::ModelConfig& c, std::mt19937_64& rng, double scale = 0.3) {
  pformer::ModelParams p = pformer::ModelParams::zeros(c);
  std::normal_distribution<double> g(0.0, scale);
  p.for_each_block([&](const std::string& name, Mat& m) {
    const bool gain = name.size() > 5 && name.compare(name.size() - 5, 5, ".gain") == 0;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (gain ? 1.0 : 0.0) + g(rng);
  });
  return p;
}

}  // namespace oracle
