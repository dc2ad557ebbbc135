#include "pformer/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>

namespace pformer::ad {
namespace {

std::string shape_of(const Mat& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

[[noreturn]] void shape_error(const char* op, const Mat& a, const Mat& b) {
  throw InvalidShape(std::string(op) + ": incompatible shapes " + shape_of(a) +
                     " and " + shape_of(b));
}

Tape& tape_of(const Var& v) {
  if (!v.valid()) {
    throw InvalidInput("autodiff: operation on an unbound Var");
  }
  return *v.tape();
}

Tape& common_tape(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (&t != &tape_of(b)) {
    throw InvalidInput("autodiff: operands live on different tapes");
  }
  return t;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kAddRow: return "add_row";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kTranspose: return "transpose";
    case Op::kConcatCols: return "concat_cols";
    case Op::kConcatRows: return "concat_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kGatherRows: return "gather_rows";
    case Op::kOverwriteRows: return "overwrite_rows";
    case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kLayerNormRows: return "layer_norm_rows";
    case Op::kGelu: return "gelu";
    case Op::kRelu: return "relu";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kLogSumExpRows: return "logsumexp_rows";
    case Op::kLogSumExpAll: return "logsumexp_all";
    case Op::kMinRows: return "min_rows";
    case Op::kPairwiseDistance: return "pairwise_distance";
  }
  return "unknown";
}

// ---- Var / Tape -------------------------------------------------------------

const Mat& Var::value() const { return tape_of(*this).value(id_); }
const Mat& Var::grad() const { return tape_of(*this).grad(id_); }
bool Var::requires_grad() const { return tape_of(*this).requires_grad(id_); }

double Var::scalar() const {
  const Mat& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw InvalidShape("Var::scalar: value is " + shape_of(v));
  }
  return v(0, 0);
}

Var Tape::leaf(Mat value) {
  nodes_.push_back(Node{Op::kLeaf, std::move(value), Mat(), true, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Mat value) {
  nodes_.push_back(Node{Op::kConstant, std::move(value), Mat(), false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Op op, Mat value, std::initializer_list<Var> parents,
                 BackwardFn backward) {
  return record(op, std::move(value),
                std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(Op op, Mat value, std::span<const Var> parents,
                 BackwardFn backward) {
  bool any = false;
  for (const Var& p : parents) {
    if (p.tape() != this) {
      throw InvalidInput("autodiff: parent belongs to a different tape");
    }
    any = any || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{op, std::move(value), Mat(), any,
                        any ? std::move(backward) : BackwardFn()});
  return Var(this, nodes_.size() - 1);
}

const Mat& Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.size() == 0) {
    // Lazily materialised zero gradient; logically const.
    auto& g = const_cast<Mat&>(n.grad);
    g = Mat::Zero(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

Mat& Tape::grad_accumulator(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) {
    n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) {
    throw InvalidInput("backward: loss belongs to a different tape");
  }
  const Mat& v = nodes_[loss.id()].value;
  if (v.rows() != 1 || v.cols() != 1) {
    throw InvalidInput("backward: loss must be scalar, got " + shape_of(v));
  }
  for (Node& n : nodes_) {
    n.grad.resize(0, 0);
  }
  grad_accumulator(loss.id())(0, 0) = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) {
      continue;
    }
    n.backward(*this, i);
  }
}

// ---- primitive operations ---------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  if (av.cols() != bv.rows()) shape_error("matmul", av, bv);
  Mat out = av * bv;
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(Op::kMatmul, std::move(out), {a, b},
                  [ia, ib](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    if (tp.requires_grad(ia)) {
                      tp.grad_accumulator(ia).noalias() += g * tp.value(ib).transpose();
                    }
                    if (tp.requires_grad(ib)) {
                      tp.grad_accumulator(ib).noalias() += tp.value(ia).transpose() * g;
                    }
                  });
}

Var add(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error("add", av, bv);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(Op::kAdd, av + bv, {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Mat& g = tp.grad(self);
    if (tp.requires_grad(ia)) tp.grad_accumulator(ia) += g;
    if (tp.requires_grad(ib)) tp.grad_accumulator(ib) += g;
  });
}

Var add_row(const Var& a, const Var& row) {
  Tape& t = common_tape(a, row);
  const Mat& av = a.value();
  const Mat& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) shape_error("add_row", av, rv);
  Mat out = av.rowwise() + rv.row(0);
  const std::size_t ia = a.id(), ir = row.id();
  return t.record(Op::kAddRow, std::move(out), {a, row},
                  [ia, ir](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    if (tp.requires_grad(ia)) tp.grad_accumulator(ia) += g;
                    if (tp.requires_grad(ir)) tp.grad_accumulator(ir) += g.colwise().sum();
                  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error("sub", av, bv);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(Op::kSub, av - bv, {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Mat& g = tp.grad(self);
    if (tp.requires_grad(ia)) tp.grad_accumulator(ia) += g;
    if (tp.requires_grad(ib)) tp.grad_accumulator(ib) -= g;
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error("mul", av, bv);
  Mat out = av.cwiseProduct(bv);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(Op::kMul, std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Mat& g = tp.grad(self);
    if (tp.requires_grad(ia)) tp.grad_accumulator(ia) += g.cwiseProduct(tp.value(ib));
    if (tp.requires_grad(ib)) tp.grad_accumulator(ib) += g.cwiseProduct(tp.value(ia));
  });
}

Var scale(const Var& a, double s) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  return t.record(Op::kScale, a.value() * s, {a}, [ia, s](Tape& tp, std::size_t self) {
    tp.grad_accumulator(ia) += tp.grad(self) * s;
  });
}

Var add_scalar(const Var& a, double s) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  Mat out = a.value().array() + s;
  return t.record(Op::kAddScalar, std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    tp.grad_accumulator(ia) += tp.grad(self);
  });
}

Var transpose(const Var& a) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  Mat out = a.value().transpose();
  return t.record(Op::kTranspose, std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    tp.grad_accumulator(ia) += tp.grad(self).transpose();
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidShape("concat_cols: no inputs");
  Tape& t = tape_of(parts[0]);
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) shape_error("concat_cols", parts[0].value(), p.value());
    cols += p.cols();
  }
  Mat out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> layout;
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    layout.emplace_back(p.id(), c);
    c += p.cols();
  }
  return t.record(Op::kConcatCols, std::move(out), parts,
                  [layout](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    for (const auto& [id, start] : layout) {
                      if (!tp.requires_grad(id)) continue;
                      Mat& acc = tp.grad_accumulator(id);
                      acc += g.middleCols(start, acc.cols());
                    }
                  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidShape("concat_rows: no inputs");
  Tape& t = tape_of(parts[0]);
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) shape_error("concat_rows", parts[0].value(), p.value());
    rows += p.rows();
  }
  Mat out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> layout;
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    layout.emplace_back(p.id(), r);
    r += p.rows();
  }
  return t.record(Op::kConcatRows, std::move(out), parts,
                  [layout](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    for (const auto& [id, start] : layout) {
                      if (!tp.requires_grad(id)) continue;
                      Mat& acc = tp.grad_accumulator(id);
                      acc += g.middleRows(start, acc.rows());
                    }
                  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw InvalidShape("slice_cols: range [" + std::to_string(start) + ", " +
                       std::to_string(start + count) + ") outside " +
                       shape_of(a.value()));
  }
  const std::size_t ia = a.id();
  Mat out = a.value().middleCols(start, count);
  return t.record(Op::kSliceCols, std::move(out), {a},
                  [ia, start, count](Tape& tp, std::size_t self) {
                    tp.grad_accumulator(ia).middleCols(start, count) += tp.grad(self);
                  });
}

Var gather_rows(const Var& a, std::span<const Eigen::Index> rows) {
  Tape& t = tape_of(a);
  const Mat& av = a.value();
  Mat out(static_cast<Eigen::Index>(rows.size()), av.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= av.rows()) {
      throw InvalidShape("gather_rows: row index out of range");
    }
    out.row(static_cast<Eigen::Index>(i)) = av.row(rows[i]);
  }
  const std::size_t ia = a.id();
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  return t.record(Op::kGatherRows, std::move(out), {a},
                  [ia, idx = std::move(idx)](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    Mat& acc = tp.grad_accumulator(ia);
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                      acc.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                    }
                  });
}

Var overwrite_rows(const Var& a, std::span<const Eigen::Index> rows,
                   const Mat& replacement) {
  Tape& t = tape_of(a);
  const Mat& av = a.value();
  if (replacement.rows() != static_cast<Eigen::Index>(rows.size()) ||
      replacement.cols() != av.cols()) {
    shape_error("overwrite_rows", av, replacement);
  }
  Mat out = av;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= av.rows()) {
      throw InvalidShape("overwrite_rows: row index out of range");
    }
    out.row(rows[i]) = replacement.row(static_cast<Eigen::Index>(i));
  }
  const std::size_t ia = a.id();
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  return t.record(Op::kOverwriteRows, std::move(out), {a},
                  [ia, idx = std::move(idx)](Tape& tp, std::size_t self) {
                    Mat g = tp.grad(self);
                    for (Eigen::Index r : idx) g.row(r).setZero();
                    tp.grad_accumulator(ia) += g;
                  });
}

Var softmax_rows(const Var& a) {
  Tape& t = tape_of(a);
  const Mat& av = a.value();
  Mat out(av.rows(), av.cols());
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    const double m = av.row(r).maxCoeff();
    out.row(r) = (av.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  const std::size_t ia = a.id();
  return t.record(Op::kSoftmaxRows, std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    const Mat& y = tp.value(self);
    const Mat& g = tp.grad(self);
    Mat& acc = tp.grad_accumulator(ia);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      acc.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  Tape& t = common_tape(x, gain);
  common_tape(x, bias);
  const Mat& xv = x.value();
  const Eigen::Index n = xv.rows(), d = xv.cols();
  if (gain.rows() != 1 || gain.cols() != d) shape_error("layer_norm_rows", xv, gain.value());
  if (bias.rows() != 1 || bias.cols() != d) shape_error("layer_norm_rows", xv, bias.value());
  Mat xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Mat out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return t.record(
      Op::kLayerNormRows, std::move(out), {x, gain, bias},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& tp, std::size_t self) {
        const Mat& g = tp.grad(self);
        if (tp.requires_grad(ig)) {
          tp.grad_accumulator(ig) += g.cwiseProduct(xhat).colwise().sum();
        }
        if (tp.requires_grad(ib)) {
          tp.grad_accumulator(ib) += g.colwise().sum();
        }
        if (tp.requires_grad(ix)) {
          const auto gain_row = tp.value(ig).row(0).array();
          Mat& acc = tp.grad_accumulator(ix);
          for (Eigen::Index r = 0; r < g.rows(); ++r) {
            Eigen::ArrayXd dxhat = (g.row(r).array() * gain_row).transpose();
            const double m1 = dxhat.mean();
            const double m2 = (dxhat * xhat.row(r).array().transpose()).mean();
            acc.row(r).array() +=
                (inv_std(r) * (dxhat - m1 - xhat.row(r).array().transpose() * m2)).transpose();
          }
        }
      });
}

Var gelu(const Var& a) {
  Tape& t = tape_of(a);
  const Mat& av = a.value();
  Mat out = av.unaryExpr([](double x) { return x * normal_cdf(x); });
  const std::size_t ia = a.id();
  return t.record(Op::kGelu, std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    const Mat& x = tp.value(ia);
    const Mat deriv = x.unaryExpr([](double v) { return normal_cdf(v) + v * normal_pdf(v); });
    tp.grad_accumulator(ia) += tp.grad(self).cwiseProduct(deriv);
  });
}

Var relu(const Var& a) {
  Tape& t = tape_of(a);
  Mat out = a.value().cwiseMax(0.0);
  const std::size_t ia = a.id();
  return t.record(Op::kRelu, std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    const Mat& x = tp.value(ia);
    const Mat mask = (x.array() > 0.0).cast<double>();
    tp.grad_accumulator(ia) += tp.grad(self).cwiseProduct(mask);
  });
}

Var exp(const Var& a) {
  Tape& t = tape_of(a);
  Mat out = a.value().array().exp();
  const std::size_t ia = a.id();
  return t.record(Op::kExp, std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    tp.grad_accumulator(ia) += tp.grad(self).cwiseProduct(tp.value(self));
  });
}

Var log(const Var& a) {
  Tape& t = tape_of(a);
  if ((a.value().array() <= 0.0).any()) {
    throw InvalidInput("log: non-positive argument");
  }
  Mat out = a.value().array().log();
  const std::size_t ia = a.id();
  return t.record(Op::kLog, std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    tp.grad_accumulator(ia).array() += tp.grad(self).array() / tp.value(ia).array();
  });
}

Var sum(const Var& a) {
  Tape& t = tape_of(a);
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  const std::size_t ia = a.id();
  return t.record(Op::kSum, std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    tp.grad_accumulator(ia).array() += tp.grad(self)(0, 0);
  });
}

Var mean(const Var& a) {
  Tape& t = tape_of(a);
  const double count = static_cast<double>(a.value().size());
  if (count == 0) throw InvalidShape("mean: empty input");
  Mat out(1, 1);
  out(0, 0) = a.value().sum() / count;
  const std::size_t ia = a.id();
  return t.record(Op::kMean, std::move(out), {a}, [ia, count](Tape& tp, std::size_t self) {
    tp.grad_accumulator(ia).array() += tp.grad(self)(0, 0) / count;
  });
}

Var logsumexp_rows(const Var& a) {
  Tape& t = tape_of(a);
  const Mat& av = a.value();
  if (av.cols() == 0) throw InvalidShape("logsumexp_rows: no columns");
  Mat out(av.rows(), 1);
  Mat soft(av.rows(), av.cols());
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    const double m = av.row(r).maxCoeff();
    soft.row(r) = (av.row(r).array() - m).exp();
    const double s = soft.row(r).sum();
    out(r, 0) = m + std::log(s);
    soft.row(r) /= s;
  }
  const std::size_t ia = a.id();
  return t.record(Op::kLogSumExpRows, std::move(out), {a},
                  [ia, soft = std::move(soft)](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    tp.grad_accumulator(ia) +=
                        (soft.array().colwise() * g.col(0).array()).matrix();
                  });
}

Var logsumexp_all(const Var& a) {
  Tape& t = tape_of(a);
  const Mat& av = a.value();
  if (av.size() == 0) throw InvalidShape("logsumexp_all: empty input");
  const double m = av.maxCoeff();
  Mat soft = (av.array() - m).exp();
  const double s = soft.sum();
  soft /= s;
  Mat out(1, 1);
  out(0, 0) = m + std::log(s);
  const std::size_t ia = a.id();
  return t.record(Op::kLogSumExpAll, std::move(out), {a},
                  [ia, soft = std::move(soft)](Tape& tp, std::size_t self) {
                    tp.grad_accumulator(ia) += soft * tp.grad(self)(0, 0);
                  });
}

Var min_rows(const Var& a) {
  Tape& t = tape_of(a);
  const Mat& av = a.value();
  if (av.cols() == 0) throw InvalidShape("min_rows: no columns");
  Mat out(av.rows(), 1);
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(av.rows()));
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < av.cols(); ++c) {
      if (av(r, c) < av(r, best)) best = c;
    }
    arg[static_cast<std::size_t>(r)] = best;
    out(r, 0) = av(r, best);
  }
  const std::size_t ia = a.id();
  return t.record(Op::kMinRows, std::move(out), {a},
                  [ia, arg = std::move(arg)](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    Mat& acc = tp.grad_accumulator(ia);
                    for (std::size_t r = 0; r < arg.size(); ++r) {
                      const auto row = static_cast<Eigen::Index>(r);
                      acc(row, arg[r]) += g(row, 0);
                    }
                  });
}

Var pairwise_distance(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  if (av.cols() != bv.cols()) shape_error("pairwise_distance", av, bv);
  const Eigen::Index n = av.rows(), m = bv.rows();
  Mat out(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      out(i, j) = (av.row(i) - bv.row(j)).norm();
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(Op::kPairwiseDistance, std::move(out), {a, b},
                  [ia, ib](Tape& tp, std::size_t self) {
                    const Mat& g = tp.grad(self);
                    const Mat& d = tp.value(self);
                    const Mat& av = tp.value(ia);
                    const Mat& bv = tp.value(ib);
                    const bool ga = tp.requires_grad(ia), gb = tp.requires_grad(ib);
                    Mat* acc_a = ga ? &tp.grad_accumulator(ia) : nullptr;
                    Mat* acc_b = gb ? &tp.grad_accumulator(ib) : nullptr;
                    for (Eigen::Index i = 0; i < d.rows(); ++i) {
                      for (Eigen::Index j = 0; j < d.cols(); ++j) {
                        if (d(i, j) <= 0.0 || g(i, j) == 0.0) continue;
                        const auto dir = (av.row(i) - bv.row(j)) * (g(i, j) / d(i, j));
                        if (ga) acc_a->row(i) += dir;
                        if (gb) acc_b->row(j) -= dir;
                      }
                    }
                  });
}

// ---- gradient checking -------------------------------------------------------

GradCheckResult finite_difference_check(const ScalarGraph& f, std::vector<Mat> params,
                                        double step, double floor) {
  if (!(step > 0.0)) {
    throw InvalidInput("finite_difference_check: step must be positive");
  }
  std::vector<Mat> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const Mat& p : params) leaves.push_back(tape.leaf(p));
    Var loss = f(tape, leaves);
    tape.backward(loss);
    for (const Var& l : leaves) analytic.push_back(l.grad());
  }

  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const Mat& p : params) leaves.push_back(tape.constant(p));
    return f(tape, leaves).scalar();
  };

  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Eigen::Index i = 0; i < params[p].size(); ++i) {
      double& coord = params[p].data()[i];
      const double saved = coord;
      coord = saved + step;
      const double up = evaluate();
      coord = saved - step;
      const double down = evaluate();
      coord = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[p].data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.coordinates;
      if (rel > result.max_rel_error || std::isnan(rel)) {
        result.max_rel_error = std::isnan(rel) ? std::numeric_limits<double>::infinity() : rel;
        result.worst_param = p;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace pformer::ad
