#pragma once

// Reverse-mode automatic differentiation over a define-by-run tape.
//
// A Tape owns every node created during one forward pass. Vars are cheap
// handles (tape pointer + node index). Nodes are appended in evaluation
// order, so replaying them backwards visits each node after all of its
// consumers. A Tape is single-threaded; separate Tapes are independent.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "pformer/errors.hpp"
#include "pformer/types.hpp"

namespace pformer::ad {

class Tape;

enum class Op {
  kLeaf,
  kConstant,
  kMatmul,
  kAdd,
  kAddRow,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kTranspose,
  kConcatCols,
  kConcatRows,
  kSliceCols,
  kGatherRows,
  kOverwriteRows,
  kSoftmaxRows,
  kLayerNormRows,
  kGelu,
  kRelu,
  kExp,
  kLog,
  kSum,
  kMean,
  kLogSumExpRows,
  kLogSumExpAll,
  kMinRows,
  kPairwiseDistance,
};

const char* op_name(Op op);

class Var {
 public:
  Var() = default;

  const Mat& value() const;
  // Zero matrix of the value's shape until backward() has run.
  const Mat& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Called with the tape and the index of the node whose gradient is ready.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Mat value);
  Var constant(Mat value);

  // Records a computed node. The backward function is dropped when no parent
  // requires a gradient.
  Var record(Op op, Mat value, std::initializer_list<Var> parents,
             BackwardFn backward);
  Var record(Op op, Mat value, std::span<const Var> parents,
             BackwardFn backward);

  // Resets all gradients, seeds d(loss)/d(loss) = 1 and propagates. Leaves
  // not reachable from the loss end with zero gradient.
  void backward(const Var& loss);

  const Mat& value(std::size_t id) const { return nodes_[id].value; }
  const Mat& grad(std::size_t id) const;
  // Gradient buffer for accumulation from inside backward functions.
  Mat& grad_accumulator(std::size_t id);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  Op op(std::size_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::kConstant;
    Mat value;
    Mat grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
};

// ---- primitive operations -------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
// a (n×c) + row (1×c) broadcast over rows.
Var add_row(const Var& a, const Var& row);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var transpose(const Var& a);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var& a, std::span<const Eigen::Index> rows);
// Copy of `a` with the listed rows replaced by constant rows of
// `replacement`; no gradient flows into the replaced rows of `a`.
Var overwrite_rows(const Var& a, std::span<const Eigen::Index> rows,
                   const Mat& replacement);
Var softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias,
                    double eps = 1e-5);
Var gelu(const Var& a);
Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var logsumexp_rows(const Var& a);
Var logsumexp_all(const Var& a);
// Row-wise minimum; ties resolve to the lowest column index.
Var min_rows(const Var& a);
// Euclidean distances between rows of a (n×k) and rows of b (m×k). The
// subgradient at zero distance is zero.
Var pairwise_distance(const Var& a, const Var& b);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// ---- gradient checking -----------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  Eigen::Index worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

// Builds a scalar on a fresh tape from leaf parameters.
using ScalarGraph = std::function<Var(Tape&, std::span<const Var>)>;

// Central differences for every coordinate of every parameter, compared
// against backward(). Relative error is |a - n| / max(|a|, |n|, floor); the
// floor keeps near-zero gradients from dominating through roundoff.
GradCheckResult finite_difference_check(const ScalarGraph& f,
                                        std::vector<Mat> params, double step,
                                        double floor = 1e-6);

}  // namespace pformer::ad
