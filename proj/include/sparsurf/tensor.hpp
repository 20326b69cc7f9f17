// Copyright 2026 The Sparsurf Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

/**
 * Reverse-mode automatic differentiation over dense 64-bit real arrays.
 *
 * The engine is define-by-run: every forward primitive appends one node to
 * a Tape, saving whatever its adjoint needs; Tape::backward walks the nodes
 * once in reverse insertion order and accumulates gradients. Values are
 * cheap handles (tape pointer + node id) into the tape's storage.
 *
 * Tensors are rank-1 or rank-2, row-major. Matrix products run on BLAS;
 * everything else is plain loops. Sized for networks up to ~10^6 scalars on
 * a single core.
 *
 * Basic usage:
 * @code
 *   ParamStore store;
 *   store.add("w", {3, 1}, {0.1, 0.2, 0.3});
 *
 *   Tape tape;
 *   Value x = tape.constant_matrix(2, 3, {1, 2, 3, 4, 5, 6});
 *   Value w = tape.param(store, "w");
 *   Value loss = sum(matmul(x, w));
 *   tape.backward(loss);
 *   // store gradient is now in tape.grad_of("w")
 * @endcode
 */

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sparsurf {

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// OpenBLAS built with DYNAMIC_ARCH falls back to a Prescott-era SSE2 kernel
// when cpuid reports a masked virtual-machine CPU model it does not know.
// Pin a kernel matching the instruction sets actually present before the
// library initializes, unless the user already chose one.
inline void pin_blas_kernel() {
  static const bool once = [] {
#if defined(__x86_64__) || defined(__i386__)
    if (std::getenv("OPENBLAS_CORETYPE") == nullptr) {
      if (__builtin_cpu_supports("avx512f"))
        setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 0);
      else if (__builtin_cpu_supports("avx2"))
        setenv("OPENBLAS_CORETYPE", "HASWELL", 0);
    }
#endif
    return true;
  }();
  (void)once;
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
  pin_blas_kernel();
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace detail

/// Tensor extents. Rank 1 ({n}) or rank 2 ({rows, cols}).
using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i)
    out += (i ? "x" : "") + std::to_string(s[i]);
  return out + "]";
}

enum class OpKind {
  kConstant,
  kParam,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,
  kAddBias,
  kRowScale,
  kLeakyRelu,
  kSoftmaxRows,
  kSoftmaxGroups,
  kSumGroups,
  kRepeatRows,
  kGatherRows,
  kConcatRows,
  kL2NormRows,
  kClampMin,
  kAbs,
  kSum,
  kMean,
};

struct TapeNode {
  OpKind kind = OpKind::kConstant;
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // lazily allocated, same numel as data
  int in0 = -1;
  int in1 = -1;
  int iaux = 0;      // per-kind integer payload (group size, ...)
  double daux = 0;   // per-kind scalar payload (scale factor, slope, ...)
  std::vector<int32_t> indices;  // gather indices
  bool requires_grad = false;
  bool is_param = false;
  std::string param_name;
};

class Tape;

/// Handle to one tape node. Copyable, trivially small.
class Value {
 public:
  Value() = default;
  Value(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

  const Shape& shape() const;
  int rows() const { return shape()[0]; }
  int cols() const { return shape().size() == 2 ? shape()[1] : 1; }
  int64_t numel() const { return shape_numel(shape()); }

  const std::vector<double>& data() const;
  const std::vector<double>& grad() const;
  /// Value of a one-element tensor.
  double scalar() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Named trainable arrays plus their Adam moment buffers. Parameters live
/// outside any tape; Tape::param hosts a snapshot of an entry on the tape
/// for one forward/backward pass.
class ParamStore {
 public:
  struct Entry {
    Shape shape;
    std::vector<double> data;
    std::vector<double> m;  // Adam first moment
    std::vector<double> v;  // Adam second moment
  };

  void add(const std::string& name, Shape shape, std::vector<double> data) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw TensorError("param '" + name + "': data size " +
                        std::to_string(data.size()) + " != shape " +
                        shape_str(shape));
    Entry e;
    e.shape = std::move(shape);
    e.m.assign(data.size(), 0.0);
    e.v.assign(data.size(), 0.0);
    e.data = std::move(data);
    entries_[name] = std::move(e);
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  Entry& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw TensorError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Entry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw TensorError("unknown parameter '" + name + "'");
    return it->second;
  }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& [k, e] : entries_) n += shape_numel(e.shape);
    return n;
  }

  // std::map keeps iteration order deterministic.
  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  std::map<std::string, Entry> entries_;
};

/// Append-only computation record. Nodes are topologically ordered by
/// construction; backward visits each exactly once in reverse order.
class Tape {
 public:
  /// With check_every_op, every primitive validates that its inputs and
  /// output are finite (used by tests and gradcheck; costs a scan per op).
  explicit Tape(bool check_every_op = false)
      : check_every_op_(check_every_op) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int size() const { return static_cast<int>(nodes_.size()); }
  TapeNode& node(int id) { return nodes_[id]; }
  const TapeNode& node(int id) const { return nodes_[id]; }

  Value constant(Shape shape, std::vector<double> data) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw TensorError("constant: data size " + std::to_string(data.size()) +
                        " != shape " + shape_str(shape));
    TapeNode n;
    n.kind = OpKind::kConstant;
    n.shape = std::move(shape);
    n.data = std::move(data);
    return push(std::move(n));
  }

  Value constant_matrix(int rows, int cols, std::vector<double> data) {
    return constant({rows, cols}, std::move(data));
  }

  Value constant_vector(std::vector<double> data) {
    int n = static_cast<int>(data.size());
    return constant({n}, std::move(data));
  }

  Value scalar_constant(double x) { return constant({1}, {x}); }

  /// Host a parameter on this tape. The entry's current data is copied in;
  /// after backward, the gradient is read back through grad_of().
  Value param(ParamStore& store, const std::string& name) {
    const ParamStore::Entry& e = store.at(name);
    TapeNode n;
    n.kind = OpKind::kParam;
    n.shape = e.shape;
    n.data = e.data;
    n.requires_grad = true;
    n.is_param = true;
    n.param_name = name;
    Value v = push(std::move(n));
    param_nodes_.emplace_back(name, v.id());
    return v;
  }

  const std::vector<std::pair<std::string, int>>& param_nodes() const {
    return param_nodes_;
  }

  /// Gradient of the named parameter after backward. Empty if the loss did
  /// not depend on it.
  const std::vector<double>& grad_of(const std::string& name) const {
    for (const auto& [n, id] : param_nodes_)
      if (n == name) return nodes_[id].grad;
    throw TensorError("parameter '" + name + "' is not on this tape");
  }

  /// Populate gradients of every parameter node reachable from `loss`.
  /// Non-parameter gradients are released as soon as they are consumed.
  void backward(const Value& loss) {
    if (loss.tape() != this) throw TensorError("backward: foreign value");
    if (loss.numel() != 1)
      throw TensorError("backward: loss must be scalar, got shape " +
                        shape_str(loss.shape()));
    if (!std::isfinite(loss.scalar()))
      throw TensorError("backward: loss is not finite");
    TapeNode& ln = nodes_[loss.id()];
    ln.grad.assign(1, 1.0);
    for (int id = loss.id(); id >= 0; --id) {
      TapeNode& n = nodes_[id];
      if (n.grad.empty()) continue;
      adjoint(id);
      if (!n.is_param && !keep_all_grads) {
        n.grad.clear();
        n.grad.shrink_to_fit();
      }
    }
  }

  /// Keep non-parameter gradients after backward (tests, debugging).
  bool keep_all_grads = false;

  // ---- forward primitives ------------------------------------------------

  Value matmul(const Value& a, const Value& b) {
    const TapeNode& na = nodes_[a.id()];
    const TapeNode& nb = nodes_[b.id()];
    if (na.shape.size() != 2 || nb.shape.size() != 2 ||
        na.shape[1] != nb.shape[0])
      throw TensorError("matmul: incompatible shapes " + shape_str(na.shape) +
                        " * " + shape_str(nb.shape));
    const int m = na.shape[0], k = na.shape[1], n = nb.shape[1];
    TapeNode out = binary(OpKind::kMatmul, a, b, {m, n});
    detail::gemm(false, false, m, n, k, 1.0, na.data.data(), k,
                 nb.data.data(), n, 0.0, out.data.data(), n);
    return push(std::move(out));
  }

  Value add(const Value& a, const Value& b) { return ew2(OpKind::kAdd, a, b); }
  Value sub(const Value& a, const Value& b) { return ew2(OpKind::kSub, a, b); }
  Value mul(const Value& a, const Value& b) { return ew2(OpKind::kMul, a, b); }
  Value div(const Value& a, const Value& b) { return ew2(OpKind::kDiv, a, b); }

  Value scale(const Value& a, double c) {
    TapeNode out = unary(OpKind::kScale, a, nodes_[a.id()].shape);
    out.daux = c;
    const auto& x = nodes_[a.id()].data;
    for (size_t i = 0; i < x.size(); ++i) out.data[i] = c * x[i];
    return push(std::move(out));
  }

  /// m[r,c] + bias[c] for every row r.
  Value add_bias(const Value& m, const Value& bias) {
    const TapeNode& nm = nodes_[m.id()];
    const TapeNode& nb = nodes_[bias.id()];
    const int rows = nm.shape[0];
    const int cols = nm.shape.size() == 2 ? nm.shape[1] : 1;
    if (nb.shape.size() != 1 || nb.shape[0] != cols)
      throw TensorError("add_bias: bias " + shape_str(nb.shape) +
                        " does not match matrix " + shape_str(nm.shape));
    TapeNode out = binary(OpKind::kAddBias, m, bias, nm.shape);
    const double* x = nm.data.data();
    const double* b = nb.data.data();
    double* y = out.data.data();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) y[r * cols + c] = x[r * cols + c] + b[c];
    return push(std::move(out));
  }

  /// m[r,c] * s[r] for every row r.
  Value row_scale(const Value& m, const Value& s) {
    const TapeNode& nm = nodes_[m.id()];
    const TapeNode& ns = nodes_[s.id()];
    const int rows = nm.shape[0];
    const int cols = nm.shape.size() == 2 ? nm.shape[1] : 1;
    if (ns.shape.size() != 1 || ns.shape[0] != rows)
      throw TensorError("row_scale: scale " + shape_str(ns.shape) +
                        " does not match matrix " + shape_str(nm.shape));
    TapeNode out = binary(OpKind::kRowScale, m, s, nm.shape);
    const double* x = nm.data.data();
    const double* sv = ns.data.data();
    double* y = out.data.data();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) y[r * cols + c] = x[r * cols + c] * sv[r];
    return push(std::move(out));
  }

  Value leaky_relu(const Value& a, double slope) {
    TapeNode out = unary(OpKind::kLeakyRelu, a, nodes_[a.id()].shape);
    out.daux = slope;
    const auto& x = nodes_[a.id()].data;
    for (size_t i = 0; i < x.size(); ++i)
      out.data[i] = x[i] > 0 ? x[i] : slope * x[i];
    return push(std::move(out));
  }

  /// Softmax across the columns of each row.
  Value softmax_rows(const Value& a) {
    const TapeNode& na = nodes_[a.id()];
    if (na.shape.size() != 2)
      throw TensorError("softmax_rows: need rank-2, got " +
                        shape_str(na.shape));
    TapeNode out = unary(OpKind::kSoftmaxRows, a, na.shape);
    const int rows = na.shape[0], cols = na.shape[1];
    const double* x = na.data.data();
    double* y = out.data.data();
    for (int r = 0; r < rows; ++r) softmax_span(x + r * cols, y + r * cols,
                                                cols, 1);
    return push(std::move(out));
  }

  /// Softmax down the rows of each consecutive group of `group` rows,
  /// independently per column. Normalizes attention weights over the
  /// neighbors of each query point when neighbor rows are stored
  /// contiguously.
  Value softmax_groups(const Value& a, int group) {
    const TapeNode& na = nodes_[a.id()];
    const int rows = na.shape[0];
    const int cols = na.shape.size() == 2 ? na.shape[1] : 1;
    if (group <= 0 || rows % group != 0)
      throw TensorError("softmax_groups: group " + std::to_string(group) +
                        " does not divide rows " + std::to_string(rows));
    TapeNode out = unary(OpKind::kSoftmaxGroups, a, na.shape);
    out.iaux = group;
    const double* x = na.data.data();
    double* y = out.data.data();
    for (int g = 0; g < rows / group; ++g)
      for (int c = 0; c < cols; ++c)
        softmax_span(x + (g * group) * cols + c, y + (g * group) * cols + c,
                     group, cols);
    return push(std::move(out));
  }

  /// Sum each consecutive group of `group` rows. [R,C] -> [R/group, C].
  Value sum_groups(const Value& a, int group) {
    const TapeNode& na = nodes_[a.id()];
    const int rows = na.shape[0];
    const int cols = na.shape.size() == 2 ? na.shape[1] : 1;
    if (group <= 0 || rows % group != 0)
      throw TensorError("sum_groups: group " + std::to_string(group) +
                        " does not divide rows " + std::to_string(rows));
    Shape oshape = na.shape;
    oshape[0] = rows / group;
    TapeNode out = unary(OpKind::kSumGroups, a, oshape);
    out.iaux = group;
    const double* x = na.data.data();
    double* y = out.data.data();
    for (int g = 0; g < rows / group; ++g)
      for (int i = 0; i < group; ++i)
        for (int c = 0; c < cols; ++c)
          y[g * cols + c] += x[(g * group + i) * cols + c];
    return push(std::move(out));
  }

  /// Repeat each row `group` times. [R,C] -> [R*group, C].
  Value repeat_rows(const Value& a, int group) {
    const TapeNode& na = nodes_[a.id()];
    const int rows = na.shape[0];
    const int cols = na.shape.size() == 2 ? na.shape[1] : 1;
    if (group <= 0) throw TensorError("repeat_rows: group must be positive");
    Shape oshape = na.shape;
    oshape[0] = rows * group;
    TapeNode out = unary(OpKind::kRepeatRows, a, oshape);
    out.iaux = group;
    const double* x = na.data.data();
    double* y = out.data.data();
    for (int r = 0; r < rows; ++r)
      for (int i = 0; i < group; ++i)
        std::copy(x + r * cols, x + (r + 1) * cols,
                  y + (r * group + i) * cols);
    return push(std::move(out));
  }

  /// Rows of `a` selected by index, in order. Duplicate indices allowed.
  Value gather_rows(const Value& a, std::vector<int32_t> idx) {
    const TapeNode& na = nodes_[a.id()];
    const int rows = na.shape[0];
    const int cols = na.shape.size() == 2 ? na.shape[1] : 1;
    for (int32_t i : idx)
      if (i < 0 || i >= rows)
        throw TensorError("gather_rows: index " + std::to_string(i) +
                          " out of range [0," + std::to_string(rows) + ")");
    Shape oshape = na.shape;
    oshape[0] = static_cast<int>(idx.size());
    TapeNode out = unary(OpKind::kGatherRows, a, oshape);
    out.indices = std::move(idx);
    const double* x = na.data.data();
    double* y = out.data.data();
    for (size_t r = 0; r < out.indices.size(); ++r)
      std::copy(x + out.indices[r] * cols, x + (out.indices[r] + 1) * cols,
                y + r * cols);
    return push(std::move(out));
  }

  /// Rows of `a` followed by rows of `b`.
  Value concat_rows(const Value& a, const Value& b) {
    const TapeNode& na = nodes_[a.id()];
    const TapeNode& nb = nodes_[b.id()];
    const int ca = na.shape.size() == 2 ? na.shape[1] : 1;
    const int cb = nb.shape.size() == 2 ? nb.shape[1] : 1;
    if (ca != cb || na.shape.size() != nb.shape.size())
      throw TensorError("concat_rows: column mismatch " +
                        shape_str(na.shape) + " vs " + shape_str(nb.shape));
    Shape oshape = na.shape;
    oshape[0] = na.shape[0] + nb.shape[0];
    TapeNode out = binary(OpKind::kConcatRows, a, b, oshape);
    out.iaux = na.shape[0];
    std::copy(na.data.begin(), na.data.end(), out.data.begin());
    std::copy(nb.data.begin(), nb.data.end(),
              out.data.begin() + na.data.size());
    return push(std::move(out));
  }

  /// Euclidean norm of each row. [R,C] -> [R].
  Value l2norm_rows(const Value& a) {
    const TapeNode& na = nodes_[a.id()];
    const int rows = na.shape[0];
    const int cols = na.shape.size() == 2 ? na.shape[1] : 1;
    TapeNode out = unary(OpKind::kL2NormRows, a, {rows});
    const double* x = na.data.data();
    for (int r = 0; r < rows; ++r) {
      double s = 0;
      for (int c = 0; c < cols; ++c) s += x[r * cols + c] * x[r * cols + c];
      out.data[r] = std::sqrt(s);
    }
    return push(std::move(out));
  }

  Value clamp_min(const Value& a, double floor) {
    TapeNode out = unary(OpKind::kClampMin, a, nodes_[a.id()].shape);
    out.daux = floor;
    const auto& x = nodes_[a.id()].data;
    for (size_t i = 0; i < x.size(); ++i) out.data[i] = std::max(x[i], floor);
    return push(std::move(out));
  }

  Value abs(const Value& a) {
    TapeNode out = unary(OpKind::kAbs, a, nodes_[a.id()].shape);
    const auto& x = nodes_[a.id()].data;
    for (size_t i = 0; i < x.size(); ++i) out.data[i] = std::fabs(x[i]);
    return push(std::move(out));
  }

  Value sum(const Value& a) {
    TapeNode out = unary(OpKind::kSum, a, {1});
    double s = 0;
    for (double x : nodes_[a.id()].data) s += x;
    out.data[0] = s;
    return push(std::move(out));
  }

  Value mean(const Value& a) {
    TapeNode out = unary(OpKind::kMean, a, {1});
    double s = 0;
    for (double x : nodes_[a.id()].data) s += x;
    out.data[0] = s / static_cast<double>(nodes_[a.id()].data.size());
    return push(std::move(out));
  }

 private:
  Value push(TapeNode&& n) {
    if (check_every_op_ && !detail::all_finite(n.data))
      throw TensorError("non-finite result from op kind " +
                        std::to_string(static_cast<int>(n.kind)));
    nodes_.push_back(std::move(n));
    return Value(this, static_cast<int>(nodes_.size()) - 1);
  }

  TapeNode unary(OpKind k, const Value& a, Shape oshape) {
    require_same_tape(a);
    TapeNode n;
    n.kind = k;
    n.shape = std::move(oshape);
    n.data.assign(shape_numel(n.shape), 0.0);
    n.in0 = a.id();
    n.requires_grad = nodes_[a.id()].requires_grad;
    return n;
  }

  TapeNode binary(OpKind k, const Value& a, const Value& b, Shape oshape) {
    require_same_tape(a);
    require_same_tape(b);
    TapeNode n;
    n.kind = k;
    n.shape = std::move(oshape);
    n.data.assign(shape_numel(n.shape), 0.0);
    n.in0 = a.id();
    n.in1 = b.id();
    n.requires_grad =
        nodes_[a.id()].requires_grad || nodes_[b.id()].requires_grad;
    return n;
  }

  Value ew2(OpKind k, const Value& a, const Value& b) {
    const TapeNode& na = nodes_[a.id()];
    const TapeNode& nb = nodes_[b.id()];
    if (na.shape != nb.shape)
      throw TensorError("elementwise op: shape mismatch " +
                        shape_str(na.shape) + " vs " + shape_str(nb.shape));
    TapeNode out = binary(k, a, b, na.shape);
    const double* x = na.data.data();
    const double* y = nb.data.data();
    double* z = out.data.data();
    const size_t n = na.data.size();
    switch (k) {
      case OpKind::kAdd:
        for (size_t i = 0; i < n; ++i) z[i] = x[i] + y[i];
        break;
      case OpKind::kSub:
        for (size_t i = 0; i < n; ++i) z[i] = x[i] - y[i];
        break;
      case OpKind::kMul:
        for (size_t i = 0; i < n; ++i) z[i] = x[i] * y[i];
        break;
      case OpKind::kDiv:
        for (size_t i = 0; i < n; ++i) z[i] = x[i] / y[i];
        break;
      default:
        throw TensorError("ew2: bad kind");
    }
    return push(std::move(out));
  }

  void require_same_tape(const Value& v) {
    if (v.tape() != this) throw TensorError("value belongs to another tape");
  }

  // Stable exp-normalize over `n` elements with stride `stride`.
  static void softmax_span(const double* x, double* y, int n, int stride) {
    double mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i * stride]);
    double s = 0;
    for (int i = 0; i < n; ++i) {
      const double e = std::exp(x[i * stride] - mx);
      y[i * stride] = e;
      s += e;
    }
    const double inv = 1.0 / s;
    for (int i = 0; i < n; ++i) y[i * stride] *= inv;
  }

  std::vector<double>& grad_buf(int id) {
    TapeNode& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
    return n.grad;
  }

  // Accumulate input gradients for node `id` given its output gradient.
  void adjoint(int id) {
    TapeNode& n = nodes_[id];
    const std::vector<double>& g = n.grad;
    switch (n.kind) {
      case OpKind::kConstant:
      case OpKind::kParam:
        return;
      case OpKind::kMatmul: {
        const TapeNode& a = nodes_[n.in0];
        const TapeNode& b = nodes_[n.in1];
        const int m = a.shape[0], k = a.shape[1], nn = b.shape[1];
        if (a.requires_grad) {
          auto& ga = grad_buf(n.in0);
          detail::gemm(false, true, m, k, nn, 1.0, g.data(), nn,
                       b.data.data(), nn, 1.0, ga.data(), k);
        }
        if (b.requires_grad) {
          auto& gb = grad_buf(n.in1);
          detail::gemm(true, false, k, nn, m, 1.0, a.data.data(), k, g.data(),
                       nn, 1.0, gb.data(), nn);
        }
        return;
      }
      case OpKind::kAdd: {
        if (nodes_[n.in0].requires_grad) {
          auto& ga = grad_buf(n.in0);
          for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (nodes_[n.in1].requires_grad) {
          auto& gb = grad_buf(n.in1);
          for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
        return;
      }
      case OpKind::kSub: {
        if (nodes_[n.in0].requires_grad) {
          auto& ga = grad_buf(n.in0);
          for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (nodes_[n.in1].requires_grad) {
          auto& gb = grad_buf(n.in1);
          for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
        return;
      }
      case OpKind::kMul: {
        const auto& xa = nodes_[n.in0].data;
        const auto& xb = nodes_[n.in1].data;
        if (nodes_[n.in0].requires_grad) {
          auto& ga = grad_buf(n.in0);
          for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * xb[i];
        }
        if (nodes_[n.in1].requires_grad) {
          auto& gb = grad_buf(n.in1);
          for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
        }
        return;
      }
      case OpKind::kDiv: {
        const auto& xa = nodes_[n.in0].data;
        const auto& xb = nodes_[n.in1].data;
        if (nodes_[n.in0].requires_grad) {
          auto& ga = grad_buf(n.in0);
          for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / xb[i];
        }
        if (nodes_[n.in1].requires_grad) {
          auto& gb = grad_buf(n.in1);
          for (size_t i = 0; i < g.size(); ++i)
            gb[i] -= g[i] * xa[i] / (xb[i] * xb[i]);
        }
        return;
      }
      case OpKind::kScale: {
        if (!nodes_[n.in0].requires_grad) return;
        auto& ga = grad_buf(n.in0);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += n.daux * g[i];
        return;
      }
      case OpKind::kAddBias: {
        const int rows = n.shape[0];
        const int cols = n.shape.size() == 2 ? n.shape[1] : 1;
        if (nodes_[n.in0].requires_grad) {
          auto& ga = grad_buf(n.in0);
          for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (nodes_[n.in1].requires_grad) {
          auto& gb = grad_buf(n.in1);
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
        }
        return;
      }
      case OpKind::kRowScale: {
        const int rows = n.shape[0];
        const int cols = n.shape.size() == 2 ? n.shape[1] : 1;
        const auto& xm = nodes_[n.in0].data;
        const auto& xs = nodes_[n.in1].data;
        if (nodes_[n.in0].requires_grad) {
          auto& ga = grad_buf(n.in0);
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
              ga[r * cols + c] += g[r * cols + c] * xs[r];
        }
        if (nodes_[n.in1].requires_grad) {
          auto& gb = grad_buf(n.in1);
          for (int r = 0; r < rows; ++r) {
            double s = 0;
            for (int c = 0; c < cols; ++c)
              s += g[r * cols + c] * xm[r * cols + c];
            gb[r] += s;
          }
        }
        return;
      }
      case OpKind::kLeakyRelu: {
        if (!nodes_[n.in0].requires_grad) return;
        const auto& x = nodes_[n.in0].data;
        auto& ga = grad_buf(n.in0);
        for (size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * (x[i] > 0 ? 1.0 : n.daux);
        return;
      }
      case OpKind::kSoftmaxRows: {
        if (!nodes_[n.in0].requires_grad) return;
        const int rows = n.shape[0], cols = n.shape[1];
        auto& ga = grad_buf(n.in0);
        const double* y = n.data.data();
        for (int r = 0; r < rows; ++r) {
          double dot = 0;
          for (int c = 0; c < cols; ++c)
            dot += g[r * cols + c] * y[r * cols + c];
          for (int c = 0; c < cols; ++c)
            ga[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
        }
        return;
      }
      case OpKind::kSoftmaxGroups: {
        if (!nodes_[n.in0].requires_grad) return;
        const int rows = n.shape[0];
        const int cols = n.shape.size() == 2 ? n.shape[1] : 1;
        const int group = n.iaux;
        auto& ga = grad_buf(n.in0);
        const double* y = n.data.data();
        for (int gr = 0; gr < rows / group; ++gr)
          for (int c = 0; c < cols; ++c) {
            double dot = 0;
            for (int i = 0; i < group; ++i) {
              const int64_t at = static_cast<int64_t>(gr * group + i) * cols + c;
              dot += g[at] * y[at];
            }
            for (int i = 0; i < group; ++i) {
              const int64_t at = static_cast<int64_t>(gr * group + i) * cols + c;
              ga[at] += y[at] * (g[at] - dot);
            }
          }
        return;
      }
      case OpKind::kSumGroups: {
        if (!nodes_[n.in0].requires_grad) return;
        const int out_rows = n.shape[0];
        const int cols = n.shape.size() == 2 ? n.shape[1] : 1;
        const int group = n.iaux;
        auto& ga = grad_buf(n.in0);
        for (int gr = 0; gr < out_rows; ++gr)
          for (int i = 0; i < group; ++i)
            for (int c = 0; c < cols; ++c)
              ga[(gr * group + i) * cols + c] += g[gr * cols + c];
        return;
      }
      case OpKind::kRepeatRows: {
        if (!nodes_[n.in0].requires_grad) return;
        const int in_rows = nodes_[n.in0].shape[0];
        const int cols = n.shape.size() == 2 ? n.shape[1] : 1;
        const int group = n.iaux;
        auto& ga = grad_buf(n.in0);
        for (int r = 0; r < in_rows; ++r)
          for (int i = 0; i < group; ++i)
            for (int c = 0; c < cols; ++c)
              ga[r * cols + c] += g[(r * group + i) * cols + c];
        return;
      }
      case OpKind::kGatherRows: {
        if (!nodes_[n.in0].requires_grad) return;
        const int cols = n.shape.size() == 2 ? n.shape[1] : 1;
        auto& ga = grad_buf(n.in0);
        for (size_t r = 0; r < n.indices.size(); ++r)
          for (int c = 0; c < cols; ++c)
            ga[n.indices[r] * cols + c] += g[r * cols + c];
        return;
      }
      case OpKind::kConcatRows: {
        const int cols = n.shape.size() == 2 ? n.shape[1] : 1;
        const int64_t split = static_cast<int64_t>(n.iaux) * cols;
        if (nodes_[n.in0].requires_grad) {
          auto& ga = grad_buf(n.in0);
          for (int64_t i = 0; i < split; ++i) ga[i] += g[i];
        }
        if (nodes_[n.in1].requires_grad) {
          auto& gb = grad_buf(n.in1);
          for (size_t i = split; i < g.size(); ++i) gb[i - split] += g[i];
        }
        return;
      }
      case OpKind::kL2NormRows: {
        if (!nodes_[n.in0].requires_grad) return;
        const TapeNode& a = nodes_[n.in0];
        const int rows = a.shape[0];
        const int cols = a.shape.size() == 2 ? a.shape[1] : 1;
        auto& ga = grad_buf(n.in0);
        const double* x = a.data.data();
        const double* y = n.data.data();
        for (int r = 0; r < rows; ++r) {
          if (y[r] <= 0) continue;  // subgradient 0 at the origin
          const double s = g[r] / y[r];
          for (int c = 0; c < cols; ++c)
            ga[r * cols + c] += s * x[r * cols + c];
        }
        return;
      }
      case OpKind::kClampMin: {
        if (!nodes_[n.in0].requires_grad) return;
        const auto& x = nodes_[n.in0].data;
        auto& ga = grad_buf(n.in0);
        for (size_t i = 0; i < g.size(); ++i)
          if (x[i] > n.daux) ga[i] += g[i];
        return;
      }
      case OpKind::kAbs: {
        if (!nodes_[n.in0].requires_grad) return;
        const auto& x = nodes_[n.in0].data;
        auto& ga = grad_buf(n.in0);
        for (size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * (x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0));
        return;
      }
      case OpKind::kSum: {
        if (!nodes_[n.in0].requires_grad) return;
        auto& ga = grad_buf(n.in0);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
        return;
      }
      case OpKind::kMean: {
        if (!nodes_[n.in0].requires_grad) return;
        auto& ga = grad_buf(n.in0);
        const double s = g[0] / static_cast<double>(ga.size());
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += s;
        return;
      }
    }
  }

  std::vector<TapeNode> nodes_;
  std::vector<std::pair<std::string, int>> param_nodes_;
  bool check_every_op_;
};

inline const Shape& Value::shape() const { return tape_->node(id_).shape; }
inline const std::vector<double>& Value::data() const {
  return tape_->node(id_).data;
}
inline const std::vector<double>& Value::grad() const {
  return tape_->node(id_).grad;
}
inline double Value::scalar() const {
  const auto& d = data();
  if (d.size() != 1)
    throw TensorError("scalar() on tensor of shape " + shape_str(shape()));
  return d[0];
}

// Free-function spellings so expressions read naturally.
inline Value matmul(const Value& a, const Value& b) {
  return a.tape()->matmul(a, b);
}
inline Value add(const Value& a, const Value& b) { return a.tape()->add(a, b); }
inline Value sub(const Value& a, const Value& b) { return a.tape()->sub(a, b); }
inline Value mul(const Value& a, const Value& b) { return a.tape()->mul(a, b); }
inline Value div(const Value& a, const Value& b) { return a.tape()->div(a, b); }
inline Value scale(const Value& a, double c) { return a.tape()->scale(a, c); }
inline Value add_bias(const Value& m, const Value& b) {
  return m.tape()->add_bias(m, b);
}
inline Value row_scale(const Value& m, const Value& s) {
  return m.tape()->row_scale(m, s);
}
inline Value leaky_relu(const Value& a, double slope = 0.01) {
  return a.tape()->leaky_relu(a, slope);
}
inline Value softmax_rows(const Value& a) { return a.tape()->softmax_rows(a); }
inline Value softmax_groups(const Value& a, int group) {
  return a.tape()->softmax_groups(a, group);
}
inline Value sum_groups(const Value& a, int group) {
  return a.tape()->sum_groups(a, group);
}
inline Value repeat_rows(const Value& a, int group) {
  return a.tape()->repeat_rows(a, group);
}
inline Value gather_rows(const Value& a, std::vector<int32_t> idx) {
  return a.tape()->gather_rows(a, std::move(idx));
}
inline Value concat_rows(const Value& a, const Value& b) {
  return a.tape()->concat_rows(a, b);
}
inline Value l2norm_rows(const Value& a) { return a.tape()->l2norm_rows(a); }
inline Value clamp_min(const Value& a, double floor) {
  return a.tape()->clamp_min(a, floor);
}
inline Value abs(const Value& a) { return a.tape()->abs(a); }
inline Value sum(const Value& a) { return a.tape()->sum(a); }
inline Value mean(const Value& a) { return a.tape()->mean(a); }

// ---- Adam ------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Step counter plus hyperparameters; the per-parameter moment buffers live
/// in the ParamStore entries. t advances by exactly 1 per adam_step.
struct AdamState {
  AdamConfig cfg;
  int64_t t = 0;
};

/// One Adam update with bias correction over every parameter hosted on the
/// tape. A parameter whose gradient was never touched counts as zero
/// gradient. Any non-finite gradient aborts the step before any parameter
/// is modified.
inline void adam_step(ParamStore& store, AdamState& state, const Tape& tape) {
  for (const auto& [name, id] : tape.param_nodes()) {
    const auto& grad = tape.node(id).grad;
    for (double x : grad)
      if (!std::isfinite(x))
        throw TensorError("adam_step: non-finite gradient for parameter '" +
                          name + "'");
  }
  state.t += 1;
  const AdamConfig& c = state.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (const auto& [name, id] : tape.param_nodes()) {
    ParamStore::Entry& e = store.at(name);
    const auto& grad = tape.node(id).grad;
    for (size_t i = 0; i < e.data.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      e.m[i] = c.beta1 * e.m[i] + (1.0 - c.beta1) * g;
      e.v[i] = c.beta2 * e.v[i] + (1.0 - c.beta2) * g * g;
      const double mhat = e.m[i] / bc1;
      const double vhat = e.v[i] / bc2;
      e.data[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

// ---- finite-difference gradient check ---------------------------------------

/// Result of finite_diff_check: worst coordinate over all parameters.
struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
};

/// Compare reverse-mode gradients of a scalar-valued builder against central
/// finite differences over every coordinate of every parameter in `store`.
/// The builder must be deterministic: it is re-run ~2 x #coordinates times.
/// Relative error uses max(1e-12, |central difference|) as denominator;
/// non-finite comparisons surface as an infinite error.
inline GradCheckResult finite_diff_check(
    const std::function<Value(Tape&, ParamStore&)>& build, ParamStore& store,
    double step = 1e-5) {
  std::map<std::string, std::vector<double>> autodiff;
  {
    Tape tape;
    Value loss = build(tape, store);
    tape.backward(loss);
    for (const auto& [name, id] : tape.param_nodes()) {
      const auto& g = tape.node(id).grad;
      auto& dst = autodiff[name];
      dst = g.empty() ? std::vector<double>(
                            shape_numel(tape.node(id).shape), 0.0)
                      : g;
    }
  }
  const auto eval = [&]() {
    Tape tape;
    return build(tape, store).scalar();
  };
  GradCheckResult result;
  for (auto& [name, ad] : autodiff) {
    auto& entry = store.at(name);
    for (size_t i = 0; i < entry.data.size(); ++i) {
      const double saved = entry.data[i];
      entry.data[i] = saved + step;
      const double fp = eval();
      entry.data[i] = saved - step;
      const double fm = eval();
      entry.data[i] = saved;
      const double central = (fp - fm) / (2.0 * step);
      double err;
      if (!std::isfinite(central) || !std::isfinite(ad[i]))
        err = std::numeric_limits<double>::infinity();
      else
        err = std::fabs(ad[i] - central) /
              std::max(1e-12, std::fabs(central));
      if (err > result.max_rel_err) {
        result.max_rel_err = err;
        result.worst_param = name;
        result.worst_index = static_cast<int>(i);
      }
    }
  }
  return result;
}

}  // namespace sparsurf
