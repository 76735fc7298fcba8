#pragma once

// Dense row-major tensors of doubles and a reverse-mode tape over a closed
// set of primitives. Every tensor the tape produces is checked for NaN/Inf.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tad {

class NumericsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace num {

/// Rank-2 tensor (scalars are 1x1, vectors are 1xn).
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                  " does not match shape " + std::to_string(rows_) + "x" +
                                  std::to_string(cols_));
    }
  }

  static Tensor scalar(double v) { return Tensor(1, 1, std::vector<double>{v}); }
  static Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(1, n, std::move(v));
  }

  std::vector<std::size_t> shape() const { return {rows_, cols_}; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  std::span<const double> row_span(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw std::logic_error("item() on a non-scalar tensor");
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

enum class Primitive : std::uint8_t {
  kLeaf,
  kAdd,
  kMul,
  kScale,
  kAddRow,
  kMulRow,
  kMatMul,
  kMatMulTransposed,
  kSoftmaxRow,
  kLogSoftmaxRow,
  kLog,
  kExp,
  kGather,
  kGatherRows,
  kSum,
  kMean,
  kLayerNormRow,
  kGelu,
  kSliceCols,
  kConcatCols,
};

inline std::string_view primitive_name(Primitive p) {
  switch (p) {
    case Primitive::kLeaf: return "leaf";
    case Primitive::kAdd: return "add";
    case Primitive::kMul: return "mul";
    case Primitive::kScale: return "scale";
    case Primitive::kAddRow: return "add_row";
    case Primitive::kMulRow: return "mul_row";
    case Primitive::kMatMul: return "matmul";
    case Primitive::kMatMulTransposed: return "matmul_transposed";
    case Primitive::kSoftmaxRow: return "softmax_row";
    case Primitive::kLogSoftmaxRow: return "log_softmax_row";
    case Primitive::kLog: return "log";
    case Primitive::kExp: return "exp";
    case Primitive::kGather: return "gather";
    case Primitive::kGatherRows: return "gather_rows";
    case Primitive::kSum: return "sum";
    case Primitive::kMean: return "mean";
    case Primitive::kLayerNormRow: return "layer_norm_row";
    case Primitive::kGelu: return "gelu";
    case Primitive::kSliceCols: return "slice_cols";
    case Primitive::kConcatCols: return "concat_cols";
  }
  return "unknown";
}

struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

inline ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}
inline MutMap as_matrix(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}
inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

}  // namespace detail

/// Numerically stable row softmax, also used outside the tape.
inline void softmax_inplace(std::span<double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : row) v /= z;
}

inline void log_softmax_inplace(std::span<double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  for (double& v : row) v -= lse;
}

/// Records primitives in creation order; inputs always precede outputs, so
/// the node vector is a valid topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  NodeId leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.op = Primitive::kLeaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    check_finite(n.value, Primitive::kLeaf);
    return push(std::move(n));
  }

  /// Leaf that borrows `value`; the caller keeps it alive for the tape's lifetime.
  NodeId leaf_ref(const Tensor& value, bool requires_grad = true) {
    Node n;
    n.op = Primitive::kLeaf;
    n.ref = &value;
    n.requires_grad = requires_grad;
    check_finite(value, Primitive::kLeaf);
    return push(std::move(n));
  }

  NodeId constant(Tensor value) { return leaf(std::move(value), false); }

  NodeId add(NodeId a, NodeId b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    require_same_shape(x, y, Primitive::kAdd);
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
    return emit(Primitive::kAdd, {a, b}, std::move(out));
  }

  NodeId mul(NodeId a, NodeId b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    require_same_shape(x, y, Primitive::kMul);
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
    return emit(Primitive::kMul, {a, b}, std::move(out));
  }

  NodeId scale(NodeId a, double factor) {
    Tensor out = value(a);
    for (double& v : out.data()) v *= factor;
    NodeId id = emit(Primitive::kScale, {a}, std::move(out));
    nodes_[id.index].scalar = factor;
    return id;
  }

  /// x (n x m) + row (1 x m), broadcast over rows.
  NodeId add_row(NodeId x, NodeId row) {
    const Tensor& xv = value(x);
    const Tensor& rv = value(row);
    require_row_of(xv, rv, Primitive::kAddRow);
    Tensor out = xv;
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += rv[c];
    return emit(Primitive::kAddRow, {x, row}, std::move(out));
  }

  NodeId mul_row(NodeId x, NodeId row) {
    const Tensor& xv = value(x);
    const Tensor& rv = value(row);
    require_row_of(xv, rv, Primitive::kMulRow);
    Tensor out = xv;
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= rv[c];
    return emit(Primitive::kMulRow, {x, row}, std::move(out));
  }

  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    if (x.cols() != y.rows()) shape_error(Primitive::kMatMul, x, y);
    Tensor out(x.rows(), y.cols());
    detail::as_matrix(out).noalias() = detail::as_matrix(x) * detail::as_matrix(y);
    return emit(Primitive::kMatMul, {a, b}, std::move(out));
  }

  /// a (n x k) times b^T where b is (m x k).
  NodeId matmul_transposed(NodeId a, NodeId b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    if (x.cols() != y.cols()) shape_error(Primitive::kMatMulTransposed, x, y);
    Tensor out(x.rows(), y.rows());
    detail::as_matrix(out).noalias() = detail::as_matrix(x) * detail::as_matrix(y).transpose();
    return emit(Primitive::kMatMulTransposed, {a, b}, std::move(out));
  }

  NodeId softmax_rows(NodeId a) {
    Tensor out = value(a);
    for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row_span(r));
    return emit(Primitive::kSoftmaxRow, {a}, std::move(out));
  }

  NodeId log_softmax_rows(NodeId a) {
    Tensor out = value(a);
    for (std::size_t r = 0; r < out.rows(); ++r) log_softmax_inplace(out.row_span(r));
    return emit(Primitive::kLogSoftmaxRow, {a}, std::move(out));
  }

  NodeId log(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.data()) v = std::log(v);
    return emit(Primitive::kLog, {a}, std::move(out));
  }

  NodeId exp(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.data()) v = std::exp(v);
    return emit(Primitive::kExp, {a}, std::move(out));
  }

  /// Picks flat (row-major) elements; output is 1 x indices.size().
  NodeId gather(NodeId a, std::vector<std::size_t> flat_indices) {
    const Tensor& x = value(a);
    Tensor out(1, flat_indices.size());
    for (std::size_t i = 0; i < flat_indices.size(); ++i) {
      if (flat_indices[i] >= x.size()) throw std::out_of_range("gather index out of range");
      out[i] = x[flat_indices[i]];
    }
    NodeId id = emit(Primitive::kGather, {a}, std::move(out));
    nodes_[id.index].indices = std::move(flat_indices);
    return id;
  }

  NodeId gather_rows(NodeId a, std::vector<std::size_t> rows) {
    const Tensor& x = value(a);
    Tensor out(rows.size(), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= x.rows()) throw std::out_of_range("gather_rows index out of range");
      std::copy_n(x.row_span(rows[i]).begin(), x.cols(), out.row_span(i).begin());
    }
    NodeId id = emit(Primitive::kGatherRows, {a}, std::move(out));
    nodes_[id.index].indices = std::move(rows);
    return id;
  }

  NodeId sum(NodeId a) {
    const Tensor& x = value(a);
    double s = 0.0;
    for (double v : x.data()) s += v;
    return emit(Primitive::kSum, {a}, Tensor::scalar(s));
  }

  NodeId mean(NodeId a) {
    const Tensor& x = value(a);
    if (x.size() == 0) throw std::invalid_argument("mean of an empty tensor");
    double s = 0.0;
    for (double v : x.data()) s += v;
    return emit(Primitive::kMean, {a}, Tensor::scalar(s / static_cast<double>(x.size())));
  }

  /// Per-row normalization to zero mean / unit variance (no affine part).
  NodeId layer_norm_rows(NodeId a, double eps = 1e-5) {
    const Tensor& x = value(a);
    Tensor out(x.rows(), x.cols());
    Tensor inv_std(x.rows(), 1);
    const double n = static_cast<double>(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      auto in = x.row_span(r);
      double mu = 0.0;
      for (double v : in) mu += v;
      mu /= n;
      double var = 0.0;
      for (double v : in) var += (v - mu) * (v - mu);
      var /= n;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[r] = is;
      auto o = out.row_span(r);
      for (std::size_t c = 0; c < x.cols(); ++c) o[c] = (in[c] - mu) * is;
    }
    NodeId id = emit(Primitive::kLayerNormRow, {a}, std::move(out));
    nodes_[id.index].aux = std::move(inv_std);
    return id;
  }

  NodeId gelu(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.data()) v = detail::gelu(v);
    return emit(Primitive::kGelu, {a}, std::move(out));
  }

  NodeId slice_cols(NodeId a, std::size_t begin, std::size_t count) {
    const Tensor& x = value(a);
    if (begin + count > x.cols()) throw std::out_of_range("slice_cols range exceeds columns");
    Tensor out(x.rows(), count);
    for (std::size_t r = 0; r < x.rows(); ++r)
      std::copy_n(x.row_span(r).begin() + static_cast<std::ptrdiff_t>(begin), count,
                  out.row_span(r).begin());
    NodeId id = emit(Primitive::kSliceCols, {a}, std::move(out));
    nodes_[id.index].indices = {begin};
    return id;
  }

  NodeId concat_cols(std::span<const NodeId> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols needs at least one input");
    const std::size_t rows = value(parts[0]).rows();
    std::size_t cols = 0;
    for (NodeId p : parts) {
      if (value(p).rows() != rows) shape_error(Primitive::kConcatCols, value(parts[0]), value(p));
      cols += value(p).cols();
    }
    Tensor out(rows, cols);
    std::size_t off = 0;
    for (NodeId p : parts) {
      const Tensor& x = value(p);
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(x.row_span(r).begin(), x.cols(),
                    out.row_span(r).begin() + static_cast<std::ptrdiff_t>(off));
      off += x.cols();
    }
    Node n;
    n.op = Primitive::kConcatCols;
    n.value = std::move(out);
    for (NodeId p : parts) {
      n.inputs.push_back(p.index);
      n.requires_grad = n.requires_grad || nodes_[p.index].requires_grad;
    }
    check_finite(n.value, n.op);
    return push(std::move(n));
  }

  /// Applies a parameter-free primitive by name. Names outside the supported
  /// set are rejected.
  NodeId apply(std::string_view name, std::span<const NodeId> inputs) {
    auto need = [&](std::size_t k) {
      if (inputs.size() != k)
        throw std::invalid_argument("primitive '" + std::string(name) + "' expects " +
                                    std::to_string(k) + " inputs, got " +
                                    std::to_string(inputs.size()));
    };
    if (name == "add") { need(2); return add(inputs[0], inputs[1]); }
    if (name == "mul") { need(2); return mul(inputs[0], inputs[1]); }
    if (name == "add_row") { need(2); return add_row(inputs[0], inputs[1]); }
    if (name == "mul_row") { need(2); return mul_row(inputs[0], inputs[1]); }
    if (name == "matmul") { need(2); return matmul(inputs[0], inputs[1]); }
    if (name == "matmul_transposed") { need(2); return matmul_transposed(inputs[0], inputs[1]); }
    if (name == "softmax_row") { need(1); return softmax_rows(inputs[0]); }
    if (name == "log_softmax_row") { need(1); return log_softmax_rows(inputs[0]); }
    if (name == "log") { need(1); return log(inputs[0]); }
    if (name == "exp") { need(1); return exp(inputs[0]); }
    if (name == "sum") { need(1); return sum(inputs[0]); }
    if (name == "mean") { need(1); return mean(inputs[0]); }
    if (name == "layer_norm_row") { need(1); return layer_norm_rows(inputs[0]); }
    if (name == "gelu") { need(1); return gelu(inputs[0]); }
    if (name == "concat_cols") return concat_cols(inputs);
    throw std::invalid_argument("unsupported primitive '" + std::string(name) +
                                "': not one of add, mul, scale, add_row, mul_row, matmul, "
                                "matmul_transposed, softmax_row, log_softmax_row, log, exp, "
                                "gather, gather_rows, sum, mean, layer_norm_row, gelu, "
                                "slice_cols, concat_cols");
  }

  const Tensor& value(NodeId id) const {
    const Node& n = node(id);
    return n.ref != nullptr ? *n.ref : n.value;
  }

  /// Gradient accumulated by the last backward(); zeros for untouched nodes.
  Tensor grad(NodeId id) const {
    const Node& n = node(id);
    if (n.grad.size() == 0) {
      const Tensor& v = value(id);
      return Tensor(v.rows(), v.cols());
    }
    return n.grad;
  }

  bool requires_grad(NodeId id) const { return node(id).requires_grad; }
  Primitive op(NodeId id) const { return node(id).op; }
  std::span<const std::uint32_t> inputs(NodeId id) const { return node(id).inputs; }
  std::size_t size() const { return nodes_.size(); }

  void backward(NodeId output) {
    const Tensor& out = value(output);
    if (out.size() != 1) {
      throw std::invalid_argument("backward requires a scalar output, got shape " +
                                  std::to_string(out.rows()) + "x" + std::to_string(out.cols()));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    grad_ref(output.index) = Tensor::scalar(1.0);
    for (std::uint32_t i = output.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0 || n.op == Primitive::kLeaf) continue;
      propagate(i);
    }
  }

 private:
  struct Node {
    Primitive op = Primitive::kLeaf;
    std::vector<std::uint32_t> inputs;
    Tensor value;
    const Tensor* ref = nullptr;
    Tensor grad;
    Tensor aux;
    std::vector<std::size_t> indices;
    double scalar = 0.0;
    bool requires_grad = false;
  };

  const Node& node(NodeId id) const {
    if (id.index >= nodes_.size()) throw std::out_of_range("node id not on this tape");
    return nodes_[id.index];
  }

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  NodeId emit(Primitive op, std::initializer_list<NodeId> in, Tensor out) {
    check_finite(out, op);
    Node n;
    n.op = op;
    n.value = std::move(out);
    for (NodeId id : in) {
      n.inputs.push_back(id.index);
      n.requires_grad = n.requires_grad || node(id).requires_grad;
    }
    return push(std::move(n));
  }

  static void check_finite(const Tensor& t, Primitive op) {
    if (!t.all_finite())
      throw NumericsError("non-finite value produced by primitive '" +
                          std::string(primitive_name(op)) + "'");
  }

  [[noreturn]] static void shape_error(Primitive op, const Tensor& a, const Tensor& b) {
    throw std::invalid_argument("shape mismatch in '" + std::string(primitive_name(op)) + "': " +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
  static void require_same_shape(const Tensor& a, const Tensor& b, Primitive op) {
    if (!a.same_shape(b)) shape_error(op, a, b);
  }
  static void require_row_of(const Tensor& x, const Tensor& row, Primitive op) {
    if (row.rows() != 1 || row.cols() != x.cols()) shape_error(op, x, row);
  }

  Tensor& grad_ref(std::uint32_t i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) {
      const Tensor& v = n.ref != nullptr ? *n.ref : n.value;
      n.grad = Tensor(v.rows(), v.cols());
    }
    return n.grad;
  }

  // Adds `delta` into the gradient of input node `i` if it requires one.
  template <class F>
  void accumulate(std::uint32_t i, F&& fill) {
    if (!nodes_[i].requires_grad) return;
    fill(grad_ref(i));
  }

  void propagate(std::uint32_t i) {
    const Tensor& g = nodes_[i].grad;
    const Node& n = nodes_[i];
    const Tensor& y = n.value;
    switch (n.op) {
      case Primitive::kLeaf:
        break;
      case Primitive::kAdd:
        for (std::uint32_t in : {n.inputs[0], n.inputs[1]})
          accumulate(in, [&](Tensor& d) {
            for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k];
          });
        break;
      case Primitive::kMul: {
        const Tensor& a = value(NodeId{n.inputs[0]});
        const Tensor& b = value(NodeId{n.inputs[1]});
        accumulate(n.inputs[0], [&](Tensor& d) {
          for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k] * b[k];
        });
        accumulate(n.inputs[1], [&](Tensor& d) {
          for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k] * a[k];
        });
        break;
      }
      case Primitive::kScale: {
        const double f = n.scalar;
        accumulate(n.inputs[0], [&](Tensor& d) {
          for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k] * f;
        });
        break;
      }
      case Primitive::kAddRow:
        accumulate(n.inputs[0], [&](Tensor& d) {
          for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k];
        });
        accumulate(n.inputs[1], [&](Tensor& d) {
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) d[c] += g(r, c);
        });
        break;
      case Primitive::kMulRow: {
        const Tensor& x = value(NodeId{n.inputs[0]});
        const Tensor& row = value(NodeId{n.inputs[1]});
        accumulate(n.inputs[0], [&](Tensor& d) {
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) d(r, c) += g(r, c) * row[c];
        });
        accumulate(n.inputs[1], [&](Tensor& d) {
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) d[c] += g(r, c) * x(r, c);
        });
        break;
      }
      case Primitive::kMatMul: {
        const Tensor& a = value(NodeId{n.inputs[0]});
        const Tensor& b = value(NodeId{n.inputs[1]});
        accumulate(n.inputs[0], [&](Tensor& d) {
          detail::as_matrix(d).noalias() += detail::as_matrix(g) * detail::as_matrix(b).transpose();
        });
        accumulate(n.inputs[1], [&](Tensor& d) {
          detail::as_matrix(d).noalias() += detail::as_matrix(a).transpose() * detail::as_matrix(g);
        });
        break;
      }
      case Primitive::kMatMulTransposed: {
        const Tensor& a = value(NodeId{n.inputs[0]});
        const Tensor& b = value(NodeId{n.inputs[1]});
        accumulate(n.inputs[0], [&](Tensor& d) {
          detail::as_matrix(d).noalias() += detail::as_matrix(g) * detail::as_matrix(b);
        });
        accumulate(n.inputs[1], [&](Tensor& d) {
          detail::as_matrix(d).noalias() += detail::as_matrix(g).transpose() * detail::as_matrix(a);
        });
        break;
      }
      case Primitive::kSoftmaxRow:
        accumulate(n.inputs[0], [&](Tensor& d) {
          for (std::size_t r = 0; r < y.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
            for (std::size_t c = 0; c < y.cols(); ++c) d(r, c) += y(r, c) * (g(r, c) - dot);
          }
        });
        break;
      case Primitive::kLogSoftmaxRow:
        accumulate(n.inputs[0], [&](Tensor& d) {
          for (std::size_t r = 0; r < y.rows(); ++r) {
            double gs = 0.0;
            for (std::size_t c = 0; c < y.cols(); ++c) gs += g(r, c);
            for (std::size_t c = 0; c < y.cols(); ++c) d(r, c) += g(r, c) - std::exp(y(r, c)) * gs;
          }
        });
        break;
      case Primitive::kLog: {
        const Tensor& x = value(NodeId{n.inputs[0]});
        accumulate(n.inputs[0], [&](Tensor& d) {
          for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k] / x[k];
        });
        break;
      }
      case Primitive::kExp:
        accumulate(n.inputs[0], [&](Tensor& d) {
          for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k] * y[k];
        });
        break;
      case Primitive::kGather:
        accumulate(n.inputs[0], [&](Tensor& d) {
          for (std::size_t k = 0; k < n.indices.size(); ++k) d[n.indices[k]] += g[k];
        });
        break;
      case Primitive::kGatherRows:
        accumulate(n.inputs[0], [&](Tensor& d) {
          for (std::size_t k = 0; k < n.indices.size(); ++k) {
            auto dst = d.row_span(n.indices[k]);
            auto src = g.row_span(k);
            for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
          }
        });
        break;
      case Primitive::kSum:
        accumulate(n.inputs[0], [&](Tensor& d) {
          for (double& v : d.data()) v += g[0];
        });
        break;
      case Primitive::kMean:
        accumulate(n.inputs[0], [&](Tensor& d) {
          const double s = g[0] / static_cast<double>(d.size());
          for (double& v : d.data()) v += s;
        });
        break;
      case Primitive::kLayerNormRow:
        accumulate(n.inputs[0], [&](Tensor& d) {
          const double m = static_cast<double>(y.cols());
          for (std::size_t r = 0; r < y.rows(); ++r) {
            double gm = 0.0;
            double gy = 0.0;
            for (std::size_t c = 0; c < y.cols(); ++c) {
              gm += g(r, c);
              gy += g(r, c) * y(r, c);
            }
            gm /= m;
            gy /= m;
            const double is = n.aux[r];
            for (std::size_t c = 0; c < y.cols(); ++c)
              d(r, c) += is * (g(r, c) - gm - y(r, c) * gy);
          }
        });
        break;
      case Primitive::kGelu: {
        const Tensor& x = value(NodeId{n.inputs[0]});
        accumulate(n.inputs[0], [&](Tensor& d) {
          for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k] * detail::gelu_grad(x[k]);
        });
        break;
      }
      case Primitive::kSliceCols: {
        const std::size_t begin = n.indices[0];
        accumulate(n.inputs[0], [&](Tensor& d) {
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) d(r, begin + c) += g(r, c);
        });
        break;
      }
      case Primitive::kConcatCols: {
        std::size_t off = 0;
        for (std::uint32_t in : n.inputs) {
          const std::size_t w = value(NodeId{in}).cols();
          accumulate(in, [&](Tensor& d) {
            for (std::size_t r = 0; r < g.rows(); ++r)
              for (std::size_t c = 0; c < w; ++c) d(r, c) += g(r, off + c);
          });
          off += w;
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
};

/// A closure's output together with the tape that produced it.
struct Recording {
  Tape tape;
  NodeId output;

  const Tensor& value() const { return tape.value(output); }
};

/// Runs `build(tape)` on a fresh tape and returns the recorded graph.
template <class Build>
Recording record_forward(Build&& build) {
  Recording rec;
  rec.output = std::forward<Build>(build)(rec.tape);
  return rec;
}

inline void backward(Recording& rec) { rec.tape.backward(rec.output); }

}  // namespace num
}  // namespace tad
