#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "streamduct/errors.hpp"
#include "streamduct/tensor.hpp"

namespace streamduct {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph() const noexcept { return graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  inline const Tensor& value() const;
  inline const Tensor& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Recorded computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep. A graph built with
/// `track_gradients = false` keeps values only; this is the inference path.
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t)>;

  explicit Graph(bool track_gradients = true) : tracking_(track_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool tracking() const noexcept { return tracking_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value) { return push(std::move(value), nullptr, false, nullptr); }

  /// Owned leaf whose gradient is accumulated by backward().
  Var leaf(Tensor value) { return push(std::move(value), nullptr, tracking_, nullptr); }

  /// Non-owning leaf; `value` must outlive the graph and stay unmodified.
  Var bind(const Tensor& value, bool requires_grad) {
    return push(Tensor(), &value, tracking_ && requires_grad, nullptr);
  }

  /// Append an op result. `backward` runs only if some input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    if (tracking_) {
      for (const Var& v : inputs) needs = needs || nodes_[v.id()].needs_grad;
    }
    return push(std::move(value), nullptr, needs, needs ? std::move(backward) : nullptr);
  }
  Var record(Tensor value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    if (tracking_) {
      for (const Var& v : inputs) needs = needs || nodes_[v.id()].needs_grad;
    }
    return push(std::move(value), nullptr, needs, needs ? std::move(backward) : nullptr);
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool needs_grad(Var v) const { return nodes_[v.id()].needs_grad; }

  /// Gradient buffer, allocated as zeros on first use.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(value(id).shape());
    return n.grad;
  }
  Tensor& grad(Var v) { return grad(v.id()); }

  const Tensor& grad_or_empty(std::size_t id) const { return nodes_[id].grad; }

  /// Seed d(root)/d(root) = 1 and sweep backward. `root` must be 1 x 1.
  void backward(Var root) {
    if (!tracking_) throw InvalidArgument("backward() on a graph without gradient tracking");
    if (value(root.id()).size() != 1) throw InvalidArgument("backward() root must be a scalar");
    grad(root.id())[0] += 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool needs_grad = false;
    Backward backward;
  };

  Var push(Tensor value, const Tensor* external, bool needs, Backward backward) {
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    n.external = external;
    n.needs_grad = needs;
    n.backward = std::move(backward);
    return Var(this, nodes_.size() - 1);
  }

  bool tracking_;
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline const Tensor& Var::grad() const { return graph_->grad_or_empty(id_); }

namespace kernels {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline ConstMap view(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MutMap view(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

/// out(m x n) += a(m x k) * b(k x n)
inline void matmul_acc(const Tensor& a, const Tensor& b, Tensor& out) { view(out).noalias() += view(a) * view(b); }

/// out(m x k) += g(m x n) * b(k x n)^T
inline void matmul_nt_acc(const Tensor& g, const Tensor& b, Tensor& out) {
  view(out).noalias() += view(g) * view(b).transpose();
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
  return out;
}

/// out(k x n) += a(m x k)^T * g(m x n)
inline void matmul_tn_acc(const Tensor& a, const Tensor& g, Tensor& out) {
  view(out).noalias() += view(a).transpose() * view(g);
}

}  // namespace kernels

namespace detail {

inline Graph& graph_of(Var a) {
  if (!a.valid()) throw InvalidArgument("operation on an unbound Var");
  return *a.graph();
}

inline void require_same_graph(Var a, Var b) {
  if (a.graph() != b.graph()) throw InvalidArgument("operands belong to different graphs");
}

inline void require_same_shape(Var a, Var b, const char* op) {
  require_same_graph(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_string(a.value().shape()) +
                          " vs " + shape_string(b.value().shape()));
  }
}

inline Tensor as_matrix(std::size_t rows, std::size_t cols) { return Tensor::matrix(rows, cols); }

template <class F, class D>
Var unary(Var a, F&& f, D&& df_from_y_x) {
  Graph& g = graph_of(a);
  const Tensor& x = a.value();
  Tensor y = as_matrix(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return g.record(std::move(y), {a}, [a, df = std::forward<D>(df_from_y_x)](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    const Tensor& y = g.value(self);
    const Tensor& x = a.value();
    Tensor& gx = g.grad(a);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * df(y[i], x[i]);
  });
}

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::require_same_shape(a, b, "add");
  Tensor y = detail::as_matrix(a.rows(), a.cols());
  const Tensor &x1 = a.value(), &x2 = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x1[i] + x2[i];
  return a.graph()->record(std::move(y), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    for (Var v : {a, b}) {
      if (!g.needs_grad(v)) continue;
      Tensor& gv = g.grad(v);
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += gy[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a, b, "sub");
  Tensor y = detail::as_matrix(a.rows(), a.cols());
  const Tensor &x1 = a.value(), &x2 = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x1[i] - x2[i];
  return a.graph()->record(std::move(y), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    if (g.needs_grad(a)) {
      Tensor& ga = g.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
    }
    if (g.needs_grad(b)) {
      Tensor& gb = g.grad(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
    }
  });
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(a, b, "mul");
  Tensor y = detail::as_matrix(a.rows(), a.cols());
  const Tensor &x1 = a.value(), &x2 = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x1[i] * x2[i];
  return a.graph()->record(std::move(y), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    if (g.needs_grad(a)) {
      Tensor& ga = g.grad(a);
      const Tensor& xb = b.value();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * xb[i];
    }
    if (g.needs_grad(b)) {
      Tensor& gb = g.grad(b);
      const Tensor& xa = a.value();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * xa[i];
    }
  });
}

inline Var scale(Var a, double c) {
  return detail::unary(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

/// a(m x n) + b(1 x n) broadcast over rows.
inline Var add_bias(Var a, Var b) {
  detail::require_same_graph(a, b);
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw InvalidArgument("add_bias: bias " + shape_string(b.value().shape()) +
                          " does not match " + shape_string(a.value().shape()));
  }
  const std::size_t m = a.rows(), n = a.cols();
  Tensor y = detail::as_matrix(m, n);
  const Tensor &x = a.value(), &bias = b.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y(i, j) = x(i, j) + bias[j];
  return a.graph()->record(std::move(y), {a, b}, [a, b, m, n](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    if (g.needs_grad(a)) {
      Tensor& ga = g.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
    }
    if (g.needs_grad(b)) {
      Tensor& gb = g.grad(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += gy(i, j);
    }
  });
}

/// Matrix product a(m x k) * b(k x n).
inline Var matmul(Var a, Var b) {
  detail::require_same_graph(a, b);
  if (a.cols() != b.rows()) {
    throw InvalidArgument("matmul: inner extents differ, " + shape_string(a.value().shape()) +
                          " * " + shape_string(b.value().shape()));
  }
  Tensor y = detail::as_matrix(a.rows(), b.cols());
  kernels::matmul_acc(a.value(), b.value(), y);
  return a.graph()->record(std::move(y), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    if (g.needs_grad(a)) kernels::matmul_nt_acc(gy, b.value(), g.grad(a));
    if (g.needs_grad(b)) kernels::matmul_tn_acc(a.value(), gy, g.grad(b));
  });
}

inline Var transpose(Var a) {
  Tensor y = kernels::transpose(a.value());
  return detail::graph_of(a).record(std::move(y), {a}, [a](Graph& g, std::size_t self) {
    const Tensor gt = kernels::transpose(g.grad(self));
    Tensor& ga = g.grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gt[i];
  });
}

/// a(m x k) * b(n x k)^T.
inline Var matmul_nt(Var a, Var b) {
  detail::require_same_graph(a, b);
  if (a.cols() != b.cols()) {
    throw InvalidArgument("matmul_nt: inner extents differ, " + shape_string(a.value().shape()) + " * " +
                          shape_string(b.value().shape()) + "^T");
  }
  Tensor y = detail::as_matrix(a.rows(), b.rows());
  kernels::matmul_nt_acc(a.value(), b.value(), y);
  return a.graph()->record(std::move(y), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    if (g.needs_grad(a)) kernels::matmul_acc(gy, b.value(), g.grad(a));
    if (g.needs_grad(b)) kernels::matmul_tn_acc(gy, a.value(), g.grad(b));
  });
}

inline Var tanh(Var a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double y, double) { return 1.0 - y * y; });
}

inline Var relu(Var a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double, double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Var a) {
  return detail::unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double y, double) { return y * (1.0 - y); });
}

enum class Activation { kTanh, kRelu };

inline Var activation(Var a, Activation f) { return f == Activation::kTanh ? tanh(a) : relu(a); }

inline Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return detail::graph_of(a).record(Tensor::scalar(s), {a}, [a](Graph& g, std::size_t self) {
    const double gy = g.grad(self)[0];
    Tensor& ga = g.grad(a);
    for (double& v : ga.values()) v += gy;
  });
}

/// Row-wise tensor-dot: out(i) = sum_j a(i,j) b(i,j), shape m x 1.
inline Var row_dot(Var a, Var b) {
  detail::require_same_shape(a, b, "row_dot");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor y = detail::as_matrix(m, 1);
  const Tensor &x1 = a.value(), &x2 = b.value();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x1(i, j) * x2(i, j);
    y[i] = s;
  }
  return a.graph()->record(std::move(y), {a, b}, [a, b, m, n](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    if (g.needs_grad(a)) {
      Tensor& ga = g.grad(a);
      const Tensor& xb = b.value();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga(i, j) += gy[i] * xb(i, j);
    }
    if (g.needs_grad(b)) {
      Tensor& gb = g.grad(b);
      const Tensor& xa = a.value();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb(i, j) += gy[i] * xa(i, j);
    }
  });
}

namespace detail {

// Shared backward for softmax rows: gx = y * (gy - sum(gy * y)).
inline void softmax_rows_backward(const Tensor& y, const Tensor& gy, Tensor& gx) {
  const std::size_t m = y.rows(), n = y.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += gy(i, j) * y(i, j);
    for (std::size_t j = 0; j < n; ++j) gx(i, j) += y(i, j) * (gy(i, j) - dot);
  }
}

}  // namespace detail

inline Var softmax_rows(Var a) {
  const Tensor& x = a.value();
  Tensor y = detail::as_matrix(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const std::vector<double> p = softmax(x.row_span(i));
    std::copy(p.begin(), p.end(), y.row_span(i).begin());
  }
  return detail::graph_of(a).record(std::move(y), {a}, [a](Graph& g, std::size_t self) {
    detail::softmax_rows_backward(g.value(self), g.grad(self), g.grad(a));
  });
}

/// Softmax over the entries of each row where `mask` is nonzero; masked
/// entries get probability exactly 0 and receive no gradient. `mask` has the
/// same extents as `a` and every row must admit at least one entry.
inline Var masked_softmax_rows(Var a, std::shared_ptr<const std::vector<std::uint8_t>> mask) {
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), n = x.cols();
  if (!mask || mask->size() != m * n) throw InvalidArgument("masked_softmax_rows: mask size mismatch");
  Tensor y = detail::as_matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const std::uint8_t* mrow = mask->data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (mrow[j]) mx = std::max(mx, x(i, j));
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw InvalidArgument("masked_softmax_rows: row " + std::to_string(i) + " admits nothing");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (mrow[j]) z += (y(i, j) = std::exp(x(i, j) - mx));
    for (std::size_t j = 0; j < n; ++j)
      if (mrow[j]) y(i, j) /= z;
  }
  return detail::graph_of(a).record(std::move(y), {a}, [a](Graph& g, std::size_t self) {
    detail::softmax_rows_backward(g.value(self), g.grad(self), g.grad(a));
  });
}

inline Var log_softmax_rows(Var a) {
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), n = x.cols();
  Tensor y = detail::as_matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = x(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) y(i, j) = x(i, j) - lse;
  }
  return detail::graph_of(a).record(std::move(y), {a}, [a, m, n](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    const Tensor& y = g.value(self);
    Tensor& gx = g.grad(a);
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += gy(i, j);
      for (std::size_t j = 0; j < n; ++j) gx(i, j) += gy(i, j) - std::exp(y(i, j)) * s;
    }
  });
}

/// Per-row normalization to zero mean / unit variance, then gain and bias
/// (each 1 x n).
inline Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5) {
  detail::require_same_graph(x, gain);
  detail::require_same_graph(x, bias);
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.cols() != n || bias.cols() != n || gain.rows() != 1 || bias.rows() != 1) {
    throw InvalidArgument("layer_norm_rows: gain/bias must be 1 x " + std::to_string(n));
  }
  const Tensor& xv = x.value();
  auto normed = std::make_shared<Tensor>(Tensor::matrix(m, n));
  auto inv_std = std::make_shared<std::vector<double>>(m);
  Tensor y = detail::as_matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xv(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xv(i, j) - mean) * (xv(i, j) - mean);
    var /= static_cast<double>(n);
    const double r = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = r;
    for (std::size_t j = 0; j < n; ++j) {
      (*normed)(i, j) = (xv(i, j) - mean) * r;
      y(i, j) = (*normed)(i, j) * gain.value()[j] + bias.value()[j];
    }
  }
  return x.graph()->record(
      std::move(y), {x, gain, bias}, [x, gain, bias, normed, inv_std, m, n](Graph& g, std::size_t self) {
        const Tensor& gy = g.grad(self);
        if (g.needs_grad(gain)) {
          Tensor& gg = g.grad(gain);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += gy(i, j) * (*normed)(i, j);
        }
        if (g.needs_grad(bias)) {
          Tensor& gb = g.grad(bias);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += gy(i, j);
        }
        if (g.needs_grad(x)) {
          Tensor& gx = g.grad(x);
          const Tensor& gv = gain.value();
          const double dn = static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = gy(i, j) * gv[j];
              s1 += d;
              s2 += d * (*normed)(i, j);
            }
            const double r = (*inv_std)[i];
            for (std::size_t j = 0; j < n; ++j) {
              const double d = gy(i, j) * gv[j];
              gx(i, j) += r * (d - s1 / dn - (*normed)(i, j) * s2 / dn);
            }
          }
        }
      });
}

/// Gather rows of `table` by id; result is ids.size() x cols.
inline Var embedding(Var table, std::vector<std::size_t> ids) {
  const Tensor& t = table.value();
  if (ids.empty()) throw InvalidArgument("embedding: no ids");
  const std::size_t n = t.cols();
  Tensor y = detail::as_matrix(ids.size(), n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= t.rows()) {
      throw InvalidArgument("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                            std::to_string(t.rows()) + " rows");
    }
    std::copy_n(t.row_span(ids[i]).begin(), n, y.row_span(i).begin());
  }
  return detail::graph_of(table).record(
      std::move(y), {table}, [table, ids = std::move(ids), n](Graph& g, std::size_t self) {
        const Tensor& gy = g.grad(self);
        Tensor& gt = g.grad(table);
        for (std::size_t i = 0; i < ids.size(); ++i)
          for (std::size_t j = 0; j < n; ++j) gt(ids[i], j) += gy(i, j);
      });
}

inline Var slice_cols(Var a, std::size_t start, std::size_t len) {
  const Tensor& x = a.value();
  if (len == 0 || start + len > x.cols()) throw InvalidArgument("slice_cols: range out of bounds");
  const std::size_t m = x.rows();
  Tensor y = detail::as_matrix(m, len);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < len; ++j) y(i, j) = x(i, start + j);
  return detail::graph_of(a).record(std::move(y), {a}, [a, start, len, m](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    Tensor& ga = g.grad(a);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < len; ++j) ga(i, start + j) += gy(i, j);
  });
}

inline Var slice_rows(Var a, std::size_t start, std::size_t len) {
  const Tensor& x = a.value();
  if (len == 0 || start + len > x.rows()) throw InvalidArgument("slice_rows: range out of bounds");
  const std::size_t n = x.cols();
  Tensor y = detail::as_matrix(len, n);
  std::copy_n(x.data().begin() + start * n, len * n, y.data().begin());
  return detail::graph_of(a).record(std::move(y), {a}, [a, start, len, n](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    Tensor& ga = g.grad(a);
    for (std::size_t i = 0; i < len * n; ++i) ga[start * n + i] += gy[i];
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: nothing to concatenate");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const Var& p : parts) {
    detail::require_same_graph(parts[0], p);
    if (p.rows() != m) throw InvalidArgument("concat_cols: row counts differ");
    n += p.cols();
  }
  Tensor y = detail::as_matrix(m, n);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& x = p.value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) y(i, off + j) = x(i, j);
    off += x.cols();
  }
  return parts[0].graph()->record(std::move(y), parts, [parts, m](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t w = p.cols();
      if (g.needs_grad(p)) {
        Tensor& gp = g.grad(p);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) gp(i, j) += gy(i, off + j);
      }
      off += w;
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: nothing to concatenate");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const Var& p : parts) {
    detail::require_same_graph(parts[0], p);
    if (p.cols() != n) throw InvalidArgument("concat_rows: column counts differ");
    m += p.rows();
  }
  Tensor y = detail::as_matrix(m, n);
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), y.data().begin() + off);
    off += p.value().size();
  }
  return parts[0].graph()->record(std::move(y), parts, [parts](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t sz = p.value().size();
      if (g.needs_grad(p)) {
        Tensor& gp = g.grad(p);
        for (std::size_t i = 0; i < sz; ++i) gp[i] += gy[off + i];
      }
      off += sz;
    }
  });
}

/// Strided frame stacking for 1-D convolution over time. Output row i is the
/// concatenation of input rows stride*i - left_pad .. stride*i - left_pad +
/// kernel - 1, with rows before the start read as zeros. Rows past the end are
/// never read, so the output length is floor((T + left_pad - kernel) / stride) + 1.
inline Var frame_stack(Var x, std::size_t kernel, std::size_t stride, std::size_t left_pad) {
  const Tensor& xv = x.value();
  const std::size_t t_in = xv.rows(), d = xv.cols();
  if (kernel == 0 || stride == 0 || t_in + left_pad < kernel) {
    throw InvalidArgument("frame_stack: " + std::to_string(t_in) + " frames are too few for kernel " +
                          std::to_string(kernel));
  }
  const std::size_t t_out = (t_in + left_pad - kernel) / stride + 1;
  Tensor y = detail::as_matrix(t_out, kernel * d);
  for (std::size_t i = 0; i < t_out; ++i) {
    for (std::size_t k = 0; k < kernel; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(stride * i + k) -
                                 static_cast<std::ptrdiff_t>(left_pad);
      if (src < 0) continue;
      for (std::size_t j = 0; j < d; ++j) y(i, k * d + j) = xv(static_cast<std::size_t>(src), j);
    }
  }
  return detail::graph_of(x).record(
      std::move(y), {x}, [x, kernel, stride, left_pad, t_out, d](Graph& g, std::size_t self) {
        const Tensor& gy = g.grad(self);
        Tensor& gx = g.grad(x);
        for (std::size_t i = 0; i < t_out; ++i) {
          for (std::size_t k = 0; k < kernel; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(stride * i + k) -
                                       static_cast<std::ptrdiff_t>(left_pad);
            if (src < 0) continue;
            for (std::size_t j = 0; j < d; ++j) gx(static_cast<std::size_t>(src), j) += gy(i, k * d + j);
          }
        }
      });
}

/// Broadcast sum over a grid: a(T x d), b(U x d) -> (T*U) x d with row
/// t*U + u equal to a(t) + b(u).
inline Var pair_sum(Var a, Var b) {
  detail::require_same_graph(a, b);
  if (a.cols() != b.cols()) throw InvalidArgument("pair_sum: column counts differ");
  const std::size_t T = a.rows(), U = b.rows(), d = a.cols();
  Tensor y = detail::as_matrix(T * U, d);
  const Tensor &xa = a.value(), &xb = b.value();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u < U; ++u)
      for (std::size_t j = 0; j < d; ++j) y(t * U + u, j) = xa(t, j) + xb(u, j);
  return a.graph()->record(std::move(y), {a, b}, [a, b, T, U, d](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    const bool ga_needed = g.needs_grad(a), gb_needed = g.needs_grad(b);
    Tensor* ga = ga_needed ? &g.grad(a) : nullptr;
    Tensor* gb = gb_needed ? &g.grad(b) : nullptr;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t u = 0; u < U; ++u)
        for (std::size_t j = 0; j < d; ++j) {
          const double v = gy(t * U + u, j);
          if (ga) (*ga)(t, j) += v;
          if (gb) (*gb)(u, j) += v;
        }
  });
}

/// Outer product of two columns: a(T x 1), b(U x 1) -> (T*U) x 1.
inline Var outer(Var a, Var b) {
  detail::require_same_graph(a, b);
  if (a.cols() != 1 || b.cols() != 1) throw InvalidArgument("outer: operands must be columns");
  const std::size_t T = a.rows(), U = b.rows();
  Tensor y = detail::as_matrix(T * U, 1);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u < U; ++u) y[t * U + u] = a.value()[t] * b.value()[u];
  return a.graph()->record(std::move(y), {a, b}, [a, b, T, U](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    if (g.needs_grad(a)) {
      Tensor& ga = g.grad(a);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t u = 0; u < U; ++u) ga[t] += gy[t * U + u] * b.value()[u];
    }
    if (g.needs_grad(b)) {
      Tensor& gb = g.grad(b);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t u = 0; u < U; ++u) gb[u] += gy[t * U + u] * a.value()[t];
    }
  });
}

}  // namespace streamduct
