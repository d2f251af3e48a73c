#include "rectflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>
#include <unordered_set>

#include "rectflow/errors.hpp"

namespace rectflow::ad {

namespace {

thread_local bool g_grad_enabled = true;

struct Dims {
  std::size_t rows;
  std::size_t cols;
};

Dims dims_of(const Tensor::Shape& s) {
  switch (s.size()) {
    case 0:
      return {1, 1};
    case 1:
      return {1, s[0]};
    case 2:
      return {s[0], s[1]};
    default:
      throw InputError("operations support rank <= 2, got " + shape_string(s));
  }
}

Tensor::Shape broadcast_shape(const Tensor::Shape& a, const Tensor::Shape& b) {
  const Dims da = dims_of(a);
  const Dims db = dims_of(b);
  auto merge = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw InputError("cannot broadcast " + shape_string(a) + " with " +
                     shape_string(b));
  };
  const std::size_t r = merge(da.rows, db.rows);
  const std::size_t c = merge(da.cols, db.cols);
  const std::size_t rank = std::max(a.size(), b.size());
  if (rank == 2) return {r, c};
  if (rank == 1) return {c};
  return {};
}

template <class F>
Tensor binary_kernel(const Tensor& a, const Tensor& b, F f) {
  Tensor out(broadcast_shape(a.shape(), b.shape()));
  const Dims da = dims_of(a.shape());
  const Dims db = dims_of(b.shape());
  const Dims d = dims_of(out.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  if (da.rows == d.rows && da.cols == d.cols && db.rows == d.rows &&
      db.cols == d.cols) {
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  for (std::size_t i = 0; i < d.rows; ++i) {
    const double* ra = pa + (da.rows == 1 ? 0 : i * da.cols);
    const double* rb = pb + (db.rows == 1 ? 0 : i * db.cols);
    double* ro = po + i * d.cols;
    for (std::size_t j = 0; j < d.cols; ++j) {
      ro[j] = f(ra[da.cols == 1 ? 0 : j], rb[db.cols == 1 ? 0 : j]);
    }
  }
  return out;
}

template <class F>
Tensor unary_kernel(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = f(pa[i]);
  return out;
}

Tensor sum_to_tensor(const Tensor& g, const Tensor::Shape& target) {
  const Dims dg = dims_of(g.shape());
  const Dims dt = dims_of(target);
  if (dg.rows == dt.rows && dg.cols == dt.cols) return g.reshaped(target);
  Tensor out(target);
  double* po = out.data();
  const double* pg = g.data();
  for (std::size_t i = 0; i < dg.rows; ++i) {
    for (std::size_t j = 0; j < dg.cols; ++j) {
      po[(dt.rows == 1 ? 0 : i) * dt.cols + (dt.cols == 1 ? 0 : j)] +=
          pg[i * dg.cols + j];
    }
  }
  return out;
}

Tensor broadcast_tensor(const Tensor& a, const Tensor::Shape& target) {
  const Dims da = dims_of(a.shape());
  const Dims dt = dims_of(target);
  if (da.rows == dt.rows && da.cols == dt.cols) return a.reshaped(target);
  if ((da.rows != 1 && da.rows != dt.rows) || (da.cols != 1 && da.cols != dt.cols)) {
    throw InputError("cannot broadcast " + shape_string(a.shape()) + " to " +
                     shape_string(target));
  }
  Tensor out(target);
  double* po = out.data();
  const double* pa = a.data();
  for (std::size_t i = 0; i < dt.rows; ++i) {
    for (std::size_t j = 0; j < dt.cols; ++j) {
      po[i * dt.cols + j] =
          pa[(da.rows == 1 ? 0 : i) * da.cols + (da.cols == 1 ? 0 : j)];
    }
  }
  return out;
}

bool any_requires_grad(const std::vector<Var>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Var& v) { return v.defined() && v.requires_grad(); });
}

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Tensor& Var::value() const {
  if (!node_) throw InputError("use of undefined Var");
  return node_->value;
}

Tensor& Var::mutable_value() {
  if (!node_) throw InputError("use of undefined Var");
  return node_->value;
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

bool Var::is_leaf() const { return node_ && !node_->backward; }

bool grad_enabled() { return g_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) {
  g_grad_enabled = enabled;
}

GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

Var make_op(Tensor value, std::vector<Var> inputs, BackwardFn backward,
            const char* op) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  if (g_grad_enabled && any_requires_grad(inputs)) {
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    node->requires_grad = true;
  }
  return Var(std::move(node));
}

Var constant(Tensor value) { return Var(std::move(value), false); }

Var zeros_like(const Var& v) { return constant(Tensor(v.shape())); }

Var ones_like(const Var& v) { return constant(Tensor::full(v.shape(), 1.0)); }

Var add(const Var& a, const Var& b) {
  return make_op(
      binary_kernel(a.value(), b.value(), [](double x, double y) { return x + y; }),
      {a, b},
      [sa = a.shape(), sb = b.shape()](const Var&, const Var& g) {
        return std::vector<Var>{sum_to(g, sa), sum_to(g, sb)};
      },
      "add");
}

Var sub(const Var& a, const Var& b) {
  return make_op(
      binary_kernel(a.value(), b.value(), [](double x, double y) { return x - y; }),
      {a, b},
      [sa = a.shape(), sb = b.shape()](const Var&, const Var& g) {
        return std::vector<Var>{sum_to(g, sa), neg(sum_to(g, sb))};
      },
      "sub");
}

Var mul(const Var& a, const Var& b) {
  return make_op(
      binary_kernel(a.value(), b.value(), [](double x, double y) { return x * y; }),
      {a, b},
      [a, b](const Var&, const Var& g) {
        return std::vector<Var>{
            a.requires_grad() ? sum_to(mul(g, b), a.shape()) : Var(),
            b.requires_grad() ? sum_to(mul(g, a), b.shape()) : Var()};
      },
      "mul");
}

Var neg(const Var& a) {
  return make_op(
      unary_kernel(a.value(), [](double x) { return -x; }), {a},
      [](const Var&, const Var& g) { return std::vector<Var>{neg(g)}; }, "neg");
}

Var scale(const Var& a, double factor) {
  return make_op(
      unary_kernel(a.value(), [factor](double x) { return factor * x; }), {a},
      [factor](const Var&, const Var& g) {
        return std::vector<Var>{scale(g, factor)};
      },
      "scale");
}

Var add_scalar(const Var& a, double offset) {
  return make_op(
      unary_kernel(a.value(), [offset](double x) { return x + offset; }), {a},
      [](const Var&, const Var& g) { return std::vector<Var>{g}; }, "add_scalar");
}

Var tanh(const Var& a) {
  return make_op(
      unary_kernel(a.value(), [](double x) { return std::tanh(x); }), {a},
      [](const Var& self, const Var& g) {
        // d tanh = 1 - tanh^2
        return std::vector<Var>{mul(g, add_scalar(neg(square(self)), 1.0))};
      },
      "tanh");
}

Var exp(const Var& a) {
  return make_op(
      unary_kernel(a.value(), [](double x) { return std::exp(x); }), {a},
      [](const Var& self, const Var& g) { return std::vector<Var>{mul(g, self)}; },
      "exp");
}

Var square(const Var& a) {
  return make_op(
      unary_kernel(a.value(), [](double x) { return x * x; }), {a},
      [a](const Var&, const Var& g) {
        return std::vector<Var>{scale(mul(g, a), 2.0)};
      },
      "square");
}

Var matmul(const Var& a, const Var& b, bool transpose_a, bool transpose_b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2) {
    throw InputError("matmul expects rank-2 operands, got " +
                     shape_string(A.shape()) + " and " + shape_string(B.shape()));
  }
  const std::size_t m = transpose_a ? A.cols() : A.rows();
  const std::size_t k = transpose_a ? A.rows() : A.cols();
  const std::size_t kb = transpose_b ? B.cols() : B.rows();
  const std::size_t n = transpose_b ? B.rows() : B.cols();
  if (k != kb) {
    throw InputError("matmul inner dimension mismatch: " + shape_string(A.shape()) +
                     " x " + shape_string(B.shape()));
  }
  Tensor C({m, n});
  const double* pa = A.data();
  const double* pb = B.data();
  double* pc = C.data();
  const std::size_t lda = A.cols();
  const std::size_t ldb = B.cols();
  if (!transpose_a && transpose_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ra = pa + i * lda;
      for (std::size_t j = 0; j < n; ++j) {
        const double* rb = pb + j * ldb;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += ra[p] * rb[p];
        pc[i * n + j] = s;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      double* rc = pc + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = transpose_a ? pa[p * lda + i] : pa[i * lda + p];
        if (av == 0.0) continue;
        if (!transpose_b) {
          const double* rb = pb + p * ldb;
          for (std::size_t j = 0; j < n; ++j) rc[j] += av * rb[j];
        } else {
          for (std::size_t j = 0; j < n; ++j) rc[j] += av * pb[j * ldb + p];
        }
      }
    }
  }
  return make_op(
      std::move(C), {a, b},
      [a, b, transpose_a, transpose_b](const Var&, const Var& g) {
        const bool ga = a.requires_grad();
        const bool gb = b.requires_grad();
        if (!transpose_a && !transpose_b) {
          return std::vector<Var>{ga ? matmul(g, b, false, true) : Var(),
                                  gb ? matmul(a, g, true, false) : Var()};
        }
        if (!transpose_a && transpose_b) {
          return std::vector<Var>{ga ? matmul(g, b, false, false) : Var(),
                                  gb ? matmul(g, a, true, false) : Var()};
        }
        if (transpose_a && !transpose_b) {
          return std::vector<Var>{ga ? matmul(b, g, false, true) : Var(),
                                  gb ? matmul(a, g, false, false) : Var()};
        }
        return std::vector<Var>{ga ? matmul(b, g, true, true) : Var(),
                                gb ? matmul(g, a, true, true) : Var()};
      },
      "matmul");
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  Var y = matmul(x, weight, false, true);
  return bias.defined() ? add(y, bias) : y;
}

Var sum_cols(const Var& a) {
  const Tensor& A = a.value();
  const std::size_t r = A.rows();
  const std::size_t c = A.cols();
  Tensor out({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += A.data()[i * c + j];
    out[i] = s;
  }
  return make_op(
      std::move(out), {a},
      [shape = a.shape()](const Var&, const Var& g) {
        return std::vector<Var>{broadcast_to(g, shape)};
      },
      "sum_cols");
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return make_op(
      Tensor::scalar(s), {a},
      [shape = a.shape()](const Var&, const Var& g) {
        return std::vector<Var>{broadcast_to(g, shape)};
      },
      "sum_all");
}

Var mean_all(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum_all(a), 1.0 / n);
}

Var broadcast_to(const Var& a, const Tensor::Shape& shape) {
  return make_op(
      broadcast_tensor(a.value(), shape), {a},
      [sa = a.shape()](const Var&, const Var& g) {
        return std::vector<Var>{sum_to(g, sa)};
      },
      "broadcast_to");
}

Var sum_to(const Var& a, const Tensor::Shape& shape) {
  if (a.shape() == shape) return a;
  return make_op(
      sum_to_tensor(a.value(), shape), {a},
      [sa = a.shape()](const Var&, const Var& g) {
        return std::vector<Var>{broadcast_to(g, sa)};
      },
      "sum_to");
}

Var reshape(const Var& a, const Tensor::Shape& shape) {
  return make_op(
      a.value().reshaped(shape), {a},
      [sa = a.shape()](const Var&, const Var& g) {
        return std::vector<Var>{reshape(g, sa)};
      },
      "reshape");
}

Var select_cols(const Var& a, const Index& columns) {
  const Tensor& A = a.value();
  const std::size_t r = A.rows();
  const std::size_t c = A.cols();
  const std::size_t k = columns.size();
  for (auto col : columns) {
    if (col >= c) throw InputError("select_cols index out of range");
  }
  Tensor out({r, k});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < k; ++j) out.data()[i * k + j] = A.data()[i * c + columns[j]];
  }
  return make_op(
      std::move(out), {a},
      [columns, c](const Var&, const Var& g) {
        return std::vector<Var>{scatter_cols(g, columns, c)};
      },
      "select_cols");
}

Var scatter_cols(const Var& a, const Index& columns, std::size_t width) {
  const Tensor& A = a.value();
  const std::size_t r = A.rows();
  const std::size_t k = A.cols();
  if (columns.size() != k) throw InputError("scatter_cols index count mismatch");
  Tensor out({r, width});
  for (std::size_t j = 0; j < k; ++j) {
    if (columns[j] >= width) throw InputError("scatter_cols index out of range");
  }
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      out.data()[i * width + columns[j]] += A.data()[i * k + j];
    }
  }
  return make_op(
      std::move(out), {a},
      [columns](const Var&, const Var& g) {
        return std::vector<Var>{select_cols(g, columns)};
      },
      "scatter_cols");
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InputError("concat_cols of nothing");
  const std::size_t r = parts.front().rows();
  std::size_t width = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw InputError("concat_cols row mismatch");
    width += p.cols();
  }
  Tensor out({r, width});
  std::vector<Index> ranges;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t k = p.cols();
    Index idx(k);
    for (std::size_t j = 0; j < k; ++j) idx[j] = offset + j;
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        out.data()[i * width + offset + j] = p.value().data()[i * k + j];
      }
    }
    ranges.push_back(std::move(idx));
    offset += k;
  }
  return make_op(
      std::move(out), parts,
      [ranges = std::move(ranges)](const Var&, const Var& g) {
        std::vector<Var> grads;
        grads.reserve(ranges.size());
        for (const auto& idx : ranges) grads.push_back(select_cols(g, idx));
        return grads;
      },
      "concat_cols");
}

Var stop_gradient(const Var& a) { return constant(a.value()); }

Var logdet_spd(const Var& gram, std::size_t d, double jitter) {
  const Tensor& G = gram.value();
  const std::size_t r = G.rows();
  if (G.cols() != d * d) {
    throw InputError("logdet_spd expects [r, d*d] with d=" + std::to_string(d));
  }
  Tensor out({r, 1});
  Tensor inverse({r, d * d});
  std::vector<double> L(d * d);
  std::vector<double> col(d);
  for (std::size_t row = 0; row < r; ++row) {
    const double* A = G.data() + row * d * d;
    std::fill(L.begin(), L.end(), 0.0);
    double smallest = std::numeric_limits<double>::infinity();
    double logdet = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double diag = A[j * d + j] + jitter;
      for (std::size_t p = 0; p < j; ++p) diag -= L[j * d + p] * L[j * d + p];
      smallest = std::min(smallest, diag);
      if (!(diag > 0.0) || !std::isfinite(diag)) {
        throw ConditioningError(
            "Cholesky factorization failed at row " + std::to_string(row) +
                " (pivot " + std::to_string(j) + " = " + std::to_string(diag) + ")",
            diag);
      }
      const double ljj = std::sqrt(diag);
      L[j * d + j] = ljj;
      logdet += 2.0 * std::log(ljj);
      for (std::size_t i = j + 1; i < d; ++i) {
        // Symmetrized read so the gradient below is exact for any input.
        double s = 0.5 * (A[i * d + j] + A[j * d + i]);
        for (std::size_t p = 0; p < j; ++p) s -= L[i * d + p] * L[j * d + p];
        L[i * d + j] = s / ljj;
      }
    }
    out[row] = logdet;
    // A^{-1} column by column from the factor.
    double* inv = inverse.data() + row * d * d;
    for (std::size_t c = 0; c < d; ++c) {
      std::fill(col.begin(), col.end(), 0.0);
      col[c] = 1.0;
      for (std::size_t i = 0; i < d; ++i) {
        double s = col[i];
        for (std::size_t p = 0; p < i; ++p) s -= L[i * d + p] * col[p];
        col[i] = s / L[i * d + i];
      }
      for (std::size_t ii = d; ii-- > 0;) {
        double s = col[ii];
        for (std::size_t p = ii + 1; p < d; ++p) s -= L[p * d + ii] * col[p];
        col[ii] = s / L[ii * d + ii];
      }
      for (std::size_t i = 0; i < d; ++i) inv[i * d + c] = col[i];
    }
  }
  return make_op(
      std::move(out), {gram},
      [inverse = std::move(inverse)](const Var&, const Var& g) {
        return std::vector<Var>{mul(g, constant(inverse))};
      },
      "logdet_spd");
}

std::vector<Var> grad(const Var& output, std::span<const Var> wrt,
                      const Var& grad_output, bool create_graph) {
  std::vector<Var> result(wrt.size());
  std::unordered_set<const Node*> targets;
  for (const auto& w : wrt) {
    if (w.defined()) targets.insert(w.node());
  }

  // Post-order DFS over nodes requiring gradients, recording which of them
  // lie on a path to some target.
  std::vector<Var> order;
  std::unordered_map<const Node*, bool> relevant;
  if (output.defined() && output.requires_grad()) {
    struct Frame {
      Var var;
      std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({output, 0});
    relevant.emplace(output.node(), false);
    while (!stack.empty()) {
      Frame& top = stack.back();
      Node* node = top.var.node();
      if (top.next < node->inputs.size()) {
        const Var& in = node->inputs[top.next++];
        if (in.defined() && in.requires_grad() && !relevant.count(in.node())) {
          relevant.emplace(in.node(), false);
          stack.push_back({in, 0});
        }
        continue;
      }
      bool on_path = targets.count(node) > 0;
      for (const auto& in : node->inputs) {
        if (in.defined() && in.requires_grad() && relevant[in.node()]) on_path = true;
      }
      relevant[node] = on_path;
      order.push_back(top.var);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node*, Var> grads;
  if (!order.empty() && relevant[output.node()]) {
    GradModeGuard mode(create_graph);
    grads[output.node()] =
        grad_output.defined() ? grad_output : ones_like(output);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = it->node();
      if (!relevant[node] || !node->backward) continue;
      auto found = grads.find(node);
      if (found == grads.end()) continue;
      const Var g = found->second;
      std::vector<Var> input_grads = node->backward(*it, g);
      for (std::size_t i = 0; i < node->inputs.size(); ++i) {
        const Var& in = node->inputs[i];
        if (!in.defined() || !in.requires_grad() || !relevant[in.node()]) continue;
        if (!input_grads[i].defined()) continue;
        auto slot = grads.find(in.node());
        if (slot == grads.end()) {
          grads.emplace(in.node(), input_grads[i]);
        } else {
          slot->second = add(slot->second, input_grads[i]);
        }
      }
    }
  }

  for (std::size_t i = 0; i < wrt.size(); ++i) {
    if (!wrt[i].defined()) continue;
    auto found = grads.find(wrt[i].node());
    result[i] = found != grads.end() ? found->second : zeros_like(wrt[i]);
  }
  return result;
}

Dual make_dual(const Var& primal, const Var& tangent) {
  if (primal.shape() != tangent.shape()) {
    throw InputError("tangent shape " + shape_string(tangent.shape()) +
                     " differs from primal shape " + shape_string(primal.shape()));
  }
  return {primal, tangent};
}

Dual add(const Dual& a, const Dual& b) {
  return {add(a.primal, b.primal), add(a.tangent, b.tangent)};
}

Dual add(const Dual& a, const Var& constant_term) {
  return {add(a.primal, constant_term), a.tangent};
}

Dual sub(const Dual& a, const Dual& b) {
  return {sub(a.primal, b.primal), sub(a.tangent, b.tangent)};
}

Dual mul(const Dual& a, const Dual& b) {
  return {mul(a.primal, b.primal),
          add(mul(a.tangent, b.primal), mul(a.primal, b.tangent))};
}

Dual mul(const Dual& a, const Var& constant_factor) {
  return {mul(a.primal, constant_factor), mul(a.tangent, constant_factor)};
}

Dual neg(const Dual& a) { return {neg(a.primal), neg(a.tangent)}; }

Dual scale(const Dual& a, double factor) {
  return {scale(a.primal, factor), scale(a.tangent, factor)};
}

Dual add_scalar(const Dual& a, double offset) {
  return {add_scalar(a.primal, offset), a.tangent};
}

Dual tanh(const Dual& a) {
  Var y = tanh(a.primal);
  return {y, mul(a.tangent, add_scalar(neg(square(y)), 1.0))};
}

Dual exp(const Dual& a) {
  Var y = exp(a.primal);
  return {y, mul(a.tangent, y)};
}

Dual square(const Dual& a) {
  return {square(a.primal), scale(mul(a.primal, a.tangent), 2.0)};
}

Dual linear(const Dual& x, const Var& weight, const Var& bias) {
  return {linear(x.primal, weight, bias), linear(x.tangent, weight, Var())};
}

Dual sum_cols(const Dual& a) { return {sum_cols(a.primal), sum_cols(a.tangent)}; }

Dual select_cols(const Dual& a, const Index& columns) {
  return {select_cols(a.primal, columns), select_cols(a.tangent, columns)};
}

Dual scatter_cols(const Dual& a, const Index& columns, std::size_t width) {
  return {scatter_cols(a.primal, columns, width),
          scatter_cols(a.tangent, columns, width)};
}

Dual concat_cols(const std::vector<Dual>& parts) {
  std::vector<Var> p;
  std::vector<Var> t;
  for (const auto& d : parts) {
    p.push_back(d.primal);
    t.push_back(d.tangent);
  }
  return {concat_cols(p), concat_cols(t)};
}

Dual stop_gradient(const Dual& a) {
  return {stop_gradient(a.primal), zeros_like(a.tangent)};
}

Var ParamStore::add(const std::string& name, Tensor init) {
  if (find(name)) throw InputError("duplicate parameter name: " + name);
  Var v(std::move(init), true);
  entries_.push_back({name, v});
  return v;
}

std::vector<Var> ParamStore::vars() const {
  std::vector<Var> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.var);
  return out;
}

std::size_t ParamStore::total_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.var.value().size();
  return n;
}

const Var* ParamStore::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e.var;
  }
  return nullptr;
}

void ParamStore::extend(const ParamStore& other, const std::string& prefix) {
  for (const auto& e : other.entries_) {
    if (find(prefix + e.name)) {
      throw InputError("duplicate parameter name: " + prefix + e.name);
    }
    entries_.push_back({prefix + e.name, e.var});
  }
}

std::vector<Tensor> ParamStore::snapshot() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.var.value());
  return out;
}

void ParamStore::restore(const std::vector<Tensor>& values) {
  if (values.size() != entries_.size()) {
    throw InputError("parameter snapshot size mismatch");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    Var v = entries_[i].var;
    if (v.value().shape() != values[i].shape()) {
      throw InputError("parameter snapshot shape mismatch for " + entries_[i].name);
    }
    v.mutable_value() = values[i];
  }
}

std::vector<Tensor> param_grad(const Var& scalar_loss, const ParamStore& params) {
  if (scalar_loss.value().rank() != 0) {
    throw InputError("param_grad expects a scalar loss, got shape " +
                     shape_string(scalar_loss.shape()));
  }
  const auto vars = params.vars();
  auto grads = grad(scalar_loss, vars);
  std::vector<Tensor> out;
  out.reserve(grads.size());
  for (const auto& g : grads) out.push_back(g.value());
  return out;
}

void CostCounters::count_jvp(bool retained) {
  jvp_.fetch_add(1, std::memory_order_relaxed);
  if (retained) jvp_retained_.fetch_add(1, std::memory_order_relaxed);
}

void CostCounters::count_vjp(bool retained) {
  vjp_.fetch_add(1, std::memory_order_relaxed);
  if (retained) vjp_retained_.fetch_add(1, std::memory_order_relaxed);
}

void CostCounters::reset() {
  jvp_ = 0;
  vjp_ = 0;
  jvp_retained_ = 0;
  vjp_retained_ = 0;
}

CostSnapshot CostCounters::snapshot() const {
  return {jvp_.load(), vjp_.load(), jvp_retained_.load(), vjp_retained_.load()};
}

CostCounters& cost_counters() {
  static CostCounters counters;
  return counters;
}

}  // namespace rectflow::ad
