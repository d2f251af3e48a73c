#pragma once

// Tape-based reverse mode over batched 2-D tensors, with dual numbers built
// on top of it for forward mode.
//
// A tape is implicit: every operation executed while gradient recording is
// enabled creates a node that owns its output value and references its input
// nodes. Nothing is kept globally, so independent evaluations never share
// state beyond the read-only parameter leaves.
//
// Backward rules are themselves written with these operations. Running
// `grad` with create_graph=true therefore yields a differentiable result,
// which is what lets a vector-Jacobian product be differentiated again with
// respect to the parameters.

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rectflow/tensor.hpp"

namespace rectflow::ad {

struct Node;

class Var {
 public:
  Var() = default;
  // Leaf node.
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const;
  // Only meaningful for leaves; used by optimizers and checkpoint loading.
  Tensor& mutable_value();
  bool requires_grad() const;
  bool is_leaf() const;
  const Tensor::Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using BackwardFn =
    std::function<std::vector<Var>(const Var& self, const Var& grad_output)>;

struct Node {
  Tensor value;
  std::vector<Var> inputs;
  BackwardFn backward;
  bool requires_grad = false;
  const char* op = "leaf";
};

// Thread-local recording switch.
bool grad_enabled();

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

// Records a node when recording is on and some input requires a gradient;
// otherwise returns a constant leaf.
Var make_op(Tensor value, std::vector<Var> inputs, BackwardFn backward,
            const char* op);

Var constant(Tensor value);
Var zeros_like(const Var& v);
Var ones_like(const Var& v);

// Element-wise, with 2-D broadcasting of size-1 rows/columns.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var tanh(const Var& a);
Var exp(const Var& a);
Var square(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

// op(a) * op(b) where op transposes when the flag is set.
Var matmul(const Var& a, const Var& b, bool transpose_a = false,
           bool transpose_b = false);
// x W^T + b for x [n, in], W [out, in], b [1, out] (b may be undefined).
Var linear(const Var& x, const Var& weight, const Var& bias);

Var sum_cols(const Var& a);  // [r, c] -> [r, 1]
Var sum_all(const Var& a);   // -> scalar
Var mean_all(const Var& a);  // -> scalar
Var broadcast_to(const Var& a, const Tensor::Shape& shape);
Var sum_to(const Var& a, const Tensor::Shape& shape);
Var reshape(const Var& a, const Tensor::Shape& shape);

using Index = std::vector<std::size_t>;
Var select_cols(const Var& a, const Index& columns);
// Places the columns of a at `columns` of an [r, width] zero matrix.
Var scatter_cols(const Var& a, const Index& columns, std::size_t width);
Var concat_cols(const std::vector<Var>& parts);

// Value passes through; no gradient flows back through the result.
Var stop_gradient(const Var& a);

// Row-wise log det of SPD matrices stored flattened as [r, d*d]. Cholesky
// based. `jitter` is added to the diagonal first. Throws ConditioningError
// with the smallest pivot on failure. Not twice differentiable.
Var logdet_spd(const Var& gram, std::size_t d, double jitter = 0.0);

// Gradients of `output` with respect to `wrt`. `grad_output` defaults to
// ones. Inputs that `output` does not depend on receive zeros.
std::vector<Var> grad(const Var& output, std::span<const Var> wrt,
                      const Var& grad_output = Var(), bool create_graph = false);

// Forward-mode value: a primal with one tangent of the same shape.
struct Dual {
  Var primal;
  Var tangent;
};

Dual make_dual(const Var& primal, const Var& tangent);
Dual add(const Dual& a, const Dual& b);
Dual add(const Dual& a, const Var& constant_term);
Dual sub(const Dual& a, const Dual& b);
Dual mul(const Dual& a, const Dual& b);
Dual mul(const Dual& a, const Var& constant_factor);
Dual neg(const Dual& a);
Dual scale(const Dual& a, double factor);
Dual add_scalar(const Dual& a, double offset);
Dual tanh(const Dual& a);
Dual exp(const Dual& a);
Dual square(const Dual& a);
Dual linear(const Dual& x, const Var& weight, const Var& bias);
Dual sum_cols(const Dual& a);
Dual select_cols(const Dual& a, const Index& columns);
Dual scatter_cols(const Dual& a, const Index& columns, std::size_t width);
Dual concat_cols(const std::vector<Dual>& parts);
Dual stop_gradient(const Dual& a);

inline Dual operator+(const Dual& a, const Dual& b) { return add(a, b); }
inline Dual operator-(const Dual& a, const Dual& b) { return sub(a, b); }
inline Dual operator*(const Dual& a, const Dual& b) { return mul(a, b); }

// Named parameter leaves with stable insertion order.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Var var;
  };

  Var add(const std::string& name, Tensor init);
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Var> vars() const;
  std::size_t size() const { return entries_.size(); }
  std::size_t total_count() const;
  const Var* find(const std::string& name) const;
  // Appends the entries of another store under a name prefix.
  void extend(const ParamStore& other, const std::string& prefix = "");

  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

 private:
  std::vector<Entry> entries_;
};

// Parameter gradients of a scalar loss; parameters off the tape get zeros.
std::vector<Tensor> param_grad(const Var& scalar_loss, const ParamStore& params);

// Instrumented calls. `retained` counts products whose graph is kept for a
// later backward pass with respect to the parameters.
struct CostSnapshot {
  std::uint64_t jvp = 0;
  std::uint64_t vjp = 0;
  std::uint64_t jvp_retained = 0;
  std::uint64_t vjp_retained = 0;
};

class CostCounters {
 public:
  void count_jvp(bool retained);
  void count_vjp(bool retained);
  void reset();
  CostSnapshot snapshot() const;

 private:
  std::atomic<std::uint64_t> jvp_{0};
  std::atomic<std::uint64_t> vjp_{0};
  std::atomic<std::uint64_t> jvp_retained_{0};
  std::atomic<std::uint64_t> vjp_retained_{0};
};

CostCounters& cost_counters();

}  // namespace rectflow::ad
