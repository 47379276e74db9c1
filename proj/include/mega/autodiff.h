#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mega/attention.h"
#include "mega/numerics.h"
#include "mega/rng.h"
#include "mega/tensor.h"

// Reverse-mode differentiation over a fixed set of tensor primitives.
//
// A Graph is built first (nodes record their primitive and inputs, in
// topological order by construction), then evaluated with forward(), then
// differentiated with backward(). Parameters are bound by name to tensors
// owned elsewhere; rebinding or mutating them and calling forward() again
// recomputes every cached value.
namespace mega::ag {

enum class Primitive {
  input,
  param,
  matmul,
  transpose,
  add,
  sub,
  mul,
  add_row,
  mul_row,
  affine,
  activation,
  laplace,
  softmax_rows,
  attention,
  causal_conv,
  ema_scan,
  normalize,
  reshape,
  slice_rows,
  concat_rows,
  reduce_sum,
  mean_rows,
  rotary,
  embedding,
  dropout,
  cross_entropy,
};

std::string_view to_string(Primitive p);

class Graph;

struct Var {
  Graph* graph = nullptr;
  int id = -1;
  bool valid() const { return graph != nullptr && id >= 0; }
};

class Op {
 public:
  virtual ~Op() = default;
  virtual Primitive kind() const = 0;
  virtual Tensor forward(std::span<const Tensor* const> in) = 0;
  // Adds d(loss)/d(input i) into grad_in[i]; entries are null for inputs
  // that do not need a gradient.
  virtual void backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& grad_out,
                        std::span<Tensor* const> grad_in) = 0;
  // Secondary forward result (e.g. the final EMA state), if any.
  virtual const Tensor* aux() const { return nullptr; }
};

// Parameter name -> gradient of identical shape.
class GradientSet {
 public:
  void add(const std::string& name, const Tensor& grad);
  bool contains(const std::string& name) const { return grads_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

  GradientSet& operator+=(const GradientSet& other);
  void scale(double factor);
  double global_norm() const;

 private:
  std::map<std::string, Tensor> grads_;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Tensor value, bool requires_grad = false);
  // Declares (or returns the existing) parameter node bound to `value`.
  // The tensor must outlive the graph.
  Var param(const std::string& name, const Tensor& value, bool trainable = true);
  // Declares an unbound parameter; forward() fails until it is bound.
  Var param(const std::string& name);
  void bind(const std::string& name, const Tensor& value, bool trainable = true);

  Var apply(std::unique_ptr<Op> op, std::vector<Var> inputs);

  void forward();
  bool forwarded() const { return forwarded_; }

  const Tensor& value(Var v) const;
  const Tensor* aux(Var v) const;
  Primitive kind(Var v) const;
  const std::vector<int>& inputs_of(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from `output` seeded with `seed` (same shape as output).
  GradientSet backward(Var output, const Tensor& seed);
  // Scalar output, seed 1.
  GradientSet backward(Var output);
  // Gradient reaching an input node created with requires_grad.
  const Tensor& grad(Var v) const;

 private:
  struct Node {
    Primitive kind = Primitive::input;
    std::unique_ptr<Op> op;
    std::vector<int> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::string name;
    const Tensor* bound = nullptr;
    bool trainable = false;
  };

  const Tensor& node_value(const Node& n) const { return n.bound ? *n.bound : n.value; }
  void check(Var v) const;

  std::vector<Node> nodes_;
  std::map<std::string, int> params_;
  bool forwarded_ = false;
  bool backward_done_ = false;
};

// ---- primitives -------------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// Broadcast a width-p row over every row of an m×p matrix.
Var add_row(Var a, Var row);
Var mul_row(Var a, Var row);
// scale * a + shift
Var affine(Var a, double scale, double shift = 0.0);
Var activation(Activation kind, Var a);
inline Var silu(Var a) { return activation(Activation::silu, a); }
inline Var sigmoid(Var a) { return activation(Activation::sigmoid, a); }
Var laplace(Var a);
Var softmax_rows(Var a);
// Chunked single-head attention. bias_table is an invalid Var when no
// learned relative bias is used. dropout_seed is used only when
// config.dropout > 0.
Var attention(Var q, Var k, Var v, Var bias_table, const AttnConfig& config, std::int64_t position_offset = 0,
              std::optional<SeedState> dropout_seed = std::nullopt);
// Causal convolution of two length-n vectors.
Var causal_conv(Var x, Var kernel);
// Multi-dimensional damped EMA scan; aux() of the result holds the final
// hidden state.
Var ema_scan(Var x, Var alpha_logit, Var delta_logit, Var beta, Var eta, Var h_init);
// bias is an invalid Var for scale-norm.
Var normalize(NormKind kind, Var x, Var gain, Var bias);
Var reshape(Var a, Shape shape);
Var slice_rows(Var a, std::size_t begin, std::size_t len);
Var concat_rows(const std::vector<Var>& parts);
Var reduce_sum(Var a);
Var mean_rows(Var a);
// Rotates row i as position position_offset + i.
Var rotary(Var a, std::int64_t position_offset);
Var embedding(Var table, std::vector<int> ids);
Var dropout(Var a, double rate, SeedState seed);
// Mean over rows of -log softmax(logits)[label].
Var cross_entropy(Var logits, std::vector<int> labels);

// ---- finite-difference checking ---------------------------------------------

struct NamedParam {
  std::string name;
  Tensor* value;
};

struct FdOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  std::size_t max_coords = 64;  // groups larger than this are sampled
  std::uint64_t seed = 0x5eed;
};

struct FdGroupReport {
  std::string name;
  std::size_t checked = 0;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct FdReport {
  std::vector<FdGroupReport> groups;
  double tol = 0.0;
  double max_rel_err() const;
  bool passed() const { return max_rel_err() <= tol; }
};

double relative_error(double analytic, double numeric);

// Compares `analytic` against central differences of `loss`, which must read
// the current contents of the parameter tensors. Every tensor is restored
// bit-exactly after each perturbation.
FdReport finite_diff_check(const std::function<double()>& loss, std::span<const NamedParam> params,
                           const GradientSet& analytic, const FdOptions& options = {});

}  // namespace mega::ag
