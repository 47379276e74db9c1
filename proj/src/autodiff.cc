#include "mega/autodiff.h"

#include <algorithm>
#include <cmath>

#include "mega/ema.h"

namespace mega::ag {

using mega::to_string;

std::string_view to_string(Primitive p) {
  switch (p) {
    case Primitive::input: return "input";
    case Primitive::param: return "param";
    case Primitive::matmul: return "matmul";
    case Primitive::transpose: return "transpose";
    case Primitive::add: return "add";
    case Primitive::sub: return "sub";
    case Primitive::mul: return "mul";
    case Primitive::add_row: return "add_row";
    case Primitive::mul_row: return "mul_row";
    case Primitive::affine: return "affine";
    case Primitive::activation: return "activation";
    case Primitive::laplace: return "laplace";
    case Primitive::softmax_rows: return "softmax_rows";
    case Primitive::attention: return "attention";
    case Primitive::causal_conv: return "causal_conv";
    case Primitive::ema_scan: return "ema_scan";
    case Primitive::normalize: return "normalize";
    case Primitive::reshape: return "reshape";
    case Primitive::slice_rows: return "slice_rows";
    case Primitive::concat_rows: return "concat_rows";
    case Primitive::reduce_sum: return "reduce_sum";
    case Primitive::mean_rows: return "mean_rows";
    case Primitive::rotary: return "rotary";
    case Primitive::embedding: return "embedding";
    case Primitive::dropout: return "dropout";
    case Primitive::cross_entropy: return "cross_entropy";
  }
  return "?";
}

// ---- GradientSet --------------------------------------------------------------

void GradientSet::add(const std::string& name, const Tensor& grad) {
  auto it = grads_.find(name);
  if (it == grads_.end()) {
    grads_.emplace(name, grad);
  } else {
    it->second += grad;
  }
}

const Tensor& GradientSet::at(const std::string& name) const {
  auto it = grads_.find(name);
  if (it == grads_.end()) throw ConfigError("no gradient for parameter '" + name + "'");
  return it->second;
}

GradientSet& GradientSet::operator+=(const GradientSet& other) {
  for (const auto& [name, g] : other.grads_) add(name, g);
  return *this;
}

void GradientSet::scale(double factor) {
  for (auto& [name, g] : grads_)
    for (double& v : g.data()) v *= factor;
}

double GradientSet::global_norm() const {
  double ss = 0.0;
  for (const auto& [name, g] : grads_)
    for (double v : g.data()) ss += v * v;
  return std::sqrt(ss);
}

// ---- Graph --------------------------------------------------------------------

void Graph::check(Var v) const {
  if (v.graph != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw ConfigError("variable does not belong to this graph");
  }
}

Var Graph::input(Tensor value, bool requires_grad) {
  Node n;
  n.kind = Primitive::input;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  forwarded_ = false;
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::param(const std::string& name, const Tensor& value, bool trainable) {
  auto it = params_.find(name);
  if (it != params_.end()) {
    Node& n = nodes_[static_cast<std::size_t>(it->second)];
    if (n.bound == nullptr) bind(name, value, trainable);
    return {this, it->second};
  }
  Node n;
  n.kind = Primitive::param;
  n.name = name;
  n.bound = &value;
  n.trainable = trainable;
  n.requires_grad = trainable;
  nodes_.push_back(std::move(n));
  params_[name] = static_cast<int>(nodes_.size() - 1);
  forwarded_ = false;
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::param(const std::string& name) {
  auto it = params_.find(name);
  if (it != params_.end()) return {this, it->second};
  Node n;
  n.kind = Primitive::param;
  n.name = name;
  n.trainable = true;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  params_[name] = static_cast<int>(nodes_.size() - 1);
  forwarded_ = false;
  return {this, static_cast<int>(nodes_.size() - 1)};
}

void Graph::bind(const std::string& name, const Tensor& value, bool trainable) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("no parameter named '" + name + "' in graph");
  Node& n = nodes_[static_cast<std::size_t>(it->second)];
  n.bound = &value;
  if (n.trainable != trainable) {
    if (n.kind == Primitive::param && static_cast<std::size_t>(it->second) + 1 != nodes_.size()) {
      throw ConfigError("cannot change trainability of '" + name + "' after it has been used");
    }
    n.trainable = trainable;
    n.requires_grad = trainable;
  }
  forwarded_ = false;
}

Var Graph::apply(std::unique_ptr<Op> op, std::vector<Var> inputs) {
  Node n;
  n.kind = op->kind();
  for (const Var& v : inputs) {
    check(v);
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(v.id)].requires_grad;
  }
  n.op = std::move(op);
  nodes_.push_back(std::move(n));
  forwarded_ = false;
  return {this, static_cast<int>(nodes_.size() - 1)};
}

void Graph::forward() {
  std::vector<const Tensor*> ins;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.kind == Primitive::param && n.bound == nullptr) {
      throw ConfigError("parameter '" + n.name + "' is not bound");
    }
    if (!n.op) continue;
    ins.clear();
    for (int id : n.inputs) ins.push_back(&node_value(nodes_[static_cast<std::size_t>(id)]));
    n.value = n.op->forward(ins);
    check_finite(n.value, std::string(to_string(n.kind)) + " node " + std::to_string(i));
  }
  forwarded_ = true;
  backward_done_ = false;
}

const Tensor& Graph::value(Var v) const {
  check(v);
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.op && !forwarded_) throw StateError("value requested before forward()");
  if (n.kind == Primitive::param && n.bound == nullptr) throw ConfigError("parameter '" + n.name + "' is not bound");
  return node_value(n);
}

const Tensor* Graph::aux(Var v) const {
  check(v);
  if (!forwarded_) throw StateError("aux requested before forward()");
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  return n.op ? n.op->aux() : nullptr;
}

Primitive Graph::kind(Var v) const {
  check(v);
  return nodes_[static_cast<std::size_t>(v.id)].kind;
}

const std::vector<int>& Graph::inputs_of(Var v) const {
  check(v);
  return nodes_[static_cast<std::size_t>(v.id)].inputs;
}

GradientSet Graph::backward(Var output, const Tensor& seed) {
  check(output);
  if (!forwarded_) throw StateError("backward() called before forward()");
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  Node& out = nodes_[static_cast<std::size_t>(output.id)];
  if (!seed.same_shape(node_value(out))) {
    throw DimensionError("seed gradient " + to_string(seed.shape()) + " does not match output " +
                         to_string(node_value(out).shape()));
  }
  out.grad = seed;
  out.has_grad = true;
  std::vector<const Tensor*> ins;
  std::vector<Tensor*> gins;
  for (int i = output.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.has_grad || !n.op) continue;
    ins.clear();
    gins.clear();
    for (int id : n.inputs) {
      Node& in = nodes_[static_cast<std::size_t>(id)];
      ins.push_back(&node_value(in));
      if (in.requires_grad) {
        if (!in.has_grad) {
          in.grad = Tensor(node_value(in).shape());
          in.has_grad = true;
        }
        gins.push_back(&in.grad);
      } else {
        gins.push_back(nullptr);
      }
    }
    // The same node may feed one op twice (e.g. x*x); gradients still add.
    n.op->backward(ins, n.value, n.grad, gins);
  }
  backward_done_ = true;
  GradientSet gs;
  for (const auto& [name, id] : params_) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.trainable) continue;
    gs.add(name, n.has_grad ? n.grad : Tensor(node_value(n).shape()));
  }
  return gs;
}

GradientSet Graph::backward(Var output) {
  check(output);
  if (!forwarded_) throw StateError("backward() called before forward()");
  return backward(output, Tensor(value(output).shape(), 1.0));
}

const Tensor& Graph::grad(Var v) const {
  check(v);
  if (!backward_done_) throw StateError("grad requested before backward()");
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.requires_grad) throw ConfigError("node does not track gradients");
  if (!n.has_grad) throw StateError("node received no gradient");
  return n.grad;
}

// ---- ops ----------------------------------------------------------------------

namespace {

Graph& graph_of(std::initializer_list<Var> vars) {
  Graph* g = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) continue;
    if (g && v.graph != g) throw ConfigError("variables from different graphs");
    g = v.graph;
  }
  if (!g) throw ConfigError("operation on invalid variables");
  return *g;
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void require_row(const Tensor& a, const Tensor& row, const char* op) {
  if (row.size() != a.cols()) {
    throw DimensionError(std::string(op) + ": row of " + std::to_string(row.size()) + " values for matrix " +
                         to_string(a.shape()));
  }
}

class MatmulOp final : public Op {
 public:
  Primitive kind() const override { return Primitive::matmul; }
  Tensor forward(std::span<const Tensor* const> in) override { return mega::matmul(*in[0], *in[1]); }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (gin[0]) matmul_nt_acc(g, *in[1], *gin[0]);
    if (gin[1]) matmul_tn_acc(*in[0], g, *gin[1]);
  }
};

class TransposeOp final : public Op {
 public:
  Primitive kind() const override { return Primitive::transpose; }
  Tensor forward(std::span<const Tensor* const> in) override { return mega::transpose(*in[0]); }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (gin[0]) *gin[0] += mega::transpose(g);
  }
};

class BinaryOp final : public Op {
 public:
  explicit BinaryOp(Primitive p) : p_(p) {}
  Primitive kind() const override { return p_; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& a = *in[0];
    const Tensor& b = *in[1];
    require_same(a, b, std::string(to_string(p_)).c_str());
    Tensor y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
      y[i] = p_ == Primitive::add ? a[i] + b[i] : p_ == Primitive::sub ? a[i] - b[i] : a[i] * b[i];
    }
    return y;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    for (std::size_t i = 0; i < g.size(); ++i) {
      switch (p_) {
        case Primitive::add:
          if (gin[0]) (*gin[0])[i] += g[i];
          if (gin[1]) (*gin[1])[i] += g[i];
          break;
        case Primitive::sub:
          if (gin[0]) (*gin[0])[i] += g[i];
          if (gin[1]) (*gin[1])[i] -= g[i];
          break;
        default:
          if (gin[0]) (*gin[0])[i] += g[i] * (*in[1])[i];
          if (gin[1]) (*gin[1])[i] += g[i] * (*in[0])[i];
          break;
      }
    }
  }

 private:
  Primitive p_;
};

class RowOp final : public Op {
 public:
  explicit RowOp(Primitive p) : p_(p) {}
  Primitive kind() const override { return p_; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& a = *in[0];
    const Tensor& r = *in[1];
    require_row(a, r, p_ == Primitive::add_row ? "add_row" : "mul_row");
    Tensor y(a.shape());
    const std::size_t m = a.rows(), p = a.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p; ++j)
        y[i * p + j] = p_ == Primitive::add_row ? a[i * p + j] + r[j] : a[i * p + j] * r[j];
    return y;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    const Tensor& a = *in[0];
    const Tensor& r = *in[1];
    const std::size_t m = a.rows(), p = a.cols();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < p; ++j) {
        const double gv = g[i * p + j];
        if (p_ == Primitive::add_row) {
          if (gin[0]) (*gin[0])[i * p + j] += gv;
          if (gin[1]) (*gin[1])[j] += gv;
        } else {
          if (gin[0]) (*gin[0])[i * p + j] += gv * r[j];
          if (gin[1]) (*gin[1])[j] += gv * a[i * p + j];
        }
      }
    }
  }

 private:
  Primitive p_;
};

class AffineOp final : public Op {
 public:
  AffineOp(double scale, double shift) : scale_(scale), shift_(shift) {}
  Primitive kind() const override { return Primitive::affine; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor y(in[0]->shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = scale_ * (*in[0])[i] + shift_;
    return y;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += scale_ * g[i];
  }

 private:
  double scale_, shift_;
};

class ActivationOp final : public Op {
 public:
  explicit ActivationOp(Activation a) : act_(a) {}
  Primitive kind() const override { return Primitive::activation; }
  Tensor forward(std::span<const Tensor* const> in) override { return mega::activation(act_, *in[0]); }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * activation_grad(act_, (*in[0])[i]);
  }

 private:
  Activation act_;
};

class LaplaceOp final : public Op {
 public:
  Primitive kind() const override { return Primitive::laplace; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor y(in[0]->shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = mega::laplace((*in[0])[i]);
    return y;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * laplace_grad((*in[0])[i]);
  }
};

class SoftmaxRowsOp final : public Op {
 public:
  Primitive kind() const override { return Primitive::softmax_rows; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& a = *in[0];
    Tensor y(a.shape());
    for (std::size_t i = 0; i < a.rows(); ++i) {
      auto r = a.row(i);
      auto o = y.row(i);
      const double mx = *std::max_element(r.begin(), r.end());
      double s = 0.0;
      for (std::size_t j = 0; j < r.size(); ++j) s += (o[j] = std::exp(r[j] - mx));
      for (double& v : o) v /= s;
    }
    return y;
  }
  void backward(std::span<const Tensor* const>, const Tensor& out, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto y = out.row(i);
      auto gy = g.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < y.size(); ++j) dot += gy[j] * y[j];
      auto ga = gin[0]->row(i);
      for (std::size_t j = 0; j < y.size(); ++j) ga[j] += y[j] * (gy[j] - dot);
    }
  }
};

class AttentionOp final : public Op {
 public:
  AttentionOp(AttnConfig config, std::int64_t offset, std::optional<SeedState> seed, bool has_bias)
      : config_(config), offset_(offset), seed_(seed), has_bias_(has_bias) {}
  Primitive kind() const override { return Primitive::attention; }
  Tensor forward(std::span<const Tensor* const> in) override {
    std::optional<SeedState> rng = seed_;
    return attention_forward(*in[0], *in[1], *in[2], config_, has_bias_ ? in[3] : nullptr, offset_, &tape_,
                             rng ? &*rng : nullptr);
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    AttentionGrads ag =
        attention_backward(*in[0], *in[1], *in[2], config_, has_bias_ ? in[3] : nullptr, offset_, tape_, g);
    if (gin[0]) *gin[0] += ag.q;
    if (gin[1]) *gin[1] += ag.k;
    if (gin[2]) *gin[2] += ag.v;
    if (has_bias_ && gin[3]) *gin[3] += ag.bias_table;
  }

 private:
  AttnConfig config_;
  std::int64_t offset_;
  std::optional<SeedState> seed_;
  bool has_bias_;
  AttentionTape tape_;
};

class CausalConvOp final : public Op {
 public:
  Primitive kind() const override { return Primitive::causal_conv; }
  Tensor forward(std::span<const Tensor* const> in) override {
    std::vector<double> y = fft_causal_conv(in[0]->data(), in[1]->data());
    return Tensor(in[0]->shape(), std::move(y));
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    // Both gradients are correlations: reverse(conv(reverse(g), other)).
    std::vector<double> gr(g.data().rbegin(), g.data().rend());
    auto correlate = [&](const Tensor& other, Tensor& dst) {
      const std::vector<double> c = fft_causal_conv(gr, other.data());
      const std::size_t n = c.size();
      for (std::size_t i = 0; i < n; ++i) dst[i] += c[n - 1 - i];
    };
    if (gin[0]) correlate(*in[1], *gin[0]);
    if (gin[1]) correlate(*in[0], *gin[1]);
  }
};

class EmaScanOp final : public Op {
 public:
  Primitive kind() const override { return Primitive::ema_scan; }
  Tensor forward(std::span<const Tensor* const> in) override {
    params_.alpha_logit = *in[1];
    params_.delta_logit = *in[2];
    params_.beta = *in[3];
    params_.eta = *in[4];
    params_.h0 = *in[5];
    traj_ = ema_scan_recorded(params_, *in[0], *in[5]);
    return traj_.y;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    EmaGrads eg = ema_scan_backward(params_, *in[0], traj_, g);
    if (gin[0]) *gin[0] += eg.x;
    if (gin[1]) *gin[1] += eg.alpha_logit;
    if (gin[2]) *gin[2] += eg.delta_logit;
    if (gin[3]) *gin[3] += eg.beta;
    if (gin[4]) *gin[4] += eg.eta;
    if (gin[5]) *gin[5] += eg.h_init;
  }
  const Tensor* aux() const override { return &traj_.h_final; }

 private:
  EmaParams params_;
  EmaTrajectory traj_;
};

class NormalizeOp final : public Op {
 public:
  NormalizeOp(NormKind kind, bool has_bias) : norm_(kind), has_bias_(has_bias) {}
  Primitive kind() const override { return Primitive::normalize; }
  Tensor forward(std::span<const Tensor* const> in) override {
    return mega::normalize(norm_, *in[0], *in[1], has_bias_ ? in[2] : nullptr);
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    NormGrads ng = normalize_backward(norm_, *in[0], *in[1], g);
    if (gin[0]) *gin[0] += ng.x;
    if (gin[1]) *gin[1] += ng.gain;
    if (has_bias_ && gin[2]) *gin[2] += ng.bias;
  }

 private:
  NormKind norm_;
  bool has_bias_;
};

class ReshapeOp final : public Op {
 public:
  explicit ReshapeOp(Shape s) : shape_(std::move(s)) {}
  Primitive kind() const override { return Primitive::reshape; }
  Tensor forward(std::span<const Tensor* const> in) override { return in[0]->reshaped(shape_); }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
  }

 private:
  Shape shape_;
};

class SliceRowsOp final : public Op {
 public:
  SliceRowsOp(std::size_t begin, std::size_t len) : begin_(begin), len_(len) {}
  Primitive kind() const override { return Primitive::slice_rows; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& a = *in[0];
    if (a.rank() != 2 || begin_ + len_ > a.rows() || len_ == 0) {
      throw DimensionError("slice_rows [" + std::to_string(begin_) + ", " + std::to_string(begin_ + len_) +
                           ") out of range for " + to_string(a.shape()));
    }
    Tensor y({len_, a.cols()});
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(begin_ * a.cols()), y.size(), y.data().begin());
    return y;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    const std::size_t off = begin_ * in[0]->cols();
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[off + i] += g[i];
  }

 private:
  std::size_t begin_, len_;
};

class ConcatRowsOp final : public Op {
 public:
  Primitive kind() const override { return Primitive::concat_rows; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const std::size_t cols = in[0]->cols();
    std::size_t rows = 0;
    for (const Tensor* t : in) {
      if (t->cols() != cols) throw DimensionError("concat_rows: width mismatch " + to_string(t->shape()));
      rows += t->rows();
    }
    Tensor y({rows, cols});
    std::size_t off = 0;
    for (const Tensor* t : in) {
      std::copy(t->data().begin(), t->data().end(), y.data().begin() + static_cast<std::ptrdiff_t>(off));
      off += t->size();
    }
    return y;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    std::size_t off = 0;
    for (std::size_t k = 0; k < in.size(); ++k) {
      if (gin[k])
        for (std::size_t i = 0; i < in[k]->size(); ++i) (*gin[k])[i] += g[off + i];
      off += in[k]->size();
    }
  }
};

class ReduceOp final : public Op {
 public:
  explicit ReduceOp(Primitive p) : p_(p) {}
  Primitive kind() const override { return p_; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& a = *in[0];
    if (p_ == Primitive::reduce_sum) {
      long double s = 0.0L;
      for (double v : a.data()) s += v;
      return Tensor::scalar(static_cast<double>(s));
    }
    Tensor y({1, a.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < a.cols(); ++j) y[j] += a(i, j);
    for (double& v : y.data()) v /= static_cast<double>(a.rows());
    return y;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    const Tensor& a = *in[0];
    if (p_ == Primitive::reduce_sum) {
      for (double& v : gin[0]->data()) v += g[0];
      return;
    }
    const double inv = 1.0 / static_cast<double>(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < a.cols(); ++j) (*gin[0])(i, j) += g[j] * inv;
  }

 private:
  Primitive p_;
};

class RotaryOp final : public Op {
 public:
  explicit RotaryOp(std::int64_t offset) : offset_(offset) {}
  Primitive kind() const override { return Primitive::rotary; }
  Tensor forward(std::span<const Tensor* const> in) override {
    pos_.resize(in[0]->rows());
    for (std::size_t i = 0; i < pos_.size(); ++i) pos_[i] = offset_ + static_cast<std::int64_t>(i);
    return rotary_embed(*in[0], pos_);
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    std::vector<std::int64_t> neg(pos_.size());
    for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -pos_[i];
    *gin[0] += rotary_embed(g, neg);
  }

 private:
  std::int64_t offset_;
  std::vector<std::int64_t> pos_;
};

class EmbeddingOp final : public Op {
 public:
  explicit EmbeddingOp(std::vector<int> ids) : ids_(std::move(ids)) {}
  Primitive kind() const override { return Primitive::embedding; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& table = *in[0];
    Tensor y({ids_.size(), table.cols()});
    for (std::size_t t = 0; t < ids_.size(); ++t) {
      if (ids_[t] < 0 || static_cast<std::size_t>(ids_[t]) >= table.rows()) {
        throw DimensionError("token id " + std::to_string(ids_[t]) + " outside vocabulary of " +
                             std::to_string(table.rows()));
      }
      auto src = table.row(static_cast<std::size_t>(ids_[t]));
      std::copy(src.begin(), src.end(), y.row(t).begin());
    }
    return y;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t t = 0; t < ids_.size(); ++t) {
      auto dst = gin[0]->row(static_cast<std::size_t>(ids_[t]));
      auto src = g.row(t);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }

 private:
  std::vector<int> ids_;
};

class DropoutOp final : public Op {
 public:
  DropoutOp(double rate, SeedState seed) : rate_(rate), seed_(seed) {}
  Primitive kind() const override { return Primitive::dropout; }
  Tensor forward(std::span<const Tensor* const> in) override {
    SeedState rng = seed_;
    keep_ = Tensor(in[0]->shape());
    Tensor y(in[0]->shape());
    const double scale = 1.0 / (1.0 - rate_);
    for (std::size_t i = 0; i < y.size(); ++i) {
      keep_[i] = rng.bernoulli(rate_) ? 0.0 : scale;
      y[i] = (*in[0])[i] * keep_[i];
    }
    return y;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * keep_[i];
  }

 private:
  double rate_;
  SeedState seed_;
  Tensor keep_;
};

class CrossEntropyOp final : public Op {
 public:
  explicit CrossEntropyOp(std::vector<int> labels) : labels_(std::move(labels)) {}
  Primitive kind() const override { return Primitive::cross_entropy; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& z = *in[0];
    if (z.rows() != labels_.size()) {
      throw DimensionError("cross_entropy: " + std::to_string(labels_.size()) + " labels for logits " +
                           to_string(z.shape()));
    }
    probs_ = Tensor({z.rows(), z.cols()});
    double loss = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
      const int y = labels_[i];
      if (y < 0 || static_cast<std::size_t>(y) >= z.cols()) {
        throw DimensionError("label " + std::to_string(y) + " outside " + std::to_string(z.cols()) + " classes");
      }
      auto r = z.row(i);
      const double mx = *std::max_element(r.begin(), r.end());
      double s = 0.0;
      for (double v : r) s += std::exp(v - mx);
      const double lse = mx + std::log(s);
      for (std::size_t j = 0; j < r.size(); ++j) probs_(i, j) = std::exp(r[j] - lse);
      loss += lse - r[static_cast<std::size_t>(y)];
    }
    return Tensor::scalar(loss / static_cast<double>(z.rows()));
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    const double scale = g[0] / static_cast<double>(in[0]->rows());
    for (std::size_t i = 0; i < probs_.rows(); ++i) {
      for (std::size_t j = 0; j < probs_.cols(); ++j) {
        const double onehot = static_cast<int>(j) == labels_[i] ? 1.0 : 0.0;
        (*gin[0])(i, j) += scale * (probs_(i, j) - onehot);
      }
    }
  }

 private:
  std::vector<int> labels_;
  Tensor probs_;
};

}  // namespace

Var matmul(Var a, Var b) { return graph_of({a, b}).apply(std::make_unique<MatmulOp>(), {a, b}); }
Var transpose(Var a) { return graph_of({a}).apply(std::make_unique<TransposeOp>(), {a}); }
Var add(Var a, Var b) { return graph_of({a, b}).apply(std::make_unique<BinaryOp>(Primitive::add), {a, b}); }
Var sub(Var a, Var b) { return graph_of({a, b}).apply(std::make_unique<BinaryOp>(Primitive::sub), {a, b}); }
Var mul(Var a, Var b) { return graph_of({a, b}).apply(std::make_unique<BinaryOp>(Primitive::mul), {a, b}); }
Var add_row(Var a, Var row) { return graph_of({a, row}).apply(std::make_unique<RowOp>(Primitive::add_row), {a, row}); }
Var mul_row(Var a, Var row) { return graph_of({a, row}).apply(std::make_unique<RowOp>(Primitive::mul_row), {a, row}); }
Var affine(Var a, double scale, double shift) {
  return graph_of({a}).apply(std::make_unique<AffineOp>(scale, shift), {a});
}
Var activation(Activation kind, Var a) { return graph_of({a}).apply(std::make_unique<ActivationOp>(kind), {a}); }
Var laplace(Var a) { return graph_of({a}).apply(std::make_unique<LaplaceOp>(), {a}); }
Var softmax_rows(Var a) { return graph_of({a}).apply(std::make_unique<SoftmaxRowsOp>(), {a}); }

Var attention(Var q, Var k, Var v, Var bias_table, const AttnConfig& config, std::int64_t position_offset,
              std::optional<SeedState> dropout_seed) {
  config.validate();
  Graph& g = graph_of({q, k, v, bias_table});
  const bool has_bias = bias_table.valid();
  std::vector<Var> ins{q, k, v};
  if (has_bias) ins.push_back(bias_table);
  return g.apply(std::make_unique<AttentionOp>(config, position_offset, dropout_seed, has_bias), std::move(ins));
}

Var causal_conv(Var x, Var kernel) {
  return graph_of({x, kernel}).apply(std::make_unique<CausalConvOp>(), {x, kernel});
}

Var ema_scan(Var x, Var alpha_logit, Var delta_logit, Var beta, Var eta, Var h_init) {
  return graph_of({x, alpha_logit, delta_logit, beta, eta, h_init})
      .apply(std::make_unique<EmaScanOp>(), {x, alpha_logit, delta_logit, beta, eta, h_init});
}

Var normalize(NormKind kind, Var x, Var gain, Var bias) {
  Graph& g = graph_of({x, gain, bias});
  const bool has_bias = bias.valid();
  std::vector<Var> ins{x, gain};
  if (has_bias) ins.push_back(bias);
  return g.apply(std::make_unique<NormalizeOp>(kind, has_bias), std::move(ins));
}

Var reshape(Var a, Shape shape) { return graph_of({a}).apply(std::make_unique<ReshapeOp>(std::move(shape)), {a}); }
Var slice_rows(Var a, std::size_t begin, std::size_t len) {
  return graph_of({a}).apply(std::make_unique<SliceRowsOp>(begin, len), {a});
}
Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows needs at least one input");
  return parts.front().graph->apply(std::make_unique<ConcatRowsOp>(), parts);
}
Var reduce_sum(Var a) { return graph_of({a}).apply(std::make_unique<ReduceOp>(Primitive::reduce_sum), {a}); }
Var mean_rows(Var a) { return graph_of({a}).apply(std::make_unique<ReduceOp>(Primitive::mean_rows), {a}); }
Var rotary(Var a, std::int64_t position_offset) {
  return graph_of({a}).apply(std::make_unique<RotaryOp>(position_offset), {a});
}
Var embedding(Var table, std::vector<int> ids) {
  return graph_of({table}).apply(std::make_unique<EmbeddingOp>(std::move(ids)), {table});
}
Var dropout(Var a, double rate, SeedState seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  return graph_of({a}).apply(std::make_unique<DropoutOp>(rate, seed), {a});
}
Var cross_entropy(Var logits, std::vector<int> labels) {
  return graph_of({logits}).apply(std::make_unique<CrossEntropyOp>(std::move(labels)), {logits});
}

// ---- finite differences -------------------------------------------------------

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

double FdReport::max_rel_err() const {
  double m = 0.0;
  for (const auto& g : groups) m = std::max(m, g.max_rel_err);
  return m;
}

FdReport finite_diff_check(const std::function<double()>& loss, std::span<const NamedParam> params,
                           const GradientSet& analytic, const FdOptions& options) {
  if (!(options.eps > 0.0)) throw ConfigError("finite-difference eps must be positive");
  FdReport report;
  report.tol = options.tol;
  SeedState rng(options.seed);
  for (const NamedParam& p : params) {
    const Tensor& grad = analytic.at(p.name);
    if (!grad.same_shape(*p.value)) {
      throw DimensionError("gradient for '" + p.name + "' has shape " + to_string(grad.shape()) + ", parameter is " +
                           to_string(p.value->shape()));
    }
    std::vector<std::size_t> coords;
    const std::size_t n = p.value->size();
    if (n <= options.max_coords) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < options.max_coords; ++i) coords.push_back(rng.below(n));
    }
    FdGroupReport gr;
    gr.name = p.name;
    for (std::size_t c : coords) {
      double& slot = (*p.value)[c];
      const double saved = slot;
      slot = saved + options.eps;
      const double lp = loss();
      slot = saved - options.eps;
      const double lm = loss();
      slot = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        throw NumericalError("non-finite loss when perturbing " + p.name + "[" + std::to_string(c) + "]");
      }
      const double fd = (lp - lm) / (2.0 * options.eps);
      const double err = relative_error(grad[c], fd);
      ++gr.checked;
      if (err >= gr.max_rel_err) {
        gr.max_rel_err = err;
        gr.worst_index = c;
        gr.analytic = grad[c];
        gr.numeric = fd;
      }
    }
    report.groups.push_back(gr);
  }
  return report;
}

}  // namespace mega::ag
