#pragma once

#include <Eigen/Core>

#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "corrobust/tensor.hpp"

namespace corrobust {

// Primitive operation set. Chosen as the minimum needed for a small
// residual CNN with BatchNorm plus the norm/scale nodes used by loss
// construction and oracle graphs.
enum class Op {
  kInput,
  kConstant,
  kParameter,
  kAdd,
  kResidualAdd,
  kScale,
  kMatMul,
  kConv2d,
  kRelu,
  kBatchNorm,
  kAvgPool,
  kSoftmaxCrossEntropy,
  kL2Norm,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kConstant: return "constant";
    case Op::kParameter: return "parameter";
    case Op::kAdd: return "add";
    case Op::kResidualAdd: return "residual_add";
    case Op::kScale: return "scale";
    case Op::kMatMul: return "matmul";
    case Op::kConv2d: return "conv2d";
    case Op::kRelu: return "relu";
    case Op::kBatchNorm: return "batchnorm";
    case Op::kAvgPool: return "avgpool";
    case Op::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case Op::kL2Norm: return "l2_norm";
  }
  return "?";
}

struct NodeAttrs {
  int stride = 1;
  int pad = 0;              // conv2d
  int pool = 1;             // avgpool window (stride == window)
  double momentum = 0.9;    // batchnorm running-stat EMA
  double eps = 1e-5;        // batchnorm
  double factor = 1.0;      // scale
  bool half_squared = false;  // l2_norm: true -> 0.5*||x||^2 (grad is x)
};

struct Node {
  Op op;
  std::vector<int> in;
  std::string name;  // non-empty for inputs/params/constants and tapped nodes
  Shape decl_shape;  // inputs only; dim0 == -1 means "any batch size"
  NodeAttrs attrs;
};

enum class RunMode {
  kEval,           // batchnorm uses running statistics
  kTrainFrozen,    // batch statistics, running stats untouched
  kTrainUpdate,    // batch statistics + EMA update of running stats
};

template <typename T>
using GradientBundle = std::map<std::string, Tensor<T>>;

// A static computation graph. Nodes are appended in topological order by
// construction (an edge may only point at an existing node). Parameter and
// constant values live in the graph; per-run state lives in Workspace so a
// frozen graph can serve several workspaces concurrently.
template <typename T>
class Graph {
 public:
  int input(const std::string& name, Shape shape) {
    for (size_t i = 1; i < shape.size(); ++i) {
      if (shape[i] <= 0) throw ShapeError("input '" + name + "': bad shape " + shape_str(shape));
    }
    Node n{Op::kInput, {}, name, std::move(shape), {}};
    return add_node(std::move(n), name);
  }

  int parameter(const std::string& name, Tensor<T> value) {
    const int id = add_node(Node{Op::kParameter, {}, name, value.shape(), {}}, name);
    values_.emplace(id, std::move(value));
    return id;
  }

  int constant(const std::string& name, Tensor<T> value) {
    const int id = add_node(Node{Op::kConstant, {}, name, value.shape(), {}}, name);
    values_.emplace(id, std::move(value));
    return id;
  }

  int add(int a, int b) { return add_node(Node{Op::kAdd, {check(a), check(b)}, "", {}, {}}); }

  int residual_add(int a, int b) {
    return add_node(Node{Op::kResidualAdd, {check(a), check(b)}, "", {}, {}});
  }

  int scale(int a, double factor) {
    Node n{Op::kScale, {check(a)}, "", {}, {}};
    n.attrs.factor = factor;
    return add_node(std::move(n));
  }

  int matmul(int x, int w) {
    return add_node(Node{Op::kMatMul, {check(x), check(w)}, "", {}, {}});
  }

  int conv2d(int x, int w, int stride, int pad) {
    if (stride < 1 || pad < 0) throw ConfigError("conv2d: bad stride/pad");
    Node n{Op::kConv2d, {check(x), check(w)}, "", {}, {}};
    n.attrs.stride = stride;
    n.attrs.pad = pad;
    return add_node(std::move(n));
  }

  int relu(int x) { return add_node(Node{Op::kRelu, {check(x)}, "", {}, {}}); }

  int batchnorm(int x, int gamma, int beta, double momentum = 0.9, double eps = 1e-5) {
    Node n{Op::kBatchNorm, {check(x), check(gamma), check(beta)}, "", {}, {}};
    n.attrs.momentum = momentum;
    n.attrs.eps = eps;
    const int id = add_node(std::move(n));
    const int64_t c = values_.at(gamma).numel();
    bn_mean_.emplace(id, Tensor<T>({c}));
    bn_var_.emplace(id, Tensor<T>::full({c}, T(1)));
    return id;
  }

  int avgpool(int x, int k) {
    if (k < 1) throw ConfigError("avgpool: window must be >= 1");
    Node n{Op::kAvgPool, {check(x)}, "", {}, {}};
    n.attrs.pool = k;
    return add_node(std::move(n));
  }

  int softmax_cross_entropy(int logits, int labels) {
    return add_node(Node{Op::kSoftmaxCrossEntropy, {check(logits), check(labels)}, "", {}, {}});
  }

  int l2_norm(int x) { return add_node(Node{Op::kL2Norm, {check(x)}, "", {}, {}}); }

  // 0.5 * squared l2 norm; the quadratic form whose gradient is the input
  int half_squared_norm(int x) {
    Node n{Op::kL2Norm, {check(x)}, "", {}, {}};
    n.attrs.half_squared = true;
    return add_node(std::move(n));
  }

  // Registers node `id` under `name` so its value and gradient become
  // externally readable and its value additively overridable before forward.
  void tap(int id, const std::string& name) {
    check(id);
    register_name(name, id);
    if (nodes_[id].name.empty()) nodes_[id].name = name;
    taps_.insert(id);
  }

  void set_loss(int id) { loss_ = check(id); }
  int loss_node() const { return loss_; }

  int find(const std::string& name) const {
    auto it = name_to_id_.find(name);
    return it == name_to_id_.end() ? -1 : it->second;
  }

  int require(const std::string& name) const {
    const int id = find(name);
    if (id < 0) throw ConfigError("unknown node name '" + name + "'");
    return id;
  }

  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }

  bool is_tap(int id) const { return taps_.count(id) > 0; }
  const std::set<int>& taps() const { return taps_; }

  Tensor<T>& stored_value(int id) { return values_.at(id); }
  const Tensor<T>& stored_value(int id) const { return values_.at(id); }

  Tensor<T>& bn_running_mean(int id) { return bn_mean_.at(id); }
  Tensor<T>& bn_running_var(int id) { return bn_var_.at(id); }
  const Tensor<T>& bn_running_mean(int id) const { return bn_mean_.at(id); }
  const Tensor<T>& bn_running_var(int id) const { return bn_var_.at(id); }

  std::vector<int> parameter_ids() const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i) {
      if (nodes_[i].op == Op::kParameter) out.push_back(i);
    }
    return out;
  }

  // batchnorm node ids, in graph order (used for checkpointing running stats)
  std::vector<int> batchnorm_ids() const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i) {
      if (nodes_[i].op == Op::kBatchNorm) out.push_back(i);
    }
    return out;
  }

  std::string label(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.name.empty()) return n.name;
    return std::string(op_name(n.op)) + "#" + std::to_string(id);
  }

 private:
  int check(int id) const {
    if (id < 0 || id >= size()) throw ConfigError("node id out of range");
    return id;
  }

  void register_name(const std::string& name, int id) {
    if (name.empty()) throw ConfigError("empty node name");
    auto [it, inserted] = name_to_id_.emplace(name, id);
    if (!inserted && it->second != id) {
      throw ConfigError("duplicate node name '" + name + "'");
    }
  }

  int add_node(Node n, const std::string& name = "") {
    nodes_.push_back(std::move(n));
    const int id = size() - 1;
    if (!name.empty()) register_name(name, id);
    return id;
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> name_to_id_;
  std::unordered_map<int, Tensor<T>> values_;  // parameters and constants
  std::unordered_map<int, Tensor<T>> bn_mean_, bn_var_;
  std::set<int> taps_;
  int loss_ = -1;
};

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using MapC = Eigen::Map<const MatRM<T>>;

inline int64_t conv_out_dim(int64_t in, int64_t k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// im2col for one sample: input (C,H,W) slice -> col (C*kh*kw, Ho*Wo) row-major
template <typename T>
void im2col(const T* x, int64_t c_in, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int stride, int pad, int64_t ho, int64_t wo, T* col) {
  for (int64_t c = 0; c < c_in; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * ho * wo;
        for (int64_t oh = 0; oh < ho; ++oh) {
          const int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= h) {
            for (int64_t ow = 0; ow < wo; ++ow) row[oh * wo + ow] = T(0);
            continue;
          }
          const T* src = x + (c * h + ih) * w;
          for (int64_t ow = 0; ow < wo; ++ow) {
            const int64_t iw = ow * stride - pad + kj;
            row[oh * wo + ow] = (iw >= 0 && iw < w) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int64_t c_in, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int stride, int pad, int64_t ho, int64_t wo, T* dx) {
  for (int64_t c = 0; c < c_in; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * ho * wo;
        for (int64_t oh = 0; oh < ho; ++oh) {
          const int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= h) continue;
          T* dst = dx + (c * h + ih) * w;
          for (int64_t ow = 0; ow < wo; ++ow) {
            const int64_t iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < w) dst[iw] += row[oh * wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Per-run evaluation state over a fixed graph. Forward/backward on distinct
// workspaces may run concurrently as long as parameters are frozen
// (RunMode::kTrainUpdate mutates batchnorm running stats and is exclusive).
template <typename T>
class Workspace {
 public:
  explicit Workspace(Graph<T>& g) : g_(g), values_(g.size()), grads_(g.size()) {}

  void bind(const std::string& name, Tensor<T> v) {
    const int id = g_.require(name);
    if (g_.node(id).op != Op::kInput) throw ConfigError("bind: '" + name + "' is not an input");
    const Shape& decl = g_.node(id).decl_shape;
    if (v.shape().size() != decl.size()) {
      throw ShapeError("bind '" + name + "': rank mismatch, got " + shape_str(v.shape()) +
                       " declared " + shape_str(decl));
    }
    for (size_t i = 0; i < decl.size(); ++i) {
      if (decl[i] == -1 && i == 0) continue;
      if (decl[i] != v.shape()[i]) {
        throw ShapeError("bind '" + name + "': shape " + shape_str(v.shape()) +
                         " does not match declared " + shape_str(decl));
      }
    }
    bindings_[id] = std::move(v);
  }

  // Additive tap override: the injected tensor is added to the tap's value
  // during the next forward pass.
  void inject(const std::string& tap_name, Tensor<T> delta) {
    const int id = g_.require(tap_name);
    if (!g_.is_tap(id)) throw ConfigError("inject: '" + tap_name + "' is not a tap");
    injections_[id] = std::move(delta);
  }

  void clear_injections() { injections_.clear(); }

  void forward(RunMode mode = RunMode::kEval, bool strict = false) {
    last_mode_ = mode;
    for (int id = 0; id < g_.size(); ++id) {
      forward_node(id, mode);
      if (g_.is_tap(id)) {
        auto it = injections_.find(id);
        if (it != injections_.end()) {
          Tensor<T>& v = values_[id];
          const Tensor<T>& d = it->second;
          if (!v.same_shape(d)) {
            throw ShapeError("injection at '" + g_.label(id) + "': shape " +
                             shape_str(d.shape()) + " vs value " + shape_str(v.shape()));
          }
          T* p = v.data();
          const T* q = d.data();
          for (int64_t i = 0; i < v.numel(); ++i) p[i] += q[i];
        }
      }
      if (strict && !values_[id].all_finite()) {
        throw NumericError("non-finite value at node '" + g_.label(id) + "'");
      }
    }
    ++forward_count_;
    forward_done_ = true;
  }

  void backward() {
    if (g_.loss_node() < 0) throw ConfigError("backward: no loss node designated");
    if (values_[g_.loss_node()].numel() != 1) throw ConfigError("backward: loss is not scalar");
    std::map<int, Tensor<T>> seeds;
    seeds[g_.loss_node()] = Tensor<T>::scalar(T(1));
    backward_impl(seeds);
  }

  // Reverse sweep from externally supplied output gradients (several nodes
  // may be seeded at once).
  void backward_at(const std::map<std::string, Tensor<T>>& seeds) {
    std::map<int, Tensor<T>> by_id;
    for (const auto& [name, t] : seeds) {
      const int id = g_.require(name);
      if (!values_[id].same_shape(t)) {
        throw ShapeError("backward seed '" + name + "': shape mismatch");
      }
      by_id[id] = t;
    }
    backward_impl(by_id);
  }

  const Tensor<T>& value(const std::string& name) const { return values_[g_.require(name)]; }
  const Tensor<T>& value(int id) const { return values_[id]; }

  double loss() const {
    if (g_.loss_node() < 0) throw ConfigError("no loss node designated");
    return static_cast<double>(values_[g_.loss_node()][0]);
  }

  const Tensor<T>& grad(const std::string& name) const {
    const int id = g_.require(name);
    const Op op = g_.node(id).op;
    if (!g_.is_tap(id) && op != Op::kParameter && op != Op::kInput) {
      throw ConfigError("grad: '" + name + "' is not a tap, parameter, or input");
    }
    if (!backward_done_) throw ConfigError("grad: backward has not been run");
    return grads_[id];
  }

  GradientBundle<T> grads(const std::vector<std::string>& wrt) const {
    GradientBundle<T> out;
    for (const auto& name : wrt) out.emplace(name, grad(name));
    return out;
  }

  GradientBundle<T> param_grads() const {
    GradientBundle<T> out;
    for (int id : g_.parameter_ids()) out.emplace(g_.node(id).name, grads_[id]);
    return out;
  }

  int64_t forward_count() const { return forward_count_; }
  int64_t backward_count() const { return backward_count_; }

  Graph<T>& graph() { return g_; }

 private:
  void forward_node(int id, RunMode mode) {
    const Node& n = g_.node(id);
    Tensor<T>& out = values_[id];
    switch (n.op) {
      case Op::kInput: {
        auto it = bindings_.find(id);
        if (it == bindings_.end()) throw ConfigError("input '" + n.name + "' is unbound");
        out = it->second;
        break;
      }
      case Op::kConstant:
      case Op::kParameter:
        out = g_.stored_value(id);
        break;
      case Op::kAdd: {
        const Tensor<T>& a = values_[n.in[0]];
        const Tensor<T>& b = values_[n.in[1]];
        if (a.same_shape(b)) {
          out = a;
          T* p = out.data();
          const T* q = b.data();
          for (int64_t i = 0; i < out.numel(); ++i) p[i] += q[i];
        } else if (b.ndim() == 1 && a.ndim() >= 2 && a.dim(1) == b.dim(0)) {
          // channel/feature bias broadcast over axis 1
          out = a;
          const int64_t n0 = a.dim(0), c = a.dim(1), inner = a.numel() / (n0 * c);
          T* p = out.data();
          const T* q = b.data();
          for (int64_t i = 0; i < n0; ++i)
            for (int64_t j = 0; j < c; ++j) {
              const T bv = q[j];
              T* row = p + (i * c + j) * inner;
              for (int64_t k = 0; k < inner; ++k) row[k] += bv;
            }
        } else {
          throw ShapeError("add at '" + g_.label(id) + "': incompatible shapes " +
                           shape_str(a.shape()) + " and " + shape_str(b.shape()));
        }
        break;
      }
      case Op::kResidualAdd: {
        const Tensor<T>& a = values_[n.in[0]];
        const Tensor<T>& b = values_[n.in[1]];
        if (!a.same_shape(b)) {
          throw ShapeError("residual_add at '" + g_.label(id) + "': shape mismatch " +
                           shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        }
        out = a;
        T* p = out.data();
        const T* q = b.data();
        for (int64_t i = 0; i < out.numel(); ++i) p[i] += q[i];
        break;
      }
      case Op::kScale: {
        const Tensor<T>& a = values_[n.in[0]];
        out = a;
        const T f = static_cast<T>(n.attrs.factor);
        T* p = out.data();
        for (int64_t i = 0; i < out.numel(); ++i) p[i] *= f;
        break;
      }
      case Op::kMatMul: {
        const Tensor<T>& x = values_[n.in[0]];
        const Tensor<T>& w = values_[n.in[1]];
        if (x.ndim() < 2 || w.ndim() != 2) {
          throw ShapeError("matmul at '" + g_.label(id) + "': need x rank>=2, w rank 2");
        }
        const int64_t rows = x.dim(0), k = x.numel() / rows;  // trailing dims flattened
        if (k != w.dim(0)) {
          throw ShapeError("matmul at '" + g_.label(id) + "': inner dims " +
                           std::to_string(k) + " vs " + std::to_string(w.dim(0)));
        }
        const int64_t m = w.dim(1);
        resize(out, {rows, m});
        detail::MapC<T> X(x.data(), rows, k), W(w.data(), k, m);
        detail::MapM<T> O(out.data(), rows, m);
        O.noalias() = X * W;
        break;
      }
      case Op::kConv2d:
        conv2d_forward(id, n);
        break;
      case Op::kRelu: {
        const Tensor<T>& x = values_[n.in[0]];
        out = x;
        T* p = out.data();
        for (int64_t i = 0; i < out.numel(); ++i) p[i] = p[i] > T(0) ? p[i] : T(0);
        break;
      }
      case Op::kBatchNorm:
        batchnorm_forward(id, n, mode);
        break;
      case Op::kAvgPool: {
        const Tensor<T>& x = values_[n.in[0]];
        if (x.ndim() != 4) throw ShapeError("avgpool at '" + g_.label(id) + "': need NCHW");
        const int64_t k = n.attrs.pool;
        const int64_t nn = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        if (h % k != 0 || w % k != 0) {
          throw ShapeError("avgpool at '" + g_.label(id) + "': window " + std::to_string(k) +
                           " does not divide " + shape_str(x.shape()));
        }
        const int64_t ho = h / k, wo = w / k;
        resize(out, {nn, c, ho, wo});
        const T inv = T(1) / static_cast<T>(k * k);
        for (int64_t i = 0; i < nn * c; ++i) {
          const T* xp = x.data() + i * h * w;
          T* op = out.data() + i * ho * wo;
          for (int64_t oh = 0; oh < ho; ++oh)
            for (int64_t ow = 0; ow < wo; ++ow) {
              T s = 0;
              for (int64_t a = 0; a < k; ++a)
                for (int64_t b = 0; b < k; ++b) s += xp[(oh * k + a) * w + ow * k + b];
              op[oh * wo + ow] = s * inv;
            }
        }
        break;
      }
      case Op::kSoftmaxCrossEntropy:
        softmax_xent_forward(id, n);
        break;
      case Op::kL2Norm: {
        const Tensor<T>& x = values_[n.in[0]];
        double s = 0;
        for (int64_t i = 0; i < x.numel(); ++i) {
          const double v = static_cast<double>(x[i]);
          s += v * v;
        }
        resize(out, {1});
        out[0] = static_cast<T>(n.attrs.half_squared ? 0.5 * s : std::sqrt(s));
        break;
      }
    }
  }

  void conv2d_forward(int id, const Node& n) {
    const Tensor<T>& x = values_[n.in[0]];
    const Tensor<T>& w = values_[n.in[1]];
    if (x.ndim() != 4 || w.ndim() != 4) {
      throw ShapeError("conv2d at '" + g_.label(id) + "': need NCHW input and OIHW weight");
    }
    if (x.dim(1) != w.dim(1)) {
      throw ShapeError("conv2d at '" + g_.label(id) + "': channel mismatch " +
                       shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    }
    const int64_t nn = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
    const int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int64_t ho = detail::conv_out_dim(h, kh, n.attrs.stride, n.attrs.pad);
    const int64_t wo = detail::conv_out_dim(ww, kw, n.attrs.stride, n.attrs.pad);
    if (ho <= 0 || wo <= 0) {
      throw ShapeError("conv2d at '" + g_.label(id) + "': empty output for input " +
                       shape_str(x.shape()));
    }
    Tensor<T>& out = values_[id];
    resize(out, {nn, cout, ho, wo});
    const int64_t ckk = cin * kh * kw;
    scratch_.resize(static_cast<size_t>(ckk * ho * wo));
    detail::MapC<T> W(w.data(), cout, ckk);
    for (int64_t i = 0; i < nn; ++i) {
      detail::im2col(x.data() + i * cin * h * ww, cin, h, ww, kh, kw, n.attrs.stride,
                     n.attrs.pad, ho, wo, scratch_.data());
      detail::MapC<T> C(scratch_.data(), ckk, ho * wo);
      detail::MapM<T> O(out.data() + i * cout * ho * wo, cout, ho * wo);
      O.noalias() = W * C;
    }
  }

  void batchnorm_forward(int id, const Node& n, RunMode mode) {
    const Tensor<T>& x = values_[n.in[0]];
    const Tensor<T>& gamma = values_[n.in[1]];
    const Tensor<T>& beta = values_[n.in[2]];
    if (x.ndim() != 2 && x.ndim() != 4) {
      throw ShapeError("batchnorm at '" + g_.label(id) + "': need (N,C) or (N,C,H,W)");
    }
    const int64_t nn = x.dim(0), c = x.dim(1);
    const int64_t inner = x.numel() / (nn * c);
    if (gamma.numel() != c || beta.numel() != c) {
      throw ShapeError("batchnorm at '" + g_.label(id) + "': gamma/beta size mismatch");
    }
    Tensor<T>& out = values_[id];
    resize(out, x.shape());

    BnCache& cache = bn_cache_[id];
    resize(cache.mean, {c});
    resize(cache.inv_std, {c});

    const bool use_batch = (mode != RunMode::kEval);
    if (use_batch) {
      const double m = static_cast<double>(nn * inner);
      for (int64_t j = 0; j < c; ++j) {
        double sum = 0, sq = 0;
        for (int64_t i = 0; i < nn; ++i) {
          const T* p = x.data() + (i * c + j) * inner;
          for (int64_t k = 0; k < inner; ++k) {
            const double v = static_cast<double>(p[k]);
            sum += v;
            sq += v * v;
          }
        }
        const double mean = sum / m;
        const double var = std::max(0.0, sq / m - mean * mean);
        cache.mean[j] = static_cast<T>(mean);
        cache.inv_std[j] = static_cast<T>(1.0 / std::sqrt(var + n.attrs.eps));
        if (mode == RunMode::kTrainUpdate) {
          Tensor<T>& rm = g_.bn_running_mean(id);
          Tensor<T>& rv = g_.bn_running_var(id);
          const T mom = static_cast<T>(n.attrs.momentum);
          rm[j] = mom * rm[j] + (T(1) - mom) * static_cast<T>(mean);
          rv[j] = mom * rv[j] + (T(1) - mom) * static_cast<T>(var);
        }
      }
    } else {
      const Tensor<T>& rm = g_.bn_running_mean(id);
      const Tensor<T>& rv = g_.bn_running_var(id);
      for (int64_t j = 0; j < c; ++j) {
        cache.mean[j] = rm[j];
        cache.inv_std[j] =
            static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[j]) + n.attrs.eps));
      }
    }

    for (int64_t i = 0; i < nn; ++i) {
      for (int64_t j = 0; j < c; ++j) {
        const T mu = cache.mean[j], inv = cache.inv_std[j];
        const T gj = gamma[j], bj = beta[j];
        const T* p = x.data() + (i * c + j) * inner;
        T* q = out.data() + (i * c + j) * inner;
        for (int64_t k = 0; k < inner; ++k) q[k] = gj * (p[k] - mu) * inv + bj;
      }
    }
  }

  void softmax_xent_forward(int id, const Node& n) {
    const Tensor<T>& logits = values_[n.in[0]];
    const Tensor<T>& labels = values_[n.in[1]];
    if (logits.ndim() != 2) throw ShapeError("softmax_cross_entropy: logits must be (N,K)");
    const int64_t nn = logits.dim(0), k = logits.dim(1);
    if (labels.numel() != nn) {
      throw ShapeError("softmax_cross_entropy at '" + g_.label(id) + "': label count " +
                       std::to_string(labels.numel()) + " vs batch " + std::to_string(nn));
    }
    Tensor<T>& probs = xent_probs_[id];
    resize(probs, {nn, k});
    double total = 0;
    for (int64_t i = 0; i < nn; ++i) {
      const T* row = logits.data() + i * k;
      T m = row[0];
      for (int64_t j = 1; j < k; ++j) m = std::max(m, row[j]);
      double z = 0;
      for (int64_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - m));
      const double lse = std::log(z) + static_cast<double>(m);
      const int64_t y = static_cast<int64_t>(labels[i]);
      if (y < 0 || y >= k) {
        throw DataError("softmax_cross_entropy: label " + std::to_string(y) +
                        " out of range [0," + std::to_string(k) + ")");
      }
      total += lse - static_cast<double>(row[y]);
      T* pr = probs.data() + i * k;
      for (int64_t j = 0; j < k; ++j) {
        pr[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
      }
    }
    Tensor<T>& out = values_[id];
    resize(out, {1});
    out[0] = static_cast<T>(total / static_cast<double>(nn));
  }

  void backward_impl(const std::map<int, Tensor<T>>& seeds) {
    if (!forward_done_) throw ConfigError("backward: forward has not been run");
    for (int id = 0; id < g_.size(); ++id) {
      resize(grads_[id], values_[id].shape().empty() ? Shape{1} : values_[id].shape());
      grads_[id].zero();
    }
    for (const auto& [id, t] : seeds) {
      T* p = grads_[id].data();
      const T* q = t.data();
      for (int64_t i = 0; i < t.numel(); ++i) p[i] += q[i];
    }
    for (int id = g_.size() - 1; id >= 0; --id) backward_node(id);
    ++backward_count_;
    backward_done_ = true;
  }

  void backward_node(int id) {
    const Node& n = g_.node(id);
    const Tensor<T>& gy = grads_[id];
    switch (n.op) {
      case Op::kInput:
      case Op::kConstant:
      case Op::kParameter:
        break;
      case Op::kAdd: {
        accumulate(n.in[0], gy);
        Tensor<T>& gb = grads_[n.in[1]];
        const Tensor<T>& b = values_[n.in[1]];
        if (b.same_shape(gy)) {
          accumulate(n.in[1], gy);
        } else {
          const int64_t n0 = gy.dim(0), c = gy.dim(1), inner = gy.numel() / (n0 * c);
          for (int64_t i = 0; i < n0; ++i)
            for (int64_t j = 0; j < c; ++j) {
              const T* row = gy.data() + (i * c + j) * inner;
              T s = 0;
              for (int64_t k = 0; k < inner; ++k) s += row[k];
              gb[j] += s;
            }
        }
        break;
      }
      case Op::kResidualAdd:
        accumulate(n.in[0], gy);
        accumulate(n.in[1], gy);
        break;
      case Op::kScale: {
        Tensor<T>& gx = grads_[n.in[0]];
        const T f = static_cast<T>(n.attrs.factor);
        const T* q = gy.data();
        T* p = gx.data();
        for (int64_t i = 0; i < gy.numel(); ++i) p[i] += f * q[i];
        break;
      }
      case Op::kMatMul: {
        const Tensor<T>& x = values_[n.in[0]];
        const Tensor<T>& w = values_[n.in[1]];
        const int64_t rows = x.dim(0), k = x.numel() / rows, m = w.dim(1);
        detail::MapC<T> X(x.data(), rows, k), W(w.data(), k, m), GY(gy.data(), rows, m);
        detail::MapM<T> GX(grads_[n.in[0]].data(), rows, k);
        detail::MapM<T> GW(grads_[n.in[1]].data(), k, m);
        GX.noalias() += GY * W.transpose();
        GW.noalias() += X.transpose() * GY;
        break;
      }
      case Op::kConv2d:
        conv2d_backward(id, n);
        break;
      case Op::kRelu: {
        const Tensor<T>& x = values_[n.in[0]];
        Tensor<T>& gx = grads_[n.in[0]];
        const T* xp = x.data();
        const T* q = gy.data();
        T* p = gx.data();
        for (int64_t i = 0; i < gy.numel(); ++i) {
          if (xp[i] > T(0)) p[i] += q[i];  // subgradient at 0 is 0
        }
        break;
      }
      case Op::kBatchNorm:
        batchnorm_backward(id, n);
        break;
      case Op::kAvgPool: {
        const Tensor<T>& x = values_[n.in[0]];
        Tensor<T>& gx = grads_[n.in[0]];
        const int64_t k = n.attrs.pool;
        const int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
        const int64_t ho = h / k, wo = w / k;
        const T inv = T(1) / static_cast<T>(k * k);
        for (int64_t i = 0; i < nc; ++i) {
          const T* q = gy.data() + i * ho * wo;
          T* p = gx.data() + i * h * w;
          for (int64_t oh = 0; oh < ho; ++oh)
            for (int64_t ow = 0; ow < wo; ++ow) {
              const T v = q[oh * wo + ow] * inv;
              for (int64_t a = 0; a < k; ++a)
                for (int64_t b = 0; b < k; ++b) p[(oh * k + a) * w + ow * k + b] += v;
            }
        }
        break;
      }
      case Op::kSoftmaxCrossEntropy: {
        const Tensor<T>& probs = xent_probs_.at(id);
        const Tensor<T>& labels = values_[n.in[1]];
        Tensor<T>& gl = grads_[n.in[0]];
        const int64_t nn = probs.dim(0), k = probs.dim(1);
        const T seed = gy[0];
        const T invn = T(1) / static_cast<T>(nn);
        for (int64_t i = 0; i < nn; ++i) {
          const int64_t y = static_cast<int64_t>(labels[i]);
          const T* pr = probs.data() + i * k;
          T* p = gl.data() + i * k;
          for (int64_t j = 0; j < k; ++j) {
            T d = pr[j];
            if (j == y) d -= T(1);
            p[j] += seed * d * invn;
          }
        }
        break;
      }
      case Op::kL2Norm: {
        const Tensor<T>& x = values_[n.in[0]];
        Tensor<T>& gx = grads_[n.in[0]];
        const T seed = gy[0];
        if (n.attrs.half_squared) {
          for (int64_t i = 0; i < x.numel(); ++i) gx[i] += seed * x[i];
        } else {
          const T norm = values_[id][0];
          if (norm > T(0)) {
            const T inv = seed / norm;
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += inv * x[i];
          }
        }
        break;
      }
    }
  }

  void conv2d_backward(int id, const Node& n) {
    const Tensor<T>& x = values_[n.in[0]];
    const Tensor<T>& w = values_[n.in[1]];
    const Tensor<T>& gy = grads_[id];
    Tensor<T>& gx = grads_[n.in[0]];
    Tensor<T>& gw = grads_[n.in[1]];
    const int64_t nn = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
    const int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int64_t ho = gy.dim(2), wo = gy.dim(3);
    const int64_t ckk = cin * kh * kw;
    scratch_.resize(static_cast<size_t>(ckk * ho * wo));
    scratch2_.resize(static_cast<size_t>(ckk * ho * wo));
    detail::MapC<T> W(w.data(), cout, ckk);
    detail::MapM<T> GW(gw.data(), cout, ckk);
    for (int64_t i = 0; i < nn; ++i) {
      detail::im2col(x.data() + i * cin * h * ww, cin, h, ww, kh, kw, n.attrs.stride,
                     n.attrs.pad, ho, wo, scratch_.data());
      detail::MapC<T> C(scratch_.data(), ckk, ho * wo);
      detail::MapC<T> GY(gy.data() + i * cout * ho * wo, cout, ho * wo);
      GW.noalias() += GY * C.transpose();
      detail::MapM<T> GC(scratch2_.data(), ckk, ho * wo);
      GC.noalias() = W.transpose() * GY;
      detail::col2im_add(scratch2_.data(), cin, h, ww, kh, kw, n.attrs.stride, n.attrs.pad,
                         ho, wo, gx.data() + i * cin * h * ww);
    }
  }

  void batchnorm_backward(int id, const Node& n) {
    const Tensor<T>& x = values_[n.in[0]];
    const Tensor<T>& gamma = values_[n.in[1]];
    const Tensor<T>& gy = grads_[id];
    Tensor<T>& gx = grads_[n.in[0]];
    Tensor<T>& ggamma = grads_[n.in[1]];
    Tensor<T>& gbeta = grads_[n.in[2]];
    const BnCache& cache = bn_cache_.at(id);
    const int64_t nn = x.dim(0), c = x.dim(1), inner = x.numel() / (nn * c);
    const bool batch_stats = (last_mode_ != RunMode::kEval);
    const double m = static_cast<double>(nn * inner);
    for (int64_t j = 0; j < c; ++j) {
      const T mu = cache.mean[j], inv = cache.inv_std[j], gj = gamma[j];
      double sum_dy = 0, sum_dy_xhat = 0;
      for (int64_t i = 0; i < nn; ++i) {
        const T* xp = x.data() + (i * c + j) * inner;
        const T* q = gy.data() + (i * c + j) * inner;
        for (int64_t k = 0; k < inner; ++k) {
          const double xhat = static_cast<double>((xp[k] - mu) * inv);
          sum_dy += static_cast<double>(q[k]);
          sum_dy_xhat += static_cast<double>(q[k]) * xhat;
        }
      }
      gbeta[j] += static_cast<T>(sum_dy);
      ggamma[j] += static_cast<T>(sum_dy_xhat);
      for (int64_t i = 0; i < nn; ++i) {
        const T* xp = x.data() + (i * c + j) * inner;
        const T* q = gy.data() + (i * c + j) * inner;
        T* p = gx.data() + (i * c + j) * inner;
        for (int64_t k = 0; k < inner; ++k) {
          const double xhat = static_cast<double>((xp[k] - mu) * inv);
          double d;
          if (batch_stats) {
            d = static_cast<double>(gj) * static_cast<double>(inv) *
                (static_cast<double>(q[k]) - (sum_dy + xhat * sum_dy_xhat) / m);
          } else {
            d = static_cast<double>(gj) * static_cast<double>(inv) * static_cast<double>(q[k]);
          }
          p[k] += static_cast<T>(d);
        }
      }
    }
  }

  void accumulate(int id, const Tensor<T>& g) {
    Tensor<T>& dst = grads_[id];
    T* p = dst.data();
    const T* q = g.data();
    for (int64_t i = 0; i < g.numel(); ++i) p[i] += q[i];
  }

  static void resize(Tensor<T>& t, const Shape& s) {
    if (t.shape() != s) t = Tensor<T>(s);
  }

  struct BnCache {
    Tensor<T> mean, inv_std;
  };

  Graph<T>& g_;
  std::vector<Tensor<T>> values_, grads_;
  std::map<int, Tensor<T>> bindings_, injections_;
  std::map<int, BnCache> bn_cache_;
  std::map<int, Tensor<T>> xent_probs_;
  std::vector<T> scratch_, scratch2_;
  RunMode last_mode_ = RunMode::kEval;
  bool forward_done_ = false, backward_done_ = false;
  int64_t forward_count_ = 0, backward_count_ = 0;
};

// Spec-shaped convenience wrapper: evaluates the graph once and returns the
// values of every tap plus the loss node.
template <typename T>
std::map<std::string, Tensor<T>> forward(Graph<T>& g,
                                         const std::map<std::string, Tensor<T>>& bindings,
                                         RunMode mode = RunMode::kEval,
                                         bool strict = false) {
  Workspace<T> ws(g);
  for (const auto& [name, t] : bindings) ws.bind(name, t);
  ws.forward(mode, strict);
  std::map<std::string, Tensor<T>> out;
  for (int id : g.taps()) out.emplace(g.label(id), ws.value(id));
  if (g.loss_node() >= 0) out.emplace("loss", ws.value(g.loss_node()));
  return out;
}

struct GradcheckReport {
  double max_rel_error = 0;
  bool pass = false;
};

// Central-difference verification of the reverse-mode gradient with respect
// to one named node (parameter, input, or tap). Double precision only:
// finite differences are not reliable in float.
inline GradcheckReport gradcheck(Graph<double>& g,
                                 const std::map<std::string, Tensor<double>>& bindings,
                                 const std::string& target, double step, double tolerance,
                                 RunMode mode = RunMode::kTrainFrozen) {
  if (step <= 0) throw ConfigError("gradcheck: step must be positive");
  if (tolerance <= 0) throw ConfigError("gradcheck: tolerance must be positive");

  Workspace<double> ws(g);
  for (const auto& [name, t] : bindings) ws.bind(name, t);
  ws.forward(mode);
  ws.backward();
  const Tensor<double> analytic = ws.grad(target);

  const int id = g.require(target);
  const Op op = g.node(id).op;

  auto eval_loss = [&](Workspace<double>& w) {
    w.forward(mode);
    return w.loss();
  };

  GradcheckReport report;
  const int64_t n = analytic.numel();
  for (int64_t i = 0; i < n; ++i) {
    double lp, lm;
    if (op == Op::kParameter) {
      Tensor<double>& p = g.stored_value(id);
      const double orig = p[i];
      p[i] = orig + step;
      lp = eval_loss(ws);
      p[i] = orig - step;
      lm = eval_loss(ws);
      p[i] = orig;
    } else if (op == Op::kInput) {
      Tensor<double> t = bindings.at(target);
      const double orig = t[i];
      t[i] = orig + step;
      ws.bind(target, t);
      lp = eval_loss(ws);
      t[i] = orig - step;
      ws.bind(target, t);
      lm = eval_loss(ws);
      t[i] = orig;
      ws.bind(target, t);
    } else {
      Tensor<double> e(analytic.shape());
      e[i] = step;
      ws.inject(target, e);
      lp = eval_loss(ws);
      e[i] = -step;
      ws.inject(target, e);
      lm = eval_loss(ws);
      ws.clear_injections();
    }
    const double numeric = (lp - lm) / (2 * step);
    const double a = analytic[i];
    const double denom = std::max({std::abs(numeric), std::abs(a), 1e-6});
    report.max_rel_error = std::max(report.max_rel_error, std::abs(numeric - a) / denom);
  }
  // restore a consistent forward/backward state
  ws.forward(mode);
  ws.backward();
  report.pass = report.max_rel_error <= tolerance;
  return report;
}

}  // namespace corrobust
