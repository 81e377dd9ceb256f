#pragma once

#include <map>
#include <string>
#include <vector>

#include "corrobust/graph.hpp"

namespace corrobust {

enum class NormKind { kBatchNorm, kNone };

// Desk-scale analog of a pre-activation residual network: one stem conv, a
// configurable list of stages (stride 2 from the second stage on), global
// average pooling, and a linear classifier head.
struct ModelSpec {
  Shape input_shape = {3, 16, 16};       // C, H, W
  std::vector<int64_t> widths = {16, 32, 64};
  int blocks_per_stage = 1;
  int64_t num_classes = 4;
  NormKind norm = NormKind::kBatchNorm;

  void validate() const {
    if (input_shape.size() != 3) throw ConfigError("model: input_shape must be C,H,W");
    if (widths.empty()) throw ConfigError("model: at least one stage required");
    for (int64_t w : widths) {
      if (w <= 0) throw ConfigError("model: channel counts must be positive");
    }
    if (blocks_per_stage < 1) throw ConfigError("model: blocks_per_stage must be >= 1");
    if (num_classes < 2) throw ConfigError("model: need at least two classes");
    const int64_t h = input_shape[1], w = input_shape[2];
    int64_t div = 1;
    for (size_t i = 1; i < widths.size(); ++i) div *= 2;
    if (h % div != 0 || w % div != 0 || h / div < 1) {
      throw ConfigError("model: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                        " not divisible by stage strides");
    }
  }
};

// One perturbation-injection point: 1-based depth index, the tap name, and
// the per-sample dimensionality of the tapped activation.
struct InjectionPoint {
  int layer = 0;
  std::string tap;
  int64_t dim = 0;
};

template <typename T>
struct ModelGraph {
  ModelSpec spec;
  Graph<T> graph;
  std::vector<InjectionPoint> injection_points;

  int64_t input_dim() const {
    return spec.input_shape[0] * spec.input_shape[1] * spec.input_shape[2];
  }

  const InjectionPoint& point(int layer) const {
    for (const auto& p : injection_points) {
      if (p.layer == layer) return p;
    }
    throw ConfigError("unknown injection layer " + std::to_string(layer));
  }
};

using ModelGraphF = ModelGraph<float>;

namespace detail {

template <typename T>
Tensor<T> kaiming_normal(Shape shape, int64_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace detail

// Builds the network graph with freshly initialized parameters. Kaiming
// fan-in init for conv/linear weights, gamma=1 beta=0 for batchnorm, all
// draws from a single stream so the result is a pure function of the seed.
template <typename T>
ModelGraph<T> build_model(const ModelSpec& spec, uint64_t seed) {
  spec.validate();
  ModelGraph<T> m;
  m.spec = spec;
  Graph<T>& g = m.graph;
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));

  const int64_t cin = spec.input_shape[0];
  const int64_t h0 = spec.input_shape[1], w0 = spec.input_shape[2];

  const int input = g.input("input", {-1, cin, h0, w0});
  g.tap(input, "input");
  m.injection_points.push_back({1, "input", cin * h0 * w0});
  const int labels = g.input("labels", {-1});

  auto conv = [&](const std::string& name, int x, int64_t in_c, int64_t out_c, int k,
                  int stride, int pad) {
    const int w = g.parameter(
        name + ".w", detail::kaiming_normal<T>({out_c, in_c, k, k}, in_c * k * k, rng));
    return g.conv2d(x, w, stride, pad);
  };
  auto bn = [&](const std::string& name, int x, int64_t c) {
    const int gamma = g.parameter(name + ".gamma", Tensor<T>::full({c}, T(1)));
    const int beta = g.parameter(name + ".beta", Tensor<T>({c}));
    return g.batchnorm(x, gamma, beta);
  };
  auto norm_relu = [&](const std::string& name, int x, int64_t c) {
    if (spec.norm == NormKind::kBatchNorm) x = bn(name, x, c);
    return g.relu(x);
  };

  int x = conv("conv1", input, cin, spec.widths[0], 3, 1, 1);
  int64_t cur_c = spec.widths[0];
  int64_t cur_h = h0, cur_w = w0;

  for (size_t s = 0; s < spec.widths.size(); ++s) {
    const int64_t out_c = spec.widths[s];
    for (int b = 0; b < spec.blocks_per_stage; ++b) {
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      const std::string base = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      const int pre = norm_relu(base + ".bn1", x, cur_c);
      int hconv = conv(base + ".conv1", pre, cur_c, out_c, 3, stride, 1);
      hconv = norm_relu(base + ".bn2", hconv, out_c);
      hconv = conv(base + ".conv2", hconv, out_c, out_c, 3, 1, 1);
      int shortcut = x;
      if (stride != 1 || cur_c != out_c) {
        shortcut = conv(base + ".shortcut", pre, cur_c, out_c, 1, stride, 0);
      }
      x = g.residual_add(hconv, shortcut);
      cur_c = out_c;
      cur_h /= stride;
      cur_w /= stride;
    }
    const std::string tap_name = "stage" + std::to_string(s + 1);
    g.tap(x, tap_name);
    m.injection_points.push_back(
        {static_cast<int>(s) + 2, tap_name, cur_c * cur_h * cur_w});
  }

  x = norm_relu("head.bn", x, cur_c);
  x = g.avgpool(x, static_cast<int>(cur_h));
  const int wfc = g.parameter(
      "fc.w", detail::kaiming_normal<T>({cur_c, spec.num_classes}, cur_c, rng));
  const int bfc = g.parameter("fc.b", Tensor<T>({spec.num_classes}));
  const int logits = g.add(g.matmul(x, wfc), bfc);
  g.tap(logits, "logits");
  g.set_loss(g.softmax_cross_entropy(logits, labels));
  return m;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  Tensor<T> probs(logits.shape());
  const int64_t n = logits.dim(0), k = logits.dim(1);
  for (int64_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * k;
    T m = row[0];
    for (int64_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double z = 0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - m));
    T* p = probs.data() + i * k;
    for (int64_t j = 0; j < k; ++j) {
      p[j] = static_cast<T>(std::exp(static_cast<double>(row[j] - m)) / z);
    }
  }
  return probs;
}

// Evaluation forward pass; labels are irrelevant for the tapped values, so a
// zero label vector is bound to satisfy the loss node.
template <typename T>
void bind_eval_batch(Workspace<T>& ws, const Tensor<T>& batch) {
  ws.bind("input", batch);
  ws.bind("labels", Tensor<T>({batch.dim(0)}));
}

// phi_l(x) for each requested injection layer.
template <typename T>
std::map<int, Tensor<T>> feature_maps(ModelGraph<T>& model, const Tensor<T>& x,
                                      const std::vector<int>& layers) {
  Workspace<T> ws(model.graph);
  bind_eval_batch(ws, x);
  ws.forward(RunMode::kEval);
  std::map<int, Tensor<T>> out;
  for (int l : layers) out.emplace(l, ws.value(model.point(l).tap));
  return out;
}

template <typename T>
struct Prediction {
  Tensor<T> logits;
  Tensor<T> probabilities;
};

template <typename T>
Prediction<T> predict(ModelGraph<T>& model, const Tensor<T>& batch) {
  Workspace<T> ws(model.graph);
  bind_eval_batch(ws, batch);
  ws.forward(RunMode::kEval);
  Prediction<T> p;
  p.logits = ws.value("logits");
  p.probabilities = softmax_rows(p.logits);
  return p;
}

template <typename T>
int64_t argmax_row(const Tensor<T>& t, int64_t row) {
  const int64_t k = t.dim(1);
  const T* p = t.data() + row * k;
  int64_t best = 0;
  for (int64_t j = 1; j < k; ++j) {
    if (p[j] > p[best]) best = j;
  }
  return best;
}

template <typename T>
int64_t param_count(const ModelGraph<T>& m) {
  int64_t n = 0;
  for (int id : m.graph.parameter_ids()) n += m.graph.stored_value(id).numel();
  return n;
}

}  // namespace corrobust
