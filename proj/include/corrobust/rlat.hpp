#pragma once

#include "corrobust/attacks.hpp"

namespace corrobust {

struct PlanEntry {
  int layer = 0;
  std::string tap;
  int64_t dim = 0;
  double eps_l = 0;
};

// The selected layer set with its per-layer l2 budgets. Layers outside the
// plan carry an implicit zero perturbation.
struct LayerPerturbationPlan {
  double base_eps = 0;
  int64_t input_dim = 0;
  std::vector<PlanEntry> entries;
};

// Budgets scale with depth and dimensionality: eps_l = (1/l) * (d_l/d_in) * eps.
template <typename T>
LayerPerturbationPlan make_plan(const ModelGraph<T>& model, double eps,
                                const std::vector<int>& layers) {
  if (eps < 0) throw ConfigError("rlat plan: eps must be >= 0");
  if (layers.empty()) throw ConfigError("rlat plan: layer set must not be empty");
  LayerPerturbationPlan plan;
  plan.base_eps = eps;
  plan.input_dim = model.input_dim();
  for (int l : layers) {
    const InjectionPoint& p = model.point(l);  // rejects unknown layers
    PlanEntry e;
    e.layer = l;
    e.tap = p.tap;
    e.dim = p.dim;
    e.eps_l = (1.0 / static_cast<double>(l)) *
              (static_cast<double>(p.dim) / static_cast<double>(plan.input_dim)) * eps;
    plan.entries.push_back(std::move(e));
  }
  return plan;
}

inline LayerPerturbationPlan all_layers_plan(const ModelGraphF& model, double eps) {
  std::vector<int> layers;
  for (const auto& p : model.injection_points) layers.push_back(p.layer);
  return make_plan(model, eps, layers);
}

template <typename T>
struct RlatStepResult {
  double perturbed_loss = 0;
  double clean_loss = 0;
  GradientBundle<T> weight_gradients;
  // per plan entry, per perturbed sample: ||delta_l||_2 before the input box
  // projection (the budget is attained exactly whenever the gradient is
  // non-zero)
  std::vector<std::vector<double>> delta_norms;
};

// One RLAT iteration (two forward and two backward passes):
//   1. forward/backward at zero perturbation, reading the loss gradient at
//      every planned tap from the one shared backward pass,
//   2. delta_l = eps_l * grad_l / ||grad_l||_2 per sample (0 when grad_l = 0),
//   3. the input-layer delta passes through the same ball+box projection as
//      FGM; inner deltas are injected unconstrained,
//   4. forward/backward on the perturbed graph yields the loss and weight
//      gradients for the optimizer.
// `perturb_rows`, when given, restricts the perturbation to a subset of the
// batch (clean/adversarial mixing).
template <typename T>
RlatStepResult<T> rlat_step(ModelGraph<T>& model, Workspace<T>& ws, const Tensor<T>& batch,
                            const Tensor<T>& labels, const LayerPerturbationPlan& plan,
                            const std::vector<char>* perturb_rows = nullptr) {
  if (plan.entries.empty()) throw ConfigError("rlat_step: empty plan");
  if (plan.input_dim != model.input_dim()) {
    throw ConfigError("rlat_step: plan does not match this model (input dim)");
  }
  for (const auto& e : plan.entries) {
    const InjectionPoint& p = model.point(e.layer);
    if (p.tap != e.tap || p.dim != e.dim) {
      throw ConfigError("rlat_step: plan entry for layer " + std::to_string(e.layer) +
                        " does not match the model");
    }
  }
  const int64_t n = batch.dim(0);
  if (perturb_rows && static_cast<int64_t>(perturb_rows->size()) != n) {
    throw ConfigError("rlat_step: perturb_rows size mismatch");
  }

  ws.clear_injections();
  ws.bind("input", batch);
  ws.bind("labels", labels);
  ws.forward(RunMode::kTrainFrozen);
  ws.backward();

  RlatStepResult<T> result;
  result.clean_loss = ws.loss();
  result.delta_norms.resize(plan.entries.size());

  std::vector<Tensor<T>> deltas;
  deltas.reserve(plan.entries.size());
  for (size_t k = 0; k < plan.entries.size(); ++k) {
    const PlanEntry& e = plan.entries[k];
    const Tensor<T>& g = ws.grad(e.tap);
    Tensor<T> delta = detail::l2_normalized_step(g, e.eps_l);
    const int64_t rowsize = delta.numel() / n;
    for (int64_t r = 0; r < n; ++r) {
      if (perturb_rows && !(*perturb_rows)[static_cast<size_t>(r)]) {
        T* p = delta.data() + r * rowsize;
        for (int64_t i = 0; i < rowsize; ++i) p[i] = T(0);
        continue;
      }
      result.delta_norms[k].push_back(detail::row_l2(delta.data() + r * rowsize, rowsize));
    }
    if (e.layer == 1) {
      delta = project(std::move(delta), batch, ThreatModel(NormP::kL2, e.eps_l));
    }
    deltas.push_back(std::move(delta));
  }

  for (size_t k = 0; k < plan.entries.size(); ++k) {
    ws.inject(plan.entries[k].tap, std::move(deltas[k]));
  }
  ws.forward(RunMode::kTrainUpdate);
  ws.backward();
  result.perturbed_loss = ws.loss();
  result.weight_gradients = ws.param_grads();
  ws.clear_injections();
  return result;
}

template <typename T>
RlatStepResult<T> rlat_step(ModelGraph<T>& model, const Tensor<T>& batch,
                            const Tensor<T>& labels, const LayerPerturbationPlan& plan) {
  Workspace<T> ws(model.graph);
  return rlat_step(model, ws, batch, labels, plan);
}

}  // namespace corrobust
