#pragma once

#include <functional>

#include "corrobust/model.hpp"

namespace corrobust {

enum class NormP { kL2, kLinf };

// The feasible set: an lp ball of radius eps intersected with the [0,1]
// pixel box around x.
struct ThreatModel {
  NormP p = NormP::kL2;
  double eps = 0;

  ThreatModel() = default;
  ThreatModel(NormP p_, double eps_) : p(p_), eps(eps_) {
    if (eps < 0) throw ConfigError("threat model: eps must be >= 0");
  }
};

enum class AttackInit { kZero, kRandomInBall };

struct AttackConfig {
  ThreatModel threat;
  int steps = 1;
  double step_size = 0;
  AttackInit init = AttackInit::kZero;

  void validate() const {
    if (steps < 1) throw ConfigError("attack: steps must be >= 1");
    if (step_size < 0) throw ConfigError("attack: step size must be >= 0");
  }
};

// Default PGD step size when a config does not pin one. The paper does not
// state the step size of its PGD-10 runs; 2*eps/steps is adopted.
inline double default_pgd_step(double eps, int steps) { return 2.0 * eps / steps; }

enum class GaussianMode { kAll, kHalf, kUniformSigma };

struct GaussianAugConfig {
  double sigma = 0;
  GaussianMode mode = GaussianMode::kAll;
  bool sphere = false;  // draw from the sphere of radius sigma*sqrt(d) instead

  void validate() const {
    if (sigma < 0) throw ConfigError("gaussian augmentation: sigma must be >= 0");
  }
};

namespace detail {

// Tensors of rank >= 2 are treated as batches (dim 0); rank-1 tensors are a
// single sample.
template <typename T>
int64_t batch_rows(const Tensor<T>& t) {
  return t.ndim() >= 2 ? t.dim(0) : 1;
}

template <typename T>
double row_l2(const T* p, int64_t n) {
  double s = 0;
  for (int64_t i = 0; i < n; ++i) s += static_cast<double>(p[i]) * static_cast<double>(p[i]);
  return std::sqrt(s);
}

}  // namespace detail

// Projection onto the threat model's feasible set: lp ball first (l2 radial
// scaling / linf coordinate clamp, per sample), then the [0,1] box around x.
// Total and bit-idempotent: feasible coordinates pass through untouched, and
// the radial rescale iterates to a fixpoint of the rounded arithmetic.
template <typename T>
Tensor<T> project(Tensor<T> delta, const Tensor<T>& x, const ThreatModel& tm) {
  if (!delta.same_shape(x)) throw ShapeError("project: delta/x shape mismatch");
  const int64_t rows = detail::batch_rows(delta);
  const int64_t rowsize = delta.numel() / rows;
  const T eps = static_cast<T>(tm.eps);
  for (int64_t r = 0; r < rows; ++r) {
    T* d = delta.data() + r * rowsize;
    if (tm.p == NormP::kLinf) {
      for (int64_t i = 0; i < rowsize; ++i) d[i] = std::clamp(d[i], -eps, eps);
    } else {
      for (int iter = 0; iter < 8; ++iter) {
        const double norm = detail::row_l2(d, rowsize);
        if (norm <= tm.eps) break;
        const T s = static_cast<T>(tm.eps / norm);
        for (int64_t i = 0; i < rowsize; ++i) d[i] *= s;
        if (tm.eps == 0) break;
      }
    }
  }
  const T* xp = x.data();
  T* d = delta.data();
  for (int64_t i = 0; i < delta.numel(); ++i) {
    const T v = xp[i] + d[i];
    if (v < T(0)) {
      d[i] = -xp[i];
    } else if (v > T(1)) {
      d[i] = T(1) - xp[i];
    }
  }
  return delta;
}

template <typename T>
struct LossGrad {
  double loss = 0;
  Tensor<T> grad;
};

// Callable computing the loss and its input gradient at a given point; the
// label batch is folded into the closure. Attacks are written against this
// so oracle tests can supply analytic losses directly.
template <typename T>
using LossGradFn = std::function<LossGrad<T>(const Tensor<T>&)>;

template <typename T>
class ModelLossGrad {
 public:
  ModelLossGrad(ModelGraph<T>& m, Tensor<T> labels, RunMode mode)
      : ws_(m.graph), labels_(std::move(labels)), mode_(mode) {}

  LossGrad<T> operator()(const Tensor<T>& x) {
    ws_.bind("input", x);
    ws_.bind("labels", labels_);
    ws_.forward(mode_);
    ws_.backward();
    return {ws_.loss(), ws_.grad("input")};
  }

  double loss_only(const Tensor<T>& x) {
    ws_.bind("input", x);
    ws_.bind("labels", labels_);
    ws_.forward(mode_);
    return ws_.loss();
  }

 private:
  Workspace<T> ws_;
  Tensor<T> labels_;
  RunMode mode_;
};

template <typename T>
double model_loss(ModelGraph<T>& m, const Tensor<T>& x, const Tensor<T>& y,
                  RunMode mode = RunMode::kEval) {
  return ModelLossGrad<T>(m, y, mode).loss_only(x);
}

namespace detail {

// delta = eps * g / ||g||_2 per sample; zero gradient maps to zero delta
template <typename T>
Tensor<T> l2_normalized_step(const Tensor<T>& g, double eps) {
  Tensor<T> delta(g.shape());
  const int64_t rows = batch_rows(g);
  const int64_t rowsize = g.numel() / rows;
  for (int64_t r = 0; r < rows; ++r) {
    const T* gp = g.data() + r * rowsize;
    T* dp = delta.data() + r * rowsize;
    const double norm = row_l2(gp, rowsize);
    if (norm > 0) {
      const T s = static_cast<T>(eps / norm);
      for (int64_t i = 0; i < rowsize; ++i) dp[i] = s * gp[i];
    }
  }
  return delta;
}

template <typename T>
Tensor<T> sign_step(const Tensor<T>& g, double eps) {
  Tensor<T> delta(g.shape());
  const T e = static_cast<T>(eps);
  for (int64_t i = 0; i < g.numel(); ++i) {
    const T v = g[i];
    delta[i] = v > T(0) ? e : (v < T(0) ? -e : T(0));  // sign(0) = 0
  }
  return delta;
}

}  // namespace detail

// Fast gradient method: one l2-normalized step of size eps, box-projected.
template <typename T>
Tensor<T> fgm(const LossGradFn<T>& f, const Tensor<T>& x, double eps) {
  if (eps < 0) throw ConfigError("fgm: eps must be >= 0");
  auto lg = f(x);
  return project(detail::l2_normalized_step(lg.grad, eps), x, ThreatModel(NormP::kL2, eps));
}

template <typename T>
Tensor<T> fgm(ModelGraph<T>& m, const Tensor<T>& x, const Tensor<T>& y, double eps,
              RunMode mode = RunMode::kEval) {
  ModelLossGrad<T> f(m, y, mode);
  return fgm<T>([&f](const Tensor<T>& xx) { return f(xx); }, x, eps);
}

// Fast gradient sign method: delta = eps * sign(g), box-projected.
template <typename T>
Tensor<T> fgsm(const LossGradFn<T>& f, const Tensor<T>& x, double eps) {
  if (eps < 0) throw ConfigError("fgsm: eps must be >= 0");
  auto lg = f(x);
  return project(detail::sign_step(lg.grad, eps), x, ThreatModel(NormP::kLinf, eps));
}

template <typename T>
Tensor<T> fgsm(ModelGraph<T>& m, const Tensor<T>& x, const Tensor<T>& y, double eps,
               RunMode mode = RunMode::kEval) {
  ModelLossGrad<T> f(m, y, mode);
  return fgsm<T>([&f](const Tensor<T>& xx) { return f(xx); }, x, eps);
}

template <typename T>
Tensor<T> random_in_ball(const Shape& shape, const ThreatModel& tm, Rng& rng) {
  Tensor<T> delta(shape);
  const int64_t rows = detail::batch_rows(delta);
  const int64_t d = delta.numel() / rows;
  for (int64_t r = 0; r < rows; ++r) {
    T* p = delta.data() + r * d;
    if (tm.p == NormP::kLinf) {
      for (int64_t i = 0; i < d; ++i) p[i] = static_cast<T>(rng.uniform(-tm.eps, tm.eps));
    } else {
      for (int64_t i = 0; i < d; ++i) p[i] = static_cast<T>(rng.normal());
      const double norm = detail::row_l2(p, d);
      const double radius =
          tm.eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
      if (norm > 0) {
        const T s = static_cast<T>(radius / norm);
        for (int64_t i = 0; i < d; ++i) p[i] *= s;
      }
    }
  }
  return delta;
}

// Projected gradient ascent (Eq.-style recursion): sign update for linf,
// l2-normalized update for l2, projecting every iterate onto the feasible
// set. rng is consumed only for random initialization.
template <typename T>
Tensor<T> pgd(const LossGradFn<T>& f, const Tensor<T>& x, const AttackConfig& cfg, Rng* rng = nullptr) {
  cfg.validate();
  Tensor<T> delta(x.shape());
  if (cfg.init == AttackInit::kRandomInBall) {
    if (rng == nullptr) throw ConfigError("pgd: random init requires an rng");
    delta = project(random_in_ball<T>(x.shape(), cfg.threat, *rng), x, cfg.threat);
  }
  Tensor<T> xt(x.shape());
  for (int t = 0; t < cfg.steps; ++t) {
    const T* xp = x.data();
    const T* dp = delta.data();
    for (int64_t i = 0; i < x.numel(); ++i) xt[i] = xp[i] + dp[i];
    auto lg = f(xt);
    const Tensor<T> step = cfg.threat.p == NormP::kLinf
                               ? detail::sign_step(lg.grad, cfg.step_size)
                               : detail::l2_normalized_step(lg.grad, cfg.step_size);
    T* d = delta.data();
    for (int64_t i = 0; i < delta.numel(); ++i) d[i] += step[i];
    delta = project(std::move(delta), x, cfg.threat);
  }
  return delta;
}

template <typename T>
Tensor<T> pgd(ModelGraph<T>& m, const Tensor<T>& x, const Tensor<T>& y, const AttackConfig& cfg,
              Rng* rng = nullptr, RunMode mode = RunMode::kEval) {
  ModelLossGrad<T> f(m, y, mode);
  return pgd<T>([&f](const Tensor<T>& xx) { return f(xx); }, x, cfg, rng);
}

namespace detail {

template <typename T>
void add_noise_row(T* p, int64_t d, double sigma, bool sphere, Rng& rng) {
  if (sphere) {
    std::vector<double> n(static_cast<size_t>(d));
    double norm2 = 0;
    for (int64_t i = 0; i < d; ++i) {
      n[static_cast<size_t>(i)] = rng.normal();
      norm2 += n[static_cast<size_t>(i)] * n[static_cast<size_t>(i)];
    }
    const double norm = std::sqrt(norm2);
    const double radius = sigma * std::sqrt(static_cast<double>(d));
    if (norm > 0) {
      for (int64_t i = 0; i < d; ++i) {
        p[i] += static_cast<T>(n[static_cast<size_t>(i)] * radius / norm);
      }
    }
  } else {
    for (int64_t i = 0; i < d; ++i) p[i] += static_cast<T>(rng.normal(0.0, sigma));
  }
}

}  // namespace detail

// Gaussian augmentation schemes: 100% of the batch, exactly floor(b/2)
// randomly chosen samples, or a per-sample standard deviation drawn
// uniformly from [0, sigma]. Output is clipped to [0,1].
template <typename T>
Tensor<T> gaussian_augment(const Tensor<T>& batch, const GaussianAugConfig& cfg, Rng& rng) {
  cfg.validate();
  Tensor<T> out = batch;
  if (cfg.sigma == 0) return out;
  const int64_t rows = detail::batch_rows(out);
  const int64_t d = out.numel() / rows;

  std::vector<char> chosen(static_cast<size_t>(rows), 1);
  if (cfg.mode == GaussianMode::kHalf) {
    std::fill(chosen.begin(), chosen.end(), 0);
    std::vector<int64_t> idx(static_cast<size_t>(rows));
    for (int64_t i = 0; i < rows; ++i) idx[static_cast<size_t>(i)] = i;
    rng.shuffle(idx);
    for (int64_t i = 0; i < rows / 2; ++i) chosen[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
  }

  for (int64_t r = 0; r < rows; ++r) {
    if (!chosen[static_cast<size_t>(r)]) continue;
    const double sigma =
        cfg.mode == GaussianMode::kUniformSigma ? rng.uniform(0.0, cfg.sigma) : cfg.sigma;
    detail::add_noise_row(out.data() + r * d, d, sigma, cfg.sphere, rng);
  }
  T* p = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) p[i] = std::clamp(p[i], T(0), T(1));
  return out;
}

}  // namespace corrobust
