#include "difflab/noise.hpp"

#include <cmath>
#include <stdexcept>

namespace difflab {

namespace {

void fill_alpha_bar(NoiseSchedule& s) {
  s.alpha_bar.resize(s.T + 1);
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= s.T; ++t) s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.betas[t - 1]);
}

}  // namespace

NoiseSchedule make_linear_schedule(int T, double beta1, double betaT) {
  if (T < 1) throw std::invalid_argument("schedule: T must be positive");
  if (beta1 < 0 || betaT > 1 || beta1 > betaT)
    throw std::invalid_argument("schedule: need 0 <= beta1 <= betaT <= 1");
  NoiseSchedule s;
  s.T = T;
  s.kind = ScheduleKind::linear;
  s.betas.resize(T);
  for (int t = 1; t <= T; ++t)
    s.betas[t - 1] = T == 1 ? betaT : beta1 + (betaT - beta1) * (t - 1) / double(T - 1);
  fill_alpha_bar(s);
  return s;
}

NoiseSchedule make_cosine_schedule(int T) {
  if (T < 1) throw std::invalid_argument("schedule: T must be positive");
  NoiseSchedule s;
  s.T = T;
  s.kind = ScheduleKind::cosine;
  s.betas.resize(T);
  auto f = [&](double t) {
    double x = (t / T + 0.008) / 1.008 * M_PI / 2.0;
    return std::cos(x) * std::cos(x);
  };
  for (int t = 1; t <= T; ++t)
    s.betas[t - 1] = std::min(1.0 - f(t) / f(t - 1.0), 0.999);
  fill_alpha_bar(s);
  return s;
}

NoiseSchedule make_linear_schedule_auto(int T, double abar_target) {
  double lo = 1e-4, hi = 1.0;
  for (int it = 0; it < 60; ++it) {
    double mid = 0.5 * (lo + hi);
    NoiseSchedule s = make_linear_schedule(T, 1e-4, mid);
    (s.abar(T) < abar_target ? hi : lo) = mid;
  }
  return make_linear_schedule(T, 1e-4, hi);
}

double TransitionKernel::prob(int i, int j) const {
  if (kind == KernelKind::uniform) {
    return keep * (i == j ? 1.0 : 0.0) + (1.0 - keep) / v;
  }
  if (i == mask_state()) return j == mask_state() ? 1.0 : 0.0;
  if (j == mask_state()) return 1.0 - keep;
  return i == j ? keep : 0.0;
}

Eigen::MatrixXd TransitionKernel::dense() const {
  const int n = state_count();
  Eigen::MatrixXd Q(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) Q(i, j) = prob(i, j);
  return Q;
}

int TransitionKernel::sample_from(int i, Rng& rng) const {
  double u = rng.uniform();
  if (kind == KernelKind::uniform) {
    if (u < keep) return i;
    return static_cast<int>(rng.uniform_index(v));
  }
  if (i == mask_state()) return mask_state();
  return u < keep ? i : mask_state();
}

TransitionKernel step_kernel(KernelKind kind, int v, double beta_t) {
  if (beta_t < 0.0 || beta_t > 1.0) throw std::invalid_argument("beta_t outside [0, 1]");
  return TransitionKernel{kind, v, 1.0 - beta_t};
}

TransitionKernel cumulative_kernel(KernelKind kind, int v, const NoiseSchedule& sched, int t) {
  if (t < 1 || t > sched.T) throw std::invalid_argument("cumulative_kernel: t out of range");
  return TransitionKernel{kind, v, sched.abar(t)};
}

TokenSequence apply_forward(const TokenSequence& x0, const TransitionKernel& kernel, Rng& rng) {
  TokenSequence xt(x0.size());
  for (std::size_t k = 0; k < x0.size(); ++k) xt[k] = kernel.sample_from(x0[k], rng);
  return xt;
}

Eigen::VectorXd step_posterior(KernelKind kind, int v, int xt, int x0,
                               const NoiseSchedule& sched, int t) {
  if (t < 2 || t > sched.T) throw std::invalid_argument("step_posterior: need 2 <= t <= T");
  TransitionKernel step = step_kernel(kind, v, sched.beta(t));
  TransitionKernel cum{kind, v, sched.abar(t - 1)};
  const int n = step.state_count();
  Eigen::VectorXd p(n);
  for (int a = 0; a < n; ++a) p[a] = step.prob(a, xt) * cum.prob(x0, a);
  double z = p.sum();
  if (z <= 0.0)
    throw std::domain_error("step_posterior: impossible (x_t, x_0) transition at step t");
  return p / z;
}

}  // namespace difflab
