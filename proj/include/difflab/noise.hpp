#pragma once

#include <Eigen/Dense>
#include <vector>

#include "difflab/grammar.hpp"
#include "difflab/rng.hpp"

namespace difflab {

enum class KernelKind { uniform, absorbing };
enum class ScheduleKind { linear, cosine };

/// Per-step noise rates beta_t, t = 1..T, with precomputed cumulative
/// keep-probabilities alpha_bar_t = prod_{k<=t} (1 - beta_k).
struct NoiseSchedule {
  int T = 0;
  ScheduleKind kind = ScheduleKind::linear;
  Eigen::VectorXd betas;      // size T, betas[t-1] = beta_t
  Eigen::VectorXd alpha_bar;  // size T+1, alpha_bar[t]; alpha_bar[0] = 1

  double beta(int t) const { return betas[t - 1]; }
  double abar(int t) const { return alpha_bar[t]; }
};

/// Linear beta_t from beta1 to betaT. The default terminal value drives
/// alpha_bar_T below 1e-4, so the chain reaches stationarity at T.
NoiseSchedule make_linear_schedule(int T, double beta1 = 1e-4, double betaT = 0.02);

NoiseSchedule make_cosine_schedule(int T);

/// Automatic terminal rate: smallest linear betaT (searched) with
/// alpha_bar_T < target.
NoiseSchedule make_linear_schedule_auto(int T, double abar_target = 1e-4);

/// A single- or multi-step transition matrix, held in closed form as its
/// keep-probability. uniform: Q = a*I + (1-a)/v * 1 1^T over v states.
/// absorbing: Q = a*I + (1-a) * 1 e_M^T over v+1 states, with the mask
/// state (index v) absorbing.
struct TransitionKernel {
  KernelKind kind = KernelKind::uniform;
  int v = 0;          // vocabulary size (mask state excluded)
  double keep = 1.0;  // 1 - beta_t for a step kernel, alpha_bar_t cumulative

  int state_count() const { return kind == KernelKind::absorbing ? v + 1 : v; }
  int mask_state() const { return v; }

  /// Q[i][j] = q(next = j | current = i).
  double prob(int i, int j) const;
  Eigen::MatrixXd dense() const;
  int sample_from(int i, Rng& rng) const;
};

TransitionKernel step_kernel(KernelKind kind, int v, double beta_t);
TransitionKernel cumulative_kernel(KernelKind kind, int v, const NoiseSchedule& sched, int t);

/// Independently resamples every token from its cumulative-kernel row.
TokenSequence apply_forward(const TokenSequence& x0, const TransitionKernel& kernel, Rng& rng);

/// Closed-form q(x_{t-1} | x_t, x_0) for one token, t >= 2. Throws when
/// the (x_t, x_0) pair is impossible under the forward process.
Eigen::VectorXd step_posterior(KernelKind kind, int v, int xt, int x0,
                               const NoiseSchedule& sched, int t);

}  // namespace difflab
