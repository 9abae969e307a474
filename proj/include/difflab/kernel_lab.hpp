#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "difflab/metrics.hpp"
#include "difflab/rng.hpp"

namespace difflab {

/// P well-separated training points with Gaussian noise of scale sigma
/// around each; the empirical density is the equal-weight mixture.
struct GaussianCloud {
  Eigen::MatrixXd points;  // d x P, one column per training point
  double sigma = 0.0;

  int d() const { return static_cast<int>(points.rows()); }
  int P() const { return static_cast<int>(points.cols()); }
  double min_pairwise_distance() const;
  /// Separation assumption: sigma <= 0.2 * min pairwise distance.
  bool separation_ok() const { return sigma <= 0.2 * min_pairwise_distance(); }
};

/// P standard-Gaussian points in d dimensions.
GaussianCloud sample_cloud(int d, int P, double sigma, Rng& rng);

/// Exact score of the mixture, grad_x log p_sigma(x), with log-sum-exp
/// stable responsibility weights.
Eigen::VectorXd mixture_score(const Eigen::VectorXd& x, const GaussianCloud& cloud);

/// Isotropic kernels for the eigenvalue oracle.
struct KernelSpec {
  enum Form { power_law, relu_ntk };
  Form form = power_law;
  double nu = 1.0;  // small-r exponent: kappa(r) = 1 + C r^nu
  double C = 1.0;

  double eval(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const;
};

/// Smooth cutoff of the mode ansatz psi_i(x) = (x - x_i) R(|x - x_i| / sigma);
/// default R(r) = exp(-r).
struct ModeAnsatz {
  int center = 0;
  double cutoff(double r) const { return std::exp(-r); }
};

struct EigenEstimate {
  double lambda = 0.0;
  double stderr_ = 0.0;
  bool resolution_warning = false;  // stderr exceeds 10% of the estimate
  double constant_term = 0.0;       // kappa = 1 contribution; ~0 by symmetry
  double constant_stderr = 0.0;
};

/// Monte-Carlo Rayleigh quotient <psi_i, K psi_i> / |psi_i|^2 in local
/// coordinates u, v ~ N(0, I_d). Deterministic per-block seeding and
/// pairwise block reduction.
EigenEstimate eigen_oracle(const KernelSpec& kernel, const GaussianCloud& cloud,
                           const ModeAnsatz& mode, std::size_t n_mc, std::uint64_t seed);

enum class ScoreInit { lazy, meanfield };

struct ScoreNetConfig {
  int width = 1024;
  ScoreInit init = ScoreInit::lazy;
  double lr = 0.05;
  int batch = 0;             // 0 means full batch (B = P)
  std::int64_t step_cap = 200000;
  int n_test = 128;          // held-out points from the same prior
  int eval_batch = 256;      // fixed noise draws per loss evaluation
  double detect_delta = 0.05;
  int detect_k = 3;
  int checkpoints_per_decade = 8;
};

/// One-hidden-layer ReLU network trained by (S)GD on the denoising
/// regression x = x_j + sigma * eps -> exact mixture score. Train loss on
/// the cloud, test loss on a held-out cloud of fresh prior points.
TrainTrace train_score_net(const GaussianCloud& cloud, const ScoreNetConfig& config, Rng& rng);

enum class SweepAxis { P, sigma, batch };

struct SweepPoint {
  double axis_value = 0.0;
  std::optional<std::int64_t> tau_mem;  // nullopt = censored (no divergence)
};

struct SweepResult {
  SweepAxis axis;
  std::vector<SweepPoint> points;
  std::optional<double> slope;  // log-log fit over uncensored points
  std::optional<double> intercept;
  std::optional<double> r2;

  std::string to_csv() const;  // slope in a footer row; censored flagged
};

/// Runs train_score_net per grid value with matched seeds and extracts
/// tau_mem. Base config supplies everything the axis does not override;
/// sigma / P sweeps rebuild the cloud, the batch sweep reuses it.
SweepResult sweep_tau_mem(SweepAxis axis, const std::vector<double>& grid,
                          const ScoreNetConfig& config, int d, int P, double sigma,
                          std::uint64_t seed);

struct PowerLawFit {
  double slope = 0.0;
  double intercept = 0.0;  // in log space
  double r2 = 0.0;
};

/// Least squares on (log x, log y). Throws on nonpositive data, fewer
/// than 3 points, or a degenerate design.
PowerLawFit fit_powerlaw(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace difflab
