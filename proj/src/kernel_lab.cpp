#include "difflab/kernel_lab.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace difflab {

double GaussianCloud::min_pairwise_distance() const {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < P(); ++i)
    for (int j = i + 1; j < P(); ++j)
      best = std::min(best, (points.col(i) - points.col(j)).norm());
  return best;
}

GaussianCloud sample_cloud(int d, int P, double sigma, Rng& rng) {
  if (d < 1 || P < 1 || sigma <= 0.0) throw std::invalid_argument("bad cloud parameters");
  GaussianCloud cloud;
  cloud.sigma = sigma;
  cloud.points.resize(d, P);
  for (int j = 0; j < P; ++j)
    for (int i = 0; i < d; ++i) cloud.points(i, j) = rng.normal();
  return cloud;
}

Eigen::VectorXd mixture_score(const Eigen::VectorXd& x, const GaussianCloud& cloud) {
  const double inv_var = 1.0 / (cloud.sigma * cloud.sigma);
  Eigen::VectorXd logw(cloud.P());
  for (int j = 0; j < cloud.P(); ++j)
    logw[j] = -0.5 * inv_var * (x - cloud.points.col(j)).squaredNorm();
  double mx = logw.maxCoeff();
  Eigen::VectorXd w = (logw.array() - mx).exp();
  w /= w.sum();
  Eigen::VectorXd score = Eigen::VectorXd::Zero(cloud.d());
  for (int j = 0; j < cloud.P(); ++j) score += w[j] * (cloud.points.col(j) - x);
  return score * inv_var;
}

double KernelSpec::eval(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  if (form == power_law) {
    return 1.0 + C * std::pow((x - y).norm(), nu);
  }
  // One-hidden-layer ReLU NTK via the arc-cosine closed forms.
  const double d = static_cast<double>(x.size());
  const double u = x.dot(y) / d;
  const double a = std::sqrt(x.squaredNorm() / d);
  const double b = std::sqrt(y.squaredNorm() / d);
  if (a == 0.0 || b == 0.0) return 0.0;
  double ct = std::clamp(u / (a * b), -1.0, 1.0);
  double theta = std::acos(ct);
  double kappa1 = a * b / (2.0 * M_PI) * (std::sin(theta) + (M_PI - theta) * ct);
  double kappa0 = (M_PI - theta) / (2.0 * M_PI);
  return 2.0 * (kappa1 + u * kappa0);
}

EigenEstimate eigen_oracle(const KernelSpec& kernel, const GaussianCloud& cloud,
                           const ModeAnsatz& mode, std::size_t n_mc, std::uint64_t seed) {
  if (!cloud.separation_ok())
    throw std::invalid_argument("eigen_oracle: separation assumption violated");
  const int d = cloud.d();
  const double sigma = cloud.sigma;
  const double P = static_cast<double>(cloud.P());
  const Eigen::VectorXd center = cloud.points.col(mode.center);

  constexpr std::size_t kBlock = 4096;
  const std::size_t n_blocks = (n_mc + kBlock - 1) / kBlock;

  // Control variate: the kernel's value at the mode center multiplies a
  // zero-mean factor in the numerator, so subtracting it changes nothing
  // in expectation but removes the dominant MC variance.
  const double K00 = kernel.eval(center, center);

  // Per-block means, combined by pairwise summation so the reduction is
  // order-independent.
  std::vector<double> num_blocks(n_blocks), den_blocks(n_blocks), const_blocks(n_blocks);
  Eigen::VectorXd u(d), v(d);
  for (std::size_t blk = 0; blk < n_blocks; ++blk) {
    Rng rng(splitmix64(seed) ^ (blk + 1));
    const std::size_t count = std::min(kBlock, n_mc - blk * kBlock);
    double num = 0.0, den = 0.0, cst = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      for (int k = 0; k < d; ++k) u[k] = rng.normal();
      for (int k = 0; k < d; ++k) v[k] = rng.normal();
      const double ru = u.norm(), rv = v.norm();
      const double cu = mode.cutoff(ru), cv = mode.cutoff(rv);
      const double dot_uv = u.dot(v);
      const double K = kernel.eval(center + sigma * u, center + sigma * v);
      num += sigma * sigma * dot_uv * cu * cv * (K - K00);
      cst += sigma * sigma * dot_uv * cu * cv;  // kappa = 1 contribution
      den += sigma * sigma * ru * ru * cu * cu;
    }
    num_blocks[blk] = num / static_cast<double>(count);
    den_blocks[blk] = den / static_cast<double>(count);
    const_blocks[blk] = cst / static_cast<double>(count);
  }

  auto pairwise_mean = [](std::vector<double> xs) {
    while (xs.size() > 1) {
      std::vector<double> next((xs.size() + 1) / 2);
      for (std::size_t i = 0; i + 1 < xs.size(); i += 2) next[i / 2] = 0.5 * (xs[i] + xs[i + 1]);
      if (xs.size() % 2) next.back() = xs.back();
      xs = std::move(next);
    }
    return xs[0];
  };

  const double num_mean = pairwise_mean(num_blocks);
  const double den_mean = pairwise_mean(den_blocks);
  const double cst_mean = pairwise_mean(const_blocks);

  EigenEstimate est;
  est.lambda = (num_mean / (P * P)) / (den_mean / P);
  est.constant_term = (cst_mean / (P * P)) / (den_mean / P);

  // Stderr from the spread of per-block Rayleigh quotients.
  double var = 0.0;
  for (std::size_t b = 0; b < n_blocks; ++b) {
    double lb = (num_blocks[b] / (P * P)) / (den_blocks[b] / P);
    var += (lb - est.lambda) * (lb - est.lambda);
  }
  var /= std::max<std::size_t>(1, n_blocks - 1) * static_cast<double>(n_blocks);
  est.stderr_ = std::sqrt(var);
  double cvar = 0.0;
  for (std::size_t b = 0; b < n_blocks; ++b) {
    double cb = (const_blocks[b] / (P * P)) / (den_blocks[b] / P);
    cvar += (cb - est.constant_term) * (cb - est.constant_term);
  }
  cvar /= std::max<std::size_t>(1, n_blocks - 1) * static_cast<double>(n_blocks);
  est.constant_stderr = std::sqrt(cvar);
  est.resolution_warning = std::abs(est.lambda) > 0.0
                               ? est.stderr_ > 0.1 * std::abs(est.lambda)
                               : false;
  return est;
}

// ---------------------------------------------------------------------------
// One-hidden-layer score regression

namespace {

struct ScoreNet {
  Eigen::MatrixXd W;  // width x d
  Eigen::MatrixXd A;  // d x width
  double out_scale;
  double lr_mult;
  double inv_sqrt_d;

  ScoreNet(int d, const ScoreNetConfig& cfg, Rng& rng) {
    W.resize(cfg.width, d);
    A.resize(d, cfg.width);
    for (int j = 0; j < W.cols(); ++j)
      for (int i = 0; i < W.rows(); ++i) W(i, j) = rng.normal();
    for (int j = 0; j < A.cols(); ++j)
      for (int i = 0; i < A.rows(); ++i) A(i, j) = rng.normal();
    inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    if (cfg.init == ScoreInit::lazy) {
      out_scale = std::sqrt(2.0 / cfg.width);
      lr_mult = 1.0;
    } else {
      // mean-field readout: 1/width scale with width-rescaled step size
      out_scale = 2.0 / cfg.width;
      lr_mult = static_cast<double>(cfg.width) / 2.0;
    }
  }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& X, Eigen::MatrixXd* hidden) const {
    Eigen::MatrixXd pre = (W * X) * inv_sqrt_d;
    Eigen::MatrixXd H = pre.cwiseMax(0.0);
    if (hidden) *hidden = H;
    return out_scale * (A * H);
  }

  double loss(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) const {
    Eigen::MatrixXd F = forward(X, nullptr);
    return (F - Y).squaredNorm() / static_cast<double>(X.cols());
  }

  void gd_step(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double lr) {
    Eigen::MatrixXd H;
    Eigen::MatrixXd F = forward(X, &H);
    Eigen::MatrixXd dF = (2.0 / static_cast<double>(X.cols())) * (F - Y);
    Eigen::MatrixXd dA = out_scale * dF * H.transpose();
    Eigen::MatrixXd dH = out_scale * (A.transpose() * dF);
    Eigen::MatrixXd dPre = (H.array() > 0.0).select(dH, 0.0);
    Eigen::MatrixXd dW = inv_sqrt_d * dPre * X.transpose();
    A -= lr * lr_mult * dA;
    W -= lr * lr_mult * dW;
  }
};

// Noised samples of a cloud with their exact score targets.
void draw_denoising_pairs(const GaussianCloud& cloud, int count, Rng& rng, Eigen::MatrixXd* X,
                          Eigen::MatrixXd* Y) {
  const int d = cloud.d();
  X->resize(d, count);
  Y->resize(d, count);
  for (int b = 0; b < count; ++b) {
    int j = static_cast<int>(rng.uniform_index(cloud.P()));
    Eigen::VectorXd x = cloud.points.col(j);
    for (int i = 0; i < d; ++i) x[i] += cloud.sigma * rng.normal();
    X->col(b) = x;
    Y->col(b) = mixture_score(x, cloud);
  }
}

}  // namespace

TrainTrace train_score_net(const GaussianCloud& cloud, const ScoreNetConfig& config, Rng& rng) {
  if (config.width < 1) throw std::invalid_argument("width must be positive");
  const int B = config.batch > 0 ? config.batch : cloud.P();
  if (B > cloud.P()) throw std::invalid_argument("batch larger than training set");

  Rng init_rng = rng.split(1);
  Rng data_rng = rng.split(2);
  Rng eval_rng = rng.split(3);
  ScoreNet net(cloud.d(), config, init_rng);

  // Fixed evaluation sets: noised training points, and noised points of a
  // held-out cloud drawn from the same prior.
  GaussianCloud test_cloud = sample_cloud(cloud.d(), config.n_test, cloud.sigma, eval_rng);
  Eigen::MatrixXd Xtr, Ytr, Xte, Yte;
  draw_denoising_pairs(cloud, config.eval_batch, eval_rng, &Xtr, &Ytr);
  draw_denoising_pairs(test_cloud, config.eval_batch, eval_rng, &Xte, &Yte);

  auto taus = checkpoint_schedule(config.step_cap, config.checkpoints_per_decade);
  TrainTrace trace;

  std::size_t next_ckpt = 0;
  Eigen::MatrixXd X, Y;
  for (std::int64_t step = 0; step <= config.step_cap; ++step) {
    if (next_ckpt < taus.size() && step == taus[next_ckpt]) {
      CheckpointRow row;
      row.tau = step;
      row.train_loss = net.loss(Xtr, Ytr);
      row.val_loss = net.loss(Xte, Yte);
      if (!std::isfinite(row.train_loss))
        throw std::runtime_error("score net diverged at step " + std::to_string(step));
      trace.checkpoints.push_back(row);
      ++next_ckpt;
      trace.tau_mem = detect_tau_mem(trace, config.detect_delta, config.detect_k);
      if (trace.tau_mem) break;  // divergence reached; later steps add nothing
    }
    if (step == config.step_cap) break;
    draw_denoising_pairs(cloud, B, data_rng, &X, &Y);
    net.gd_step(X, Y, config.lr);
  }
  return trace;
}

SweepResult sweep_tau_mem(SweepAxis axis, const std::vector<double>& grid,
                          const ScoreNetConfig& config, int d, int P, double sigma,
                          std::uint64_t seed) {
  if (grid.size() < 3) throw std::invalid_argument("sweep grid needs at least 3 points");
  SweepResult result;
  result.axis = axis;

  for (double value : grid) {
    int P_i = P;
    double sigma_i = sigma;
    ScoreNetConfig cfg = config;
    switch (axis) {
      case SweepAxis::P: P_i = static_cast<int>(value); break;
      case SweepAxis::sigma: sigma_i = value; break;
      case SweepAxis::batch: cfg.batch = static_cast<int>(value); break;
    }
    // Matched seeds: every grid point sees the same stream layout.
    Rng rng(seed);
    Rng cloud_rng = rng.split(10);
    GaussianCloud cloud = sample_cloud(d, P_i, sigma_i, cloud_rng);
    Rng train_rng = rng.split(20);
    TrainTrace trace = train_score_net(cloud, cfg, train_rng);
    result.points.push_back({value, trace.tau_mem});
  }

  std::vector<double> xs, ys;
  for (const auto& pt : result.points)
    if (pt.tau_mem) {
      xs.push_back(pt.axis_value);
      ys.push_back(static_cast<double>(*pt.tau_mem));
    }
  if (xs.size() >= 3) {
    PowerLawFit fit = fit_powerlaw(xs, ys);
    result.slope = fit.slope;
    result.intercept = fit.intercept;
    result.r2 = fit.r2;
  }
  return result;
}

std::string SweepResult::to_csv() const {
  std::ostringstream out;
  const char* name = axis == SweepAxis::P ? "P" : axis == SweepAxis::sigma ? "sigma" : "batch";
  out << name << ",tau_mem,censored\n";
  out.precision(17);
  for (const auto& pt : points) {
    out << pt.axis_value << ',' << (pt.tau_mem ? std::to_string(*pt.tau_mem) : "") << ','
        << (pt.tau_mem ? 0 : 1) << '\n';
  }
  if (slope) out << "# slope," << *slope << ",r2=" << *r2 << '\n';
  return out.str();
}

PowerLawFit fit_powerlaw(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 3)
    throw std::invalid_argument("fit_powerlaw: need at least 3 (x, y) pairs");
  const int n = static_cast<int>(xs.size());
  Eigen::VectorXd lx(n), ly(n);
  for (int i = 0; i < n; ++i) {
    if (xs[i] <= 0.0 || ys[i] <= 0.0)
      throw std::invalid_argument("fit_powerlaw: all values must be positive");
    lx[i] = std::log(xs[i]);
    ly[i] = std::log(ys[i]);
  }
  const double mx = lx.mean(), my = ly.mean();
  const double sxx = (lx.array() - mx).square().sum();
  if (sxx == 0.0) throw std::invalid_argument("fit_powerlaw: degenerate design (constant x)");
  const double sxy = ((lx.array() - mx) * (ly.array() - my)).sum();
  PowerLawFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  const double syy = (ly.array() - my).square().sum();
  fit.r2 = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return fit;
}

}  // namespace difflab
