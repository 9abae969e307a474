#include "difflab/bp.hpp"

#include <cmath>
#include <stdexcept>

namespace difflab {

namespace {

// Upward pass shared by run_bp and posterior_sample. Returns normalized
// messages per level and the accumulated log scale.
struct UpwardResult {
  std::vector<std::vector<Eigen::VectorXd>> up;
  double log_scale = 0.0;
};

UpwardResult upward_pass(const Grammar& g, const LeafEvidence& evidence) {
  const auto& p = g.params();
  const int d = p.dimension();
  if (evidence.rows() != p.v || evidence.cols() != d)
    throw std::invalid_argument("evidence shape does not match grammar");

  UpwardResult r;
  r.up.resize(p.L + 1);
  r.up[0].resize(d);
  for (int k = 0; k < d; ++k) {
    Eigen::VectorXd e = evidence.col(k);
    if ((e.array() < 0).any()) throw std::invalid_argument("negative evidence entry");
    double z = e.sum();
    if (z <= 0.0) throw std::domain_error("impossible evidence: zero mass at a leaf");
    r.up[0][k] = e / z;
    r.log_scale += std::log(z);
  }

  int n = d;
  for (int level = 1; level <= p.L; ++level) {
    n /= p.s;
    r.up[level].resize(n);
    for (int j = 0; j < n; ++j) {
      Eigen::VectorXd mu = Eigen::VectorXd::Zero(p.v);
      for (int a = 0; a < p.v; ++a) {
        double acc = 0.0;
        for (int k = 0; k < p.m; ++k) {
          const auto& tuple = g.production(level, a, k);
          double prod = 1.0;
          for (int c = 0; c < p.s; ++c) prod *= r.up[level - 1][j * p.s + c][tuple[c]];
          acc += prod;
        }
        mu[a] = acc;
      }
      double z = mu.sum();
      if (z <= 0.0) throw std::domain_error("impossible evidence: contradictory observation");
      r.up[level][j] = mu / z;
      // Each of the m productions carries probability 1/m.
      r.log_scale += std::log(z) - std::log(static_cast<double>(p.m));
    }
  }
  return r;
}

}  // namespace

LeafEvidence leaf_evidence(const TokenSequence& xt, const TransitionKernel& kernel) {
  const int v = kernel.v;
  LeafEvidence e(v, static_cast<int>(xt.size()));
  for (std::size_t k = 0; k < xt.size(); ++k)
    for (int a = 0; a < v; ++a) e(a, static_cast<int>(k)) = kernel.prob(a, xt[k]);
  return e;
}

LeafEvidence one_hot_evidence(const TokenSequence& x0, int v) {
  LeafEvidence e = Eigen::MatrixXd::Zero(v, static_cast<int>(x0.size()));
  for (std::size_t k = 0; k < x0.size(); ++k) e(x0[k], static_cast<int>(k)) = 1.0;
  return e;
}

BeliefState run_bp(const Grammar& g, const LeafEvidence& evidence) {
  const auto& p = g.params();
  const int d = p.dimension();

  UpwardResult upr = upward_pass(g, evidence);
  BeliefState bs;
  bs.up = std::move(upr.up);

  // Uniform root prior, matching generation.
  bs.down.resize(p.L + 1);
  bs.down[p.L] = {Eigen::VectorXd::Constant(p.v, 1.0 / p.v)};
  bs.log_partition = upr.log_scale + std::log(bs.down[p.L][0].dot(bs.up[p.L][0]));

  int n = 1;
  for (int level = p.L; level >= 1; --level) {
    const int child_level = level - 1;
    bs.down[child_level].resize(n * p.s);
    for (int j = 0; j < n; ++j) {
      const Eigen::VectorXd& dn = bs.down[level][j];
      for (int c = 0; c < p.s; ++c) {
        Eigen::VectorXd msg = Eigen::VectorXd::Zero(p.v);
        for (int a = 0; a < p.v; ++a) {
          if (dn[a] == 0.0) continue;
          for (int k = 0; k < p.m; ++k) {
            const auto& tuple = g.production(level, a, k);
            double prod = dn[a];
            for (int c2 = 0; c2 < p.s; ++c2)
              if (c2 != c) prod *= bs.up[child_level][j * p.s + c2][tuple[c2]];
            msg[tuple[c]] += prod;
          }
        }
        double z = msg.sum();
        bs.down[child_level][j * p.s + c] = z > 0.0 ? (msg / z).eval() : msg;
      }
    }
    n *= p.s;
  }

  bs.leaf_marginals.resize(p.v, d);
  for (int k = 0; k < d; ++k) {
    Eigen::VectorXd b = bs.up[0][k].cwiseProduct(bs.down[0][k]);
    double z = b.sum();
    if (z <= 0.0) throw std::domain_error("impossible evidence: empty leaf belief");
    bs.leaf_marginals.col(k) = b / z;
  }
  return bs;
}

Eigen::MatrixXd brute_force_marginals(const Grammar& g, const LeafEvidence& evidence,
                                      std::uint64_t limit) {
  const auto& p = g.params();
  const int d = p.dimension();
  auto all = g.enumerate_all(limit);

  // The prior is uniform over generable strings, so only the evidence
  // weight matters.
  Eigen::MatrixXd marg = Eigen::MatrixXd::Zero(p.v, d);
  double total = 0.0;
  for (const auto& x : all) {
    double w = 1.0;
    for (int k = 0; k < d; ++k) w *= evidence(x[k], k);
    if (w == 0.0) continue;
    total += w;
    for (int k = 0; k < d; ++k) marg(x[k], k) += w;
  }
  if (total <= 0.0) throw std::domain_error("impossible evidence: no string has mass");
  return marg / total;
}

TokenSequence posterior_sample(const Grammar& g, const LeafEvidence& evidence, Rng& rng) {
  const auto& p = g.params();
  UpwardResult upr = upward_pass(g, evidence);

  auto sample_categorical = [&](const Eigen::VectorXd& w) {
    double z = w.sum();
    double u = rng.uniform() * z;
    double acc = 0.0;
    for (int i = 0; i < w.size(); ++i) {
      acc += w[i];
      if (u <= acc) return i;
    }
    return static_cast<int>(w.size()) - 1;
  };

  // Root from prior * upward message, then productions conditioned on the
  // sampled ancestors; children symbols follow from the chosen production.
  std::vector<std::vector<int>> symbols(p.L + 1);
  symbols[p.L] = {sample_categorical(upr.up[p.L][0])};
  int n = 1;
  for (int level = p.L; level >= 1; --level) {
    symbols[level - 1].resize(n * p.s);
    for (int j = 0; j < n; ++j) {
      const int a = symbols[level][j];
      Eigen::VectorXd w(p.m);
      for (int k = 0; k < p.m; ++k) {
        const auto& tuple = g.production(level, a, k);
        double prod = 1.0;
        for (int c = 0; c < p.s; ++c) prod *= upr.up[level - 1][j * p.s + c][tuple[c]];
        w[k] = prod;
      }
      const auto& tuple = g.production(level, a, sample_categorical(w));
      for (int c = 0; c < p.s; ++c) symbols[level - 1][j * p.s + c] = tuple[c];
    }
    n *= p.s;
  }
  return symbols[0];
}

}  // namespace difflab
