#include "difflab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace difflab {

namespace {

double nn_hamming(const TokenSequence& x, const Dataset& trainset) {
  std::size_t best = x.size() + 1;
  for (const auto& y : trainset.items) {
    std::size_t h = 0;
    for (std::size_t i = 0; i < x.size() && h < best; ++i) h += x[i] != y[i];
    best = std::min(best, h);
    if (best == 0) break;
  }
  return static_cast<double>(best) / static_cast<double>(x.size());
}

}  // namespace

double mean_nn_hamming(const std::vector<TokenSequence>& generated, const Dataset& trainset) {
  if (trainset.items.empty()) throw std::invalid_argument("empty training set");
  if (generated.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& x : generated) acc += nn_hamming(x, trainset);
  return acc / static_cast<double>(generated.size());
}

double copy_fraction(const std::vector<TokenSequence>& generated, const Dataset& trainset,
                     double theta) {
  if (trainset.items.empty()) throw std::invalid_argument("empty training set");
  if (theta < 0.0 || theta >= 1.0) throw std::invalid_argument("theta outside [0, 1)");
  if (generated.empty()) return 0.0;
  std::size_t copies = 0;
  for (const auto& x : generated) copies += nn_hamming(x, trainset) <= theta;
  return static_cast<double>(copies) / static_cast<double>(generated.size());
}

bool l2_ratio_copy(const Eigen::VectorXd& x, const std::vector<Eigen::VectorXd>& trainset,
                   double ratio_threshold) {
  if (trainset.size() < 2) throw std::invalid_argument("need at least 2 training points");
  double d1 = std::numeric_limits<double>::infinity();
  double d2 = std::numeric_limits<double>::infinity();
  for (const auto& y : trainset) {
    double d = (x - y).norm();
    if (d < d1) {
      d2 = d1;
      d1 = d;
    } else if (d < d2) {
      d2 = d;
    }
  }
  if (d2 == 0.0) return d1 == 0.0 ? false : true;  // coincident neighbors
  return d1 / d2 < ratio_threshold;
}

std::vector<double> error_fraction_per_layer(const Grammar& grammar,
                                             const std::vector<TokenSequence>& generated,
                                             ErrorMode mode) {
  const int L = grammar.params().L;
  std::vector<double> err(L, 0.0);
  if (generated.empty()) return err;
  for (const auto& x : generated) {
    if (mode == ErrorMode::strict) {
      auto valid = grammar.validate_layers(x);
      for (int l = 0; l < L; ++l) err[l] += valid[l] ? 0.0 : 1.0;
    } else {
      auto frac = grammar.block_validity_fraction(x);
      for (int l = 0; l < L; ++l) err[l] += 1.0 - frac[l];
    }
  }
  for (auto& e : err) e /= static_cast<double>(generated.size());
  return err;
}

double hellinger(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  if (p.size() != q.size()) throw std::invalid_argument("hellinger: size mismatch");
  if (std::abs(p.sum() - 1.0) > 1e-9 || std::abs(q.sum() - 1.0) > 1e-9)
    throw std::invalid_argument("hellinger: inputs must be normalized");
  double acc = 0.0;
  for (int i = 0; i < p.size(); ++i) {
    double t = std::sqrt(p[i]) - std::sqrt(q[i]);
    acc += t * t;
  }
  return std::sqrt(0.5 * acc);
}

RuleStatistics rule_statistics(const Grammar& grammar,
                               const std::vector<TokenSequence>& generated) {
  const auto& p = grammar.params();
  const int n_rules = p.L * p.v * p.m;
  RuleStatistics st;
  st.mean_occurrence = Eigen::VectorXd::Zero(n_rules);
  st.covariance = Eigen::MatrixXd::Zero(n_rules, n_rules);

  std::vector<Eigen::VectorXd> counts;
  for (const auto& x : generated) {
    auto tree = grammar.parse(x);
    if (!tree) {
      ++st.n_invalid;
      continue;
    }
    Eigen::VectorXd c = Eigen::VectorXd::Zero(n_rules);
    for (int level = 1; level <= p.L; ++level) {
      const auto& parents = tree->levels[level];
      const auto& children = tree->levels[level - 1];
      for (std::size_t j = 0; j < parents.size(); ++j) {
        const int a = parents[j];
        // Identify which synonym was used at this slot.
        int used = -1;
        for (int k = 0; k < p.m; ++k) {
          const auto& tuple = grammar.production(level, a, k);
          if (std::equal(tuple.begin(), tuple.end(), children.begin() + j * p.s)) {
            used = k;
            break;
          }
        }
        c[((level - 1) * p.v + a) * p.m + used] += 1.0;
      }
    }
    counts.push_back(std::move(c));
  }
  st.n_valid = counts.size();
  if (counts.empty()) return st;

  for (const auto& c : counts) st.mean_occurrence += c;
  st.mean_occurrence /= static_cast<double>(counts.size());
  for (const auto& c : counts) {
    Eigen::VectorXd dev = c - st.mean_occurrence;
    st.covariance += dev * dev.transpose();
  }
  st.covariance /= static_cast<double>(counts.size());
  return st;
}

std::vector<std::int64_t> checkpoint_schedule(std::int64_t cap, int per_decade) {
  if (cap < 0 || per_decade < 1) throw std::invalid_argument("bad checkpoint schedule");
  std::vector<std::int64_t> taus = {0};
  for (int i = 0;; ++i) {
    auto tau = static_cast<std::int64_t>(
        std::ceil(std::pow(10.0, static_cast<double>(i) / per_decade)));
    if (tau > cap) break;
    if (tau != taus.back()) taus.push_back(tau);
  }
  if (taus.back() != cap) taus.push_back(cap);
  return taus;
}

std::optional<std::int64_t> detect_tau_mem(const TrainTrace& trace, double delta, int k) {
  if (static_cast<int>(trace.checkpoints.size()) < k) return std::nullopt;
  double running_min = std::numeric_limits<double>::infinity();
  int run = 0;
  for (std::size_t i = 0; i < trace.checkpoints.size(); ++i) {
    double val = trace.checkpoints[i].val_loss;
    if (val > running_min * (1.0 + delta)) {
      if (++run == k) return trace.checkpoints[i - k + 1].tau;
    } else {
      run = 0;
      running_min = std::min(running_min, val);
    }
  }
  return std::nullopt;
}

std::optional<std::int64_t> detect_tau_mem_copies(const TrainTrace& trace, double threshold) {
  for (const auto& row : trace.checkpoints)
    if (row.copy_fraction > threshold) return row.tau;
  return std::nullopt;
}

std::string RegimeLabel::str() const {
  switch (kind) {
    case pre_learning: return "pre-learning";
    case partial_generalization: return "partial-generalization(" + std::to_string(layer) + ")";
    case full_generalization: return "full-generalization";
    case memorization: return "memorization";
  }
  return "?";
}

RegimeLabel classify_regime(const CheckpointRow& row, double c_mem, double eps) {
  RegimeLabel label;
  if (row.copy_fraction > c_mem) {
    label.kind = RegimeLabel::memorization;
    return label;
  }
  int learned = 0;
  for (double e : row.error_fraction) {
    if (e < eps)
      ++learned;
    else
      break;
  }
  const int L = static_cast<int>(row.error_fraction.size());
  if (learned == L) {
    label.kind = RegimeLabel::full_generalization;
  } else if (learned > 0) {
    label.kind = RegimeLabel::partial_generalization;
    label.layer = learned;
  } else {
    label.kind = RegimeLabel::pre_learning;
  }
  return label;
}

}  // namespace difflab
