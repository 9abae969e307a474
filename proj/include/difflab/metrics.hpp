#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "difflab/grammar.hpp"

namespace difflab {

/// One training checkpoint's observables.
struct CheckpointRow {
  std::int64_t tau = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double copy_fraction = 0.0;
  double mean_nn_hamming = 0.0;
  std::vector<double> error_fraction;  // one entry per grammar layer
};

struct TrainTrace {
  std::vector<CheckpointRow> checkpoints;
  std::optional<std::int64_t> tau_mem;
};

/// Mean over generations of the normalized Hamming distance to the
/// nearest training string.
double mean_nn_hamming(const std::vector<TokenSequence>& generated, const Dataset& trainset);

/// Fraction of generations whose nearest-neighbor normalized Hamming
/// distance is <= theta. theta = 0 counts exact copies.
double copy_fraction(const std::vector<TokenSequence>& generated, const Dataset& trainset,
                     double theta = 0.0);

/// Two-nearest-neighbor l2 ratio rule for real-vector data: copy iff
/// dist(x, nearest) / dist(x, second nearest) < 1/3.
bool l2_ratio_copy(const Eigen::VectorXd& x, const std::vector<Eigen::VectorXd>& trainset,
                   double ratio_threshold = 1.0 / 3.0);

/// Entry l-1 = fraction of generated strings violating the rules at
/// layer l (strict) or mean fraction of invalid s-blocks (fractional).
enum class ErrorMode { strict, fractional };
std::vector<double> error_fraction_per_layer(const Grammar& grammar,
                                             const std::vector<TokenSequence>& generated,
                                             ErrorMode mode = ErrorMode::strict);

/// H(p, q) = sqrt(sum (sqrt(p_i) - sqrt(q_i))^2 / 2), in [0, 1].
double hellinger(const Eigen::VectorXd& p, const Eigen::VectorXd& q);

/// Per-rule usage statistics of fully valid generations.
struct RuleStatistics {
  Eigen::VectorXd mean_occurrence;  // length m*v*L, slot-normalized counts
  Eigen::MatrixXd covariance;       // centered cooccurrence covariance
  std::size_t n_valid = 0;
  std::size_t n_invalid = 0;        // excluded from the statistics
};
RuleStatistics rule_statistics(const Grammar& grammar,
                               const std::vector<TokenSequence>& generated);

/// Log-spaced evaluation steps: {0, 1, ...} with at least `per_decade`
/// points per decade of tau, always ending at `cap`.
std::vector<std::int64_t> checkpoint_schedule(std::int64_t cap, int per_decade);

/// First checkpoint where val_loss exceeds its running minimum by
/// relative margin delta for k consecutive checkpoints.
std::optional<std::int64_t> detect_tau_mem(const TrainTrace& trace, double delta = 0.05,
                                           int k = 3);

/// Copy-based alternative: first checkpoint with copy_fraction > threshold.
std::optional<std::int64_t> detect_tau_mem_copies(const TrainTrace& trace,
                                                  double threshold = 0.05);

struct RegimeLabel {
  enum Kind { pre_learning, partial_generalization, full_generalization, memorization };
  Kind kind = pre_learning;
  int layer = 0;  // deepest learned layer, for partial_generalization
  std::string str() const;
};

RegimeLabel classify_regime(const CheckpointRow& row, double c_mem = 0.5, double eps = 0.15);

}  // namespace difflab
