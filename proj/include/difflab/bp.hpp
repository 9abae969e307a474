#pragma once

#include <Eigen/Dense>
#include <vector>

#include "difflab/grammar.hpp"
#include "difflab/noise.hpp"

namespace difflab {

/// Per-leaf likelihoods e_k(a) = q(x_t,k | x_0,k = a): a v x d matrix,
/// one column per leaf.
using LeafEvidence = Eigen::MatrixXd;

LeafEvidence leaf_evidence(const TokenSequence& xt, const TransitionKernel& kernel);

/// Evidence that pins every leaf to the observed token (clean data).
LeafEvidence one_hot_evidence(const TokenSequence& x0, int v);

/// Messages and marginals of one exact sum-product pass over the RHM
/// tree. Messages are normalized to sum 1; the dropped scales accumulate
/// into log_partition.
struct BeliefState {
  // up[l][j] / down[l][j]: messages at node j of level l (l = 0 leaves).
  std::vector<std::vector<Eigen::VectorXd>> up;
  std::vector<std::vector<Eigen::VectorXd>> down;
  Eigen::MatrixXd leaf_marginals;  // v x d, columns normalized
  double log_partition = 0.0;
};

/// Exact conditional leaf marginals given the evidence — the discrete
/// score E[x_0 | x_t] of the RHM. Throws std::domain_error on evidence
/// with zero total mass.
BeliefState run_bp(const Grammar& grammar, const LeafEvidence& evidence);

/// Enumeration oracle for run_bp; refuses grammars above `limit` strings.
Eigen::MatrixXd brute_force_marginals(const Grammar& grammar, const LeafEvidence& evidence,
                                      std::uint64_t limit = 100000);

/// One exact draw from the posterior over x_0 given the evidence:
/// ancestral top-down sampling with upward messages, so the joint (not
/// just the marginals) is correct.
TokenSequence posterior_sample(const Grammar& grammar, const LeafEvidence& evidence, Rng& rng);

}  // namespace difflab
