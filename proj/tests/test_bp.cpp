#include <doctest.h>

#include <cmath>
#include <map>

#include "difflab/bp.hpp"

using namespace difflab;

namespace {

double max_tv(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  double worst = 0.0;
  for (int k = 0; k < a.cols(); ++k)
    worst = std::max(worst, 0.5 * (a.col(k) - b.col(k)).lpNorm<1>());
  return worst;
}

}  // namespace

TEST_CASE("two-string grammar: marginals by hand") {
  // v=2, m=1, L=2, s=2: exactly two generable strings, one per root.
  Grammar g = Grammar::build({2, 1, 2, 2, 3});
  auto all = g.enumerate_all();
  REQUIRE(all.size() == 2);

  // pin all leaves to string 0: posterior is that string exactly
  LeafEvidence e = one_hot_evidence(all[0], 2);
  BeliefState bs = run_bp(g, e);
  CHECK(max_tv(bs.leaf_marginals, one_hot_evidence(all[0], 2)) < 1e-12);

  // uninformative evidence: posterior is the 50/50 mixture of both strings
  LeafEvidence flat = Eigen::MatrixXd::Constant(2, 4, 1.0);
  Eigen::MatrixXd expect = Eigen::MatrixXd::Zero(2, 4);
  for (const auto& x : all)
    for (int k = 0; k < 4; ++k) expect(x[k], k) += 0.5;
  CHECK(max_tv(run_bp(g, flat).leaf_marginals, expect) < 1e-12);
}

TEST_CASE("BP equals enumeration across noise levels and random evidence") {
  Grammar g = Grammar::build({3, 2, 2, 2, 7});
  NoiseSchedule sched = make_linear_schedule_auto(10);
  Rng rng(5);
  double worst = 0.0;
  for (int t = 1; t <= 10; ++t) {
    TransitionKernel cum = cumulative_kernel(KernelKind::uniform, 3, sched, t);
    for (int i = 0; i < 20; ++i) {
      TokenSequence x0 = g.sample_datum(rng);
      TokenSequence xt = apply_forward(x0, cum, rng);
      LeafEvidence e = leaf_evidence(xt, cum);
      worst = std::max(worst, max_tv(run_bp(g, e).leaf_marginals,
                                     brute_force_marginals(g, e)));
    }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("BP equals enumeration with absorbing corruption") {
  Grammar g = Grammar::build({4, 2, 2, 2, 11});
  NoiseSchedule sched = make_linear_schedule_auto(8);
  Rng rng(6);
  double worst = 0.0;
  for (int t = 1; t <= 8; ++t) {
    TransitionKernel cum = cumulative_kernel(KernelKind::absorbing, 4, sched, t);
    for (int i = 0; i < 10; ++i) {
      TokenSequence xt = apply_forward(g.sample_datum(rng), cum, rng);
      LeafEvidence e = leaf_evidence(xt, cum);
      worst = std::max(worst, max_tv(run_bp(g, e).leaf_marginals,
                                     brute_force_marginals(g, e)));
    }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("log partition matches the enumerated total mass") {
  Grammar g = Grammar::build({3, 2, 2, 2, 19});
  auto all = g.enumerate_all();
  const auto& p = g.params();
  const double prior = 1.0 / (p.v * std::pow(p.m, p.internal_nodes()));
  Rng rng(9);
  NoiseSchedule sched = make_linear_schedule_auto(6);
  for (int t = 1; t <= 6; ++t) {
    TransitionKernel cum = cumulative_kernel(KernelKind::uniform, 3, sched, t);
    TokenSequence xt = apply_forward(g.sample_datum(rng), cum, rng);
    LeafEvidence e = leaf_evidence(xt, cum);
    double mass = 0.0;
    for (const auto& x : all) {
      double w = prior;
      for (int k = 0; k < 4; ++k) w *= e(x[k], k);
      mass += w;
    }
    CHECK(run_bp(g, e).log_partition == doctest::Approx(std::log(mass)).epsilon(1e-10));
  }
}

TEST_CASE("impossible evidence throws") {
  Grammar g = Grammar::build({2, 1, 2, 2, 3});
  auto all = g.enumerate_all();
  // zero mass at a leaf
  LeafEvidence dead = Eigen::MatrixXd::Zero(2, 4);
  CHECK_THROWS_AS(run_bp(g, dead), std::domain_error);
  // contradictory one-hots: leaf 0 from string 0 where it differs from
  // string 1, remaining leaves from string 1
  if (all[0][0] != all[1][0]) {
    LeafEvidence mix = one_hot_evidence(all[1], 2);
    mix.col(0) = one_hot_evidence(all[0], 2).col(0);
    CHECK_THROWS_AS(run_bp(g, mix), std::domain_error);
    CHECK_THROWS_AS(brute_force_marginals(g, mix), std::domain_error);
  }
  // negative entries rejected
  LeafEvidence neg = Eigen::MatrixXd::Constant(2, 4, 1.0);
  neg(0, 0) = -0.1;
  CHECK_THROWS_AS(run_bp(g, neg), std::invalid_argument);
}

TEST_CASE("posterior_sample recovers a pinned string and stays on-grammar") {
  Grammar g = Grammar::build({3, 2, 2, 2, 23});
  Rng rng(14);
  TokenSequence x0 = g.sample_datum(rng);
  for (int i = 0; i < 10; ++i)
    CHECK(posterior_sample(g, one_hot_evidence(x0, 3), rng) == x0);
  // under any evidence, samples are always fully grammatical
  NoiseSchedule sched = make_linear_schedule_auto(6);
  TransitionKernel cum = cumulative_kernel(KernelKind::uniform, 3, sched, 4);
  for (int i = 0; i < 100; ++i) {
    TokenSequence xt = apply_forward(g.sample_datum(rng), cum, rng);
    TokenSequence draw = posterior_sample(g, leaf_evidence(xt, cum), rng);
    CHECK(g.parse(draw).has_value());
  }
}

TEST_CASE("posterior_sample frequencies match BP marginals") {
  Grammar g = Grammar::build({3, 2, 2, 2, 29});
  Rng rng(15);
  NoiseSchedule sched = make_linear_schedule_auto(6);
  TransitionKernel cum = cumulative_kernel(KernelKind::uniform, 3, sched, 5);
  TokenSequence xt = apply_forward(g.sample_datum(rng), cum, rng);
  LeafEvidence e = leaf_evidence(xt, cum);
  Eigen::MatrixXd marg = run_bp(g, e).leaf_marginals;

  const int n = 20000;
  Eigen::MatrixXd freq = Eigen::MatrixXd::Zero(3, 4);
  for (int i = 0; i < n; ++i) {
    TokenSequence draw = posterior_sample(g, e, rng);
    for (int k = 0; k < 4; ++k) freq(draw[k], k) += 1.0 / n;
  }
  // 5 sigma multinomial band per entry
  for (int k = 0; k < 4; ++k)
    for (int a = 0; a < 3; ++a) {
      double se = std::sqrt(marg(a, k) * (1.0 - marg(a, k)) / n);
      CHECK(std::abs(freq(a, k) - marg(a, k)) < 5.0 * se + 1e-9);
    }
}
