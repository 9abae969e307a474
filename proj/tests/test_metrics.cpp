#include <doctest.h>

#include <cmath>

#include "difflab/metrics.hpp"
#include "difflab/rng.hpp"

using namespace difflab;

namespace {

Dataset make_dataset(std::initializer_list<TokenSequence> items) {
  Dataset ds;
  ds.items = items;
  return ds;
}

Eigen::VectorXd random_dist(int n, Rng& rng) {
  Eigen::VectorXd p(n);
  for (int i = 0; i < n; ++i) p[i] = -std::log(rng.uniform());
  return p / p.sum();
}

TrainTrace trace_from_vals(std::initializer_list<double> vals) {
  TrainTrace trace;
  std::int64_t tau = 1;
  for (double v : vals) {
    CheckpointRow row;
    row.tau = tau++;
    row.val_loss = v;
    trace.checkpoints.push_back(row);
  }
  return trace;
}

}  // namespace

TEST_CASE("nearest-neighbor Hamming metrics by hand") {
  Dataset train = make_dataset({{0, 0, 0, 0}, {1, 1, 1, 1}});
  // exact copy, one-off, and far
  std::vector<TokenSequence> gen = {{0, 0, 0, 0}, {1, 1, 1, 0}, {2, 2, 2, 2}};
  CHECK(mean_nn_hamming(gen, train) == doctest::Approx((0.0 + 0.25 + 1.0) / 3.0));
  CHECK(copy_fraction(gen, train) == doctest::Approx(1.0 / 3.0));
  CHECK(copy_fraction(gen, train, 0.25) == doctest::Approx(2.0 / 3.0));
  CHECK(copy_fraction({}, train) == 0.0);
  CHECK_THROWS_AS((copy_fraction(gen, Dataset{})), std::invalid_argument);
}

TEST_CASE("l2 ratio copy rule") {
  std::vector<Eigen::VectorXd> train = {Eigen::Vector2d(0, 0), Eigen::Vector2d(10, 0)};
  CHECK(l2_ratio_copy(Eigen::Vector2d(0.1, 0), train));        // ratio ~ 0.01
  CHECK(!l2_ratio_copy(Eigen::Vector2d(5, 0), train));         // equidistant
  CHECK(!l2_ratio_copy(Eigen::Vector2d(4, 0), train));         // ratio 2/3
  CHECK_THROWS_AS(l2_ratio_copy(Eigen::Vector2d(0, 0), {train[0]}), std::invalid_argument);
}

TEST_CASE("hellinger hand values") {
  Eigen::Vector2d p(1.0, 0.0), q(0.5, 0.5);
  CHECK(hellinger(p, p) == 0.0);
  CHECK(hellinger(p, q) == doctest::Approx(std::sqrt(1.0 - std::sqrt(0.5))));
  Eigen::Vector3d a(1, 0, 0), b(0, 1, 0);
  CHECK(hellinger(a, b) == doctest::Approx(1.0));
  Eigen::Vector2d bad(0.7, 0.7);
  CHECK_THROWS_AS(hellinger(p, bad), std::invalid_argument);
}

TEST_CASE("hellinger is a metric on random distributions") {
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    Eigen::VectorXd p = random_dist(5, rng), q = random_dist(5, rng), r = random_dist(5, rng);
    double pq = hellinger(p, q), qp = hellinger(q, p);
    CHECK(std::abs(pq - qp) < 1e-12);
    CHECK(pq >= 0.0);
    CHECK(pq <= 1.0 + 1e-12);
    CHECK(hellinger(p, r) <= pq + hellinger(q, r) + 1e-9);
  }
}

TEST_CASE("detect_tau_mem on the canonical bifurcation") {
  // running min 0.4 at tau 3; 0.44, 0.46, 0.48 all exceed it by >5%
  TrainTrace trace = trace_from_vals({1.0, 0.5, 0.4, 0.44, 0.46, 0.48});
  auto tau = detect_tau_mem(trace, 0.05, 3);
  REQUIRE(tau);
  CHECK(*tau == 4);
  // monotone curve never triggers
  CHECK(!detect_tau_mem(trace_from_vals({1.0, 0.8, 0.6, 0.5, 0.45, 0.44})));
  // a dip interrupting the run resets it
  CHECK(!detect_tau_mem(trace_from_vals({1.0, 0.4, 0.44, 0.39, 0.40, 0.40})));
  // too few checkpoints
  CHECK(!detect_tau_mem(trace_from_vals({1.0, 2.0})));
}

TEST_CASE("detect_tau_mem is monotone in delta") {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    TrainTrace trace;
    double v = 1.0;
    for (int i = 0; i < 20; ++i) {
      v *= 0.8 + 0.5 * rng.uniform();
      CheckpointRow row;
      row.tau = i + 1;
      row.val_loss = v;
      trace.checkpoints.push_back(row);
    }
    auto small = detect_tau_mem(trace, 0.02, 3);
    auto large = detect_tau_mem(trace, 0.2, 3);
    if (large) {
      REQUIRE(small);
      CHECK(*small <= *large);
    }
  }
}

TEST_CASE("detect_tau_mem_copies") {
  TrainTrace trace;
  for (int i = 0; i < 5; ++i) {
    CheckpointRow row;
    row.tau = 10 * (i + 1);
    row.copy_fraction = i * 0.03;
    trace.checkpoints.push_back(row);
  }
  auto tau = detect_tau_mem_copies(trace, 0.05);
  REQUIRE(tau);
  CHECK(*tau == 30);  // first copy_fraction > 0.05 is 0.06
  CHECK(!detect_tau_mem_copies(trace, 0.5));
}

TEST_CASE("classify_regime thresholds") {
  CheckpointRow row;
  row.error_fraction = {0.9, 0.9, 0.9};
  CHECK(classify_regime(row).str() == "pre-learning");
  row.error_fraction = {0.02, 0.03, 0.9};
  CHECK(classify_regime(row).str() == "partial-generalization(2)");
  row.error_fraction = {0.02, 0.03, 0.05};
  CHECK(classify_regime(row).str() == "full-generalization");
  row.copy_fraction = 0.8;
  CHECK(classify_regime(row).str() == "memorization");
  // a gap in the layer sequence counts only the consecutive prefix
  row.copy_fraction = 0.0;
  row.error_fraction = {0.9, 0.02, 0.02};
  CHECK(classify_regime(row).str() == "pre-learning");
}

TEST_CASE("checkpoint schedule is log-spaced and dense enough") {
  auto taus = checkpoint_schedule(100000, 8);
  CHECK(taus.front() == 0);
  CHECK(taus.back() == 100000);
  for (std::size_t i = 1; i < taus.size(); ++i) CHECK(taus[i] > taus[i - 1]);
  // at least 8 points inside every fully covered decade [10^k, 10^(k+1));
  // the first decade has only 7 because ceil collides on small integers
  for (std::int64_t lo = 1; lo * 10 <= 100000; lo *= 10) {
    int in_decade = 0;
    for (auto tau : taus) in_decade += tau >= lo && tau < 10 * lo;
    CHECK(in_decade >= (lo == 1 ? 7 : 8));
  }
  CHECK(checkpoint_schedule(0, 8) == std::vector<std::int64_t>{0});
  CHECK_THROWS_AS(checkpoint_schedule(-1, 8), std::invalid_argument);
}

TEST_CASE("rule statistics on exactly sampled data") {
  Grammar g = Grammar::build({3, 2, 2, 2, 31});
  Rng rng(12);
  std::vector<TokenSequence> gen;
  for (int i = 0; i < 2000; ++i) gen.push_back(g.sample_datum(rng));
  RuleStatistics st = rule_statistics(g, gen);
  CHECK(st.n_valid == 2000);
  CHECK(st.n_invalid == 0);
  const auto& p = g.params();
  // every string uses exactly internal_nodes() rules
  CHECK(st.mean_occurrence.sum() == doctest::Approx(p.internal_nodes()));
  // invalid strings are excluded, not crashed on
  std::vector<TokenSequence> junk = {{2, 2, 2, 2}};
  if (!g.parse(junk[0])) {
    RuleStatistics st2 = rule_statistics(g, junk);
    CHECK(st2.n_valid == 0);
    CHECK(st2.n_invalid == 1);
  }
}

TEST_CASE("error fractions: valid data scores zero in both modes") {
  Grammar g = Grammar::build({4, 2, 2, 2, 37});
  Rng rng(13);
  std::vector<TokenSequence> gen;
  for (int i = 0; i < 50; ++i) gen.push_back(g.sample_datum(rng));
  for (auto mode : {ErrorMode::strict, ErrorMode::fractional}) {
    auto err = error_fraction_per_layer(g, gen, mode);
    for (double e : err) CHECK(e == 0.0);
  }
  // garbage scores are in [0, 1] and strict >= fractional
  std::vector<TokenSequence> junk;
  for (int i = 0; i < 50; ++i) {
    TokenSequence x(4);
    for (auto& tok : x) tok = static_cast<int>(rng.uniform_index(4));
    junk.push_back(x);
  }
  auto strict = error_fraction_per_layer(g, junk, ErrorMode::strict);
  auto frac = error_fraction_per_layer(g, junk, ErrorMode::fractional);
  for (std::size_t l = 0; l < strict.size(); ++l) {
    CHECK(strict[l] >= frac[l] - 1e-12);
    CHECK(strict[l] <= 1.0);
    CHECK(frac[l] >= 0.0);
  }
}
