#include <doctest.h>

#include <cmath>

#include "difflab/noise.hpp"

using namespace difflab;

TEST_CASE("schedule basics") {
  for (auto sched : {make_linear_schedule(100), make_cosine_schedule(100),
                     make_linear_schedule_auto(100)}) {
    CHECK(sched.alpha_bar[0] == 1.0);
    for (int t = 1; t <= sched.T; ++t) {
      CHECK(sched.beta(t) > 0.0);
      CHECK(sched.beta(t) < 1.0);
      CHECK(sched.abar(t) < sched.abar(t - 1));
      CHECK(sched.abar(t) == doctest::Approx(sched.abar(t - 1) * (1.0 - sched.beta(t))));
    }
  }
}

TEST_CASE("auto schedule reaches stationarity at any horizon") {
  for (int T : {8, 32, 100, 1000}) {
    NoiseSchedule sched = make_linear_schedule_auto(T, 1e-4);
    CHECK(sched.abar(T) < 1e-4);
    // not absurdly far below either (the search is tight to within 2x)
    CHECK(sched.abar(T) > 1e-6);
  }
}

TEST_CASE("kernel rows are stochastic and match the dense form") {
  for (auto kind : {KernelKind::uniform, KernelKind::absorbing}) {
    TransitionKernel k{kind, 5, 0.73};
    Eigen::MatrixXd Q = k.dense();
    CHECK(Q.rows() == k.state_count());
    for (int i = 0; i < k.state_count(); ++i) {
      double row = 0.0;
      for (int j = 0; j < k.state_count(); ++j) {
        CHECK(Q(i, j) == doctest::Approx(k.prob(i, j)));
        CHECK(k.prob(i, j) >= 0.0);
        row += k.prob(i, j);
      }
      CHECK(row == doctest::Approx(1.0));
    }
  }
  // absorbing: the mask state never leaves
  TransitionKernel a{KernelKind::absorbing, 4, 0.5};
  CHECK(a.prob(a.mask_state(), a.mask_state()) == 1.0);
}

TEST_CASE("cumulative kernel equals the iterated dense product") {
  NoiseSchedule sched = make_linear_schedule(50, 1e-3, 0.08);
  for (auto kind : {KernelKind::uniform, KernelKind::absorbing}) {
    const int v = 6;
    Eigen::MatrixXd prod =
        Eigen::MatrixXd::Identity(kind == KernelKind::absorbing ? v + 1 : v,
                                  kind == KernelKind::absorbing ? v + 1 : v);
    for (int t = 1; t <= sched.T; ++t) {
      prod = prod * step_kernel(kind, v, sched.beta(t)).dense();
      Eigen::MatrixXd cum = cumulative_kernel(kind, v, sched, t).dense();
      CHECK((cum - prod).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("step_posterior hand value at beta = abar_prev = 1/2") {
  // uniform kind, v = 2, x_t = x_0 = 0, t = 2:
  //   numerator_j = Q_2[j, 0] * Qbar_1[0, j]
  //   j=0: (0.5 + 0.25)(0.5 + 0.25) = 0.5625;  j=1: 0.25 * 0.25 = 0.0625
  //   posterior = (0.9, 0.1)
  NoiseSchedule sched;
  sched.T = 2;
  sched.betas = Eigen::Vector2d(0.5, 0.5);
  sched.alpha_bar = Eigen::Vector3d(1.0, 0.5, 0.25);
  Eigen::VectorXd post = step_posterior(KernelKind::uniform, 2, 0, 0, sched, 2);
  CHECK(post[0] == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(post[1] == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("step_posterior matches dense Bayes for every feasible pair") {
  NoiseSchedule sched = make_linear_schedule(10, 0.02, 0.3);
  const int v = 4;
  for (auto kind : {KernelKind::uniform, KernelKind::absorbing}) {
    const int states = kind == KernelKind::absorbing ? v + 1 : v;
    for (int t = 2; t <= sched.T; ++t) {
      Eigen::MatrixXd Qt = step_kernel(kind, v, sched.beta(t)).dense();
      Eigen::MatrixXd Qprev = cumulative_kernel(kind, v, sched, t - 1).dense();
      for (int x0 = 0; x0 < v; ++x0) {
        for (int xt = 0; xt < states; ++xt) {
          Eigen::VectorXd num(states);
          for (int j = 0; j < states; ++j) num[j] = Qt(j, xt) * Qprev(x0, j);
          if (num.sum() <= 0.0) {
            CHECK_THROWS_AS(step_posterior(kind, v, xt, x0, sched, t), std::domain_error);
            continue;
          }
          Eigen::VectorXd expect = num / num.sum();
          Eigen::VectorXd got = step_posterior(kind, v, xt, x0, sched, t);
          CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-12);
          CHECK(got.sum() == doctest::Approx(1.0));
        }
      }
    }
  }
}

TEST_CASE("apply_forward is deterministic and keeps tokens in range") {
  NoiseSchedule sched = make_linear_schedule_auto(20);
  TokenSequence x0 = {0, 1, 2, 3, 0, 1, 2, 3};
  for (auto kind : {KernelKind::uniform, KernelKind::absorbing}) {
    TransitionKernel cum = cumulative_kernel(kind, 4, sched, 10);
    Rng r1(99), r2(99);
    TokenSequence a = apply_forward(x0, cum, r1);
    TokenSequence b = apply_forward(x0, cum, r2);
    CHECK(a == b);
    for (int tok : a) {
      CHECK(tok >= 0);
      CHECK(tok < cum.state_count());
    }
  }
}

TEST_CASE("full noise forgets the input") {
  // at alpha_bar ~ 0 the uniform kernel's rows are near-uniform
  TransitionKernel k{KernelKind::uniform, 8, 1e-6};
  for (int j = 0; j < 8; ++j) CHECK(k.prob(0, j) == doctest::Approx(0.125).epsilon(1e-4));
  // and the absorbing kernel is almost surely masked
  TransitionKernel a{KernelKind::absorbing, 8, 1e-6};
  CHECK(a.prob(0, a.mask_state()) == doctest::Approx(1.0).epsilon(1e-5));
}
