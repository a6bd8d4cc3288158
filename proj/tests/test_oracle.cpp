#include <cmath>

#include "doctest.h"
#include "mselab/error.hpp"
#include "mselab/gridworld.hpp"
#include "mselab/oracle.hpp"
#include "test_support.hpp"

using namespace mselab;
using mselab::testing::random_mdp;
using mselab::testing::random_policy;
using mselab::testing::self_loop;
using mselab::testing::two_cycle;

namespace {

bool within_stderr(const oracle::McEstimate& est, const Vector& exact, double k) {
  for (Eigen::Index i = 0; i < exact.size(); ++i) {
    const double err = std::abs(est.mean[i] - exact[i]);
    if (est.stderr_[i] == 0.0) {
      if (err > 1e-12) return false;
    } else if (err > k * est.stderr_[i]) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("mc_marginal") {
  const auto mdp = random_mdp(2, 6, 2, 0.9);
  const auto policy = random_policy(2, 6, 2);
  Vector one_start = Vector::Zero(6);
  one_start[4] = 1.0;
  const auto t0 = oracle::mc_marginal(mdp.with_start(one_start), policy, 0, 1000, 1);
  CHECK(t0.mean == one_start);

  const auto cyc = oracle::mc_marginal(two_cycle(0.9), TabularSoftmaxPolicy::uniform(2, 1), 2, 500, 1);
  CHECK(cyc.mean[0] == 1.0);
  CHECK(cyc.mean[1] == 0.0);

  const auto est = oracle::mc_marginal(mdp, policy, 3, 20'000, 9);
  CHECK(est.mean.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(est.episodes == 20'000);

  CHECK_THROWS_AS(oracle::mc_marginal(mdp, policy, 3, 0, 9), DomainError);
}

TEST_CASE("FrozenLake marginal agrees with forward recursion") {
  const auto fl = frozen_lake(4, true).mdp;
  const auto uniform = TabularSoftmaxPolicy::uniform(16, 4);
  const auto est = oracle::mc_marginal(fl, uniform, 5, 1'000'000, 2718);
  CHECK(within_stderr(est, marginal_state_distribution(fl, uniform, 5).values(), 3.0));
}

TEST_CASE("mc_discounted_occupancy") {
  const auto one = oracle::mc_discounted_occupancy(self_loop(0.0, 0.9), TabularSoftmaxPolicy::uniform(1, 1), 1000, 3);
  CHECK(one.mean[0] == 1.0);

  const auto cyc =
      oracle::mc_discounted_occupancy(two_cycle(0.5), TabularSoftmaxPolicy::uniform(2, 1), 200'000, 4);
  Vector expected(2);
  expected << 2.0 / 3.0, 1.0 / 3.0;
  CHECK(within_stderr(cyc, expected, 3.0));
  CHECK(cyc.dropped == 0);

  const auto fl = frozen_lake(4, true, 0.95).mdp;
  const auto policy = random_policy(6, 16, 4, 0.5);
  const auto est = oracle::mc_discounted_occupancy(fl, policy, 1'000'000, 5);
  CHECK(within_stderr(est, normalize_occupancy(discounted_weighting(fl, policy)).values(), 3.0));
}

TEST_CASE("standard errors shrink like 1/sqrt(n)") {
  const auto fl = frozen_lake(4, true, 0.9).mdp;
  const auto uniform = TabularSoftmaxPolicy::uniform(16, 4);
  double ratio_sum = 0.0;
  constexpr int kRepeats = 5;
  for (int r = 0; r < kRepeats; ++r) {
    const auto small = oracle::mc_discounted_occupancy(fl, uniform, 20'000, 100 + r);
    const auto large = oracle::mc_discounted_occupancy(fl, uniform, 40'000, 200 + r);
    ratio_sum += large.stderr_.mean() / small.stderr_.mean();
  }
  const double ratio = ratio_sum / kRepeats;
  CHECK(ratio >= 0.6);
  CHECK(ratio <= 0.8);
}

TEST_CASE("seeded and shard-merged estimates are reproducible") {
  const auto mdp = random_mdp(12, 8, 3, 0.9);
  const auto policy = random_policy(12, 8, 3);
  const auto a = oracle::mc_discounted_occupancy(mdp, policy, 50'000, 42);
  const auto b = oracle::mc_discounted_occupancy(mdp, policy, 50'000, 42);
  const auto threaded = oracle::mc_discounted_occupancy(mdp, policy, 50'000, 42, {.shards = 8, .workers = 4});
  CHECK(a.mean == b.mean);
  CHECK(a.mean == threaded.mean);
  const auto other = oracle::mc_discounted_occupancy(mdp, policy, 50'000, 43);
  CHECK(a.mean != other.mean);
}

TEST_CASE("fd_gradient") {
  Vector w(3);
  w << 1.5, -2.0, 0.25;
  const auto linear = [&](const Vector& x) { return w.dot(x) + 4.0; };
  Vector x0(3);
  x0 << 0.3, 0.1, -7.0;
  CHECK((oracle::fd_gradient(linear, x0) - w).cwiseAbs().maxCoeff() < 1e-9);

  Matrix a(3, 3);
  a << 2, 1, 0, 1, 3, -1, 0, -1, 4;
  const auto quadratic = [&](const Vector& x) { return 0.5 * x.dot(a * x) + w.dot(x); };
  CHECK((oracle::fd_gradient(quadratic, x0, 1e-3) - (a * x0 + w)).cwiseAbs().maxCoeff() < 1e-9);

  const auto blows_up = [](const Vector& x) { return x[1] > 0.5 ? INFINITY : 0.0; };
  Vector edge(3);
  edge << 0.0, 0.5, 0.0;
  try {
    (void)oracle::fd_gradient(blows_up, edge, 1e-3);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("coordinate 1") != std::string::npos);
  }
}

TEST_CASE("naive return and GAE sums") {
  const auto g = oracle::naive_returns({1.0, 1.0, 1.0}, 0.5);
  CHECK(g[0] == 1.75);
  CHECK(g[1] == 1.5);
  CHECK(g[2] == 1.0);
  const auto adv = oracle::naive_gae({0.0, 1.0}, {0.5, 0.2, 0.0}, 1.0, 0.0);
  CHECK(adv[0] == doctest::Approx(-0.3));
  CHECK(adv[1] == doctest::Approx(0.8));
  CHECK_THROWS_AS(oracle::naive_gae({0.0}, {0.0}, 1.0, 1.0), DimensionError);
}
