#include <Eigen/LU>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "mselab/error.hpp"
#include "mselab/gridworld.hpp"
#include "mselab/mdp.hpp"
#include "mselab/oracle.hpp"
#include "test_support.hpp"

using namespace mselab;
using mselab::testing::random_mdp;
using mselab::testing::random_policy;
using mselab::testing::self_loop;
using mselab::testing::two_cycle;

namespace {

TabularMDP frozen4(double gamma = 0.99) { return frozen_lake(4, true, gamma).mdp; }

}  // namespace

TEST_CASE("construction rejects invalid MDPs") {
  CHECK_THROWS_AS(TabularMDP(1, 1, {0.5}, Matrix::Zero(1, 1), Vector::Ones(1), 0.9), DomainError);
  CHECK_THROWS_AS(TabularMDP(1, 1, {1.0}, Matrix::Zero(1, 1), Vector::Ones(1), 1.0), DomainError);
  CHECK_THROWS_AS(TabularMDP(1, 1, {1.0}, Matrix::Zero(1, 1), Vector::Constant(1, 0.5), 0.9), DomainError);
  CHECK_THROWS_AS(TabularMDP(2, 1, {1.0, 0.0}, Matrix::Zero(2, 1), Vector::Ones(2) / 2, 0.9), DimensionError);
  CHECK_THROWS_AS(TabularMDP(2, 1, {1.5, -0.5, 0.0, 1.0}, Matrix::Zero(2, 1), Vector::Ones(2) / 2, 0.9),
                  DomainError);
}

TEST_CASE("softmax policy rows are normalized") {
  const auto policy = random_policy(3, 7, 5, 4.0);
  for (int s = 0; s < 7; ++s) CHECK(std::abs(policy.probabilities().row(s).sum() - 1.0) < 1e-12);
  // Huge logits do not overflow.
  Matrix big(1, 3);
  big << 1000.0, 999.0, -1000.0;
  const TabularSoftmaxPolicy sharp(big);
  CHECK(sharp.probabilities().allFinite());
  CHECK(std::abs(sharp.probabilities().sum() - 1.0) < 1e-12);
}

TEST_CASE("induced_chain") {
  SUBCASE("self loop") {
    const Matrix c = induced_chain(self_loop(1.0, 0.9), random_policy(1, 1, 1));
    CHECK(c(0, 0) == 1.0);
  }
  SUBCASE("deterministic cycle") {
    const auto mdp = two_cycle(0.5, 3);
    const Matrix c = induced_chain(mdp, random_policy(2, 2, 3));
    CHECK(c(0, 0) == 0.0);
    CHECK(c(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(c(1, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(c(1, 1) == 0.0);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(induced_chain(two_cycle(0.5), TabularSoftmaxPolicy::uniform(3, 1)), DimensionError);
  }
  SUBCASE("FrozenLake against sampled transition frequencies") {
    const auto mdp = frozen4();
    const auto policy = TabularSoftmaxPolicy::uniform(16, 4);
    const Matrix c = induced_chain(mdp, policy);
    for (int s = 0; s < 16; ++s) CHECK(std::abs(c.row(s).sum() - 1.0) < 1e-9);
    // 10^6 sampled steps out of every state, drawn straight from the tables.
    Rng rng(2024);
    constexpr int kSteps = 1'000'000;
    const std::vector<double> uniform(4, 0.25);
    double worst = 0.0;
    for (int s = 0; s < 16; ++s) {
      std::vector<int> counts(16, 0);
      for (int i = 0; i < kSteps; ++i) {
        const int a = sample_categorical(uniform, rng);
        ++counts[sample_categorical(mdp.next_state_dist(s, a), rng)];
      }
      for (int sp = 0; sp < 16; ++sp) {
        worst = std::max(worst, std::abs(counts[sp] / static_cast<double>(kSteps) - c(s, sp)));
      }
    }
    CHECK(worst < 5e-3);
  }
}

TEST_CASE("policy_evaluation") {
  CHECK(policy_evaluation(self_loop(1.0, 0.9), TabularSoftmaxPolicy::uniform(1, 1))[0] ==
        doctest::Approx(10.0).epsilon(1e-14));

  const auto zero = random_mdp(5, 6, 3, 0.9).with_rewards(Matrix::Zero(6, 3));
  CHECK(policy_evaluation(zero, random_policy(5, 6, 3)).cwiseAbs().maxCoeff() == 0.0);

  const auto mdp = frozen4(0.99);
  const auto policy = TabularSoftmaxPolicy::uniform(16, 4);
  const Vector v = policy_evaluation(mdp, policy);
  const Vector vi = oracle::value_iteration_evaluate(mdp, policy, 1e-13);
  CHECK((v - vi).lpNorm<Eigen::Infinity>() < 1e-7);
  const Matrix m = Matrix::Identity(16, 16) - 0.99 * induced_chain(mdp, policy);
  CHECK((m * v - policy_rewards(mdp, policy)).lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("discounted_weighting") {
  const auto d1 = discounted_weighting(self_loop(0.0, 0.9), TabularSoftmaxPolicy::uniform(1, 1));
  CHECK(d1.kind() == OccupancyKind::kDiscountedWeighting);
  CHECK(d1[0] == doctest::Approx(10.0).epsilon(1e-14));

  const auto d2 = discounted_weighting(two_cycle(0.5), TabularSoftmaxPolicy::uniform(2, 1));
  CHECK(d2[0] == doctest::Approx(4.0 / 3.0).epsilon(1e-14));
  CHECK(d2[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(d2.values().sum() == doctest::Approx(2.0).epsilon(1e-14));

  const auto mdp = frozen4(0.95);
  const auto policy = TabularSoftmaxPolicy::uniform(16, 4);
  const Vector exact = discounted_weighting(mdp, policy).values();
  const Vector series = oracle::truncated_occupancy_sum(mdp, policy, 2000);
  CHECK((exact - series).lpNorm<Eigen::Infinity>() < 1e-6);
}

TEST_CASE("normalize_occupancy") {
  const auto n1 = normalize_occupancy(discounted_weighting(self_loop(0.0, 0.9), TabularSoftmaxPolicy::uniform(1, 1)));
  CHECK(n1.kind() == OccupancyKind::kNormalizedOccupancy);
  CHECK(n1[0] == doctest::Approx(1.0).epsilon(1e-14));

  const auto n2 = normalize_occupancy(discounted_weighting(two_cycle(0.5), TabularSoftmaxPolicy::uniform(2, 1)));
  CHECK(n2[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(n2[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

  const auto nf = normalize_occupancy(discounted_weighting(frozen4(), TabularSoftmaxPolicy::uniform(16, 4)));
  CHECK(std::abs(nf.values().sum() - 1.0) < 1e-8);

  CHECK_THROWS_AS(normalize_occupancy(nf), UsageError);
}

TEST_CASE("marginal_state_distribution") {
  const auto mdp = random_mdp(11, 5, 2, 0.9);
  const auto policy = random_policy(11, 5, 2);
  const auto m0 = marginal_state_distribution(mdp, policy, 0);
  CHECK(m0.values() == mdp.start_dist());

  const auto m3 = marginal_state_distribution(two_cycle(0.9), TabularSoftmaxPolicy::uniform(2, 1), 3);
  CHECK(m3[0] == 0.0);
  CHECK(m3[1] == 1.0);

  CHECK_THROWS_AS(marginal_state_distribution(mdp, policy, -1), DomainError);

  const auto fl = frozen4();
  const auto uniform = TabularSoftmaxPolicy::uniform(16, 4);
  const auto m5 = marginal_state_distribution(fl, uniform, 5);
  CHECK(std::abs(m5.values().sum() - 1.0) < 1e-10);
  const auto mc = oracle::mc_marginal(fl, uniform, 5, 1'000'000, 77);
  CHECK((mc.mean - m5.values()).lpNorm<Eigen::Infinity>() < 3e-3);
}

TEST_CASE("stationary_distribution") {
  CHECK(stationary_distribution(Matrix::Ones(1, 1))[0] == doctest::Approx(1.0));

  Matrix sym(2, 2);
  sym << 0.5, 0.5, 0.5, 0.5;
  const auto s2 = stationary_distribution(sym);
  CHECK(s2[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s2[1] == doctest::Approx(0.5).epsilon(1e-12));

  // Periodic chain converges thanks to damping.
  Matrix cycle(2, 2);
  cycle << 0.0, 1.0, 1.0, 0.0;
  const auto sc = stationary_distribution(cycle);
  CHECK(sc[0] == doctest::Approx(0.5).epsilon(1e-10));

  SUBCASE("undamped periodic chain reports the last residual") {
    StationaryOptions opts;
    opts.damping = 0.0;
    // Power iteration starts at uniform, so use a chain whose fixed point is not uniform.
    Matrix three(3, 3);
    three << 0, 1, 0, 0, 0, 1, 0.5, 0.5, 0;
    opts.max_iters = 3;
    try {
      (void)stationary_distribution(three, opts);
      FAIL("expected ConvergenceError");
    } catch (const ConvergenceError& e) {
      CHECK(e.residual() > 0.0);
    }
  }

  SUBCASE("FrozenLake against the linear-solve eigenvector") {
    const Matrix chain = induced_chain(frozen4(), TabularSoftmaxPolicy::uniform(16, 4));
    const double eps = 0.05;
    const auto power = stationary_distribution(chain, {.tol = 1e-14, .damping = eps});
    // Oracle: (P~^T - I) x = 0 with sum(x) = 1, replacing one equation by the normalization.
    const Matrix damped = (1.0 - eps) * chain + Matrix::Constant(16, 16, eps / 16.0);
    Matrix system = damped.transpose() - Matrix::Identity(16, 16);
    system.row(15).setOnes();
    Vector rhs = Vector::Zero(16);
    rhs[15] = 1.0;
    const Vector x = system.fullPivLu().solve(rhs);
    CHECK((power.values() - x).lpNorm<1>() < 1e-8);
  }
}

TEST_CASE("entropy") {
  CHECK(entropy(Vector::Constant(4, 0.25)) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  Vector one_hot = Vector::Zero(5);
  one_hot[2] = 1.0;
  CHECK(entropy(one_hot) == 0.0);
  Vector mixed(3);
  mixed << 0.5, 0.25, 0.25;
  CHECK(entropy(mixed) == doctest::Approx(1.039720770839918).epsilon(1e-12));
  Vector negative(2);
  negative << 1.1, -0.1;
  CHECK_THROWS_AS(entropy(negative), DomainError);
  Vector tiny_negative(2);
  tiny_negative << 1.0, -1e-13;
  CHECK(entropy(tiny_negative) == 0.0);
}

TEST_CASE("entropy is maximized by the uniform vector") {
  for (int n : {2, 3, 7, 16}) {
    const Vector uniform = Vector::Constant(n, 1.0 / n);
    const double top = entropy(uniform);
    CHECK(top == doctest::Approx(std::log(static_cast<double>(n))).epsilon(1e-13));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        Vector p = uniform;
        p[i] += 1e-3;
        p[j] -= 1e-3;
        CHECK(entropy(p) < top);
      }
    }
  }
}

TEST_CASE("expected_policy_entropy") {
  const auto mdp = frozen4();
  const auto weights = normalize_occupancy(discounted_weighting(mdp, TabularSoftmaxPolicy::uniform(16, 4)));
  CHECK(expected_policy_entropy(TabularSoftmaxPolicy::uniform(16, 4), weights) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Matrix sharp = Matrix::Zero(16, 4);
  sharp.col(2).setConstant(1000.0);
  CHECK(expected_policy_entropy(TabularSoftmaxPolicy(sharp), weights) == 0.0);

  const auto mixed = random_policy(8, 16, 4, 2.0);
  double expected = 0.0;
  for (int s = 0; s < 16; ++s) {
    double h = 0.0;
    for (int a = 0; a < 4; ++a) {
      const double p = mixed.prob(s, a);
      h -= p * std::log(p);
    }
    expected += weights[s] * h;
  }
  CHECK(expected_policy_entropy(mixed, weights) == doctest::Approx(expected).epsilon(1e-12));

  CHECK_THROWS_AS(expected_policy_entropy(mixed, discounted_weighting(mdp, mixed)), UsageError);
}

TEST_CASE("occupancy identities on random MDPs") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (double gamma : {0.5, 0.9, 0.99}) {
      const int n = 3 + static_cast<int>(seed * 3 % 17);
      const auto mdp = random_mdp(seed, n, 1 + static_cast<int>(seed % 4), gamma);
      const auto policy = random_policy(seed + 100, n, mdp.num_actions());
      const auto d = discounted_weighting(mdp, policy);
      CHECK(std::abs(d.values().sum() * (1.0 - gamma) - 1.0) < 1e-8);

      // d_pi = sum_{t<=T} gamma^t d_t + tail, tail <= gamma^{T+1}/(1-gamma).
      constexpr int kHorizon = 200;
      Vector partial = Vector::Zero(n);
      double weight = 1.0;
      for (int t = 0; t <= kHorizon; ++t) {
        partial += weight * marginal_state_distribution(mdp, policy, t).values();
        weight *= gamma;
      }
      const double tail = std::pow(gamma, kHorizon + 1) / (1.0 - gamma);
      CHECK((d.values() - partial).lpNorm<Eigen::Infinity>() <= tail + 1e-12);

      // (1-gamma) d_pi against (1-gamma) sum gamma^t d_t with a negligible tail.
      const int horizon = static_cast<int>(std::ceil(std::log(1e-8 * (1.0 - gamma)) / std::log(gamma)));
      const Vector series = (1.0 - gamma) * oracle::truncated_occupancy_sum(mdp, policy, horizon);
      CHECK((normalize_occupancy(d).values() - series).lpNorm<Eigen::Infinity>() < 1e-6);

      // alpha^T (I - gamma P)^{-1} b = d^T b for a per-state bonus vector.
      Vector bonus(n);
      for (int s = 0; s < n; ++s) bonus[s] = std::sin(1.0 + s);
      const double lhs = mdp.start_dist().dot(evaluate_state_rewards(mdp, policy, bonus));
      CHECK(std::abs(lhs - d.values().dot(bonus)) < 1e-8);
    }
  }
}

TEST_CASE("operations are pure") {
  const auto mdp = random_mdp(9, 10, 3, 0.95);
  const auto policy = random_policy(9, 10, 3);
  CHECK(discounted_weighting(mdp, policy).values() == discounted_weighting(mdp, policy).values());
  CHECK(policy_evaluation(mdp, policy) == policy_evaluation(mdp, policy));
  CHECK(marginal_state_distribution(mdp, policy, 17).values() ==
        marginal_state_distribution(mdp, policy, 17).values());
}

TEST_CASE("text format round-trips") {
  const auto mdp = random_mdp(42, 6, 3, 0.97);
  std::stringstream buffer;
  write_mdp(buffer, mdp);
  const auto back = read_mdp(buffer);
  REQUIRE(back.num_states() == 6);
  REQUIRE(back.num_actions() == 3);
  CHECK(std::abs(back.discount() - 0.97) < 1e-12);
  CHECK((back.rewards() - mdp.rewards()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((back.start_dist() - mdp.start_dist()).cwiseAbs().maxCoeff() < 1e-12);
  for (int s = 0; s < 6; ++s) {
    for (int a = 0; a < 3; ++a) {
      for (int sp = 0; sp < 6; ++sp) CHECK(std::abs(back.transition(s, a, sp) - mdp.transition(s, a, sp)) < 1e-12);
    }
  }

  std::istringstream truncated("2 1 0.9\n0 0 1.0 0 1\n");
  CHECK_THROWS_AS(read_mdp(truncated), DomainError);
  std::istringstream bad_row("1 1 0.9\n0 0 0.0 0.7\n1\n");
  CHECK_THROWS_AS(read_mdp(bad_row), DomainError);
}
