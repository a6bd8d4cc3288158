#pragma once

// Brute-force ground truth for tests. Nothing here calls into the analytic
// mdp-core / exact-pg / agents code paths: rollouts read the transition
// tensor and policy table directly, and sums are written out naively.

#include <cstdint>
#include <functional>
#include <vector>

#include "mselab/mdp.hpp"

namespace mselab::oracle {

struct McEstimate {
  Vector mean;
  Vector stderr_;  // per-entry binomial standard error sqrt(p(1-p)/n)
  std::int64_t episodes = 0;
  std::int64_t dropped = 0;  // samples discarded at the horizon cap
};

struct McOptions {
  // Fixed shard count keeps results independent of the worker count.
  int shards = 8;
  int workers = 1;
};

/// Empirical distribution of s_t over `episodes` rollouts from alpha.
McEstimate mc_marginal(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy, int t, std::int64_t episodes,
                       std::uint64_t seed, const McOptions& options = {});

inline constexpr int kGeometricHorizonCap = 10'000;

/// Geometric-termination sampler: before every transition the rollout stops
/// with probability (1-gamma) and the current state is tallied. Estimates
/// the normalized occupancy (1-gamma) d_pi.
McEstimate mc_discounted_occupancy(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy,
                                   std::int64_t episodes, std::uint64_t seed, const McOptions& options = {});

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.
Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& params, double h = 1e-5);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps components
/// whose true value is ~0 (e.g. logits of absorbing states) from turning
/// finite-difference round-off into a huge relative error.
inline constexpr double kRelativeErrorFloor = 1e-4;
double max_relative_error(const Vector& a, const Vector& b, double floor = kRelativeErrorFloor);

/// Policy evaluation by fixed-point iteration until the sup-norm update is below tol.
Vector value_iteration_evaluate(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy, double tol = 1e-12,
                                int max_iters = 1'000'000);

/// sum_{t=0}^{horizon} gamma^t d_{t,pi}, by explicit per-state loops.
Vector truncated_occupancy_sum(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy, int horizon);

/// G_t = sum_{k>=t} gamma^{k-t} r_k, as an O(T^2) double loop.
std::vector<double> naive_returns(const std::vector<double>& rewards, double gamma);

/// A_t = sum_{k>=0} (gamma lambda)^k delta_{t+k}, as an O(T^2) double loop.
/// `values` has length T+1.
std::vector<double> naive_gae(const std::vector<double>& rewards, const std::vector<double>& values, double gamma,
                              double lambda);

}  // namespace mselab::oracle
