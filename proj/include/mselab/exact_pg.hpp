#pragma once

// Exact policy gradient for tabular softmax policies with state-distribution
// and policy entropy regularization:
//
//   J~(theta) = J(theta) + lambda_s * H(w_theta) + lambda_pi * sum_s w_theta(s) H(pi(.|s))
//
// where J = d_pi^T r_pi and w_theta is either the normalized discounted
// occupancy (1-gamma) alpha^T (I - gamma P_pi)^{-1} or the damped stationary
// distribution eps u^T (I - (1-eps) P_pi)^{-1}. Both weightings share the form
// (1-rho) beta^T (I - rho P_pi)^{-1}, which is what the gradient code uses.

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "mselab/mdp.hpp"

namespace mselab {

/// Entropy weights. Each weight is multiplied by its decay once per iteration.
struct RegularizationWeights {
  double lambda_s = 0.0;
  double lambda_pi = 0.0;
  double decay_s = 1.0;
  double decay_pi = 1.0;

  void validate() const;
  /// Weights after `steps` decays.
  RegularizationWeights decayed(int steps) const;
};

enum class EntropyTarget { kNormalizedOccupancy, kStationary };

struct ExactObjectiveOptions {
  EntropyTarget target = EntropyTarget::kNormalizedOccupancy;
  // Hold the weighting fixed inside the lambda_pi term when differentiating.
  bool simple_entropy_grad = false;
  double stationary_damping = 0.05;
};

/// Weighting distribution selected by `options` (normalized occupancy or damped stationary).
OccupancyVector entropy_weighting(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy,
                                  const ExactObjectiveOptions& options);

/// J = d_pi^T r_pi.
double exact_return(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy);

struct ObjectiveTerms {
  double ret = 0.0;             // J
  double state_entropy = 0.0;   // H(w)
  double policy_entropy = 0.0;  // sum_s w(s) H(pi(.|s))
  double regularized = 0.0;     // J + lambda_s H(w) + lambda_pi * policy_entropy
};

ObjectiveTerms exact_regularized_objective(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy,
                                           const RegularizationWeights& weights,
                                           const ExactObjectiveOptions& options = {});

/// Gradients with respect to the logits, per term and weighted total.
struct ExactGradient {
  Matrix ret;
  Matrix state_entropy;
  Matrix policy_entropy;
  Matrix total;
};

// Occupancy entries below this are floored inside ln w.
inline constexpr double kOccupancyLogFloor = 1e-300;

ExactGradient exact_gradient(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy,
                             const RegularizationWeights& weights, const ExactObjectiveOptions& options = {});

enum class PolicyInit { kZero, kGaussian };

struct ExactPGConfig {
  double learning_rate = 1.0;
  int iterations = 500;
  RegularizationWeights weights;
  PolicyInit init = PolicyInit::kZero;
  double init_std = 0.01;
  std::uint64_t seed = 0;
  ExactObjectiveOptions objective;
  int max_parameters = 10'000;

  void validate() const;
};

struct ExactRecordRow {
  int iter = 0;
  double ret = 0.0;
  double regularized = 0.0;
  double state_entropy = 0.0;
  double policy_entropy = 0.0;
  double lambda_s = 0.0;
  double lambda_pi = 0.0;
};

struct ExactTrainResult {
  std::vector<ExactRecordRow> record;  // iterations + 1 rows; row i is the policy after i steps
  TabularSoftmaxPolicy final_policy;
};

/// Plain gradient ascent on J~. Deterministic for a fixed config.
ExactTrainResult train_exact(const TabularMDP& mdp, const ExactPGConfig& config);

/// CSV with header `iter,J,J_reg,H_state,H_policy,lambda_s,lambda_pi`.
void write_exact_record(std::ostream& out, const std::vector<ExactRecordRow>& record);

}  // namespace mselab
