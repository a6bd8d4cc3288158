#pragma once

// Exact finite-MDP analytics: policy-induced chains, policy evaluation,
// discounted state weightings, per-step marginals, stationary distributions
// and entropies. Everything here is a pure function of its arguments.

#include <Eigen/Core>
#include <iosfwd>
#include <span>
#include <vector>

namespace mselab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Finite discounted MDP with transition tensor P(s'|s,a), expected rewards
/// r(s,a), start distribution alpha and discount gamma in [0, 1).
class TabularMDP {
 public:
  /// `transitions` is laid out row-major as [s][a][s'].
  TabularMDP(int num_states, int num_actions, std::vector<double> transitions,
             Matrix rewards, Vector start_dist, double discount);

  int num_states() const { return num_states_; }
  int num_actions() const { return num_actions_; }
  double discount() const { return discount_; }
  const Matrix& rewards() const { return rewards_; }
  const Vector& start_dist() const { return start_dist_; }

  double transition(int s, int a, int next) const {
    return transitions_[index(s, a) + next];
  }
  /// Distribution P(.|s,a) over next states.
  std::span<const double> next_state_dist(int s, int a) const {
    return {transitions_.data() + index(s, a), static_cast<std::size_t>(num_states_)};
  }

  TabularMDP with_rewards(Matrix rewards) const;
  TabularMDP with_discount(double discount) const;
  TabularMDP with_start(Vector start_dist) const;

 private:
  std::size_t index(int s, int a) const {
    return (static_cast<std::size_t>(s) * num_actions_ + a) * num_states_;
  }

  int num_states_;
  int num_actions_;
  std::vector<double> transitions_;
  Matrix rewards_;
  Vector start_dist_;
  double discount_;
};

/// Softmax policy pi(a|s) = exp(theta[s,a]) / sum_b exp(theta[s,b]).
class TabularSoftmaxPolicy {
 public:
  explicit TabularSoftmaxPolicy(Matrix logits);

  static TabularSoftmaxPolicy uniform(int num_states, int num_actions);

  int num_states() const { return static_cast<int>(logits_.rows()); }
  int num_actions() const { return static_cast<int>(logits_.cols()); }
  const Matrix& logits() const { return logits_; }
  /// Probability table, shape [S][A]; rows sum to 1.
  const Matrix& probabilities() const { return probs_; }
  double prob(int s, int a) const { return probs_(s, a); }

 private:
  Matrix logits_;
  Matrix probs_;
};

enum class OccupancyKind { kDiscountedWeighting, kNormalizedOccupancy, kPerStepMarginal, kStationary };

const char* to_string(OccupancyKind kind);

/// A state weighting tagged with what it is. Discounted weightings sum to
/// 1/(1-gamma); every other kind is a probability distribution. The
/// constructor checks the sum and clamps round-off negatives to 0.
class OccupancyVector {
 public:
  OccupancyVector(Vector values, OccupancyKind kind, double discount = 0.0);

  const Vector& values() const { return values_; }
  OccupancyKind kind() const { return kind_; }
  /// Discount the weighting was built with (0 for kinds that do not carry one).
  double discount() const { return discount_; }
  int size() const { return static_cast<int>(values_.size()); }
  double operator[](int s) const { return values_[s]; }

 private:
  Vector values_;
  OccupancyKind kind_;
  double discount_;
};

void check_compatible(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy);

/// P_pi(s,s') = sum_a pi(a|s) P(s'|s,a).
Matrix induced_chain(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy);

/// r_pi(s) = sum_a pi(a|s) r(s,a).
Vector policy_rewards(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy);

/// v_pi = (I - gamma P_pi)^{-1} r_pi.
Vector policy_evaluation(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy);

/// (I - gamma P_pi)^{-1} b for an arbitrary per-state reward vector b.
Vector evaluate_state_rewards(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy,
                              const Vector& state_rewards);

/// d_pi^T = alpha^T (I - gamma P_pi)^{-1}, by a direct solve of the transposed system.
OccupancyVector discounted_weighting(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy);

/// d_{gamma,pi} = (1 - gamma) d_pi.
OccupancyVector normalize_occupancy(const OccupancyVector& weighting);

/// d_{t,pi}^T = alpha^T P_pi^t by t forward steps.
OccupancyVector marginal_state_distribution(const TabularMDP& mdp,
                                            const TabularSoftmaxPolicy& policy, int t);

struct StationaryOptions {
  double tol = 1e-12;
  // x <- (1 - damping) x P + damping * uniform; makes periodic chains converge.
  double damping = 0.05;
  int max_iters = 1'000'000;
};

/// Damped power iteration; throws ConvergenceError with the last L1 residual.
OccupancyVector stationary_distribution(const Matrix& chain, const StationaryOptions& options = {});

/// Shannon entropy in nats with 0 ln 0 = 0.
double entropy(std::span<const double> dist);
double entropy(const Vector& dist);

/// H(pi(.|s)) for every state.
Vector policy_entropies(const TabularSoftmaxPolicy& policy);

/// sum_s w(s) H(pi(.|s)); `weights` must be a normalized kind.
double expected_policy_entropy(const TabularSoftmaxPolicy& policy, const OccupancyVector& weights);

// Plain-text tabular format:
//   S A gamma
//   s a r p(0|s,a) ... p(S-1|s,a)     (S*A lines)
//   alpha(0) ... alpha(S-1)
void write_mdp(std::ostream& out, const TabularMDP& mdp);
TabularMDP read_mdp(std::istream& in);

}  // namespace mselab
