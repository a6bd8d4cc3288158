#include "mselab/mdp.hpp"

#include <Eigen/LU>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "mselab/error.hpp"

namespace mselab {
namespace {

constexpr double kProbTol = 1e-9;
constexpr double kClampTol = 1e-12;

void check_distribution(std::span<const double> p, const std::string& what) {
  double sum = 0.0;
  for (double x : p) {
    if (!(x >= 0.0)) throw DomainError(what + ": negative or NaN probability");
    sum += x;
  }
  if (std::abs(sum - 1.0) > kProbTol) {
    std::ostringstream msg;
    msg << what << ": probabilities sum to " << std::setprecision(17) << sum;
    throw DomainError(msg.str());
  }
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix probs(logits.rows(), logits.cols());
  for (Eigen::Index s = 0; s < logits.rows(); ++s) {
    const double top = logits.row(s).maxCoeff();
    probs.row(s) = (logits.row(s).array() - top).exp().matrix();
    probs.row(s) /= probs.row(s).sum();
  }
  return probs;
}

Vector checked_solve(const Eigen::PartialPivLU<Matrix>& lu, const Matrix& system, const Vector& rhs) {
  Vector x = lu.solve(rhs);
  if (!x.allFinite()) throw NumericError("linear solve produced non-finite values");
  const double residual = (system * x - rhs).lpNorm<Eigen::Infinity>();
  if (residual > 1e-8 * std::max(1.0, rhs.lpNorm<Eigen::Infinity>())) {
    throw NumericError("linear solve residual too large: " + std::to_string(residual));
  }
  return x;
}

}  // namespace

// --- TabularMDP -------------------------------------------------------------

TabularMDP::TabularMDP(int num_states, int num_actions, std::vector<double> transitions,
                       Matrix rewards, Vector start_dist, double discount)
    : num_states_(num_states),
      num_actions_(num_actions),
      transitions_(std::move(transitions)),
      rewards_(std::move(rewards)),
      start_dist_(std::move(start_dist)),
      discount_(discount) {
  if (num_states_ <= 0 || num_actions_ <= 0) throw DimensionError("MDP needs at least one state and action");
  const auto expected = static_cast<std::size_t>(num_states_) * num_actions_ * num_states_;
  if (transitions_.size() != expected) throw DimensionError("transition tensor must have S*A*S entries");
  if (rewards_.rows() != num_states_ || rewards_.cols() != num_actions_) {
    throw DimensionError("reward matrix must be S x A");
  }
  if (start_dist_.size() != num_states_) throw DimensionError("start distribution must have S entries");
  if (!(discount_ >= 0.0 && discount_ < 1.0)) throw DomainError("discount must lie in [0, 1)");
  if (!rewards_.allFinite()) throw DomainError("rewards must be finite");
  for (int s = 0; s < num_states_; ++s) {
    for (int a = 0; a < num_actions_; ++a) {
      check_distribution(next_state_dist(s, a),
                         "P(.|" + std::to_string(s) + "," + std::to_string(a) + ")");
    }
  }
  check_distribution({start_dist_.data(), static_cast<std::size_t>(start_dist_.size())}, "start distribution");
}

TabularMDP TabularMDP::with_rewards(Matrix rewards) const {
  return {num_states_, num_actions_, transitions_, std::move(rewards), start_dist_, discount_};
}

TabularMDP TabularMDP::with_discount(double discount) const {
  return {num_states_, num_actions_, transitions_, rewards_, start_dist_, discount};
}

TabularMDP TabularMDP::with_start(Vector start_dist) const {
  return {num_states_, num_actions_, transitions_, rewards_, std::move(start_dist), discount_};
}

// --- TabularSoftmaxPolicy ---------------------------------------------------

TabularSoftmaxPolicy::TabularSoftmaxPolicy(Matrix logits) : logits_(std::move(logits)) {
  if (logits_.rows() == 0 || logits_.cols() == 0) throw DimensionError("empty logit table");
  if (!logits_.allFinite()) throw NumericError("policy logits must be finite");
  probs_ = softmax_rows(logits_);
}

TabularSoftmaxPolicy TabularSoftmaxPolicy::uniform(int num_states, int num_actions) {
  return TabularSoftmaxPolicy(Matrix::Zero(num_states, num_actions));
}

// --- OccupancyVector --------------------------------------------------------

const char* to_string(OccupancyKind kind) {
  switch (kind) {
    case OccupancyKind::kDiscountedWeighting: return "discounted_weighting";
    case OccupancyKind::kNormalizedOccupancy: return "normalized_occupancy";
    case OccupancyKind::kPerStepMarginal: return "per_step_marginal";
    case OccupancyKind::kStationary: return "stationary";
  }
  return "unknown";
}

OccupancyVector::OccupancyVector(Vector values, OccupancyKind kind, double discount)
    : values_(std::move(values)), kind_(kind), discount_(discount) {
  for (Eigen::Index i = 0; i < values_.size(); ++i) {
    if (values_[i] < 0.0) {
      if (values_[i] < -kClampTol) throw NumericError("occupancy entry below -1e-12");
      values_[i] = 0.0;
    }
  }
  if (!values_.allFinite()) throw NumericError("non-finite occupancy");
  const double target = kind_ == OccupancyKind::kDiscountedWeighting ? 1.0 / (1.0 - discount_) : 1.0;
  if (std::abs(values_.sum() - target) > 1e-8 * std::max(1.0, target)) {
    std::ostringstream msg;
    msg << to_string(kind_) << " sums to " << std::setprecision(17) << values_.sum()
        << ", expected " << target;
    throw NumericError(msg.str());
  }
}

// --- operations -------------------------------------------------------------

void check_compatible(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy) {
  if (policy.num_states() != mdp.num_states() || policy.num_actions() != mdp.num_actions()) {
    throw DimensionError("policy shape " + std::to_string(policy.num_states()) + "x" +
                         std::to_string(policy.num_actions()) + " does not match MDP " +
                         std::to_string(mdp.num_states()) + "x" + std::to_string(mdp.num_actions()));
  }
}

Matrix induced_chain(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy) {
  check_compatible(mdp, policy);
  const int n = mdp.num_states();
  Matrix chain = Matrix::Zero(n, n);
  for (int s = 0; s < n; ++s) {
    for (int a = 0; a < mdp.num_actions(); ++a) {
      const double p = policy.prob(s, a);
      const auto row = mdp.next_state_dist(s, a);
      for (int next = 0; next < n; ++next) chain(s, next) += p * row[next];
    }
  }
  return chain;
}

Vector policy_rewards(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy) {
  check_compatible(mdp, policy);
  return mdp.rewards().cwiseProduct(policy.probabilities()).rowwise().sum();
}

Vector evaluate_state_rewards(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy,
                              const Vector& state_rewards) {
  if (state_rewards.size() != mdp.num_states()) throw DimensionError("state reward vector must have S entries");
  const Matrix chain = induced_chain(mdp, policy);
  const Matrix system = Matrix::Identity(chain.rows(), chain.cols()) - mdp.discount() * chain;
  const Eigen::PartialPivLU<Matrix> lu(system);
  return checked_solve(lu, system, state_rewards);
}

Vector policy_evaluation(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy) {
  return evaluate_state_rewards(mdp, policy, policy_rewards(mdp, policy));
}

OccupancyVector discounted_weighting(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy) {
  const double gamma = mdp.discount();
  if (!(gamma < 1.0)) throw DomainError("discounted weighting requires gamma < 1");
  const Matrix chain = induced_chain(mdp, policy);
  const Matrix system =
      (Matrix::Identity(chain.rows(), chain.cols()) - gamma * chain).transpose();
  const Eigen::PartialPivLU<Matrix> lu(system);
  return {checked_solve(lu, system, mdp.start_dist()), OccupancyKind::kDiscountedWeighting, gamma};
}

OccupancyVector normalize_occupancy(const OccupancyVector& weighting) {
  if (weighting.kind() != OccupancyKind::kDiscountedWeighting) {
    throw UsageError(std::string("normalize_occupancy expects a discounted_weighting, got ") +
                     to_string(weighting.kind()));
  }
  const double gamma = weighting.discount();
  return {(1.0 - gamma) * weighting.values(), OccupancyKind::kNormalizedOccupancy, gamma};
}

OccupancyVector marginal_state_distribution(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy,
                                            int t) {
  if (t < 0) throw DomainError("time step must be non-negative");
  Eigen::RowVectorXd x = mdp.start_dist().transpose();
  if (t > 0) {
    const Matrix chain = induced_chain(mdp, policy);
    for (int step = 0; step < t; ++step) x = x * chain;
  } else {
    check_compatible(mdp, policy);
  }
  return {x.transpose(), OccupancyKind::kPerStepMarginal};
}

OccupancyVector stationary_distribution(const Matrix& chain, const StationaryOptions& options) {
  const Eigen::Index n = chain.rows();
  if (n == 0 || chain.cols() != n) throw DimensionError("chain must be a non-empty square matrix");
  if (!(options.damping >= 0.0 && options.damping < 1.0)) throw DomainError("damping must lie in [0, 1)");
  for (Eigen::Index s = 0; s < n; ++s) {
    if ((chain.row(s).array() < 0.0).any() || std::abs(chain.row(s).sum() - 1.0) > kProbTol) {
      throw DomainError("chain must be row-stochastic");
    }
  }
  const double uniform = 1.0 / static_cast<double>(n);
  Eigen::RowVectorXd x = Eigen::RowVectorXd::Constant(n, uniform);
  double residual = 0.0;
  for (int it = 0; it < options.max_iters; ++it) {
    Eigen::RowVectorXd next = (1.0 - options.damping) * (x * chain);
    next.array() += options.damping * uniform;
    next /= next.sum();
    residual = (next - x).lpNorm<1>();
    x = std::move(next);
    if (residual < options.tol) return {x.transpose(), OccupancyKind::kStationary};
  }
  throw ConvergenceError("stationary power iteration did not converge", residual);
}

double entropy(std::span<const double> dist) {
  double sum = 0.0;
  double h = 0.0;
  for (double p : dist) {
    if (p < -kClampTol || std::isnan(p)) throw DomainError("entropy of a vector with negative entries");
    sum += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::abs(sum - 1.0) > 1e-6) throw DomainError("entropy expects a normalized distribution");
  return h;
}

double entropy(const Vector& dist) {
  return entropy(std::span<const double>(dist.data(), static_cast<std::size_t>(dist.size())));
}

Vector policy_entropies(const TabularSoftmaxPolicy& policy) {
  Vector h(policy.num_states());
  const Matrix& probs = policy.probabilities();
  for (int s = 0; s < policy.num_states(); ++s) {
    double acc = 0.0;
    for (int a = 0; a < policy.num_actions(); ++a) {
      const double p = probs(s, a);
      if (p > 0.0) acc -= p * std::log(p);
    }
    h[s] = acc;
  }
  return h;
}

double expected_policy_entropy(const TabularSoftmaxPolicy& policy, const OccupancyVector& weights) {
  if (weights.kind() == OccupancyKind::kDiscountedWeighting) {
    throw UsageError("expected_policy_entropy needs normalized weights; normalize the discounted weighting first");
  }
  if (weights.size() != policy.num_states()) throw DimensionError("weights must have one entry per state");
  return weights.values().dot(policy_entropies(policy));
}

// --- text format ------------------------------------------------------------

void write_mdp(std::ostream& out, const TabularMDP& mdp) {
  const int n = mdp.num_states();
  out << std::setprecision(17);
  out << n << ' ' << mdp.num_actions() << ' ' << mdp.discount() << '\n';
  for (int s = 0; s < n; ++s) {
    for (int a = 0; a < mdp.num_actions(); ++a) {
      out << s << ' ' << a << ' ' << mdp.rewards()(s, a);
      for (double p : mdp.next_state_dist(s, a)) out << ' ' << p;
      out << '\n';
    }
  }
  for (int s = 0; s < n; ++s) out << (s ? " " : "") << mdp.start_dist()[s];
  out << '\n';
}

TabularMDP read_mdp(std::istream& in) {
  int n = 0;
  int num_actions = 0;
  double gamma = 0.0;
  if (!(in >> n >> num_actions >> gamma)) throw DomainError("MDP header must be 'S A gamma'");
  if (n <= 0 || num_actions <= 0) throw DimensionError("MDP header has non-positive sizes");
  std::vector<double> transitions(static_cast<std::size_t>(n) * num_actions * n, 0.0);
  Matrix rewards = Matrix::Zero(n, num_actions);
  std::vector<bool> seen(static_cast<std::size_t>(n) * num_actions, false);
  for (int line = 0; line < n * num_actions; ++line) {
    int s = -1;
    int a = -1;
    double r = 0.0;
    if (!(in >> s >> a >> r)) throw DomainError("truncated transition line " + std::to_string(line + 2));
    if (s < 0 || s >= n || a < 0 || a >= num_actions) {
      throw DimensionError("state/action out of range on line " + std::to_string(line + 2));
    }
    const auto idx = static_cast<std::size_t>(s) * num_actions + a;
    if (seen[idx]) throw DomainError("duplicate (s,a) on line " + std::to_string(line + 2));
    seen[idx] = true;
    rewards(s, a) = r;
    for (int next = 0; next < n; ++next) {
      if (!(in >> transitions[idx * n + next])) {
        throw DomainError("truncated transition line " + std::to_string(line + 2));
      }
    }
  }
  Vector start(n);
  for (int s = 0; s < n; ++s) {
    if (!(in >> start[s])) throw DomainError("truncated start distribution");
  }
  return {n, num_actions, std::move(transitions), std::move(rewards), std::move(start), gamma};
}

}  // namespace mselab
