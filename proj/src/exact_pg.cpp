#include "mselab/exact_pg.hpp"

#include <Eigen/LU>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>

#include "mselab/error.hpp"
#include "mselab/random.hpp"

namespace mselab {
namespace {

// w = (1 - rho) beta^T (I - rho P_pi)^{-1} together with the factorization of
// M = I - rho P_pi, reused for the adjoint solves of the gradient.
struct Weighting {
  Vector values;
  double rho = 0.0;
  Eigen::PartialPivLU<Matrix> lu;
};

Weighting make_weighting(const Matrix& chain, const Vector& start, double rho) {
  const Eigen::Index n = chain.rows();
  Weighting out;
  out.rho = rho;
  const Matrix system = Matrix::Identity(n, n) - rho * chain;
  out.lu.compute(system);
  // w^T M = (1 - rho) beta^T  <=>  M^T w = (1 - rho) beta
  out.values = out.lu.transpose().solve((1.0 - rho) * start);
  if (!out.values.allFinite()) throw NumericError("weighting solve produced non-finite values");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (out.values[i] < 0.0) {
      if (out.values[i] < -1e-12) throw NumericError("weighting entry below -1e-12");
      out.values[i] = 0.0;
    }
  }
  return out;
}

Weighting weighting_for(const TabularMDP& mdp, const Matrix& chain, const ExactObjectiveOptions& options) {
  switch (options.target) {
    case EntropyTarget::kNormalizedOccupancy:
      return make_weighting(chain, mdp.start_dist(), mdp.discount());
    case EntropyTarget::kStationary: {
      const double eps = options.stationary_damping;
      if (!(eps > 0.0 && eps < 1.0)) throw DomainError("stationary damping must lie in (0, 1)");
      const Vector uniform = Vector::Constant(mdp.num_states(), 1.0 / mdp.num_states());
      return make_weighting(chain, uniform, 1.0 - eps);
    }
  }
  throw DomainError("unknown entropy target");
}

// E[u(s') | s, a] for every (s, a).
Matrix expected_next(const TabularMDP& mdp, const Vector& u) {
  Matrix out(mdp.num_states(), mdp.num_actions());
  for (int s = 0; s < mdp.num_states(); ++s) {
    for (int a = 0; a < mdp.num_actions(); ++a) {
      const auto row = mdp.next_state_dist(s, a);
      double acc = 0.0;
      for (int next = 0; next < mdp.num_states(); ++next) acc += row[next] * u[next];
      out(s, a) = acc;
    }
  }
  return out;
}

// Pulls dF/dpi(b|s) back through the row softmax.
Matrix softmax_pullback(const Matrix& probs, const Matrix& dprobs) {
  Matrix out(probs.rows(), probs.cols());
  for (Eigen::Index s = 0; s < probs.rows(); ++s) {
    const double mean = probs.row(s).dot(dprobs.row(s));
    out.row(s) = probs.row(s).cwiseProduct((dprobs.row(s).array() - mean).matrix());
  }
  return out;
}

// dF/dpi(b|s) for F = f(w) given g = df/dw: rho w(s) E[(M^{-1} g)(s') | s, b].
Matrix weighting_pullback(const TabularMDP& mdp, const Weighting& w, const Vector& g) {
  const Vector u = w.lu.solve(g);
  Matrix next = expected_next(mdp, u);
  for (int s = 0; s < mdp.num_states(); ++s) next.row(s) *= w.rho * w.values[s];
  return next;
}

bool all_finite(const ObjectiveTerms& t) {
  return std::isfinite(t.ret) && std::isfinite(t.state_entropy) && std::isfinite(t.policy_entropy) &&
         std::isfinite(t.regularized);
}

}  // namespace

void RegularizationWeights::validate() const {
  if (!(lambda_s >= 0.0) || !(lambda_pi >= 0.0)) throw DomainError("regularization weights must be >= 0");
  if (!(decay_s > 0.0 && decay_s <= 1.0) || !(decay_pi > 0.0 && decay_pi <= 1.0)) {
    throw DomainError("weight decay factors must lie in (0, 1]");
  }
}

RegularizationWeights RegularizationWeights::decayed(int steps) const {
  RegularizationWeights out = *this;
  out.lambda_s = lambda_s * std::pow(decay_s, steps);
  out.lambda_pi = lambda_pi * std::pow(decay_pi, steps);
  return out;
}

OccupancyVector entropy_weighting(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy,
                                  const ExactObjectiveOptions& options) {
  const Weighting w = weighting_for(mdp, induced_chain(mdp, policy), options);
  const auto kind = options.target == EntropyTarget::kStationary ? OccupancyKind::kStationary
                                                                 : OccupancyKind::kNormalizedOccupancy;
  return {w.values, kind, mdp.discount()};
}

double exact_return(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy) {
  return discounted_weighting(mdp, policy).values().dot(policy_rewards(mdp, policy));
}

ObjectiveTerms exact_regularized_objective(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy,
                                           const RegularizationWeights& weights,
                                           const ExactObjectiveOptions& options) {
  weights.validate();
  const OccupancyVector w = entropy_weighting(mdp, policy, options);
  ObjectiveTerms out;
  out.ret = exact_return(mdp, policy);
  out.state_entropy = entropy(w.values());
  out.policy_entropy = expected_policy_entropy(policy, w);
  out.regularized = out.ret + weights.lambda_s * out.state_entropy + weights.lambda_pi * out.policy_entropy;
  return out;
}

ExactGradient exact_gradient(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy,
                             const RegularizationWeights& weights, const ExactObjectiveOptions& options) {
  weights.validate();
  check_compatible(mdp, policy);
  const Matrix chain = induced_chain(mdp, policy);
  const Matrix& probs = policy.probabilities();
  const int n = mdp.num_states();
  const double gamma = mdp.discount();

  // Return: dJ/dtheta(s,a) = d(s) pi(a|s) (Q(s,a) - V(s)).
  const Weighting occupancy = make_weighting(chain, mdp.start_dist(), gamma);
  const Vector d = occupancy.values / (1.0 - gamma);
  const Vector r_pi = mdp.rewards().cwiseProduct(probs).rowwise().sum();
  const Vector v = occupancy.lu.solve(r_pi);
  Matrix q = mdp.rewards() + gamma * expected_next(mdp, v);
  for (int s = 0; s < n; ++s) q.row(s) *= d[s];

  ExactGradient out;
  out.ret = softmax_pullback(probs, q);

  // State entropy: dH/dw(s) = -(1 + ln w(s)).
  const Weighting w = options.target == EntropyTarget::kNormalizedOccupancy
                          ? occupancy
                          : weighting_for(mdp, chain, options);
  Vector dh_dw(n);
  for (int s = 0; s < n; ++s) dh_dw[s] = -(1.0 + std::log(std::max(w.values[s], kOccupancyLogFloor)));
  out.state_entropy = softmax_pullback(probs, weighting_pullback(mdp, w, dh_dw));

  // Policy entropy sum_s w(s) H_s: direct term plus the weighting's dependence on theta.
  const Vector h = policy_entropies(policy);
  Matrix direct(n, mdp.num_actions());
  for (int s = 0; s < n; ++s) {
    for (int a = 0; a < mdp.num_actions(); ++a) {
      const double p = probs(s, a);
      const double log_p = p > 0.0 ? std::log(p) : 0.0;
      direct(s, a) = -w.values[s] * p * (log_p + h[s]);
    }
  }
  out.policy_entropy = direct;
  if (!options.simple_entropy_grad) {
    out.policy_entropy += softmax_pullback(probs, weighting_pullback(mdp, w, h));
  }

  out.total = out.ret + weights.lambda_s * out.state_entropy + weights.lambda_pi * out.policy_entropy;
  return out;
}

void ExactPGConfig::validate() const {
  if (!(learning_rate > 0.0)) throw DomainError("learning_rate must be positive");
  if (iterations < 1) throw DomainError("iterations must be >= 1");
  if (!(init_std >= 0.0)) throw DomainError("init_std must be non-negative");
  weights.validate();
}

ExactTrainResult train_exact(const TabularMDP& mdp, const ExactPGConfig& config) {
  config.validate();
  const int n = mdp.num_states();
  const int na = mdp.num_actions();
  if (n * na > config.max_parameters) {
    throw DomainError("MDP has " + std::to_string(n * na) + " logits, above the exact-PG cap of " +
                      std::to_string(config.max_parameters));
  }
  Matrix logits = Matrix::Zero(n, na);
  if (config.init == PolicyInit::kGaussian) {
    Rng rng(config.seed);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = config.init_std * standard_normal(rng);
  }

  ExactTrainResult result{{}, TabularSoftmaxPolicy(logits)};
  result.record.reserve(static_cast<std::size_t>(config.iterations) + 1);
  for (int it = 0;; ++it) {
    const TabularSoftmaxPolicy policy(logits);
    const RegularizationWeights weights = config.weights.decayed(it);
    const ObjectiveTerms terms = exact_regularized_objective(mdp, policy, weights, config.objective);
    if (!all_finite(terms)) throw NumericError("non-finite objective at iteration " + std::to_string(it));
    result.record.push_back({it, terms.ret, terms.regularized, terms.state_entropy, terms.policy_entropy,
                             weights.lambda_s, weights.lambda_pi});
    if (it == config.iterations) {
      result.final_policy = policy;
      break;
    }
    const ExactGradient grad = exact_gradient(mdp, policy, weights, config.objective);
    if (!grad.total.allFinite()) throw NumericError("non-finite gradient at iteration " + std::to_string(it));
    logits += config.learning_rate * grad.total;
  }
  return result;
}

void write_exact_record(std::ostream& out, const std::vector<ExactRecordRow>& record) {
  out << "iter,J,J_reg,H_state,H_policy,lambda_s,lambda_pi\n";
  out << std::setprecision(17);
  for (const auto& row : record) {
    out << row.iter << ',' << row.ret << ',' << row.regularized << ',' << row.state_entropy << ','
        << row.policy_entropy << ',' << row.lambda_s << ',' << row.lambda_pi << '\n';
  }
}

}  // namespace mselab
