#include "mselab/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <thread>

#include "mselab/error.hpp"
#include "mselab/random.hpp"

namespace mselab::oracle {
namespace {

struct Tally {
  std::vector<std::int64_t> counts;
  std::int64_t dropped = 0;
};

// Direct sampler over the raw tables.
class Sampler {
 public:
  Sampler(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy) : mdp_(mdp) {
    if (policy.num_states() != mdp.num_states() || policy.num_actions() != mdp.num_actions()) {
      throw DimensionError("oracle: policy shape does not match MDP");
    }
    const Matrix& probs = policy.probabilities();
    policy_rows_.resize(static_cast<std::size_t>(probs.rows()));
    for (Eigen::Index s = 0; s < probs.rows(); ++s) {
      for (Eigen::Index a = 0; a < probs.cols(); ++a) policy_rows_[s].push_back(probs(s, a));
    }
    start_.assign(mdp.start_dist().data(), mdp.start_dist().data() + mdp.start_dist().size());
  }

  int start(Rng& rng) const { return sample_categorical(start_, rng); }
  int next(int s, Rng& rng) const {
    const int a = sample_categorical(policy_rows_[s], rng);
    return sample_categorical(mdp_.next_state_dist(s, a), rng);
  }
  int num_states() const { return mdp_.num_states(); }

 private:
  const TabularMDP& mdp_;
  std::vector<std::vector<double>> policy_rows_;
  std::vector<double> start_;
};

template <typename EpisodeFn>
McEstimate run_sharded(int num_states, std::int64_t episodes, std::uint64_t seed, const McOptions& options,
                       EpisodeFn episode) {
  if (episodes < 1) throw DomainError("oracle: episodes must be >= 1");
  const int shards = std::max(1, options.shards);
  std::vector<Tally> tallies(static_cast<std::size_t>(shards));
  auto run_shard = [&](int shard) {
    Tally& tally = tallies[shard];
    tally.counts.assign(static_cast<std::size_t>(num_states), 0);
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(shard)));
    const std::int64_t begin = episodes * shard / shards;
    const std::int64_t end = episodes * (shard + 1) / shards;
    for (std::int64_t e = begin; e < end; ++e) episode(rng, tally);
  };
  const int workers = std::clamp(options.workers, 1, shards);
  if (workers == 1) {
    for (int shard = 0; shard < shards; ++shard) run_shard(shard);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (int shard = w; shard < shards; shard += workers) run_shard(shard);
      });
    }
    for (auto& t : pool) t.join();
  }

  McEstimate out;
  out.episodes = episodes;
  std::vector<std::int64_t> merged(static_cast<std::size_t>(num_states), 0);
  for (const Tally& t : tallies) {
    out.dropped += t.dropped;
    for (int s = 0; s < num_states; ++s) merged[s] += t.counts[s];
  }
  const double kept = static_cast<double>(episodes - out.dropped);
  out.mean = Vector::Zero(num_states);
  out.stderr_ = Vector::Zero(num_states);
  if (kept > 0) {
    for (int s = 0; s < num_states; ++s) {
      const double p = static_cast<double>(merged[s]) / kept;
      out.mean[s] = p;
      out.stderr_[s] = std::sqrt(p * (1.0 - p) / kept);
    }
  }
  return out;
}

}  // namespace

McEstimate mc_marginal(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy, int t, std::int64_t episodes,
                       std::uint64_t seed, const McOptions& options) {
  if (t < 0) throw DomainError("oracle: t must be non-negative");
  const Sampler sampler(mdp, policy);
  return run_sharded(mdp.num_states(), episodes, seed, options, [&](Rng& rng, Tally& tally) {
    int s = sampler.start(rng);
    for (int step = 0; step < t; ++step) s = sampler.next(s, rng);
    ++tally.counts[s];
  });
}

McEstimate mc_discounted_occupancy(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy,
                                   std::int64_t episodes, std::uint64_t seed, const McOptions& options) {
  const double gamma = mdp.discount();
  const Sampler sampler(mdp, policy);
  return run_sharded(mdp.num_states(), episodes, seed, options, [&](Rng& rng, Tally& tally) {
    int s = sampler.start(rng);
    for (int step = 0; step < kGeometricHorizonCap; ++step) {
      if (uniform01(rng) >= gamma) {
        ++tally.counts[s];
        return;
      }
      s = sampler.next(s, rng);
    }
    ++tally.dropped;
  });
}

Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& params, double h) {
  if (!(h > 0.0)) throw DomainError("fd_gradient: step must be positive");
  Vector x = params;
  Vector grad(params.size());
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("fd_gradient: non-finite evaluation at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double max_relative_error(const Vector& a, const Vector& b, double floor) {
  if (a.size() != b.size()) throw DimensionError("max_relative_error: size mismatch");
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

Vector value_iteration_evaluate(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy, double tol,
                                int max_iters) {
  const int n = mdp.num_states();
  const int na = mdp.num_actions();
  Vector v = Vector::Zero(n);
  for (int it = 0; it < max_iters; ++it) {
    Vector next = Vector::Zero(n);
    for (int s = 0; s < n; ++s) {
      for (int a = 0; a < na; ++a) {
        double backup = mdp.rewards()(s, a);
        const auto row = mdp.next_state_dist(s, a);
        for (int sp = 0; sp < n; ++sp) backup += mdp.discount() * row[sp] * v[sp];
        next[s] += policy.prob(s, a) * backup;
      }
    }
    const double delta = (next - v).cwiseAbs().maxCoeff();
    v = next;
    if (delta < tol) return v;
  }
  throw ConvergenceError("value iteration did not converge", 0.0);
}

Vector truncated_occupancy_sum(const TabularMDP& mdp, const TabularSoftmaxPolicy& policy, int horizon) {
  const int n = mdp.num_states();
  const int na = mdp.num_actions();
  std::vector<double> current(mdp.start_dist().data(), mdp.start_dist().data() + n);
  Vector total = Vector::Zero(n);
  double weight = 1.0;
  for (int t = 0; t <= horizon; ++t) {
    for (int s = 0; s < n; ++s) total[s] += weight * current[s];
    std::vector<double> next(static_cast<std::size_t>(n), 0.0);
    for (int s = 0; s < n; ++s) {
      if (current[s] == 0.0) continue;
      for (int a = 0; a < na; ++a) {
        const double mass = current[s] * policy.prob(s, a);
        const auto row = mdp.next_state_dist(s, a);
        for (int sp = 0; sp < n; ++sp) next[sp] += mass * row[sp];
      }
    }
    current.swap(next);
    weight *= mdp.discount();
  }
  return total;
}

std::vector<double> naive_returns(const std::vector<double>& rewards, double gamma) {
  std::vector<double> out(rewards.size(), 0.0);
  for (std::size_t t = 0; t < rewards.size(); ++t) {
    double acc = 0.0;
    for (std::size_t k = t; k < rewards.size(); ++k) acc += std::pow(gamma, static_cast<double>(k - t)) * rewards[k];
    out[t] = acc;
  }
  return out;
}

std::vector<double> naive_gae(const std::vector<double>& rewards, const std::vector<double>& values, double gamma,
                              double lambda) {
  if (values.size() != rewards.size() + 1) throw DimensionError("naive_gae: values must have length T+1");
  const std::size_t horizon = rewards.size();
  std::vector<double> out(horizon, 0.0);
  for (std::size_t t = 0; t < horizon; ++t) {
    double acc = 0.0;
    for (std::size_t k = t; k < horizon; ++k) {
      const double delta = rewards[k] + gamma * values[k + 1] - values[k];
      acc += std::pow(gamma * lambda, static_cast<double>(k - t)) * delta;
    }
    out[t] = acc;
  }
  return out;
}

}  // namespace mselab::oracle
