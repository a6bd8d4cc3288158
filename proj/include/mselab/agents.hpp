#pragma once

// Sampled-trajectory policy gradient on gridworlds: REINFORCE and actor-critic
// with GAE. Per-step rewards are augmented with lambda_pi H(pi(.|s)) and
// lambda_s H(q(z|s)), and both entropies also enter the loss as explicit
// regularizers.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mselab/diffnet.hpp"
#include "mselab/exact_pg.hpp"
#include "mselab/gridworld.hpp"

namespace mselab {

enum class Algorithm { kReinforce, kA2cGae };
enum class StateEncoding { kOneHot, kCoordinates };

std::string to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& s);
std::string to_string(StateEncoding e);
StateEncoding parse_encoding(const std::string& s);

struct AgentConfig {
  Algorithm algorithm = Algorithm::kA2cGae;
  RegularizationWeights weights{.lambda_s = 0.0, .lambda_pi = 0.1};
  double gae_lambda = 0.95;
  double gamma = 0.99;
  double learning_rate = 1e-3;
  int rollout_batch = 8;  // episodes per update
  int max_updates = 200;
  std::uint64_t seed = 0;
  // Critic regresses bonus-augmented returns (and GAE uses augmented TD errors).
  bool bonus_in_critic = true;
  bool normalize_advantages = true;
  double max_grad_norm = 0.5;  // <= 0 disables clipping
  double value_coef = 0.5;
  double kl_weight = 0.0;
  // Weight the explicit entropy regularizers by gamma^t instead of uniformly.
  bool discount_entropy_reg = false;
  // Optional comparison arm: reward += count_bonus / sqrt(n(s)).
  double count_bonus = 0.0;
  std::vector<int> hidden = {64};
  int z_dim = 64;
  StateEncoding encoding = StateEncoding::kOneHot;

  void validate() const;
};

/// One-hot rows over tabular states, or (x, y) scaled to [0, 1].
Matrix encode_states(const GridWorld& world, StateEncoding encoding, const std::vector<int>& states);
int encoding_dim(const GridWorld& world, StateEncoding encoding);

NeuralPolicy make_policy(const GridWorld& world, const AgentConfig& config);

struct TrajectoryStep {
  int state = 0;
  int action = 0;
  double env_reward = 0.0;
  double bonus_policy_entropy = 0.0;  // H(pi(.|s)), unweighted
  double bonus_state_entropy = 0.0;   // H(q(z|s)), unweighted
  double bonus_count = 0.0;           // 1/sqrt(n(s)), unweighted
  bool done = false;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
  std::int64_t episode = 0;
  std::uint64_t seed = 0;
  bool truncated = false;  // ended by the step limit, final_state is non-terminal
  int final_state = 0;     // state after the last step

  double env_return() const;
};

/// Visit counts per tabular state.
struct VisitationCounts {
  std::vector<std::int64_t> counts;

  explicit VisitationCounts(int num_states = 0) : counts(static_cast<std::size_t>(num_states), 0) {}
  void add(const Trajectory& traj);
  std::int64_t total() const;
};

struct StateEntropies {
  std::vector<double> policy;  // H(pi(.|s))
  std::vector<double> latent;  // H(q(z|s))
};

/// Both entropies at every tabular state under the current parameters.
StateEntropies state_entropies(const GridWorld& world, const NeuralPolicy& policy, StateEncoding encoding);

struct CollectOptions {
  bool greedy = false;  // argmax actions instead of sampling
  // Counts used for the 1/sqrt(n) arm; nullptr leaves bonus_count at 0.
  const VisitationCounts* counts = nullptr;
};

/// Runs `config.rollout_batch` episodes. Bonuses are computed from the policy
/// as it is at collection time; a bonus whose weight in config.weights is
/// zero is recorded as 0.
std::vector<Trajectory> collect_rollouts(GridEnv& env, const NeuralPolicy& policy, const AgentConfig& config,
                                         Rng& rng, std::int64_t first_episode = 0, const CollectOptions& options = {});

/// r_t + lambda_pi b^pi_t + lambda_s b^s_t + count_weight b^c_t.
std::vector<double> augmented_rewards(const Trajectory& traj, const RegularizationWeights& weights,
                                      double count_weight = 0.0);

/// G_t = sum_{k>=t} gamma^(k-t) augmented r_k.
std::vector<double> returns_to_go(const Trajectory& traj, double gamma, const RegularizationWeights& weights,
                                  double count_weight = 0.0);

/// A_t = sum_k (gamma lambda)^k delta_{t+k}; `values` has T+1 entries with the
/// bootstrap value last. Bonuses enter delta only when `include_bonus`.
std::vector<double> gae_advantages(const Trajectory& traj, const std::vector<double>& values, double gamma,
                                   double gae_lambda, const RegularizationWeights& weights, bool include_bonus,
                                   double count_weight = 0.0);

/// Flattened batch ready for a loss evaluation.
struct UpdateBatch {
  Matrix states;
  std::vector<int> actions;
  Vector advantages;
  Vector value_targets;  // empty for REINFORCE
  Vector reg_weights;    // per-step weight of the explicit entropy terms
};

/// Advantages and targets for `trajectories` under the current policy.
/// `weights` are the (possibly decayed) weights in force for this update.
UpdateBatch prepare_batch(const GridWorld& world, const NeuralPolicy& policy,
                          const std::vector<Trajectory>& trajectories, const AgentConfig& config,
                          const RegularizationWeights& weights);

struct LossNodes {
  Tape::Id total;
  Tape::Id policy_loss;
  Tape::Id value_loss;  // constant 0 for REINFORCE
  Tape::Id policy_entropy;
  Tape::Id latent_entropy;
  Tape::Id latent_kl;
};

/// L = -mean(log pi(a|s) A) - lambda_pi mean(w H(pi)) - lambda_s mean(w H(q))
///     + kl_weight mean(KL) + value_coef mean((V - target)^2).
LossNodes build_loss(Tape& tape, NeuralPolicy& policy, const UpdateBatch& batch, const AgentConfig& config,
                     const RegularizationWeights& weights, bool detach_latent = false);

class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(const std::vector<Parameter*>& params);
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  long step_count_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

struct UpdateStats {
  double loss = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double mean_policy_entropy = 0.0;
  double mean_latent_entropy = 0.0;
  double grad_norm = 0.0;  // before clipping
};

/// One gradient step. Throws NumericError without touching the parameters
/// when the loss or gradient is non-finite.
UpdateStats update(NeuralPolicy& policy, Adam& optimizer, const GridWorld& world,
                   const std::vector<Trajectory>& trajectories, const AgentConfig& config,
                   const RegularizationWeights& weights);

struct TrainRow {
  int update = 0;
  double env_return_mean = 0.0;
  double env_return_stderr = 0.0;
  double policy_entropy_mean = 0.0;  // over visited steps, whatever the weights
  double latent_entropy_mean = 0.0;
  double coverage = 0.0;  // cumulative
};

struct AgentTrainResult {
  std::vector<TrainRow> record;
  VisitationCounts counts;
  NeuralPolicy final_policy;  // last good parameters
  bool aborted = false;
  std::string abort_reason;
};

AgentTrainResult train(const GridWorld& world, const AgentConfig& config);

/// Fraction of states reachable from the start that were visited at least once.
double coverage_metric(const VisitationCounts& counts, const TabularMDP& mdp);

void write_train_record(std::ostream& out, const std::vector<TrainRow>& record);
/// width x height integer grid; wall cells are 0.
void write_visitation_grid(std::ostream& out, const GridWorld& world, const VisitationCounts& counts);

}  // namespace mselab
