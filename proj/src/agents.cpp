#include "mselab/agents.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>

#include "mselab/error.hpp"

namespace mselab {

std::string to_string(Algorithm a) { return a == Algorithm::kReinforce ? "reinforce" : "a2c_gae"; }

Algorithm parse_algorithm(const std::string& s) {
  if (s == "reinforce") return Algorithm::kReinforce;
  if (s == "a2c_gae") return Algorithm::kA2cGae;
  throw DomainError("unknown algorithm '" + s + "' (expected reinforce or a2c_gae)");
}

std::string to_string(StateEncoding e) { return e == StateEncoding::kOneHot ? "one_hot" : "coordinates"; }

StateEncoding parse_encoding(const std::string& s) {
  if (s == "one_hot") return StateEncoding::kOneHot;
  if (s == "coordinates") return StateEncoding::kCoordinates;
  throw DomainError("unknown state encoding '" + s + "' (expected one_hot or coordinates)");
}

void AgentConfig::validate() const {
  weights.validate();
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw DomainError("gae_lambda must lie in [0, 1]");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw DomainError("gamma must lie in [0, 1]");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw DomainError("learning_rate must be >= 0");
  if (rollout_batch < 1) throw DomainError("rollout_batch must be >= 1");
  if (max_updates < 0) throw DomainError("max_updates must be >= 0");
  if (!(value_coef >= 0.0)) throw DomainError("value_coef must be >= 0");
  if (!(kl_weight >= 0.0)) throw DomainError("kl_weight must be >= 0");
  if (!(count_bonus >= 0.0)) throw DomainError("count_bonus must be >= 0");
  if (!std::isfinite(max_grad_norm)) throw DomainError("max_grad_norm must be finite");
  if (hidden.empty()) throw DomainError("at least one hidden layer is required");
  for (int h : hidden) {
    if (h < 1) throw DomainError("hidden layer sizes must be positive");
  }
  if (z_dim < 1) throw DomainError("z_dim must be positive");
}

int encoding_dim(const GridWorld& world, StateEncoding encoding) {
  return encoding == StateEncoding::kOneHot ? world.index.num_states() : 2;
}

Matrix encode_states(const GridWorld& world, StateEncoding encoding, const std::vector<int>& states) {
  const int n = world.index.num_states();
  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(states.size()), encoding_dim(world, encoding));
  const double sx = world.spec.width > 1 ? 1.0 / (world.spec.width - 1) : 0.0;
  const double sy = world.spec.height > 1 ? 1.0 / (world.spec.height - 1) : 0.0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    const int s = states[i];
    if (s < 0 || s >= n) throw DimensionError("state " + std::to_string(s) + " out of range");
    const auto row = static_cast<Eigen::Index>(i);
    if (encoding == StateEncoding::kOneHot) {
      x(row, s) = 1.0;
    } else {
      const Cell c = world.index.cell_of(s);
      x(row, 0) = c.x * sx;
      x(row, 1) = c.y * sy;
    }
  }
  return x;
}

NeuralPolicy make_policy(const GridWorld& world, const AgentConfig& config) {
  PolicyArch arch;
  arch.input_dim = encoding_dim(world, config.encoding);
  arch.num_actions = world.mdp.num_actions();
  arch.hidden = config.hidden;
  arch.z_dim = config.z_dim;
  return NeuralPolicy(arch, derive_seed(config.seed, 3));
}

double Trajectory::env_return() const {
  double total = 0.0;
  for (const auto& st : steps) total += st.env_reward;
  return total;
}

void VisitationCounts::add(const Trajectory& traj) {
  for (const auto& st : traj.steps) ++counts.at(static_cast<std::size_t>(st.state));
  ++counts.at(static_cast<std::size_t>(traj.final_state));
}

std::int64_t VisitationCounts::total() const {
  std::int64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

namespace {

std::vector<int> all_states(int n) {
  std::vector<int> s(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) s[static_cast<std::size_t>(i)] = i;
  return s;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp();
  const Vector z = p.rowwise().sum();
  return p.array().colwise() / z.array();
}

}  // namespace

StateEntropies state_entropies(const GridWorld& world, const NeuralPolicy& policy, StateEncoding encoding) {
  const int n = world.index.num_states();
  const PolicyOutputs out = policy.forward(encode_states(world, encoding, all_states(n)));
  StateEntropies h;
  for (int s = 0; s < n; ++s) {
    h.policy.push_back(categorical_entropy(out.logits.row(s).transpose()));
    h.latent.push_back(gaussian_entropy(out.latent(s)));
  }
  return h;
}

std::vector<Trajectory> collect_rollouts(GridEnv& env, const NeuralPolicy& policy, const AgentConfig& config,
                                         Rng& rng, std::int64_t first_episode, const CollectOptions& options) {
  const GridWorld& world = env.world();
  const int n = world.index.num_states();
  // Bonuses depend only on (theta, s), so one pass over all states serves the batch.
  const PolicyOutputs out = policy.forward(encode_states(world, config.encoding, all_states(n)));
  if (out.logits.cols() != env.num_actions()) throw DimensionError("policy and environment action counts differ");
  const Matrix probs = softmax_rows(out.logits);
  std::vector<double> h_pi(static_cast<std::size_t>(n));
  std::vector<double> h_q(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    h_pi[s] = categorical_entropy(out.logits.row(s).transpose());
    h_q[s] = gaussian_entropy(out.latent(s));
    if (!std::isfinite(h_pi[s]) || !std::isfinite(h_q[s])) {
      throw NumericError("non-finite entropy bonus at state " + std::to_string(s));
    }
  }
  if (options.counts && static_cast<int>(options.counts->counts.size()) != n) {
    throw DimensionError("visitation counts do not match the environment");
  }

  std::vector<Trajectory> batch;
  batch.reserve(static_cast<std::size_t>(config.rollout_batch));
  for (int e = 0; e < config.rollout_batch; ++e) {
    Trajectory traj;
    traj.episode = first_episode + e;
    traj.seed = config.seed;
    int s = env.reset();
    while (true) {
      TrajectoryStep st;
      st.state = s;
      if (options.greedy) {
        Eigen::Index best = 0;
        probs.row(s).maxCoeff(&best);
        st.action = static_cast<int>(best);
      } else {
        const Vector p = probs.row(s).transpose();
        st.action = sample_categorical({p.data(), static_cast<std::size_t>(p.size())}, rng);
      }
      // A bonus whose weight is zero is recorded as 0.
      st.bonus_policy_entropy = config.weights.lambda_pi != 0.0 ? h_pi[s] : 0.0;
      st.bonus_state_entropy = config.weights.lambda_s != 0.0 ? h_q[s] : 0.0;
      if (options.counts) {
        st.bonus_count = 1.0 / std::sqrt(1.0 + static_cast<double>(options.counts->counts[s]));
      }
      const EnvStep step = env.step(st.action);
      st.env_reward = step.reward;
      st.done = step.done;
      traj.steps.push_back(st);
      s = step.next_state;
      if (step.done) {
        traj.truncated = step.truncated;
        traj.final_state = s;
        break;
      }
    }
    batch.push_back(std::move(traj));
  }
  return batch;
}

std::vector<double> augmented_rewards(const Trajectory& traj, const RegularizationWeights& weights,
                                      double count_weight) {
  std::vector<double> r;
  r.reserve(traj.steps.size());
  for (const auto& st : traj.steps) {
    r.push_back(st.env_reward + weights.lambda_pi * st.bonus_policy_entropy +
                weights.lambda_s * st.bonus_state_entropy + count_weight * st.bonus_count);
  }
  return r;
}

std::vector<double> returns_to_go(const Trajectory& traj, double gamma, const RegularizationWeights& weights,
                                  double count_weight) {
  std::vector<double> g = augmented_rewards(traj, weights, count_weight);
  double acc = 0.0;
  for (std::size_t t = g.size(); t-- > 0;) {
    acc = g[t] + gamma * acc;
    g[t] = acc;
  }
  return g;
}

std::vector<double> gae_advantages(const Trajectory& traj, const std::vector<double>& values, double gamma,
                                   double gae_lambda, const RegularizationWeights& weights, bool include_bonus,
                                   double count_weight) {
  const std::size_t len = traj.steps.size();
  if (values.size() != len + 1) {
    throw DimensionError("gae_advantages: " + std::to_string(values.size()) + " values for " + std::to_string(len) +
                         " steps (need T+1)");
  }
  std::vector<double> r;
  if (include_bonus) {
    r = augmented_rewards(traj, weights, count_weight);
  } else {
    for (const auto& st : traj.steps) r.push_back(st.env_reward);
  }
  std::vector<double> adv(len);
  double acc = 0.0;
  for (std::size_t t = len; t-- > 0;) {
    const double delta = r[t] + gamma * values[t + 1] - values[t];
    acc = delta + gamma * gae_lambda * acc;
    adv[t] = acc;
  }
  return adv;
}

UpdateBatch prepare_batch(const GridWorld& world, const NeuralPolicy& policy,
                          const std::vector<Trajectory>& trajectories, const AgentConfig& config,
                          const RegularizationWeights& weights) {
  if (trajectories.empty()) throw UsageError("update needs at least one trajectory");
  std::size_t total = 0;
  for (const auto& tr : trajectories) total += tr.steps.size();
  if (total == 0) throw UsageError("update needs at least one step");

  const bool a2c = config.algorithm == Algorithm::kA2cGae;
  Vector state_values;
  if (a2c) {
    state_values = policy.forward(encode_states(world, config.encoding, all_states(world.index.num_states()))).value;
  }

  UpdateBatch batch;
  std::vector<int> states;
  states.reserve(total);
  batch.actions.reserve(total);
  batch.advantages.resize(static_cast<Eigen::Index>(total));
  batch.reg_weights.resize(static_cast<Eigen::Index>(total));
  if (a2c) batch.value_targets.resize(static_cast<Eigen::Index>(total));

  Eigen::Index k = 0;
  for (const auto& tr : trajectories) {
    std::vector<double> adv;
    std::vector<double> values;
    if (a2c) {
      for (const auto& st : tr.steps) values.push_back(state_values[st.state]);
      values.push_back(tr.truncated ? state_values[tr.final_state] : 0.0);
      adv = gae_advantages(tr, values, config.gamma, config.gae_lambda, weights, config.bonus_in_critic,
                           config.count_bonus);
    } else {
      adv = returns_to_go(tr, config.gamma, weights, config.count_bonus);
    }
    double discount = 1.0;
    for (std::size_t t = 0; t < tr.steps.size(); ++t, ++k) {
      states.push_back(tr.steps[t].state);
      batch.actions.push_back(tr.steps[t].action);
      batch.advantages[k] = adv[t];
      if (a2c) batch.value_targets[k] = adv[t] + values[t];
      batch.reg_weights[k] = config.discount_entropy_reg ? discount : 1.0;
      discount *= config.gamma;
    }
  }
  batch.states = encode_states(world, config.encoding, states);

  if (config.normalize_advantages) {
    const double mean = batch.advantages.mean();
    const double var = (batch.advantages.array() - mean).square().mean();
    batch.advantages = (batch.advantages.array() - mean) / (std::sqrt(var) + 1e-8);
  }
  return batch;
}

LossNodes build_loss(Tape& tape, NeuralPolicy& policy, const UpdateBatch& batch, const AgentConfig& config,
                     const RegularizationWeights& weights, bool detach_latent) {
  const PolicyNodes out = policy.forward(tape, batch.states, detach_latent);
  const Tape::Id adv = tape.constant(batch.advantages);
  const Tape::Id w = tape.constant(batch.reg_weights);

  LossNodes loss{};
  loss.policy_loss = tape.scale(tape.mean(tape.mul(tape.gather(out.log_probs, batch.actions), adv)), -1.0);
  loss.policy_entropy = tape.mean(tape.mul(out.policy_entropy, w));
  loss.latent_entropy = tape.mean(tape.mul(out.latent_entropy, w));
  loss.latent_kl = tape.mean(out.latent_kl);

  Tape::Id total = loss.policy_loss;
  if (weights.lambda_pi != 0.0) total = tape.sub(total, tape.scale(loss.policy_entropy, weights.lambda_pi));
  if (weights.lambda_s != 0.0) total = tape.sub(total, tape.scale(loss.latent_entropy, weights.lambda_s));
  if (config.kl_weight != 0.0) total = tape.add(total, tape.scale(loss.latent_kl, config.kl_weight));
  if (config.algorithm == Algorithm::kA2cGae) {
    const Tape::Id err = tape.sub(out.value, tape.constant(batch.value_targets));
    loss.value_loss = tape.mean(tape.square(err));
    if (config.value_coef != 0.0) total = tape.add(total, tape.scale(loss.value_loss, config.value_coef));
  } else {
    loss.value_loss = tape.constant(Matrix::Zero(1, 1));
  }
  loss.total = total;
  return loss;
}

Adam::Adam(double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(const std::vector<Parameter*>& params) {
  if (m_.empty()) {
    for (const Parameter* p : params) {
      m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (m_.size() != params.size()) throw DimensionError("Adam: parameter list changed between steps");
  ++step_count_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

UpdateStats update(NeuralPolicy& policy, Adam& optimizer, const GridWorld& world,
                   const std::vector<Trajectory>& trajectories, const AgentConfig& config,
                   const RegularizationWeights& weights) {
  const UpdateBatch batch = prepare_batch(world, policy, trajectories, config, weights);
  policy.zero_grad();
  Tape tape;
  const LossNodes loss = build_loss(tape, policy, batch, config, weights);
  UpdateStats stats;
  stats.loss = tape.value(loss.total)(0, 0);
  stats.policy_loss = tape.value(loss.policy_loss)(0, 0);
  stats.value_loss = tape.value(loss.value_loss)(0, 0);
  stats.mean_policy_entropy = tape.value(loss.policy_entropy)(0, 0);
  stats.mean_latent_entropy = tape.value(loss.latent_entropy)(0, 0);
  if (!std::isfinite(stats.loss)) throw NumericError("non-finite loss");
  tape.backward(loss.total);

  const auto params = policy.parameters();
  double sq = 0.0;
  for (const Parameter* p : params) sq += p->grad.squaredNorm();
  stats.grad_norm = std::sqrt(sq);
  if (!std::isfinite(stats.grad_norm)) throw NumericError("non-finite gradient");
  if (config.max_grad_norm > 0.0 && stats.grad_norm > config.max_grad_norm) {
    const double c = config.max_grad_norm / stats.grad_norm;
    for (Parameter* p : params) p->grad *= c;
  }
  optimizer.step(params);
  return stats;
}

AgentTrainResult train(const GridWorld& world, const AgentConfig& config) {
  config.validate();
  GridEnv env(world, derive_seed(config.seed, 1));
  Rng rng(derive_seed(config.seed, 2));
  AgentTrainResult result{{}, VisitationCounts(world.index.num_states()), make_policy(world, config), false, {}};
  NeuralPolicy& policy = result.final_policy;
  Adam optimizer(config.learning_rate);
  CollectOptions options;
  if (config.count_bonus > 0.0) options.counts = &result.counts;

  for (int u = 0; u < config.max_updates; ++u) {
    const RegularizationWeights weights = config.weights.decayed(u);
    const Vector before = policy.flat_parameters();
    try {
      const StateEntropies entropies = state_entropies(world, policy, config.encoding);
      const auto trajectories = collect_rollouts(env, policy, config, rng,
                                                 static_cast<std::int64_t>(u) * config.rollout_batch, options);
      TrainRow row;
      row.update = u;
      std::vector<double> returns;
      double h_pi = 0.0;
      double h_q = 0.0;
      std::size_t steps = 0;
      for (const auto& tr : trajectories) {
        returns.push_back(tr.env_return());
        for (const auto& st : tr.steps) {
          h_pi += entropies.policy[static_cast<std::size_t>(st.state)];
          h_q += entropies.latent[static_cast<std::size_t>(st.state)];
        }
        steps += tr.steps.size();
        result.counts.add(tr);
      }
      double mean = 0.0;
      for (double r : returns) mean += r;
      mean /= static_cast<double>(returns.size());
      double var = 0.0;
      for (double r : returns) var += (r - mean) * (r - mean);
      const auto n = static_cast<double>(returns.size());
      row.env_return_mean = mean;
      row.env_return_stderr = returns.size() > 1 ? std::sqrt(var / (n - 1.0)) / std::sqrt(n) : 0.0;
      row.policy_entropy_mean = steps ? h_pi / static_cast<double>(steps) : 0.0;
      row.latent_entropy_mean = steps ? h_q / static_cast<double>(steps) : 0.0;
      row.coverage = coverage_metric(result.counts, world.mdp);
      result.record.push_back(row);

      update(policy, optimizer, world, trajectories, config, weights);
      if (!policy.flat_parameters().allFinite()) throw NumericError("non-finite parameters after update");
    } catch (const NumericError& e) {
      policy.set_flat_parameters(before);
      result.aborted = true;
      result.abort_reason = "update " + std::to_string(u) + ": " + e.what();
      break;
    }
  }
  return result;
}

double coverage_metric(const VisitationCounts& counts, const TabularMDP& mdp) {
  if (static_cast<int>(counts.counts.size()) != mdp.num_states()) {
    throw DimensionError("coverage_metric: counts cover " + std::to_string(counts.counts.size()) +
                         " states, MDP has " + std::to_string(mdp.num_states()));
  }
  const auto reachable = reachable_states(mdp);
  int total = 0;
  int visited = 0;
  for (int s = 0; s < mdp.num_states(); ++s) {
    if (!reachable[static_cast<std::size_t>(s)]) continue;
    ++total;
    if (counts.counts[static_cast<std::size_t>(s)] > 0) ++visited;
  }
  return total ? static_cast<double>(visited) / total : 0.0;
}

void write_train_record(std::ostream& out, const std::vector<TrainRow>& record) {
  out << "update,env_return_mean,env_return_stderr,H_policy_mean,H_latent_mean,coverage\n";
  out << std::setprecision(17);
  for (const auto& r : record) {
    out << r.update << ',' << r.env_return_mean << ',' << r.env_return_stderr << ',' << r.policy_entropy_mean << ','
        << r.latent_entropy_mean << ',' << r.coverage << '\n';
  }
}

void write_visitation_grid(std::ostream& out, const GridWorld& world, const VisitationCounts& counts) {
  for (int y = 0; y < world.spec.height; ++y) {
    for (int x = 0; x < world.spec.width; ++x) {
      const int s = world.index.state_of({x, y});
      out << (x ? "," : "") << (s < 0 ? 0 : counts.counts.at(static_cast<std::size_t>(s)));
    }
    out << '\n';
  }
}

}  // namespace mselab
