#pragma once

// Small reverse-mode autodiff over row-batched Eigen matrices, a tanh MLP,
// and the policy network that emits action logits, a diagonal Gaussian
// q(z|s) and a value estimate from one shared trunk.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "mselab/mdp.hpp"
#include "mselab/random.hpp"

namespace mselab {

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;  // accumulated by Tape::backward

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Records a computation on matrices and replays it backwards. Nodes are
/// appended in evaluation order, so reverse insertion order is a valid
/// topological order. A tape is single-use: build, backward, discard.
class Tape {
 public:
  using Id = int;

  Id constant(Matrix value);
  /// Leaf bound to a parameter; backward adds into param.grad.
  Id parameter(Parameter& param);

  const Matrix& value(Id id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  const Matrix& grad(Id id) const { return nodes_.at(static_cast<std::size_t>(id)).grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d loss / d loss = 1 and propagates. `loss` must be 1x1.
  void backward(Id loss);

  Id matmul(Id a, Id b);
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);      // elementwise
  Id add_row(Id a, Id row);  // broadcast a 1 x m row over every row of a
  Id scale(Id a, double c);
  Id add_scalar(Id a, double c);
  Id tanh(Id a);
  Id softplus(Id a);
  Id log(Id a);
  Id exp(Id a);
  Id square(Id a);
  Id log_softmax(Id a);  // per row
  Id gather(Id a, const std::vector<int>& cols);  // n x 1, a(i, cols[i])
  Id row_sum(Id a);                               // n x 1
  Id sum(Id a);                                   // 1 x 1
  Id mean(Id a);                                  // 1 x 1
  /// Same value, no gradient flows back through it.
  Id detach(Id a);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&, const Node&)> back;
    Parameter* param = nullptr;
  };

  Id push(Matrix value, std::function<void(Tape&, const Node&)> back);
  void accumulate(Id id, const Matrix& g);
  void require_same_shape(Id a, Id b, const char* op) const;

  std::vector<Node> nodes_;
};

/// Numerically stable ln(1 + e^x).
double softplus(double x);

enum class Activation { kLinear, kTanh };

/// Dense layers [input, hidden..., output]; tanh on hidden layers and
/// `output_activation` on the last one.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::vector<int> dims, Activation output_activation, const std::string& prefix, Rng& rng,
      bool zero_init = false);

  Tape::Id forward(Tape& tape, Tape::Id x);
  Matrix forward(const Matrix& x) const;

  const std::vector<int>& dims() const { return dims_; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  /// Weights then bias, layer by layer.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

 private:
  std::vector<int> dims_;
  Activation output_activation_ = Activation::kLinear;
  std::vector<Parameter> weights_;  // in x out
  std::vector<Parameter> biases_;   // 1 x out
};

inline constexpr double kSigmaFloor = 1e-3;
inline constexpr double kHalfLog2PiE = 1.4189385332046727;  // 0.5 ln(2 pi e)

/// Diagonal Gaussian; sigma already includes the floor.
struct LatentGaussian {
  Vector mean;
  Vector sigma;

  /// sigma_i = softplus(raw_i) + floor
  static LatentGaussian from_raw(Vector mean, const Vector& log_std_raw);
  int dim() const { return static_cast<int>(mean.size()); }
  double log_density(const Vector& z) const;
  Vector sample(Rng& rng) const;
};

/// sum_i 0.5 ln(2 pi e) + ln sigma_i, nats.
double gaussian_entropy(const LatentGaussian& g);
/// KL(g || N(0, I)).
double kl_standard_normal(const LatentGaussian& g);
/// Entropy of softmax(logits), nats.
double categorical_entropy(const Vector& logits);

struct PolicyArch {
  int input_dim = 0;
  int num_actions = 4;
  std::vector<int> hidden = {64};
  int z_dim = 64;
};

/// Plain forward result, one row per input state.
struct PolicyOutputs {
  Matrix logits;  // n x A
  Matrix mean;    // n x Z
  Matrix sigma;   // n x Z, floored
  Vector value;   // n

  LatentGaussian latent(Eigen::Index row) const;
};

/// Tape handles for the same quantities plus derived per-row terms.
struct PolicyNodes {
  Tape::Id logits;
  Tape::Id log_probs;       // n x A
  Tape::Id mean;            // n x Z
  Tape::Id sigma;           // n x Z
  Tape::Id value;           // n x 1
  Tape::Id policy_entropy;  // n x 1
  Tape::Id latent_entropy;  // n x 1
  Tape::Id latent_kl;       // n x 1
};

/// Per-row Gaussian entropy / KL nodes from mean and floored sigma nodes.
Tape::Id gaussian_entropy_node(Tape& tape, Tape::Id sigma);
Tape::Id kl_standard_normal_node(Tape& tape, Tape::Id mean, Tape::Id sigma);
Tape::Id categorical_entropy_node(Tape& tape, Tape::Id log_probs);

/// p(a, z | s) = pi(a|s) q(z|s): shared tanh trunk, linear heads for
/// logits, latent mean, latent raw scale and value. Heads start at zero.
class NeuralPolicy {
 public:
  NeuralPolicy(PolicyArch arch, std::uint64_t seed);

  const PolicyArch& arch() const { return arch_; }

  PolicyOutputs forward(const Matrix& states) const;
  /// Builds the forward graph on `tape`. When `detach_latent` is set the
  /// latent head is cut off from the trunk.
  PolicyNodes forward(Tape& tape, const Matrix& states, bool detach_latent = false);

  /// Stable order: trunk, logits head, mean head, scale head, value head.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t num_parameters() const;
  void zero_grad();

  Vector flat_parameters() const;
  void set_flat_parameters(const Vector& flat);
  Vector flat_gradient() const;

 private:
  void check_input(const Matrix& states) const;
  void check_finite(const PolicyOutputs& out) const;

  PolicyArch arch_;
  Mlp trunk_;
  Mlp logits_head_;
  Mlp mean_head_;
  Mlp scale_head_;
  Mlp value_head_;
};

/// Text checkpoint: header line, then per tensor "name rows cols" and values.
void save_checkpoint(std::ostream& out, const NeuralPolicy& policy);
/// Throws DimensionError when names or shapes differ from `policy`.
void load_checkpoint(std::istream& in, NeuralPolicy& policy);

}  // namespace mselab
