#include "mselab/diffnet.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "mselab/error.hpp"

namespace mselab {

namespace {

std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

Matrix softplus_of(const Matrix& x) {
  return x.unaryExpr([](double v) { return softplus(v); });
}

}  // namespace

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

Tape::Id Tape::push(Matrix value, std::function<void(Tape&, const Node&)> back) {
  nodes_.push_back(Node{std::move(value), Matrix(), std::move(back), nullptr});
  return static_cast<Id>(nodes_.size() - 1);
}

void Tape::accumulate(Id id, const Matrix& g) {
  Matrix& grad = nodes_[static_cast<std::size_t>(id)].grad;
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

void Tape::require_same_shape(Id a, Id b, const char* op) const {
  const Matrix& x = value(a);
  const Matrix& y = value(b);
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    throw DimensionError(std::string(op) + ": shapes " + shape(x) + " and " + shape(y));
  }
}

Tape::Id Tape::constant(Matrix value) { return push(std::move(value), nullptr); }

Tape::Id Tape::parameter(Parameter& param) {
  const Id id = push(param.value, [](Tape&, const Node& n) {
    if (n.param->grad.rows() != n.grad.rows() || n.param->grad.cols() != n.grad.cols()) {
      n.param->grad = n.grad;
    } else {
      n.param->grad += n.grad;
    }
  });
  nodes_.back().param = &param;
  return id;
}

void Tape::backward(Id loss) {
  if (value(loss).size() != 1) throw DimensionError("backward: loss must be 1x1, got " + shape(value(loss)));
  accumulate(loss, Matrix::Ones(1, 1));
  for (auto i = static_cast<std::size_t>(loss) + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (n.grad.size() == 0 || !n.back) continue;
    n.back(*this, n);
  }
}

Tape::Id Tape::matmul(Id a, Id b) {
  if (value(a).cols() != value(b).rows()) {
    throw DimensionError("matmul: shapes " + shape(value(a)) + " and " + shape(value(b)));
  }
  return push(value(a) * value(b), [a, b](Tape& t, const Node& n) {
    t.accumulate(a, n.grad * t.value(b).transpose());
    t.accumulate(b, t.value(a).transpose() * n.grad);
  });
}

Tape::Id Tape::add(Id a, Id b) {
  require_same_shape(a, b, "add");
  return push(value(a) + value(b), [a, b](Tape& t, const Node& n) {
    t.accumulate(a, n.grad);
    t.accumulate(b, n.grad);
  });
}

Tape::Id Tape::sub(Id a, Id b) {
  require_same_shape(a, b, "sub");
  return push(value(a) - value(b), [a, b](Tape& t, const Node& n) {
    t.accumulate(a, n.grad);
    t.accumulate(b, -n.grad);
  });
}

Tape::Id Tape::mul(Id a, Id b) {
  require_same_shape(a, b, "mul");
  return push(value(a).cwiseProduct(value(b)), [a, b](Tape& t, const Node& n) {
    t.accumulate(a, n.grad.cwiseProduct(t.value(b)));
    t.accumulate(b, n.grad.cwiseProduct(t.value(a)));
  });
}

Tape::Id Tape::add_row(Id a, Id row) {
  if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) {
    throw DimensionError("add_row: shapes " + shape(value(a)) + " and " + shape(value(row)));
  }
  Matrix out = value(a).rowwise() + value(row).row(0);
  return push(std::move(out), [a, row](Tape& t, const Node& n) {
    t.accumulate(a, n.grad);
    t.accumulate(row, n.grad.colwise().sum());
  });
}

Tape::Id Tape::scale(Id a, double c) {
  return push(c * value(a), [a, c](Tape& t, const Node& n) { t.accumulate(a, c * n.grad); });
}

Tape::Id Tape::add_scalar(Id a, double c) {
  return push(value(a).array() + c, [a](Tape& t, const Node& n) { t.accumulate(a, n.grad); });
}

Tape::Id Tape::tanh(Id a) {
  return push(value(a).array().tanh(), [a](Tape& t, const Node& n) {
    t.accumulate(a, n.grad.cwiseProduct((1.0 - n.value.array().square()).matrix()));
  });
}

Tape::Id Tape::softplus(Id a) {
  return push(softplus_of(value(a)), [a](Tape& t, const Node& n) {
    const Matrix sig = t.value(a).unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    t.accumulate(a, n.grad.cwiseProduct(sig));
  });
}

Tape::Id Tape::log(Id a) {
  return push(value(a).array().log(), [a](Tape& t, const Node& n) {
    t.accumulate(a, n.grad.cwiseQuotient(t.value(a)));
  });
}

Tape::Id Tape::exp(Id a) {
  return push(value(a).array().exp(), [a](Tape& t, const Node& n) {
    t.accumulate(a, n.grad.cwiseProduct(n.value));
  });
}

Tape::Id Tape::square(Id a) {
  return push(value(a).array().square(), [a](Tape& t, const Node& n) {
    t.accumulate(a, 2.0 * n.grad.cwiseProduct(t.value(a)));
  });
}

Tape::Id Tape::log_softmax(Id a) {
  const Matrix& x = value(a);
  const Vector mx = x.rowwise().maxCoeff();
  const Matrix shifted = x.colwise() - mx;
  const Vector lse = shifted.array().exp().rowwise().sum().log();
  Matrix out = shifted.colwise() - lse;
  return push(std::move(out), [a](Tape& t, const Node& n) {
    const Matrix p = n.value.array().exp();
    const Vector gsum = n.grad.rowwise().sum();
    t.accumulate(a, n.grad - p.cwiseProduct(gsum.replicate(1, p.cols())));
  });
}

Tape::Id Tape::gather(Id a, const std::vector<int>& cols) {
  const Matrix& x = value(a);
  if (static_cast<Eigen::Index>(cols.size()) != x.rows()) {
    throw DimensionError("gather: " + std::to_string(cols.size()) + " indices for " + shape(x));
  }
  Matrix out(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int c = cols[static_cast<std::size_t>(i)];
    if (c < 0 || c >= x.cols()) throw DimensionError("gather: column " + std::to_string(c) + " out of range");
    out(i, 0) = x(i, c);
  }
  return push(std::move(out), [a, cols](Tape& t, const Node& n) {
    Matrix g = Matrix::Zero(t.value(a).rows(), t.value(a).cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, cols[static_cast<std::size_t>(i)]) = n.grad(i, 0);
    t.accumulate(a, g);
  });
}

Tape::Id Tape::row_sum(Id a) {
  Matrix out = value(a).rowwise().sum();
  return push(std::move(out), [a](Tape& t, const Node& n) {
    t.accumulate(a, n.grad.replicate(1, t.value(a).cols()));
  });
}

Tape::Id Tape::sum(Id a) {
  Matrix out = Matrix::Constant(1, 1, value(a).sum());
  return push(std::move(out), [a](Tape& t, const Node& n) {
    t.accumulate(a, Matrix::Constant(t.value(a).rows(), t.value(a).cols(), n.grad(0, 0)));
  });
}

Tape::Id Tape::mean(Id a) {
  const auto count = static_cast<double>(value(a).size());
  if (count == 0) throw DimensionError("mean of an empty matrix");
  Matrix out = Matrix::Constant(1, 1, value(a).sum() / count);
  return push(std::move(out), [a, count](Tape& t, const Node& n) {
    t.accumulate(a, Matrix::Constant(t.value(a).rows(), t.value(a).cols(), n.grad(0, 0) / count));
  });
}

Tape::Id Tape::detach(Id a) { return push(value(a), nullptr); }

Mlp::Mlp(std::vector<int> dims, Activation output_activation, const std::string& prefix, Rng& rng, bool zero_init)
    : dims_(std::move(dims)), output_activation_(output_activation) {
  if (dims_.size() < 2) throw DimensionError("Mlp needs at least input and output dims");
  for (int d : dims_) {
    if (d < 1) throw DimensionError("Mlp dims must be positive");
  }
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    const int fan_in = dims_[l];
    const int fan_out = dims_[l + 1];
    Matrix w = Matrix::Zero(fan_in, fan_out);
    if (!zero_init) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (Eigen::Index j = 0; j < w.cols(); ++j) {
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = scale * standard_normal(rng);
      }
    }
    weights_.push_back({prefix + ".w" + std::to_string(l), std::move(w), Matrix::Zero(fan_in, fan_out)});
    biases_.push_back({prefix + ".b" + std::to_string(l), Matrix::Zero(1, fan_out), Matrix::Zero(1, fan_out)});
  }
}

Tape::Id Mlp::forward(Tape& tape, Tape::Id x) {
  Tape::Id h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    h = tape.add_row(tape.matmul(h, tape.parameter(weights_[l])), tape.parameter(biases_[l]));
    const bool last = l + 1 == weights_.size();
    if (!last || output_activation_ == Activation::kTanh) h = tape.tanh(h);
  }
  return h;
}

Matrix Mlp::forward(const Matrix& x) const {
  if (x.cols() != input_dim()) {
    throw DimensionError("Mlp input has " + std::to_string(x.cols()) + " columns, expected " +
                         std::to_string(input_dim()));
  }
  Matrix h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Matrix next = (h * weights_[l].value).rowwise() + biases_[l].value.row(0);
    const bool last = l + 1 == weights_.size();
    if (!last || output_activation_ == Activation::kTanh) next = next.array().tanh();
    h = std::move(next);
  }
  return h;
}

std::vector<Parameter*> Mlp::parameters() {
  std::vector<Parameter*> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

std::vector<const Parameter*> Mlp::parameters() const {
  std::vector<const Parameter*> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

LatentGaussian LatentGaussian::from_raw(Vector mean, const Vector& log_std_raw) {
  if (mean.size() != log_std_raw.size()) throw DimensionError("LatentGaussian: mean and scale sizes differ");
  Vector sigma = log_std_raw.unaryExpr([](double v) { return softplus(v) + kSigmaFloor; });
  return {std::move(mean), std::move(sigma)};
}

double LatentGaussian::log_density(const Vector& z) const {
  if (z.size() != mean.size()) throw DimensionError("log_density: sample has wrong size");
  const double half_log_2pi = 0.9189385332046727;
  double lp = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double u = (z[i] - mean[i]) / sigma[i];
    lp += -0.5 * u * u - std::log(sigma[i]) - half_log_2pi;
  }
  return lp;
}

Vector LatentGaussian::sample(Rng& rng) const {
  Vector z(mean.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = mean[i] + sigma[i] * standard_normal(rng);
  return z;
}

double gaussian_entropy(const LatentGaussian& g) {
  return g.dim() * kHalfLog2PiE + g.sigma.array().log().sum();
}

double kl_standard_normal(const LatentGaussian& g) {
  const auto s2 = g.sigma.array().square();
  return 0.5 * (g.mean.array().square() + s2 - 1.0 - s2.log()).sum();
}

double categorical_entropy(const Vector& logits) {
  const double mx = logits.maxCoeff();
  const Vector shifted = logits.array() - mx;
  const double lse = std::log(shifted.array().exp().sum());
  double h = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double lp = shifted[i] - lse;
    h -= std::exp(lp) * lp;
  }
  return h;
}

Tape::Id gaussian_entropy_node(Tape& tape, Tape::Id sigma) {
  const auto z = static_cast<double>(tape.value(sigma).cols());
  return tape.add_scalar(tape.row_sum(tape.log(sigma)), z * kHalfLog2PiE);
}

Tape::Id kl_standard_normal_node(Tape& tape, Tape::Id mean, Tape::Id sigma) {
  // 0.5 sum(mu^2 + sigma^2 - 1 - 2 ln sigma)
  const Tape::Id quad = tape.add(tape.square(mean), tape.square(sigma));
  const Tape::Id inner = tape.sub(quad, tape.scale(tape.log(sigma), 2.0));
  return tape.scale(tape.add_scalar(tape.row_sum(inner), -static_cast<double>(tape.value(mean).cols())), 0.5);
}

Tape::Id categorical_entropy_node(Tape& tape, Tape::Id log_probs) {
  return tape.scale(tape.row_sum(tape.mul(tape.exp(log_probs), log_probs)), -1.0);
}

LatentGaussian PolicyOutputs::latent(Eigen::Index row) const {
  return {mean.row(row).transpose(), sigma.row(row).transpose()};
}

NeuralPolicy::NeuralPolicy(PolicyArch arch, std::uint64_t seed) : arch_(std::move(arch)) {
  if (arch_.input_dim < 1 || arch_.num_actions < 1 || arch_.z_dim < 1) {
    throw DimensionError("NeuralPolicy: input_dim, num_actions and z_dim must be positive");
  }
  Rng rng(seed);
  std::vector<int> trunk_dims = {arch_.input_dim};
  trunk_dims.insert(trunk_dims.end(), arch_.hidden.begin(), arch_.hidden.end());
  const int feat = trunk_dims.back();
  if (arch_.hidden.empty()) {
    throw DimensionError("NeuralPolicy: at least one hidden layer is required");
  }
  trunk_ = Mlp(trunk_dims, Activation::kTanh, "trunk", rng);
  logits_head_ = Mlp({feat, arch_.num_actions}, Activation::kLinear, "logits", rng, true);
  mean_head_ = Mlp({feat, arch_.z_dim}, Activation::kLinear, "latent_mean", rng, true);
  scale_head_ = Mlp({feat, arch_.z_dim}, Activation::kLinear, "latent_scale", rng, true);
  value_head_ = Mlp({feat, 1}, Activation::kLinear, "value", rng, true);
}

void NeuralPolicy::check_input(const Matrix& states) const {
  if (states.cols() != arch_.input_dim) {
    throw DimensionError("state encoding has " + std::to_string(states.cols()) + " columns, policy expects " +
                         std::to_string(arch_.input_dim));
  }
}

void NeuralPolicy::check_finite(const PolicyOutputs& out) const {
  if (out.logits.allFinite() && out.mean.allFinite() && out.sigma.allFinite() && out.value.allFinite()) return;
  std::ostringstream msg;
  msg << "non-finite policy output;";
  for (const Parameter* p : parameters()) {
    msg << ' ' << p->name << (p->value.allFinite() ? "" : "(non-finite)")
        << " max|.|=" << p->value.cwiseAbs().maxCoeff();
  }
  throw NumericError(msg.str());
}

PolicyOutputs NeuralPolicy::forward(const Matrix& states) const {
  check_input(states);
  const Matrix h = trunk_.forward(states);
  PolicyOutputs out;
  out.logits = logits_head_.forward(h);
  out.mean = mean_head_.forward(h);
  out.sigma = softplus_of(scale_head_.forward(h)).array() + kSigmaFloor;
  out.value = value_head_.forward(h).col(0);
  check_finite(out);
  return out;
}

PolicyNodes NeuralPolicy::forward(Tape& tape, const Matrix& states, bool detach_latent) {
  check_input(states);
  const Tape::Id x = tape.constant(states);
  const Tape::Id h = trunk_.forward(tape, x);
  const Tape::Id latent_in = detach_latent ? tape.detach(h) : h;
  PolicyNodes n{};
  n.logits = logits_head_.forward(tape, h);
  n.log_probs = tape.log_softmax(n.logits);
  n.mean = mean_head_.forward(tape, latent_in);
  n.sigma = tape.add_scalar(tape.softplus(scale_head_.forward(tape, latent_in)), kSigmaFloor);
  n.value = value_head_.forward(tape, h);
  n.policy_entropy = categorical_entropy_node(tape, n.log_probs);
  n.latent_entropy = gaussian_entropy_node(tape, n.sigma);
  n.latent_kl = kl_standard_normal_node(tape, n.mean, n.sigma);
  return n;
}

std::vector<Parameter*> NeuralPolicy::parameters() {
  std::vector<Parameter*> out;
  for (Mlp* m : {&trunk_, &logits_head_, &mean_head_, &scale_head_, &value_head_}) {
    for (Parameter* p : m->parameters()) out.push_back(p);
  }
  return out;
}

std::vector<const Parameter*> NeuralPolicy::parameters() const {
  std::vector<const Parameter*> out;
  for (const Mlp* m : {&trunk_, &logits_head_, &mean_head_, &scale_head_, &value_head_}) {
    for (const Parameter* p : m->parameters()) out.push_back(p);
  }
  return out;
}

std::size_t NeuralPolicy::num_parameters() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void NeuralPolicy::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

Vector NeuralPolicy::flat_parameters() const {
  Vector flat(static_cast<Eigen::Index>(num_parameters()));
  Eigen::Index k = 0;
  for (const Parameter* p : parameters()) {
    flat.segment(k, p->value.size()) = p->value.reshaped();
    k += p->value.size();
  }
  return flat;
}

void NeuralPolicy::set_flat_parameters(const Vector& flat) {
  if (flat.size() != static_cast<Eigen::Index>(num_parameters())) {
    throw DimensionError("flat parameter vector has " + std::to_string(flat.size()) + " entries, expected " +
                         std::to_string(num_parameters()));
  }
  Eigen::Index k = 0;
  for (Parameter* p : parameters()) {
    p->value.reshaped() = flat.segment(k, p->value.size());
    k += p->value.size();
  }
}

Vector NeuralPolicy::flat_gradient() const {
  Vector flat(static_cast<Eigen::Index>(num_parameters()));
  Eigen::Index k = 0;
  for (const Parameter* p : parameters()) {
    if (p->grad.size() == p->value.size()) {
      flat.segment(k, p->value.size()) = p->grad.reshaped();
    } else {
      flat.segment(k, p->value.size()).setZero();
    }
    k += p->value.size();
  }
  return flat;
}

void save_checkpoint(std::ostream& out, const NeuralPolicy& policy) {
  const auto params = policy.parameters();
  out << "mselab-checkpoint 1 " << params.size() << '\n';
  out.precision(17);
  for (const Parameter* p : params) {
    out << p->name << ' ' << p->value.rows() << ' ' << p->value.cols() << '\n';
    for (Eigen::Index i = 0; i < p->value.rows(); ++i) {
      for (Eigen::Index j = 0; j < p->value.cols(); ++j) out << (j ? " " : "") << p->value(i, j);
      out << '\n';
    }
  }
}

void load_checkpoint(std::istream& in, NeuralPolicy& policy) {
  std::string magic;
  int version = 0;
  std::size_t count = 0;
  if (!(in >> magic >> version >> count) || magic != "mselab-checkpoint" || version != 1) {
    throw DomainError("not a mselab checkpoint");
  }
  auto params = policy.parameters();
  if (count != params.size()) {
    throw DimensionError("checkpoint has " + std::to_string(count) + " tensors, policy has " +
                         std::to_string(params.size()));
  }
  // Parse everything before touching the policy so a bad file leaves it intact.
  std::vector<Matrix> values;
  for (const Parameter* p : params) {
    std::string name;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    if (!(in >> name >> rows >> cols)) throw DomainError("truncated checkpoint");
    if (name != p->name || rows != p->value.rows() || cols != p->value.cols()) {
      throw DimensionError("checkpoint tensor " + name + " " + std::to_string(rows) + "x" + std::to_string(cols) +
                           " does not match " + p->name + " " + shape(p->value));
    }
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) {
        if (!(in >> m(i, j))) throw DomainError("truncated checkpoint in " + name);
      }
    }
    values.push_back(std::move(m));
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = std::move(values[i]);
}

}  // namespace mselab
