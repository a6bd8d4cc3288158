#include <cmath>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "mselab/diffnet.hpp"
#include "mselab/error.hpp"
#include "mselab/oracle.hpp"

using namespace mselab;

namespace {

PolicyArch small_arch(int input = 5, int actions = 3, int z = 4) {
  return {.input_dim = input, .num_actions = actions, .hidden = {6, 5}, .z_dim = z};
}

Matrix random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (int j = 0; j < cols; ++j) {
    for (int i = 0; i < rows; ++i) m(i, j) = scale * standard_normal(rng);
  }
  return m;
}

// Heads start at zero; gradient checks want every block non-trivial.
void randomize(NeuralPolicy& policy, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  Vector flat = policy.flat_parameters();
  for (Eigen::Index i = 0; i < flat.size(); ++i) flat[i] = scale * standard_normal(rng);
  policy.set_flat_parameters(flat);
}

// Composite loss touching every node type an update uses.
struct CompositeLoss {
  Matrix states;
  std::vector<int> actions;
  Vector adv;
  Vector targets;

  Tape::Id build(Tape& tape, NeuralPolicy& policy) const {
    const PolicyNodes n = policy.forward(tape, states);
    const Tape::Id pg = tape.mean(tape.mul(tape.gather(n.log_probs, actions), tape.constant(adv)));
    const Tape::Id value = tape.mean(tape.square(tape.sub(n.value, tape.constant(targets))));
    Tape::Id loss = tape.sub(value, pg);
    loss = tape.sub(loss, tape.scale(tape.mean(n.policy_entropy), 0.3));
    loss = tape.sub(loss, tape.scale(tape.mean(n.latent_entropy), 0.2));
    loss = tape.add(loss, tape.scale(tape.mean(n.latent_kl), 0.1));
    return loss;
  }

  double value(NeuralPolicy& policy) const {
    Tape tape;
    return tape.value(build(tape, policy))(0, 0);
  }
};

CompositeLoss random_loss(Rng& rng, int batch, const PolicyArch& arch) {
  CompositeLoss l;
  l.states = random_matrix(rng, batch, arch.input_dim);
  for (int i = 0; i < batch; ++i) l.actions.push_back(static_cast<int>(rng() % arch.num_actions));
  l.adv = random_matrix(rng, batch, 1);
  l.targets = random_matrix(rng, batch, 1);
  return l;
}

// Density of N(mean, diag(sigma^2)) written out directly for the Monte-Carlo checks.
double normal_log_density(const Vector& z, const Vector& mean, const Vector& sigma) {
  double lp = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double u = (z[i] - mean[i]) / sigma[i];
    lp += -0.5 * u * u - std::log(sigma[i] * std::sqrt(2.0 * std::numbers::pi));
  }
  return lp;
}

}  // namespace

TEST_CASE("tape ops match finite differences") {
  Rng rng(11);
  const Matrix x0 = random_matrix(rng, 3, 4);
  const Matrix w0 = random_matrix(rng, 4, 2);
  const Matrix b0 = random_matrix(rng, 1, 2);
  Parameter x{"x", x0, Matrix()};
  Parameter w{"w", w0, Matrix()};
  Parameter b{"b", b0, Matrix()};

  auto f = [&](Tape& t) {
    const auto h = t.tanh(t.add_row(t.matmul(t.parameter(x), t.parameter(w)), t.parameter(b)));
    const auto sp = t.softplus(h);
    const auto ls = t.log_softmax(t.mul(sp, t.exp(t.scale(h, 0.5))));
    const auto g = t.gather(ls, {0, 1, 0});
    const auto r = t.row_sum(t.square(t.add_scalar(h, 2.0)));
    return t.add(t.mean(t.mul(g, t.log(r))), t.sum(t.sub(sp, h)));
  };
  Tape tape;
  x.zero_grad();
  w.zero_grad();
  b.zero_grad();
  tape.backward(f(tape));

  auto fd_for = [&](Parameter& p) {
    const Matrix saved = p.value;
    const Vector g = oracle::fd_gradient(
        [&](const Vector& v) {
          p.value = v.reshaped(saved.rows(), saved.cols());
          Tape t;
          const double out = t.value(f(t))(0, 0);
          p.value = saved;
          return out;
        },
        saved.reshaped(), 1e-5);
    return g;
  };
  CHECK(oracle::max_relative_error(x.grad.reshaped(), fd_for(x)) < 1e-6);
  CHECK(oracle::max_relative_error(w.grad.reshaped(), fd_for(w)) < 1e-6);
  CHECK(oracle::max_relative_error(b.grad.reshaped(), fd_for(b)) < 1e-6);
}

TEST_CASE("tape shape errors") {
  Tape t;
  const auto a = t.constant(Matrix::Ones(2, 3));
  const auto b = t.constant(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(t.add(a, b), DimensionError);
  CHECK_THROWS_AS(t.matmul(a, a), DimensionError);
  CHECK_THROWS_AS(t.gather(a, {0}), DimensionError);
  CHECK_THROWS_AS(t.backward(a), DimensionError);
}

TEST_CASE("forward contract") {
  NeuralPolicy policy(small_arch(), 3);
  Rng rng(4);
  Matrix states = random_matrix(rng, 7, 5);

  SUBCASE("zero heads give uniform logits and zero mean") {
    const auto out = policy.forward(states);
    CHECK(out.logits.isZero(0.0));
    CHECK(out.mean.isZero(0.0));
    CHECK(out.value.isZero(0.0));
    CHECK(out.sigma.isConstant(std::log(2.0) + kSigmaFloor, 1e-15));
  }
  SUBCASE("one row per state") {
    randomize(policy, 1);
    const auto out = policy.forward(states);
    CHECK(out.logits.rows() == 7);
    CHECK(out.logits.cols() == 3);
    CHECK(out.mean.rows() == 7);
    CHECK(out.mean.cols() == 4);
    CHECK(out.sigma.rows() == 7);
    CHECK(out.value.size() == 7);
  }
  SUBCASE("duplicated rows give duplicated outputs") {
    randomize(policy, 2);
    states.row(4) = states.row(1);
    const auto out = policy.forward(states);
    CHECK(out.logits.row(4) == out.logits.row(1));
    CHECK(out.sigma.row(4) == out.sigma.row(1));
    CHECK(out.value[4] == out.value[1]);
  }
  SUBCASE("tape forward agrees with plain forward") {
    randomize(policy, 3);
    const auto plain = policy.forward(states);
    Tape tape;
    const auto nodes = policy.forward(tape, states);
    CHECK((tape.value(nodes.logits) - plain.logits).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((tape.value(nodes.sigma) - plain.sigma).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((tape.value(nodes.value).col(0) - plain.value).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(policy.forward(Matrix::Zero(2, 4)), DimensionError);
    Vector flat = policy.flat_parameters();
    flat[0] = std::numeric_limits<double>::quiet_NaN();
    policy.set_flat_parameters(flat);
    try {
      (void)policy.forward(states);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("trunk.w0(non-finite)") != std::string::npos);
    }
  }
}

TEST_CASE("parameters are enumerated in a stable order") {
  NeuralPolicy a(small_arch(), 9);
  NeuralPolicy b(small_arch(), 9);
  std::vector<std::string> names;
  for (const Parameter* p : a.parameters()) names.push_back(p->name);
  CHECK(names.front() == "trunk.w0");
  CHECK(names.back() == "value.b0");
  CHECK(a.flat_parameters() == b.flat_parameters());
  CHECK(a.num_parameters() == static_cast<std::size_t>(5 * 6 + 6 + 6 * 5 + 5 + (5 * 3 + 3) + 2 * (5 * 4 + 4) + 5 + 1));
}

TEST_CASE("gaussian_entropy") {
  const LatentGaussian unit{Vector::Zero(2), Vector::Ones(2)};
  CHECK(gaussian_entropy(unit) == doctest::Approx(std::log(2.0 * std::numbers::pi * std::numbers::e)).epsilon(1e-15));
  CHECK(gaussian_entropy(unit) == doctest::Approx(2.837877).epsilon(1e-6));

  Vector sigma(3);
  sigma << 0.5, 1.0, 2.0;
  LatentGaussian g{Vector::Zero(3), sigma};
  const LatentGaussian scaled{g.mean, sigma * std::numbers::e};
  CHECK(gaussian_entropy(scaled) - gaussian_entropy(g) == doctest::Approx(3.0).epsilon(1e-14));

  SUBCASE("independent of the mean") {
    LatentGaussian shifted = g;
    shifted.mean << 4.0, -1.0, 0.25;
    CHECK(gaussian_entropy(shifted) == gaussian_entropy(g));
  }
  SUBCASE("floor") {
    Vector raw = Vector::Constant(5, -800.0);
    const auto tiny = LatentGaussian::from_raw(Vector::Zero(5), raw);
    CHECK(tiny.sigma.minCoeff() >= kSigmaFloor);
    CHECK(gaussian_entropy(tiny) >= 5 * (kHalfLog2PiE + std::log(kSigmaFloor)) - 1e-12);
  }
}

TEST_CASE("gaussian_entropy and KL agree with Monte-Carlo estimates") {
  constexpr int kSamples = 1'000'000;
  Vector mean(3);
  mean << 0.3, -0.7, 1.1;
  Vector sigma(3);
  sigma << 0.5, 1.0, 2.0;
  const LatentGaussian g{mean, sigma};

  Rng rng(2024);
  double neg_log = 0.0;
  double log_ratio = 0.0;
  const Vector zero = Vector::Zero(3);
  const Vector one = Vector::Ones(3);
  for (int i = 0; i < kSamples; ++i) {
    Vector z(3);
    for (int k = 0; k < 3; ++k) z[k] = mean[k] + sigma[k] * standard_normal(rng);
    const double lq = normal_log_density(z, mean, sigma);
    neg_log -= lq;
    log_ratio += lq - normal_log_density(z, zero, one);
  }
  CHECK(std::abs(neg_log / kSamples - gaussian_entropy(g)) < 3e-3);
  CHECK(std::abs(log_ratio / kSamples - kl_standard_normal(g)) < 5e-3);
  CHECK(g.log_density(mean) == doctest::Approx(normal_log_density(mean, mean, sigma)).epsilon(1e-14));
}

TEST_CASE("kl_standard_normal") {
  CHECK(kl_standard_normal({Vector::Zero(4), Vector::Ones(4)}) == 0.0);
  Vector mu(2);
  mu << 1.0, 0.0;
  CHECK(kl_standard_normal({mu, Vector::Ones(2)}) == doctest::Approx(0.5).epsilon(1e-15));
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto g = LatentGaussian::from_raw(random_matrix(rng, 6, 1), random_matrix(rng, 6, 1, 2.0));
    CHECK(kl_standard_normal(g) >= 0.0);
  }
}

TEST_CASE("categorical entropy") {
  CHECK(std::abs(categorical_entropy(Vector::Zero(4)) - std::log(4.0)) < 1e-12);
  CHECK(std::abs(categorical_entropy(Vector::Constant(7, 3.5)) - std::log(7.0)) < 1e-12);
  Vector peaked(3);
  peaked << 800.0, 0.0, 0.0;
  CHECK(categorical_entropy(peaked) == doctest::Approx(0.0).epsilon(1e-12));

  NeuralPolicy policy(small_arch(5, 6), 1);
  Tape tape;
  const auto n = policy.forward(tape, Matrix::Identity(5, 5));
  CHECK((tape.value(n.policy_entropy).array() - std::log(6.0)).abs().maxCoeff() < 1e-12);
}

TEST_CASE("backward") {
  SUBCASE("entropy alone has no mean gradient") {
    NeuralPolicy policy(small_arch(), 6);
    randomize(policy, 6);
    Rng rng(1);
    Tape tape;
    const auto n = policy.forward(tape, random_matrix(rng, 4, 5));
    policy.zero_grad();
    tape.backward(tape.mean(n.latent_entropy));
    for (Parameter* p : policy.parameters()) {
      if (p->name.starts_with("latent_mean") || p->name.starts_with("logits") || p->name.starts_with("value")) {
        CHECK_MESSAGE(p->grad.isZero(0.0), p->name);
      }
    }
  }
  SUBCASE("constant loss") {
    NeuralPolicy policy(small_arch(), 6);
    Tape tape;
    const auto n = policy.forward(tape, Matrix::Identity(5, 5));
    policy.zero_grad();
    tape.backward(tape.add_scalar(tape.scale(tape.mean(n.value), 0.0), 3.0));
    CHECK(policy.flat_gradient().isZero(0.0));
  }
  SUBCASE("composite loss matches finite differences on random nets") {
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
      const PolicyArch arch = small_arch(3 + static_cast<int>(seed % 3), 2 + static_cast<int>(seed % 2), 3);
      NeuralPolicy policy(arch, seed);
      randomize(policy, 100 + seed);
      Rng rng(200 + seed);
      const CompositeLoss loss = random_loss(rng, 6, arch);

      Tape tape;
      policy.zero_grad();
      tape.backward(loss.build(tape, policy));
      const Vector analytic = policy.flat_gradient();

      const Vector theta = policy.flat_parameters();
      const Vector fd = oracle::fd_gradient(
          [&](const Vector& p) {
            policy.set_flat_parameters(p);
            return loss.value(policy);
          },
          theta, 1e-5);
      policy.set_flat_parameters(theta);
      CHECK_MESSAGE(oracle::max_relative_error(analytic, fd) < 1e-4, "seed " << seed);
    }
  }
}

TEST_CASE("checkpoint round trip") {
  NeuralPolicy policy(small_arch(), 8);
  randomize(policy, 8);
  std::stringstream buf;
  save_checkpoint(buf, policy);
  NeuralPolicy other(small_arch(), 99);
  load_checkpoint(buf, other);
  CHECK(other.flat_parameters() == policy.flat_parameters());

  std::stringstream again;
  save_checkpoint(again, policy);
  NeuralPolicy wrong(small_arch(5, 3, 7), 1);
  const Vector before = wrong.flat_parameters();
  CHECK_THROWS_AS(load_checkpoint(again, wrong), DimensionError);
  CHECK(wrong.flat_parameters() == before);

  std::stringstream junk("not a checkpoint");
  CHECK_THROWS_AS(load_checkpoint(junk, other), DomainError);
}
