#include <cmath>
#include <filesystem>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "doctest.h"
#include "gradcheck.hpp"
#include "loop/archive.hpp"
#include "loop/nn.hpp"

using namespace loop::nn;
using loop::ActionBounds;
using loop::Rng;
using loop::testing::max_relative_error;
using loop::testing::numeric_gradient;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
  return m;
}

}  // namespace

TEST_CASE("forward examples") {
  SUBCASE("identity net") {
    DenseNet net({DenseLayer{Eigen::MatrixXd::Identity(3, 3), Eigen::VectorXd::Zero(3), Activation::kIdentity}});
    Eigen::VectorXd x(3);
    x << 1.5, -2.0, 0.25;
    CHECK(net.forward(x) == x);
  }
  SUBCASE("zero weights give the bias") {
    Eigen::VectorXd b(2);
    b << 0.3, -0.7;
    DenseNet net({DenseLayer{Eigen::MatrixXd::Zero(2, 4), b, Activation::kIdentity}});
    CHECK(net.forward(Eigen::VectorXd::Ones(4)) == b);
  }
  SUBCASE("two-layer hand arithmetic") {
    Eigen::MatrixXd w1(2, 2), w2(1, 2);
    w1 << 1, -1, 2, 0.5;
    w2 << 3, -2;
    Eigen::VectorXd b1(2), b2(1), x(2);
    b1 << 0.5, -4;
    b2 << 1;
    x << 2, 1;
    DenseNet net({DenseLayer{w1, b1, Activation::kRelu}, DenseLayer{w2, b2, Activation::kIdentity}});
    // hidden = relu([2 - 1 + 0.5, 4 + 0.5 - 4]) = [1.5, 0.5]; out = 4.5 - 1 + 1
    CHECK(net.forward(x)(0) == doctest::Approx(4.5));
  }
  SUBCASE("dimension mismatch") {
    Rng rng(1);
    DenseNet net({3, 4, 2}, Activation::kRelu, Activation::kIdentity, rng);
    CHECK_THROWS_AS(net.forward(Eigen::VectorXd::Zero(2)), std::invalid_argument);
  }
}

TEST_CASE("linear net squared-loss gradient is closed form") {
  Rng rng(2);
  DenseNet net({3, 2}, Activation::kIdentity, Activation::kIdentity, rng);
  const Eigen::VectorXd x = random_matrix(3, 1, rng);
  const Eigen::VectorXd y = random_matrix(2, 1, rng);
  Tape tape;
  const Eigen::MatrixXd out = net.forward_batch(x, &tape);
  const Eigen::MatrixXd residual = out - y;
  const NetGrad g = net.backward(tape, 2.0 * residual);
  const Eigen::MatrixXd expected = 2.0 * residual * x.transpose();
  CHECK((g.weight[0] - expected).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((g.bias[0] - 2.0 * residual).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("reverse pass matches central differences") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int in = 1 + static_cast<int>(rng.index(5));
    const int hidden = 2 + static_cast<int>(rng.index(8));
    const int out = 1 + static_cast<int>(rng.index(4));
    const auto act = trial % 2 == 0 ? Activation::kRelu : Activation::kTanh;
    DenseNet net({in, hidden, hidden, out}, act, Activation::kIdentity, rng);
    const Eigen::MatrixXd x = random_matrix(in, 3, rng);
    const Eigen::MatrixXd c = random_matrix(out, 3, rng);
    const auto loss = [&](const DenseNet& n, const Eigen::MatrixXd& xin) {
      const Eigen::MatrixXd y = n.forward_batch(xin);
      return (c.array() * y.array()).sum() + 0.5 * y.squaredNorm();
    };
    Tape tape;
    const Eigen::MatrixXd y = net.forward_batch(x, &tape);
    Eigen::MatrixXd d_in;
    const NetGrad g = net.backward(tape, c + y, &d_in);

    const Eigen::VectorXd fd_params = numeric_gradient(
        [&](const Eigen::VectorXd& p) {
          DenseNet copy = net;
          copy.set_flat(p);
          return loss(copy, x);
        },
        net.flat());
    CHECK(max_relative_error(g.flat(), fd_params) < 1e-4);

    const Eigen::VectorXd fd_input = numeric_gradient(
        [&](const Eigen::VectorXd& xf) { return loss(net, Eigen::Map<const Eigen::MatrixXd>(xf.data(), in, 3)); },
        Eigen::Map<const Eigen::VectorXd>(x.data(), x.size()));
    CHECK(max_relative_error(Eigen::Map<const Eigen::VectorXd>(d_in.data(), d_in.size()), fd_input) < 1e-4);
  }
}

TEST_CASE("constant loss has zero gradient") {
  Rng rng(4);
  DenseNet net({2, 5, 1}, Activation::kRelu, Activation::kIdentity, rng);
  Tape tape;
  const Eigen::MatrixXd x = random_matrix(2, 4, rng);
  net.forward_batch(x, &tape);
  CHECK(net.backward(tape, Eigen::MatrixXd::Zero(1, 4)).flat().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("Adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Adam opt(3, {});
    Eigen::VectorXd p(3);
    p << 1, 2, 3;
    const Eigen::VectorXd before = p;
    opt.step(p, Eigen::VectorXd::Zero(3));
    CHECK(p == before);
  }
  SUBCASE("descends on w^2") {
    Adam opt(1, {0.1});
    Eigen::VectorXd w = Eigen::VectorXd::Ones(1);
    opt.step(w, 2.0 * w);
    CHECK(w(0) < 1.0);
    for (int i = 0; i < 200; ++i) opt.step(w, 2.0 * w);
    CHECK(std::abs(w(0)) < 0.1);
  }
  SUBCASE("deterministic") {
    const auto run = [] {
      Rng rng(5);
      DenseNet net({2, 8, 1}, Activation::kTanh, Activation::kIdentity, rng);
      Adam opt(net.parameter_count(), {1e-2});
      for (int i = 0; i < 50; ++i) {
        const Eigen::MatrixXd x = random_matrix(2, 8, rng);
        Tape tape;
        const Eigen::MatrixXd y = net.forward_batch(x, &tape);
        opt.step(net, net.backward(tape, y - x.colwise().sum()));
      }
      return net.flat();
    };
    CHECK(run() == run());
  }
}

TEST_CASE("Gaussian NLL gradient and stationarity") {
  Rng rng(6);
  const Eigen::MatrixXd mean = random_matrix(3, 5, rng);
  const Eigen::MatrixXd raw = random_matrix(3, 5, rng, 0.5);
  const Eigen::MatrixXd target = random_matrix(3, 5, rng);
  const auto nll = gaussian_nll(mean, raw, target);
  Eigen::VectorXd packed(30);
  packed << Eigen::Map<const Eigen::VectorXd>(mean.data(), 15), Eigen::Map<const Eigen::VectorXd>(raw.data(), 15);
  const auto fd = numeric_gradient(
      [&](const Eigen::VectorXd& p) {
        return gaussian_nll(Eigen::Map<const Eigen::MatrixXd>(p.data(), 3, 5),
                            Eigen::Map<const Eigen::MatrixXd>(p.data() + 15, 3, 5), target)
            .loss;
      },
      packed);
  Eigen::VectorXd analytic(30);
  analytic << Eigen::Map<const Eigen::VectorXd>(nll.d_mean.data(), 15),
      Eigen::Map<const Eigen::VectorXd>(nll.d_raw_log_std.data(), 15);
  CHECK(max_relative_error(analytic, fd) < 1e-4);

  // At the sample mean and sample variance of a batch, the gradient vanishes.
  const Eigen::MatrixXd samples = random_matrix(1, 50, rng, 2.0);
  const double mu = samples.mean();
  const double var = (samples.array() - mu).square().mean();
  const auto at_mle = gaussian_nll(Eigen::MatrixXd::Constant(1, 50, mu),
                                   Eigen::MatrixXd::Constant(1, 50, 0.5 * std::log(var)), samples);
  CHECK(std::abs(at_mle.d_mean.sum()) < 1e-12);
  CHECK(std::abs(at_mle.d_raw_log_std.sum()) < 1e-12);
}

TEST_CASE("log-std clamp") {
  Eigen::MatrixXd raw(1, 3);
  raw << -50, 0.3, 9;
  const auto c = clamp_log_std(raw);
  CHECK(c(0, 0) == kLogStdMin);
  CHECK(c(0, 1) == 0.3);
  CHECK(c(0, 2) == kLogStdMax);
}

TEST_CASE("tanh-Gaussian head") {
  const ActionBounds bounds{Eigen::Vector2d(-2.0, 0.0), Eigen::Vector2d(2.0, 1.0)};
  Rng rng(7);

  SUBCASE("vanishing std is deterministic") {
    Eigen::MatrixXd mean(2, 1);
    mean << 0.4, -0.3;
    const auto s = tanh_gaussian_sample(mean, Eigen::MatrixXd::Constant(2, 1, -10.0), bounds, rng);
    const auto mode = tanh_gaussian_mode(mean, bounds);
    CHECK((s.action - mode).cwiseAbs().maxCoeff() < 1e-3);
  }

  SUBCASE("samples stay strictly inside the bounds") {
    const Eigen::MatrixXd mean = random_matrix(2, 200, rng, 30.0);
    const auto s = tanh_gaussian_sample(mean, random_matrix(2, 200, rng, 3.0), bounds, rng);
    for (Eigen::Index c = 0; c < s.action.cols(); ++c) {
      CHECK((s.action.col(c).array() > bounds.lo.array()).all());
      CHECK((s.action.col(c).array() < bounds.hi.array()).all());
    }
    CHECK(s.log_prob.allFinite());
  }

  SUBCASE("reparameterized gradient matches finite differences") {
    const Eigen::MatrixXd mean = random_matrix(2, 4, rng);
    const Eigen::MatrixXd raw = random_matrix(2, 4, rng, 0.5);
    const Eigen::MatrixXd noise = random_matrix(2, 4, rng);
    const Eigen::MatrixXd w_action = random_matrix(2, 4, rng);
    const Eigen::VectorXd w_logp = random_matrix(4, 1, rng);
    const auto objective = [&](const Eigen::VectorXd& p) {
      const auto s = tanh_gaussian_sample(Eigen::Map<const Eigen::MatrixXd>(p.data(), 2, 4),
                                          Eigen::Map<const Eigen::MatrixXd>(p.data() + 8, 2, 4), bounds, noise);
      return w_logp.dot(s.log_prob) + (w_action.array() * s.action.array()).sum();
    };
    const auto s = tanh_gaussian_sample(mean, raw, bounds, noise);
    const auto g = tanh_gaussian_backward(s, w_logp, w_action, bounds);
    Eigen::VectorXd packed(16), analytic(16);
    packed << Eigen::Map<const Eigen::VectorXd>(mean.data(), 8), Eigen::Map<const Eigen::VectorXd>(raw.data(), 8);
    analytic << Eigen::Map<const Eigen::VectorXd>(g.d_mean.data(), 8),
        Eigen::Map<const Eigen::VectorXd>(g.d_raw_log_std.data(), 8);
    CHECK(max_relative_error(analytic, numeric_gradient(objective, packed)) < 1e-4);
  }

  SUBCASE("log-density of given actions and its gradient") {
    const Eigen::MatrixXd mean = random_matrix(2, 3, rng);
    const Eigen::MatrixXd raw = random_matrix(2, 3, rng, 0.5);
    const auto drawn = tanh_gaussian_sample(mean, raw, bounds, rng);
    const auto eval = tanh_gaussian_log_prob(mean, raw, drawn.action, bounds);
    CHECK((eval.log_prob - drawn.log_prob).cwiseAbs().maxCoeff() < 1e-6);
    Eigen::VectorXd packed(12), analytic(12);
    packed << Eigen::Map<const Eigen::VectorXd>(mean.data(), 6), Eigen::Map<const Eigen::VectorXd>(raw.data(), 6);
    analytic << Eigen::Map<const Eigen::VectorXd>(eval.grad.d_mean.data(), 6),
        Eigen::Map<const Eigen::VectorXd>(eval.grad.d_raw_log_std.data(), 6);
    const auto fd = numeric_gradient(
        [&](const Eigen::VectorXd& p) {
          return tanh_gaussian_log_prob(Eigen::Map<const Eigen::MatrixXd>(p.data(), 2, 3),
                                        Eigen::Map<const Eigen::MatrixXd>(p.data() + 6, 2, 3), drawn.action, bounds)
              .log_prob.sum();
        },
        packed);
    CHECK(max_relative_error(analytic, fd) < 1e-4);
  }

  SUBCASE("Monte Carlo mean agrees with quadrature") {
    const ActionBounds unit = ActionBounds::symmetric(1, 1.0);
    const double mu = 0.6, sigma = 0.8;
    const int n = 100000;
    const auto s = tanh_gaussian_sample(Eigen::MatrixXd::Constant(1, n, mu),
                                        Eigen::MatrixXd::Constant(1, n, std::log(sigma)), unit, rng);
    const double mc_mean = s.action.mean();
    const double mc_sd = std::sqrt((s.action.array() - mc_mean).square().sum() / (n - 1));
    using Q = boost::math::quadrature::gauss_kronrod<double, 61>;
    const double exact = Q::integrate(
        [&](double z) { return std::tanh(mu + sigma * z) * std::exp(-0.5 * z * z) / std::sqrt(2 * M_PI); },
        -std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity());
    CHECK(std::abs(mc_mean - exact) < 3.0 * mc_sd / std::sqrt(n));
  }
}

TEST_CASE("net checkpoint round-trip") {
  Rng rng(8);
  DenseNet net({4, 6, 6, 3}, Activation::kRelu, Activation::kTanh, rng);
  Adam opt(net.parameter_count(), {3e-4});
  Eigen::VectorXd p = net.flat();
  opt.step(p, Eigen::VectorXd::Ones(p.size()));
  net.set_flat(p);

  const auto path = std::filesystem::temp_directory_path() / "loop_test_net.bin";
  loop::ArchiveWriter w;
  save_net(w, "policy", net);
  opt.save(w, "policy_opt");
  w.write(path);

  const loop::ArchiveReader r(path);
  const DenseNet back = load_net(r, "policy");
  CHECK(back.flat() == net.flat());
  CHECK(back.layers().back().activation == Activation::kTanh);
  Adam opt_back;
  opt_back.load(r, "policy_opt");
  CHECK(opt_back.steps() == 1);
  CHECK(r.meta()["nets"]["policy"]["layers"].size() == 3);
  std::filesystem::remove(path);
}
