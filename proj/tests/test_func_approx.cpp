#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "kirl/func_approx.hpp"

using namespace kirl;

namespace {

Eigen::VectorXd random_vec(int n, Rng& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

// Redraws x until every hidden pre-activation sits clear of the ReLU kink.
Eigen::VectorXd input_off_kinks(const Mlp& net, Rng& rng, double margin) {
  for (;;) {
    const Eigen::VectorXd x = random_vec(net.input_dim(), rng);
    Mlp::Cache cache;
    net.forward_batch(x, &cache);
    bool ok = true;
    for (std::size_t l = 0; l + 1 < cache.pre.size(); ++l)
      ok = ok && cache.pre[l].cwiseAbs().minCoeff() > margin;
    if (ok) return x;
  }
}

}  // namespace

TEST_CASE("zero and identity networks") {
  const Mlp zero({4, 8, 3}, OutputActivation::Tanh);
  CHECK(zero.forward(Eigen::VectorXd::Ones(4)).isZero());

  Mlp id({3, 3}, OutputActivation::Identity);
  id.layers()[0].weight = Eigen::MatrixXd::Identity(3, 3);
  const Eigen::Vector3d x(0.3, -2.0, 5.0);
  CHECK(id.forward(x) == x);
}

TEST_CASE("seeded initialization is reproducible") {
  Rng a(5), b(5);
  const Mlp n1 = Mlp::initialized({5, 16, 2}, OutputActivation::Identity, a, 1.0);
  const Mlp n2 = Mlp::initialized({5, 16, 2}, OutputActivation::Identity, b, 1.0);
  CHECK(n1 == n2);
  Rng c(1);
  const Eigen::VectorXd x = random_vec(5, c);
  CHECK(n1.forward(x) == n2.forward(x));

  Rng d(6);
  const Mlp zero_head = Mlp::initialized({5, 16, 2}, OutputActivation::Tanh, d, 0.0);
  CHECK(zero_head.layers().back().weight.isZero());
  CHECK(zero_head.forward(x).isZero());
}

TEST_CASE("shape errors") {
  const Mlp net({3, 4, 2}, OutputActivation::Identity);
  CHECK_THROWS_AS(net.forward(Eigen::VectorXd::Zero(4)), std::domain_error);
  CHECK_THROWS_AS(net.backward(Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(3)),
                  std::domain_error);
  Mlp m = net;
  CHECK_THROWS_AS(m.assign(Eigen::VectorXd::Zero(3)), std::domain_error);
}

TEST_CASE("backward closed forms") {
  Rng rng(7);
  const Mlp net = Mlp::initialized({5, 3, 2}, OutputActivation::Tanh, rng, 1.0);
  const Eigen::VectorXd x = random_vec(5, rng);
  CHECK(net.backward(x, Eigen::VectorXd::Zero(2)).isZero());

  Mlp lin({4, 1}, OutputActivation::Identity);
  lin.layers()[0].weight = random_vec(4, rng).transpose();
  const Eigen::VectorXd g = lin.backward(x.head(4), Eigen::VectorXd::Ones(1));
  CHECK((g.head(4) - x.head(4)).norm() < 1e-15);
  CHECK(g[4] == 1.0);
}

TEST_CASE("5-3-2 and 2x64 nets match finite differences") {
  Rng rng(8);
  const Mlp small = Mlp::initialized({5, 3, 2}, OutputActivation::Tanh, rng, 1.0);
  CHECK(finite_diff_check(small, input_off_kinks(small, rng, 1e-3), 1e-5) < 1e-4);
  const Mlp big = Mlp::initialized({5, 64, 64, 1}, OutputActivation::Identity, rng, 1.0);
  CHECK(finite_diff_check(big, input_off_kinks(big, rng, 1e-3), 1e-5) < 1e-4);

  Mlp lin({3, 2}, OutputActivation::Identity);
  lin.assign(random_vec(static_cast<int>(lin.num_params()), rng));
  CHECK(finite_diff_check(lin, random_vec(3, rng), 1e-5) < 1e-8);
}

TEST_CASE("large finite-difference steps are reported, not hidden") {
  Rng rng(9);
  const Mlp net = Mlp::initialized({3, 16, 1}, OutputActivation::Tanh, rng, 1.0);
  const Eigen::VectorXd x = input_off_kinks(net, rng, 1e-3);
  CHECK(finite_diff_check(net, x, 1.0) > finite_diff_check(net, x, 1e-5));
}

TEST_CASE("batched and cached paths agree with the single-sample ones") {
  Rng rng(10);
  const Mlp net = Mlp::initialized({4, 8, 8, 3}, OutputActivation::Tanh, rng, 1.0);
  Eigen::MatrixXd x(4, 6), g(3, 6);
  for (int j = 0; j < 6; ++j) {
    x.col(j) = random_vec(4, rng);
    g.col(j) = random_vec(3, rng);
  }
  Mlp::Cache cache;
  const Eigen::MatrixXd y = net.forward_batch(x, &cache);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(net.num_params()));
  for (int j = 0; j < 6; ++j) {
    CHECK((y.col(j) - net.forward(x.col(j))).norm() < 1e-12);
    sum += net.backward(x.col(j), g.col(j));
  }
  CHECK((net.backward_batch(x, g) - sum).norm() < 1e-10);
  CHECK((net.backward_cached(cache, g) - sum).norm() < 1e-10);

  // jvp against a finite difference along a random direction.
  const Eigen::VectorXd dir = random_vec(static_cast<int>(net.num_params()), rng);
  const double h = 1e-6;
  const Mlp up = Mlp::unflatten(net, net.flatten() + h * dir);
  const Mlp down = Mlp::unflatten(net, net.flatten() - h * dir);
  const Eigen::MatrixXd fd = (up.forward_batch(x) - down.forward_batch(x)) / (2.0 * h);
  CHECK((net.jvp_batch(x, dir) - fd).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("100 random nets pass the gradient check") {
  Rng rng(11);
  std::uniform_int_distribution<int> width(2, 32), depth(1, 3), dim(1, 6);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> sizes{dim(rng)};
    const int d = depth(rng);
    for (int l = 0; l < d; ++l) sizes.push_back(width(rng));
    sizes.push_back(dim(rng));
    const auto act = trial % 2 ? OutputActivation::Tanh : OutputActivation::Identity;
    const Mlp net = Mlp::initialized(sizes, act, rng, 1.0);
    worst = std::max(worst, finite_diff_check(net, input_off_kinks(net, rng, 1e-3), 1e-5));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("tanh outputs stay inside the open interval") {
  Rng rng(12);
  const Mlp net = Mlp::initialized({3, 16, 2}, OutputActivation::Tanh, rng, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const Eigen::VectorXd y = net.forward(random_vec(3, rng));
    CHECK(y.cwiseAbs().maxCoeff() < 1.0);
  }
}

TEST_CASE("flat parameter layout") {
  Rng rng(13);
  const Mlp net = Mlp::initialized({4, 7, 5, 2}, OutputActivation::Identity, rng, 1.0);
  CHECK(net.num_params() == (4 * 7 + 7) + (7 * 5 + 5) + (5 * 2 + 2));
  const Eigen::VectorXd theta = net.flatten();
  CHECK(Mlp::unflatten(net, theta) == net);
  CHECK(Mlp::unflatten(net, theta).flatten() == theta);

  // Bumping index k must change exactly one stored parameter.
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    Eigen::VectorXd t = theta;
    t[k] += 1.0;
    const Mlp m = Mlp::unflatten(net, t);
    int changed = 0;
    for (std::size_t l = 0; l < net.layers().size(); ++l) {
      changed += static_cast<int>(
          (m.layers()[l].weight.array() != net.layers()[l].weight.array()).count());
      changed += static_cast<int>(
          (m.layers()[l].bias.array() != net.layers()[l].bias.array()).count());
    }
    CHECK(changed == 1);
  }
  // Row-major weights first, then bias.
  Eigen::VectorXd t = theta;
  t[1] += 1.0;
  CHECK(Mlp::unflatten(net, t).layers()[0].weight(0, 1) == net.layers()[0].weight(0, 1) + 1.0);
  t = theta;
  t[28] += 1.0;
  CHECK(Mlp::unflatten(net, t).layers()[0].bias(0) == net.layers()[0].bias(0) + 1.0);
}

TEST_CASE("binary checkpoint round trip") {
  Rng rng(14);
  const Mlp net = Mlp::initialized({5, 9, 1}, OutputActivation::Tanh, rng, 0.5);
  std::stringstream buf;
  save_mlp(buf, net);
  CHECK(buf.str().substr(0, 8) == std::string("KIRLMLP\0", 8));
  const Mlp back = load_mlp(buf);
  CHECK(back == net);

  std::stringstream bad("not a checkpoint");
  CHECK_THROWS(load_mlp(bad));
}

TEST_CASE("optimizers descend a quadratic") {
  Eigen::VectorXd p = Eigen::VectorXd::Constant(3, 5.0);
  Adam adam(3, 0.1);
  for (int i = 0; i < 500; ++i) adam.step(p, 2.0 * p);
  CHECK(p.norm() < 0.1);

  Eigen::VectorXd q = Eigen::VectorXd::Constant(3, 5.0);
  MomentumSgd sgd(3, 0.01, 0.9);
  for (int i = 0; i < 500; ++i) sgd.step(q, 2.0 * q);
  CHECK(q.norm() < 1e-3);
}
