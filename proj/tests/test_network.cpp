#include <doctest.h>

#include <cmath>
#include <sstream>

#include "fens/model_io.hpp"
#include "fens/network.hpp"
#include "oracles.hpp"

using namespace fens;

namespace {

Network dense_net(std::vector<double> w, std::vector<double> b, std::size_t out, std::size_t in) {
  return Network({in}, {Dense{Tensor({out, in}, std::move(w)), Tensor({out}, std::move(b))}});
}

Tensor random_input(Rng& rng, const Shape& shape) {
  Tensor t(shape);
  for (auto& v : t.values()) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("tensor rejects inconsistent shapes and non-finite data") {
  CHECK_THROWS(Tensor({2, 2}, {1.0, 2.0, 3.0}));
  CHECK_THROWS(Tensor({0, 3}));
  CHECK_THROWS(Tensor({1}, {std::nan("")}));
  CHECK_THROWS(Tensor({1}, {INFINITY}));
  CHECK(Tensor({2, 3}).size() == 6);
}

TEST_CASE("forward on hand-computed dense layers") {
  const Network id = dense_net({1, 0, 0, 1}, {0, 0}, 2, 2);
  const Tensor y = forward(id, Tensor({2}, {1, 2}));
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 2.0);

  const Network n = dense_net({1, 0, 0, -1}, {0, 1}, 2, 2);
  const Tensor z = forward(n, Tensor({2}, {3, 5}));
  CHECK(z[0] == 3.0);
  CHECK(z[1] == -4.0);

  CHECK_THROWS(forward(n, Tensor({3}, {1, 2, 3})));
}

TEST_CASE("forward matches a naive layer-by-layer recomputation") {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const Network net = oracle::random_network(rng, trial % 2 == 0);
    const Tensor x = random_input(rng, net.input_shape());
    const Tensor y = forward(net, x);
    const auto ref = oracle::naive_forward(net, x.storage());
    REQUIRE(y.size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    CHECK(forward(net, x) == y);  // bit-identical reruns
  }
}

TEST_CASE("classify takes the argmax with ties to the smallest index") {
  const std::vector<double> a{0.1, 0.9}, b{0.5, 0.5};
  CHECK(argmax(a) == 1);
  CHECK(argmax(b) == 0);
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Network net = oracle::random_network(rng, false);
    const Tensor x = random_input(rng, net.input_shape());
    const auto ref = oracle::naive_forward(net, x.storage());
    const int expect = static_cast<int>(std::max_element(ref.begin(), ref.end()) - ref.begin());
    CHECK(classify(net, x) == expect);
    // argmax is invariant under shift and positive scaling
    std::vector<double> moved = ref;
    for (auto& v : moved) v = 3.0 * v + 7.0;
    CHECK(argmax(moved) == expect);
  }
}

TEST_CASE("cross-entropy loss") {
  const std::vector<double> zero{0.0, 0.0};
  CHECK(cross_entropy(zero, 0) == doctest::Approx(std::log(2.0)));
  const std::vector<double> confident{60.0, 0.0};
  CHECK(cross_entropy(confident, 0) > 0.0);
  CHECK(cross_entropy(confident, 0) < 1e-20);
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> z(4);
    for (auto& v : z) v = rng.uniform(-5, 5);
    const int label = static_cast<int>(rng.index(4));
    CHECK(cross_entropy(z, label) == doctest::Approx(oracle::naive_cross_entropy(z, label)).epsilon(1e-12));
    CHECK(cross_entropy(z, label) > 0.0);
  }
  CHECK_THROWS(loss(dense_net({1, 0, 0, 1}, {0, 0}, 2, 2), Tensor({2}, {0, 0}), 2));
}

TEST_CASE("input gradient of a single dense layer has the closed form (p - onehot) W") {
  Rng rng(8);
  std::vector<double> w(3 * 4);
  for (auto& v : w) v = rng.uniform(-1, 1);
  const Network net = dense_net(w, {0.1, -0.2, 0.3}, 3, 4);
  const Tensor x = random_input(rng, {4});
  const auto p = softmax(forward(net, x).values());
  const Tensor g = grad_input(net, x, 2);
  for (std::size_t j = 0; j < 4; ++j) {
    double expect = 0.0;
    for (std::size_t i = 0; i < 3; ++i) expect += (p[i] - (i == 2 ? 1.0 : 0.0)) * w[i * 4 + j];
    CHECK(g[j] == doctest::Approx(expect).epsilon(1e-12));
  }

  // zero weights: gradient does not depend on x
  const Network zero = dense_net(std::vector<double>(12, 0.0), {0.5, 0.0, -0.5}, 3, 4);
  CHECK(grad_input(zero, x, 1) == grad_input(zero, random_input(rng, {4}), 1));
}

TEST_CASE("input and parameter gradients match central differences") {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    Network net = oracle::random_network(rng, trial % 2 == 1);
    const Tensor x = random_input(rng, net.input_shape());
    const int label = static_cast<int>(rng.index(net.num_classes()));

    const Tensor gi = grad_input(net, x, label);
    const auto fd = oracle::central_difference([&](const std::vector<double>& v) { return oracle::naive_loss(net, v, label); },
                                               x.storage());
    for (std::size_t i = 0; i < fd.size(); ++i) CHECK(oracle::grad_rel_err(gi[i], fd[i]) < 1e-4);

    const Gradients gp = grad_params(net, x, label);
    auto params = net.parameters();
    REQUIRE(gp.size() == params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      for (std::size_t k = 0; k < params[p]->size(); ++k) {
        const double keep = (*params[p])[k];
        (*params[p])[k] = keep + 1e-5;
        const double up = oracle::naive_loss(net, x.storage(), label);
        (*params[p])[k] = keep - 1e-5;
        const double down = oracle::naive_loss(net, x.storage(), label);
        (*params[p])[k] = keep;
        CHECK(oracle::grad_rel_err(gp[p][k], (up - down) / 2e-5) < 1e-4);
      }
    }
  }
}

TEST_CASE("parameter-free networks and batch linearity") {
  const Network relu_only({3}, {ReLU{}});
  CHECK(relu_only.parameter_count() == 0);
  CHECK(grad_params(relu_only, Tensor({3}, {1, -1, 2}), 0).empty());

  Rng rng(9);
  const Network net = oracle::random_network(rng, false);
  const Tensor x = random_input(rng, net.input_shape());
  const std::vector<Tensor> one{x}, two{x, x};
  const std::vector<int> l1{0}, l2{0, 0};
  const Gradients g1 = grad_params_batch(net, one, l1);
  const Gradients g2 = grad_params_batch(net, two, l2);
  for (std::size_t p = 0; p < g1.size(); ++p)
    for (std::size_t k = 0; k < g1[p].size(); ++k) CHECK(g2[p][k] == doctest::Approx(2.0 * g1[p][k]).epsilon(1e-14));
}

TEST_CASE("network validation rejects broken chains") {
  CHECK_THROWS(Network({4}, {Dense{Tensor({2, 3}), Tensor({2})}}));
  CHECK_THROWS(Network({1, 4, 4}, {Conv2D{Tensor({2, 1, 5, 5}), Tensor({2}), 1, Padding::Valid}}));
  CHECK_THROWS(Network({1, 4, 4}, {Conv2D{Tensor({2, 1, 3, 3}), Tensor({2}), 0, Padding::Valid}}));
  // output must be a vector
  CHECK_THROWS(Network({1, 4, 4}, {ReLU{}}));
}

TEST_CASE("architecture strings round-trip and build the declared shapes") {
  const Architecture arch = parse_architecture("conv:8:3:same,relu,avgpool:2,conv:16:3:valid:2,relu,flatten,dense:10,relu,dense");
  CHECK(format_architecture(arch) == "conv:8:3:same,relu,avgpool:2,conv:16:3:valid:2,relu,flatten,dense:10,relu,dense");
  const Network net = build_network(arch, {3, 32, 32}, 4, 1);
  CHECK(net.num_classes() == 4);
  CHECK(net.activation_shapes()[1] == Shape{8, 32, 32});
  CHECK(net.activation_shapes()[3] == Shape{8, 16, 16});
  CHECK(net.activation_shapes()[4] == Shape{16, 7, 7});
  CHECK_THROWS(parse_architecture("conv:8"));
  CHECK_THROWS(parse_architecture("maxpool:2"));

  // Glorot-uniform bound and zero biases
  const auto& d = std::get<Dense>(net.layers().back());
  const double a = std::sqrt(6.0 / (10.0 + 4.0));
  for (double v : d.weight.values()) CHECK(std::abs(v) <= a);
  for (double v : d.bias.values()) CHECK(v == 0.0);
  CHECK(build_network(arch, {3, 32, 32}, 4, 1) == net);
  CHECK_FALSE(build_network(arch, {3, 32, 32}, 4, 2) == net);
}

TEST_CASE("training: zero epochs, determinism and a separable toy set") {
  // two Gaussian blobs along the first axis
  Rng rng(17);
  std::vector<Tensor> xs;
  std::vector<int> ys;
  for (int i = 0; i < 200; ++i) {
    const int y = i % 2;
    xs.push_back(Tensor({2}, {(y ? 1.5 : -1.5) + 0.5 * rng.normal(), rng.normal()}));
    ys.push_back(y);
  }
  const Network init = build_network(parse_architecture("dense:8,relu,dense"), {2}, 2, 4);

  TrainConfig zero;
  zero.epochs_per_rate = 0;
  CHECK(train(init, xs, ys, zero) == init);

  TrainConfig cfg;
  cfg.rng_seed = 99;
  cfg.epochs_per_rate = 3;
  std::vector<EpochRecord> log;
  const Network a = train(init, xs, ys, cfg, {}, &log);
  const Network b = train(init, xs, ys, cfg);
  CHECK(a == b);
  CHECK(log.size() == 9);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) correct += classify(a, xs[i]) == ys[i];
  CHECK(static_cast<double>(correct) / xs.size() >= 0.95);

  CHECK_THROWS(train(init, {}, {}, cfg));
  TrainConfig bad;
  bad.learning_rates = {0.1, -0.01};
  CHECK_THROWS(train(init, xs, ys, bad));
}

TEST_CASE("Lipschitz bound: hand cases and operator oracles") {
  CHECK(lipschitz_upper_bound(dense_net({2, 0, 0, 2}, {0, 0}, 2, 2)) == doctest::Approx(2.0).epsilon(1e-6));
  const Network diag({2}, {Dense{Tensor({2, 2}, {3, 0, 0, 1}), Tensor({2})}, ReLU{}});
  CHECK(lipschitz_upper_bound(diag) == doctest::Approx(3.0).epsilon(1e-6));

  Rng rng(31);
  for (int t = 0; t < 5; ++t) {
    const Network net = oracle::random_network(rng, true);
    const auto& conv = std::get<Conv2D>(net.layers()[0]);
    const Shape in = net.input_shape();
    const Shape out = net.activation_shapes()[1];
    // Explicit matrix of the conv operator (bias removed) and its exact spectral norm.
    Conv2D nobias = conv;
    nobias.bias.fill(0.0);
    const Layer l = nobias;
    const auto m = oracle::explicit_matrix(
        [&](const std::vector<double>& v) {
          Shape s;
          return oracle::naive_layer(l, in, v, s);
        },
        shape_size(in), shape_size(out));
    const double exact = oracle::largest_singular_value(m, shape_size(out), shape_size(in));
    // power iteration approaches from below; the stopping rule bounds the step, not the error
    const double est = layer_lipschitz(conv, in);
    CHECK(est <= exact * (1 + 1e-12));
    CHECK(est == doctest::Approx(exact).epsilon(1e-4));
  }

  // avgpool bound is >= its true operator norm
  const AvgPool2D pool{3, 1};
  const Shape pin{1, 6, 6};
  const auto pm = oracle::explicit_matrix(
      [&](const std::vector<double>& v) {
        Shape s;
        return oracle::naive_layer(Layer{pool}, pin, v, s);
      },
      36, 16);
  CHECK(layer_lipschitz(pool, pin) >= oracle::largest_singular_value(pm, 16, 36) - 1e-12);

  // sampled ratio never exceeds the bound
  for (int t = 0; t < 4; ++t) {
    const Network net = oracle::random_network(rng, t % 2 == 0);
    const double bound = lipschitz_upper_bound(net);
    double worst = 0.0;
    for (int s = 0; s < 2000; ++s) {
      const Tensor a = random_input(rng, net.input_shape());
      Tensor b = a;
      for (auto& v : b.values()) v += rng.uniform(-0.05, 0.05);
      const auto fa = forward(net, a), fb = forward(net, b);
      double num = 0, den = 0;
      for (std::size_t i = 0; i < fa.size(); ++i) num += (fa[i] - fb[i]) * (fa[i] - fb[i]);
      for (std::size_t i = 0; i < a.size(); ++i) den += (a[i] - b[i]) * (a[i] - b[i]);
      worst = std::max(worst, std::sqrt(num / den));
    }
    CHECK(worst <= bound * (1 + 1e-9));
  }
}

TEST_CASE("FENET1 round trip is bit-exact and corrupt files are rejected") {
  const Network net = build_network(default_architecture(), {3, 16, 16}, 5, 123);
  std::stringstream ss;
  write_network(ss, net, {{"filter", "lowpass(sigma=8)"}, {"seed", "7"}});
  const std::string bytes = ss.str();
  CHECK(bytes.rfind("FENET1\n", 0) == 0);

  std::stringstream in(bytes);
  const LoadedModel back = read_network(in);
  CHECK(back.net == net);
  CHECK(back.metadata.at("filter") == "lowpass(sigma=8)");

  std::stringstream again;
  write_network(again, back.net, back.metadata);
  CHECK(again.str() == bytes);

  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS(read_network(truncated));
  std::stringstream trailing(bytes + "x");
  CHECK_THROWS(read_network(trailing));
  std::stringstream badmagic("FENET2\n" + bytes.substr(7));
  CHECK_THROWS(read_network(badmagic));
}
