#include <doctest.h>

#include <cmath>

#include "gradient_cases.hpp"
#include "pemvc/checkpoint.hpp"
#include "pemvc/errors.hpp"
#include "pemvc/optim.hpp"

using namespace pemvc;
using nn::Tensor;
using testsupport::random_tensor;

TEST_SUITE("numerics") {

TEST_CASE("every primitive matches central differences") {
  for (const auto& c : testsupport::primitive_gradient_cases()) {
    INFO(c.name);
    CHECK(c.error < 1e-4);
  }
}

TEST_CASE("gradient of sum of squares") {
  auto x = Tensor<double>::from({2}, {3.0, -1.0}, true);
  nn::sum(nn::mul(x, x)).backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  CHECK(x.grad()[1] == doctest::Approx(-2.0));
}

TEST_CASE("backward is linear over shared inputs") {
  auto x = random_tensor({3, 3}, 1);
  auto f = [](const Tensor<double>& t) { return nn::sum(nn::gelu(t)); };
  auto g = [](const Tensor<double>& t) { return nn::sum(nn::softmax(t, 1)); };
  nn::add(f(x), g(x)).backward();
  const std::vector<double> both(x.grad().begin(), x.grad().end());
  x.zero_grad();
  f(x).backward();
  g(x).backward();
  for (std::size_t i = 0; i < both.size(); ++i) CHECK(both[i] == doctest::Approx(x.grad()[i]).epsilon(1e-12));
}

TEST_CASE("softmax and attention structure") {
  auto u = Tensor<double>::from({1, 4}, {0.3, 0.3, 0.3, 0.3});
  const auto su = nn::softmax(u, 1);
  for (double p : su.data()) CHECK(p == doctest::Approx(0.25));

  auto s = nn::softmax(random_tensor({5, 7}, 2, -4, 4), 1);
  for (std::size_t r = 0; r < 5; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 7; ++c) sum += s.data()[r * 7 + c];
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }

  // One key/value token: output is that value row for every query.
  auto q = random_tensor({3, 2}, 3);
  auto k = random_tensor({1, 2}, 4);
  auto v = Tensor<double>::from({1, 3}, {0.5, -2.0, 7.0});
  auto o = nn::scaled_dot_attention(q, k, v, 1.0);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) CHECK(o.data()[r * 3 + c] == doctest::Approx(v.data()[c]));

  // Outputs lie inside the per-column hull of the value rows.
  auto vv = random_tensor({6, 2}, 5);
  auto out = nn::scaled_dot_attention(random_tensor({4, 3}, 6), random_tensor({6, 3}, 7), vv, 0.5);
  for (std::size_t c = 0; c < 2; ++c) {
    double lo = 1e9, hi = -1e9;
    for (std::size_t r = 0; r < 6; ++r) lo = std::min(lo, vv.data()[r * 2 + c]), hi = std::max(hi, vv.data()[r * 2 + c]);
    for (std::size_t r = 0; r < 4; ++r) {
      CHECK(out.data()[r * 2 + c] >= lo - 1e-6);
      CHECK(out.data()[r * 2 + c] <= hi + 1e-6);
    }
  }
}

TEST_CASE("layer norm of a constant row is zero before the affine") {
  auto x = Tensor<double>::from({1, 4}, {2.0, 2.0, 2.0, 2.0});
  auto g = Tensor<double>::from({4}, {1, 1, 1, 1});
  auto b = Tensor<double>::zeros({4});
  const auto y = nn::layer_norm(x, g, b, 1);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("shape mismatches name both shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({3, 2});
  try {
    nn::add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[3, 2]") != std::string::npos);
  }
  CHECK_THROWS_AS(nn::matmul(a, a), ShapeError);
}

TEST_CASE("mse loss") {
  auto p = Tensor<double>::from({2, 1}, {0, 0});
  auto t = Tensor<double>::from({2, 1}, {1, 1});
  CHECK(nn::mse_loss(p, t).item() == doctest::Approx(1.0));
  CHECK(nn::mse_loss(t, t).item() == 0.0);

  auto pred = random_tensor({8, 1}, 9);
  auto target = random_tensor({8, 1}, 10);
  auto mask = Tensor<double>::from({8, 1}, {1, 0, 1, 0, 1, 0, 1, 0});
  double expect = 0;
  for (std::size_t i = 0; i < 8; i += 2) expect += std::pow(pred.data()[i] - target.data()[i], 2);
  CHECK(nn::mse_loss(pred, target, std::make_optional(mask)).item() == doctest::Approx(expect / 4));
  CHECK_THROWS_AS(nn::mse_loss(pred, target, std::make_optional(Tensor<double>::zeros({8, 1}))), DomainError);
}

TEST_CASE("masked positions never reach the loss") {
  auto pred = random_tensor({6, 1}, 11);
  auto mask = Tensor<double>::from({6, 1}, {1, 1, 1, 1, 0, 0});
  auto t1 = Tensor<double>::from({6, 1}, {0.1, 0.2, 0.3, 0.4, 9.0, -9.0});
  auto t2 = Tensor<double>::from({6, 1}, {0.1, 0.2, 0.3, 0.4, -3.0, 100.0});
  CHECK(nn::mse_loss(pred, t1, std::make_optional(mask)).item() == nn::mse_loss(pred, t2, std::make_optional(mask)).item());
  CHECK(nn::masked_sse(pred, t1, mask, 4.0).item() == nn::masked_sse(pred, t2, mask, 4.0).item());
}

TEST_CASE("no-grad mode records no graph") {
  auto x = random_tensor({2, 2}, 12);
  nn::NoGradGuard guard;
  auto y = nn::gelu(nn::matmul(x, x));
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node().parents.empty());
}

TEST_CASE("adam first step") {
  auto p = Tensor<double>::from({1}, {0.0}, true);
  p.mutable_grad()[0] = 1.0;
  nn::AdamState s;
  s.lr = 1e-4;
  std::vector<Tensor<double>> params{p};
  nn::adam_step(params, s);
  // m_hat = 1, v_hat = 1: update = lr / (1 + eps).
  CHECK(p.data()[0] == doctest::Approx(-1e-4 / (1.0 + 1e-8)).epsilon(1e-12));
  CHECK(s.step == 1);
}

TEST_CASE("adam leaves parameters alone under zero gradient") {
  auto p = random_tensor({3, 3}, 13);
  const std::vector<double> before(p.data().begin(), p.data().end());
  std::vector<Tensor<double>> params{p};
  nn::AdamState s;
  for (int i = 0; i < 5; ++i) {
    p.zero_grad();
    p.mutable_grad();
    nn::adam_step(params, s);
  }
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(p.data()[i] == before[i]);
}

TEST_CASE("adam is deterministic") {
  auto run = [] {
    auto w = random_tensor({4, 2}, 14);
    auto x = random_tensor({5, 4}, 15, -1, 1, false);
    std::vector<Tensor<double>> params{w};
    nn::AdamState s;
    s.lr = 1e-2;
    for (int i = 0; i < 10; ++i) {
      w.zero_grad();
      nn::sum(nn::gelu(nn::matmul(x, w))).backward();
      nn::adam_step(params, s);
    }
    return std::vector<double>(w.data().begin(), w.data().end());
  };
  CHECK(run() == run());
}

TEST_CASE("plateau scheduler") {
  SUBCASE("improving losses keep the rate") {
    nn::PlateauScheduler s(1e-3);
    for (int i = 0; i < 20; ++i) CHECK(s.step(1.0 - 0.01 * i) == 1e-3);
  }
  SUBCASE("constant loss for patience + 1 epochs reduces once") {
    nn::PlateauScheduler s(1e-3, 0.5, 5);
    for (int i = 0; i < 6; ++i) s.step(0.5);
    CHECK(s.lr() == doctest::Approx(5e-4));
    // Counter simulation: the next reduction needs another `patience` bad epochs.
    for (int i = 0; i < 4; ++i) s.step(0.5);
    CHECK(s.lr() == doctest::Approx(5e-4));
    s.step(0.5);
    CHECK(s.lr() == doctest::Approx(2.5e-4));
  }
  SUBCASE("improvements below the threshold do not count") {
    nn::PlateauScheduler s(1e-3, 0.5, 2);
    s.step(1.0);
    s.step(1.0 - 5e-7);
    s.step(1.0 - 9e-7);
    CHECK(s.lr() == doctest::Approx(5e-4));
  }
  SUBCASE("floor at min_lr") {
    nn::PlateauScheduler s(2e-6, 0.5, 1, 1e-6);
    for (int i = 0; i < 10; ++i) s.step(1.0);
    CHECK(s.lr() == 1e-6);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto dir = testsupport::temp_dir("ckpt");
  auto a = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6.5f}, true);
  auto b = Tensor<float>::from({3}, {-1, 0, 1}, true);
  std::vector<Tensor<float>> params{a, b};
  const std::vector<std::string> names{"a", "b"};
  nn::AdamState adam;
  adam.step = 3;
  adam.m = {std::vector<double>(6, 0.25), std::vector<double>(3, -0.5)};
  adam.v = {std::vector<double>(6, 1e-3), std::vector<double>(3, 2e-3)};
  nn::Checkpoint ck{nn::snapshot(names, params), adam, Json{{"note", "x"}}};
  nn::save_checkpoint(dir / "m.json", ck);
  const auto back = nn::load_checkpoint(dir / "m.json");
  REQUIRE(back.params.size() == 2);
  CHECK(back.params[0].values == ck.params[0].values);
  CHECK(back.params[1].shape == nn::Shape{3});
  REQUIRE(back.adam);
  CHECK(back.adam->step == 3);
  CHECK(back.adam->m[1] == adam.m[1]);
  CHECK(back.adam->v[0] == adam.v[0]);
  CHECK(back.meta.at("note") == "x");

  auto c = Tensor<float>::zeros({2, 3}, true);
  auto d = Tensor<float>::zeros({3}, true);
  std::vector<Tensor<float>> target{c, d};
  nn::restore(back.params, names, target);
  CHECK(c.data()[5] == 6.5f);
  std::vector<Tensor<float>> wrong{Tensor<float>::zeros({3, 2}), d};
  CHECK_THROWS_AS(nn::restore(back.params, names, wrong), DataError);
}

}  // TEST_SUITE
