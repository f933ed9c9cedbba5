#include <doctest.h>

#include <random>

#include "gradient_cases.hpp"
#include "pemvc/errors.hpp"
#include "pemvc/model.hpp"

using namespace pemvc;
using namespace pemvc::model;
using nn::Tensor;
using testsupport::random_tensor;

namespace {

ModelConfig tiny(bool baseline = false) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 16;
  c.patch = {32, 8, 4};
  c.baseline = baseline;
  c.init_seed = 1;
  return c;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("patch count matches enumeration") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> ul(1, 300);
  for (int k = 0; k < 200; ++k) {
    const std::size_t l = ul(rng);
    const std::size_t p = std::uniform_int_distribution<std::size_t>(1, l)(rng);
    const std::size_t s = std::uniform_int_distribution<std::size_t>(1, p)(rng);
    std::size_t brute = 0;
    for (std::size_t start = 0; start + p <= l; start += s) ++brute;
    REQUIRE(n_patches(l, p, s) == brute);
  }
  CHECK(n_patches(1024, 64, 32) == 31);
  CHECK(n_patches(64, 64, 7) == 1);
  CHECK_THROWS_AS(n_patches(10, 11, 1), ConfigError);
  CHECK_THROWS_AS(n_patches(10, 4, 0), ConfigError);
  CHECK_THROWS_AS((PatchConfig{10, 4, 5}.validate()), ConfigError);
}

TEST_CASE("patch starts and contents") {
  const PatchConfig cfg{10, 4, 3};
  std::vector<double> seq(20);
  for (std::size_t t = 0; t < 10; ++t) seq[t * 2] = static_cast<double>(t), seq[t * 2 + 1] = 100.0 + t;
  const auto p = patchify<double>(seq, 2, cfg);
  REQUIRE(p.size() == 3 * 8);
  CHECK(p[0] == 0.0);
  CHECK(p[1] == 100.0);
  CHECK(p[8] == 3.0);
  CHECK(p[16] == 6.0);
  CHECK(p[23] == 109.0);
  CHECK_THROWS_AS(patchify<double>(std::vector<double>(19), 2, cfg), ShapeError);
}

TEST_CASE("coverage counts") {
  const auto c = coverage_counts({1024, 64, 32});
  CHECK(c.front() == 1);
  CHECK(c[32] == 2);
  CHECK(c[500] == 2);
  CHECK(c[1000] == 1);
  CHECK(c.back() == 1);
  for (auto k : coverage_counts({1024, 1, 1})) CHECK(k == 1);
}

TEST_CASE("overlap reconstruction recovers a patchified signal") {
  const PatchConfig cfg{40, 8, 4};
  std::vector<double> seq(40);
  for (std::size_t t = 0; t < 40; ++t) seq[t] = std::sin(0.3 * static_cast<double>(t));
  const auto p = patchify<double>(seq, 1, cfg);
  const auto back = nn::overlap_average(Tensor<double>::from({cfg.n_patches(), 8}, p), 40, 4);
  for (std::size_t t = 0; t < 40; ++t) CHECK(back.data()[t] == doctest::Approx(seq[t]).epsilon(1e-14));
}

TEST_CASE("embedding is an affine map plus position") {
  auto patches = Tensor<double>::from({2, 3}, {1, 0, 0, 0, 2, 1});
  auto w = Tensor<double>::from({3, 2}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor<double>::from({2}, {0.5, -0.5});
  auto pos = Tensor<double>::from({2, 2}, {0, 0, 10, 20});
  const auto e = embed_patches(patches, w, b, pos);
  const std::vector<double> want{1.5, 1.5, 21.5, 33.5};
  for (std::size_t i = 0; i < 4; ++i) CHECK(e.data()[i] == doctest::Approx(want[i]));

  const auto pe = sinusoidal_positions<double>(3, 4);
  CHECK(pe[0] == 0.0);
  CHECK(pe[1] == 1.0);
  CHECK(pe[4] == doctest::Approx(std::sin(1.0)));
  CHECK(pe[6] == doctest::Approx(std::sin(0.01)));
}

TEST_CASE("forward shapes") {
  for (bool baseline : {false, true}) {
    Transformer<double> m(tiny(baseline));
    const auto z = m.encode(random_tensor({32, 2}, 1, -1, 1, false));
    CHECK(z.shape() == nn::Shape{baseline ? 32u : 7u, 8});
    const auto y = m.decode(random_tensor({32, 2}, 2, -1, 1, false), z);
    CHECK(y.shape() == nn::Shape{32, 1});
    CHECK_THROWS_AS(m.encode(random_tensor({31, 2}, 3)), ShapeError);
    CHECK_THROWS_AS(m.decode(random_tensor({32, 2}, 3), random_tensor({5, 8}, 4)), ShapeError);
  }
}

TEST_CASE("zero head yields zero output") {
  Transformer<double> m(tiny());
  for (std::size_t i = 0; i < m.parameters().size(); ++i)
    if (m.parameter_names()[i].rfind("dec.head", 0) == 0)
      for (auto& v : m.parameters()[i].mutable_data()) v = 0;
  const auto y = m.forward(random_tensor({32, 2}, 5), random_tensor({32, 2}, 6));
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("end-to-end gradients") {
  CHECK(testsupport::end_to_end_gradient_error(false) < 1e-3);
  CHECK(testsupport::end_to_end_gradient_error(true) < 1e-3);
}

TEST_CASE("initialization is seeded") {
  Transformer<float> a(tiny()), b(tiny());
  auto c_cfg = tiny();
  c_cfg.init_seed = 2;
  Transformer<float> c(c_cfg);
  CHECK(a.parameter_count() == c.parameter_count());
  const auto& pa = a.parameters()[0].data();
  CHECK(std::equal(pa.begin(), pa.end(), b.parameters()[0].data().begin()));
  CHECK_FALSE(std::equal(pa.begin(), pa.end(), c.parameters()[0].data().begin()));
}

TEST_CASE("config hash and parsing") {
  auto a = tiny();
  auto b = tiny();
  b.init_seed = 99;
  CHECK(config_hash(a) == config_hash(b));
  b.d_model = 16;
  CHECK(config_hash(a) != config_hash(b));
  const auto back = model_config_from_json(to_json(a), "model");
  CHECK(config_hash(back) == config_hash(a));
  CHECK_THROWS_AS(model_config_from_json(Json{{"depth", 3}}, "model"), ConfigError);
  a.n_heads = 3;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  auto v = tiny(true);
  CHECK(v.tokens().patch == 1);
  CHECK(v.tokens().n_patches() == 32);
}

TEST_CASE("patch model is smaller in tokens than the baseline") {
  ModelConfig paper;
  CHECK(paper.tokens().n_patches() == 31);
  paper.baseline = true;
  CHECK(paper.tokens().n_patches() == 1024);
}

}  // TEST_SUITE
