#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pemvc/cellsim.hpp"
#include "pemvc/ops.hpp"
#include "pemvc/tensor.hpp"

namespace testsupport {

using pemvc::nn::Shape;
using pemvc::nn::Tensor;

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(pemvc::nn::shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>::from(std::move(shape), std::move(v), requires_grad);
}

/// Reduces any output to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct coefficient.
inline Tensor<double> weighted_sum(const Tensor<double>& t, std::uint64_t seed = 99) {
  auto w = random_tensor(t.shape(), seed, 0.5, 1.5, false);
  if (t.dim() == 0) return pemvc::nn::mul(t, w);
  return pemvc::nn::sum(pemvc::nn::mul(t, w));
}

using ScalarFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Largest over inputs of ||g_reverse - g_fd|| / max(||g_reverse||, ||g_fd||, 1e-6),
/// with central differences of step h. The floor covers parameters whose true
/// gradient is zero (key biases under softmax).
inline double gradient_error(const ScalarFn& f, std::vector<Tensor<double>> inputs, double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  f(inputs).backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<double> numeric(t.numel());
    pemvc::nn::NoGradGuard guard;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double x0 = t.data()[i];
      t.mutable_data()[i] = x0 + h;
      const double fp = f(inputs).item();
      t.mutable_data()[i] = x0 - h;
      const double fm = f(inputs).item();
      t.mutable_data()[i] = x0;
      numeric[i] = (fp - fm) / (2 * h);
    }
    double diff = 0, na = 0, nn_ = 0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn_ += numeric[i] * numeric[i];
    }
    const double denom = std::max(std::sqrt(std::max(na, nn_)), 1e-6);
    worst = std::max(worst, std::sqrt(diff) / denom);
  }
  return worst;
}

/// Short run that still yields full encoder windows: 100-cycle segments of
/// 2000 samples and a 3-level, 600-sample polarization test.
inline pemvc::cellsim::RunConfig small_run_config(std::uint64_t seed = 5, std::size_t checkpoints = 6) {
  pemvc::cellsim::RunConfig c;
  c.name = "small";
  c.seed = seed;
  c.rates = {2e-4, 1e-3};
  c.profile.kind = pemvc::cellsim::ProfileKind::load_unload;
  c.profile.hold_s = 1.0;
  c.protocol.levels = {0.5, 1.5, 2.5};
  c.protocol.hold_s = 20;
  c.protocol.steady_window_s = 10;
  for (std::size_t i = 1; i <= checkpoints; ++i) c.checkpoints.push_back(100 * i);
  return c;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("pemvc_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Byte-level comparison of two directory trees.
inline bool same_tree(const std::filesystem::path& a, const std::filesystem::path& b) {
  namespace fs = std::filesystem;
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b));
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb) return false;
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  for (const auto& rel : fa)
    if (slurp(a / rel) != slurp(b / rel)) return false;
  return true;
}

}  // namespace testsupport
