#include "pemvc/optim.hpp"

#include <algorithm>
#include <cmath>

namespace pemvc::nn {

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("adam_step: state holds " + std::to_string(state.m.size()) +
                     " moment buffers for " + std::to_string(params.size()) + " parameters");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.numel()) {
      throw ShapeError("adam_step: moment size mismatch for parameter " + std::to_string(i) +
                       " of shape " + shape_str(p.shape()));
    }
    if (!p.has_grad()) {
      // Zero gradient: moments decay, update uses the decayed moments.
      for (std::size_t j = 0; j < m.size(); ++j) {
        m[j] *= state.beta1;
        v[j] *= state.beta2;
      }
    } else {
      auto g = p.grad();
      for (std::size_t j = 0; j < m.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
        v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      }
    }
    auto data = p.mutable_data();
    for (std::size_t j = 0; j < m.size(); ++j) {
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      data[j] = static_cast<T>(static_cast<double>(data[j]) -
                               state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

template void adam_step<float>(std::vector<Tensor<float>>&, AdamState&);
template void adam_step<double>(std::vector<Tensor<double>>&, AdamState&);

PlateauScheduler::PlateauScheduler(double lr, double factor, int patience, double min_lr,
                                   double threshold)
    : lr_(std::max(lr, min_lr)),
      factor_(factor),
      patience_(patience),
      min_lr_(min_lr),
      threshold_(threshold) {}

double PlateauScheduler::step(double metric) {
  history_.push_back(metric);
  if (metric < best_ - threshold_) {
    best_ = metric;
    bad_epochs_ = 0;
    return lr_;
  }
  if (++bad_epochs_ >= patience_) {
    lr_ = std::max(lr_ * factor_, min_lr_);
    bad_epochs_ = 0;
  }
  return lr_;
}

}  // namespace pemvc::nn
