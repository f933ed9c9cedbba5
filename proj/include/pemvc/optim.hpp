#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "pemvc/tensor.hpp"

namespace pemvc::nn {

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;  // one buffer per parameter
  std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update over `params` using their accumulated
/// grads. Parameters without a grad are treated as having a zero gradient.
/// Moment buffers are created on the first call.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState& state);

/// Reduce-on-plateau learning-rate schedule for a minimized metric.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor = 0.5, int patience = 5, double min_lr = 1e-6,
                   double threshold = 1e-6);

  /// Feeds one epoch's monitored value; returns the (possibly reduced) lr.
  double step(double metric);

  double lr() const { return lr_; }
  double best() const { return best_; }
  int epochs_since_improvement() const { return bad_epochs_; }
  const std::vector<double>& history() const { return history_; }

 private:
  double lr_;
  double factor_;
  int patience_;
  double min_lr_;
  double threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
  std::vector<double> history_;
};

}  // namespace pemvc::nn
