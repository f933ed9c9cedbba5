#include "pemvc/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <cmath>
#include <numbers>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace pemvc::nn {
namespace {

#ifdef __GLIBC__
// Attention buffers are megabytes each and are freed every step. Left to the
// default thresholds glibc returns them to the kernel and page-faults them
// back in on the next pass, which costs about a third of a long-sequence step.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
  return true;
}();
#endif

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

// Wraps a freshly computed value. Parents and the backward closure are kept
// only when some parent needs a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> value, std::vector<NodePtr<T>> parents,
                      std::function<void(detail::Node<T>&)> backward) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  if (grad_mode())
    for (const auto& p : parents) any = any || p->requires_grad;
  if (any) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& a, std::size_t rank) {
  if (a.dim() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
void accumulate(detail::Node<T>& target, const Buffer<T>& g) {
  if (!target.requires_grad) return;
  auto& dst = target.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  Buffer<T> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                        [](detail::Node<T>& self) {
                          accumulate(*self.parents[0], self.grad);
                          accumulate(*self.parents[1], self.grad);
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  Buffer<T> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                        [](detail::Node<T>& self) {
                          accumulate(*self.parents[0], self.grad);
                          auto& pb = *self.parents[1];
                          if (!pb.requires_grad) return;
                          auto& g = pb.ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  Buffer<T> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                        [](detail::Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          if (pa.requires_grad) {
                            auto& g = pa.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += self.grad[i] * pb.value[i];
                          }
                          if (pb.requires_grad) {
                            auto& g = pb.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += self.grad[i] * pa.value[i];
                          }
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Buffer<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result<T>(a.shape(), std::move(out), {a.node_ptr()},
                        [factor](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
                        });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  require_rank("add_bias", x, 2);
  if (b.dim() != 1 || b.size(0) != x.size(1)) {
    throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = x.size(0), cols = x.size(1);
  Buffer<T> out(x.data().begin(), x.data().end());
  auto bv = b.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  return make_result<T>(x.shape(), std::move(out), {x.node_ptr(), b.node_ptr()},
                        [rows, cols](detail::Node<T>& self) {
                          accumulate(*self.parents[0], self.grad);
                          auto& pb = *self.parents[1];
                          if (!pb.requires_grad) return;
                          auto& g = pb.ensure_grad();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
                        });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.size(1) != b.size(0)) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const auto n = static_cast<Eigen::Index>(a.size(0));
  const auto k = static_cast<Eigen::Index>(a.size(1));
  const auto m = static_cast<Eigen::Index>(b.size(1));
  Buffer<T> out(static_cast<std::size_t>(n * m));
  MatMap<T>(out.data(), n, m).noalias() =
      ConstMatMap<T>(a.data().data(), n, k) * ConstMatMap<T>(b.data().data(), k, m);
  return make_result<T>(
      {a.size(0), b.size(1)}, std::move(out), {a.node_ptr(), b.node_ptr()},
      [n, k, m](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        ConstMatMap<T> dc(self.grad.data(), n, m);
        if (pa.requires_grad) {
          MatMap<T>(pa.ensure_grad().data(), n, k).noalias() +=
              dc * ConstMatMap<T>(pb.value.data(), k, m).transpose();
        }
        if (pb.requires_grad) {
          MatMap<T>(pb.ensure_grad().data(), k, m).noalias() +=
              ConstMatMap<T>(pa.value.data(), n, k).transpose() * dc;
        }
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.size(0), c = a.size(1);
  Buffer<T> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return make_result<T>({c, r}, std::move(out), {a.node_ptr()},
                        [r, c](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Buffer<T> out(a.data().begin(), a.data().end());
  return make_result<T>(std::move(shape), std::move(out), {a.node_ptr()},
                        [](detail::Node<T>& self) { accumulate(*self.parents[0], self.grad); });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Shape& first = parts.front().shape();
  Shape out_shape = first;
  split_axis(first, axis, "concat");
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) {
      throw ShapeError("concat: rank mismatch " + shape_str(first) + " vs " + shape_str(probe));
    }
    probe[axis] = first[axis];
    if (probe != first) {
      throw ShapeError("concat: shape mismatch off axis " + shape_str(first) + " vs " +
                       shape_str(p.shape()));
    }
    out_shape[axis] += p.size(axis);
  }
  const AxisSplit os = split_axis(out_shape, axis, "concat");
  Buffer<T> out(shape_numel(out_shape));
  std::vector<std::size_t> widths;
  std::vector<NodePtr<T>> parents;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.size(axis) * os.inner;
    auto pv = p.data();
    for (std::size_t o = 0; o < os.outer; ++o)
      std::copy_n(pv.begin() + o * w, w, out.begin() + o * os.n * os.inner + offset);
    offset += w;
    widths.push_back(w);
    parents.push_back(p.node_ptr());
  }
  const std::size_t row = os.n * os.inner;
  return make_result<T>(std::move(out_shape), std::move(out), std::move(parents),
                        [widths, row, outer = os.outer](detail::Node<T>& self) {
                          std::size_t off = 0;
                          for (std::size_t i = 0; i < widths.size(); ++i) {
                            auto& p = *self.parents[i];
                            if (p.requires_grad) {
                              auto& g = p.ensure_grad();
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t j = 0; j < widths[i]; ++j)
                                  g[o * widths[i] + j] += self.grad[o * row + off + j];
                            }
                            off += widths[i];
                          }
                        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_axis(a.shape(), axis, "slice");
  if (start + length > s.n) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") exceeds axis of " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  const std::size_t w = length * s.inner;
  const std::size_t row = s.n * s.inner;
  const std::size_t off = start * s.inner;
  Buffer<T> out(s.outer * w);
  auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(av.begin() + o * row + off, w, out.begin() + o * w);
  return make_result<T>(std::move(out_shape), std::move(out), {a.node_ptr()},
                        [w, row, off, outer = s.outer](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t j = 0; j < w; ++j)
                              g[o * row + off + j] += self.grad[o * w + j];
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  return make_result<T>({}, {static_cast<T>(acc)}, {a.node_ptr()}, [](detail::Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "sum");
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Buffer<T> out(s.outer * s.inner, T(0));
  auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.n; ++i)
      for (std::size_t in = 0; in < s.inner; ++in)
        out[o * s.inner + in] += av[(o * s.n + i) * s.inner + in];
  return make_result<T>(std::move(out_shape), std::move(out), {a.node_ptr()},
                        [s](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t o = 0; o < s.outer; ++o)
                            for (std::size_t i = 0; i < s.n; ++i)
                              for (std::size_t in = 0; in < s.inner; ++in)
                                g[(o * s.n + i) * s.inner + in] += self.grad[o * s.inner + in];
                        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "mean");
  if (s.n == 0) throw ShapeError("mean: empty axis in " + shape_str(a.shape()));
  return scale(sum(a, axis), T(1) / static_cast<T>(s.n));
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "softmax");
  Buffer<T> out(a.numel());
  auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      T mx = av[base];
      for (std::size_t i = 1; i < s.n; ++i) mx = std::max(mx, av[base + i * s.inner]);
      T total = 0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const T e = std::exp(av[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] /= total;
    }
  }
  return make_result<T>(a.shape(), std::move(out), {a.node_ptr()}, [s](detail::Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& y = self.value;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        T dot = 0;
        for (std::size_t i = 0; i < s.n; ++i) dot += self.grad[base + i * s.inner] * y[base + i * s.inner];
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t idx = base + i * s.inner;
          g[idx] += y[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::size_t axis, T eps) {
  const AxisSplit s = split_axis(a.shape(), axis, "layer_norm");
  if (gamma.shape() != Shape{s.n} || beta.shape() != Shape{s.n}) {
    throw ShapeError("layer_norm: affine " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " does not match axis of " + shape_str(a.shape()));
  }
  Buffer<T> out(a.numel());
  Buffer<T> xhat(a.numel());
  Buffer<T> inv_std(s.outer * s.inner);
  auto av = a.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      T mu = 0;
      for (std::size_t i = 0; i < s.n; ++i) mu += av[base + i * s.inner];
      mu /= static_cast<T>(s.n);
      T var = 0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const T d = av[base + i * s.inner] - mu;
        var += d * d;
      }
      var /= static_cast<T>(s.n);
      const T rs = T(1) / std::sqrt(var + eps);
      inv_std[o * s.inner + in] = rs;
      for (std::size_t i = 0; i < s.n; ++i) {
        const std::size_t idx = base + i * s.inner;
        xhat[idx] = (av[idx] - mu) * rs;
        out[idx] = xhat[idx] * gv[i] + bv[i];
      }
    }
  }
  return make_result<T>(
      a.shape(), std::move(out), {a.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
      [s, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& gv = pg.value;
        const T n = static_cast<T>(s.n);
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            if (pg.requires_grad || pb.requires_grad) {
              for (std::size_t i = 0; i < s.n; ++i) {
                const std::size_t idx = base + i * s.inner;
                if (pg.requires_grad) pg.ensure_grad()[i] += self.grad[idx] * xhat[idx];
                if (pb.requires_grad) pb.ensure_grad()[i] += self.grad[idx];
              }
            }
            if (!px.requires_grad) continue;
            T sum_d = 0, sum_dx = 0;
            for (std::size_t i = 0; i < s.n; ++i) {
              const std::size_t idx = base + i * s.inner;
              const T d = self.grad[idx] * gv[i];
              sum_d += d;
              sum_dx += d * xhat[idx];
            }
            const T rs = inv_std[o * s.inner + in];
            auto& g = px.ensure_grad();
            for (std::size_t i = 0; i < s.n; ++i) {
              const std::size_t idx = base + i * s.inner;
              const T d = self.grad[idx] * gv[i];
              g[idx] += rs * (d - sum_d / n - xhat[idx] * sum_dx / n);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  const auto n = static_cast<Eigen::Index>(a.numel());
  Eigen::Map<const Arr> x(a.data().data(), n);
  // Phi(x) is kept for the backward pass.
  Arr cdf = T(0.5) * (T(1) + (x * inv_sqrt2).erf());
  Buffer<T> out(a.numel());
  Eigen::Map<Arr>(out.data(), n) = x * cdf;
  return make_result<T>(a.shape(), std::move(out), {a.node_ptr()},
                        [inv_sqrt2, n, cdf = std::move(cdf)](detail::Node<T>& self) {
                          auto& p = *self.parents[0];
                          const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
                          Eigen::Map<const Arr> xv(p.value.data(), n);
                          Eigen::Map<const Arr> g(self.grad.data(), n);
                          Eigen::Map<Arr>(p.ensure_grad().data(), n) +=
                              g * (cdf + xv * inv_sqrt_2pi * (T(-0.5) * xv.square()).exp());
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank("linear", x, 2);
  require_rank("linear", w, 2);
  if (x.size(1) != w.size(0) || b.dim() != 1 || b.size(0) != w.size(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()) + " / bias " + shape_str(b.shape()));
  }
  const auto n = static_cast<Eigen::Index>(x.size(0));
  const auto k = static_cast<Eigen::Index>(x.size(1));
  const auto m = static_cast<Eigen::Index>(w.size(1));
  Buffer<T> out(static_cast<std::size_t>(n * m));
  MatMap<T> y(out.data(), n, m);
  y.noalias() = ConstMatMap<T>(x.data().data(), n, k) * ConstMatMap<T>(w.data().data(), k, m);
  y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data().data(), m);
  return make_result<T>(
      {x.size(0), w.size(1)}, std::move(out), {x.node_ptr(), w.node_ptr(), b.node_ptr()},
      [n, k, m](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        ConstMatMap<T> dy(self.grad.data(), n, m);
        if (px.requires_grad) {
          MatMap<T>(px.ensure_grad().data(), n, k).noalias() +=
              dy * ConstMatMap<T>(pw.value.data(), k, m).transpose();
        }
        if (pw.requires_grad) {
          MatMap<T>(pw.ensure_grad().data(), k, m).noalias() +=
              ConstMatMap<T>(px.value.data(), n, k).transpose() * dy;
        }
        if (pb.requires_grad) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(pb.ensure_grad().data(), m) +=
              dy.colwise().sum();
        }
      });
}

template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               T scale_factor) {
  require_rank("scaled_dot_attention", q, 2);
  require_rank("scaled_dot_attention", k, 2);
  require_rank("scaled_dot_attention", v, 2);
  if (q.size(1) != k.size(1) || k.size(0) != v.size(0)) {
    throw ShapeError("scaled_dot_attention: Q " + shape_str(q.shape()) + ", K " +
                     shape_str(k.shape()) + ", V " + shape_str(v.shape()) + " incompatible");
  }
  if (!(scale_factor > T(0))) throw DomainError("scaled_dot_attention: scale must be positive");
  const auto n = static_cast<Eigen::Index>(q.size(0));
  const auto m = static_cast<Eigen::Index>(k.size(0));
  const auto d = static_cast<Eigen::Index>(q.size(1));
  const auto dv = static_cast<Eigen::Index>(v.size(1));

  Buffer<T> probs(static_cast<std::size_t>(n * m));
  MatMap<T> p(probs.data(), n, m);
  p.noalias() = ConstMatMap<T>(q.data().data(), n, d) * ConstMatMap<T>(k.data().data(), m, d).transpose();
  for (Eigen::Index r = 0; r < n; ++r) {
    auto row = p.row(r).array();
    const T mx = row.maxCoeff();
    row = ((row - mx) * scale_factor).exp();
    row *= T(1) / row.sum();
  }
  Buffer<T> out(static_cast<std::size_t>(n * dv));
  MatMap<T>(out.data(), n, dv).noalias() = p * ConstMatMap<T>(v.data().data(), m, dv);

  return make_result<T>(
      {q.size(0), v.size(1)}, std::move(out), {q.node_ptr(), k.node_ptr(), v.node_ptr()},
      [n, m, d, dv, scale_factor, probs = std::move(probs)](detail::Node<T>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        ConstMatMap<T> prob(probs.data(), n, m);
        ConstMatMap<T> dout(self.grad.data(), n, dv);
        if (pv.requires_grad) {
          MatMap<T>(pv.ensure_grad().data(), m, dv).noalias() += prob.transpose() * dout;
        }
        if (!pq.requires_grad && !pk.requires_grad) return;
        RowMat<T> ds(n, m);
        ds.noalias() = dout * ConstMatMap<T>(pv.value.data(), m, dv).transpose();
        for (Eigen::Index r = 0; r < n; ++r) {
          const T dot = ds.row(r).dot(prob.row(r));
          ds.row(r) = (prob.row(r).array() * (ds.row(r).array() - dot)).matrix() * scale_factor;
        }
        if (pq.requires_grad) {
          MatMap<T>(pq.ensure_grad().data(), n, d).noalias() +=
              ds * ConstMatMap<T>(pk.value.data(), m, d);
        }
        if (pk.requires_grad) {
          MatMap<T>(pk.ensure_grad().data(), m, d).noalias() +=
              ds.transpose() * ConstMatMap<T>(pq.value.data(), n, d);
        }
      });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, T p, std::mt19937_64& rng) {
  if (p < T(0) || p >= T(1)) throw DomainError("dropout: p must lie in [0, 1)");
  if (p == T(0)) return a;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const T gain = T(1) / (T(1) - p);
  Buffer<T> mask(a.numel());
  for (auto& m : mask) m = keep(rng) ? gain : T(0);
  Buffer<T> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * mask[i];
  return make_result<T>(a.shape(), std::move(out), {a.node_ptr()},
                        [mask = std::move(mask)](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
                        });
}

template <typename T>
Tensor<T> masked_sse(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask,
                     T denominator) {
  require_same_shape("masked_sse", pred, target);
  require_same_shape("masked_sse", pred, mask);
  if (!(denominator > T(0))) throw DomainError("masked_sse: denominator must be positive");
  auto pv = pred.data();
  auto tv = target.data();
  auto mv = mask.data();
  Buffer<T> diff(pred.numel(), T(0));
  double acc = 0.0;
  for (std::size_t i = 0; i < diff.size(); ++i) {
    if (mv[i] == T(0)) continue;
    diff[i] = pv[i] - tv[i];
    acc += static_cast<double>(diff[i]) * static_cast<double>(diff[i]);
  }
  const T value = static_cast<T>(acc / static_cast<double>(denominator));
  return make_result<T>({}, {value}, {pred.node_ptr(), target.node_ptr()},
                        [diff = std::move(diff), denominator](detail::Node<T>& self) {
                          const T c = T(2) * self.grad[0] / denominator;
                          auto& pp = *self.parents[0];
                          auto& pt = *self.parents[1];
                          if (pp.requires_grad) {
                            auto& g = pp.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * diff[i];
                          }
                          if (pt.requires_grad) {
                            auto& g = pt.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= c * diff[i];
                          }
                        });
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target,
                   const std::optional<Tensor<T>>& mask) {
  require_same_shape("mse_loss", pred, target);
  const Tensor<T> m = mask ? *mask : Tensor<T>::from(pred.shape(), std::vector<T>(pred.numel(), T(1)));
  require_same_shape("mse_loss", pred, m);
  std::size_t valid = 0;
  for (T v : m.data()) valid += (v != T(0));
  if (valid == 0) throw DomainError("mse_loss: no valid positions");
  return masked_sse(pred, target, m, static_cast<T>(valid));
}

template <typename T>
Tensor<T> overlap_average(const Tensor<T>& patches, std::size_t length, std::size_t stride) {
  require_rank("overlap_average", patches, 2);
  const std::size_t count = patches.size(0), width = patches.size(1);
  if (stride == 0 || count == 0 || (count - 1) * stride + width > length) {
    throw ShapeError("overlap_average: patches " + shape_str(patches.shape()) + " with stride " +
                     std::to_string(stride) + " do not fit length " + std::to_string(length));
  }
  Buffer<T> cover(length, T(0));
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < width; ++j) cover[i * stride + j] += T(1);
  for (std::size_t t = 0; t < length; ++t) {
    if (cover[t] == T(0)) {
      throw ShapeError("overlap_average: position " + std::to_string(t) + " of " +
                       std::to_string(length) + " is not covered by any patch");
    }
  }
  Buffer<T> out(length, T(0));
  auto pv = patches.data();
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < width; ++j) out[i * stride + j] += pv[i * width + j];
  for (std::size_t t = 0; t < length; ++t) out[t] /= cover[t];
  return make_result<T>({length, 1}, std::move(out), {patches.node_ptr()},
                        [count, width, stride, cover = std::move(cover)](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < count; ++i)
                            for (std::size_t j = 0; j < width; ++j)
                              g[i * width + j] += self.grad[i * stride + j] / cover[i * stride + j];
                        });
}

#define PEMVC_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> transpose(const Tensor<T>&);                                                  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                           \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);               \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> sum(const Tensor<T>&, std::size_t);                                           \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> mean(const Tensor<T>&, std::size_t);                                          \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                                T);                                                                \
  template Tensor<T> gelu(const Tensor<T>&);                                                       \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> scaled_dot_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                          T);                                                      \
  template Tensor<T> dropout(const Tensor<T>&, T, std::mt19937_64&);                               \
  template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&,                                  \
                              const std::optional<Tensor<T>>&);                                    \
  template Tensor<T> masked_sse(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> overlap_average(const Tensor<T>&, std::size_t, std::size_t);

PEMVC_INSTANTIATE_OPS(float)
PEMVC_INSTANTIATE_OPS(double)

}  // namespace pemvc::nn
