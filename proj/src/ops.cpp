/* Copyright 2026 The KESI-Desk Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include "kesi/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kernels.hpp"
#include "kesi/errors.hpp"

namespace kesi {

namespace {

using Storage = std::shared_ptr<detail::TensorStorage>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

bool is_scalar(const Tensor& t) { return t.size() == 1 && t.rank() <= 1; }

// Shape of a binary elementwise op: equal shapes, or one side a scalar.
Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (is_scalar(b)) return a.shape();
  if (is_scalar(a)) return b.shape();
  require_same_shape(a, b, op);
  return a.shape();
}

// Adds `g` (full size) into the gradient of `s`, reducing when s is a scalar.
void accumulate_broadcast(const Storage& s, std::span<const double> g) {
  if (!s->requires_grad) return;
  if (s->value.size() == g.size()) {
    s->accumulate(g);
    return;
  }
  double total = 0.0;
  for (double v : g) total += v;
  s->grad_buffer()[0] += total;
}

std::size_t rows_of(const Tensor& logits, const char* op) {
  if (logits.empty() || logits.rank() == 0) {
    throw ShapeError(std::string(op) + ": empty logits");
  }
  return logits.size() / logits.shape().back();
}

void require_positive_tau(double tau, const char* op) {
  if (!(tau > 0.0)) {
    throw ParameterError(std::string(op) + ": temperature must be positive, got " +
                         std::to_string(tau));
  }
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  Tensor out = Tensor::zeros(broadcast_shape(a, b, "add"));
  const bool sa = a.size() != out.size(), sb = b.size() != out.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[sa ? 0 : i] + b[sb ? 0 : i];
  if (tape.should_record({&a, &b})) {
    tape.record(out, [as = a.storage(), bs = b.storage(), os = out.storage()] {
      accumulate_broadcast(as, os->grad);
      accumulate_broadcast(bs, os->grad);
    });
  }
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  Tensor out = Tensor::zeros(broadcast_shape(a, b, "sub"));
  const bool sa = a.size() != out.size(), sb = b.size() != out.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[sa ? 0 : i] - b[sb ? 0 : i];
  if (tape.should_record({&a, &b})) {
    tape.record(out, [as = a.storage(), bs = b.storage(), os = out.storage()] {
      accumulate_broadcast(as, os->grad);
      if (bs->requires_grad) {
        std::vector<double> neg(os->grad.size());
        for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -os->grad[i];
        accumulate_broadcast(bs, neg);
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  Tensor out = Tensor::zeros(broadcast_shape(a, b, "mul"));
  const bool sa = a.size() != out.size(), sb = b.size() != out.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[sa ? 0 : i] * b[sb ? 0 : i];
  if (tape.should_record({&a, &b})) {
    tape.record(out, [as = a.storage(), bs = b.storage(), os = out.storage(), sa, sb] {
      const auto n = os->grad.size();
      std::vector<double> g(n);
      if (as->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) g[i] = os->grad[i] * bs->value[sb ? 0 : i];
        accumulate_broadcast(as, g);
      }
      if (bs->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) g[i] = os->grad[i] * as->value[sa ? 0 : i];
        accumulate_broadcast(bs, g);
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  if (tape.should_record({&a})) {
    tape.record(out, [as = a.storage(), os = out.storage(), factor] {
      auto& g = as->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += os->grad[i] * factor;
    });
  }
  return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (tape.should_record({&x})) {
    tape.record(out, [xs = x.storage(), os = out.storage()] {
      auto& g = xs->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xs->value[i] > 0.0) g[i] += os->grad[i];
      }
    });
  }
  return out;
}

Tensor log(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(x[i] > 0.0)) {
      throw DomainError("log of non-positive value " + std::to_string(x[i]) + " at index " +
                        std::to_string(i));
    }
    out[i] = std::log(x[i]);
  }
  if (tape.should_record({&x})) {
    tape.record(out, [xs = x.storage(), os = out.storage()] {
      auto& g = xs->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += os->grad[i] / xs->value[i];
    });
  }
  return out;
}

Tensor exp(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  if (tape.should_record({&x})) {
    tape.record(out, [xs = x.storage(), os = out.storage()] {
      auto& g = xs->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += os->grad[i] * os->value[i];
    });
  }
  return out;
}

Tensor clamp_min(Tape& tape, const Tensor& x, double floor) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(x[i], floor);
  if (tape.should_record({&x})) {
    tape.record(out, [xs = x.storage(), os = out.storage(), floor] {
      auto& g = xs->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xs->value[i] >= floor) g[i] += os->grad[i];
      }
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor out = Tensor::scalar(total);
  if (tape.should_record({&x})) {
    tape.record(out, [xs = x.storage(), os = out.storage()] {
      auto& g = xs->grad_buffer();
      for (auto& v : g) v += os->grad[0];
    });
  }
  return out;
}

Tensor mean(Tape& tape, const Tensor& x) {
  if (x.empty()) throw ShapeError("mean of empty tensor");
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.size()));
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  kernels::gemm(false, false, m, n, k, a.data().data(), b.data().data(), out.data().data(),
                false);
  if (tape.should_record({&a, &b})) {
    tape.record(out, [as = a.storage(), bs = b.storage(), os = out.storage(), m, k, n] {
      if (as->requires_grad) {
        kernels::gemm(false, true, m, k, n, os->grad.data(), bs->value.data(),
                      as->grad_buffer().data(), true);
      }
      if (bs->requires_grad) {
        kernels::gemm(true, false, k, n, m, as->value.data(), os->grad.data(),
                      bs->grad_buffer().data(), true);
      }
    });
  }
  return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " vs weight " +
                     to_string(weight.shape()));
  }
  const std::size_t n = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  if (bias.size() != out_f) {
    throw ShapeError("linear: bias " + to_string(bias.shape()) + " vs " +
                     std::to_string(out_f) + " outputs");
  }
  Tensor out = Tensor::zeros({n, out_f});
  for (std::size_t r = 0; r < n; ++r) {
    std::copy(bias.data().begin(), bias.data().end(), out.data().begin() + r * out_f);
  }
  kernels::gemm(false, true, n, out_f, in, x.data().data(), weight.data().data(),
                out.data().data(), true);
  if (tape.should_record({&x, &weight, &bias})) {
    tape.record(out, [xs = x.storage(), ws = weight.storage(), bs = bias.storage(),
                      os = out.storage(), n, in, out_f] {
      if (xs->requires_grad) {
        kernels::gemm(false, false, n, in, out_f, os->grad.data(), ws->value.data(),
                      xs->grad_buffer().data(), true);
      }
      if (ws->requires_grad) {
        kernels::gemm(true, false, out_f, in, n, os->grad.data(), xs->value.data(),
                      ws->grad_buffer().data(), true);
      }
      if (bs->requires_grad) {
        auto& g = bs->grad_buffer();
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < out_f; ++j) g[j] += os->grad[r * out_f + j];
        }
      }
    });
  }
  return out;
}

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw ShapeError("conv2d: expected 4-d input and kernel, got " + to_string(input.shape()) +
                     " and " + to_string(kernel.shape()));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t f = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != c) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                     " channels, input has " + std::to_string(c));
  }
  if (kernel.dim(3) != k) throw ShapeError("conv2d: kernel must be square");
  if (h + 2 * padding < k || w + 2 * padding < k || (h + 2 * padding - k) % stride != 0 ||
      (w + 2 * padding - k) % stride != 0) {
    throw ShapeError("conv2d: output size is not exact for input " + to_string(input.shape()) +
                     ", kernel " + std::to_string(k) + ", stride " + std::to_string(stride) +
                     ", padding " + std::to_string(padding));
  }
  const kernels::ConvGeometry geo{c, h, w, k, stride, padding,
                                  (h + 2 * padding - k) / stride + 1,
                                  (w + 2 * padding - k) / stride + 1};
  const std::size_t hw_out = geo.out_height * geo.out_width;
  const std::size_t patch = c * k * k;
  const bool pointwise = k == 1 && stride == 1 && padding == 0;

  Tensor out = Tensor::zeros({n, f, geo.out_height, geo.out_width});
  std::vector<double> columns(pointwise ? 0 : patch * hw_out);
  for (std::size_t i = 0; i < n; ++i) {
    const double* image = input.data().data() + i * c * h * w;
    const double* cols = image;
    if (!pointwise) {
      kernels::im2col(geo, image, columns.data());
      cols = columns.data();
    }
    kernels::gemm(false, false, f, hw_out, patch, kernel.data().data(), cols,
                  out.data().data() + i * f * hw_out, false);
  }

  if (tape.should_record({&input, &kernel})) {
    tape.record(out, [is = input.storage(), ks = kernel.storage(), os = out.storage(), geo, n,
                      f, patch, hw_out, pointwise] {
      const std::size_t image_size = geo.channels * geo.height * geo.width;
      std::vector<double> cols(pointwise ? 0 : patch * hw_out);
      std::vector<double> dcols(pointwise ? 0 : patch * hw_out);
      double* dkernel = ks->requires_grad ? ks->grad_buffer().data() : nullptr;
      double* dinput = is->requires_grad ? is->grad_buffer().data() : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        const double* dy = os->grad.data() + i * f * hw_out;
        const double* image = is->value.data() + i * image_size;
        if (dkernel) {
          const double* c = image;
          if (!pointwise) {
            kernels::im2col(geo, image, cols.data());
            c = cols.data();
          }
          kernels::gemm(false, true, f, patch, hw_out, dy, c, dkernel, true);
        }
        if (dinput) {
          if (pointwise) {
            kernels::gemm(true, false, patch, hw_out, f, ks->value.data(), dy,
                          dinput + i * image_size, true);
          } else {
            kernels::gemm(true, false, patch, hw_out, f, ks->value.data(), dy, dcols.data(),
                          false);
            kernels::col2im(geo, dcols.data(), dinput + i * image_size);
          }
        }
      }
    });
  }
  return out;
}

Tensor batch_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, const BatchNormOptions& opts) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError("batch_norm: expected [N x C] or [N x C x H x W], got " +
                     to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  for (const Tensor* t : {&gamma, &beta, static_cast<const Tensor*>(&running_mean),
                          static_cast<const Tensor*>(&running_var)}) {
    if (t->size() != c) {
      throw ShapeError("batch_norm: per-channel tensor " + to_string(t->shape()) + " vs " +
                       std::to_string(c) + " channels");
    }
  }
  const std::size_t count = n * spatial;
  if (opts.training && count < 2) {
    throw ShapeError("batch_norm: training mode needs more than one value per channel");
  }

  Tensor out = Tensor::zeros(x.shape());
  auto normalized = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(c);
  const auto at = [&](std::size_t b, std::size_t ch, std::size_t s) {
    return (b * c + ch) * spatial + s;
  };

  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (opts.training) {
      double acc = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t s = 0; s < spatial; ++s) acc += x[at(b, ch, s)];
      mu = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t s = 0; s < spatial; ++s) {
          const double d = x[at(b, ch, s)] - mu;
          sq += d * d;
        }
      var = sq / static_cast<double>(count);
      const double unbiased = sq / static_cast<double>(count - 1);
      running_mean[ch] = (1.0 - opts.momentum) * running_mean[ch] + opts.momentum * mu;
      running_var[ch] = (1.0 - opts.momentum) * running_var[ch] + opts.momentum * unbiased;
    } else {
      mu = running_mean[ch];
      var = running_var[ch];
    }
    const double istd = 1.0 / std::sqrt(var + opts.eps);
    (*inv_std)[ch] = istd;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t s = 0; s < spatial; ++s) {
        const auto i = at(b, ch, s);
        const double xhat = (x[i] - mu) * istd;
        (*normalized)[i] = xhat;
        out[i] = gamma[ch] * xhat + beta[ch];
      }
  }

  if (tape.should_record({&x, &gamma, &beta})) {
    tape.record(out, [xs = x.storage(), gs = gamma.storage(), bs = beta.storage(),
                      os = out.storage(), normalized, inv_std, n, c, spatial, count,
                      training = opts.training] {
      const auto at = [&](std::size_t b, std::size_t ch, std::size_t s) {
        return (b * c + ch) * spatial + s;
      };
      const auto& dy = os->grad;
      const auto& xhat = *normalized;
      for (std::size_t ch = 0; ch < c; ++ch) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t s = 0; s < spatial; ++s) {
            const auto i = at(b, ch, s);
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * xhat[i];
          }
        if (gs->requires_grad) gs->grad_buffer()[ch] += sum_dy_xhat;
        if (bs->requires_grad) bs->grad_buffer()[ch] += sum_dy;
        if (!xs->requires_grad) continue;
        auto& dx = xs->grad_buffer();
        const double scale = gs->value[ch] * (*inv_std)[ch];
        if (training) {
          const double mean_dy = sum_dy / static_cast<double>(count);
          const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(count);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t s = 0; s < spatial; ++s) {
              const auto i = at(b, ch, s);
              dx[i] += scale * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat);
            }
        } else {
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t s = 0; s < spatial; ++s) {
              const auto i = at(b, ch, s);
              dx[i] += scale * dy[i];
            }
        }
      }
    });
  }
  return out;
}

Tensor global_avg_pool(Tape& tape, const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: expected 4-d input");
  const std::size_t n = x.dim(0), c = x.dim(1), spatial = x.dim(2) * x.dim(3);
  Tensor out = Tensor::zeros({n, c});
  const double inv = 1.0 / static_cast<double>(spatial);
  for (std::size_t p = 0; p < n * c; ++p) {
    double acc = 0.0;
    for (std::size_t s = 0; s < spatial; ++s) acc += x[p * spatial + s];
    out[p] = acc * inv;
  }
  if (tape.should_record({&x})) {
    tape.record(out, [xs = x.storage(), os = out.storage(), n, c, spatial, inv] {
      auto& g = xs->grad_buffer();
      for (std::size_t p = 0; p < n * c; ++p) {
        const double d = os->grad[p] * inv;
        for (std::size_t s = 0; s < spatial; ++s) g[p * spatial + s] += d;
      }
    });
  }
  return out;
}

Tensor flatten(Tape& tape, const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("flatten: expected a batch axis");
  const std::size_t n = x.dim(0);
  const std::size_t rest = n == 0 ? 0 : x.size() / n;
  Tensor out({n, rest}, std::vector<double>(x.data().begin(), x.data().end()));
  if (tape.should_record({&x})) {
    tape.record(out, [xs = x.storage(), os = out.storage()] { xs->accumulate(os->grad); });
  }
  return out;
}

Tensor softmax(Tape& tape, const Tensor& logits, double tau) {
  require_positive_tau(tau, "softmax");
  const std::size_t rows = rows_of(logits, "softmax");
  const std::size_t m = logits.shape().back();
  Tensor out = Tensor::zeros(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.data().data() + r * m;
    double* p = out.data().data() + r * m;
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) top = std::max(top, z[j] / tau);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      p[j] = std::exp(z[j] / tau - top);
      total += p[j];
    }
    for (std::size_t j = 0; j < m; ++j) p[j] /= total;
  }
  if (tape.should_record({&logits})) {
    tape.record(out, [zs = logits.storage(), os = out.storage(), rows, m, tau] {
      auto& g = zs->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* p = os->value.data() + r * m;
        const double* dy = os->grad.data() + r * m;
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) dot += dy[j] * p[j];
        for (std::size_t j = 0; j < m; ++j) g[r * m + j] += p[j] * (dy[j] - dot) / tau;
      }
    });
  }
  return out;
}

Tensor log_softmax(Tape& tape, const Tensor& logits, double tau) {
  require_positive_tau(tau, "log_softmax");
  const std::size_t rows = rows_of(logits, "log_softmax");
  const std::size_t m = logits.shape().back();
  Tensor out = Tensor::zeros(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.data().data() + r * m;
    double* y = out.data().data() + r * m;
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) top = std::max(top, z[j] / tau);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) total += std::exp(z[j] / tau - top);
    const double lse = top + std::log(total);
    for (std::size_t j = 0; j < m; ++j) y[j] = z[j] / tau - lse;
  }
  if (tape.should_record({&logits})) {
    tape.record(out, [zs = logits.storage(), os = out.storage(), rows, m, tau] {
      auto& g = zs->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = os->value.data() + r * m;
        const double* dy = os->grad.data() + r * m;
        double total = 0.0;
        for (std::size_t j = 0; j < m; ++j) total += dy[j];
        for (std::size_t j = 0; j < m; ++j) {
          g[r * m + j] += (dy[j] - std::exp(y[j]) * total) / tau;
        }
      }
    });
  }
  return out;
}

Tensor pick(Tape& tape, const Tensor& x, std::span<const int> index) {
  if (x.rank() != 2 || x.dim(0) != index.size()) {
    throw ShapeError("pick: expected [N x M] with N = " + std::to_string(index.size()) +
                     ", got " + to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), m = x.dim(1);
  std::vector<std::size_t> flat(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= m) {
      throw ParameterError("pick: index " + std::to_string(index[r]) + " out of range [0, " +
                           std::to_string(m) + ")");
    }
    flat[r] = r * m + static_cast<std::size_t>(index[r]);
  }
  Tensor out = Tensor::zeros({n});
  for (std::size_t r = 0; r < n; ++r) out[r] = x[flat[r]];
  if (tape.should_record({&x})) {
    tape.record(out, [xs = x.storage(), os = out.storage(), flat = std::move(flat)] {
      auto& g = xs->grad_buffer();
      for (std::size_t r = 0; r < flat.size(); ++r) g[flat[r]] += os->grad[r];
    });
  }
  return out;
}

}  // namespace kesi
