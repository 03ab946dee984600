#include "feanet/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace feanet::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

bool g_conv_fault = false;

[[noreturn]] void reject(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": " + what);
}

void expect_dim(const std::string& op, const char* dim, std::size_t got, std::size_t want) {
  if (got != want) {
    reject(op, std::string("dimension ") + dim + " is " + std::to_string(got) +
                   ", expected " + std::to_string(want));
  }
}

// Unrolls (C, H, W) into a (C*kh*kw, Ho*Wo) patch matrix.
void im2col(const double* img, std::size_t channels, std::size_t height, std::size_t width,
            const ConvSpec& s, std::size_t out_h, std::size_t out_w, double* col) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* src = img + c * height * width;
    for (std::size_t ki = 0; ki < s.kh; ++ki) {
      for (std::size_t kj = 0; kj < s.kw; ++kj) {
        double* row = col + ((c * s.kh + ki) * s.kw + kj) * plane;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * s.stride + ki) -
                          static_cast<std::ptrdiff_t>(s.padding);
          double* dst = row + oh * out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(dst, dst + out_w, 0.0);
            continue;
          }
          const double* line = src + static_cast<std::size_t>(ih) * width;
          for (std::size_t ow = 0; ow < out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * s.stride + kj) -
                            static_cast<std::ptrdiff_t>(s.padding);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(width))
                          ? 0.0
                          : line[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds patch rows back into (C, H, W).
void col2im(const double* col, std::size_t channels, std::size_t height, std::size_t width,
            const ConvSpec& s, std::size_t out_h, std::size_t out_w, double* img) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    double* dst = img + c * height * width;
    for (std::size_t ki = 0; ki < s.kh; ++ki) {
      for (std::size_t kj = 0; kj < s.kw; ++kj) {
        const double* row = col + ((c * s.kh + ki) * s.kw + kj) * plane;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * s.stride + ki) -
                          static_cast<std::ptrdiff_t>(s.padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(height)) continue;
          double* line = dst + static_cast<std::size_t>(ih) * width;
          const double* src = row + oh * out_w;
          for (std::size_t ow = 0; ow < out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * s.stride + kj) -
                            static_cast<std::ptrdiff_t>(s.padding);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(width)) {
              line[static_cast<std::size_t>(iw)] += src[ow];
            }
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvSpec& s) {
  return s.kh == 1 && s.kw == 1 && s.stride == 1 && s.padding == 0;
}

void check_bias(const std::string& op, const ConvSpec& spec, const std::optional<Var>& bias) {
  if (!bias) return;
  const Shape& b = bias->shape();
  if (b.size() != spec.out_channels) {
    reject(op, "bias holds " + std::to_string(b.size()) + " values, expected out_channels = " +
                   std::to_string(spec.out_channels));
  }
}

void add_bias(Tensor& out, const Tensor& bias) {
  const Shape& s = out.shape();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      double* p = out.data() + (n * s.c + c) * s.plane();
      const double b = bias[c];
      for (std::size_t i = 0; i < s.plane(); ++i) p[i] += b;
    }
  }
}

std::vector<double> bias_grad(std::span<const double> g, const Shape& s) {
  std::vector<double> out(s.c, 0.0);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const double* p = g.data() + (n * s.c + c) * s.plane();
      double acc = 0.0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
      out[c] += acc;
    }
  }
  return out;
}

Shape broadcast_shape(const std::string& op, const Shape& a, const Shape& b) {
  auto pick = [&](const char* dim, std::size_t x, std::size_t y) {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    reject(op, std::string("dimension ") + dim + " mismatch (" + std::to_string(x) + " vs " +
                   std::to_string(y) + ")");
  };
  return {pick("n", a.n, b.n), pick("c", a.c, b.c), pick("h", a.h, b.h), pick("w", a.w, b.w)};
}

struct Strides {
  std::size_t n, c, h, w;
};

// Strides of `s` when iterated over `out`, zero on broadcast axes.
Strides broadcast_strides(const Shape& s, const Shape& out) {
  const std::size_t zero = 0, one = 1;
  return {s.n == out.n ? s.c * s.h * s.w : zero, s.c == out.c ? s.h * s.w : zero,
          s.h == out.h ? s.w : zero, s.w == out.w ? one : zero};
}

template <typename F>
void for_each_broadcast(const Shape& out, const Strides& sa, const Strides& sb, F&& f) {
  std::size_t o = 0;
  for (std::size_t n = 0; n < out.n; ++n)
    for (std::size_t c = 0; c < out.c; ++c)
      for (std::size_t h = 0; h < out.h; ++h)
        for (std::size_t w = 0; w < out.w; ++w, ++o)
          f(o, n * sa.n + c * sa.c + h * sa.h + w * sa.w,
            n * sb.n + c * sb.c + h * sb.h + w * sb.w);
}

}  // namespace

Shape ConvSpec::conv_output(const Shape& input) const {
  if (stride == 0) reject("conv2d", "stride must be positive");
  if (input.h + 2 * padding < kh || input.w + 2 * padding < kw) {
    reject("conv2d", "kernel larger than padded input " + input.str());
  }
  const std::size_t span_h = input.h + 2 * padding - kh;
  const std::size_t span_w = input.w + 2 * padding - kw;
  if (span_h % stride != 0) {
    reject("conv2d", "height " + std::to_string(input.h) + " does not tile exactly with kernel " +
                         std::to_string(kh) + ", stride " + std::to_string(stride) +
                         ", padding " + std::to_string(padding));
  }
  if (span_w % stride != 0) {
    reject("conv2d", "width " + std::to_string(input.w) + " does not tile exactly with kernel " +
                         std::to_string(kw) + ", stride " + std::to_string(stride) +
                         ", padding " + std::to_string(padding));
  }
  return {input.n, out_channels, span_h / stride + 1, span_w / stride + 1};
}

Shape ConvSpec::transposed_output(const Shape& input) const {
  if (stride == 0) reject("transposed_conv2d", "stride must be positive");
  if (input.h == 0 || input.w == 0) reject("transposed_conv2d", "empty input");
  const std::size_t full_h = (input.h - 1) * stride + kh;
  const std::size_t full_w = (input.w - 1) * stride + kw;
  if (full_h <= 2 * padding || full_w <= 2 * padding) {
    reject("transposed_conv2d", "padding removes the whole output");
  }
  return {input.n, out_channels, full_h - 2 * padding, full_w - 2 * padding};
}

BatchNormState::BatchNormState(std::size_t channels)
    : running_mean(Shape{1, channels, 1, 1}, 0.0), running_var(Shape{1, channels, 1, 1}, 1.0) {}

Var conv2d(const Var& input, const ConvSpec& spec, const Var& weight,
           const std::optional<Var>& bias) {
  const Shape& in = input.shape();
  const Shape& ws = weight.shape();
  expect_dim("conv2d", "input.c", in.c, spec.in_channels);
  expect_dim("conv2d", "weight.n (out_channels)", ws.n, spec.out_channels);
  expect_dim("conv2d", "weight.c (in_channels)", ws.c, spec.in_channels);
  expect_dim("conv2d", "weight.h (kh)", ws.h, spec.kh);
  expect_dim("conv2d", "weight.w (kw)", ws.w, spec.kw);
  check_bias("conv2d", spec, bias);
  const Shape out_shape = spec.conv_output(in);

  const std::size_t k = spec.in_channels * spec.kh * spec.kw;
  const std::size_t p = out_shape.plane();
  const bool pointwise = is_pointwise(spec);

  Tensor out(out_shape);
  std::vector<double> col(pointwise ? 0 : k * p);
  ConstMatMap w(weight.value().data(), spec.out_channels, k);
  for (std::size_t n = 0; n < in.n; ++n) {
    const double* x = input.value().data() + n * in.c * in.plane();
    if (!pointwise) im2col(x, in.c, in.h, in.w, spec, out_shape.h, out_shape.w, col.data());
    ConstMatMap patches(pointwise ? x : col.data(), k, p);
    MatMap o(out.data() + n * out_shape.c * p, spec.out_channels, p);
    o.noalias() = w * patches;
  }
  if (bias) add_bias(out, bias->value());

  std::optional<Var> b = bias;
  return record(std::move(out), {input, weight, b ? *b : Var{}}, [=](std::span<const double> g) {
    const Shape& s = input.shape();
    std::vector<double> patches_buf(pointwise ? 0 : k * p);
    std::vector<double> dcol(pointwise ? 0 : k * p);
    ConstMatMap wm(weight.value().data(), spec.out_channels, k);
    for (std::size_t n = 0; n < s.n; ++n) {
      ConstMatMap dout(g.data() + n * spec.out_channels * p, spec.out_channels, p);
      const double* x = input.value().data() + n * s.c * s.plane();
      if (weight.requires_grad()) {
        if (!pointwise) im2col(x, s.c, s.h, s.w, spec, out_shape.h, out_shape.w, patches_buf.data());
        ConstMatMap patches(pointwise ? x : patches_buf.data(), k, p);
        MatMap dw(weight.grad_buffer().data(), spec.out_channels, k);
        dw.noalias() += dout * patches.transpose();
      }
      if (input.requires_grad()) {
        double* dx = input.grad_buffer().data() + n * s.c * s.plane();
        if (pointwise) {
          MatMap dxm(dx, k, p);
          dxm.noalias() += wm.transpose() * dout;
        } else {
          MatMap dc(dcol.data(), k, p);
          dc.noalias() = wm.transpose() * dout;
          col2im(dcol.data(), s.c, s.h, s.w, spec, out_shape.h, out_shape.w, dx);
        }
      }
    }
    if (g_conv_fault && input.requires_grad()) {
      for (auto& v : input.grad_buffer()) v *= 1.01;
    }
    if (b && b->requires_grad()) b->accumulate_grad(bias_grad(g, out_shape));
  });
}

Var transposed_conv2d(const Var& input, const ConvSpec& spec, const Var& weight,
                      const std::optional<Var>& bias) {
  const Shape& in = input.shape();
  const Shape& ws = weight.shape();
  expect_dim("transposed_conv2d", "input.c", in.c, spec.in_channels);
  expect_dim("transposed_conv2d", "weight.n (in_channels)", ws.n, spec.in_channels);
  expect_dim("transposed_conv2d", "weight.c (out_channels)", ws.c, spec.out_channels);
  expect_dim("transposed_conv2d", "weight.h (kh)", ws.h, spec.kh);
  expect_dim("transposed_conv2d", "weight.w (kw)", ws.w, spec.kw);
  check_bias("transposed_conv2d", spec, bias);
  const Shape out_shape = spec.transposed_output(in);

  const std::size_t k = spec.out_channels * spec.kh * spec.kw;
  const std::size_t p = in.plane();
  Tensor out(out_shape);
  std::vector<double> col(k * p);
  ConstMatMap w(weight.value().data(), spec.in_channels, k);
  for (std::size_t n = 0; n < in.n; ++n) {
    ConstMatMap x(input.value().data() + n * in.c * p, spec.in_channels, p);
    MatMap c(col.data(), k, p);
    c.noalias() = w.transpose() * x;
    col2im(col.data(), spec.out_channels, out_shape.h, out_shape.w, spec, in.h, in.w,
           out.data() + n * out_shape.c * out_shape.plane());
  }
  if (bias) add_bias(out, bias->value());

  std::optional<Var> b = bias;
  return record(std::move(out), {input, weight, b ? *b : Var{}}, [=](std::span<const double> g) {
    const Shape& s = input.shape();
    std::vector<double> dcol(k * p);
    ConstMatMap wm(weight.value().data(), spec.in_channels, k);
    for (std::size_t n = 0; n < s.n; ++n) {
      im2col(g.data() + n * out_shape.c * out_shape.plane(), spec.out_channels, out_shape.h,
             out_shape.w, spec, s.h, s.w, dcol.data());
      ConstMatMap dc(dcol.data(), k, p);
      if (input.requires_grad()) {
        MatMap dx(input.grad_buffer().data() + n * s.c * p, spec.in_channels, p);
        dx.noalias() += wm * dc;
      }
      if (weight.requires_grad()) {
        ConstMatMap x(input.value().data() + n * s.c * p, spec.in_channels, p);
        MatMap dw(weight.grad_buffer().data(), spec.in_channels, k);
        dw.noalias() += x * dc.transpose();
      }
    }
    if (b && b->requires_grad()) b->accumulate_grad(bias_grad(g, out_shape));
  });
}

Var batchnorm2d(const Var& input, const Var& gamma, const Var& beta, Mode mode,
                BatchNormState& state) {
  const Shape& s = input.shape();
  expect_dim("batchnorm2d", "gamma size", gamma.value().size(), s.c);
  expect_dim("batchnorm2d", "beta size", beta.value().size(), s.c);
  expect_dim("batchnorm2d", "running_mean size", state.running_mean.size(), s.c);
  if (!(state.epsilon > 0.0)) reject("batchnorm2d", "epsilon must be positive");
  const std::size_t plane = s.plane();
  const std::size_t count = s.n * plane;
  if (count == 0) reject("batchnorm2d", "empty input");

  std::vector<double> mean(s.c), inv_std(s.c);
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const double* x = input.value().data() + (n * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += x[i];
      }
      const double mu = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const double* x = input.value().data() + (n * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (x[i] - mu) * (x[i] - mu);
      }
      const double var = sq / static_cast<double>(count);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + state.epsilon);
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      const double m = state.momentum;
      state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * mu;
      state.running_var[c] = (1.0 - m) * state.running_var[c] + m * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < s.c; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.epsilon);
    }
  }

  Tensor xhat(s);
  Tensor out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t base = (n * s.c + c) * plane;
      const double g = gamma.value()[c];
      const double b = beta.value()[c];
      for (std::size_t i = 0; i < plane; ++i) {
        const double xh = (input.value()[base + i] - mean[c]) * inv_std[c];
        xhat[base + i] = xh;
        out[base + i] = g * xh + b;
      }
    }
  }

  return record(std::move(out), {input, gamma, beta},
                [=, xhat = std::move(xhat)](std::span<const double> g) {
    std::vector<double> dgamma(s.c, 0.0), dbeta(s.c, 0.0);
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t c = 0; c < s.c; ++c) {
        const std::size_t base = (n * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          dgamma[c] += g[base + i] * xhat[base + i];
          dbeta[c] += g[base + i];
        }
      }
    }
    if (input.requires_grad()) {
      auto dx = input.grad_buffer();
      const double inv_count = 1.0 / static_cast<double>(count);
      for (std::size_t c = 0; c < s.c; ++c) {
        const double gm = gamma.value()[c];
        for (std::size_t n = 0; n < s.n; ++n) {
          const std::size_t base = (n * s.c + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            if (mode == Mode::train) {
              // d/dx of gamma * (x - mean) / std with batch statistics.
              dx[base + i] += gm * inv_std[c] *
                              (g[base + i] - inv_count * dbeta[c] -
                               xhat[base + i] * inv_count * dgamma[c]);
            } else {
              dx[base + i] += gm * inv_std[c] * g[base + i];
            }
          }
        }
      }
    }
    if (gamma.requires_grad()) gamma.accumulate_grad(dgamma);
    if (beta.requires_grad()) beta.accumulate_grad(dbeta);
  });
}

Var pool2d(const Var& input, PoolKind kind, std::size_t window, std::size_t stride) {
  const Shape& s = input.shape();
  if (window == 0 || stride == 0) reject("pool2d", "window and stride must be positive");
  if (s.h < window || s.w < window) reject("pool2d", "window larger than input " + s.str());
  if ((s.h - window) % stride != 0) reject("pool2d", "height does not tile exactly");
  if ((s.w - window) % stride != 0) reject("pool2d", "width does not tile exactly");
  const Shape os{s.n, s.c, (s.h - window) / stride + 1, (s.w - window) / stride + 1};

  Tensor out(os);
  std::vector<std::size_t> argmax(kind == PoolKind::max ? os.size() : 0);
  const double inv_area = 1.0 / static_cast<double>(window * window);
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    const double* x = input.value().data() + nc * s.plane();
    for (std::size_t oh = 0; oh < os.h; ++oh) {
      for (std::size_t ow = 0; ow < os.w; ++ow) {
        const std::size_t o = nc * os.plane() + oh * os.w + ow;
        if (kind == PoolKind::max) {
          std::size_t best = (oh * stride) * s.w + ow * stride;
          for (std::size_t i = 0; i < window; ++i)
            for (std::size_t j = 0; j < window; ++j) {
              const std::size_t idx = (oh * stride + i) * s.w + ow * stride + j;
              if (x[idx] > x[best]) best = idx;
            }
          out[o] = x[best];
          argmax[o] = nc * s.plane() + best;
        } else {
          double acc = 0.0;
          for (std::size_t i = 0; i < window; ++i)
            for (std::size_t j = 0; j < window; ++j)
              acc += x[(oh * stride + i) * s.w + ow * stride + j];
          out[o] = acc * inv_area;
        }
      }
    }
  }

  return record(std::move(out), {input}, [=, argmax = std::move(argmax)](std::span<const double> g) {
    auto dx = input.grad_buffer();
    if (kind == PoolKind::max) {
      for (std::size_t o = 0; o < g.size(); ++o) dx[argmax[o]] += g[o];
      return;
    }
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc)
      for (std::size_t oh = 0; oh < os.h; ++oh)
        for (std::size_t ow = 0; ow < os.w; ++ow) {
          const double v = g[nc * os.plane() + oh * os.w + ow] * inv_area;
          for (std::size_t i = 0; i < window; ++i)
            for (std::size_t j = 0; j < window; ++j)
              dx[nc * s.plane() + (oh * stride + i) * s.w + ow * stride + j] += v;
        }
  });
}

Var global_pool(const Var& input, PoolKind kind) {
  const Shape& s = input.shape();
  if (s.plane() == 0) reject("global_pool", "empty plane");
  const Shape os{s.n, s.c, 1, 1};
  Tensor out(os);
  std::vector<std::size_t> argmax(kind == PoolKind::max ? os.size() : 0);
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    const double* x = input.value().data() + nc * s.plane();
    if (kind == PoolKind::max) {
      const std::size_t best =
          static_cast<std::size_t>(std::max_element(x, x + s.plane()) - x);
      out[nc] = x[best];
      argmax[nc] = nc * s.plane() + best;
    } else {
      double acc = 0.0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += x[i];
      out[nc] = acc / static_cast<double>(s.plane());
    }
  }
  return record(std::move(out), {input}, [=, argmax = std::move(argmax)](std::span<const double> g) {
    auto dx = input.grad_buffer();
    const double inv = 1.0 / static_cast<double>(s.plane());
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
      if (kind == PoolKind::max) {
        dx[argmax[nc]] += g[nc];
      } else {
        for (std::size_t i = 0; i < s.plane(); ++i) dx[nc * s.plane() + i] += g[nc] * inv;
      }
    }
  });
}

Var channel_reduce(const Var& input, PoolKind kind) {
  const Shape& s = input.shape();
  if (s.c == 0) reject("channel_reduce", "no channels");
  const Shape os{s.n, 1, s.h, s.w};
  const std::size_t plane = s.plane();
  Tensor out(os);
  std::vector<std::size_t> argmax(kind == PoolKind::max ? os.size() : 0);
  for (std::size_t n = 0; n < s.n; ++n) {
    const double* x = input.value().data() + n * s.c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      if (kind == PoolKind::max) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < s.c; ++c)
          if (x[c * plane + i] > x[best * plane + i]) best = c;
        out[n * plane + i] = x[best * plane + i];
        argmax[n * plane + i] = (n * s.c + best) * plane + i;
      } else {
        double acc = 0.0;
        for (std::size_t c = 0; c < s.c; ++c) acc += x[c * plane + i];
        out[n * plane + i] = acc / static_cast<double>(s.c);
      }
    }
  }
  return record(std::move(out), {input}, [=, argmax = std::move(argmax)](std::span<const double> g) {
    auto dx = input.grad_buffer();
    const double inv = 1.0 / static_cast<double>(s.c);
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t i = 0; i < plane; ++i) {
        const double gv = g[n * plane + i];
        if (kind == PoolKind::max) {
          dx[argmax[n * plane + i]] += gv;
        } else {
          for (std::size_t c = 0; c < s.c; ++c) dx[(n * s.c + c) * plane + i] += gv * inv;
        }
      }
  });
}

Var dense(const Var& input, const Var& weight, const std::optional<Var>& bias) {
  const Shape& s = input.shape();
  const Shape& ws = weight.shape();
  if (s.h != 1 || s.w != 1) reject("dense", "input must be (n, features, 1, 1), got " + s.str());
  if (ws.h != 1 || ws.w != 1) reject("dense", "weight must be (out, in, 1, 1), got " + ws.str());
  expect_dim("dense", "weight.c (in features)", ws.c, s.c);
  if (bias) expect_dim("dense", "bias size", bias->value().size(), ws.n);
  const std::size_t in_f = s.c;
  const std::size_t out_f = ws.n;
  Tensor out(Shape{s.n, out_f, 1, 1});
  ConstMatMap x(input.value().data(), s.n, in_f);
  ConstMatMap w(weight.value().data(), out_f, in_f);
  MatMap y(out.data(), s.n, out_f);
  y.noalias() = x * w.transpose();
  if (bias) {
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t o = 0; o < out_f; ++o) y(n, o) += bias->value()[o];
  }
  std::optional<Var> b = bias;
  return record(std::move(out), {input, weight, b ? *b : Var{}}, [=](std::span<const double> g) {
    ConstMatMap gy(g.data(), s.n, out_f);
    ConstMatMap wm(weight.value().data(), out_f, in_f);
    if (input.requires_grad()) {
      MatMap dx(input.grad_buffer().data(), s.n, in_f);
      dx.noalias() += gy * wm;
    }
    if (weight.requires_grad()) {
      ConstMatMap xm(input.value().data(), s.n, in_f);
      MatMap dw(weight.grad_buffer().data(), out_f, in_f);
      dw.noalias() += gy.transpose() * xm;
    }
    if (b && b->requires_grad()) {
      std::vector<double> db(out_f, 0.0);
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t o = 0; o < out_f; ++o) db[o] += gy(n, o);
      b->accumulate_grad(db);
    }
  });
}

Var activation(const Var& input, Activation kind) {
  const Shape& s = input.shape();
  Tensor out(s);
  const auto x = input.value().values();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] >= 0.0) {
          out[i] = 1.0 / (1.0 + std::exp(-x[i]));
        } else {
          const double e = std::exp(x[i]);
          out[i] = e / (1.0 + e);
        }
      }
      break;
    case Activation::softmax_channel: {
      const std::size_t plane = s.plane();
      for (std::size_t n = 0; n < s.n; ++n) {
        const std::size_t base = n * s.c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          double peak = -std::numeric_limits<double>::infinity();
          for (std::size_t c = 0; c < s.c; ++c) peak = std::max(peak, x[base + c * plane + i]);
          double total = 0.0;
          for (std::size_t c = 0; c < s.c; ++c) {
            const double e = std::exp(x[base + c * plane + i] - peak);
            out[base + c * plane + i] = e;
            total += e;
          }
          for (std::size_t c = 0; c < s.c; ++c) out[base + c * plane + i] /= total;
        }
      }
      break;
    }
  }

  Tensor saved = kind == Activation::relu ? Tensor{} : out;
  return record(std::move(out), {input}, [=, saved = std::move(saved)](std::span<const double> g) {
    auto dx = input.grad_buffer();
    const auto xv = input.value().values();
    switch (kind) {
      case Activation::relu:
        for (std::size_t i = 0; i < g.size(); ++i)
          if (xv[i] > 0.0) dx[i] += g[i];
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * saved[i] * (1.0 - saved[i]);
        break;
      case Activation::softmax_channel: {
        const std::size_t plane = s.plane();
        for (std::size_t n = 0; n < s.n; ++n) {
          const std::size_t base = n * s.c * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            double dot = 0.0;
            for (std::size_t c = 0; c < s.c; ++c)
              dot += saved[base + c * plane + i] * g[base + c * plane + i];
            for (std::size_t c = 0; c < s.c; ++c) {
              const std::size_t k = base + c * plane + i;
              dx[k] += saved[k] * (g[k] - dot);
            }
          }
        }
        break;
      }
    }
  });
}

Var add(const Var& a, const Var& b) {
  const Shape os = broadcast_shape("add", a.shape(), b.shape());
  const Strides sa = broadcast_strides(a.shape(), os);
  const Strides sb = broadcast_strides(b.shape(), os);
  Tensor out(os);
  const double* av = a.value().data();
  const double* bv = b.value().data();
  for_each_broadcast(os, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = av[ia] + bv[ib];
  });
  return record(std::move(out), {a, b}, [=](std::span<const double> g) {
    if (a.requires_grad() && b.requires_grad() && a.shape() == os && b.shape() == os) {
      a.accumulate_grad(g);
      b.accumulate_grad(g);
      return;
    }
    std::span<double> da = a.requires_grad() ? a.grad_buffer() : std::span<double>{};
    std::span<double> db = b.requires_grad() ? b.grad_buffer() : std::span<double>{};
    for_each_broadcast(os, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (!da.empty()) da[ia] += g[o];
      if (!db.empty()) db[ib] += g[o];
    });
  });
}

Var mul(const Var& a, const Var& b) {
  const Shape os = broadcast_shape("mul", a.shape(), b.shape());
  const Strides sa = broadcast_strides(a.shape(), os);
  const Strides sb = broadcast_strides(b.shape(), os);
  Tensor out(os);
  const double* av = a.value().data();
  const double* bv = b.value().data();
  for_each_broadcast(os, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = av[ia] * bv[ib];
  });
  return record(std::move(out), {a, b}, [=](std::span<const double> g) {
    const double* avv = a.value().data();
    const double* bvv = b.value().data();
    std::span<double> da = a.requires_grad() ? a.grad_buffer() : std::span<double>{};
    std::span<double> db = b.requires_grad() ? b.grad_buffer() : std::span<double>{};
    for_each_broadcast(os, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (!da.empty()) da[ia] += g[o] * bvv[ib];
      if (!db.empty()) db[ib] += g[o] * avv[ia];
    });
  });
}

Var scale(const Var& a, double factor) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * factor;
  return record(std::move(out), {a}, [=](std::span<const double> g) {
    auto da = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * factor;
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  expect_dim("concat_channels", "n", sb.n, sa.n);
  expect_dim("concat_channels", "h", sb.h, sa.h);
  expect_dim("concat_channels", "w", sb.w, sa.w);
  const Shape os{sa.n, sa.c + sb.c, sa.h, sa.w};
  const std::size_t ca = sa.c * sa.plane();
  const std::size_t cb = sb.c * sb.plane();
  Tensor out(os);
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy_n(a.value().data() + n * ca, ca, out.data() + n * (ca + cb));
    std::copy_n(b.value().data() + n * cb, cb, out.data() + n * (ca + cb) + ca);
  }
  return record(std::move(out), {a, b}, [=](std::span<const double> g) {
    for (std::size_t n = 0; n < sa.n; ++n) {
      const double* src = g.data() + n * (ca + cb);
      if (a.requires_grad()) {
        double* da = a.grad_buffer().data() + n * ca;
        for (std::size_t i = 0; i < ca; ++i) da[i] += src[i];
      }
      if (b.requires_grad()) {
        double* db = b.grad_buffer().data() + n * cb;
        for (std::size_t i = 0; i < cb; ++i) db[i] += src[ca + i];
      }
    }
  });
}

Var sum(const Var& a) {
  double acc = 0.0;
  for (double v : a.value().values()) acc += v;
  return record(Tensor(Shape{1, 1, 1, 1}, acc), {a}, [=](std::span<const double> g) {
    auto da = a.grad_buffer();
    for (auto& v : da) v += g[0];
  });
}

namespace testing {
void set_conv_backward_fault(bool enabled) { g_conv_fault = enabled; }
bool conv_backward_fault() { return g_conv_fault; }
}  // namespace testing

}  // namespace feanet::nn
