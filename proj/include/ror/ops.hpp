#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ror/autodiff.hpp"

// Forward primitives with exact reverse-mode rules. Image tensors are N x C x H x W.

namespace ror {

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Builds the message only on failure.
#define ROR_REQUIRE(cond, message)                       \
  do {                                                   \
    if (!(cond)) throw ::ror::ConfigError(message);      \
  } while (0)

inline Index conv_out_extent(Index in, Index kernel, Index stride, Index pad) {
  const Index span = in + 2 * pad - kernel;
  return span < 0 ? 0 : span / stride + 1;
}

struct ConvGeometry {
  Index channels, height, width, kh, kw, stride, pad, out_h, out_w;
  Index rows() const { return channels * kh * kw; }
  Index cols() const { return out_h * out_w; }
};

/// Range of output columns [lo, hi) whose input column ow*stride - pad + j is in bounds.
inline std::pair<Index, Index> valid_columns(const ConvGeometry& g, Index j) {
  Index lo = 0;
  while (lo < g.out_w && lo * g.stride - g.pad + j < 0) ++lo;
  Index hi = g.out_w;
  while (hi > lo && (hi - 1) * g.stride - g.pad + j >= g.width) --hi;
  return {lo, hi};
}

template <typename Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, RowMatrix<Scalar>& col) {
  col.resize(g.rows(), g.cols());
  for (Index c = 0; c < g.channels; ++c) {
    const Scalar* plane = image + c * g.height * g.width;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        Scalar* row = col.row((c * g.kh + i) * g.kw + j).data();
        const auto [lo, hi] = valid_columns(g, j);
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + i;
          Scalar* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, Scalar(0));
            continue;
          }
          std::fill(dst, dst + lo, Scalar(0));
          std::fill(dst + hi, dst + g.out_w, Scalar(0));
          const Index base = ih * g.width - g.pad + j;
          if (g.stride == 1) {
            std::copy(plane + base + lo, plane + base + hi, dst + lo);
          } else {
            for (Index ow = lo; ow < hi; ++ow) dst[ow] = plane[base + ow * g.stride];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const RowMatrix<Scalar>& col, const ConvGeometry& g, Scalar* image) {
  for (Index c = 0; c < g.channels; ++c) {
    Scalar* plane = image + c * g.height * g.width;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const Scalar* row = col.row((c * g.kh + i) * g.kw + j).data();
        const auto [lo, hi] = valid_columns(g, j);
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + i;
          if (ih < 0 || ih >= g.height) continue;
          const Index base = ih * g.width - g.pad + j;
          const Scalar* src = row + oh * g.out_w;
          for (Index ow = lo; ow < hi; ++ow) plane[base + ow * g.stride] += src[ow];
        }
      }
    }
  }
}

template <typename Scalar>
void require_finite_input(const Tensor<Scalar>& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite value in input");
}

}  // namespace detail

/// Bias-free 2-D cross-correlation.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& weight, Index stride, Index padding) {
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  ROR_REQUIRE(xs.rank() == 4 && ws.rank() == 4,
                  "conv2d: expected 4-D input and weight, got " + xs.str() + " and " + ws.str());
  ROR_REQUIRE(xs[1] == ws[1], "conv2d: input channels " + std::to_string(xs[1]) +
                                      " do not match weight " + ws.str());
  ROR_REQUIRE(ws[2] % 2 == 1 && ws[3] % 2 == 1, "conv2d: kernel extents must be odd, got " + ws.str());
  ROR_REQUIRE(stride >= 1 && padding >= 0, "conv2d: stride must be positive and padding non-negative");

  detail::ConvGeometry g{xs[1], xs[2], xs[3], ws[2], ws[3], stride, padding,
                         detail::conv_out_extent(xs[2], ws[2], stride, padding),
                         detail::conv_out_extent(xs[3], ws[3], stride, padding)};
  ROR_REQUIRE(g.out_h >= 1 && g.out_w >= 1, "conv2d: empty output for input " + xs.str());

  const Index batch = xs[0];
  const Index out_ch = ws[0];
  const Index in_plane = g.channels * g.height * g.width;
  const Index out_plane = out_ch * g.cols();

  Tensor<Scalar> out(Shape{batch, out_ch, g.out_h, g.out_w});
  auto w = weight.value().matrix(out_ch, g.rows());
  detail::RowMatrix<Scalar> col;
  for (Index n = 0; n < batch; ++n) {
    detail::im2col(input.value().data() + n * in_plane, g, col);
    Eigen::Map<detail::RowMatrix<Scalar>>(out.data() + n * out_plane, out_ch, g.cols()).noalias() = w * col;
  }

  return record<Scalar>("conv2d", std::move(out), {input, weight}, [g, batch, out_ch, in_plane, out_plane](TapeNode<Scalar>& self) {
    auto& x = *self.parents[0];
    auto& wt = *self.parents[1];
    const Tensor<Scalar>& dy = *self.grad;
    auto wmat = wt.value.matrix(out_ch, g.rows());
    typename Tensor<Scalar>::Values dx;
    if (x.requires_grad) dx = Tensor<Scalar>::Values::Zero(x.value.size());
    detail::RowMatrix<Scalar> dw;
    if (wt.requires_grad) dw = detail::RowMatrix<Scalar>::Zero(out_ch, g.rows());
    detail::RowMatrix<Scalar> col, dcol;
    for (Index n = 0; n < batch; ++n) {
      Eigen::Map<const detail::RowMatrix<Scalar>> dyn(dy.data() + n * out_plane, out_ch, g.cols());
      if (wt.requires_grad) {
        detail::im2col(x.value.data() + n * in_plane, g, col);
        dw.noalias() += dyn * col.transpose();
      }
      if (x.requires_grad) {
        dcol.noalias() = wmat.transpose() * dyn;
        detail::col2im(dcol, g, dx.data() + n * in_plane);
      }
    }
    if (x.requires_grad) x.accumulate(dx);
    if (wt.requires_grad) {
      wt.accumulate(Eigen::Map<const typename Tensor<Scalar>::Values>(dw.data(), dw.size()));
    }
  });
}

/// Per-channel batch normalization with affine transform. Train mode normalizes by batch
/// statistics and updates the running estimates; eval mode uses the running estimates.
template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& input, BatchNormState<Scalar>& state, Mode mode) {
  const Shape& xs = input.shape();
  ROR_REQUIRE(xs.rank() == 4, "batch_norm: expected 4-D input, got " + xs.str());
  const Index batch = xs[0], channels = xs[1], plane = xs[2] * xs[3];
  ROR_REQUIRE(channels == state.channels(), "batch_norm: input " + xs.str() + " does not match " +
                                                    std::to_string(state.channels()) + " channels");
  const Index count = batch * plane;
  if (mode == Mode::train && count < 2) {
    throw ConfigError("batch_norm: train mode needs at least 2 values per channel, got " +
                      std::to_string(count));
  }

  using Values = typename Tensor<Scalar>::Values;
  const Values& x = input.value().values();
  const auto& gamma = state.gamma.value().values();
  const auto& beta = state.beta.value().values();

  Values mean(channels), inv_std(channels);
  if (mode == Mode::train) {
    for (Index c = 0; c < channels; ++c) {
      Scalar sum = 0;
      for (Index n = 0; n < batch; ++n) sum += x.segment((n * channels + c) * plane, plane).sum();
      const Scalar mu = sum / Scalar(count);
      Scalar sq = 0;
      for (Index n = 0; n < batch; ++n) {
        sq += (x.segment((n * channels + c) * plane, plane) - mu).square().sum();
      }
      const Scalar var = sq / Scalar(count);
      mean[c] = mu;
      inv_std[c] = Scalar(1) / std::sqrt(var + state.epsilon);
      const Scalar unbiased = sq / Scalar(count - 1);
      state.running_mean[c] = (Scalar(1) - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (Scalar(1) - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
  } else {
    mean = state.running_mean.values();
    inv_std = (state.running_var.values() + state.epsilon).rsqrt();
  }

  Tensor<Scalar> xhat(xs), out(xs);
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < channels; ++c) {
      const Index off = (n * channels + c) * plane;
      xhat.values().segment(off, plane) = (x.segment(off, plane) - mean[c]) * inv_std[c];
      out.values().segment(off, plane) = xhat.values().segment(off, plane) * gamma[c] + beta[c];
    }
  }

  return record<Scalar>(
      "batch_norm", std::move(out), {input, state.gamma.var, state.beta.var},
      [xhat = std::move(xhat), inv_std, batch, channels, plane, count, mode](TapeNode<Scalar>& self) {
        auto& xn = *self.parents[0];
        auto& gn = *self.parents[1];
        auto& bn = *self.parents[2];
        const Values& dy = self.grad->values();
        const Values& xh = xhat.values();
        const auto& g = gn.value.values();
        Values dgamma = Values::Zero(channels), dbeta = Values::Zero(channels);
        for (Index n = 0; n < batch; ++n) {
          for (Index c = 0; c < channels; ++c) {
            const Index off = (n * channels + c) * plane;
            dbeta[c] += dy.segment(off, plane).sum();
            dgamma[c] += (dy.segment(off, plane) * xh.segment(off, plane)).sum();
          }
        }
        if (xn.requires_grad) {
          Values dx(dy.size());
          for (Index c = 0; c < channels; ++c) {
            const Scalar scale = g[c] * inv_std[c];
            if (mode == Mode::train) {
              const Scalar m = Scalar(count);
              for (Index n = 0; n < batch; ++n) {
                const Index off = (n * channels + c) * plane;
                dx.segment(off, plane) =
                    (scale / m) * (m * dy.segment(off, plane) - dbeta[c] - xh.segment(off, plane) * dgamma[c]);
              }
            } else {
              for (Index n = 0; n < batch; ++n) {
                const Index off = (n * channels + c) * plane;
                dx.segment(off, plane) = dy.segment(off, plane) * scale;
              }
            }
          }
          xn.accumulate(dx);
        }
        if (gn.requires_grad) gn.accumulate(dgamma);
        if (bn.requires_grad) bn.accumulate(dbeta);
      });
}

/// max(0, x); the subgradient at 0 is 0.
template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& input) {
  detail::require_finite_input(input.value(), "relu");
  Tensor<Scalar> out(input.shape(), input.value().values().max(Scalar(0)));
  return record<Scalar>("relu", std::move(out), {input}, [](TapeNode<Scalar>& self) {
    auto& x = *self.parents[0];
    x.accumulate((x.value.values() > Scalar(0)).select(self.grad->values(), Scalar(0)));
  });
}

template <typename Scalar>
Var<Scalar> add_n(std::span<const Var<Scalar>> inputs) {
  ROR_REQUIRE(inputs.size() >= 2, "add_n: needs at least two inputs");
  const Shape& s = inputs[0].shape();
  Tensor<Scalar> out(s, inputs[0].value().values());
  for (std::size_t i = 1; i < inputs.size(); ++i) {
    ROR_REQUIRE(inputs[i].shape() == s, "add_n: shape mismatch " + s.str() + " vs " +
                                                inputs[i].shape().str());
    out.values() += inputs[i].value().values();
  }
  return record<Scalar>("add_n", std::move(out), std::vector<Var<Scalar>>(inputs.begin(), inputs.end()),
                        [](TapeNode<Scalar>& self) {
                          for (auto& p : self.parents) {
                            if (p->requires_grad) p->accumulate(self.grad->values());
                          }
                        });
}

template <typename Scalar>
Var<Scalar> add_n(std::initializer_list<Var<Scalar>> inputs) {
  std::vector<Var<Scalar>> v(inputs);
  return add_n<Scalar>(std::span<const Var<Scalar>>(v));
}

/// Multiplies by a constant (stochastic-depth test-time scaling).
template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& input, Scalar factor) {
  Tensor<Scalar> out(input.shape(), input.value().values() * factor);
  return record<Scalar>("scale", std::move(out), {input}, [factor](TapeNode<Scalar>& self) {
    self.parents[0]->accumulate(self.grad->values() * factor);
  });
}

/// Type-A shortcut: keep spatial indices {0, s, 2s, ...} and zero-pad trailing channels.
template <typename Scalar>
Var<Scalar> zero_pad_shortcut(const Var<Scalar>& input, Index stride, Index out_channels) {
  const Shape& xs = input.shape();
  ROR_REQUIRE(xs.rank() == 4, "zero_pad_shortcut: expected 4-D input, got " + xs.str());
  ROR_REQUIRE(out_channels >= xs[1], "zero_pad_shortcut: cannot shrink " + std::to_string(xs[1]) +
                                             " channels to " + std::to_string(out_channels));
  ROR_REQUIRE(stride >= 1, "zero_pad_shortcut: stride must be positive");
  const Index batch = xs[0], in_ch = xs[1], h = xs[2], w = xs[3];
  const Index oh = (h + stride - 1) / stride, ow = (w + stride - 1) / stride;
  Tensor<Scalar> out(Shape{batch, out_channels, oh, ow});
  const Tensor<Scalar>& x = input.value();
  for (Index n = 0; n < batch; ++n)
    for (Index c = 0; c < in_ch; ++c)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) out.at(n, c, i, j) = x.at(n, c, i * stride, j * stride);

  return record<Scalar>("zero_pad_shortcut", std::move(out), {input},
                        [batch, in_ch, oh, ow, stride](TapeNode<Scalar>& self) {
                          auto& xn = *self.parents[0];
                          Tensor<Scalar> dx(xn.value.shape());
                          const Tensor<Scalar>& dy = *self.grad;
                          for (Index n = 0; n < batch; ++n)
                            for (Index c = 0; c < in_ch; ++c)
                              for (Index i = 0; i < oh; ++i)
                                for (Index j = 0; j < ow; ++j) dx.at(n, c, i * stride, j * stride) = dy.at(n, c, i, j);
                          xn.accumulate(dx.values());
                        });
}

/// Max pooling with implicit -inf padding (used by the ImageNet stem).
template <typename Scalar>
Var<Scalar> max_pool2d(const Var<Scalar>& input, Index kernel, Index stride, Index padding) {
  const Shape& xs = input.shape();
  ROR_REQUIRE(xs.rank() == 4, "max_pool2d: expected 4-D input, got " + xs.str());
  detail::require_finite_input(input.value(), "max_pool2d");
  const Index batch = xs[0], ch = xs[1], h = xs[2], w = xs[3];
  const Index oh = detail::conv_out_extent(h, kernel, stride, padding);
  const Index ow = detail::conv_out_extent(w, kernel, stride, padding);
  ROR_REQUIRE(oh >= 1 && ow >= 1, "max_pool2d: empty output for input " + xs.str());
  Tensor<Scalar> out(Shape{batch, ch, oh, ow});
  std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
  const Tensor<Scalar>& x = input.value();
  Index k = 0;
  for (Index n = 0; n < batch; ++n)
    for (Index c = 0; c < ch; ++c)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j, ++k) {
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          Index best_at = -1;
          for (Index di = 0; di < kernel; ++di)
            for (Index dj = 0; dj < kernel; ++dj) {
              const Index ii = i * stride - padding + di, jj = j * stride - padding + dj;
              if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
              const Index at = ((n * ch + c) * h + ii) * w + jj;
              if (x[at] > best) {
                best = x[at];
                best_at = at;
              }
            }
          out[k] = best;
          argmax[static_cast<std::size_t>(k)] = best_at;
        }
  return record<Scalar>("max_pool2d", std::move(out), {input}, [argmax = std::move(argmax)](TapeNode<Scalar>& self) {
    auto& xn = *self.parents[0];
    typename Tensor<Scalar>::Values dx = Tensor<Scalar>::Values::Zero(xn.value.size());
    const auto& dy = self.grad->values();
    for (std::size_t k = 0; k < argmax.size(); ++k) dx[argmax[k]] += dy[static_cast<Index>(k)];
    xn.accumulate(dx);
  });
}

/// N x C x H x W -> N x C spatial mean.
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& input) {
  const Shape& xs = input.shape();
  ROR_REQUIRE(xs.rank() == 4, "global_avg_pool: expected 4-D input, got " + xs.str());
  const Index rows = xs[0] * xs[1], plane = xs[2] * xs[3];
  Tensor<Scalar> out(Shape{xs[0], xs[1]});
  out.values() = input.value().matrix(rows, plane).rowwise().mean().array();
  return record<Scalar>("global_avg_pool", std::move(out), {input}, [rows, plane](TapeNode<Scalar>& self) {
    auto& xn = *self.parents[0];
    Tensor<Scalar> dx(xn.value.shape());
    dx.matrix(rows, plane) = (self.grad->values() / Scalar(plane)).matrix().replicate(1, plane);
    xn.accumulate(dx.values());
  });
}

/// input N x D, weight K x D, bias K -> N x K.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& input, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  ROR_REQUIRE(xs.rank() == 2 && ws.rank() == 2 && bias.shape().rank() == 1,
                  "linear: expected 2-D input/weight and 1-D bias");
  ROR_REQUIRE(xs[1] == ws[1] && bias.shape()[0] == ws[0],
                  "linear: shape mismatch " + xs.str() + " x " + ws.str() + " + " + bias.shape().str());
  const Index n = xs[0], d = xs[1], k = ws[0];
  Tensor<Scalar> out(Shape{n, k});
  out.matrix(n, k).noalias() = input.value().matrix(n, d) * weight.value().matrix(k, d).transpose();
  out.matrix(n, k).rowwise() += bias.value().values().matrix().transpose();
  return record<Scalar>("linear", std::move(out), {input, weight, bias}, [n, d, k](TapeNode<Scalar>& self) {
    auto& x = *self.parents[0];
    auto& w = *self.parents[1];
    auto& b = *self.parents[2];
    auto dy = self.grad->matrix(n, k);
    if (x.requires_grad) {
      Tensor<Scalar> dx(x.value.shape());
      dx.matrix(n, d).noalias() = dy * w.value.matrix(k, d);
      x.accumulate(dx.values());
    }
    if (w.requires_grad) {
      Tensor<Scalar> dw(w.value.shape());
      dw.matrix(k, d).noalias() = dy.transpose() * x.value.matrix(n, d);
      w.accumulate(dw.values());
    }
    if (b.requires_grad) b.accumulate(dy.colwise().sum().transpose().array());
  });
}

/// Mean over the batch of -log softmax(logits)[label].
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, std::span<const int> labels) {
  const Shape& ls = logits.shape();
  ROR_REQUIRE(ls.rank() == 2, "softmax_cross_entropy: expected N x K logits, got " + ls.str());
  const Index n = ls[0], k = ls[1];
  ROR_REQUIRE(static_cast<Index>(labels.size()) == n, "softmax_cross_entropy: label count " +
                                                              std::to_string(labels.size()) + " != batch " +
                                                              std::to_string(n));
  for (int y : labels) {
    if (y < 0 || y >= k) throw ConfigError("softmax_cross_entropy: label " + std::to_string(y) +
                                           " outside [0," + std::to_string(k) + ")");
  }
  detail::require_finite_input(logits.value(), "softmax_cross_entropy");
  auto z = logits.value().matrix(n, k);
  detail::RowMatrix<Scalar> probs(n, k);
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    const Scalar mx = z.row(i).maxCoeff();
    const auto shifted = (z.row(i).array() - mx).eval();
    const Scalar lse = std::log(shifted.exp().sum());
    probs.row(i) = (shifted - lse).exp().matrix();
    total += lse - shifted[labels[static_cast<std::size_t>(i)]];
  }
  std::vector<int> targets(labels.begin(), labels.end());
  return record<Scalar>("softmax_cross_entropy", Tensor<Scalar>(Shape{1}, total / Scalar(n)), {logits},
                        [probs = std::move(probs), targets = std::move(targets), n, k](TapeNode<Scalar>& self) {
                          const Scalar g = (*self.grad)[0] / Scalar(n);
                          Tensor<Scalar> dz(Shape{n, k});
                          dz.matrix(n, k) = probs * g;
                          for (Index i = 0; i < n; ++i) dz.at(i, targets[static_cast<std::size_t>(i)]) -= g;
                          self.parents[0]->accumulate(dz.values());
                        });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& input) {
  return record<Scalar>("sum", Tensor<Scalar>(Shape{1}, input.value().values().sum()), {input},
                        [](TapeNode<Scalar>& self) {
                          auto& x = *self.parents[0];
                          x.accumulate(Tensor<Scalar>::Values::Constant(x.value.size(), (*self.grad)[0]));
                        });
}

}  // namespace ror
