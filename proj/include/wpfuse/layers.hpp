#pragma once

// Differentiable building blocks of the fusion network. Every layer is a pair
// of free functions: *_forward fills a cache, *_backward consumes it and
// accumulates parameter gradients into a structure shaped like the parameters.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

#include "wpfuse/errors.hpp"
#include "wpfuse/random.hpp"
#include "wpfuse/tensor.hpp"
#include "wpfuse/wavelet.hpp"

namespace wpfuse {

/// Fan-in scaled uniform fill, bound 1/sqrt(fan_in).
template <typename Scalar>
void fill_uniform(Matrix<Scalar>& m, Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<Scalar>(rng.uniform(-bound, bound));
}

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, zero padding 1, no bias (a normalization layer
// always follows and absorbs any shift).
//
// weight is Cin x (9*Cout); column t*Cout + co holds tap t = (dy+1)*3 + (dx+1):
//   out(y, x, co) = sum_{t, ci} weight(ci, t*Cout + co) * in(y+dy, x+dx, ci)

template <typename Scalar>
struct Conv3x3 {
  Matrix<Scalar> weight;

  Index in_channels() const { return weight.rows(); }
  Index out_channels() const { return weight.cols() / 9; }

  static Conv3x3 zeros(Index in, Index out) { return {Matrix<Scalar>::Zero(in, 9 * out)}; }
  static Conv3x3 init(Index in, Index out, Rng& rng) {
    Conv3x3 p = zeros(in, out);
    fill_uniform(p.weight, 9 * in, rng);
    return p;
  }
};

namespace detail {

// Calls f(tap, out_row, in_row, len) for every contiguous run of pixels that a
// 3x3 tap connects inside a column-major h x w raster, restricted to output
// columns [ox0, ox1) and input columns [ix0, ix1).
template <typename F>
void for_each_tap_run(Index h, Index w, Index ox0, Index ox1, Index ix0, Index ix1, F&& f) {
  for (int dy = -1; dy <= 1; ++dy) {
    const Index y0 = std::max<Index>(0, -dy);
    const Index len = std::min<Index>(h, h - dy) - y0;
    if (len <= 0) continue;
    for (int dx = -1; dx <= 1; ++dx) {
      const int tap = (dy + 1) * 3 + (dx + 1);
      const Index lo = std::max({Index(0), ox0, ix0 - dx}), hi = std::min({w, ox1, ix1 - dx});
      for (Index x = lo; x < hi; ++x) f(tap, x * h + y0, (x + dx) * h + y0 + dy, len);
    }
  }
}

// Image columns per chunk so that a chunk of tap responses stays cache sized.
inline Index conv_chunk_columns(Index h, Index w, Index out_channels) {
  const Index target_values = Index(1) << 19;
  return std::clamp<Index>(target_values / std::max<Index>(1, h * 9 * out_channels), 1, w);
}

}  // namespace detail

template <typename Scalar>
FeatureMap<Scalar> conv3x3_forward(const FeatureMap<Scalar>& x, const Conv3x3<Scalar>& p) {
  if (x.channels() != p.in_channels())
    throw DimensionError("conv3x3: expected " + std::to_string(p.in_channels()) +
                         " input channels, got " + std::to_string(x.channels()));
  const Index h = x.height, w = x.width, cout = p.out_channels();
  const Index step = detail::conv_chunk_columns(h, w, cout);
  FeatureMap<Scalar> out(x.batch, h, w, cout);
  Matrix<Scalar> taps(std::min(w, step + 2) * h, 9 * cout);
  for (Index n = 0; n < x.batch; ++n) {
    const auto src = x.sample(n);
    auto dst = out.sample(n);
    for (Index x0 = 0; x0 < w; x0 += step) {
      const Index x1 = std::min(w, x0 + step);
      const Index i0 = std::max<Index>(0, x0 - 1), i1 = std::min(w, x1 + 1);
      taps.topRows((i1 - i0) * h).noalias() = src.middleRows(i0 * h, (i1 - i0) * h) * p.weight;
      detail::for_each_tap_run(h, w, x0, x1, 0, w, [&](int t, Index o, Index i, Index len) {
        dst.middleRows(o, len) += taps.block(i - i0 * h, t * cout, len, cout);
      });
    }
  }
  return out;
}

/// Returns d(loss)/d(x); accumulates the weight gradient into grad.
template <typename Scalar>
FeatureMap<Scalar> conv3x3_backward(const FeatureMap<Scalar>& x, const Conv3x3<Scalar>& p,
                                    const FeatureMap<Scalar>& dout, Conv3x3<Scalar>& grad) {
  const Index h = x.height, w = x.width, cout = p.out_channels();
  const Index step = detail::conv_chunk_columns(h, w, cout);
  FeatureMap<Scalar> dx(x.batch, h, w, x.channels());
  Matrix<Scalar> scattered(step * h, 9 * cout);
  for (Index n = 0; n < x.batch; ++n) {
    const auto src = dout.sample(n);
    const auto in = x.sample(n);
    auto dst = dx.sample(n);
    for (Index x0 = 0; x0 < w; x0 += step) {
      const Index x1 = std::min(w, x0 + step);
      const Index rows = (x1 - x0) * h;
      auto chunk = scattered.topRows(rows);
      chunk.setZero();
      detail::for_each_tap_run(h, w, 0, w, x0, x1, [&](int t, Index o, Index i, Index len) {
        chunk.block(i - x0 * h, t * cout, len, cout) = src.middleRows(o, len);
      });
      dst.middleRows(x0 * h, rows).noalias() = chunk * p.weight.transpose();
      grad.weight.noalias() += in.middleRows(x0 * h, rows).transpose() * chunk;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Per-channel batch normalization.

template <typename Scalar>
struct BatchNorm {
  static constexpr double kMomentum = 0.1;
  static constexpr double kEpsilon = 1e-5;

  RowVector<Scalar> gamma, beta;
  RowVector<Scalar> running_mean, running_var;

  Index channels() const { return gamma.size(); }

  static BatchNorm init(Index c) {
    return {RowVector<Scalar>::Ones(c), RowVector<Scalar>::Zero(c), RowVector<Scalar>::Zero(c),
            RowVector<Scalar>::Ones(c)};
  }
  static BatchNorm zeros(Index c) {
    return {RowVector<Scalar>::Zero(c), RowVector<Scalar>::Zero(c), RowVector<Scalar>::Zero(c),
            RowVector<Scalar>::Zero(c)};
  }
};

template <typename Scalar>
struct BatchNormCache {
  Matrix<Scalar> xhat;
  RowVector<Scalar> inv_std;
  RowVector<Scalar> batch_mean, batch_var;  // training mode only
  bool training = false;
};

/// Training mode normalizes with the statistics of the batch and records them
/// in the cache; inference mode uses the running statistics.
template <typename Scalar>
FeatureMap<Scalar> batchnorm_forward(const FeatureMap<Scalar>& x, const BatchNorm<Scalar>& p,
                                     bool training, BatchNormCache<Scalar>& cache) {
  if (x.channels() != p.channels()) throw DimensionError("batchnorm: channel mismatch");
  const Scalar eps = Scalar(BatchNorm<Scalar>::kEpsilon);
  cache.training = training;
  if (training) {
    if (x.data.rows() < 2)
      throw DimensionError("batchnorm: training needs at least two values per channel");
    cache.batch_mean = x.data.colwise().mean();
    cache.xhat = x.data.rowwise() - cache.batch_mean;
    cache.batch_var = cache.xhat.array().square().colwise().mean();
    cache.inv_std = (cache.batch_var.array() + eps).rsqrt();
  } else {
    cache.inv_std = (p.running_var.array() + eps).rsqrt();
    cache.xhat = x.data.rowwise() - p.running_mean;
  }
  cache.xhat.array().rowwise() *= cache.inv_std.array();
  FeatureMap<Scalar> y(x.batch, x.height, x.width, x.channels());
  y.data = cache.xhat;
  y.data.array().rowwise() *= p.gamma.array();
  y.data.rowwise() += p.beta;
  return y;
}

/// Momentum update of the running statistics from a training-mode cache.
/// The running variance uses the unbiased batch variance.
template <typename Scalar>
void batchnorm_update_running(BatchNorm<Scalar>& p, const BatchNormCache<Scalar>& cache) {
  const Scalar mom = Scalar(BatchNorm<Scalar>::kMomentum);
  const Scalar m = Scalar(cache.xhat.rows());
  p.running_mean = (Scalar(1) - mom) * p.running_mean + mom * cache.batch_mean;
  p.running_var = (Scalar(1) - mom) * p.running_var + (mom * m / (m - Scalar(1))) * cache.batch_var;
}

template <typename Scalar>
FeatureMap<Scalar> batchnorm_backward(const BatchNorm<Scalar>& p, const BatchNormCache<Scalar>& cache,
                                      const FeatureMap<Scalar>& dout, BatchNorm<Scalar>& grad) {
  grad.beta += dout.data.colwise().sum();
  grad.gamma += dout.data.cwiseProduct(cache.xhat).colwise().sum();
  FeatureMap<Scalar> dx(dout.batch, dout.height, dout.width, dout.channels());
  const RowVector<Scalar> scale = p.gamma.cwiseProduct(cache.inv_std);
  if (!cache.training) {
    dx.data = dout.data;
    dx.data.array().rowwise() *= scale.array();
    return dx;
  }
  const Scalar m = Scalar(dout.data.rows());
  const RowVector<Scalar> mean_dy = dout.data.colwise().mean();
  const RowVector<Scalar> mean_dy_xhat = dout.data.cwiseProduct(cache.xhat).colwise().sum() / m;
  dx.data = dout.data.rowwise() - mean_dy;
  dx.data -= cache.xhat * mean_dy_xhat.asDiagonal();
  dx.data.array().rowwise() *= scale.array();
  return dx;
}

// ---------------------------------------------------------------------------
// Pointwise activations.

template <typename Scalar>
FeatureMap<Scalar> relu_forward(const FeatureMap<Scalar>& x) {
  FeatureMap<Scalar> y = x;
  y.data = x.data.cwiseMax(Scalar(0));
  return y;
}

/// Gradient through ReLU given its output (zero where the output is zero).
template <typename Scalar>
FeatureMap<Scalar> relu_backward(const FeatureMap<Scalar>& y, const FeatureMap<Scalar>& dout) {
  FeatureMap<Scalar> dx = dout;
  dx.data = (y.data.array() > Scalar(0)).select(dout.data, Scalar(0));
  return dx;
}

template <typename Scalar>
FeatureMap<Scalar> sigmoid_forward(const FeatureMap<Scalar>& x) {
  FeatureMap<Scalar> y = x;
  y.data = (Scalar(1) + (-x.data.array()).exp()).inverse().matrix();
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> sigmoid_backward(const FeatureMap<Scalar>& y, const FeatureMap<Scalar>& dout) {
  FeatureMap<Scalar> dx = dout;
  dx.data = (dout.data.array() * y.data.array() * (Scalar(1) - y.data.array())).matrix();
  return dx;
}

// ---------------------------------------------------------------------------
// 2x2 stride-2 pooling.

template <typename Scalar>
struct MaxPoolCache {
  // Winning corner (0..3 as dy*2 + dx) per output value, same layout as the output map.
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> argmax;
};

namespace detail {
inline void check_poolable(Index h, Index w, const char* who) {
  if (h < 2 || w < 2 || h % 2 || w % 2)
    throw DimensionError(std::string(who) + ": height and width must be even, got " +
                         shape_string(h, w));
}
}  // namespace detail

template <typename Scalar>
FeatureMap<Scalar> maxpool2_forward(const FeatureMap<Scalar>& x, MaxPoolCache<Scalar>& cache) {
  detail::check_poolable(x.height, x.width, "maxpool2");
  const Index h = x.height, w = x.width;
  FeatureMap<Scalar> y(x.batch, h / 2, w / 2, x.channels());
  cache.argmax.resize(y.data.rows(), y.data.cols());
  for (Index n = 0; n < x.batch; ++n) {
    for (Index c = 0; c < x.channels(); ++c) {
      const Scalar* base = x.channel(c, n).data();
      auto out = y.channel(c, n);
      Eigen::Map<Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>> arg(
          cache.argmax.col(c).data() + n * y.pixels(), h / 2, w / 2);
      out = detail::phase(base, h, w, 0, 0);
      arg.setZero();
      for (std::uint8_t k = 1; k < 4; ++k) {
        const auto cand = detail::phase(base, h, w, k / 2, k % 2);
        for (Index j = 0; j < w / 2; ++j)
          for (Index i = 0; i < h / 2; ++i)
            if (cand(i, j) > out(i, j)) {
              out(i, j) = cand(i, j);
              arg(i, j) = k;
            }
      }
    }
  }
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> maxpool2_backward(const MaxPoolCache<Scalar>& cache, const FeatureMap<Scalar>& dout) {
  const Index h = dout.height * 2, w = dout.width * 2;
  FeatureMap<Scalar> dx(dout.batch, h, w, dout.channels());
  for (Index n = 0; n < dout.batch; ++n) {
    for (Index c = 0; c < dout.channels(); ++c) {
      const auto g = dout.channel(c, n);
      Scalar* base = dx.channel(c, n).data();
      const std::uint8_t* arg = cache.argmax.col(c).data() + n * dout.pixels();
      for (Index j = 0; j < dout.width; ++j)
        for (Index i = 0; i < dout.height; ++i) {
          const std::uint8_t k = arg[j * dout.height + i];
          base[(2 * j + k % 2) * h + 2 * i + k / 2] = g(i, j);
        }
    }
  }
  return dx;
}

template <typename Scalar>
FeatureMap<Scalar> avgpool2_forward(const FeatureMap<Scalar>& x) {
  detail::check_poolable(x.height, x.width, "avgpool2");
  const Index h = x.height, w = x.width;
  FeatureMap<Scalar> y(x.batch, h / 2, w / 2, x.channels());
  for (Index n = 0; n < x.batch; ++n)
    for (Index c = 0; c < x.channels(); ++c) {
      const Scalar* base = x.channel(c, n).data();
      y.channel(c, n) = Scalar(0.25) * (detail::phase(base, h, w, 0, 0) + detail::phase(base, h, w, 0, 1) +
                                        detail::phase(base, h, w, 1, 0) + detail::phase(base, h, w, 1, 1));
    }
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> avgpool2_backward(const FeatureMap<Scalar>& dout) {
  const Index h = dout.height * 2, w = dout.width * 2;
  FeatureMap<Scalar> dx(dout.batch, h, w, dout.channels());
  for (Index n = 0; n < dout.batch; ++n)
    for (Index c = 0; c < dout.channels(); ++c) {
      Scalar* base = dx.channel(c, n).data();
      for (int k = 0; k < 4; ++k)
        detail::phase(base, h, w, k / 2, k % 2) = Scalar(0.25) * dout.channel(c, n);
    }
  return dx;
}

// ---------------------------------------------------------------------------
// Pointwise (1x1) convolution with bias: out = in * weight + bias.

template <typename Scalar>
struct Conv1x1 {
  Matrix<Scalar> weight;  // Cin x Cout
  RowVector<Scalar> bias;

  Index in_channels() const { return weight.rows(); }
  Index out_channels() const { return weight.cols(); }

  static Conv1x1 zeros(Index in, Index out) {
    return {Matrix<Scalar>::Zero(in, out), RowVector<Scalar>::Zero(out)};
  }
  static Conv1x1 init(Index in, Index out, Rng& rng) {
    Conv1x1 p = zeros(in, out);
    fill_uniform(p.weight, in, rng);
    return p;
  }
};

template <typename Scalar>
FeatureMap<Scalar> conv1x1_forward(const FeatureMap<Scalar>& x, const Conv1x1<Scalar>& p) {
  if (x.channels() != p.in_channels()) throw DimensionError("conv1x1: channel mismatch");
  FeatureMap<Scalar> y(x.batch, x.height, x.width, p.out_channels());
  y.data.noalias() = x.data * p.weight;
  y.data.rowwise() += p.bias;
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> conv1x1_backward(const FeatureMap<Scalar>& x, const Conv1x1<Scalar>& p,
                                    const FeatureMap<Scalar>& dout, Conv1x1<Scalar>& grad) {
  grad.weight.noalias() += x.data.transpose() * dout.data;
  grad.bias += dout.data.colwise().sum();
  FeatureMap<Scalar> dx(x.batch, x.height, x.width, x.channels());
  dx.data.noalias() = dout.data * p.weight.transpose();
  return dx;
}

// ---------------------------------------------------------------------------
// 2x2 stride-2 transpose convolution (no overlap between output blocks).
// weight is Cin x (4*Cout); column t*Cout + co feeds output corner t = dy*2 + dx.

template <typename Scalar>
struct TransConv2x2 {
  Matrix<Scalar> weight;
  RowVector<Scalar> bias;

  Index in_channels() const { return weight.rows(); }
  Index out_channels() const { return bias.size(); }

  static TransConv2x2 zeros(Index in, Index out) {
    return {Matrix<Scalar>::Zero(in, 4 * out), RowVector<Scalar>::Zero(out)};
  }
  static TransConv2x2 init(Index in, Index out, Rng& rng) {
    TransConv2x2 p = zeros(in, out);
    fill_uniform(p.weight, 4 * in, rng);
    return p;
  }
};

template <typename Scalar>
FeatureMap<Scalar> transconv2x2_forward(const FeatureMap<Scalar>& x, const TransConv2x2<Scalar>& p) {
  if (x.channels() != p.in_channels()) throw DimensionError("transconv2x2: channel mismatch");
  const Index cout = p.out_channels();
  const Index h = 2 * x.height, w = 2 * x.width;
  FeatureMap<Scalar> y(x.batch, h, w, cout);
  Matrix<Scalar> corners(x.pixels(), 4 * cout);
  for (Index n = 0; n < x.batch; ++n) {
    corners.noalias() = x.sample(n) * p.weight;
    for (Index co = 0; co < cout; ++co) {
      Scalar* base = y.channel(co, n).data();
      for (int t = 0; t < 4; ++t)
        detail::phase(base, h, w, t / 2, t % 2) =
            Eigen::Map<const Matrix<Scalar>>(corners.col(t * cout + co).data(), x.height, x.width)
                .array() +
            p.bias(co);
    }
  }
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> transconv2x2_backward(const FeatureMap<Scalar>& x, const TransConv2x2<Scalar>& p,
                                         const FeatureMap<Scalar>& dout, TransConv2x2<Scalar>& grad) {
  const Index cout = p.out_channels();
  const Index h = dout.height, w = dout.width;
  FeatureMap<Scalar> dx(x.batch, x.height, x.width, x.channels());
  Matrix<Scalar> corners(x.pixels(), 4 * cout);
  grad.bias += dout.data.colwise().sum();
  for (Index n = 0; n < x.batch; ++n) {
    for (Index co = 0; co < cout; ++co) {
      const Scalar* base = dout.channel(co, n).data();
      for (int t = 0; t < 4; ++t)
        Eigen::Map<Matrix<Scalar>>(corners.col(t * cout + co).data(), x.height, x.width) =
            detail::phase(base, h, w, t / 2, t % 2);
    }
    dx.sample(n).noalias() = corners * p.weight.transpose();
    grad.weight.noalias() += x.sample(n).transpose() * corners;
  }
  return dx;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
FeatureMap<Scalar> concat_channels(const FeatureMap<Scalar>& a, const FeatureMap<Scalar>& b) {
  if (a.batch != b.batch || a.height != b.height || a.width != b.width)
    throw DimensionError("concat_channels: spatial shapes differ (" + shape_string(a) + " vs " +
                         shape_string(b) + ")");
  FeatureMap<Scalar> out(a.batch, a.height, a.width, a.channels() + b.channels());
  out.data << a.data, b.data;
  return out;
}

template <typename Scalar>
FeatureMap<Scalar> slice_channels(const FeatureMap<Scalar>& x, Index first, Index count) {
  FeatureMap<Scalar> out(x.batch, x.height, x.width, count);
  out.data = x.data.middleCols(first, count);
  return out;
}

}  // namespace wpfuse
