#pragma once

// Wavelet-decomposition edge-preserving pooling (WDEPP).
//
//   x (HxWxC) --dwt2--> {LL | LH,HL,HH} --subband synthesis--> F = [low | high] (HxWx2C)
//   F --global mean--> FC --ReLU--> FC --sigmoid--> a (2C)
//   G = a * F --1x1 conv + ReLU--> HxWxC --2x2/2 max--> (H/2)x(W/2)xC

#include <algorithm>

#include "wpfuse/layers.hpp"
#include "wpfuse/tensor.hpp"
#include "wpfuse/wavelet.hpp"

namespace wpfuse {

/// Squeeze-excitation parameters over the 2C subband channels.
template <typename Scalar>
struct SqExParams {
  static constexpr Index kReductionRatio = 8;
  static constexpr Index kMinHidden = 4;

  Conv1x1<Scalar> squeeze;  // 2C -> hidden
  Conv1x1<Scalar> excite;   // hidden -> 2C

  static Index hidden_width(Index feature_channels) {
    return std::max(feature_channels / kReductionRatio, kMinHidden);
  }
  Index feature_channels() const { return squeeze.in_channels(); }

  static SqExParams zeros(Index feature_channels) {
    const Index hidden = hidden_width(feature_channels);
    return {Conv1x1<Scalar>::zeros(feature_channels, hidden),
            Conv1x1<Scalar>::zeros(hidden, feature_channels)};
  }
  static SqExParams init(Index feature_channels, Rng& rng) {
    const Index hidden = hidden_width(feature_channels);
    return {Conv1x1<Scalar>::init(feature_channels, hidden, rng),
            Conv1x1<Scalar>::init(hidden, feature_channels, rng)};
  }
};

template <typename Scalar>
struct WdeppParams {
  SqExParams<Scalar> sqex;
  Conv1x1<Scalar> projection;  // 2C -> C

  Index channels() const { return projection.out_channels(); }

  static WdeppParams zeros(Index c) {
    return {SqExParams<Scalar>::zeros(2 * c), Conv1x1<Scalar>::zeros(2 * c, c)};
  }
  static WdeppParams init(Index c, Rng& rng) {
    auto sqex = SqExParams<Scalar>::init(2 * c, rng);
    auto projection = Conv1x1<Scalar>::init(2 * c, c, rng);
    return {std::move(sqex), std::move(projection)};
  }
};

/// [lowpass_component | highpass_component] of dwt2(x), 2C channels.
template <typename Scalar>
FeatureMap<Scalar> build_feature_set(const FeatureMap<Scalar>& x) {
  if (!all_finite(x.data)) throw ValidationError("build_feature_set: non-finite input");
  const Index c = x.channels();
  FeatureMap<Scalar> f(x.batch, x.height, x.width, 2 * c);
  f.data.leftCols(c) = lowpass_projection(x).data;
  f.data.rightCols(c) = x.data - f.data.leftCols(c);
  return f;
}

/// Adjoint of build_feature_set. Both subband syntheses are orthogonal
/// projectors for an orthonormal wavelet, hence self-adjoint:
///   dx = P dlow + (I - P) dhigh = dhigh + P (dlow - dhigh).
template <typename Scalar>
FeatureMap<Scalar> build_feature_set_backward(const FeatureMap<Scalar>& dfeatures) {
  const Index c = dfeatures.channels() / 2;
  FeatureMap<Scalar> diff(dfeatures.batch, dfeatures.height, dfeatures.width, c);
  diff.data = dfeatures.data.leftCols(c) - dfeatures.data.rightCols(c);
  FeatureMap<Scalar> dx = lowpass_projection(diff);
  dx.data += dfeatures.data.rightCols(c);
  return dx;
}

template <typename Scalar>
struct AttentionCache {
  Matrix<Scalar> pooled;   // batch x 2C
  Matrix<Scalar> hidden;   // batch x hidden, post-ReLU
  Matrix<Scalar> weights;  // batch x 2C, post-sigmoid
};

namespace detail {

template <typename Scalar>
void check_finite_params(const Conv1x1<Scalar>& p, const char* who) {
  if (!all_finite(p.weight) || !all_finite(p.bias))
    throw ValidationError(std::string(who) + ": non-finite parameters");
}

template <typename Scalar>
Matrix<Scalar> channel_means(const FeatureMap<Scalar>& f) {
  Matrix<Scalar> means(f.batch, f.channels());
  for (Index n = 0; n < f.batch; ++n) means.row(n) = f.sample(n).colwise().mean();
  return means;
}

}  // namespace detail

template <typename Scalar>
Matrix<Scalar> channel_attention(const FeatureMap<Scalar>& f, const SqExParams<Scalar>& p,
                                 AttentionCache<Scalar>& cache) {
  if (f.channels() != p.feature_channels())
    throw DimensionError("channel_attention: expected " + std::to_string(p.feature_channels()) +
                         " channels, got " + std::to_string(f.channels()));
  if (!all_finite(f.data)) throw ValidationError("channel_attention: non-finite features");
  detail::check_finite_params(p.squeeze, "channel_attention");
  detail::check_finite_params(p.excite, "channel_attention");

  cache.pooled = detail::channel_means(f);
  cache.hidden = ((cache.pooled * p.squeeze.weight).rowwise() + p.squeeze.bias).cwiseMax(Scalar(0));
  Matrix<Scalar> logits = (cache.hidden * p.excite.weight).rowwise() + p.excite.bias;
  cache.weights = (Scalar(1) + (-logits.array()).exp()).inverse().matrix();
  return cache.weights;
}

/// Attention weights, one row per sample, each entry in (0,1).
template <typename Scalar>
Matrix<Scalar> channel_attention(const FeatureMap<Scalar>& f, const SqExParams<Scalar>& p) {
  AttentionCache<Scalar> cache;
  return channel_attention(f, p, cache);
}

/// Backpropagates d(loss)/d(weights) to the pooled means; returns d(loss)/d(pooled).
template <typename Scalar>
Matrix<Scalar> channel_attention_backward(const SqExParams<Scalar>& p, const AttentionCache<Scalar>& cache,
                                          const Matrix<Scalar>& dweights, SqExParams<Scalar>& grad) {
  const Matrix<Scalar> dlogits =
      (dweights.array() * cache.weights.array() * (Scalar(1) - cache.weights.array())).matrix();
  grad.excite.weight.noalias() += cache.hidden.transpose() * dlogits;
  grad.excite.bias += dlogits.colwise().sum();
  const Matrix<Scalar> dhidden =
      (cache.hidden.array() > Scalar(0)).select(dlogits * p.excite.weight.transpose(), Scalar(0));
  grad.squeeze.weight.noalias() += cache.pooled.transpose() * dhidden;
  grad.squeeze.bias += dhidden.colwise().sum();
  return dhidden * p.squeeze.weight.transpose();
}

template <typename Scalar>
struct WdeppCache {
  FeatureMap<Scalar> features;  // F(X)
  AttentionCache<Scalar> attention;
  FeatureMap<Scalar> weighted;   // a * F(X)
  FeatureMap<Scalar> projected;  // post-ReLU
  MaxPoolCache<Scalar> pool;
};

template <typename Scalar>
FeatureMap<Scalar> wdepp_forward(const FeatureMap<Scalar>& x, const WdeppParams<Scalar>& p,
                                 WdeppCache<Scalar>& cache) {
  if (x.channels() != p.channels())
    throw DimensionError("wdepp_pool: expected " + std::to_string(p.channels()) + " channels, got " +
                         std::to_string(x.channels()));
  detail::check_finite_params(p.projection, "wdepp_pool");
  cache.features = build_feature_set(x);
  const Matrix<Scalar>& att = channel_attention(cache.features, p.sqex, cache.attention);
  cache.weighted = cache.features;
  for (Index n = 0; n < x.batch; ++n)
    cache.weighted.sample(n).array().rowwise() *= att.row(n).array();
  cache.projected = relu_forward(conv1x1_forward(cache.weighted, p.projection));
  return maxpool2_forward(cache.projected, cache.pool);
}

/// The pooled map, (H/2) x (W/2) x C, nonnegative.
template <typename Scalar>
FeatureMap<Scalar> wdepp_pool(const FeatureMap<Scalar>& x, const WdeppParams<Scalar>& p) {
  WdeppCache<Scalar> cache;
  return wdepp_forward(x, p, cache);
}

template <typename Scalar>
FeatureMap<Scalar> wdepp_backward(const WdeppParams<Scalar>& p, const WdeppCache<Scalar>& cache,
                                  const FeatureMap<Scalar>& dout, WdeppParams<Scalar>& grad) {
  const FeatureMap<Scalar> dprojected = relu_backward(cache.projected, maxpool2_backward(cache.pool, dout));
  const FeatureMap<Scalar> dweighted =
      conv1x1_backward(cache.weighted, p.projection, dprojected, grad.projection);

  const Matrix<Scalar>& att = cache.attention.weights;
  const Index batch = dout.batch;
  FeatureMap<Scalar> dfeatures = dweighted;
  Matrix<Scalar> datt(batch, att.cols());
  for (Index n = 0; n < batch; ++n) {
    datt.row(n) = dweighted.sample(n).cwiseProduct(cache.features.sample(n)).colwise().sum();
    dfeatures.sample(n).array().rowwise() *= att.row(n).array();
  }
  const Matrix<Scalar> dpooled = channel_attention_backward(p.sqex, cache.attention, datt, grad.sqex);
  const Scalar inv_pixels = Scalar(1) / Scalar(cache.features.pixels());
  for (Index n = 0; n < batch; ++n)
    dfeatures.sample(n).rowwise() += inv_pixels * dpooled.row(n);
  return build_feature_set_backward(dfeatures);
}

}  // namespace wpfuse
