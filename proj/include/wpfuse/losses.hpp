#pragma once

// Composite fusion objective: intensity + gradient + structure, unit weights.
// Every term has a matching *_gradient returning d(term)/d(fused).

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include "wpfuse/errors.hpp"
#include "wpfuse/tensor.hpp"

namespace wpfuse {

struct LossBreakdown {
  double intensity = 0.0;
  double gradient = 0.0;
  double structure = 0.0;
  double total = 0.0;
};

namespace detail {

template <typename Scalar>
void check_same_shape(const Image<Scalar>& x, const Image<Scalar>& y, const char* who) {
  if (x.rows() != y.rows() || x.cols() != y.cols())
    throw DimensionError(std::string(who) + ": shape mismatch (" + shape_string(x.rows(), x.cols()) + " vs " +
                         shape_string(y.rows(), y.cols()) + ")");
  if (x.size() == 0) throw DimensionError(std::string(who) + ": empty image");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Intensity: mean (F - max(A,B))^2

template <typename Scalar>
Scalar intensity_loss(const Image<Scalar>& f, const Image<Scalar>& a, const Image<Scalar>& b) {
  detail::check_same_shape(f, a, "intensity_loss");
  detail::check_same_shape(f, b, "intensity_loss");
  return (f - a.cwiseMax(b)).squaredNorm() / Scalar(f.size());
}

template <typename Scalar>
Image<Scalar> intensity_loss_gradient(const Image<Scalar>& f, const Image<Scalar>& a, const Image<Scalar>& b) {
  return (Scalar(2) / Scalar(f.size())) * (f - a.cwiseMax(b));
}

// ---------------------------------------------------------------------------
// Sobel pair with symmetric (edge-including mirror) padding.
// gx responds to changes along columns (horizontal), gy along rows.

template <typename Scalar>
Image<Scalar> pad_symmetric1(const Image<Scalar>& x) {
  const Index h = x.rows(), w = x.cols();
  Image<Scalar> p(h + 2, w + 2);
  p.block(1, 1, h, w) = x;
  p.row(0).segment(1, w) = x.row(0);
  p.row(h + 1).segment(1, w) = x.row(h - 1);
  p.col(0) = p.col(1);
  p.col(w + 1) = p.col(w);
  return p;
}

/// Adjoint of pad_symmetric1.
template <typename Scalar>
Image<Scalar> pad_symmetric1_adjoint(Image<Scalar> dp) {
  const Index h = dp.rows() - 2, w = dp.cols() - 2;
  dp.col(1) += dp.col(0);
  dp.col(w) += dp.col(w + 1);
  dp.row(1) += dp.row(0);
  dp.row(h) += dp.row(h + 1);
  return dp.block(1, 1, h, w);
}

template <typename Scalar>
std::pair<Image<Scalar>, Image<Scalar>> sobel(const Image<Scalar>& x) {
  const Index h = x.rows(), w = x.cols();
  const Image<Scalar> p = pad_symmetric1(x);
  Image<Scalar> gx = (p.block(0, 2, h, w) - p.block(0, 0, h, w)) + Scalar(2) * (p.block(1, 2, h, w) - p.block(1, 0, h, w)) +
                     (p.block(2, 2, h, w) - p.block(2, 0, h, w));
  Image<Scalar> gy = (p.block(2, 0, h, w) - p.block(0, 0, h, w)) + Scalar(2) * (p.block(2, 1, h, w) - p.block(0, 1, h, w)) +
                     (p.block(2, 2, h, w) - p.block(0, 2, h, w));
  return {std::move(gx), std::move(gy)};
}

/// Adjoint of sobel(): maps (d gx, d gy) back to the input raster.
template <typename Scalar>
Image<Scalar> sobel_adjoint(const Image<Scalar>& dgx, const Image<Scalar>& dgy) {
  const Index h = dgx.rows(), w = dgx.cols();
  Image<Scalar> dp = Image<Scalar>::Zero(h + 2, w + 2);
  dp.block(0, 2, h, w) += dgx;
  dp.block(0, 0, h, w) -= dgx;
  dp.block(1, 2, h, w) += Scalar(2) * dgx;
  dp.block(1, 0, h, w) -= Scalar(2) * dgx;
  dp.block(2, 2, h, w) += dgx;
  dp.block(2, 0, h, w) -= dgx;
  dp.block(2, 0, h, w) += dgy;
  dp.block(0, 0, h, w) -= dgy;
  dp.block(2, 1, h, w) += Scalar(2) * dgy;
  dp.block(0, 1, h, w) -= Scalar(2) * dgy;
  dp.block(2, 2, h, w) += dgy;
  dp.block(0, 2, h, w) -= dgy;
  return pad_symmetric1_adjoint(std::move(dp));
}

// ---------------------------------------------------------------------------
// Gradient: mean over pixels of (dx F - dx A)^2 + (dy F - dy A)^2

template <typename Scalar>
Scalar gradient_loss(const Image<Scalar>& f, const Image<Scalar>& a) {
  detail::check_same_shape(f, a, "gradient_loss");
  const auto [gx, gy] = sobel<Scalar>(f - a);  // Sobel is linear
  return (gx.squaredNorm() + gy.squaredNorm()) / Scalar(f.size());
}

template <typename Scalar>
Image<Scalar> gradient_loss_gradient(const Image<Scalar>& f, const Image<Scalar>& a) {
  const auto [gx, gy] = sobel<Scalar>(f - a);
  return (Scalar(2) / Scalar(f.size())) * sobel_adjoint<Scalar>(gx, gy);
}

// ---------------------------------------------------------------------------
// Multi-scale SSIM.
//
// 11x11 Gaussian window (sigma 1.5), valid filtering, C1 = 0.01^2,
// C2 = 0.03^2 on [0,1]. Scales are dyadic (2x2 mean, floor) and limited to
// those where the smaller side still covers a window; the scale weights are
// truncated to that count and renormalized. Per-scale terms enter the
// product as sign(v)|v|^w so anticorrelated content yields negative values.

struct MsSsimParams {
  static constexpr int kWindow = 11;
  static constexpr double kSigma = 1.5;
  static constexpr double kC1 = 0.01 * 0.01;
  static constexpr double kC2 = 0.03 * 0.03;
  static constexpr std::array<double, 5> kWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
};

/// Number of scales usable for an h x w image (0 if smaller than one window).
inline int ms_ssim_scale_count(Index h, Index w) {
  int scales = 0;
  while (scales < 5 && std::min(h, w) >= MsSsimParams::kWindow) {
    ++scales;
    h /= 2;
    w /= 2;
  }
  return scales;
}

namespace detail {

template <typename Scalar>
const Vector<Scalar>& gaussian_window() {
  static const Vector<Scalar> g = [] {
    Eigen::VectorXd v(MsSsimParams::kWindow);
    const int r = MsSsimParams::kWindow / 2;
    for (int i = 0; i < MsSsimParams::kWindow; ++i)
      v(i) = std::exp(-double((i - r) * (i - r)) / (2.0 * MsSsimParams::kSigma * MsSsimParams::kSigma));
    v /= v.sum();
    return Vector<Scalar>(v.cast<Scalar>());
  }();
  return g;
}

/// Separable valid correlation with kernel k (length K): (h-K+1) x (w-K+1).
template <typename Scalar>
Image<Scalar> filter_valid(const Image<Scalar>& x, const Vector<Scalar>& k) {
  const Index K = k.size(), h = x.rows() - K + 1, w = x.cols() - K + 1;
  Image<Scalar> tmp = Image<Scalar>::Zero(h, x.cols());
  for (Index i = 0; i < K; ++i) tmp += k(i) * x.middleRows(i, h);
  Image<Scalar> out = Image<Scalar>::Zero(h, w);
  for (Index j = 0; j < K; ++j) out += k(j) * tmp.middleCols(j, w);
  return out;
}

/// Adjoint of filter_valid back to an h x w raster.
template <typename Scalar>
Image<Scalar> filter_valid_adjoint(const Image<Scalar>& d, const Vector<Scalar>& k, Index h, Index w) {
  const Index K = k.size();
  Image<Scalar> tmp = Image<Scalar>::Zero(d.rows(), w);
  for (Index j = 0; j < K; ++j) tmp.middleCols(j, d.cols()) += k(j) * d;
  Image<Scalar> out = Image<Scalar>::Zero(h, w);
  for (Index i = 0; i < K; ++i) out.middleRows(i, d.rows()) += k(i) * tmp;
  return out;
}

template <typename Scalar>
Image<Scalar> downsample2(const Image<Scalar>& x) {
  const Index h = x.rows() / 2, w = x.cols() / 2;
  Image<Scalar> out(h, w);
  for (Index j = 0; j < w; ++j)
    for (Index i = 0; i < h; ++i)
      out(i, j) = Scalar(0.25) * (x(2 * i, 2 * j) + x(2 * i + 1, 2 * j) + x(2 * i, 2 * j + 1) + x(2 * i + 1, 2 * j + 1));
  return out;
}

template <typename Scalar>
Image<Scalar> downsample2_adjoint(const Image<Scalar>& d, Index h, Index w) {
  Image<Scalar> out = Image<Scalar>::Zero(h, w);
  for (Index j = 0; j < d.cols(); ++j)
    for (Index i = 0; i < d.rows(); ++i) {
      const Scalar v = Scalar(0.25) * d(i, j);
      out(2 * i, 2 * j) += v;
      out(2 * i + 1, 2 * j) += v;
      out(2 * i, 2 * j + 1) += v;
      out(2 * i + 1, 2 * j + 1) += v;
    }
  return out;
}

// Local statistics of one scale, retained for the backward pass.
template <typename Scalar>
struct SsimScale {
  Image<Scalar> x, y;
  Image<Scalar> mu_x, mu_y, var_x, var_y, cov;
  Image<Scalar> l, cs;
  double mean_value = 0.0;  // mean(cs), or mean(l*cs) at the last scale
};

template <typename Scalar>
SsimScale<Scalar> ssim_scale(Image<Scalar> x, Image<Scalar> y, bool last) {
  const Vector<Scalar>& g = gaussian_window<Scalar>();
  const Scalar c1 = Scalar(MsSsimParams::kC1), c2 = Scalar(MsSsimParams::kC2);
  SsimScale<Scalar> s;
  s.mu_x = filter_valid(x, g);
  s.mu_y = filter_valid(y, g);
  s.var_x = filter_valid<Scalar>(x.cwiseProduct(x), g) - s.mu_x.cwiseProduct(s.mu_x);
  s.var_y = filter_valid<Scalar>(y.cwiseProduct(y), g) - s.mu_y.cwiseProduct(s.mu_y);
  s.cov = filter_valid<Scalar>(x.cwiseProduct(y), g) - s.mu_x.cwiseProduct(s.mu_y);
  s.l = ((Scalar(2) * s.mu_x.array() * s.mu_y.array() + c1) /
         (s.mu_x.array().square() + s.mu_y.array().square() + c1)).matrix();
  s.cs = ((Scalar(2) * s.cov.array() + c2) / (s.var_x.array() + s.var_y.array() + c2)).matrix();
  s.mean_value = last ? double(s.l.cwiseProduct(s.cs).mean()) : double(s.cs.mean());
  s.x = std::move(x);
  s.y = std::move(y);
  return s;
}

// d(mean_value)/d(y) at this scale, scaled by `upstream`.
template <typename Scalar>
Image<Scalar> ssim_scale_backward(const SsimScale<Scalar>& s, bool last, Scalar upstream) {
  const Vector<Scalar>& g = gaussian_window<Scalar>();
  const Scalar c1 = Scalar(MsSsimParams::kC1), c2 = Scalar(MsSsimParams::kC2);
  const Scalar per = upstream / Scalar(s.cs.size());
  const auto mx = s.mu_x.array(), my = s.mu_y.array();
  const auto a2 = Scalar(2) * s.cov.array() + c2;
  const auto b2 = s.var_x.array() + s.var_y.array() + c2;

  Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic> dcs, dl;
  if (last) {
    dcs = per * s.l.array();
    dl = per * s.cs.array();
  } else {
    dcs = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Constant(s.cs.rows(), s.cs.cols(), per);
    dl = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(s.cs.rows(), s.cs.cols());
  }
  const auto a1 = Scalar(2) * mx * my + c1;
  const auto b1 = mx.square() + my.square() + c1;
  // Partial derivatives w.r.t. the local moments of y.
  Image<Scalar> dmu_y = (dl * (Scalar(2) * mx * b1 - Scalar(2) * my * a1) / b1.square()).matrix();
  const Image<Scalar> dcov = (dcs * Scalar(2) / b2).matrix();
  const Image<Scalar> dvar_y = (-dcs * a2 / b2.square()).matrix();
  // var_y = G(y^2) - mu_y^2, cov = G(xy) - mu_x mu_y
  dmu_y.array() -= Scalar(2) * my * dvar_y.array() + mx * dcov.array();
  const Index h = s.y.rows(), w = s.y.cols();
  Image<Scalar> dy = filter_valid_adjoint(dmu_y, g, h, w);
  dy.array() += Scalar(2) * s.y.array() * filter_valid_adjoint(dvar_y, g, h, w).array();
  dy.array() += s.x.array() * filter_valid_adjoint(dcov, g, h, w).array();
  return dy;
}

inline double signed_pow(double v, double e) { return v < 0 ? -std::pow(-v, e) : std::pow(v, e); }

template <typename Scalar>
struct MsSsimEvaluation {
  double value = 0.0;
  std::vector<SsimScale<Scalar>> scales;
  std::vector<double> weights;
};

template <typename Scalar>
MsSsimEvaluation<Scalar> ms_ssim_evaluate(const Image<Scalar>& x, const Image<Scalar>& y) {
  check_same_shape(x, y, "ms_ssim");
  const int m = ms_ssim_scale_count(x.rows(), x.cols());
  if (m == 0)
    throw DimensionError("ms_ssim: image " + shape_string(x.rows(), x.cols()) + " smaller than the " +
                         std::to_string(MsSsimParams::kWindow) + "x" + std::to_string(MsSsimParams::kWindow) +
                         " window");
  MsSsimEvaluation<Scalar> e;
  double wsum = 0.0;
  for (int i = 0; i < m; ++i) wsum += MsSsimParams::kWeights[i];
  Image<Scalar> xs = x, ys = y;
  e.value = 1.0;
  for (int i = 0; i < m; ++i) {
    e.weights.push_back(MsSsimParams::kWeights[i] / wsum);
    const bool last = i == m - 1;
    Image<Scalar> xn, yn;
    if (!last) {
      xn = downsample2(xs);
      yn = downsample2(ys);
    }
    e.scales.push_back(ssim_scale(std::move(xs), std::move(ys), last));
    e.value *= signed_pow(e.scales.back().mean_value, e.weights.back());
    xs = std::move(xn);
    ys = std::move(yn);
  }
  return e;
}

}  // namespace detail

/// Multi-scale structural similarity in (-1, 1]; 1 iff x == y.
template <typename Scalar>
Scalar ms_ssim(const Image<Scalar>& x, const Image<Scalar>& y) {
  return Scalar(detail::ms_ssim_evaluate(x, y).value);
}

/// d ms_ssim(x, y) / d y.
template <typename Scalar>
Image<Scalar> ms_ssim_gradient(const Image<Scalar>& x, const Image<Scalar>& y) {
  const auto e = detail::ms_ssim_evaluate(x, y);
  const int m = static_cast<int>(e.scales.size());
  std::vector<double> factors(m);
  for (int i = 0; i < m; ++i) factors[i] = detail::signed_pow(e.scales[i].mean_value, e.weights[i]);
  Image<Scalar> dy;
  for (int i = m - 1; i >= 0; --i) {
    double others = 1.0;
    for (int j = 0; j < m; ++j)
      if (j != i) others *= factors[j];
    const double v = std::max(std::abs(e.scales[i].mean_value), 1e-12);
    const double dfactor = e.weights[i] * std::pow(v, e.weights[i] - 1.0);
    Image<Scalar> g = detail::ssim_scale_backward(e.scales[i], i == m - 1, Scalar(others * dfactor));
    if (i < m - 1) g += detail::downsample2_adjoint(dy, g.rows(), g.cols());
    dy = std::move(g);
  }
  return dy;
}

// ---------------------------------------------------------------------------
// Structure: 1 - (ms_ssim(A,F) + ms_ssim(B,F)) / 2

template <typename Scalar>
Scalar structure_loss(const Image<Scalar>& f, const Image<Scalar>& a, const Image<Scalar>& b) {
  detail::check_same_shape(f, a, "structure_loss");
  detail::check_same_shape(f, b, "structure_loss");
  return Scalar(1) - Scalar(0.5) * (ms_ssim(a, f) + ms_ssim(b, f));
}

template <typename Scalar>
Image<Scalar> structure_loss_gradient(const Image<Scalar>& f, const Image<Scalar>& a, const Image<Scalar>& b) {
  return Scalar(-0.5) * (ms_ssim_gradient(a, f) + ms_ssim_gradient(b, f));
}

// ---------------------------------------------------------------------------

/// `a` is the MR source: only its gradients are matched.
template <typename Scalar>
LossBreakdown total_loss(const Image<Scalar>& f, const Image<Scalar>& a, const Image<Scalar>& b) {
  LossBreakdown l;
  l.intensity = double(intensity_loss(f, a, b));
  l.gradient = double(gradient_loss(f, a));
  l.structure = double(structure_loss(f, a, b));
  l.total = l.intensity + l.gradient + l.structure;
  return l;
}

template <typename Scalar>
Image<Scalar> total_loss_gradient(const Image<Scalar>& f, const Image<Scalar>& a, const Image<Scalar>& b) {
  return intensity_loss_gradient(f, a, b) + gradient_loss_gradient(f, a) + structure_loss_gradient(f, a, b);
}

/// Mean loss over a batch of fused maps (N x H x W x 1) against their sources
/// (N x H x W x 2, channel 0 = MR). Writes d(mean loss)/d(fused) into `grad`.
template <typename Scalar>
LossBreakdown batch_loss(const FeatureMap<Scalar>& fused, const FeatureMap<Scalar>& sources,
                         FeatureMap<Scalar>* grad = nullptr) {
  if (fused.batch != sources.batch || fused.height != sources.height || fused.width != sources.width ||
      fused.channels() != 1 || sources.channels() != 2)
    throw DimensionError("batch_loss: fused " + shape_string(fused) + " incompatible with sources " +
                         shape_string(sources));
  LossBreakdown mean;
  if (grad) *grad = FeatureMap<Scalar>(fused.batch, fused.height, fused.width, 1);
  const double inv = 1.0 / double(fused.batch);
  for (Index n = 0; n < fused.batch; ++n) {
    const Image<Scalar> f = fused.channel(0, n), a = sources.channel(0, n), b = sources.channel(1, n);
    const LossBreakdown l = total_loss(f, a, b);
    mean.intensity += inv * l.intensity;
    mean.gradient += inv * l.gradient;
    mean.structure += inv * l.structure;
    if (grad) grad->channel(0, n) = Scalar(inv) * total_loss_gradient(f, a, b);
  }
  mean.total = mean.intensity + mean.gradient + mean.structure;
  return mean;
}

}  // namespace wpfuse
