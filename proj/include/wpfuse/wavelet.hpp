#pragma once

// Single-level 2D orthonormal Haar analysis/synthesis on feature maps.
//
// For a 2x2 block [a b; c d] (rows y, 2y+1; cols x, 2x+1):
//   LL = (a + b + c + d) / 2      LH = (a + b - c - d) / 2
//   HL = (a - b + c - d) / 2      HH = (a - b - c + d) / 2
// The transform is orthonormal, so synthesis is the transpose of analysis.

#include <Eigen/Dense>

#include "wpfuse/errors.hpp"
#include "wpfuse/tensor.hpp"

namespace wpfuse {

template <typename Scalar>
struct SubbandSet {
  FeatureMap<Scalar> ll, lh, hl, hh;
  Index source_height = 0;
  Index source_width = 0;
};

namespace detail {

template <typename Scalar>
using StridedMap =
    Eigen::Map<Matrix<Scalar>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
template <typename Scalar>
using ConstStridedMap =
    Eigen::Map<const Matrix<Scalar>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;

// Polyphase view of a column-major h x w raster: the (dy, dx) corner of every 2x2 block.
template <typename Scalar>
ConstStridedMap<Scalar> phase(const Scalar* base, Index h, Index w, int dy, int dx) {
  return ConstStridedMap<Scalar>(base + dx * h + dy, h / 2, w / 2,
                                 Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(2 * h, 2));
}
template <typename Scalar>
StridedMap<Scalar> phase(Scalar* base, Index h, Index w, int dy, int dx) {
  return StridedMap<Scalar>(base + dx * h + dy, h / 2, w / 2,
                            Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(2 * h, 2));
}

template <typename Scalar>
void check_subbands(const SubbandSet<Scalar>& s) {
  const auto& r = s.ll;
  if (!r.same_shape(s.lh) || !r.same_shape(s.hl) || !r.same_shape(s.hh))
    throw DimensionError("idwt2: subband shapes differ");
  if (s.source_height != 2 * r.height || s.source_width != 2 * r.width)
    throw DimensionError("idwt2: subband size " + shape_string(r.height, r.width) +
                         " inconsistent with source " +
                         shape_string(s.source_height, s.source_width));
}

}  // namespace detail

template <typename Scalar>
SubbandSet<Scalar> dwt2(const FeatureMap<Scalar>& x) {
  if (x.height < 2 || x.width < 2 || x.height % 2 != 0 || x.width % 2 != 0)
    throw DimensionError("dwt2: height and width must be even and >= 2, got " +
                         shape_string(x.height, x.width));
  if (!all_finite(x.data)) throw ValidationError("dwt2: non-finite input");

  const Index h = x.height, w = x.width, hh = h / 2, hw = w / 2;
  const Index ch = x.channels();
  SubbandSet<Scalar> s;
  s.source_height = h;
  s.source_width = w;
  s.ll = FeatureMap<Scalar>(x.batch, hh, hw, ch);
  s.lh = s.ll;
  s.hl = s.ll;
  s.hh = s.ll;
  const Scalar half = Scalar(0.5);
  for (Index n = 0; n < x.batch; ++n) {
    for (Index c = 0; c < ch; ++c) {
      const Scalar* base = x.channel(c, n).data();
      const auto a = detail::phase(base, h, w, 0, 0);
      const auto b = detail::phase(base, h, w, 0, 1);
      const auto cc = detail::phase(base, h, w, 1, 0);
      const auto d = detail::phase(base, h, w, 1, 1);
      s.ll.channel(c, n) = half * (a + b + cc + d);
      s.lh.channel(c, n) = half * (a + b - cc - d);
      s.hl.channel(c, n) = half * (a - b + cc - d);
      s.hh.channel(c, n) = half * (a - b - cc + d);
    }
  }
  return s;
}

template <typename Scalar>
FeatureMap<Scalar> idwt2(const SubbandSet<Scalar>& s) {
  detail::check_subbands(s);
  const Index h = s.source_height, w = s.source_width;
  const Index ch = s.ll.channels();
  FeatureMap<Scalar> x(s.ll.batch, h, w, ch);
  const Scalar half = Scalar(0.5);
  for (Index n = 0; n < x.batch; ++n) {
    for (Index c = 0; c < ch; ++c) {
      const auto ll = s.ll.channel(c, n);
      const auto lh = s.lh.channel(c, n);
      const auto hl = s.hl.channel(c, n);
      const auto hh = s.hh.channel(c, n);
      Scalar* base = x.channel(c, n).data();
      detail::phase(base, h, w, 0, 0) = half * (ll + lh + hl + hh);
      detail::phase(base, h, w, 0, 1) = half * (ll + lh - hl - hh);
      detail::phase(base, h, w, 1, 0) = half * (ll - lh + hl - hh);
      detail::phase(base, h, w, 1, 1) = half * (ll - lh - hl + hh);
    }
  }
  return x;
}

/// Synthesis from LL alone (detail bands zeroed).
template <typename Scalar>
FeatureMap<Scalar> lowpass_component(const SubbandSet<Scalar>& s) {
  detail::check_subbands(s);
  SubbandSet<Scalar> low = s;
  low.lh.data.setZero();
  low.hl.data.setZero();
  low.hh.data.setZero();
  return idwt2(low);
}

/// Synthesis from LH, HL, HH (LL zeroed).
template <typename Scalar>
FeatureMap<Scalar> highpass_component(const SubbandSet<Scalar>& s) {
  detail::check_subbands(s);
  SubbandSet<Scalar> high = s;
  high.ll.data.setZero();
  return idwt2(high);
}

/// lowpass_component(dwt2(x)) in one pass: with the Haar basis the LL-only
/// synthesis replaces every 2x2 block by its mean. Orthogonal projector, so it
/// is also its own adjoint.
template <typename Scalar>
FeatureMap<Scalar> lowpass_projection(const FeatureMap<Scalar>& x) {
  if (x.height < 2 || x.width < 2 || x.height % 2 != 0 || x.width % 2 != 0)
    throw DimensionError("lowpass_projection: height and width must be even and >= 2, got " +
                         shape_string(x.height, x.width));
  const Index h = x.height, w = x.width;
  FeatureMap<Scalar> out(x.batch, h, w, x.channels());
  Matrix<Scalar> mean(h / 2, w / 2);
  for (Index n = 0; n < x.batch; ++n) {
    for (Index c = 0; c < x.channels(); ++c) {
      const Scalar* src = x.channel(c, n).data();
      mean = Scalar(0.25) * (detail::phase(src, h, w, 0, 0) + detail::phase(src, h, w, 0, 1) +
                             detail::phase(src, h, w, 1, 0) + detail::phase(src, h, w, 1, 1));
      Scalar* dst = out.channel(c, n).data();
      for (int k = 0; k < 4; ++k) detail::phase(dst, h, w, k / 2, k % 2) = mean;
    }
  }
  return out;
}

/// Pads odd heights/widths by one mirrored row/column so dwt2 can be applied
/// outside the network. Even dimensions are returned unchanged.
template <typename Scalar>
FeatureMap<Scalar> pad_to_even(const FeatureMap<Scalar>& x) {
  const Index h = x.height + (x.height % 2), w = x.width + (x.width % 2);
  if (h == x.height && w == x.width) return x;
  FeatureMap<Scalar> out(x.batch, h, w, x.channels());
  for (Index n = 0; n < x.batch; ++n) {
    for (Index c = 0; c < x.channels(); ++c) {
      auto dst = out.channel(c, n);
      dst.topLeftCorner(x.height, x.width) = x.channel(c, n);
      if (h != x.height) dst.row(h - 1).head(x.width) = dst.row(h - 2).head(x.width);
      if (w != x.width) dst.col(w - 1) = dst.col(w - 2);
    }
  }
  return out;
}

/// Inverse of pad_to_even.
template <typename Scalar>
FeatureMap<Scalar> crop(const FeatureMap<Scalar>& x, Index height, Index width) {
  if (height > x.height || width > x.width) throw DimensionError("crop: target larger than source");
  FeatureMap<Scalar> out(x.batch, height, width, x.channels());
  for (Index n = 0; n < x.batch; ++n)
    for (Index c = 0; c < x.channels(); ++c)
      out.channel(c, n) = x.channel(c, n).topLeftCorner(height, width);
  return out;
}

}  // namespace wpfuse
