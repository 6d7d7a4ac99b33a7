#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "wpfuse/errors.hpp"

namespace wpfuse {

using Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Single-channel raster, rows = height, cols = width. Intensities live in [0,1].
template <typename Scalar>
using Image = Matrix<Scalar>;

/// A batch of H x W x C feature maps.
///
/// Storage is one column per channel; within a column the samples are stacked
/// and each sample is a column-major H x W raster, so pixel (n, y, x) of
/// channel c lives at data(n*H*W + x*H + y, c). A channel of one sample can be
/// viewed in place as an Eigen H x W matrix through channel().
template <typename Scalar>
struct FeatureMap {
  using MatrixType = Matrix<Scalar>;
  using ImageMap = Eigen::Map<MatrixType>;
  using ConstImageMap = Eigen::Map<const MatrixType>;

  Index batch = 1;
  Index height = 0;
  Index width = 0;
  MatrixType data;

  FeatureMap() = default;
  FeatureMap(Index batch_, Index height_, Index width_, Index channels)
      : batch(batch_), height(height_), width(width_),
        data(MatrixType::Zero(batch_ * height_ * width_, channels)) {}

  static FeatureMap zeros(Index height, Index width, Index channels) {
    return FeatureMap(1, height, width, channels);
  }

  Index channels() const { return data.cols(); }
  Index pixels() const { return height * width; }

  ImageMap channel(Index c, Index n = 0) {
    return ImageMap(data.col(c).data() + n * pixels(), height, width);
  }
  ConstImageMap channel(Index c, Index n = 0) const {
    return ConstImageMap(data.col(c).data() + n * pixels(), height, width);
  }

  /// Rows of one sample: (H*W) x C.
  auto sample(Index n) { return data.middleRows(n * pixels(), pixels()); }
  auto sample(Index n) const { return data.middleRows(n * pixels(), pixels()); }

  Scalar& at(Index n, Index y, Index x, Index c) {
    return data(n * pixels() + x * height + y, c);
  }
  Scalar at(Index n, Index y, Index x, Index c) const {
    return data(n * pixels() + x * height + y, c);
  }

  bool same_shape(const FeatureMap& other) const {
    return batch == other.batch && height == other.height &&
           width == other.width && channels() == other.channels();
  }

  template <typename Other>
  FeatureMap<Other> cast() const {
    FeatureMap<Other> out;
    out.batch = batch;
    out.height = height;
    out.width = width;
    out.data = data.template cast<Other>();
    return out;
  }
};

/// Wraps a list of single-channel images as the channels of a one-sample map.
template <typename Scalar>
FeatureMap<Scalar> stack_channels(std::initializer_list<const Image<Scalar>*> images) {
  if (images.size() == 0) throw DimensionError("stack_channels: no images");
  const Index h = (*images.begin())->rows();
  const Index w = (*images.begin())->cols();
  FeatureMap<Scalar> out(1, h, w, static_cast<Index>(images.size()));
  Index c = 0;
  for (const Image<Scalar>* img : images) {
    if (img->rows() != h || img->cols() != w)
      throw DimensionError("stack_channels: image shapes differ");
    out.channel(c++) = *img;
  }
  return out;
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

inline std::string shape_string(Index h, Index w) {
  return std::to_string(h) + "x" + std::to_string(w);
}

template <typename Scalar>
std::string shape_string(const FeatureMap<Scalar>& x) {
  return std::to_string(x.batch) + "x" + std::to_string(x.height) + "x" +
         std::to_string(x.width) + "x" + std::to_string(x.channels());
}

}  // namespace wpfuse
