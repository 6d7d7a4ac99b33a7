#pragma once

// 8-bit raster ingestion/export. PNG through libpng; binary PGM (P5) and
// PPM (P6) natively. Values are mapped to [0,1] on read and quantized with
// round(255 * clip(x, 0, 1)) on write.

#include <array>
#include <string>

#include "wpfuse/tensor.hpp"

namespace wpfuse {

/// Three planes R, G, B, each H x W in [0,1].
struct ColorImage {
  std::array<Image<float>, 3> rgb;

  Index height() const { return rgb[0].rows(); }
  Index width() const { return rgb[0].cols(); }
};

/// What was on disk: one plane (gray) or three (RGB). Alpha is dropped.
struct Raster {
  int channels = 0;
  Image<float> gray;  // valid when channels == 1
  ColorImage color;   // valid when channels == 3

  bool is_color() const { return channels == 3; }
  Index height() const { return is_color() ? color.height() : gray.rows(); }
  Index width() const { return is_color() ? color.width() : gray.cols(); }
};

/// Throws IoError for unreadable or malformed files and unsupported formats.
Raster read_image(const std::string& path);

/// Reads a file that must be single-channel. Color files throw ValidationError
/// naming the path.
Image<float> read_gray_image(const std::string& path);

/// Format is chosen by extension: .png, .pgm, .ppm. The file appears
/// atomically (temporary file + rename).
void write_image(const std::string& path, const Image<float>& gray);
void write_image(const std::string& path, const ColorImage& color);

}  // namespace wpfuse
