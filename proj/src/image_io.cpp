#include "wpfuse/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "wpfuse/errors.hpp"

namespace wpfuse {
namespace {

namespace fs = std::filesystem;

std::string lower_extension(const std::string& path) {
  std::string ext = fs::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

// Interleaved row-major 8-bit samples, as both codecs store them.
struct Bytes {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> samples;
};

Raster to_raster(const Bytes& b) {
  Raster r;
  r.channels = b.channels;
  auto plane = [&](int k) {
    Image<float> img(b.height, b.width);
    for (int y = 0; y < b.height; ++y)
      for (int x = 0; x < b.width; ++x)
        img(y, x) = float(b.samples[(std::size_t(y) * b.width + x) * b.channels + k]) / 255.0f;
    return img;
  };
  if (b.channels == 1) {
    r.gray = plane(0);
  } else {
    for (int k = 0; k < 3; ++k) r.color.rgb[k] = plane(k);
  }
  return r;
}

std::uint8_t quantize(float v) {
  if (!std::isfinite(v)) throw ValidationError("write_image: non-finite pixel value");
  return static_cast<std::uint8_t>(std::lround(255.0f * std::clamp(v, 0.0f, 1.0f)));
}

Bytes from_planes(const Image<float>* const* planes, int channels) {
  Bytes b;
  b.height = int(planes[0]->rows());
  b.width = int(planes[0]->cols());
  b.channels = channels;
  if (b.height == 0 || b.width == 0) throw DimensionError("write_image: empty image");
  b.samples.resize(std::size_t(b.height) * b.width * channels);
  for (int k = 0; k < channels; ++k) {
    if (planes[k]->rows() != b.height || planes[k]->cols() != b.width)
      throw DimensionError("write_image: color planes differ in size");
    for (int y = 0; y < b.height; ++y)
      for (int x = 0; x < b.width; ++x)
        b.samples[(std::size_t(y) * b.width + x) * channels + k] = quantize((*planes[k])(y, x));
  }
  return b;
}

// --- PNM --------------------------------------------------------------------

// Next header token, skipping whitespace and '#' comments.
std::string pnm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {}
    } else if (!std::isspace(c)) {
      tok.push_back(char(c));
      break;
    }
  }
  while ((c = in.peek()) != EOF && !std::isspace(c) && c != '#') tok.push_back(char(in.get()));
  return tok;
}

Bytes read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const std::string magic = pnm_token(in);
  if (magic != "P5" && magic != "P6") throw IoError(path + ": only binary PGM (P5) and PPM (P6) are supported");
  Bytes b;
  b.channels = magic == "P5" ? 1 : 3;
  int maxval = 0;
  try {
    b.width = std::stoi(pnm_token(in));
    b.height = std::stoi(pnm_token(in));
    maxval = std::stoi(pnm_token(in));
  } catch (const std::exception&) {
    throw IoError(path + ": malformed header");
  }
  if (b.width <= 0 || b.height <= 0) throw IoError(path + ": invalid dimensions");
  if (maxval != 255) throw IoError(path + ": only 8-bit (maxval 255) images are supported");
  in.get();  // single whitespace byte before the raster
  b.samples.resize(std::size_t(b.width) * b.height * b.channels);
  in.read(reinterpret_cast<char*>(b.samples.data()), std::streamsize(b.samples.size()));
  if (in.gcount() != std::streamsize(b.samples.size())) throw IoError(path + ": truncated raster");
  return b;
}

void write_pnm(const std::string& path, const Bytes& b) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << (b.channels == 1 ? "P5" : "P6") << "\n" << b.width << " " << b.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(b.samples.data()), std::streamsize(b.samples.size()));
  if (!out) throw IoError("write failed: " + path);
}

// --- PNG --------------------------------------------------------------------

Bytes read_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw IoError(path + ": " + image.message);
  Bytes b;
  b.width = int(image.width);
  b.height = int(image.height);
  b.channels = (image.format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
  image.format = b.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  b.samples.resize(PNG_IMAGE_SIZE(image));
  png_color black{0, 0, 0};
  if (!png_image_finish_read(&image, &black, b.samples.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError(path + ": " + msg);
  }
  return b;
}

void write_png(const std::string& path, const Bytes& b) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = png_uint_32(b.width);
  image.height = png_uint_32(b.height);
  image.format = b.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, b.samples.data(), 0, nullptr))
    throw IoError("cannot write " + path + ": " + image.message);
}

void write_bytes(const std::string& path, const Bytes& b) {
  const std::string ext = lower_extension(path);
  if (ext == ".pgm" && b.channels != 1) throw ValidationError(path + ": PGM holds grayscale only; use .ppm or .png");
  if (ext == ".ppm" && b.channels != 3) throw ValidationError(path + ": PPM holds color only; use .pgm or .png");
  if (ext != ".png" && ext != ".pgm" && ext != ".ppm")
    throw ValidationError(path + ": unsupported output extension (expected .png, .pgm or .ppm)");
  const std::string tmp = path + ".tmp";
  if (ext == ".png")
    write_png(tmp, b);
  else
    write_pnm(tmp, b);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move output into place: " + path);
  }
}

}  // namespace

Raster read_image(const std::string& path) {
  if (!fs::is_regular_file(path)) throw IoError("no such file: " + path);
  const std::string ext = lower_extension(path);
  if (ext == ".png") return to_raster(read_png(path));
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return to_raster(read_pnm(path));
  throw IoError(path + ": unsupported image format (expected .png, .pgm or .ppm)");
}

Image<float> read_gray_image(const std::string& path) {
  Raster r = read_image(path);
  if (r.is_color()) throw ValidationError(path + ": expected a grayscale image, got RGB");
  return std::move(r.gray);
}

void write_image(const std::string& path, const Image<float>& gray) {
  const Image<float>* planes[] = {&gray};
  write_bytes(path, from_planes(planes, 1));
}

void write_image(const std::string& path, const ColorImage& color) {
  const Image<float>* planes[] = {&color.rgb[0], &color.rgb[1], &color.rgb[2]};
  write_bytes(path, from_planes(planes, 3));
}

}  // namespace wpfuse
