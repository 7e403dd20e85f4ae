#include "saliency/imaging.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "saliency/model_io.hpp"

namespace saliency {

namespace {

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::IoError, "failed writing '" + path.string() + "'");
}

class PnmHeaderReader {
 public:
  explicit PnmHeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t number(const char* what) {
    skip_space_and_comments();
    if (pos_ >= bytes_.size()) throw Error(ErrorKind::TruncatedFile, std::string("PNM header ends before ") + what);
    if (!std::isdigit(bytes_[pos_])) throw Error(ErrorKind::FormatError, std::string("PNM header: bad ") + what);
    std::size_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + static_cast<std::size_t>(bytes_[pos_++] - '0');
      if (value > (1u << 16)) throw Error(ErrorKind::FormatError, std::string("PNM header: ") + what + " too large");
    }
    return value;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size()) throw Error(ErrorKind::TruncatedFile, "PNM header ends before raster");
    if (!std::isspace(bytes_[pos_])) throw Error(ErrorKind::FormatError, "PNM header: missing separator");
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 2;
};

Image decode_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw Error(ErrorKind::FormatError, "cannot decode PNG '" + path.string() + "': " + png.message);
  }
  const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image image(png.width, png.height, gray ? 1 : 3);
  if (!png_image_finish_read(&png, nullptr, image.pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw Error(ErrorKind::TruncatedFile, "cannot decode PNG '" + path.string() + "': " + png.message);
  }
  return image;
}

void encode_png(const Image& image, const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw Error(ErrorKind::IoError, "cannot write PNG '" + path.string() + "': " + png.message);
  }
}

std::uint8_t round_to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
}

void check_image(const Image& image) {
  if ((image.channels != 1 && image.channels != 3) || image.width == 0 || image.height == 0 ||
      image.pixels.size() != image.width * image.height * image.channels) {
    throw Error(ErrorKind::InvalidArgument, "malformed image buffer");
  }
}

}  // namespace

Image decode_pnm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2) throw Error(ErrorKind::TruncatedFile, "file too short for a PNM header");
  if (bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5')) {
    throw Error(ErrorKind::UnsupportedFormat, "only binary PPM (P6) and PGM (P5) are supported");
  }
  const std::size_t channels = bytes[1] == '6' ? 3 : 1;
  PnmHeaderReader header(bytes);
  const std::size_t width = header.number("width");
  const std::size_t height = header.number("height");
  const std::size_t maxval = header.number("maxval");
  if (width == 0 || height == 0) throw Error(ErrorKind::FormatError, "PNM image has a zero extent");
  if (maxval != 255) throw Error(ErrorKind::UnsupportedFormat, "only 8-bit PNM (maxval 255) is supported");
  const std::size_t start = header.raster_start();
  const std::size_t need = width * height * channels;
  if (bytes.size() - start < need) {
    throw Error(ErrorKind::TruncatedFile, "PNM raster has " + std::to_string(bytes.size() - start) +
                                              " bytes, expected " + std::to_string(need));
  }
  Image image(width, height, channels);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(start), need, image.pixels.begin());
  return image;
}

std::vector<std::uint8_t> encode_pnm(const Image& image) {
  check_image(image);
  const std::string header = std::string(image.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(image.width) +
                             " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

Image read_image(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  static constexpr std::uint8_t kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(std::begin(kPngSignature), std::end(kPngSignature), bytes.begin())) {
    return decode_png(path);
  }
  return decode_pnm(bytes);
}

void write_image(const Image& image, const std::filesystem::path& path) {
  check_image(image);
  const auto ext = path.extension().string();
  if (ext == ".png") {
    encode_png(image, path);
  } else if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") {
    dump(encode_pnm(image), path);
  } else {
    throw Error(ErrorKind::UnsupportedFormat, "cannot infer image format from '" + path.string() + "'");
  }
}

Image resize_bilinear(const Image& image, std::size_t width, std::size_t height) {
  check_image(image);
  if (width == 0 || height == 0) throw Error(ErrorKind::InvalidArgument, "resize target must be non-empty");
  Image out(width, height, image.channels);
  auto source = [](std::size_t i, std::size_t out_n, std::size_t in_n) {
    const double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in_n) / static_cast<double>(out_n) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in_n - 1));
  };
  for (std::size_t y = 0; y < height; ++y) {
    const double sy = source(y, height, image.height);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double ty = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double sx = source(x, width, image.width);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double tx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < image.channels; ++c) {
        const double top = image.at(y0, x0, c) * (1.0 - tx) + image.at(y0, x1, c) * tx;
        const double bottom = image.at(y1, x0, c) * (1.0 - tx) + image.at(y1, x1, c) * tx;
        out.at(y, x, c) = round_to_byte(top * (1.0 - ty) + bottom * ty);
      }
    }
  }
  return out;
}

TensorD preprocess(const Image& image, const Preprocess& norm, std::size_t channels) {
  check_image(image);
  if (image.channels != channels && !(image.channels == 1 && channels == 3)) {
    throw Error(ErrorKind::InvalidArgument, "image has " + std::to_string(image.channels) +
                                                " channels, model expects " + std::to_string(channels));
  }
  if (norm.mean.size() != channels || norm.std.size() != channels) {
    throw Error(ErrorKind::InvalidArgument, "normalization needs one mean/std per channel");
  }
  TensorD out({channels, image.height, image.width});
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t src_c = image.channels == 1 ? 0 : c;
    for (std::size_t y = 0; y < image.height; ++y) {
      for (std::size_t x = 0; x < image.width; ++x) {
        out[(c * image.height + y) * image.width + x] =
            (image.at(y, x, src_c) / 255.0 - norm.mean[c]) / norm.std[c];
      }
    }
  }
  return out;
}

std::array<double, 3> colormap(double value) {
  static constexpr std::array<std::array<double, 3>, 5> kStops = {{
      {0, 0, 255},
      {0, 255, 255},
      {0, 255, 0},
      {255, 255, 0},
      {255, 0, 0},
  }};
  const double v = std::isfinite(value) ? std::clamp(value, 0.0, 1.0) : 0.0;
  const double pos = v * 4.0;
  const auto lo = std::min<std::size_t>(static_cast<std::size_t>(pos), 3);
  const double t = pos - static_cast<double>(lo);
  std::array<double, 3> rgb{};
  for (std::size_t c = 0; c < 3; ++c) rgb[c] = kStops[lo][c] + t * (kStops[lo + 1][c] - kStops[lo][c]);
  return rgb;
}

Image render_overlay(const Image& image, const Grid& map, double alpha) {
  check_image(image);
  if (map.rows != image.height || map.cols != image.width) {
    throw Error(ErrorKind::ShapeMismatch, "heatmap " + std::to_string(map.rows) + "x" + std::to_string(map.cols) +
                                              " does not match image " + std::to_string(image.height) + "x" +
                                              std::to_string(image.width));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorKind::InvalidArgument, "overlay alpha must lie in [0,1]");
  Image out(image.width, image.height, 3);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const auto rgb = colormap(map(y, x));
      for (std::size_t c = 0; c < 3; ++c) {
        const double base = image.at(y, x, image.channels == 1 ? 0 : c);
        out.at(y, x, c) = round_to_byte((1.0 - alpha) * base + alpha * rgb[c]);
      }
    }
  }
  return out;
}

Image render_attribution(const TensorD& attribution) {
  if (attribution.rank() != 3) {
    throw Error(ErrorKind::ShapeMismatch, "attribution must be [C,H,W], got " + shape_to_string(attribution.shape()));
  }
  const std::size_t channels = attribution.dim(0), height = attribution.dim(1), width = attribution.dim(2);
  const std::size_t area = height * width;
  // Anything other than gray or RGB is shown as the channel sum.
  TensorD planes = attribution;
  if (channels != 1 && channels != 3) {
    planes = TensorD({1, height, width});
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < area; ++i) planes[i] += attribution[c * area + i];
    }
  }
  const std::size_t out_c = planes.dim(0);
  double peak = 0.0;
  for (double v : planes.data()) peak = std::max(peak, std::abs(v));

  Image out(width, height, out_c);
  for (std::size_t c = 0; c < out_c; ++c) {
    for (std::size_t i = 0; i < area; ++i) {
      const double v = peak > 0.0 ? planes[c * area + i] / peak : 0.0;
      out.pixels[i * out_c + c] = round_to_byte(127.5 + 127.5 * v);
    }
  }
  return out;
}

}  // namespace saliency
