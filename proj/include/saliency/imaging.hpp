#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "saliency/tensor.hpp"

namespace saliency {

struct Preprocess;

/// 8-bit image with interleaved samples (row-major, channel fastest).
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Binary PPM (P6), binary PGM (P5) and PNG, chosen by file signature.
Image read_image(const std::filesystem::path& path);
/// P6/P5 for ".ppm"/".pgm" (by channel count), PNG for ".png".
void write_image(const Image& image, const std::filesystem::path& path);

Image decode_pnm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_pnm(const Image& image);

/// Bilinear resize with half-pixel sample centers (an exact 2x reduction
/// averages 2x2 blocks).
Image resize_bilinear(const Image& image, std::size_t width, std::size_t height);

/// [C,H,W] tensor of (sample/255 - mean_c)/std_c. A gray image is replicated
/// when the model expects three channels.
TensorD preprocess(const Image& image, const Preprocess& norm, std::size_t channels);

/// Five-stop ramp: 0 blue, 0.25 cyan, 0.5 green, 0.75 yellow, 1 red.
std::array<double, 3> colormap(double value);

/// (1 - alpha) * image + alpha * colormap(map), rounded half-up. The map must
/// match the image size; the result is always RGB.
Image render_overlay(const Image& image, const Grid& map, double alpha);

/// Maps [-m, m] to [0, 255] per sample with m = max|attr| over the whole
/// tensor, so zero renders as mid-gray (128).
Image render_attribution(const TensorD& attribution);

}  // namespace saliency
