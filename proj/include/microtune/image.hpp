#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string_view>
#include <vector>

namespace microtune {

/// Single-channel raster with intensities in [0, 1], row-major.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w, fill) {}

  double& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
  double at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
};

/// Reads binary (P5) or plain (P2) graymaps; values are scaled by maxval.
Image read_pgm(const std::filesystem::path& path);
/// Writes an 8-bit binary graymap; values are clamped to [0, 1].
void write_pgm(const std::filesystem::path& path, const Image& image);
/// Plain-text graymap of integer levels, used for saliency masks.
void write_pgm_plain(const std::filesystem::path& path, std::size_t height, std::size_t width,
                     const std::vector<int>& levels, int maxval);

/// Bilinear resample of the square window [top, top + side) x [left, left + side)
/// onto an out_side x out_side grid. Samples are taken at pixel centres.
Image crop_resize(const Image& image, double top, double left, double side, std::size_t out_side);
Image hflip(const Image& image);

// Deterministic random streams keyed by (seed, image id, epoch, purpose).
enum class StreamPurpose : std::uint32_t {
  kMultiCrop = 1,
  kStrongAugment = 2,
  kShuffle = 3,
  kSynth = 4,
  kInit = 5,
};

std::uint64_t stable_hash(std::string_view text);
std::mt19937_64 make_stream(std::uint64_t seed, std::string_view id, std::uint64_t epoch,
                            StreamPurpose purpose);

}  // namespace microtune
