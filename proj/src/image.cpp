#include "microtune/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace microtune {

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string ignored;
      std::getline(in, ignored);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

std::size_t parse_size(const std::string& tok, const std::filesystem::path& path) {
  try {
    return static_cast<std::size_t>(std::stoul(tok));
  } catch (const std::exception&) {
    throw std::runtime_error("malformed PGM header in " + path.string());
  }
}

}  // namespace

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::string magic = next_token(in);
  if (magic != "P5" && magic != "P2") throw std::runtime_error("not a PGM file: " + path.string());
  const std::size_t w = parse_size(next_token(in), path);
  const std::size_t h = parse_size(next_token(in), path);
  const std::size_t maxval = parse_size(next_token(in), path);
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535)
    throw std::runtime_error("bad PGM dimensions in " + path.string());

  Image img(h, w);
  if (magic == "P2") {
    for (double& px : img.pixels) px = static_cast<double>(parse_size(next_token(in), path)) / maxval;
    return img;
  }
  const std::size_t bytes_per = maxval < 256 ? 1 : 2;
  std::vector<unsigned char> raw(w * h * bytes_per);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw std::runtime_error("truncated PGM data in " + path.string());
  for (std::size_t i = 0; i < w * h; ++i) {
    const unsigned v = bytes_per == 1 ? raw[i] : (raw[2 * i] << 8U) | raw[2 * i + 1];
    img.pixels[i] = static_cast<double>(v) / maxval;
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> raw(image.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double v = std::clamp(image.pixels[i], 0.0, 1.0);
    raw[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_pgm_plain(const std::filesystem::path& path, std::size_t height, std::size_t width,
                     const std::vector<int>& levels, int maxval) {
  if (levels.size() != height * width) throw std::invalid_argument("write_pgm_plain: size mismatch");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P2\n" << width << ' ' << height << '\n' << maxval << '\n';
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      out << levels[r * width + c] << (c + 1 == width ? '\n' : ' ');
    }
  }
}

Image crop_resize(const Image& image, double top, double left, double side, std::size_t out_side) {
  if (side <= 0.0 || out_side == 0) throw std::invalid_argument("crop_resize: empty window");
  Image out(out_side, out_side);
  const double scale = side / static_cast<double>(out_side);
  auto sample = [&](double y, double x) {
    y = std::clamp(y, 0.0, static_cast<double>(image.height - 1));
    x = std::clamp(x, 0.0, static_cast<double>(image.width - 1));
    const auto y0 = static_cast<std::size_t>(std::floor(y));
    const auto x0 = static_cast<std::size_t>(std::floor(x));
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const std::size_t x1 = std::min(x0 + 1, image.width - 1);
    const double fy = y - static_cast<double>(y0);
    const double fx = x - static_cast<double>(x0);
    return (1 - fy) * ((1 - fx) * image.at(y0, x0) + fx * image.at(y0, x1)) +
           fy * ((1 - fx) * image.at(y1, x0) + fx * image.at(y1, x1));
  };
  for (std::size_t r = 0; r < out_side; ++r) {
    const double y = top + (static_cast<double>(r) + 0.5) * scale - 0.5;
    for (std::size_t c = 0; c < out_side; ++c) {
      const double x = left + (static_cast<double>(c) + 0.5) * scale - 0.5;
      out.at(r, c) = sample(y, x);
    }
  }
  return out;
}

Image hflip(const Image& image) {
  Image out(image.height, image.width);
  for (std::size_t r = 0; r < image.height; ++r)
    for (std::size_t c = 0; c < image.width; ++c) out.at(r, c) = image.at(r, image.width - 1 - c);
  return out;
}

std::uint64_t stable_hash(std::string_view text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::mt19937_64 make_stream(std::uint64_t seed, std::string_view id, std::uint64_t epoch,
                            StreamPurpose purpose) {
  const std::uint64_t idh = stable_hash(id);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(idh), static_cast<std::uint32_t>(idh >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

}  // namespace microtune
