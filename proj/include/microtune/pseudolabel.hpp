#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "microtune/classifier.hpp"
#include "microtune/image.hpp"

namespace microtune::pseudolabel {

using linalg::Matrix;
using linalg::Vec;

struct CropWindow {
  double top = 0.0;
  double left = 0.0;
  double side = 0.0;
  double scale = 1.0;  // side / min(H, W)
};

struct CropSet {
  std::vector<CropWindow> windows;
  std::vector<Image> views;  // each out_side x out_side
};

/// N square crops of side lambda * min(H, W), lambda ~ U(a, b), at a uniform
/// position, each resampled to out_side. Throws when min(H, W) < min_side.
CropSet multi_crop(const Image& image, std::size_t n_crops, double a, double b, std::mt19937_64& rng,
                   std::size_t out_side, std::size_t min_side);

/// w_i = softmax_i(cos(f, f_i)).
Vec crop_weights(std::span<const double> f_global, const Matrix& f_crops);
/// sum_i w_i f_i
Vec aggregate_views(const Matrix& f_crops, std::span<const double> weights);
/// Cosine of f_agg against every row of the frozen head.
Vec clip_pseudo_logits(std::span<const double> f_agg, const classifier::ClassifierBank& bank);

/// kRaw blends the cosine logits as they are; kSoftmax blends
/// softmax(logits / temperature) of each source instead.
enum class BlendMode { kRaw, kSoftmax };
BlendMode parse_blend_mode(const std::string& text);
std::string to_string(BlendMode mode);

struct PseudoLabelDecision {
  Vec pseudo_logits_clip;
  Vec tokenfusion_logits;
  double gamma = 0.5;
  Vec blended;
  std::size_t label = 0;
  double margin = 0.0;  // top blended score minus runner-up
};

/// blended = gamma p + (1 - gamma) t; label is the argmax, ties to the
/// lowest index.
PseudoLabelDecision dynamic_aggregate(std::span<const double> p, std::span<const double> t, double gamma,
                                      BlendMode mode = BlendMode::kRaw, double temperature = 0.01);

std::size_t argmax_lowest(std::span<const double> v);

}  // namespace microtune::pseudolabel
