#include "microtune/pseudolabel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace microtune::pseudolabel {

CropSet multi_crop(const Image& image, std::size_t n_crops, double a, double b, std::mt19937_64& rng,
                   std::size_t out_side, std::size_t min_side) {
  if (!(a > 0.0 && a <= b && b <= 1.0)) throw std::invalid_argument("multi_crop: need 0 < a <= b <= 1");
  const std::size_t short_side = std::min(image.height, image.width);
  if (short_side < min_side) {
    throw std::invalid_argument("multi_crop: image " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + " is smaller than the encoder minimum " +
                                std::to_string(min_side));
  }
  std::uniform_real_distribution<double> scale_dist(a, b);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  CropSet out;
  out.windows.reserve(n_crops);
  out.views.reserve(n_crops);
  for (std::size_t i = 0; i < n_crops; ++i) {
    CropWindow w;
    w.scale = a == b ? a : scale_dist(rng);
    w.side = w.scale * static_cast<double>(short_side);
    w.top = unit(rng) * (static_cast<double>(image.height) - w.side);
    w.left = unit(rng) * (static_cast<double>(image.width) - w.side);
    out.views.push_back(crop_resize(image, w.top, w.left, w.side, out_side));
    out.windows.push_back(w);
  }
  return out;
}

Vec crop_weights(std::span<const double> f_global, const Matrix& f_crops) {
  if (f_crops.rows() == 0) throw std::invalid_argument("crop_weights: no crops");
  Vec sims(f_crops.rows());
  for (std::size_t i = 0; i < sims.size(); ++i) sims[i] = linalg::cosine_sim(f_global, f_crops.row(i));
  return linalg::softmax(sims);
}

Vec aggregate_views(const Matrix& f_crops, std::span<const double> weights) {
  if (weights.size() != f_crops.rows()) throw std::invalid_argument("aggregate_views: weight count mismatch");
  return linalg::vec_mat(weights, f_crops);
}

Vec clip_pseudo_logits(std::span<const double> f_agg, const classifier::ClassifierBank& bank) {
  Vec out(bank.classes());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = linalg::cosine_sim(f_agg, bank.w_llm.row(c));
  return out;
}

BlendMode parse_blend_mode(const std::string& text) {
  if (text == "raw") return BlendMode::kRaw;
  if (text == "softmax") return BlendMode::kSoftmax;
  throw std::invalid_argument("unknown blend mode '" + text + "' (raw|softmax)");
}

std::string to_string(BlendMode mode) { return mode == BlendMode::kRaw ? "raw" : "softmax"; }

std::size_t argmax_lowest(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

PseudoLabelDecision dynamic_aggregate(std::span<const double> p, std::span<const double> t, double gamma,
                                      BlendMode mode, double temperature) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("dynamic_aggregate: gamma must lie in [0, 1]");
  if (p.size() != t.size() || p.empty()) throw std::invalid_argument("dynamic_aggregate: logit length mismatch");
  PseudoLabelDecision d;
  d.pseudo_logits_clip.assign(p.begin(), p.end());
  d.tokenfusion_logits.assign(t.begin(), t.end());
  d.gamma = gamma;
  Vec ps = d.pseudo_logits_clip;
  Vec ts = d.tokenfusion_logits;
  if (mode == BlendMode::kSoftmax) {
    for (double& x : ps) x /= temperature;
    for (double& x : ts) x /= temperature;
    ps = linalg::softmax(ps);
    ts = linalg::softmax(ts);
  }
  d.blended.resize(p.size());
  for (std::size_t c = 0; c < p.size(); ++c) d.blended[c] = gamma * ps[c] + (1.0 - gamma) * ts[c];
  d.label = argmax_lowest(d.blended);
  double runner_up = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < p.size(); ++c)
    if (c != d.label) runner_up = std::max(runner_up, d.blended[c]);
  d.margin = p.size() > 1 ? d.blended[d.label] - runner_up : 0.0;
  return d;
}

}  // namespace microtune::pseudolabel
