#pragma once

// Central finite-difference check of the full batch objective against
// autodiff::backward_image. NCut selections stay at their forward values.

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "microtune/autodiff.hpp"
#include "oracle.hpp"

namespace microtune::testing {

using linalg::Matrix;

struct GradCheckReport {
  std::map<std::string, double> rel_error;  // per trainable tensor
  double worst = 0.0;
  std::string worst_name;
  bool frozen_zero = true;
};

struct GradCheckCase {
  autodiff::Model model;
  std::vector<Image> images;
  std::vector<std::size_t> labels;
  autodiff::ForwardOptions forward;
  autodiff::LossOptions loss;
  bool train_layer_norm = true;
};

/// Loss terms from pooling, head and loss evaluated by the long-double
/// reference. The loss runs at temperature 0.01, so rows saturate and the
/// gradient can be far smaller than the loss itself. Differencing term by
/// term keeps the finite difference above rounding noise.
inline oracle::RVec objective_from_features(const GradCheckCase& c, const std::vector<encoder::TokenFeatures>& feats,
                                      const std::vector<std::vector<std::size_t>>& selections) {
  oracle::RMat fused;
  for (std::size_t b = 0; b < feats.size(); ++b) {
    const auto& tf = feats[b];
    linalg::Vec q(tf.v_patch.cols(), 0.0);
    for (std::size_t j = 0; j < q.size(); ++j) {
      oracle::Real s = 0;
      for (std::size_t i : selections[b]) s += tf.v_patch(i, j);
      q[j] = static_cast<double>(s / selections[b].size());
    }
    const auto& pool = c.model.pool;
    const auto pooled = oracle::soap_pool(q, tf.v_patch, pool.wq, pool.wk, pool.wv, pool.empty_token);
    const auto f = oracle::fused_logits(pooled.v_fg, oracle::to_real(tf.v_cls), c.model.encoder.proj,
                                        c.model.bank.w_llm_star);
    switch (c.forward.fusion) {
      case tokenfusion::FusionMode::kSymmetric: fused.push_back(f.fused); break;
      case tokenfusion::FusionMode::kGlobalOnly: fused.push_back(f.global); break;
      case tokenfusion::FusionMode::kLocalOnly: fused.push_back(f.local); break;
    }
  }
  return oracle::self_training_loss_terms(fused, c.labels, c.loss.temperature, c.loss.fairness, c.loss.clamp);
}

/// Objective after re-running the encoder from `layer` on the recorded
/// layer inputs; exact for perturbations of that layer or later.
inline oracle::RVec objective_from_layer(const GradCheckCase& c, const std::vector<autodiff::ImageForward>& fwds,
                                   std::size_t layer, const std::vector<std::vector<std::size_t>>& selections) {
  std::vector<encoder::TokenFeatures> feats;
  for (const auto& f : fwds)
    feats.push_back(encoder::forward_features_from(f.tape.layers[layer].input, layer, c.model.encoder));
  return objective_from_features(c, feats, selections);
}

inline std::size_t layer_of(const std::string& name, std::size_t layers) {
  if (name.starts_with("encoder.ln_post")) return layers - 1;
  const auto start = std::string("encoder.layer").size();
  return std::stoul(name.substr(start, name.find('.', start) - start));
}

inline GradCheckReport run_gradcheck(GradCheckCase& c, double h = 1e-4, double abs_floor = 1e-8) {
  const std::size_t B = c.images.size();
  std::vector<autodiff::ImageForward> fwds;
  std::vector<std::vector<std::size_t>> selections;
  Matrix fused(B, c.model.bank.classes());
  for (std::size_t b = 0; b < B; ++b) {
    fwds.push_back(autodiff::forward_image(c.model, c.images[b], c.forward));
    selections.push_back(fwds.back().partition.selected);
    std::copy(fwds[b].logits.fused.begin(), fwds[b].logits.fused.end(), fused.row(b).begin());
  }
  const auto loss = autodiff::batch_loss(fused, c.labels, c.loss);
  const Matrix dfused = autodiff::loss_gradient(loss, c.labels, c.loss);
  autodiff::GradientBundle grads;
  for (std::size_t b = 0; b < B; ++b)
    grads.add(autodiff::backward_image(c.model, fwds[b], dfused.row(b), c.forward, c.train_layer_norm));

  GradCheckReport report;
  for (const auto& [name, g] : grads.entries()) {
    bool trainable = false;
    for (const auto& [tname, _] : c.model.trainables(c.train_layer_norm)) trainable |= tname == name;
    if (!trainable && linalg::frobenius(g) != 0.0) report.frozen_zero = false;
  }

  std::vector<encoder::TokenFeatures> feats;
  for (const auto& f : fwds) feats.push_back(f.features);

  for (auto& [name, param] : c.model.trainables(c.train_layer_norm)) {
    const bool encoder_param = name.starts_with("encoder.");
    Matrix fd(param->rows(), param->cols());
    for (std::size_t i = 0; i < param->size(); ++i) {
      const double orig = param->data()[i];
      param->data()[i] = orig + h;
      auto eval = [&] {
        return encoder_param ? objective_from_layer(c, fwds, layer_of(name, c.model.encoder.layers.size()), selections)
                             : objective_from_features(c, feats, selections);
      };
      const auto up = eval();
      const double hi = param->data()[i];
      param->data()[i] = orig - h;
      const auto down = eval();
      const double lo = param->data()[i];
      param->data()[i] = orig;
      oracle::Real delta = 0;
      for (std::size_t k = 0; k < up.size(); ++k) delta += up[k] - down[k];
      fd.data()[i] = static_cast<double>(delta / (static_cast<oracle::Real>(hi) - lo));
    }
    const Matrix* an = grads.find(name);
    Matrix analytic = an ? *an : Matrix(param->rows(), param->cols());
    double diff = 0.0;
    for (std::size_t i = 0; i < fd.size(); ++i) diff += std::pow(fd.data()[i] - analytic.data()[i], 2);
    diff = std::sqrt(diff);
    const double denom = std::max({linalg::frobenius(fd), linalg::frobenius(analytic), abs_floor});
    const double rel = diff / denom;
    report.rel_error[name] = rel;
    if (rel >= report.worst) {
      report.worst = rel;
      report.worst_name = name;
    }
  }
  return report;
}

}  // namespace microtune::testing
