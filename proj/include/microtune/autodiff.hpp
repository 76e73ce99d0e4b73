#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "microtune/classifier.hpp"
#include "microtune/encoder.hpp"
#include "microtune/saliency.hpp"
#include "microtune/tokenfusion.hpp"

namespace microtune::autodiff {

using linalg::Matrix;
using linalg::Vec;

/// Everything the forward pass reads. Trainable: encoder LayerNorm affines,
/// w_llm_star and the pooling parameters. Frozen: the rest.
struct Model {
  encoder::EncoderWeights encoder;
  classifier::ClassifierBank bank;
  tokenfusion::PoolingParams pool;

  /// Named trainable tensors in a fixed order.
  std::vector<std::pair<std::string, Matrix*>> trainables(bool include_layer_norm);
  std::vector<std::pair<std::string, const Matrix*>> trainables(bool include_layer_norm) const;
  /// Every frozen tensor, including the frozen head and the projection.
  std::vector<std::pair<std::string, const Matrix*>> frozen() const;
  double frozen_checksum() const;
};

/// Gradients keyed by parameter name. A name that is absent has zero gradient.
class GradientBundle {
 public:
  Matrix& slot(const std::string& name, std::size_t rows, std::size_t cols);
  const Matrix* find(const std::string& name) const;
  bool contains(const std::string& name) const { return grads_.count(name) != 0; }
  const std::map<std::string, Matrix>& entries() const { return grads_; }

  void add(const GradientBundle& other);
  void scale(double s);
  /// Throws linalg::NumericError naming the first tensor with a non-finite entry.
  void check_finite() const;

 private:
  std::map<std::string, Matrix> grads_;
};

/// Value that contributes no gradient: the pseudo-label branch is evaluated
/// on copies wrapped in this type.
template <class T>
struct Detached {
  T value;
};
template <class T>
Detached<T> stop_gradient(const T& t) {
  return Detached<T>{t};
}

/// Gradient of 0.5 ||W||_F^2, i.e. W itself.
GradientBundle half_squared_norm_gradient(const std::string& name, const Matrix& w);

struct ForwardOptions {
  saliency::SaliencyOptions saliency;
  tokenfusion::FusionMode fusion = tokenfusion::FusionMode::kSymmetric;
  // When set, q_sal is treated as a constant in the backward pass.
  bool detach_query = false;
};

/// One image's forward pass with everything the backward pass needs.
struct ImageForward {
  bool has_encoder_tape = false;
  encoder::EncoderTape tape;
  encoder::TokenFeatures features;
  saliency::SaliencyPartition partition;
  tokenfusion::PoolTape pool_tape;
  tokenfusion::PoolResult pool;
  Vec z_fg;   // v_fg P
  Vec z_cls;  // v_cls P
  tokenfusion::FusedLogits logits;
};

/// Image-mode forward. With fixed_selection the NCut step is skipped and the
/// given token indices are used as the salient set.
ImageForward forward_image(const Model& model, const Image& image, const ForwardOptions& options,
                           const std::vector<std::size_t>* fixed_selection = nullptr);
/// Feature-mode forward from precomputed v_patch / v_cls.
ImageForward forward_tokens(const Model& model, encoder::TokenFeatures features, const ForwardOptions& options,
                            const std::vector<std::size_t>* fixed_selection = nullptr);

struct LossOptions {
  double temperature = 0.01;
  bool fairness = true;
  double clamp = 1e-12;
};

struct BatchLoss {
  double loss_st = 0.0;
  double loss_reg = 0.0;
  double total = 0.0;
  Matrix probs;  // B x C, softmax(fused / temperature)
  std::size_t clamped = 0;  // probabilities that hit the clamp
};

/// L = mean_b -log p_b[y_b] + (fairness ? -(1/C) sum_k log mean_b p_b[k] : 0).
BatchLoss batch_loss(const Matrix& fused, std::span<const std::size_t> labels, const LossOptions& options);
/// dL/d(fused logits), B x C.
Matrix loss_gradient(const BatchLoss& loss, std::span<const std::size_t> labels, const LossOptions& options);

/// Backward of one image given dL/d(fused). Layer-norm gradients are
/// produced only when the forward recorded an encoder tape and
/// train_layer_norm is set.
GradientBundle backward_image(const Model& model, const ImageForward& fwd, std::span<const double> dfused,
                              const ForwardOptions& options, bool train_layer_norm);

/// Encoder part of the backward pass: accumulates LayerNorm gradients given
/// dL/dv_patch and dL/dv_cls.
void encoder_backward(const encoder::EncoderWeights& w, const encoder::EncoderTape& tape, const Matrix& dv_patch,
                      std::span<const double> dv_cls, GradientBundle& grads);

/// Cosine-logit backward: logits_c = cos(z, W_c). Accumulates into dz and dw.
void cosine_logits_backward(std::span<const double> z, const Matrix& w, std::span<const double> dlogits,
                            std::span<double> dz, Matrix* dw);

}  // namespace microtune::autodiff
