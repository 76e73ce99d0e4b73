#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "microtune/autodiff.hpp"
#include "microtune/features.hpp"
#include "microtune/pseudolabel.hpp"

namespace microtune::trainer {

using linalg::Matrix;
using linalg::Vec;

enum class DataMode { kImage, kFeature };
/// Head the multi-view pseudo-logits are scored against: the frozen copy,
/// or the evolving learnable one.
enum class PlSource { kFrozen, kShared };

DataMode parse_data_mode(const std::string& text);
std::string to_string(DataMode mode);
PlSource parse_pl_source(const std::string& text);
std::string to_string(PlSource source);

struct AugmentOptions {
  double scale_min = 0.6;  // area fraction of the random resized crop
  double scale_max = 1.0;
  double flip_p = 0.5;
  double noise_sigma = 0.05;
};

struct TrainConfig {
  std::size_t epochs = 15;
  std::size_t batch = 16;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 7;
  DataMode mode = DataMode::kImage;

  double gamma = 0.5;
  std::size_t crops = 8;
  double crop_min = 0.5;
  double crop_max = 0.9;
  pseudolabel::BlendMode blend = pseudolabel::BlendMode::kRaw;
  PlSource pl_source = PlSource::kFrozen;
  // Reuse each image's multi-view pseudo-logits for a whole epoch.
  bool pl_cache_per_epoch = false;

  autodiff::ForwardOptions forward;
  autodiff::LossOptions loss;
  AugmentOptions augment;
  bool train_layer_norm = true;  // forced off in feature mode
  std::size_t threads = 1;

  void validate() const;
};

/// One dataset entry. Image mode holds the raster; feature mode holds the
/// MCFT records [weak, crop_1..crop_N, strong?].
struct Sample {
  std::string id;
  int label = -1;
  Image image;
  std::vector<encoder::PatchTokenGrid> records;
};

struct Dataset {
  DataMode mode = DataMode::kImage;
  std::vector<Sample> samples;

  bool labeled() const;
};

Dataset load_dataset(const std::filesystem::path& manifest, DataMode mode);

/// Both heads from the description set, identity pooling, toy encoder.
autodiff::Model build_model(const encoder::EncoderConfig& encoder_config, std::uint64_t encoder_seed,
                            const classifier::DescriptionEmbeddingSet& descriptions,
                            const classifier::InitOptions& init = {});

/// Random resized crop (area fraction in [scale_min, scale_max], square),
/// horizontal flip, additive Gaussian noise, clamped to [0, 1].
Image strong_augment(const Image& image, std::mt19937_64& rng, const AugmentOptions& options);

/// base * (1 + cos(pi t / T)) / 2
double cosine_lr(double base, std::uint64_t step, std::uint64_t total_steps);

double self_training_loss(std::span<const double> probs, std::size_t label, double clamp = 1e-12);
double fairness_loss(const Matrix& batch_probs, double clamp = 1e-12);

struct TrainState {
  autodiff::Model model;
  TrainConfig config;
  std::map<std::string, Matrix> moment1;
  std::map<std::string, Matrix> moment2;
  std::uint64_t step = 0;
  std::uint64_t total_steps = 0;
  std::size_t epoch = 0;  // completed epochs
};

TrainState init_state(autodiff::Model model, const TrainConfig& config, std::size_t train_size);

/// Decoupled-weight-decay Adam update of every tensor present in `grads`.
void adamw_step(TrainState& state, const autodiff::GradientBundle& grads, double lr);

struct AuditRow {
  std::size_t epoch = 0;
  std::string image_id;
  std::size_t label = 0;
  double margin = 0.0;
  double gamma = 0.0;
  std::size_t clip_argmax = 0;
  std::size_t tf_argmax = 0;
  int true_label = -1;
};

/// Pseudo-label of one sample under stop-gradient semantics. `epoch` keys
/// the multi-crop stream.
pseudolabel::PseudoLabelDecision pseudo_label(const autodiff::Model& model, const Sample& sample,
                                              const TrainConfig& config, std::size_t epoch);

/// Weak-view forward with the configured fusion mode.
tokenfusion::FusedLogits predict(const autodiff::Model& model, const Sample& sample, const TrainConfig& config);

/// Weak-view forward of one sample with every intermediate kept (saliency
/// partition, attention), for inspection and export.
autodiff::ImageForward forward_weak(const autodiff::Model& model, const Sample& sample, const TrainConfig& config);

/// Top-1 of fused-logit argmax on a labeled split. Throws on an empty split.
double evaluate(const autodiff::Model& model, const Dataset& data, const TrainConfig& config);

/// Pseudo-labels for every sample with the current model (no update).
/// Returns accuracy against ground truth (or -1 when unlabeled).
double pseudo_label_pass(const autodiff::Model& model, const Dataset& data, const TrainConfig& config,
                         std::size_t epoch, std::vector<AuditRow>* audit);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double loss_st = 0.0;
  double loss_reg = 0.0;
  double lr = 0.0;
  double pl_accuracy = -1.0;
  double eval_top1 = -1.0;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One pass of self-training over `data`. Throws NonFiniteLoss on a NaN or
/// infinite loss or gradient before touching the parameters.
EpochMetrics train_epoch(TrainState& state, const Dataset& data, std::vector<AuditRow>* audit);

void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const EpochMetrics& m);
void write_audit_header(std::ostream& out);
void write_audit_rows(std::ostream& out, const std::vector<AuditRow>& rows);

// Checkpoint ("MCCK"): magic, u32 version, u32 n_meta, n_meta x (key, value)
// strings, u32 n_tensors, n_tensors x (name, u32 rows, u32 cols, f64 data).
inline constexpr std::uint32_t kMcckVersion = 1;

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::map<std::string, Matrix> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const TrainState& state,
                     const std::map<std::string, std::string>& extra_meta = {});
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Copies trainable tensors and optimizer moments from `ckpt` into `state`.
void restore_checkpoint(const Checkpoint& ckpt, TrainState& state);

}  // namespace microtune::trainer
