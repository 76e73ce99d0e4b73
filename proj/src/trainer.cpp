#include "microtune/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>

#include "binio.hpp"
#include "microtune/parallel.hpp"

namespace microtune::trainer {

namespace {

bool is_feature(const TrainConfig& c) { return c.mode == DataMode::kFeature; }

encoder::TokenFeatures weak_features(const autodiff::Model& model, const Sample& s, DataMode mode) {
  if (mode == DataMode::kImage) return encoder::forward_features(s.image, model.encoder);
  if (s.records.empty()) throw std::invalid_argument("sample " + s.id + " has no feature records");
  return encoder::features_from_grid(s.records.front(), model.encoder);
}

tokenfusion::FusedLogits head_logits(const autodiff::Model& model, const encoder::TokenFeatures& f,
                                     const TrainConfig& config) {
  auto part = saliency::select_salient(f.v_patch, f.grid_side, config.forward.saliency);
  auto pool = tokenfusion::soap_pool(part.q_sal, f.v_patch, model.pool);
  return tokenfusion::fused_logits(pool.v_fg, f.v_cls, model.bank, model.encoder, config.forward.fusion);
}

// Projected global embeddings of the multi-crop views, N x d_shared.
Matrix crop_embeddings(const autodiff::Model& model, const Sample& s, const TrainConfig& config, std::size_t epoch) {
  const auto& enc = model.encoder;
  Matrix out(config.crops, enc.config.shared_dim);
  if (config.mode == DataMode::kImage) {
    auto rng = make_stream(config.seed, s.id, epoch, StreamPurpose::kMultiCrop);
    const auto crops = pseudolabel::multi_crop(s.image, config.crops, config.crop_min, config.crop_max, rng,
                                               enc.config.image_side, 2 * enc.config.patch);
    for (std::size_t i = 0; i < config.crops; ++i) {
      const Vec z = encoder::project_shared(encoder::encode_cls(crops.views[i], enc), enc);
      std::copy(z.begin(), z.end(), out.row(i).begin());
    }
    return out;
  }
  if (s.records.size() < 1 + config.crops) {
    throw std::invalid_argument("sample " + s.id + " has " + std::to_string(s.records.size()) +
                                " feature records, need weak + " + std::to_string(config.crops) + " crops");
  }
  for (std::size_t i = 0; i < config.crops; ++i) {
    const auto& rec = s.records[1 + i];
    if (!rec.has_cls()) throw std::invalid_argument("crop record of " + s.id + " has no CLS token");
    const Vec z = encoder::project_shared(rec.v_cls, enc);
    std::copy(z.begin(), z.end(), out.row(i).begin());
  }
  return out;
}

void put_matrix(std::ostream& out, const std::string& name, const Matrix& m) {
  binio::put_string(out, name);
  binio::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  binio::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (double x : m.data()) binio::put_f64(out, x);
}

std::string fmt(double x) {
  std::ostringstream os;
  os << std::setprecision(12) << x;
  return os.str();
}

}  // namespace

DataMode parse_data_mode(const std::string& text) {
  if (text == "image") return DataMode::kImage;
  if (text == "feature") return DataMode::kFeature;
  throw std::invalid_argument("unknown dataset mode '" + text + "' (image|feature)");
}

std::string to_string(DataMode mode) { return mode == DataMode::kImage ? "image" : "feature"; }

PlSource parse_pl_source(const std::string& text) {
  if (text == "frozen") return PlSource::kFrozen;
  if (text == "shared") return PlSource::kShared;
  throw std::invalid_argument("unknown pseudo-label source '" + text + "' (frozen|shared)");
}

std::string to_string(PlSource source) { return source == PlSource::kFrozen ? "frozen" : "shared"; }

void TrainConfig::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("config: " + why); };
  if (epochs == 0) fail("epochs must be positive");
  if (batch == 0) fail("batch must be positive");
  if (!(lr >= 0.0)) fail("lr must be non-negative");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(gamma >= 0.0 && gamma <= 1.0)) fail("gamma must lie in [0, 1]");
  if (crops == 0) fail("crops must be positive");
  if (!(crop_min > 0.0 && crop_min <= crop_max && crop_max <= 1.0)) fail("need 0 < crop_min <= crop_max <= 1");
  if (!(loss.temperature > 0.0)) fail("temperature must be positive");
  if (!(augment.scale_min > 0.0 && augment.scale_min <= augment.scale_max && augment.scale_max <= 1.0))
    fail("need 0 < aug_scale_min <= aug_scale_max <= 1");
  if (!(augment.flip_p >= 0.0 && augment.flip_p <= 1.0)) fail("aug_flip_p must lie in [0, 1]");
  if (!(augment.noise_sigma >= 0.0)) fail("aug_noise must be non-negative");
  if (!(forward.saliency.tau >= -1.0 && forward.saliency.tau <= 1.0)) fail("tau must lie in [-1, 1]");
  if (!(forward.saliency.eps >= 0.0 && forward.saliency.eps <= 1.0)) fail("affinity eps must lie in [0, 1]");
  if (threads == 0) fail("threads must be positive");
}

bool Dataset::labeled() const {
  return !samples.empty() && std::all_of(samples.begin(), samples.end(), [](const Sample& s) { return s.label >= 0; });
}

Dataset load_dataset(const std::filesystem::path& manifest, DataMode mode) {
  Dataset data;
  data.mode = mode;
  for (const auto& rec : encoder::read_manifest(manifest)) {
    Sample s;
    s.id = rec.id;
    s.label = rec.label;
    if (mode == DataMode::kImage) {
      s.image = read_pgm(rec.path);
    } else {
      s.records = encoder::read_mcft_file(rec.path);
      if (s.records.empty()) throw std::runtime_error(rec.path.string() + ": no feature records");
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

autodiff::Model build_model(const encoder::EncoderConfig& encoder_config, std::uint64_t encoder_seed,
                            const classifier::DescriptionEmbeddingSet& descriptions,
                            const classifier::InitOptions& init) {
  autodiff::Model m;
  m.encoder = encoder::EncoderWeights::toy(encoder_config, encoder_seed);
  if (descriptions.dim != encoder_config.shared_dim) {
    throw std::invalid_argument("description dim " + std::to_string(descriptions.dim) + " != shared dim " +
                                std::to_string(encoder_config.shared_dim));
  }
  m.bank = classifier::init_classifiers(descriptions, init);
  m.pool = tokenfusion::PoolingParams::identity(encoder_config.dim);
  return m;
}

Image strong_augment(const Image& image, std::mt19937_64& rng, const AugmentOptions& options) {
  const double short_side = static_cast<double>(std::min(image.height, image.width));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double area = options.scale_min + (options.scale_max - options.scale_min) * unit(rng);
  const double side = std::sqrt(area) * short_side;
  const double top = unit(rng) * (static_cast<double>(image.height) - side);
  const double left = unit(rng) * (static_cast<double>(image.width) - side);
  Image out = crop_resize(image, top, left, side, std::min(image.height, image.width));
  if (unit(rng) < options.flip_p) out = hflip(out);
  if (options.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, options.noise_sigma);
    for (double& p : out.pixels) p = std::clamp(p + noise(rng), 0.0, 1.0);
  }
  return out;
}

double cosine_lr(double base, std::uint64_t step, std::uint64_t total_steps) {
  if (total_steps == 0) return base;
  const double t = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

double self_training_loss(std::span<const double> probs, std::size_t label, double clamp) {
  if (label >= probs.size()) throw std::invalid_argument("self_training_loss: label out of range");
  return -std::log(std::max(probs[label], clamp));
}

double fairness_loss(const Matrix& batch_probs, double clamp) {
  const std::size_t B = batch_probs.rows();
  const std::size_t C = batch_probs.cols();
  if (B == 0 || C == 0) throw std::invalid_argument("fairness_loss: empty batch");
  double loss = 0.0;
  for (std::size_t k = 0; k < C; ++k) {
    double mean = 0.0;
    for (std::size_t b = 0; b < B; ++b) mean += batch_probs(b, k);
    loss -= std::log(std::max(mean / static_cast<double>(B), clamp));
  }
  return loss / static_cast<double>(C);
}

TrainState init_state(autodiff::Model model, const TrainConfig& config, std::size_t train_size) {
  config.validate();
  if (train_size == 0) throw std::invalid_argument("init_state: empty training split");
  TrainState s;
  s.config = config;
  if (is_feature(config)) s.config.train_layer_norm = false;
  s.model = std::move(model);
  for (const auto& [name, t] : s.model.trainables(s.config.train_layer_norm)) {
    s.moment1.emplace(name, Matrix(t->rows(), t->cols()));
    s.moment2.emplace(name, Matrix(t->rows(), t->cols()));
  }
  const std::uint64_t per_epoch = (train_size + config.batch - 1) / config.batch;
  s.total_steps = per_epoch * config.epochs;
  return s;
}

void adamw_step(TrainState& state, const autodiff::GradientBundle& grads, double lr) {
  const auto& c = state.config;
  const double t = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (auto& [name, param] : state.model.trainables(c.train_layer_norm)) {
    const Matrix* g = grads.find(name);
    if (!g) continue;
    Matrix& m = state.moment1.at(name);
    Matrix& v = state.moment2.at(name);
    for (std::size_t i = 0; i < param->size(); ++i) {
      const double gi = g->data()[i];
      m.data()[i] = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
      v.data()[i] = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
      const double mhat = m.data()[i] / bc1;
      const double vhat = v.data()[i] / bc2;
      double& p = param->data()[i];
      p -= lr * (mhat / (std::sqrt(vhat) + c.adam_eps) + c.weight_decay * p);
    }
  }
  ++state.step;
}

pseudolabel::PseudoLabelDecision pseudo_label(const autodiff::Model& model, const Sample& sample,
                                              const TrainConfig& config, std::size_t epoch) {
  const auto weak = autodiff::stop_gradient(weak_features(model, sample, config.mode));
  const Vec t = head_logits(model, weak.value, config).fused;
  const Vec f = encoder::project_shared(weak.value.v_cls, model.encoder);
  const Matrix crops = crop_embeddings(model, sample, config, epoch);
  const Vec f_agg = pseudolabel::aggregate_views(crops, pseudolabel::crop_weights(f, crops));
  const Vec p = config.pl_source == PlSource::kFrozen ? pseudolabel::clip_pseudo_logits(f_agg, model.bank)
                                                      : tokenfusion::cosine_logits(f_agg, model.bank.w_llm_star);
  return pseudolabel::dynamic_aggregate(p, t, config.gamma, config.blend, config.loss.temperature);
}

tokenfusion::FusedLogits predict(const autodiff::Model& model, const Sample& sample, const TrainConfig& config) {
  return head_logits(model, weak_features(model, sample, config.mode), config);
}

autodiff::ImageForward forward_weak(const autodiff::Model& model, const Sample& sample, const TrainConfig& config) {
  if (config.mode == DataMode::kImage) return autodiff::forward_image(model, sample.image, config.forward);
  return autodiff::forward_tokens(model, weak_features(model, sample, config.mode), config.forward);
}

double evaluate(const autodiff::Model& model, const Dataset& data, const TrainConfig& config) {
  if (data.samples.empty()) throw std::invalid_argument("evaluate: empty split");
  if (!data.labeled()) throw std::invalid_argument("evaluate: split has unlabeled samples");
  std::vector<int> hit(data.samples.size(), 0);
  parallel_for(data.samples.size(), config.threads, [&](std::size_t i) {
    const auto logits = predict(model, data.samples[i], config);
    hit[i] = static_cast<int>(pseudolabel::argmax_lowest(logits.fused)) == data.samples[i].label;
  });
  std::size_t correct = 0;
  for (int h : hit) correct += static_cast<std::size_t>(h);
  return static_cast<double>(correct) / static_cast<double>(data.samples.size());
}

double pseudo_label_pass(const autodiff::Model& model, const Dataset& data, const TrainConfig& config,
                         std::size_t epoch, std::vector<AuditRow>* audit) {
  std::vector<pseudolabel::PseudoLabelDecision> decisions(data.samples.size());
  parallel_for(data.samples.size(), config.threads,
               [&](std::size_t i) { decisions[i] = pseudo_label(model, data.samples[i], config, epoch); });
  std::size_t correct = 0;
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    const auto& d = decisions[i];
    const auto& s = data.samples[i];
    correct += static_cast<int>(d.label) == s.label;
    if (audit) {
      audit->push_back({epoch, s.id, d.label, d.margin, d.gamma, pseudolabel::argmax_lowest(d.pseudo_logits_clip),
                        pseudolabel::argmax_lowest(d.tokenfusion_logits), s.label});
    }
  }
  return data.labeled() ? static_cast<double>(correct) / static_cast<double>(data.samples.size()) : -1.0;
}

EpochMetrics train_epoch(TrainState& state, const Dataset& data, std::vector<AuditRow>* audit) {
  const auto& cfg = state.config;
  if (data.samples.empty()) throw std::invalid_argument("train_epoch: empty training split");
  const std::size_t epoch = state.epoch + 1;
  const std::size_t n = data.samples.size();

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  auto shuffle_rng = make_stream(cfg.seed, "shuffle", epoch, StreamPurpose::kShuffle);
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  std::vector<pseudolabel::PseudoLabelDecision> cached;
  if (cfg.pl_cache_per_epoch) {
    cached.resize(n);
    parallel_for(n, cfg.threads,
                 [&](std::size_t i) { cached[i] = pseudo_label(state.model, data.samples[i], cfg, epoch); });
  }

  EpochMetrics metrics;
  metrics.epoch = epoch;
  std::size_t pl_correct = 0;
  double loss_st = 0.0;
  double loss_reg = 0.0;
  std::size_t batches = 0;

  for (std::size_t start = 0; start < n; start += cfg.batch) {
    const std::size_t B = std::min(cfg.batch, n - start);
    std::vector<pseudolabel::PseudoLabelDecision> decisions(B);
    std::vector<autodiff::ImageForward> forwards(B);
    // Diverged parameters surface as a numeric error in the forward pass;
    // treat it like a non-finite loss.
    try {
      parallel_for(B, cfg.threads, [&](std::size_t b) {
        const std::size_t idx = order[start + b];
        const Sample& s = data.samples[idx];
        decisions[b] = cfg.pl_cache_per_epoch ? cached[idx] : pseudo_label(state.model, s, cfg, epoch);
        if (cfg.mode == DataMode::kImage) {
          auto rng = make_stream(cfg.seed, s.id, epoch, StreamPurpose::kStrongAugment);
          forwards[b] = autodiff::forward_image(state.model, strong_augment(s.image, rng, cfg.augment), cfg.forward);
        } else {
          if (s.records.size() < cfg.crops + 2) throw std::invalid_argument("sample " + s.id + " has no strong view record");
          forwards[b] = autodiff::forward_tokens(state.model, encoder::features_from_grid(s.records[cfg.crops + 1], state.model.encoder),
                                                 cfg.forward);
        }
      });
    } catch (const linalg::NumericError& e) {
      throw NonFiniteLoss(std::string(e.what()) + " at step " + std::to_string(state.step));
    }

    std::vector<std::size_t> labels(B);
    Matrix fused(B, state.model.bank.classes());
    for (std::size_t b = 0; b < B; ++b) {
      labels[b] = decisions[b].label;
      std::copy(forwards[b].logits.fused.begin(), forwards[b].logits.fused.end(), fused.row(b).begin());
      const Sample& s = data.samples[order[start + b]];
      pl_correct += static_cast<int>(labels[b]) == s.label;
      if (audit) {
        const auto& d = decisions[b];
        audit->push_back({epoch, s.id, d.label, d.margin, d.gamma, pseudolabel::argmax_lowest(d.pseudo_logits_clip),
                          pseudolabel::argmax_lowest(d.tokenfusion_logits), s.label});
      }
    }

    const auto loss = autodiff::batch_loss(fused, labels, cfg.loss);
    if (!std::isfinite(loss.total)) throw NonFiniteLoss("non-finite loss at step " + std::to_string(state.step));
    const Matrix dfused = autodiff::loss_gradient(loss, labels, cfg.loss);

    std::vector<autodiff::GradientBundle> per_image(B);
    parallel_for(B, cfg.threads, [&](std::size_t b) {
      per_image[b] = autodiff::backward_image(state.model, forwards[b], dfused.row(b), cfg.forward, cfg.train_layer_norm);
    });
    autodiff::GradientBundle grads;
    for (const auto& g : per_image) grads.add(g);
    try {
      grads.check_finite();
    } catch (const linalg::NumericError& e) {
      throw NonFiniteLoss(std::string(e.what()) + " at step " + std::to_string(state.step));
    }

    metrics.lr = cosine_lr(cfg.lr, state.step, state.total_steps);
    adamw_step(state, grads, metrics.lr);
    loss_st += loss.loss_st;
    loss_reg += loss.loss_reg;
    ++batches;
  }

  state.epoch = epoch;
  metrics.step = state.step;
  metrics.loss_st = loss_st / static_cast<double>(batches);
  metrics.loss_reg = loss_reg / static_cast<double>(batches);
  metrics.pl_accuracy = data.labeled() ? static_cast<double>(pl_correct) / static_cast<double>(n) : -1.0;
  return metrics;
}

void write_metrics_header(std::ostream& out) { out << "epoch,step,loss_st,loss_reg,lr,pl_accuracy,eval_top1\n"; }

void write_metrics_row(std::ostream& out, const EpochMetrics& m) {
  auto opt = [](double x) { return x < 0.0 ? std::string() : fmt(x); };
  const bool initial = m.epoch == 0;
  out << m.epoch << ',' << m.step << ',' << (initial ? "" : fmt(m.loss_st)) << ','
      << (initial ? "" : fmt(m.loss_reg)) << ',' << fmt(m.lr) << ',' << opt(m.pl_accuracy) << ','
      << opt(m.eval_top1) << '\n';
}

void write_audit_header(std::ostream& out) {
  out << "epoch,image_id,label,blended_margin,gamma,clip_argmax,tf_argmax,true_label\n";
}

void write_audit_rows(std::ostream& out, const std::vector<AuditRow>& rows) {
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.image_id << ',' << r.label << ',' << fmt(r.margin) << ',' << fmt(r.gamma) << ','
        << r.clip_argmax << ',' << r.tf_argmax << ',' << r.true_label << '\n';
  }
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state,
                     const std::map<std::string, std::string>& extra_meta) {
  std::map<std::string, std::string> meta = extra_meta;
  const auto& c = state.config;
  meta["seed"] = std::to_string(c.seed);
  meta["epoch"] = std::to_string(state.epoch);
  meta["step"] = std::to_string(state.step);
  meta["total_steps"] = std::to_string(state.total_steps);
  meta["gamma"] = fmt(c.gamma);
  meta["crops"] = std::to_string(c.crops);
  meta["lr"] = fmt(c.lr);
  meta["train_layer_norm"] = c.train_layer_norm ? "1" : "0";
  meta["encoder_seed"] = std::to_string(state.model.encoder.seed);
  meta["encoder_frozen_checksum"] = fmt(state.model.encoder.frozen_checksum());

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  binio::put_magic(out, "MCCK");
  binio::put_u32(out, kMcckVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    binio::put_string(out, k);
    binio::put_string(out, v);
  }
  const auto trainables = state.model.trainables(true);
  const std::size_t n_tensors = trainables.size() + 1 + state.moment1.size() + state.moment2.size();
  binio::put_u32(out, static_cast<std::uint32_t>(n_tensors));
  for (const auto& [name, t] : trainables) put_matrix(out, name, *t);
  put_matrix(out, "head.w_llm", state.model.bank.w_llm);
  for (const auto& [name, m] : state.moment1) put_matrix(out, "adam.m." + name, m);
  for (const auto& [name, m] : state.moment2) put_matrix(out, "adam.v." + name, m);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  if (!binio::try_get_magic(in, "MCCK", "checkpoint header")) throw binio::FormatError("empty checkpoint");
  const std::uint32_t version = binio::get_u32(in, "checkpoint header");
  if (version != kMcckVersion) throw binio::FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const std::uint32_t n_meta = binio::get_u32(in, "checkpoint metadata");
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string key = binio::get_string(in, "checkpoint metadata");
    ckpt.meta[key] = binio::get_string(in, "checkpoint metadata");
  }
  const std::uint32_t n_tensors = binio::get_u32(in, "checkpoint tensor table");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = binio::get_string(in, "checkpoint tensor table");
    const std::uint32_t rows = binio::get_u32(in, "checkpoint tensor shape");
    const std::uint32_t cols = binio::get_u32(in, "checkpoint tensor shape");
    if (static_cast<std::uint64_t>(rows) * cols > (1ULL << 28)) throw binio::FormatError("oversized tensor " + name);
    Matrix m(rows, cols);
    for (double& x : m.data()) x = binio::get_f64(in, "checkpoint tensor data");
    ckpt.tensors.emplace(std::move(name), std::move(m));
  }
  return ckpt;
}

void restore_checkpoint(const Checkpoint& ckpt, TrainState& state) {
  auto copy_into = [&](const std::string& name, Matrix& dst) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw std::runtime_error("checkpoint lacks tensor " + name);
    if (it->second.rows() != dst.rows() || it->second.cols() != dst.cols())
      throw std::runtime_error("checkpoint tensor " + name + " has the wrong shape");
    dst = it->second;
  };
  auto frozen = ckpt.meta.find("encoder_frozen_checksum");
  if (frozen != ckpt.meta.end() && frozen->second != fmt(state.model.encoder.frozen_checksum()))
    throw std::runtime_error("checkpoint was written for a different encoder");
  for (auto& [name, t] : state.model.trainables(true)) copy_into(name, *t);
  copy_into("head.w_llm", state.model.bank.w_llm);
  for (auto& [name, m] : state.moment1)
    if (ckpt.tensors.count("adam.m." + name)) copy_into("adam.m." + name, m);
  for (auto& [name, m] : state.moment2)
    if (ckpt.tensors.count("adam.v." + name)) copy_into("adam.v." + name, m);
  auto get = [&](const char* key) -> std::uint64_t {
    auto it = ckpt.meta.find(key);
    return it == ckpt.meta.end() ? 0 : std::stoull(it->second);
  };
  state.epoch = get("epoch");
  state.step = get("step");
}

}  // namespace microtune::trainer
