#include "microtune/cli.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "microtune/classifier.hpp"
#include "microtune/saliency.hpp"
#include "microtune/tokenfusion.hpp"

namespace microtune::cli {

namespace fs = std::filesystem;

std::filesystem::path RunConfig::train_manifest_path() const {
  return train_manifest.empty() ? data / "train.tsv" : train_manifest;
}
std::filesystem::path RunConfig::test_manifest_path() const {
  return test_manifest.empty() ? data / "test.tsv" : test_manifest;
}
std::filesystem::path RunConfig::descriptions_path() const {
  return descriptions.empty() ? data / "descriptions.mcde" : descriptions;
}

namespace {

enum Command : unsigned {
  kGenerate = 1u << 0,
  kTrain = 1u << 1,
  kEvaluate = 1u << 2,
  kExport = 1u << 3,
  kAblate = 1u << 4,
};
constexpr unsigned kModel = kTrain | kEvaluate | kExport | kAblate;
constexpr unsigned kFit = kTrain | kAblate;

unsigned command_bit(const std::string& command) {
  if (command == "generate") return kGenerate;
  if (command == "train") return kTrain;
  if (command == "evaluate") return kEvaluate;
  if (command == "export") return kExport;
  if (command == "ablate") return kAblate;
  throw ConfigError("unknown command '" + command + "'");
}

// Shortest decimal that reads back to the same double.
std::string fmt_double(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  if (ec != std::errc()) throw std::runtime_error("cannot format number");
  return std::string(buf, end);
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

double parse_double(const std::string& key, const std::string& text) {
  double x = 0.0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), x);
  if (ec != std::errc() || end != text.data() + text.size() || !std::isfinite(x))
    throw ConfigError(key + ": expected a number, got '" + text + "'");
  return x;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  std::uint64_t x = 0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), x);
  if (ec != std::errc() || end != text.data() + text.size() || text.empty())
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  return x;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

// Enum parsers throw std::invalid_argument; report them as config errors.
template <class Fn>
auto parse_enum(Fn&& fn, const std::string& key, const std::string& text) {
  try {
    return fn(text);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

struct Field {
  std::string key;
  std::string help;
  unsigned commands;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define MT_DOUBLE(name, help, cmds, member)                                                     \
  Field {                                                                                      \
    name, help, cmds, [](const RunConfig& c) { return fmt_double(c.member); },                 \
        [](RunConfig& c, const std::string& v) { c.member = parse_double(name, v); }           \
  }
#define MT_SIZE(name, help, cmds, member)                                                               \
  Field {                                                                                              \
    name, help, cmds, [](const RunConfig& c) { return std::to_string(c.member); },                     \
        [](RunConfig& c, const std::string& v) { c.member = static_cast<std::size_t>(parse_u64(name, v)); } \
  }
#define MT_BOOL(name, help, cmds, member)                                           \
  Field {                                                                          \
    name, help, cmds, [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }, \
        [](RunConfig& c, const std::string& v) { c.member = parse_bool(name, v); } \
  }
#define MT_PATH(name, help, cmds, member)                                      \
  Field {                                                                     \
    name, help, cmds, [](const RunConfig& c) { return c.member.string(); },  \
        [](RunConfig& c, const std::string& v) { c.member = v; }              \
  }
#define MT_ENUM(name, help, cmds, member, parser)                                                  \
  Field {                                                                                         \
    name, help, cmds, [](const RunConfig& c) { return to_string(c.member); },                     \
        [](RunConfig& c, const std::string& v) { c.member = parse_enum(parser, name, v); }        \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"seed", "run seed (data layout and training streams); MICROTUNE_SEED is the fallback",
            kGenerate | kFit,
            [](const RunConfig& c) { return std::to_string(c.train.seed); },
            [](RunConfig& c, const std::string& v) { c.synth.seed = c.train.seed = parse_u64("seed", v); }},
      MT_SIZE("threads", "worker cap", kModel, train.threads),
      MT_PATH("data", "dataset directory", kGenerate | kModel, data),
      MT_PATH("train_manifest", "training manifest (default <data>/train.tsv)", kFit, train_manifest),
      MT_PATH("test_manifest", "evaluation manifest (default <data>/test.tsv)", kModel, test_manifest),
      MT_PATH("descriptions", "description embeddings (default <data>/descriptions.mcde)", kGenerate | kModel,
              descriptions),
      MT_PATH("out", "output directory", kFit | kExport, out),
      MT_PATH("checkpoint", "checkpoint to load", kEvaluate | kExport, checkpoint),
      MT_PATH("metrics", "metrics CSV for pl-curve (default next to the checkpoint directory)", kExport, metrics),

      // generate
      MT_SIZE("classes", "number of classes", kGenerate, synth.classes),
      MT_SIZE("per_class", "images per class", kGenerate, synth.per_class),
      MT_SIZE("image_side", "image side in pixels", kGenerate, synth.image_side),
      MT_SIZE("glyph", "glyph side in pixels", kGenerate, synth.glyph),
      MT_BOOL("grid_aligned", "place glyphs on the patch grid", kGenerate, synth.grid_aligned),
      MT_SIZE("border", "minimum glyph distance from the edge", kGenerate, synth.border),
      MT_SIZE("texture_cell", "background noise lattice spacing", kGenerate, synth.texture_cell),
      MT_DOUBLE("texture_amplitude", "background noise amplitude", kGenerate, synth.texture_amplitude),
      MT_DOUBLE("glyph_contrast", "glyph contrast", kGenerate, synth.glyph_contrast),
      MT_SIZE("class_delta", "mirrored pixel pairs per class", kGenerate, synth.class_delta),
      MT_DOUBLE("class_level_step", "glyph level shift per class index", kGenerate, synth.class_level_step),
      MT_DOUBLE("pixel_noise", "per-pixel noise std", kGenerate, synth.pixel_noise),
      MT_DOUBLE("train_fraction", "fraction of each class in the training split", kGenerate,
                synth.train_fraction),
      Field{"description_kind", "aligned|random", kGenerate,
            [](const RunConfig& c) { return c.description_kind; },
            [](RunConfig& c, const std::string& v) {
              if (v != "aligned" && v != "random")
                throw ConfigError("description_kind: expected aligned or random, got '" + v + "'");
              c.description_kind = v;
            }},
      MT_SIZE("descriptions_per_class", "description embeddings per class", kGenerate, desc.per_class),
      MT_DOUBLE("description_noise", "per-description perturbation", kGenerate, desc.noise),
      MT_DOUBLE("anchor_offset", "random rotation of aligned anchors", kGenerate, desc.anchor_offset),
      MT_SIZE("shared_components", "shared directions removed from aligned anchors", kGenerate,
              desc.shared_components),
      MT_DOUBLE("global_weight", "global share of the aligned anchor", kGenerate, desc.global_weight),
      MT_SIZE("probe_crops", "zoomed probe crops per image", kGenerate, desc.probe_crops),
      MT_DOUBLE("crop_effect", "weight of zoomed crops in the anchor", kGenerate, desc.crop_effect),
      Field{"description_seed", "description noise seed", kGenerate,
            [](const RunConfig& c) { return std::to_string(c.desc.seed); },
            [](RunConfig& c, const std::string& v) { c.desc.seed = parse_u64("description_seed", v); }},

      // model
      Field{"encoder_seed", "toy encoder seed", kGenerate | kModel,
            [](const RunConfig& c) { return std::to_string(c.encoder_seed); },
            [](RunConfig& c, const std::string& v) { c.encoder_seed = parse_u64("encoder_seed", v); }},
      MT_BOOL("normalize_descriptions", "L2-normalize descriptions before averaging", kModel,
              normalize_descriptions),
      MT_ENUM("mode", "image|feature", kModel, train.mode, trainer::parse_data_mode),
      MT_ENUM("fusion", "symmetric|global-only|local-only", kModel, train.forward.fusion,
              tokenfusion::parse_fusion_mode),
      MT_ENUM("affinity", "auto|dense|grid-sparse", kModel, train.forward.saliency.mode,
              saliency::parse_graph_mode),
      MT_DOUBLE("tau", "affinity cosine threshold", kModel, train.forward.saliency.tau),
      MT_DOUBLE("affinity_eps", "weight of sub-threshold edges", kModel, train.forward.saliency.eps),
      MT_ENUM("salient_rule", "max-abs|mean-abs", kModel, train.forward.saliency.rule,
              saliency::parse_salient_rule),
      MT_DOUBLE("temperature", "logit temperature", kModel, train.loss.temperature),

      // training
      MT_SIZE("epochs", "training epochs", kFit, train.epochs),
      MT_SIZE("batch", "batch size", kFit, train.batch),
      MT_DOUBLE("lr", "peak learning rate", kFit, train.lr),
      MT_DOUBLE("weight_decay", "decoupled weight decay", kFit, train.weight_decay),
      MT_DOUBLE("beta1", "first-moment decay", kFit, train.beta1),
      MT_DOUBLE("beta2", "second-moment decay", kFit, train.beta2),
      MT_DOUBLE("adam_eps", "optimizer epsilon", kFit, train.adam_eps),
      MT_DOUBLE("gamma", "pseudo-label blend weight of the multi-view source", kFit, train.gamma),
      MT_SIZE("crops", "multi-view crops per image", kFit, train.crops),
      MT_DOUBLE("crop_min", "smallest crop scale", kFit, train.crop_min),
      MT_DOUBLE("crop_max", "largest crop scale", kFit, train.crop_max),
      MT_ENUM("blend", "raw|softmax", kFit, train.blend, pseudolabel::parse_blend_mode),
      MT_ENUM("pl_source", "frozen|shared", kFit, train.pl_source, trainer::parse_pl_source),
      MT_BOOL("pl_cache", "reuse multi-view pseudo-logits for a whole epoch", kFit, train.pl_cache_per_epoch),
      MT_BOOL("detach_query", "treat the salient query as a constant", kFit, train.forward.detach_query),
      MT_BOOL("fairness", "add the class-balance regularizer", kFit, train.loss.fairness),
      MT_BOOL("train_layer_norm", "train the encoder LayerNorm affines", kFit, train.train_layer_norm),
      MT_DOUBLE("aug_scale_min", "strong augment smallest area fraction", kFit, train.augment.scale_min),
      MT_DOUBLE("aug_scale_max", "strong augment largest area fraction", kFit, train.augment.scale_max),
      MT_DOUBLE("aug_flip_p", "strong augment flip probability", kFit, train.augment.flip_p),
      MT_DOUBLE("aug_noise", "strong augment noise std", kFit, train.augment.noise_sigma),

      // export
      Field{"what", "masks|attention|pl-curve", kExport, [](const RunConfig& c) { return c.export_what; },
            [](RunConfig& c, const std::string& v) {
              if (v != "masks" && v != "attention" && v != "pl-curve")
                throw ConfigError("what: expected masks, attention or pl-curve, got '" + v + "'");
              c.export_what = v;
            }},
      MT_SIZE("limit", "export at most this many images (0: all)", kExport, export_limit),
  };
  return table;
}

#undef MT_DOUBLE
#undef MT_SIZE
#undef MT_BOOL
#undef MT_PATH
#undef MT_ENUM

std::string canonical_key(const std::string& key) {
  std::string k = key;
  std::replace(k.begin(), k.end(), '-', '_');
  if (k == "N") return "crops";
  return k;
}

const Field* find_field(const std::string& key) {
  const std::string k = canonical_key(key);
  for (const auto& f : fields())
    if (f.key == k) return &f;
  return nullptr;
}

std::string flag_name(const std::string& key) {
  std::string k = key;
  std::replace(k.begin(), k.end(), '_', '-');
  return k;
}

struct ConfigFileLine {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

std::vector<ConfigFileLine> read_config_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::vector<ConfigFileLine> lines;
  std::string raw;
  for (std::size_t n = 1; std::getline(in, raw); ++n) {
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected key = value");
    lines.push_back({trim(line.substr(0, eq)), trim(line.substr(eq + 1)), n});
  }
  return lines;
}

// Keeps the validation messages of the library but reports them as config
// errors.
void validate(const RunConfig& c, unsigned cmd) {
  try {
    if (cmd & kGenerate) c.synth.validate();
    if (cmd & kModel) c.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

void require_file(const fs::path& path, const std::string& what) {
  if (path.empty()) throw ConfigError("missing " + what);
  if (!fs::exists(path)) throw ConfigError(what + " not found: " + path.string());
}

trainer::Dataset load_split(const fs::path& manifest, trainer::DataMode mode, const std::string& what) {
  require_file(manifest, what);
  return trainer::load_dataset(manifest, mode);
}

autodiff::Model load_model(const RunConfig& c, std::uint64_t encoder_seed) {
  require_file(c.descriptions_path(), "descriptions");
  const auto set = classifier::load_descriptions(c.descriptions_path());
  classifier::InitOptions init;
  init.normalize_descriptions = c.normalize_descriptions;
  return trainer::build_model(c.encoder, encoder_seed, set, init);
}

std::string epoch_name(std::size_t epoch) {
  std::ostringstream s;
  s << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".mcck";
  return s.str();
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

// Loads the checkpoint named by the config and rebuilds the model it was
// trained from.
trainer::TrainState restore_from_checkpoint(const RunConfig& c) {
  require_file(c.checkpoint, "checkpoint");
  const auto ckpt = trainer::read_checkpoint(c.checkpoint);
  std::uint64_t encoder_seed = c.encoder_seed;
  if (auto it = ckpt.meta.find("encoder_seed"); it != ckpt.meta.end()) encoder_seed = std::stoull(it->second);
  auto state = trainer::init_state(load_model(c, encoder_seed), c.train, 1);
  trainer::restore_checkpoint(ckpt, state);
  return state;
}

}  // namespace

std::string dump_config(const RunConfig& config, const std::string& command) {
  const unsigned bit = command_bit(command);
  std::ostringstream out;
  out << "# microtune " << command << "\n";
  for (const auto& f : fields())
    if (f.commands & bit) out << f.key << " = " << f.get(config) << "\n";
  return out.str();
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown option '" + key + "'");
  f->set(config, value);
}

void apply_config_file(RunConfig& config, const fs::path& path, const std::string& command) {
  const unsigned bit = command_bit(command);
  for (const auto& line : read_config_lines(path)) {
    const Field* f = find_field(line.key);
    if (!f || !(f->commands & bit))
      throw ConfigError(path.string() + ":" + std::to_string(line.line) + ": unknown option '" + line.key +
                        "' for " + command);
    f->set(config, line.value);
  }
}

std::size_t estimate_peak_memory(const RunConfig& c, std::size_t train_size) {
  const std::size_t d = c.encoder.dim;
  const std::size_t n = c.encoder.tokens() + 1;
  const std::size_t hidden = d * c.encoder.mlp_ratio;
  // Encoder weights, one tape per image in flight (per layer: about ten
  // n x d matrices, the n x n attention and the n x hidden MLP activations),
  // the multi-view crops and the dataset rasters.
  const std::size_t weights = c.encoder.layers * (4 * d * d + 2 * d * hidden) + c.encoder.patch * c.encoder.patch * d;
  const std::size_t tape = c.encoder.layers * (10 * n * d + n * n + 2 * n * hidden);
  const std::size_t in_flight = std::max<std::size_t>(1, std::min(c.train.batch, c.train.threads));
  const std::size_t pixels = c.encoder.image_side * c.encoder.image_side;
  const std::size_t crops = c.train.crops * (pixels + n * d);
  const std::size_t doubles = weights * 3 + in_flight * (tape + crops) + train_size * pixels;
  return doubles * sizeof(double);
}

TrainSummary run_training(const RunConfig& c, std::ostream& log) {
  const auto train_data = load_split(c.train_manifest_path(), c.train.mode, "training manifest");
  const auto test_data = load_split(c.test_manifest_path(), c.train.mode, "evaluation manifest");
  if (train_data.samples.empty()) throw ConfigError("training manifest is empty");
  if (test_data.samples.empty()) throw ConfigError("evaluation manifest is empty");

  fs::create_directories(c.out / "checkpoints");
  {
    auto cfg = open_out(c.out / "run.cfg");
    cfg << dump_config(c, "train");
  }
  auto metrics = open_out(c.out / "metrics.csv");
  auto audit_out = open_out(c.out / "audit.csv");
  trainer::write_metrics_header(metrics);
  trainer::write_audit_header(audit_out);

  auto state = trainer::init_state(load_model(c, c.encoder_seed), c.train, train_data.samples.size());
  TrainSummary summary;
  summary.frozen_checksum_before = state.model.frozen_checksum();

  std::vector<trainer::AuditRow> audit;
  trainer::EpochMetrics m0;
  m0.pl_accuracy = trainer::pseudo_label_pass(state.model, train_data, state.config, 0, &audit);
  m0.eval_top1 = trainer::evaluate(state.model, test_data, state.config);
  m0.lr = trainer::cosine_lr(c.train.lr, 0, state.total_steps);
  trainer::write_metrics_row(metrics, m0);
  trainer::write_audit_rows(audit_out, audit);
  summary.epoch0_top1 = m0.eval_top1;
  summary.final_top1 = m0.eval_top1;
  summary.final_pl_accuracy = m0.pl_accuracy;
  summary.last_checkpoint = c.out / "checkpoints" / epoch_name(0);
  trainer::save_checkpoint(summary.last_checkpoint, state);
  log << "epoch 0 eval_top1 " << fmt_double(m0.eval_top1) << " pl_accuracy " << fmt_double(m0.pl_accuracy)
      << "\n";

  for (std::size_t e = 1; e <= c.train.epochs; ++e) {
    audit.clear();
    trainer::EpochMetrics m;
    try {
      m = trainer::train_epoch(state, train_data, &audit);
    } catch (const trainer::NonFiniteLoss& ex) {
      metrics.flush();
      throw trainer::NonFiniteLoss(std::string(ex.what()) + "; last checkpoint: " + summary.last_checkpoint.string());
    }
    m.eval_top1 = trainer::evaluate(state.model, test_data, state.config);
    trainer::write_metrics_row(metrics, m);
    trainer::write_audit_rows(audit_out, audit);
    summary.last_checkpoint = c.out / "checkpoints" / epoch_name(e);
    trainer::save_checkpoint(summary.last_checkpoint, state);
    summary.final_top1 = m.eval_top1;
    summary.final_pl_accuracy = m.pl_accuracy;
    log << "epoch " << e << " loss " << fmt_double(m.loss_st + m.loss_reg) << " eval_top1 "
        << fmt_double(m.eval_top1) << " pl_accuracy " << fmt_double(m.pl_accuracy) << "\n";
  }
  summary.epochs = c.train.epochs;
  summary.frozen_checksum_after = state.model.frozen_checksum();
  if (!metrics || !audit_out) throw std::runtime_error("write failed under " + c.out.string());
  return summary;
}

namespace {

struct Sweep {
  std::string key;
  std::vector<std::string> values;
};

std::vector<Sweep> parse_sweeps(const std::vector<std::string>& specs) {
  std::vector<Sweep> sweeps;
  for (const auto& spec : specs) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError("sweep '" + spec + "': expected key=v1,v2,...");
    Sweep s;
    s.key = canonical_key(trim(spec.substr(0, eq)));
    const Field* f = find_field(s.key);
    if (!f || !(f->commands & kAblate)) throw ConfigError("sweep: cannot sweep '" + s.key + "'");
    std::stringstream list(spec.substr(eq + 1));
    for (std::string v; std::getline(list, v, ',');)
      if (!trim(v).empty()) s.values.push_back(trim(v));
    sweeps.push_back(std::move(s));
  }
  return sweeps;
}

}  // namespace

std::vector<AblationRow> run_ablation(const RunConfig& c, std::ostream& log) {
  const auto sweeps = parse_sweeps(c.sweeps);
  std::size_t points = sweeps.empty() ? 0 : 1;
  for (const auto& s : sweeps) points *= s.values.size();
  if (points == 0) throw ConfigError("ablation grid is empty");

  // Validate every point before spending time on the first.
  std::vector<RunConfig> configs;
  std::vector<std::string> labels;
  for (std::size_t p = 0; p < points; ++p) {
    RunConfig point = c;
    std::string label;
    std::size_t rest = p;
    for (auto it = sweeps.rbegin(); it != sweeps.rend(); ++it) {
      const auto& v = it->values[rest % it->values.size()];
      rest /= it->values.size();
      apply_setting(point, it->key, v);
      label = it->key + "=" + v + (label.empty() ? "" : ";" + label);
    }
    validate(point, kAblate);
    point.out = c.out / ("point_" + std::to_string(p));
    configs.push_back(std::move(point));
    labels.push_back(std::move(label));
  }

  std::vector<AblationRow> rows;
  for (std::size_t p = 0; p < points; ++p) {
    log << "ablate " << labels[p] << "\n";
    std::ostringstream quiet;
    const auto t0 = std::chrono::steady_clock::now();
    const auto summary = run_training(configs[p], quiet);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto train_size = encoder::read_manifest(configs[p].train_manifest_path()).size();
    rows.push_back({labels[p], summary.final_top1, secs, estimate_peak_memory(configs[p], train_size)});
  }
  return rows;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "setting,eval_top1,wall_time,peak_memory_estimate\n";
  for (const auto& r : rows)
    out << '"' << r.setting << '"' << ',' << fmt_double(r.eval_top1) << ',' << fmt_double(r.wall_time) << ','
        << r.peak_memory_estimate << '\n';
}

int cmd_generate(const RunConfig& c, std::ostream& out, std::ostream&) {
  validate(c, kGenerate);
  const auto data = synth::generate(c.synth, c.data);
  linalg::Matrix anchors;
  if (c.description_kind == "random") {
    anchors = synth::random_anchors(c.synth.classes, c.encoder.shared_dim, c.desc.seed);
  } else {
    const auto enc = encoder::EncoderWeights::toy(c.encoder, c.encoder_seed);
    anchors = synth::aligned_anchors(c.synth, enc, c.desc);
  }
  classifier::save_descriptions(c.descriptions_path(), synth::descriptions_from_anchors(anchors, c.desc));
  out << "generated " << data.train.size() << " train and " << data.test.size() << " test images, "
      << c.synth.classes << " classes, in " << c.data.string() << "\n";
  return kExitOk;
}

int cmd_train(const RunConfig& c, std::ostream& out, std::ostream& err) {
  validate(c, kTrain);
  const auto s = run_training(c, err);
  out << "final: epochs " << s.epochs << " eval_top1 " << fmt_double(s.final_top1) << " (epoch 0 "
      << fmt_double(s.epoch0_top1) << ") pl_accuracy " << fmt_double(s.final_pl_accuracy) << " checkpoint "
      << s.last_checkpoint.string() << "\n";
  return kExitOk;
}

int cmd_evaluate(const RunConfig& c, std::ostream& out, std::ostream&) {
  validate(c, kEvaluate);
  auto state = restore_from_checkpoint(c);
  const auto data = load_split(c.test_manifest_path(), c.train.mode, "evaluation manifest");
  const double top1 = trainer::evaluate(state.model, data, c.train);
  out << "eval_top1 " << fmt_double(top1) << " images " << data.samples.size() << " fusion "
      << tokenfusion::to_string(c.train.forward.fusion) << "\n";
  return kExitOk;
}

int cmd_export(const RunConfig& c, std::ostream& out, std::ostream&) {
  validate(c, kExport);
  fs::create_directories(c.out);
  if (c.export_what == "pl-curve") {
    fs::path metrics_path = c.metrics;
    if (metrics_path.empty()) {
      if (c.checkpoint.empty()) throw ConfigError("pl-curve needs --metrics or --checkpoint");
      metrics_path = c.checkpoint.parent_path().parent_path() / "metrics.csv";
    }
    require_file(metrics_path, "metrics CSV");
    std::ifstream in(metrics_path);
    std::string line;
    std::getline(in, line);
    auto csv = open_out(c.out / "pl_curve.csv");
    csv << "epoch,pl_accuracy\n";
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      std::vector<std::string> cols;
      std::stringstream ls(line);
      for (std::string col; std::getline(ls, col, ',');) cols.push_back(col);
      if (cols.size() < 6) throw std::runtime_error("malformed metrics row: " + line);
      if (cols[0] == "0") continue;
      csv << cols[0] << ',' << cols[5] << '\n';
      ++rows;
    }
    out << "wrote " << rows << " epochs to " << (c.out / "pl_curve.csv").string() << "\n";
    return kExitOk;
  }

  auto state = restore_from_checkpoint(c);
  const auto data = load_split(c.test_manifest_path(), c.train.mode, "evaluation manifest");
  const std::size_t count =
      c.export_limit == 0 ? data.samples.size() : std::min(c.export_limit, data.samples.size());
  std::ofstream summary;
  if (c.export_what == "masks") {
    summary = open_out(c.out / "masks.csv");
    summary << "image_id,selected,fiedler_gap,fallback\n";
  }
  for (std::size_t i = 0; i < count; ++i) {
    const auto& s = data.samples[i];
    const auto fwd = trainer::forward_weak(state.model, s, c.train);
    if (c.export_what == "masks") {
      saliency::write_mask_pgm(c.out / (s.id + "_mask.pgm"), fwd.partition, fwd.features.grid_side);
      // The gap is the Fiedler eigenvalue, the smallest nonzero one.
      summary << s.id << ',' << fwd.partition.selected.size() << ',' << fmt_double(fwd.partition.fiedler.value)
              << ',' << (fwd.partition.fallback ? 1 : 0) << '\n';
    } else {
      tokenfusion::write_attention_csv(c.out / (s.id + "_attention.csv"), fwd.pool.attention,
                                       fwd.features.grid_side);
    }
  }
  out << "wrote " << count << " " << c.export_what << " files to " << c.out.string() << "\n";
  return kExitOk;
}

int cmd_ablate(const RunConfig& c, std::ostream& out, std::ostream& err) {
  validate(c, kAblate);
  const auto rows = run_ablation(c, err);
  fs::create_directories(c.out);
  {
    auto csv = open_out(c.out / "ablation.csv");
    write_ablation_csv(csv, rows);
  }
  write_ablation_csv(out, rows);
  return kExitOk;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"microtune: unsupervised adaptation of a frozen toy encoder"};
  app.require_subcommand(1);

  struct Sub {
    std::string name;
    CLI::App* app = nullptr;
    std::string config_path;
    bool dump = false;
    std::vector<std::pair<const Field*, CLI::Option*>> options;
    std::vector<std::string> values;
  };
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"generate", "write a synthetic dataset and description embeddings"},
      {"train", "self-train the pooling head and LayerNorm affines"},
      {"evaluate", "top-1 of a checkpoint on the evaluation split"},
      {"export", "saliency masks, attention weights or the pseudo-label accuracy curve"},
      {"ablate", "train once per point of a sweep grid and tabulate the results"},
  };
  std::vector<Sub> subs(commands.size());
  std::vector<std::string> sweeps;
  for (std::size_t i = 0; i < commands.size(); ++i) {
    auto& s = subs[i];
    s.name = commands[i].first;
    s.app = app.add_subcommand(s.name, commands[i].second);
    s.app->add_option("--config", s.config_path, "flat key = value file; flags override it");
    s.app->add_flag("--dump-config", s.dump, "print the effective configuration and exit");
    const unsigned bit = command_bit(s.name);
    s.values.resize(fields().size() + 1);  // CLI11 binds to these slots; never grow
    for (std::size_t f = 0; f < fields().size(); ++f) {
      const auto& field = fields()[f];
      if (!(field.commands & bit)) continue;
      auto* opt = s.app->add_option("--" + flag_name(field.key), s.values[f], field.help);
      if (field.key == "what") opt->check(CLI::IsMember({"masks", "attention", "pl-curve"}));
      s.options.emplace_back(&field, opt);
    }
    if (s.name == "train" || s.name == "ablate") {
      // Convenience spelling for the crop count.
      auto* opt = s.app->add_option("-N", s.values.back(), "alias of --crops");
      s.options.emplace_back(find_field("crops"), opt);
    }
    if (s.name == "ablate")
      s.app->add_option("--sweep", sweeps, "key=v1,v2,... (repeat for a Cartesian grid)")->take_all();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    // Usage of the subcommand that failed, when one was recognized.
    const CLI::App* shown = &app;
    for (const auto& s : subs)
      if (s.app->parsed()) shown = s.app;
    err << shown->help();
    return kExitUsage;
  }

  Sub* active = nullptr;
  for (auto& s : subs)
    if (s.app->parsed()) active = &s;
  if (!active) {
    err << app.help();
    return kExitUsage;
  }

  RunConfig config;
  try {
    if (const char* env = std::getenv("MICROTUNE_SEED"); env && *env) apply_setting(config, "seed", env);
    if (!active->config_path.empty()) apply_config_file(config, active->config_path, active->name);
    // Flags last, in table order.
    for (const auto& [field, opt] : active->options)
      if (opt->count() > 0) field->set(config, opt->as<std::string>());
    config.sweeps = sweeps;
    if (active->dump) {
      out << dump_config(config, active->name);
      return kExitOk;
    }
    if (active->name == "generate") return cmd_generate(config, out, err);
    if (active->name == "train") return cmd_train(config, out, err);
    if (active->name == "evaluate") return cmd_evaluate(config, out, err);
    if (active->name == "export") return cmd_export(config, out, err);
    return cmd_ablate(config, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const trainer::NonFiniteLoss& e) {
    err << "error: non-finite loss, aborting: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace microtune::cli
