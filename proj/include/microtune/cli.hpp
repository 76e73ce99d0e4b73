#pragma once

// Command-line front end: generate, train, evaluate, export, ablate.
// Exit codes: 0 ok, 1 runtime failure, 2 usage/config/input error.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "microtune/encoder.hpp"
#include "microtune/synth.hpp"
#include "microtune/trainer.hpp"

namespace microtune::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Bad configuration value or missing input; maps to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::filesystem::path data = "data";
  std::filesystem::path train_manifest;  // empty: <data>/train.tsv
  std::filesystem::path test_manifest;   // empty: <data>/test.tsv
  std::filesystem::path descriptions;    // empty: <data>/descriptions.mcde
  std::filesystem::path out = "run";
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;  // pl-curve source; empty: <checkpoint dir>/../metrics.csv

  trainer::TrainConfig train;
  encoder::EncoderConfig encoder;
  std::uint64_t encoder_seed = 2024;
  bool normalize_descriptions = false;

  synth::SynthSpec synth;
  synth::DescriptionOptions desc;
  std::string description_kind = "aligned";  // aligned|random

  std::string export_what = "masks";  // masks|attention|pl-curve
  std::size_t export_limit = 0;       // 0: every image

  std::vector<std::string> sweeps;  // key=v1,v2,...

  std::filesystem::path train_manifest_path() const;
  std::filesystem::path test_manifest_path() const;
  std::filesystem::path descriptions_path() const;
};

/// Canonical `key = value` text for every option `command` accepts. Reading
/// it back with --config reproduces the same text.
std::string dump_config(const RunConfig& config, const std::string& command);

/// Applies one `key = value` setting. Throws ConfigError for an unknown key
/// or an unparsable value.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);
/// Parses a flat config file (`#` comments, blank lines ignored).
void apply_config_file(RunConfig& config, const std::filesystem::path& path, const std::string& command);

struct TrainSummary {
  double epoch0_top1 = 0.0;
  double final_top1 = 0.0;
  double final_pl_accuracy = -1.0;
  std::size_t epochs = 0;
  double frozen_checksum_before = 0.0;
  double frozen_checksum_after = 0.0;
  std::filesystem::path last_checkpoint;
};

/// Full self-training run: writes <out>/metrics.csv, <out>/audit.csv,
/// <out>/run.cfg and <out>/checkpoints/epoch_NNN.mcck (epoch 0 included).
/// Throws trainer::NonFiniteLoss with the last checkpoint path in the message.
TrainSummary run_training(const RunConfig& config, std::ostream& log);

struct AblationRow {
  std::string setting;
  double eval_top1 = 0.0;
  double wall_time = 0.0;  // seconds
  std::size_t peak_memory_estimate = 0;  // bytes
};

/// Cartesian product of the sweeps; each point is one training run under
/// <out>/<index>. Throws ConfigError when the grid is empty.
std::vector<AblationRow> run_ablation(const RunConfig& config, std::ostream& log);
void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

/// Rough resident-size estimate of one training run in bytes.
std::size_t estimate_peak_memory(const RunConfig& config, std::size_t train_size);

int cmd_generate(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_train(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_evaluate(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_export(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_ablate(const RunConfig& config, std::ostream& out, std::ostream& err);

/// Entry point shared by the executable and the tests.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace microtune::cli
