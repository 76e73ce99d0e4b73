#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "microtune/cli.hpp"

using namespace microtune;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "microtune");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

std::size_t count_files(const fs::path& dir, const std::string& suffix) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().filename().string().ends_with(suffix);
  return n;
}

// A small dataset shared by the tests in this file.
const fs::path& dataset() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "microtune_cli_data";
    fs::remove_all(d);
    const auto r = run({"generate", "--data", d.string(), "--classes", "2", "--per-class", "10", "--seed", "3"});
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

std::vector<std::string> small_train(const fs::path& out, const std::string& epochs = "2") {
  return {"train", "--data", dataset().string(), "--out", out.string(), "--epochs", epochs, "--batch", "8", "-N", "2"};
}

}  // namespace

TEST_CASE("generate writes a manifest with the requested classes and is repeatable") {
  const auto a = scratch("microtune_cli_gen_a"), b = scratch("microtune_cli_gen_b");
  for (const auto& d : {a, b})
    CHECK(run({"generate", "--data", d.string(), "--classes", "8", "--per-class", "5", "--seed", "7"}).code == 0);
  std::ifstream in(a / "train.tsv");
  std::set<std::string> labels;
  for (std::string line; std::getline(in, line);) labels.insert(line.substr(line.rfind('\t') + 1));
  CHECK(labels.size() == 8);
  for (const char* f : {"train.tsv", "test.tsv", "glyphs.tsv", "descriptions.mcde"}) CHECK(slurp(a / f) == slurp(b / f));
  for (const auto& e : fs::directory_iterator(a / "images"))
    CHECK(slurp(e.path()) == slurp(b / "images" / e.path().filename()));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("usage and configuration errors exit with 2") {
  auto r = run({"generate", "--no-such-flag", "1"});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.err.find("Usage") != std::string::npos);
  CHECK(run({}).code == cli::kExitUsage);
  CHECK(run({"generate", "--classes", "many"}).code == cli::kExitUsage);
  CHECK(run({"train", "--data", dataset().string(), "--gamma", "2"}).code == cli::kExitUsage);
  // Missing inputs.
  CHECK(run({"train", "--data", (fs::temp_directory_path() / "microtune_nowhere").string()}).code == cli::kExitUsage);
  CHECK(run({"evaluate", "--data", dataset().string(), "--checkpoint", "/nonexistent.mcck"}).code == cli::kExitUsage);
  CHECK(run({"train", "--epochs", "1", "--epochs", "2"}).code == cli::kExitUsage);
  CHECK(run({"train", "--help"}).code == cli::kExitOk);
}

TEST_CASE("dump-config round-trips through a config file") {
  auto first = run({"train", "--gamma", "0.25", "--fusion", "local-only", "--lr", "3e-4", "--dump-config"});
  REQUIRE(first.code == 0);
  CHECK(first.out.find("gamma = 0.25") != std::string::npos);
  CHECK(first.out.find("fusion = local-only") != std::string::npos);
  const auto path = fs::temp_directory_path() / "microtune_cli_dump.cfg";
  std::ofstream(path) << first.out;
  const auto second = run({"train", "--config", path.string(), "--dump-config"});
  CHECK(second.out == first.out);
  // Flags override the file.
  const auto third = run({"train", "--config", path.string(), "--gamma", "0.75", "--dump-config"});
  CHECK(third.out.find("gamma = 0.75") != std::string::npos);
  fs::remove(path);
}

TEST_CASE("the environment seed is a fallback below the seed flag") {
  ::setenv("MICROTUNE_SEED", "99", 1);
  const auto env = run({"generate", "--dump-config"});
  const auto flag = run({"generate", "--seed", "5", "--dump-config"});
  ::unsetenv("MICROTUNE_SEED");
  CHECK(env.out.find("seed = 99") != std::string::npos);
  CHECK(flag.out.find("seed = 5") != std::string::npos);
}

TEST_CASE("training twice with one seed gives identical outputs") {
  const auto a = scratch("microtune_cli_train_a"), b = scratch("microtune_cli_train_b");
  const auto ra = run(small_train(a));
  const auto rb = run(small_train(b));
  REQUIRE(ra.code == 0);
  REQUIRE(rb.code == 0);
  CHECK(ra.out.find("final: epochs 2 eval_top1") != std::string::npos);
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(slurp(a / "audit.csv") == slurp(b / "audit.csv"));
  CHECK(count_lines(a / "metrics.csv") == 1 + 3);
  for (const char* ck : {"epoch_000.mcck", "epoch_001.mcck", "epoch_002.mcck"})
    CHECK(slurp(a / "checkpoints" / ck) == slurp(b / "checkpoints" / ck));

  const auto eval = run({"evaluate", "--data", dataset().string(), "--checkpoint",
                         (a / "checkpoints" / "epoch_002.mcck").string()});
  CHECK(eval.code == 0);
  CHECK(eval.out.find("eval_top1") != std::string::npos);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("gamma 1 takes every pseudo-label from the multi-view path") {
  const auto dir = scratch("microtune_cli_gamma1");
  auto args = small_train(dir, "1");
  args.insert(args.end(), {"--gamma", "1"});
  REQUIRE(run(args).code == 0);
  std::ifstream in(dir / "audit.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,image_id,label,blended_margin,gamma,clip_argmax,tf_argmax,true_label");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    REQUIRE(f.size() >= 7);
    CHECK(f[4] == "1");
    CHECK(f[2] == f[5]);
    ++rows;
  }
  CHECK(rows > 0);
  fs::remove_all(dir);
}

TEST_CASE("exports: masks, attention and the pseudo-label curve") {
  const auto dir = scratch("microtune_cli_export");
  auto args = small_train(dir);
  REQUIRE(run(args).code == 0);
  const auto ckpt = (dir / "checkpoints" / "epoch_002.mcck").string();

  const auto masks = dir / "masks";
  REQUIRE(run({"export", "--data", dataset().string(), "--checkpoint", ckpt, "--what", "masks", "--limit", "4", "--out",
               masks.string()})
              .code == 0);
  CHECK(count_files(masks, ".pgm") == 4);
  CHECK(count_lines(masks / "masks.csv") == 1 + 4);
  CHECK(slurp(masks / fs::directory_iterator(masks)->path().filename()).size() > 0);

  const auto att = dir / "attention";
  REQUIRE(run({"export", "--data", dataset().string(), "--checkpoint", ckpt, "--what", "attention", "--limit", "3",
               "--out", att.string()})
              .code == 0);
  CHECK(count_files(att, "_attention.csv") == 3);
  for (const auto& e : fs::directory_iterator(att)) CHECK(count_lines(e.path()) == 1 + 49 + 1);

  const auto curve = dir / "curve";
  REQUIRE(run({"export", "--checkpoint", ckpt, "--what", "pl-curve", "--out", curve.string()}).code == 0);
  CHECK(count_lines(curve / "pl_curve.csv") == 1 + 2);
  CHECK(run({"export", "--checkpoint", ckpt, "--what", "histogram"}).code == cli::kExitUsage);
  fs::remove_all(dir);
}

TEST_CASE("ablate: a gamma sweep gives one row per value, an empty grid is rejected") {
  const auto dir = scratch("microtune_cli_ablate");
  const auto r = run({"ablate", "--data", dataset().string(), "--out", dir.string(), "--epochs", "1", "-N", "2",
                      "--sweep", "gamma=0,0.5,1"});
  REQUIRE(r.code == 0);
  CHECK(count_lines(dir / "ablation.csv") == 1 + 3);
  std::ifstream in(dir / "ablation.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "setting,eval_top1,wall_time,peak_memory_estimate");

  CHECK(run({"ablate", "--data", dataset().string(), "--out", dir.string()}).code == cli::kExitUsage);
  CHECK(run({"ablate", "--data", dataset().string(), "--out", dir.string(), "--sweep", "gamma="}).code ==
        cli::kExitUsage);
  fs::remove_all(dir);
}

TEST_CASE("ablate: wall time grows with the number of crops") {
  const auto dir = scratch("microtune_cli_ablate_n");
  std::vector<cli::AblationRow> rows;
  cli::RunConfig config;
  config.data = dataset();
  config.out = dir;
  config.train.epochs = 1;
  config.sweeps = {"crops=1,8,16"};
  std::ostringstream log;
  rows = cli::run_ablation(config, log);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].wall_time < rows[1].wall_time);
  CHECK(rows[1].wall_time < rows[2].wall_time);
  CHECK(rows[0].peak_memory_estimate < rows[2].peak_memory_estimate);
  fs::remove_all(dir);
}

TEST_CASE("a diverging run aborts with exit 1 and names the last checkpoint") {
  const auto dir = scratch("microtune_cli_nan");
  auto args = small_train(dir, "3");
  args.insert(args.end(), {"--lr", "1e300"});
  const auto r = run(args);
  CHECK(r.code == cli::kExitRuntime);
  CHECK(r.err.find("last checkpoint:") != std::string::npos);
  CHECK(r.err.find("epoch_") != std::string::npos);
  fs::remove_all(dir);
}
