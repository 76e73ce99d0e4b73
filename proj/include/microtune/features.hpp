#pragma once

// Feature-record container ("MCFT") and the dataset manifest.
//
// MCFT record: "MCFT", u32 version = 1, u32 n_tokens, u32 dim, u32 flags
// (bit0: penultimate tokens present, bit1: CLS present), then little-endian
// f32 arrays [x_patch_last, x_patch_penult?, v_cls?], row-major. A file may
// hold several records back to back.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "microtune/encoder.hpp"

namespace microtune::encoder {

inline constexpr std::uint32_t kMcftVersion = 1;

void write_mcft(std::ostream& out, const PatchTokenGrid& grid);
/// Returns nullopt at a clean end of stream.
std::optional<PatchTokenGrid> read_mcft(std::istream& in);

void write_mcft_file(const std::filesystem::path& path, std::span<const PatchTokenGrid> records);
std::vector<PatchTokenGrid> read_mcft_file(const std::filesystem::path& path);

struct ManifestRecord {
  std::string id;
  std::filesystem::path path;
  int label = -1;  // -1 when unlabeled
};

/// Tab-separated `id<TAB>path<TAB>label_or_-1`. Relative paths resolve
/// against the manifest's directory.
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, std::span<const ManifestRecord> records);

}  // namespace microtune::encoder
