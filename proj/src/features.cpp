#include "microtune/features.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "binio.hpp"

namespace microtune::encoder {

namespace {

constexpr std::uint32_t kHasPenult = 1U;
constexpr std::uint32_t kHasCls = 2U;

Matrix read_block(std::istream& in, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (double& x : m.data()) x = binio::get_f32(in, "MCFT token data");
  return m;
}

}  // namespace

void write_mcft(std::ostream& out, const PatchTokenGrid& grid) {
  grid.validate();
  if (grid.x_patch_last.empty()) throw std::invalid_argument("write_mcft: final-layer tokens are required");
  std::uint32_t flags = 0;
  if (!grid.x_patch_penult.empty()) flags |= kHasPenult;
  if (grid.has_cls()) flags |= kHasCls;
  binio::put_magic(out, "MCFT");
  binio::put_u32(out, kMcftVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(grid.n()));
  binio::put_u32(out, static_cast<std::uint32_t>(grid.d()));
  binio::put_u32(out, flags);
  for (double x : grid.x_patch_last.data()) binio::put_f32(out, x);
  if (flags & kHasPenult)
    for (double x : grid.x_patch_penult.data()) binio::put_f32(out, x);
  if (flags & kHasCls)
    for (double x : grid.v_cls) binio::put_f32(out, x);
}

std::optional<PatchTokenGrid> read_mcft(std::istream& in) {
  if (!binio::try_get_magic(in, "MCFT", "MCFT record")) return std::nullopt;
  const std::uint32_t version = binio::get_u32(in, "MCFT header");
  if (version != kMcftVersion) throw binio::FormatError("unsupported MCFT version " + std::to_string(version));
  const std::uint32_t n = binio::get_u32(in, "MCFT header");
  const std::uint32_t d = binio::get_u32(in, "MCFT header");
  const std::uint32_t flags = binio::get_u32(in, "MCFT header");
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (n == 0 || d == 0 || side * side != n) {
    std::ostringstream os;
    os << "MCFT record has " << n << " tokens of dim " << d << "; token count must be a nonzero square";
    throw binio::FormatError(os.str());
  }
  if (flags & ~(kHasPenult | kHasCls)) throw binio::FormatError("MCFT record has unknown flag bits");
  PatchTokenGrid grid;
  grid.grid_side = side;
  grid.x_patch_last = read_block(in, n, d);
  if (flags & kHasPenult) grid.x_patch_penult = read_block(in, n, d);
  if (flags & kHasCls) grid.v_cls = read_block(in, 1, d).data();
  grid.validate();
  return grid;
}

void write_mcft_file(const std::filesystem::path& path, std::span<const PatchTokenGrid> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) write_mcft(out, r);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<PatchTokenGrid> read_mcft_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<PatchTokenGrid> out;
  while (auto rec = read_mcft(in)) out.push_back(std::move(*rec));
  return out;
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find('\t', start)) != std::string::npos; start = pos + 1)
      fields.push_back(line.substr(start, pos - start));
    fields.push_back(line.substr(start));
    auto fail = [&](const std::string& why) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    if (fields.size() != 3) fail("expected 3 tab-separated fields");
    ManifestRecord rec;
    rec.id = fields[0];
    if (rec.id.empty()) fail("empty id");
    rec.path = fields[1];
    if (rec.path.is_relative()) rec.path = base / rec.path;
    try {
      std::size_t used = 0;
      rec.label = std::stoi(fields[2], &used);
      if (used != fields[2].size()) fail("bad label '" + fields[2] + "'");
    } catch (const std::logic_error&) {
      fail("bad label '" + fields[2] + "'");
    }
    if (rec.label < -1) fail("label must be >= -1");
    out.push_back(std::move(rec));
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, std::span<const ManifestRecord> records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) out << r.id << '\t' << r.path.generic_string() << '\t' << r.label << '\n';
}

}  // namespace microtune::encoder
