#include "microtune/classifier.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "binio.hpp"

namespace microtune::classifier {

ClassifierBank init_classifiers(const DescriptionEmbeddingSet& set, const InitOptions& options) {
  const std::size_t C = set.classes();
  if (C == 0 || set.dim == 0) throw std::invalid_argument("init_classifiers: empty description set");
  ClassifierBank bank;
  bank.w_llm = Matrix(C, set.dim);
  for (std::size_t c = 0; c < C; ++c) {
    const auto& embeddings = set.per_class[c];
    if (embeddings.empty()) throw std::invalid_argument("class " + std::to_string(c) + " has no descriptions");
    auto row = bank.w_llm.row(c);
    double norm_sum = 0.0;
    for (const Vec& e : embeddings) {
      if (e.size() != set.dim) throw std::invalid_argument("class " + std::to_string(c) + ": embedding dim mismatch");
      const double n = linalg::norm2(e);
      if (options.normalize_descriptions && !(n > 0.0)) throw linalg::NumericError("degenerate embedding");
      norm_sum += options.normalize_descriptions ? 1.0 : n;
      linalg::axpy(options.normalize_descriptions ? 1.0 / n : 1.0, e, row);
    }
    const double inv = 1.0 / static_cast<double>(embeddings.size());
    for (double& x : row) x *= inv;
    if (!(linalg::norm2(row) > options.degenerate_ratio * norm_sum * inv))
      throw linalg::NumericError("degenerate prototype");
    bank.class_names.push_back("class" + std::to_string(c));
  }
  if (!bank.w_llm.all_finite()) throw linalg::NumericError("non-finite description embedding");
  bank.w_llm_star = bank.w_llm;
  return bank;
}

DescriptionEmbeddingSet load_descriptions(const std::filesystem::path& path,
                                          std::optional<std::size_t> expected_classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open description file " + path.string());
  if (!binio::try_get_magic(in, "MCDE", "MCDE header")) throw binio::FormatError("empty description file");
  const std::uint32_t version = binio::get_u32(in, "MCDE header");
  if (version != kMcdeVersion) throw binio::FormatError("unsupported MCDE version " + std::to_string(version));
  const std::uint32_t C = binio::get_u32(in, "MCDE header");
  const std::uint32_t dim = binio::get_u32(in, "MCDE header");
  if (C == 0 || dim == 0) throw binio::FormatError("MCDE header has zero classes or zero dim");
  if (expected_classes && *expected_classes != C) {
    throw std::invalid_argument("description file has " + std::to_string(C) + " classes, dataset has " +
                                std::to_string(*expected_classes));
  }
  DescriptionEmbeddingSet set;
  set.dim = dim;
  set.per_class.resize(C);
  for (std::uint32_t c = 0; c < C; ++c) {
    const std::string where = "MCDE record for class " + std::to_string(c);
    const std::uint32_t M = binio::get_u32(in, where.c_str());
    if (M == 0) throw std::invalid_argument("class " + std::to_string(c) + " has no descriptions");
    set.per_class[c].assign(M, Vec(dim));
    for (auto& e : set.per_class[c]) {
      for (double& x : e) {
        x = binio::get_f32(in, where.c_str());
        if (!std::isfinite(x)) throw binio::FormatError(where + ": non-finite value");
      }
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw binio::FormatError("trailing bytes after MCDE records");
  return set;
}

void save_descriptions(const std::filesystem::path& path, const DescriptionEmbeddingSet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  binio::put_magic(out, "MCDE");
  binio::put_u32(out, kMcdeVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(set.classes()));
  binio::put_u32(out, static_cast<std::uint32_t>(set.dim));
  for (const auto& cls : set.per_class) {
    binio::put_u32(out, static_cast<std::uint32_t>(cls.size()));
    for (const Vec& e : cls) {
      if (e.size() != set.dim) throw std::invalid_argument("save_descriptions: embedding dim mismatch");
      for (double x : e) binio::put_f32(out, x);
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace microtune::classifier
