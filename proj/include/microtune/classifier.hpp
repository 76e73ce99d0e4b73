#pragma once

// Two-headed prototype classifier built from description embeddings.
//
// Description file ("MCDE"): "MCDE", u32 version = 1, u32 C, u32 d_shared,
// then per class u32 M followed by M x d_shared little-endian f32.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "microtune/linalg.hpp"

namespace microtune::classifier {

using linalg::Matrix;
using linalg::Vec;

inline constexpr std::uint32_t kMcdeVersion = 1;

struct DescriptionEmbeddingSet {
  std::size_t dim = 0;
  std::vector<std::vector<Vec>> per_class;  // per_class[c][m] has `dim` entries

  std::size_t classes() const { return per_class.size(); }
};

struct ClassifierBank {
  Matrix w_llm;       // C x d_shared, frozen
  Matrix w_llm_star;  // C x d_shared, trained
  std::vector<std::string> class_names;

  std::size_t classes() const { return w_llm.rows(); }
  std::size_t dim() const { return w_llm.cols(); }
};

struct InitOptions {
  // L2-normalize each description embedding before averaging.
  bool normalize_descriptions = false;
  // A prototype whose norm falls below this fraction of the mean embedding
  // norm is rejected as degenerate.
  double degenerate_ratio = 1e-6;
};

/// Row j of both heads = mean of class j's embeddings. Throws
/// std::invalid_argument("class j has no descriptions") or
/// NumericError("degenerate prototype").
ClassifierBank init_classifiers(const DescriptionEmbeddingSet& set, const InitOptions& options = {});

/// Throws when the file is malformed or, if expected_classes is given, when
/// the class count disagrees with it.
DescriptionEmbeddingSet load_descriptions(const std::filesystem::path& path,
                                          std::optional<std::size_t> expected_classes = std::nullopt);
void save_descriptions(const std::filesystem::path& path, const DescriptionEmbeddingSet& set);

}  // namespace microtune::classifier
