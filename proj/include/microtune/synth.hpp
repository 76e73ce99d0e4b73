#pragma once

// Procedural fine-grained benchmark: smooth value-noise backgrounds with a
// small class glyph. Every class shares one base glyph and differs from it
// by a few mirrored pixel pairs, so class identity lives in one 8x8 region.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "microtune/classifier.hpp"
#include "microtune/encoder.hpp"
#include "microtune/features.hpp"

namespace microtune::synth {

using linalg::Matrix;
using linalg::Vec;

struct SynthSpec {
  std::size_t classes = 8;
  std::size_t per_class = 40;
  std::size_t image_side = 56;
  std::size_t glyph = 8;
  // Grid-aligned glyphs sit exactly on one patch cell; otherwise the
  // top-left corner is uniform over the interior.
  bool grid_aligned = true;
  std::size_t border = 8;         // glyphs keep at least this far from the edge
  std::size_t texture_cell = 14;  // value-noise lattice spacing
  double texture_amplitude = 0.15;
  double glyph_contrast = 1.0;
  std::size_t class_delta = 6;  // mirrored pixel pairs that differ from the base glyph
  // Each class also shifts the glyph's mean level by this much per class
  // index, a coarse cue that survives cropping and rescaling.
  double class_level_step = 0.0;
  double pixel_noise = 0.02;
  double train_fraction = 0.8;
  std::uint64_t seed = 7;

  void validate() const;
};

struct GlyphRecord {
  std::string id;
  int label = 0;
  std::size_t top = 0;
  std::size_t left = 0;
  bool train = true;
};

struct GeneratedDataset {
  std::vector<encoder::ManifestRecord> train;
  std::vector<encoder::ManifestRecord> test;
  std::vector<GlyphRecord> glyphs;
};

/// C glyphs, each glyph x glyph with values in {0, 1}, horizontally symmetric.
std::vector<Image> glyph_codebook(const SynthSpec& spec);

/// Smooth background only (no glyph), deterministic in (spec.seed, id).
Image render_background(const SynthSpec& spec, const std::string& id);
/// Paints glyph `label` over `image` at (top, left).
void paint_glyph(Image& image, const SynthSpec& spec, const std::vector<Image>& codebook, int label,
                 std::size_t top, std::size_t left);

/// Writes images/<id>.pgm, train.tsv, test.tsv and glyphs.tsv under out_dir.
/// The train/test split is stratified per class.
GeneratedDataset generate(const SynthSpec& spec, const std::filesystem::path& out_dir);

std::vector<GlyphRecord> read_glyphs(const std::filesystem::path& path);

struct DescriptionOptions {
  std::size_t per_class = 5;
  double noise = 0.1;  // per-description perturbation, relative to a unit anchor
  // Aligned anchors start from the encoder's response to each glyph and are
  // then rotated away from it by this amount before re-orthonormalization.
  double anchor_offset = 3.0;
  // Leading directions of background-only pooled embeddings and of global
  // embeddings removed from each anchor (per source).
  std::size_t shared_components = 4;
  // Blend between the glyph's effect on the pooled local embedding (0) and
  // on the global embedding (1).
  double global_weight = 0.0;
  std::size_t probe_crops = 4;  // zoomed crops per probe image for the global effect
  double crop_min = 0.5;
  double crop_max = 0.9;
  double crop_effect = 0.0;  // weight of the zoomed crops in the global glyph effect
  std::uint64_t seed = 11;
};

/// Orthonormal anchors drawn at random (no encoder involved).
Matrix random_anchors(std::size_t classes, std::size_t dim, std::uint64_t seed);
/// Anchors derived from the frozen encoder's view of each glyph on a flat
/// background, with directions shared by all images projected out.
Matrix aligned_anchors(const SynthSpec& spec, const encoder::EncoderWeights& encoder, const DescriptionOptions& options);

/// per_class unit vectors normalize(anchor + noise) per class.
classifier::DescriptionEmbeddingSet descriptions_from_anchors(const Matrix& anchors, const DescriptionOptions& options);

/// Symmetric orthonormalization: A (A^T A)^{-1/2} on the rows of `rows`.
Matrix lowdin_orthonormalize(const Matrix& rows);

}  // namespace microtune::synth
