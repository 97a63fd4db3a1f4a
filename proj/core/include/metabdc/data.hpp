#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metabdc/array.hpp"
#include "metabdc/rng.hpp"

namespace metabdc {

struct LabeledImage {
  ArrayF pixels;  // H x W x C
  std::size_t fine = 0;
  std::size_t coarse = 0;
  std::string group;   // patient / volume analogue
  std::string domain;  // vendor analogue
  double px = 1.0;     // mm per pixel, columns
  double py = 1.0;     // mm per pixel, rows
  double centroid_row = 0.0;
  double centroid_col = 0.0;
};

struct HierarchySpec {
  std::vector<std::size_t> fine_to_coarse;
  std::size_t n_coarse = 0;

  std::size_t n_fine() const { return fine_to_coarse.size(); }
  std::size_t coarse_of(std::size_t fine) const;
  /// Total, surjective, and strictly fewer coarse than fine classes.
  void validate() const;
};

enum class LabelSpace { fine, coarse };

struct EpisodeSpec {
  std::size_t n_way = 4;
  std::size_t k_shot = 5;
  std::size_t q_query = 10;
  LabelSpace label_space = LabelSpace::coarse;

  void validate(std::size_t available_classes) const;
};

/// Indices refer to the image list the episode was sampled from.
struct Episode {
  std::vector<std::size_t> classes;         // label value for local class c
  std::vector<std::size_t> support;         // N*K, grouped by local class
  std::vector<std::size_t> support_labels;  // local class ids
  std::vector<std::size_t> query;           // N*Q, grouped by local class
  std::vector<std::size_t> query_labels;
};

struct Dataset {
  HierarchySpec hierarchy;
  std::vector<LabeledImage> images;
};

std::size_t label_of(const LabeledImage& img, LabelSpace space);

// Synthetic generation -----------------------------------------------------------

/// Acquisition characteristics of one domain tag.
struct DomainStyle {
  std::string tag = "S";
  std::size_t images_per_class = 40;
  double gain = 1.0;
  double gamma = 1.0;
  double noise = 0.25;
  /// Gaussian blur sigma in mm; 0 disables.
  double blur_mm = 0.0;
  /// Fraction of images carrying a burned-in annotation marker whose
  /// position encodes the coarse label (a label-correlated artifact).
  double marker_probability = 0.0;
};

/// Texture families: 0 oriented gratings (fine = orientation in 22.5 degree
/// steps, coarse = adjacent orientation pairs, frequency is a nuisance),
/// 1 checkerboards (coarse = cell frequency, fine = rotation), 2 ring
/// patterns (coarse = radial frequency, fine = angular order).
struct SyntheticConfig {
  std::size_t family = 0;
  HierarchySpec hierarchy;
  std::vector<DomainStyle> domains;
  std::size_t raw_size = 160;
  double spacing_min = 0.65;
  double spacing_max = 0.9;
  /// Maximum centroid displacement from the image center, mm.
  double centroid_jitter_mm = 10.0;
  std::size_t group_size = 4;
  /// Nuisance factors, independent of class.
  double intensity_bias = 0.3;
  double rotation_jitter_deg = 10.0;
  double contrast_jitter = 0.3;
  /// Label-free prefix for group ids, so several sets can coexist.
  std::string group_prefix = "g";
  std::uint64_t seed = 1;

  /// Default hierarchy for each family.
  static SyntheticConfig family_default(std::size_t family);
  void validate() const;
};

Dataset generate_synthetic(const SyntheticConfig& config);

// Preprocessing ----------------------------------------------------------------

/// round-half-up(fov / spacing).
std::size_t fov_pixels(double fov_mm, double spacing_mm);

/// Field-of-view crop centered on the centroid (zero padded outside the
/// image), then area-averaging resize to out_size x out_size. No intensity
/// normalization.
LabeledImage preprocess_image(const LabeledImage& img, double centroid_row, double centroid_col,
                              double fov_mm, std::size_t out_size);

/// In-place z-score using the mean and std over all pixels of all images in
/// the span. Throws NumericError when the std is below 1e-8.
void zscore_volume(std::span<LabeledImage> images);

/// preprocess_image on every image (at its stored centroid) and z-score per
/// group id.
Dataset preprocess_dataset(const Dataset& raw, double fov_mm, std::size_t out_size);

/// Mean (row, col) of nonzero mask pixels; throws on an empty mask.
std::pair<double, double> mask_centroid(const ArrayF& mask);

// Splitting and episodes -----------------------------------------------------------

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Group-level split; targets are round(fraction * N) images of the whole
/// dataset. Train draws only from `train_tag`, val/test only from `eval_tag`.
/// Groups are visited class-interleaved and assigned greedily.
SplitIndices split_dataset(const Dataset& dataset, const std::string& train_tag,
                           const std::string& eval_tag, const SplitFractions& fractions);

/// Draws N distinct classes, then K support and Q query images per class
/// without replacement, from `pool` (indices into `images`).
Episode sample_episode(std::span<const LabeledImage> images, std::span<const std::size_t> pool,
                       const EpisodeSpec& spec, SeededRng& rng);

// Manifest ---------------------------------------------------------------------------

/// Writes `manifest.csv` and per-image arrays under `dir/images/`.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace metabdc
