#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "metabdc/array.hpp"

namespace metabdc {

/// Mann-Whitney estimate P(s+ > s-) + 0.5 P(s+ = s-). Labels are 0/1.
/// Throws when either class is absent.
double auroc_binary(std::span<const double> scores, std::span<const int> labels);

struct OvrAuroc {
  double mean = 0.0;
  std::vector<std::size_t> evaluated;  // classes that had positives and negatives
  std::vector<double> per_class;       // aligned with `evaluated`
  std::vector<std::size_t> skipped;    // columns with no sample of that class
};

/// Unweighted mean over classes of class-k-vs-rest AUROC on column k.
/// `scores` is [n, C]; needs at least two classes present.
OvrAuroc auroc_multiclass_ovr(const ArrayD& scores, std::span<const std::size_t> labels);

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample std over repeat means; 0 for a single repeat
  std::vector<double> repeat_means;
};

/// `per_repeat[r]` holds the episode AUROCs of repeat r.
MetricSummary aggregate_episode_metrics(const std::vector<std::vector<double>>& per_repeat);

struct MetricRow {
  std::string run_id;
  std::string phase;
  std::size_t episode = 0;
  std::size_t repeat = 0;
  double auroc = 0.0;
};

/// Columns run_id, phase, episode, repeat, auroc. Values are printed with
/// round-trip precision so identical results give identical bytes.
void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricRow> rows);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace metabdc
