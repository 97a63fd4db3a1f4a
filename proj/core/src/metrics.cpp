#include "metabdc/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "metabdc/error.hpp"

namespace metabdc {

namespace {

// Mid-rank formulation; all intermediate sums are multiples of 0.5 and stay
// exact in double for any realistic sample count.
double auroc_from_ranks(std::span<const double> scores, const std::vector<bool>& positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  double n_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j + 2);  // 1-based mid rank
    for (std::size_t k = i; k <= j; ++k) {
      if (positive[order[k]]) {
        rank_sum += mid;
        n_pos += 1.0;
      }
    }
    i = j + 1;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

}  // namespace

double auroc_binary(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auroc_binary: scores and labels differ in length");
  std::vector<bool> positive(scores.size());
  std::size_t pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw Error("auroc_binary: labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw NumericError("auroc_binary: non-finite score");
    positive[i] = labels[i] == 1;
    pos += positive[i] ? 1 : 0;
  }
  if (pos == 0 || pos == labels.size()) {
    throw Error("auroc_binary: undefined with a single class present");
  }
  return auroc_from_ranks(scores, positive);
}

OvrAuroc auroc_multiclass_ovr(const ArrayD& scores, std::span<const std::size_t> labels) {
  if (scores.rank() != 2) throw ShapeError("auroc_multiclass_ovr: scores must be [n, C]");
  const std::size_t n = scores.dim(0), c = scores.dim(1);
  if (labels.size() != n) throw ShapeError("auroc_multiclass_ovr: label count differs from rows");
  if (!scores.all_finite()) throw NumericError("auroc_multiclass_ovr: non-finite score");
  std::vector<std::size_t> count(c, 0);
  for (std::size_t y : labels) {
    if (y >= c) throw Error("auroc_multiclass_ovr: label " + std::to_string(y) + " has no column");
    ++count[y];
  }
  OvrAuroc out;
  std::vector<double> column(n);
  std::vector<bool> positive(n);
  for (std::size_t k = 0; k < c; ++k) {
    if (count[k] == 0) {
      out.skipped.push_back(k);
      continue;
    }
    if (count[k] == n) continue;
    for (std::size_t i = 0; i < n; ++i) {
      column[i] = scores.at(i, k);
      positive[i] = labels[i] == k;
    }
    out.evaluated.push_back(k);
    out.per_class.push_back(auroc_from_ranks(column, positive));
  }
  if (out.evaluated.size() < 2) {
    throw Error("auroc_multiclass_ovr: need at least two classes present");
  }
  double s = 0.0;
  for (double v : out.per_class) s += v;
  out.mean = s / static_cast<double>(out.per_class.size());
  return out;
}

MetricSummary aggregate_episode_metrics(const std::vector<std::vector<double>>& per_repeat) {
  if (per_repeat.empty()) throw Error("aggregate_episode_metrics: no repeats");
  MetricSummary out;
  for (std::size_t r = 0; r < per_repeat.size(); ++r) {
    const auto& eps = per_repeat[r];
    if (eps.empty()) throw Error("aggregate_episode_metrics: repeat " + std::to_string(r) + " is empty");
    double s = 0.0;
    for (double v : eps) s += v;
    out.repeat_means.push_back(s / static_cast<double>(eps.size()));
  }
  double s = 0.0;
  for (double v : out.repeat_means) s += v;
  out.mean = s / static_cast<double>(out.repeat_means.size());
  if (out.repeat_means.size() > 1) {
    double ss = 0.0;
    for (double v : out.repeat_means) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(out.repeat_means.size() - 1));
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write metrics CSV '" + path.string() + "'");
  out << "run_id,phase,episode,repeat,auroc\n";
  for (const auto& r : rows) {
    out << r.run_id << ',' << r.phase << ',' << r.episode << ',' << r.repeat << ','
        << format_double(r.auroc) << '\n';
  }
  if (!out) throw Error("failed writing metrics CSV '" + path.string() + "'");
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open metrics CSV '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  if (line != "run_id,phase,episode,repeat,auroc") {
    throw FormatError("metrics CSV '" + path.string() + "' has an unexpected header");
  }
  std::vector<MetricRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) {
      throw FormatError("metrics CSV line " + std::to_string(line_no) + ": expected 5 fields");
    }
    try {
      rows.push_back({f[0], f[1], std::stoul(f[2]), std::stoul(f[3]), std::stod(f[4])});
    } catch (const std::exception&) {
      throw FormatError("metrics CSV line " + std::to_string(line_no) + ": malformed number");
    }
  }
  return rows;
}

}  // namespace metabdc
