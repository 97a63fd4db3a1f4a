#include "metabdc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "metabdc/metrics.hpp"
#include "metabdc/serialize.hpp"

namespace metabdc {

std::size_t HierarchySpec::coarse_of(std::size_t fine) const {
  if (fine >= fine_to_coarse.size()) {
    throw Error("hierarchy: fine label " + std::to_string(fine) + " out of range");
  }
  return fine_to_coarse[fine];
}

void HierarchySpec::validate() const {
  if (fine_to_coarse.empty()) throw Error("hierarchy: no fine classes");
  if (n_coarse == 0) throw Error("hierarchy: no coarse classes");
  if (n_coarse >= fine_to_coarse.size()) {
    throw Error("hierarchy: need fewer coarse (" + std::to_string(n_coarse) + ") than fine (" +
                std::to_string(fine_to_coarse.size()) + ") classes");
  }
  std::vector<bool> hit(n_coarse, false);
  for (std::size_t f = 0; f < fine_to_coarse.size(); ++f) {
    const std::size_t c = fine_to_coarse[f];
    if (c >= n_coarse) {
      throw Error("hierarchy: fine class " + std::to_string(f) + " maps to missing coarse class " +
                  std::to_string(c));
    }
    hit[c] = true;
  }
  for (std::size_t c = 0; c < n_coarse; ++c) {
    if (!hit[c]) throw Error("hierarchy: coarse class " + std::to_string(c) + " has no fine class");
  }
}

void EpisodeSpec::validate(std::size_t available_classes) const {
  if (n_way < 2) throw Error("episode: N must be >= 2");
  if (k_shot < 1 || q_query < 1) throw Error("episode: K and Q must be >= 1");
  if (n_way > available_classes) {
    throw Error("episode: N=" + std::to_string(n_way) + " exceeds the " +
                std::to_string(available_classes) + " classes of the label space");
  }
}

std::size_t label_of(const LabeledImage& img, LabelSpace space) {
  return space == LabelSpace::fine ? img.fine : img.coarse;
}

// ------------------------------------------------------------------- synthesis

SyntheticConfig SyntheticConfig::family_default(std::size_t family) {
  SyntheticConfig c;
  c.family = family;
  std::size_t n_fine = 0, per = 0;
  switch (family) {
    case 0:
      n_fine = 8;
      per = 2;
      break;
    case 1:
      n_fine = 12;
      per = 3;
      break;
    case 2:
      n_fine = 10;
      per = 5;
      break;
    default:
      throw Error("synthetic: unknown texture family " + std::to_string(family));
  }
  for (std::size_t f = 0; f < n_fine; ++f) c.hierarchy.fine_to_coarse.push_back(f / per);
  c.hierarchy.n_coarse = n_fine / per;
  c.domains = {DomainStyle{"S", 40, 1.0, 1.0, 0.25, 0.0}, DomainStyle{"P", 40, 0.8, 0.7, 0.4, 1.5}};
  return c;
}

void SyntheticConfig::validate() const {
  hierarchy.validate();
  if (family > 2) throw Error("synthetic: unknown texture family " + std::to_string(family));
  const std::size_t expected = family == 0 ? 8 : family == 1 ? 12 : 10;
  if (hierarchy.n_fine() > expected) {
    throw Error("synthetic: family " + std::to_string(family) + " defines at most " +
                std::to_string(expected) + " fine classes");
  }
  if (domains.empty()) throw Error("synthetic: no domains");
  std::set<std::string> tags;
  for (const auto& d : domains) {
    if (d.tag.empty() || d.tag.find(',') != std::string::npos) throw Error("synthetic: bad domain tag");
    if (!tags.insert(d.tag).second) throw Error("synthetic: duplicate domain tag '" + d.tag + "'");
    if (d.images_per_class == 0) throw Error("synthetic: counts per class must be positive");
    if (!(d.gain > 0.0) || !(d.gamma > 0.0) || d.noise < 0.0 || d.blur_mm < 0.0 ||
        !(d.marker_probability >= 0.0 && d.marker_probability <= 1.0)) {
      throw Error("synthetic: invalid style for domain '" + d.tag + "'");
    }
  }
  if (raw_size < 16) throw Error("synthetic: raw image too small");
  if (!(spacing_min > 0.0) || spacing_min > spacing_max) throw Error("synthetic: bad spacing range");
  if (group_size == 0) throw Error("synthetic: group size must be positive");
}

namespace {

constexpr double kPi = std::numbers::pi;

struct PatternParams {
  double angle = 0.0;  // radians
  double phase = 0.0;
  double phase2 = 0.0;
  double frequency = 0.07;  // cycles per mm, family 0 only
};

// Offset of the annotation marker from the centroid, mm.
constexpr double kMarkerRadiusMm = 34.0;
constexpr double kMarkerHalfMm = 7.0;
constexpr double kMarkerIntensity = 2.5;

// Class-conditional texture at (x, y) in mm relative to the centroid.
double pattern(std::size_t family, std::size_t fine, std::size_t coarse, double x, double y,
               const PatternParams& p) {
  switch (family) {
    case 0: {
      const double theta = static_cast<double>(fine) * kPi / 8.0 + p.angle;
      return std::cos(2.0 * kPi * p.frequency * (x * std::cos(theta) + y * std::sin(theta)) + p.phase);
    }
    case 1: {
      static constexpr double freq[4] = {0.03, 0.045, 0.065, 0.09};
      const double theta = static_cast<double>(fine % 3) * kPi / 6.0 + p.angle;
      const double f = freq[coarse % 4];
      const double u = x * std::cos(theta) + y * std::sin(theta);
      const double v = -x * std::sin(theta) + y * std::cos(theta);
      return std::tanh(3.0 * std::cos(2.0 * kPi * f * u + p.phase) * std::cos(2.0 * kPi * f * v + p.phase2));
    }
    default: {
      const double r = std::hypot(x, y);
      const double a = std::atan2(y, x);
      const double f = coarse % 2 == 0 ? 0.04 : 0.08;
      const double k = static_cast<double>(fine % 5 + 1);
      return std::cos(2.0 * kPi * f * r + p.phase) * std::cos(k * (a + p.angle));
    }
  }
}

void gaussian_blur(std::vector<double>& img, std::size_t n, double sigma_px) {
  if (sigma_px <= 0.0) return;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma_px));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma_px * sigma_px));
    total += k[i + radius];
  }
  for (double& v : k) v /= total;
  std::vector<double> tmp(img.size(), 0.0);
  const int ni = static_cast<int>(n);
  for (int y = 0; y < ni; ++y) {
    for (int x = 0; x < ni; ++x) {
      double s = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int xx = std::clamp(x + i, 0, ni - 1);
        s += k[i + radius] * img[y * n + xx];
      }
      tmp[y * n + x] = s;
    }
  }
  for (int y = 0; y < ni; ++y) {
    for (int x = 0; x < ni; ++x) {
      double s = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int yy = std::clamp(y + i, 0, ni - 1);
        s += k[i + radius] * tmp[yy * n + x];
      }
      img[y * n + x] = s;
    }
  }
}

}  // namespace

Dataset generate_synthetic(const SyntheticConfig& config) {
  config.validate();
  Dataset ds;
  ds.hierarchy = config.hierarchy;
  const SeededRng root(config.seed, 0x5EED0000ull + config.family);
  const std::size_t n = config.raw_size;
  const double center = (static_cast<double>(n) - 1.0) / 2.0;
  std::size_t counter = 0, group_counter = 0;
  for (const auto& dom : config.domains) {
    for (std::size_t fine = 0; fine < config.hierarchy.n_fine(); ++fine) {
      const std::size_t coarse = config.hierarchy.coarse_of(fine);
      double spacing = 1.0;
      std::string group;
      for (std::size_t i = 0; i < dom.images_per_class; ++i) {
        SeededRng rng = root.fork(counter++);
        if (i % config.group_size == 0) {
          // One spacing per group: a volume comes from one acquisition.
          SeededRng grng = root.fork(0xC0FFEE000000ull + group_counter);
          spacing = grng.uniform(config.spacing_min, config.spacing_max);
          group = config.group_prefix + dom.tag + "-" + std::to_string(group_counter++);
        }
        LabeledImage img;
        img.fine = fine;
        img.coarse = coarse;
        img.group = group;
        img.domain = dom.tag;
        img.px = img.py = spacing;
        const double jr = rng.uniform(-config.centroid_jitter_mm, config.centroid_jitter_mm);
        const double jc = rng.uniform(-config.centroid_jitter_mm, config.centroid_jitter_mm);
        img.centroid_row = center + jr / spacing;
        img.centroid_col = center + jc / spacing;

        PatternParams pp;
        pp.angle = rng.uniform(-config.rotation_jitter_deg, config.rotation_jitter_deg) * kPi / 180.0;
        pp.phase = rng.uniform(0.0, 2.0 * kPi);
        pp.phase2 = rng.uniform(0.0, 2.0 * kPi);
        pp.frequency = rng.uniform(0.05, 0.09);
        const bool marker = rng.uniform() < dom.marker_probability;
        const double marker_angle = 2.0 * kPi * static_cast<double>(coarse) /
                                    static_cast<double>(config.hierarchy.n_coarse) + kPi / 4.0;
        const double mx = kMarkerRadiusMm * std::cos(marker_angle);
        const double my = kMarkerRadiusMm * std::sin(marker_angle);
        const double contrast = 1.0 + rng.uniform(-config.contrast_jitter, config.contrast_jitter);
        const double bias = rng.uniform(-config.intensity_bias, config.intensity_bias);

        std::vector<double> v(n * n);
        for (std::size_t r = 0; r < n; ++r) {
          const double y = (static_cast<double>(r) - img.centroid_row) * spacing;
          for (std::size_t c = 0; c < n; ++c) {
            const double x = (static_cast<double>(c) - img.centroid_col) * spacing;
            const double env = 1.0 / (1.0 + std::exp((std::hypot(x, y) - 40.0) / 3.0));
            double val = 0.5 + bias + contrast * 0.35 * env * pattern(config.family, fine, coarse, x, y, pp);
            if (marker && std::abs(x - mx) <= kMarkerHalfMm && std::abs(y - my) <= kMarkerHalfMm) {
              val += kMarkerIntensity;
            }
            val = dom.gain * std::pow(std::max(val, 0.0), dom.gamma);
            v[r * n + c] = val;
          }
        }
        gaussian_blur(v, n, dom.blur_mm / spacing);
        img.pixels = ArrayF({n, n, 1});
        for (std::size_t k = 0; k < n * n; ++k) {
          img.pixels[k] = static_cast<float>(v[k] + rng.normal(0.0, dom.noise));
        }
        ds.images.push_back(std::move(img));
      }
    }
  }
  return ds;
}

// --------------------------------------------------------------- preprocessing

std::size_t fov_pixels(double fov_mm, double spacing_mm) {
  if (!(spacing_mm > 0.0)) throw Error("pixel spacing must be positive");
  if (!(fov_mm > 0.0)) throw Error("field of view must be positive");
  const double ratio = fov_mm / spacing_mm;
  // Tolerate representation error just below a .5 boundary.
  return static_cast<std::size_t>(std::floor(ratio + 0.5 + 1e-9));
}

namespace {

// Row i of the result averages source cells [i*src/dst, (i+1)*src/dst).
std::vector<std::vector<std::pair<std::size_t, double>>> area_weights(std::size_t src, std::size_t dst) {
  std::vector<std::vector<std::pair<std::size_t, double>>> w(dst);
  const double step = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    const double lo = static_cast<double>(i) * step, hi = lo + step;
    for (std::size_t s = static_cast<std::size_t>(std::floor(lo)); s < src && static_cast<double>(s) < hi; ++s) {
      const double overlap = std::min(hi, static_cast<double>(s + 1)) - std::max(lo, static_cast<double>(s));
      if (overlap > 0.0) w[i].push_back({s, overlap / step});
    }
  }
  return w;
}

}  // namespace

LabeledImage preprocess_image(const LabeledImage& img, double centroid_row, double centroid_col,
                              double fov_mm, std::size_t out_size) {
  if (img.pixels.rank() != 3) throw ShapeError("preprocess: image must be H x W x C");
  if (out_size == 0) throw Error("preprocess: output size must be positive");
  const std::size_t rows = fov_pixels(fov_mm, img.py);
  const std::size_t cols = fov_pixels(fov_mm, img.px);
  if (rows == 0 || cols == 0) throw Error("preprocess: field of view smaller than one pixel");
  const std::size_t h = img.pixels.dim(0), w = img.pixels.dim(1), ch = img.pixels.dim(2);
  const long top = static_cast<long>(std::floor(centroid_row + 0.5)) - static_cast<long>(rows / 2);
  const long left = static_cast<long>(std::floor(centroid_col + 0.5)) - static_cast<long>(cols / 2);

  auto src = [&](std::size_t r, std::size_t c, std::size_t k) -> double {
    const long y = top + static_cast<long>(r), x = left + static_cast<long>(c);
    if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return 0.0;
    return img.pixels[(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * ch + k];
  };
  const auto wr = area_weights(rows, out_size);
  const auto wc = area_weights(cols, out_size);
  // Columns first, then rows.
  std::vector<double> tmp(rows * out_size * ch, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < out_size; ++j) {
      for (std::size_t k = 0; k < ch; ++k) {
        double s = 0.0;
        for (const auto& [c, wt] : wc[j]) s += wt * src(r, c, k);
        tmp[(r * out_size + j) * ch + k] = s;
      }
    }
  }
  LabeledImage out = img;
  out.pixels = ArrayF({out_size, out_size, ch});
  for (std::size_t i = 0; i < out_size; ++i) {
    for (std::size_t j = 0; j < out_size; ++j) {
      for (std::size_t k = 0; k < ch; ++k) {
        double s = 0.0;
        for (const auto& [r, wt] : wr[i]) s += wt * tmp[(r * out_size + j) * ch + k];
        out.pixels[(i * out_size + j) * ch + k] = static_cast<float>(s);
      }
    }
  }
  out.px = static_cast<double>(cols) * img.px / static_cast<double>(out_size);
  out.py = static_cast<double>(rows) * img.py / static_cast<double>(out_size);
  out.centroid_row = (centroid_row - static_cast<double>(top) + 0.5) *
                         static_cast<double>(out_size) / static_cast<double>(rows) - 0.5;
  out.centroid_col = (centroid_col - static_cast<double>(left) + 0.5) *
                         static_cast<double>(out_size) / static_cast<double>(cols) - 0.5;
  return out;
}

void zscore_volume(std::span<LabeledImage> images) {
  if (images.empty()) throw Error("zscore: empty group");
  double sum = 0.0, count = 0.0;
  for (const auto& img : images) {
    for (float v : img.pixels.data()) sum += v;
    count += static_cast<double>(img.pixels.size());
  }
  const double mean = sum / count;
  double ss = 0.0;
  for (const auto& img : images) {
    for (float v : img.pixels.data()) ss += (v - mean) * (v - mean);
  }
  const double sd = std::sqrt(ss / count);
  if (!(sd >= 1e-8)) {
    throw NumericError("zscore: constant volume '" + images.front().group + "' (std " +
                       format_double(sd) + ")");
  }
  for (auto& img : images) {
    for (float& v : img.pixels.data()) v = static_cast<float>((v - mean) / sd);
  }
}

Dataset preprocess_dataset(const Dataset& raw, double fov_mm, std::size_t out_size) {
  Dataset out;
  out.hierarchy = raw.hierarchy;
  out.images.reserve(raw.images.size());
  for (const auto& img : raw.images) {
    out.images.push_back(preprocess_image(img, img.centroid_row, img.centroid_col, fov_mm, out_size));
  }
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < out.images.size(); ++i) groups[out.images[i].group].push_back(i);
  for (const auto& [name, idx] : groups) {
    std::vector<LabeledImage> members;
    members.reserve(idx.size());
    for (std::size_t i : idx) members.push_back(std::move(out.images[i]));
    zscore_volume(members);
    for (std::size_t j = 0; j < idx.size(); ++j) out.images[idx[j]] = std::move(members[j]);
  }
  return out;
}

std::pair<double, double> mask_centroid(const ArrayF& mask) {
  if (mask.rank() < 2) throw ShapeError("mask must be at least 2-D");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  const std::size_t ch = mask.size() / (h * w);
  double sr = 0.0, sc = 0.0, n = 0.0;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      if (mask[(r * w + c) * ch] != 0.0f) {
        sr += static_cast<double>(r);
        sc += static_cast<double>(c);
        n += 1.0;
      }
    }
  }
  if (n == 0.0) throw Error("mask_centroid: empty mask");
  return {sr / n, sc / n};
}

// ---------------------------------------------------------------------- split

SplitIndices split_dataset(const Dataset& dataset, const std::string& train_tag,
                           const std::string& eval_tag, const SplitFractions& fr) {
  if (fr.train < 0.0 || fr.val < 0.0 || fr.test < 0.0) throw Error("split: fractions must be >= 0");
  if (fr.train + fr.val + fr.test > 1.0 + 1e-9) throw Error("split: fractions sum above 1");
  const auto& images = dataset.images;
  std::map<std::string, std::vector<std::size_t>> groups;
  std::map<std::string, std::string> group_tag;
  bool has_train = false, has_eval = false;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    has_train = has_train || img.domain == train_tag;
    has_eval = has_eval || img.domain == eval_tag;
    auto [it, inserted] = group_tag.emplace(img.group, img.domain);
    if (!inserted && it->second != img.domain) {
      throw FormatError("split: group '" + img.group + "' spans domains '" + it->second + "' and '" +
                        img.domain + "'");
    }
    groups[img.group].push_back(i);
  }
  if (!has_train) throw Error("split: train domain '" + train_tag + "' not present");
  if (!has_eval) throw Error("split: eval domain '" + eval_tag + "' not present");

  // Class-interleaved group order: bucket by the first image's fine label.
  auto ordered = [&](const std::string& tag) {
    std::map<std::size_t, std::vector<std::string>> buckets;
    for (const auto& [g, idx] : groups) {
      if (group_tag[g] == tag) buckets[images[idx.front()].fine].push_back(g);
    }
    std::vector<std::string> out;
    for (std::size_t round = 0;; ++round) {
      bool any = false;
      for (auto& [label, gs] : buckets) {
        if (round < gs.size()) {
          out.push_back(gs[round]);
          any = true;
        }
      }
      if (!any) break;
    }
    return out;
  };
  const double total = static_cast<double>(images.size());
  const auto target = [&](double f) { return static_cast<std::size_t>(std::floor(f * total + 0.5)); };
  const std::size_t t_train = target(fr.train), t_val = target(fr.val), t_test = target(fr.test);

  SplitIndices out;
  std::size_t pool = 0;
  for (const auto& g : ordered(train_tag)) {
    pool += groups[g].size();
    if (out.train.size() + groups[g].size() <= t_train) {
      out.train.insert(out.train.end(), groups[g].begin(), groups[g].end());
    }
  }
  if (t_train > pool) {
    throw Error("split: train target " + std::to_string(t_train) + " exceeds the " +
                std::to_string(pool) + " images of domain '" + train_tag + "'");
  }
  std::size_t eval_pool = 0;
  for (const auto& g : ordered(eval_tag)) {
    const auto& idx = groups[g];
    eval_pool += idx.size();
    if (out.val.size() + idx.size() <= t_val) {
      out.val.insert(out.val.end(), idx.begin(), idx.end());
    } else if (out.test.size() + idx.size() <= t_test) {
      out.test.insert(out.test.end(), idx.begin(), idx.end());
    }
  }
  if (t_val + t_test > eval_pool) {
    throw Error("split: val + test targets exceed the " + std::to_string(eval_pool) +
                " images of domain '" + eval_tag + "'");
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

// -------------------------------------------------------------------- episodes

Episode sample_episode(std::span<const LabeledImage> images, std::span<const std::size_t> pool,
                       const EpisodeSpec& spec, SeededRng& rng) {
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i : pool) {
    if (i >= images.size()) throw Error("sample_episode: pool index out of range");
    by_class[label_of(images[i], spec.label_space)].push_back(i);
  }
  spec.validate(by_class.size());
  const std::size_t need = spec.k_shot + spec.q_query;
  for (const auto& [label, idx] : by_class) {
    if (idx.size() < need) {
      throw Error("sample_episode: class " + std::to_string(label) + " has " +
                  std::to_string(idx.size()) + " images, episode needs K+Q=" + std::to_string(need));
    }
  }
  std::vector<std::size_t> labels;
  for (const auto& [label, idx] : by_class) labels.push_back(label);

  Episode ep;
  for (std::size_t pick : rng.sample_without_replacement(labels.size(), spec.n_way)) {
    ep.classes.push_back(labels[pick]);
  }
  for (std::size_t c = 0; c < spec.n_way; ++c) {
    const auto& idx = by_class[ep.classes[c]];
    const auto draw = rng.sample_without_replacement(idx.size(), need);
    for (std::size_t j = 0; j < need; ++j) {
      if (j < spec.k_shot) {
        ep.support.push_back(idx[draw[j]]);
        ep.support_labels.push_back(c);
      } else {
        ep.query.push_back(idx[draw[j]]);
        ep.query_labels.push_back(c);
      }
    }
  }
  return ep;
}

// -------------------------------------------------------------------- manifest

namespace {
constexpr const char* kManifestHeader = "path,fine,coarse,group,domain,px,py,centroid_row,centroid_col";
}

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream out(dir / "manifest.csv", std::ios::binary);
  if (!out) throw Error("cannot write manifest in '" + dir.string() + "'");
  out << kManifestHeader << '\n';
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    const auto& img = dataset.images[i];
    for (const std::string* s : {&img.group, &img.domain}) {
      if (s->find_first_of(",\n") != std::string::npos) {
        throw FormatError("manifest fields may not contain commas or newlines: '" + *s + "'");
      }
    }
    char name[32];
    std::snprintf(name, sizeof(name), "images/%06zu.mbdc", i);
    save_array(dir / name, img.pixels);
    out << name << ',' << img.fine << ',' << img.coarse << ',' << img.group << ',' << img.domain
        << ',' << format_double(img.px) << ',' << format_double(img.py) << ','
        << format_double(img.centroid_row) << ',' << format_double(img.centroid_col) << '\n';
  }
  if (!out) throw Error("failed writing manifest in '" + dir.string() + "'");
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.csv");
  if (!in) throw FormatError("no manifest.csv in '" + dir.string() + "'");
  std::string line;
  std::getline(in, line);
  if (line != kManifestHeader) throw FormatError("manifest header mismatch in '" + dir.string() + "'");
  Dataset ds;
  std::map<std::size_t, std::size_t> mapping;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 9) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": expected 9 fields, got " +
                        std::to_string(f.size()));
    }
    LabeledImage img;
    try {
      img.fine = std::stoul(f[1]);
      img.coarse = std::stoul(f[2]);
      img.px = std::stod(f[5]);
      img.py = std::stod(f[6]);
      img.centroid_row = std::stod(f[7]);
      img.centroid_col = std::stod(f[8]);
    } catch (const std::exception&) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": malformed number");
    }
    img.group = f[3];
    img.domain = f[4];
    auto [it, inserted] = mapping.emplace(img.fine, img.coarse);
    if (!inserted && it->second != img.coarse) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": fine class " +
                        std::to_string(img.fine) + " maps to two coarse classes");
    }
    img.pixels = load_array<float>(dir / f[0]);
    ds.images.push_back(std::move(img));
  }
  if (ds.images.empty()) throw FormatError("manifest in '" + dir.string() + "' lists no images");
  const std::size_t n_fine = mapping.rbegin()->first + 1;
  if (mapping.size() != n_fine) throw FormatError("manifest: fine labels are not contiguous from 0");
  std::size_t n_coarse = 0;
  for (const auto& [fine, coarse] : mapping) {
    ds.hierarchy.fine_to_coarse.push_back(coarse);
    n_coarse = std::max(n_coarse, coarse + 1);
  }
  ds.hierarchy.n_coarse = n_coarse;
  ds.hierarchy.validate();
  return ds;
}

}  // namespace metabdc
