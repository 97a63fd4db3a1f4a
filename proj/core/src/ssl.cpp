#include "metabdc/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include "metabdc/metrics.hpp"
#include "metabdc/ops.hpp"

namespace metabdc {

// ---------------------------------------------------------------- augmentation

void AugmentConfig::validate() const {
  if (identity) return;
  if (!(crop_scale_min > 0.0) || crop_scale_min > crop_scale_max) {
    throw Error("augment: crop scale range must satisfy 0 < min <= max");
  }
  if (crop_scale_max > 1.0) throw Error("augment: crop larger than the image (scale > 1)");
  if (!(gain_min > 0.0) || gain_min > gain_max) throw Error("augment: invalid gain range");
  if (bias_range < 0.0) throw Error("augment: bias range must be >= 0");
  if (noise_std < 0.0) throw Error("augment: noise std must be >= 0");
}

namespace {

// Bilinear resample of the square window [y0, y0+side) x [x0, x0+side) to h x w
// using pixel-center alignment.
template <typename T>
Array<T> crop_resize(const Array<T>& img, std::size_t y0, std::size_t x0, std::size_t side) {
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Array<T> out({h, w, c});
  if (side == h && side == w) {
    out = img;
    return out;
  }
  const double sy = static_cast<double>(side) / static_cast<double>(h);
  const double sx = static_cast<double>(side) / static_cast<double>(w);
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(side - 1));
    const std::size_t iy = std::min(static_cast<std::size_t>(fy), side - 1);
    const std::size_t iy1 = std::min(iy + 1, side - 1);
    const double ty = fy - static_cast<double>(iy);
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(side - 1));
      const std::size_t ix = std::min(static_cast<std::size_t>(fx), side - 1);
      const std::size_t ix1 = std::min(ix + 1, side - 1);
      const double tx = fx - static_cast<double>(ix);
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto px = [&](std::size_t yy, std::size_t xx) {
          return static_cast<double>(img[((y0 + yy) * w + (x0 + xx)) * c + ch]);
        };
        const double v = (1 - ty) * ((1 - tx) * px(iy, ix) + tx * px(iy, ix1)) +
                         ty * ((1 - tx) * px(iy1, ix) + tx * px(iy1, ix1));
        out[(y * w + x) * c + ch] = static_cast<T>(v);
      }
    }
  }
  return out;
}

template <typename T>
Array<T> one_view(const Array<T>& img, const AugmentConfig& cfg, SeededRng& rng) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  const std::size_t full = std::min(h, w);
  const double scale = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
  std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(scale) * static_cast<double>(full)));
  side = std::clamp<std::size_t>(side, 1, full);
  const std::size_t y0 = rng.uniform_index(h - side + 1);
  const std::size_t x0 = rng.uniform_index(w - side + 1);
  Array<T> out = crop_resize(img, y0, x0, side);
  const double gain = rng.uniform(cfg.gain_min, cfg.gain_max);
  const double bias = rng.uniform(-cfg.bias_range, cfg.bias_range);
  for (T& v : out.data()) {
    const double noise = cfg.noise_std > 0.0 ? rng.normal(0.0, cfg.noise_std) : 0.0;
    v = static_cast<T>(static_cast<double>(v) * gain + bias + noise);
  }
  return out;
}

}  // namespace

template <typename T>
std::pair<std::vector<Array<T>>, std::vector<Array<T>>> augment_views(
    std::span<const Array<T>> images, const AugmentConfig& config, SeededRng& rng) {
  if (images.empty()) throw Error("augment_views: no images");
  config.validate();
  std::vector<Array<T>> a, b;
  a.reserve(images.size());
  b.reserve(images.size());
  for (const auto& img : images) {
    if (img.rank() != 3) throw ShapeError("augment_views: images must be H x W x C");
    if (config.identity) {
      a.push_back(img);
      b.push_back(img);
      continue;
    }
    a.push_back(one_view(img, config, rng));
    b.push_back(one_view(img, config, rng));
  }
  return {std::move(a), std::move(b)};
}

// ------------------------------------------------------------------ partitions

PartitionMatrix::PartitionMatrix(std::vector<std::uint8_t> subset_of) : subset_(std::move(subset_of)) {
  for (std::size_t i = 0; i < subset_.size(); ++i) {
    if (subset_[i] > 1) {
      throw Error("partition row " + std::to_string(i) + " is not one-hot over two subsets");
    }
  }
}

PartitionMatrix PartitionMatrix::trivial(std::size_t n) {
  return PartitionMatrix(std::vector<std::uint8_t>(n, 0));
}

std::size_t PartitionMatrix::count(std::size_t k) const {
  return static_cast<std::size_t>(std::count(subset_.begin(), subset_.end(), static_cast<std::uint8_t>(k)));
}

ArrayD PartitionMatrix::one_hot() const {
  ArrayD out({subset_.size(), 2});
  for (std::size_t i = 0; i < subset_.size(); ++i) out.at(i, subset_[i]) = 1.0;
  return out;
}

void PartitionSet::append(PartitionMatrix p) {
  if (p.n() != items_.front().n()) {
    throw Error("partition covers " + std::to_string(p.n()) + " samples, set covers " +
                std::to_string(items_.front().n()));
  }
  items_.push_back(std::move(p));
}

void IpIrmConfig::validate() const {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw Error("ipirm: lambda1 and lambda2 must be >= 0");
  if (!(tau > 0.0)) throw Error("ipirm: tau must be positive");
  if (!(search_lr > 0.0)) throw Error("ipirm: search LR must be positive");
  if (search_restarts == 0) throw Error("ipirm: need at least one search restart");
  if (search_batch < 2) throw Error("ipirm: search batch must hold at least 2 samples");
  if (tolerance < 0.0) throw Error("ipirm: tolerance must be >= 0");
}

// ------------------------------------------------- loss on fixed embeddings

namespace {

void check_batch(const SslBatch& b, std::size_t k) {
  if (b.view_a.rank() != 2 || b.view_a.shape() != b.view_b.shape()) {
    throw ShapeError("ssl batch: views must be index-aligned [n, p] arrays");
  }
  if (b.subset.size() != b.view_a.dim(0)) throw ShapeError("ssl batch: one subset id per sample");
  if (std::find(b.subset.begin(), b.subset.end(), k) == b.subset.end()) {
    throw Error("subset " + std::to_string(k) + " is empty (degenerate partition)");
  }
}

double dot_rows(const ArrayD& x, std::size_t i, const ArrayD& y, std::size_t j) {
  const std::size_t p = x.dim(1);
  double s = 0.0;
  for (std::size_t c = 0; c < p; ++c) s += x.at(i, c) * y.at(j, c);
  return s;
}

struct AnchorStats {
  double loss = 0.0;    // lse - positive logit
  double dtheta = 0.0;  // sum_j p_j s_j - s_pos   (before the 1/tau factor)
};

// sims: similarities over the denominator set, pos: positive similarity.
AnchorStats anchor_stats(const std::vector<double>& sims, double pos, double theta, double tau) {
  double mx = -INFINITY;
  for (double s : sims) mx = std::max(mx, s * theta / tau);
  double z = 0.0, zs = 0.0;
  for (double s : sims) {
    const double e = std::exp(s * theta / tau - mx);
    z += e;
    zs += e * s;
  }
  return {mx + std::log(z) - pos * theta / tau, zs / z - pos};
}

std::vector<double> denominator_sims(const SslBatch& b, std::size_t k, std::size_t i) {
  std::vector<double> sims;
  const std::size_t n = b.subset.size();
  for (std::size_t j = 0; j < n; ++j) {
    if (b.subset[j] == k && j != i) sims.push_back(dot_rows(b.view_a, i, b.view_a, j));
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (b.subset[j] == k) sims.push_back(dot_rows(b.view_a, i, b.view_b, j));
  }
  return sims;
}

}  // namespace

double contrastive_loss(const SslBatch& batch, std::size_t k, double theta, double tau) {
  check_batch(batch, k);
  if (!std::isfinite(theta)) throw Error("contrastive_loss: theta must be finite");
  if (!(tau > 0.0)) throw Error("contrastive_loss: tau must be positive");
  double total = 0.0;
  for (std::size_t i = 0; i < batch.subset.size(); ++i) {
    if (batch.subset[i] != k) continue;
    const double pos = dot_rows(batch.view_a, i, batch.view_b, i);
    total += anchor_stats(denominator_sims(batch, k, i), pos, theta, tau).loss;
  }
  return total;
}

double contrastive_dtheta(const SslBatch& batch, std::size_t k, double tau) {
  check_batch(batch, k);
  if (!(tau > 0.0)) throw Error("contrastive_dtheta: tau must be positive");
  double total = 0.0;
  for (std::size_t i = 0; i < batch.subset.size(); ++i) {
    if (batch.subset[i] != k) continue;
    const double pos = dot_rows(batch.view_a, i, batch.view_b, i);
    total += anchor_stats(denominator_sims(batch, k, i), pos, 1.0, tau).dtheta;
  }
  return total / tau;
}

double irm_penalty(const SslBatch& batch, std::size_t k, double tau) {
  const double g = contrastive_dtheta(batch, k, tau);
  return g * g;
}

namespace {

double reduce_term(double loss, double dtheta, double count, double lambda, LossReduction red) {
  if (red == LossReduction::mean) {
    const double g = dtheta / count;
    return loss / count + lambda * g * g;
  }
  return loss + lambda * dtheta * dtheta;
}

}  // namespace

double partition_objective(const ArrayD& view_a, const ArrayD& view_b,
                           const PartitionMatrix& partition, double lambda, double tau,
                           LossReduction reduction) {
  if (partition.degenerate()) throw Error("partition_objective: degenerate partition");
  if (view_a.rank() != 2 || view_a.dim(0) != partition.n()) {
    throw ShapeError("partition_objective: embeddings do not match partition size");
  }
  SslBatch batch{view_a, view_b, {}};
  batch.subset.assign(partition.assignments().begin(), partition.assignments().end());
  double total = 0.0;
  for (std::size_t k = 0; k < 2; ++k) {
    total += reduce_term(contrastive_loss(batch, k, 1.0, tau), contrastive_dtheta(batch, k, tau),
                         static_cast<double>(partition.count(k)), lambda, reduction);
  }
  return total;
}

// ------------------------------------------------------------------ graph terms

namespace {

// Similarity blocks shared by every subset term of one batch.
struct SimilarityNodes {
  NodeId sims;     // [n, 2n] = [za za^T | za zb^T]
  NodeId logits;   // sims / tau
  NodeId pos;      // [n] diag(za zb^T)
  NodeId pos_logit;
  NodeId mask;     // [n, 2n] constant, zero on the view-A diagonal
  std::size_t n = 0;
};

template <typename T>
Array<T> self_mask(std::size_t n) {
  Array<T> m({n, 2 * n}, T{1});
  for (std::size_t i = 0; i < n; ++i) m.at(i, i) = T{0};
  return m;
}

template <typename T>
SimilarityNodes similarity_nodes(Graph<T>& g, NodeId za, NodeId zb, double tau) {
  const Shape sa = g.shape(za);
  if (sa.size() != 2 || g.shape(zb) != sa) {
    throw ShapeError("contrastive views must be index-aligned [n, p], got " + shape_str(sa) +
                     " and " + shape_str(g.shape(zb)));
  }
  SimilarityNodes s;
  s.n = sa[0];
  NodeId saa = ops::matmul_nt(g, za, za);
  NodeId sab = ops::matmul_nt(g, za, zb);
  s.sims = ops::concat_cols(g, saa, sab);
  s.logits = ops::scale(g, s.sims, static_cast<T>(1.0 / tau));
  s.pos = ops::diagonal(g, sab);
  s.pos_logit = ops::scale(g, s.pos, static_cast<T>(1.0 / tau));
  s.mask = g.constant(self_mask<T>(s.n));
  return s;
}

template <typename T>
SubsetTerm subset_term(Graph<T>& g, const SimilarityNodes& s, NodeId w, double tau) {
  if (g.shape(w) != Shape{s.n}) throw ShapeError("subset weights must be [n]");
  NodeId row = ops::reshape(g, w, Shape{1, s.n});
  NodeId cols = ops::reshape(g, ops::concat_cols(g, row, row), Shape{2 * s.n});
  NodeId weights = ops::mul(g, ops::broadcast_rows(g, cols, s.n), s.mask);

  NodeId per_anchor = ops::sub(g, ops::weighted_logsumexp_rows(g, s.logits, weights), s.pos_logit);
  SubsetTerm t;
  t.loss = ops::sum(g, ops::mul(g, w, per_anchor));

  NodeId probs = ops::weighted_softmax_rows(g, s.logits, weights);
  NodeId expected = ops::sum_rows(g, ops::mul(g, probs, s.sims));
  NodeId gap = ops::sub(g, expected, s.pos);
  t.dtheta = ops::scale(g, ops::sum(g, ops::mul(g, w, gap)), static_cast<T>(1.0 / tau));
  t.count = ops::sum(g, w);
  return t;
}

template <typename T>
NodeId reduced_objective(Graph<T>& g, const SubsetTerm& t, double lambda, LossReduction red,
                         NodeId* loss_out, NodeId* penalty_out) {
  NodeId loss = t.loss, grad = t.dtheta;
  if (red == LossReduction::mean) {
    loss = ops::div(g, loss, t.count);
    grad = ops::div(g, grad, t.count);
  }
  NodeId pen = ops::square(g, grad);
  *loss_out = loss;
  *penalty_out = pen;
  if (lambda == 0.0) return loss;
  return ops::add(g, loss, ops::scale(g, pen, static_cast<T>(lambda)));
}

template <typename T>
NodeId accumulate(Graph<T>& g, std::optional<NodeId> acc, NodeId v) {
  return acc ? ops::add(g, *acc, v) : v;
}

}  // namespace

template <typename T>
SubsetTerm build_subset_term(Graph<T>& graph, NodeId za, NodeId zb, NodeId weights, double tau) {
  if (!(tau > 0.0)) throw Error("subset term: tau must be positive");
  return subset_term(graph, similarity_nodes(graph, za, zb, tau), weights, tau);
}

template <typename T>
NodeId build_simclr_loss(Graph<T>& graph, NodeId za, NodeId zb, double tau) {
  if (!(tau > 0.0)) throw Error("simclr loss: tau must be positive");
  SimilarityNodes s = similarity_nodes(graph, za, zb, tau);
  NodeId per_anchor =
      ops::sub(graph, ops::weighted_logsumexp_rows(graph, s.logits, s.mask), s.pos_logit);
  return ops::scale(graph, ops::sum(graph, per_anchor), static_cast<T>(1.0 / static_cast<double>(s.n)));
}

// ------------------------------------------------------------ partition search

namespace {

// Hard objective from precomputed similarity blocks; O(n^2) per subset.
double hard_objective(const ArrayD& saa, const ArrayD& sab, const std::vector<std::uint8_t>& assign,
                      double lambda, double tau, LossReduction red) {
  const std::size_t n = assign.size();
  double total = 0.0;
  std::vector<double> sims;
  sims.reserve(2 * n);
  for (std::size_t k = 0; k < 2; ++k) {
    double loss = 0.0, grad = 0.0, count = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (assign[i] != k) continue;
      sims.clear();
      for (std::size_t j = 0; j < n; ++j) {
        if (assign[j] == k && j != i) sims.push_back(saa.at(i, j));
      }
      for (std::size_t j = 0; j < n; ++j) {
        if (assign[j] == k) sims.push_back(sab.at(i, j));
      }
      AnchorStats st = anchor_stats(sims, sab.at(i, i), 1.0, tau);
      loss += st.loss;
      grad += st.dtheta;
      count += 1.0;
    }
    total += reduce_term(loss, grad / tau, count, lambda, red);
  }
  return total;
}

ArrayD gram(const ArrayD& x, const ArrayD& y) {
  const std::size_t n = x.dim(0);
  ArrayD out({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = dot_rows(x, i, y, j);
  }
  return out;
}

bool is_degenerate(const std::vector<std::uint8_t>& a) {
  const auto ones = std::count(a.begin(), a.end(), std::uint8_t{1});
  return ones == 0 || static_cast<std::size_t>(ones) == a.size();
}

// Relaxed ascent over per-sample logits u: subset-0 weight sigmoid(u).
class RelaxedSearch {
 public:
  RelaxedSearch(const ArrayD& saa, const ArrayD& sab, const IpIrmConfig& cfg)
      : saa_(saa), sab_(sab), cfg_(cfg), n_(saa.dim(0)), b_(std::min(cfg.search_batch, n_)) {
    NodeId s = graph_.input("sims", {b_, 2 * b_});
    NodeId pos = graph_.input("pos", {b_});
    u_ = graph_.input("u", {b_}, true);
    SimilarityNodes sn;
    sn.n = b_;
    sn.sims = s;
    sn.logits = ops::scale(graph_, s, 1.0 / cfg.tau);
    sn.pos = pos;
    sn.pos_logit = ops::scale(graph_, pos, 1.0 / cfg.tau);
    sn.mask = graph_.constant(self_mask<double>(b_));
    NodeId w0 = ops::sigmoid(graph_, u_);
    NodeId w1 = ops::add_scalar(graph_, ops::scale(graph_, w0, -1.0), 1.0);
    std::optional<NodeId> obj;
    for (NodeId w : {w0, w1}) {
      NodeId l, p;
      obj = accumulate(graph_, obj, reduced_objective(graph_, subset_term(graph_, sn, w, cfg.tau),
                                                      cfg.lambda2, cfg.reduction, &l, &p));
    }
    objective_ = *obj;
  }

  std::vector<double> run(std::vector<double> u, SeededRng& rng) {
    std::vector<double> m(n_, 0.0), v(n_, 0.0);
    std::vector<std::size_t> order(n_);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = n_;
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<std::size_t> idx(b_);
    for (std::size_t step = 1; step <= cfg_.search_steps; ++step) {
      if (b_ == n_) {
        idx = order;
      } else {
        for (std::size_t i = 0; i < b_; ++i) {
          if (cursor == n_) {
            rng.shuffle(order);
            cursor = 0;
          }
          idx[i] = order[cursor++];
        }
      }
      ArrayD sims({b_, 2 * b_}), pos({b_}), ub({b_});
      for (std::size_t i = 0; i < b_; ++i) {
        for (std::size_t j = 0; j < b_; ++j) {
          sims.at(i, j) = saa_.at(idx[i], idx[j]);
          sims.at(i, b_ + j) = sab_.at(idx[i], idx[j]);
        }
        pos[i] = sab_.at(idx[i], idx[i]);
        ub[i] = u[idx[i]];
      }
      graph_.forward({{"sims", std::move(sims)}, {"pos", std::move(pos)}, {"u", std::move(ub)}});
      graph_.backward(objective_);
      const ArrayD& grad = graph_.grad(u_);
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      for (std::size_t i = 0; i < b_; ++i) {
        const std::size_t j = idx[i];
        m[j] = beta1 * m[j] + (1 - beta1) * grad[i];
        v[j] = beta2 * v[j] + (1 - beta2) * grad[i] * grad[i];
        u[j] += cfg_.search_lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
      }
    }
    return u;
  }

 private:
  const ArrayD& saa_;
  const ArrayD& sab_;
  const IpIrmConfig& cfg_;
  std::size_t n_;
  std::size_t b_;
  Graph<double> graph_;
  NodeId u_;
  NodeId objective_;
};

}  // namespace

PartitionMatrix search_partition(const ArrayD& view_a, const ArrayD& view_b,
                                 const IpIrmConfig& config, SeededRng& rng) {
  config.validate();
  if (view_a.rank() != 2 || view_a.shape() != view_b.shape()) {
    throw ShapeError("search_partition: views must be index-aligned [n, p]");
  }
  const std::size_t n = view_a.dim(0);
  if (n < 2) throw Error("search_partition: every candidate partition of fewer than 2 samples is degenerate");
  const ArrayD saa = gram(view_a, view_a);
  const ArrayD sab = gram(view_a, view_b);
  RelaxedSearch relaxed(saa, sab, config);

  std::vector<std::uint8_t> best;
  double best_obj = -INFINITY;
  for (std::size_t r = 0; r < config.search_restarts; ++r) {
    std::vector<double> u(n);
    for (double& x : u) x = rng.normal();
    u = relaxed.run(std::move(u), rng);

    // Harden; ties (u == 0, weight exactly 1/2) go to the first subset.
    std::vector<std::uint8_t> a(n);
    for (std::size_t i = 0; i < n; ++i) a[i] = u[i] >= 0.0 ? 0 : 1;
    if (is_degenerate(a)) {
      // Move the sample whose relaxed weight leans least toward the full side.
      const bool all_first = a[0] == 0;
      std::size_t pick = 0;
      for (std::size_t i = 1; i < n; ++i) {
        if (all_first ? u[i] < u[pick] : u[i] > u[pick]) pick = i;
      }
      a[pick] = all_first ? 1 : 0;
    }
    double obj = hard_objective(saa, sab, a, config.lambda2, config.tau, config.reduction);
    if (n <= config.refine_max_n) {
      bool improved = true;
      for (std::size_t pass = 0; improved && pass < 2 * n; ++pass) {
        improved = false;
        for (std::size_t i = 0; i < n; ++i) {
          a[i] ^= 1;
          if (!is_degenerate(a)) {
            const double cand = hard_objective(saa, sab, a, config.lambda2, config.tau, config.reduction);
            if (cand > obj) {
              obj = cand;
              improved = true;
              continue;
            }
          }
          a[i] ^= 1;
        }
      }
    }
    if (obj > best_obj) {
      best_obj = obj;
      best = a;
    }
  }
  if (best.empty()) throw Error("search_partition: all candidate partitions degenerate");
  return PartitionMatrix(std::move(best));
}

// -------------------------------------------------------------------- training

namespace {

template <typename T>
struct ProjectedViews {
  NodeId za;
  NodeId zb;
};

template <typename T>
ProjectedViews<T> project_views(Graph<T>& g, const EncoderConfig& enc, const ViewBatch<T>& batch) {
  NodeId a = g.input("view_a", batch.view_a.shape());
  NodeId b = g.input("view_b", batch.view_b.shape());
  return {build_projection(g, build_encoder(g, enc, a)), build_projection(g, build_encoder(g, enc, b))};
}

template <typename T>
void check_finite(double v, const char* what, std::size_t partitions) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string("non-finite ") + what + " with " + std::to_string(partitions) +
                       " partition(s); lower the LR or raise tau");
  }
}

}  // namespace

template <typename T>
StepTrace ipirm_step(ParameterSet<T>& params, const EncoderConfig& encoder,
                     const PartitionSet& partitions, const ViewBatch<T>& batch,
                     const IpIrmConfig& config, Sgd<T>& optimizer, double lr) {
  config.validate();
  const std::size_t n = batch.indices.size();
  if (n < 2) throw Error("ipirm_step: batch needs at least 2 samples");
  Graph<T> g(&params);
  ProjectedViews<T> v = project_views(g, encoder, batch);
  SimilarityNodes s = similarity_nodes(g, v.za, v.zb, config.tau);

  StepTrace trace;
  std::optional<NodeId> objective, loss_sum, penalty_sum;
  for (std::size_t p = 0; p < partitions.size(); ++p) {
    const PartitionMatrix& part = partitions[p];
    std::vector<std::uint8_t> local(n);
    for (std::size_t i = 0; i < n; ++i) local[i] = static_cast<std::uint8_t>(part.subset(batch.indices[i]));
    const bool trivial = p == 0;
    if (!trivial && is_degenerate(local)) {
      ++trace.skipped_partitions;
      continue;
    }
    for (std::size_t k = 0; k < (trivial ? 1u : 2u); ++k) {
      Array<T> w({n});
      for (std::size_t i = 0; i < n; ++i) w[i] = local[i] == k ? T{1} : T{0};
      NodeId l, pen;
      NodeId term = reduced_objective(g, subset_term(g, s, g.constant(std::move(w)), config.tau),
                                      config.lambda1, config.reduction, &l, &pen);
      objective = accumulate(g, objective, term);
      loss_sum = accumulate(g, loss_sum, l);
      penalty_sum = accumulate(g, penalty_sum, pen);
    }
  }
  g.forward({{"view_a", batch.view_a}, {"view_b", batch.view_b}});
  trace.objective = g.value(*objective)[0];
  trace.loss = g.value(*loss_sum)[0];
  trace.penalty = g.value(*penalty_sum)[0];
  check_finite<T>(trace.objective, "IP-IRM objective", partitions.size());
  params.zero_grad();
  g.backward(*objective);
  optimizer.step(params, lr);
  return trace;
}

template <typename T>
StepTrace simclr_step(ParameterSet<T>& params, const EncoderConfig& encoder,
                      const ViewBatch<T>& batch, double tau, Sgd<T>& optimizer, double lr) {
  if (batch.indices.size() < 2) throw Error("simclr_step: batch needs at least 2 samples");
  Graph<T> g(&params);
  ProjectedViews<T> v = project_views(g, encoder, batch);
  NodeId loss = build_simclr_loss(g, v.za, v.zb, tau);
  g.forward({{"view_a", batch.view_a}, {"view_b", batch.view_b}});
  StepTrace trace;
  trace.objective = trace.loss = g.value(loss)[0];
  check_finite<T>(trace.objective, "contrastive loss", 1);
  params.zero_grad();
  g.backward(loss);
  optimizer.step(params, lr);
  return trace;
}

template <typename T>
ArrayD project_images(const ParameterSet<T>& params, const EncoderConfig& encoder,
                      std::span<const Array<T>> images, std::size_t batch_size) {
  if (images.empty()) throw Error("project_images: no images");
  if (batch_size == 0) throw Error("project_images: batch size must be positive");
  std::size_t p = 0;
  std::vector<double> out;
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t len = std::min(batch_size, images.size() - start);
    Array<T> packed = pack_images(images.subspan(start, len), encoder);
    Graph<T> g(&params);
    NodeId in = g.input("images", packed.shape());
    NodeId z = build_projection(g, build_encoder(g, encoder, in));
    g.forward({{"images", std::move(packed)}});
    const Array<T>& v = g.value(z);
    p = v.dim(1);
    out.insert(out.end(), v.data().begin(), v.data().end());
  }
  return ArrayD({images.size(), p}, std::move(out));
}

template <typename T>
PartitionMatrix find_partition(const ParameterSet<T>& params, const EncoderConfig& encoder,
                               std::span<const Array<T>> images, const AugmentConfig& augment,
                               const IpIrmConfig& config, SeededRng& rng) {
  if (images.size() < 2) throw Error("find_partition: need at least 2 unlabeled images");
  auto views = augment_views(images, augment, rng);
  const ArrayD za = project_images<T>(params, encoder, views.first);
  const ArrayD zb = project_images<T>(params, encoder, views.second);
  return search_partition(za, zb, config, rng);
}

void PretrainConfig::validate() const {
  ipirm.validate();
  augment.validate();
  if (epochs == 0) throw Error("pretrain: epochs must be positive");
  if (batch_size < 2) throw Error("pretrain: batch size must be at least 2");
  if (base_lr < 0.0) throw Error("pretrain: base LR must be >= 0");
}

template <typename T>
PretrainResult<T> pretrain(const EncoderConfig& encoder, std::span<const Array<T>> images,
                           const PretrainConfig& config, SeededRng& rng,
                           const ParameterSet<T>* init) {
  config.validate();
  if (images.empty()) throw Error("pretrain: empty dataset");
  const std::size_t n = images.size();
  if (n < 2) throw Error("pretrain: need at least 2 images");

  PretrainResult<T> result;
  if (init) {
    result.params = *init;
  } else {
    SeededRng init_rng = rng.fork(1);
    result.params = init_encoder<T>(encoder, init_rng);
  }
  result.partitions = PartitionSet(n);

  const bool simclr = config.mode == PretrainMode::simclr;
  const std::size_t phases = simclr ? 1 : config.ipirm.outer_iterations + 1;
  const std::size_t batch = std::min(config.batch_size, n);
  ScheduleConfig schedule;
  schedule.kind = ScheduleKind::cosine;
  schedule.base_lr = config.base_lr > 0.0 ? config.base_lr
                                          : lr_from_batch(static_cast<std::int64_t>(config.batch_size));
  schedule.total_epochs = config.epochs * phases;
  Sgd<T> sgd(result.params, config.sgd);

  std::size_t epoch = 0, iter = 0;
  double previous = 0.0;
  for (std::size_t phase = 0; phase < phases; ++phase) {
    if (phase > 0) {
      SeededRng search_rng = rng.fork(1000 + phase);
      result.partitions.append(find_partition<T>(result.params, encoder, images, config.augment,
                                                 config.ipirm, search_rng));
      ++result.outer_iterations_run;
    }
    double last_epoch_objective = 0.0;
    for (std::size_t e = 0; e < config.epochs; ++e, ++epoch) {
      const double lr = schedule_lr(schedule, epoch);
      SeededRng epoch_rng = rng.fork(10000 + epoch);
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      epoch_rng.shuffle(order);
      double sum = 0.0;
      std::size_t steps = 0;
      for (std::size_t start = 0; start + 2 <= n; start += batch) {
        const std::size_t len = std::min(batch, n - start);
        if (len < 2) break;
        ViewBatch<T> vb;
        vb.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                          order.begin() + static_cast<std::ptrdiff_t>(start + len));
        std::vector<Array<T>> imgs;
        imgs.reserve(len);
        for (std::size_t i : vb.indices) imgs.push_back(images[i]);
        auto views = augment_views<T>(imgs, config.augment, epoch_rng);
        vb.view_a = pack_images<T>(views.first, encoder);
        vb.view_b = pack_images<T>(views.second, encoder);
        StepTrace st = simclr
                           ? simclr_step(result.params, encoder, vb, config.ipirm.tau, sgd, lr)
                           : ipirm_step(result.params, encoder, result.partitions, vb, config.ipirm, sgd, lr);
        result.trace.push_back({iter++, result.partitions.size(), st.loss, st.penalty, lr});
        sum += st.objective;
        ++steps;
      }
      last_epoch_objective = sum / static_cast<double>(std::max<std::size_t>(steps, 1));
    }
    // Per-partition objective, so appending a partition is not itself a change.
    const double current = last_epoch_objective / static_cast<double>(result.partitions.size());
    if (phase > 0 &&
        std::abs(current - previous) < config.ipirm.tolerance * std::max(std::abs(previous), 1e-12)) {
      break;
    }
    previous = current;
  }
  return result;
}

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write trace CSV '" + path.string() + "'");
  out << "iter,partition_count,loss,penalty,lr\n";
  for (const auto& r : rows) {
    out << r.iter << ',' << r.partition_count << ',' << format_double(r.loss) << ','
        << format_double(r.penalty) << ',' << format_double(r.lr) << '\n';
  }
  if (!out) throw Error("failed writing trace CSV '" + path.string() + "'");
}

#define METABDC_INSTANTIATE_SSL(T)                                                                \
  template std::pair<std::vector<Array<T>>, std::vector<Array<T>>> augment_views(                 \
      std::span<const Array<T>>, const AugmentConfig&, SeededRng&);                               \
  template SubsetTerm build_subset_term(Graph<T>&, NodeId, NodeId, NodeId, double);               \
  template NodeId build_simclr_loss(Graph<T>&, NodeId, NodeId, double);                           \
  template StepTrace ipirm_step(ParameterSet<T>&, const EncoderConfig&, const PartitionSet&,      \
                                const ViewBatch<T>&, const IpIrmConfig&, Sgd<T>&, double);        \
  template StepTrace simclr_step(ParameterSet<T>&, const EncoderConfig&, const ViewBatch<T>&,     \
                                 double, Sgd<T>&, double);                                        \
  template ArrayD project_images(const ParameterSet<T>&, const EncoderConfig&,                    \
                                 std::span<const Array<T>>, std::size_t);                         \
  template PartitionMatrix find_partition(const ParameterSet<T>&, const EncoderConfig&,           \
                                          std::span<const Array<T>>, const AugmentConfig&,        \
                                          const IpIrmConfig&, SeededRng&);                        \
  template PretrainResult<T> pretrain(const EncoderConfig&, std::span<const Array<T>>,            \
                                      const PretrainConfig&, SeededRng&, const ParameterSet<T>*);

METABDC_INSTANTIATE_SSL(float)
METABDC_INSTANTIATE_SSL(double)

}  // namespace metabdc
