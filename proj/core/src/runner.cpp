#include "metabdc/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "metabdc/ops.hpp"

namespace metabdc {

namespace {

constexpr std::size_t kEmbedBatch = 128;

std::vector<ArrayF> pixels_of(const std::vector<LabeledImage>& images) {
  std::vector<ArrayF> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(img.pixels);
  return out;
}

std::vector<ArrayF> pixels_at(const std::vector<LabeledImage>& images, std::span<const std::size_t> idx) {
  std::vector<ArrayF> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(images.at(i).pixels);
  return out;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

ParameterSetF strip_heads(const ParameterSetF& params) {
  ParameterSetF out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names()[i];
    if (name.rfind("proj.", 0) == 0 || name.rfind("cls.", 0) == 0) continue;
    out.add(name, params.value_at(i));
  }
  return out;
}

DomainStyle domain_like(const std::string& tag, std::size_t per_class, const DomainStyle& style,
                        double noise_scale, double marker_probability = 0.0) {
  DomainStyle d = style;
  d.tag = tag;
  d.images_per_class = per_class;
  d.noise *= noise_scale;
  d.marker_probability = marker_probability;
  return d;
}

SyntheticConfig family_config(std::size_t family, const DataSettings& data, std::uint64_t seed,
                              const std::string& prefix) {
  SyntheticConfig c = SyntheticConfig::family_default(family);
  c.group_size = data.group_size;
  c.group_prefix = prefix;
  c.seed = seed;
  return c;
}

/// Every image packed row-wise into [n, d*d] flattened BDC matrices (f64),
/// evaluated with frozen parameters.
ArrayD embed_bdc(const ParameterSetF& params, const EncoderConfig& enc, std::span<const ArrayF> images,
                 bool normalize) {
  std::vector<double> out;
  std::size_t width = 0;
  for (std::size_t start = 0; start < images.size(); start += kEmbedBatch) {
    const std::size_t len = std::min(kEmbedBatch, images.size() - start);
    ArrayF packed = pack_images(images.subspan(start, len), enc);
    Graph<float> g(static_cast<const ParameterSetF*>(&params));
    NodeId in = g.input("images", packed.shape());
    NodeId bdc = build_bdc(g, build_encoder(g, enc, in), normalize);
    g.forward({{"images", std::move(packed)}});
    const ArrayF& v = g.value(bdc);
    width = v.dim(1);
    out.insert(out.end(), v.data().begin(), v.data().end());
  }
  return ArrayD({images.size(), width}, std::move(out));
}

ArrayD softmax_rows(const ArrayD& logits) {
  ArrayD p(logits.shape());
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = logits.at(r, 0);
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, logits.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(logits.at(r, c) - mx);
    for (std::size_t c = 0; c < cols; ++c) p.at(r, c) = std::exp(logits.at(r, c) - mx) / z;
  }
  return p;
}

/// Precomputed embeddings of a pool; `row_of[i]` maps image index i to its row.
struct EmbeddedPool {
  ArrayD bdc;
  std::map<std::size_t, std::size_t> row_of;
};

EmbeddedPool embed_pool(const ParameterSetF& params, const EncoderConfig& enc,
                        const std::vector<LabeledImage>& images, std::span<const std::size_t> pool,
                        bool normalize) {
  EmbeddedPool e;
  const auto px = pixels_at(images, pool);
  e.bdc = embed_bdc(params, enc, px, normalize);
  for (std::size_t r = 0; r < pool.size(); ++r) e.row_of[pool[r]] = r;
  return e;
}

ArrayD gather(const EmbeddedPool& pool, std::span<const std::size_t> idx) {
  const std::size_t w = pool.bdc.dim(1);
  ArrayD out({idx.size(), w});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const std::size_t r = pool.row_of.at(idx[i]);
    std::copy_n(pool.bdc.ptr() + r * w, w, out.ptr() + i * w);
  }
  return out;
}

/// One-vs-rest AUROC of an episode scored with frozen embeddings.
double episode_auroc(const EmbeddedPool& pool, const Episode& ep, std::size_t n_way,
                     const BdcHeadConfig& head) {
  ArrayD s = gather(pool, ep.support);
  ArrayD q = gather(pool, ep.query);
  Graph<double> g;
  NodeId sn = g.input("support", s.shape());
  NodeId qn = g.input("query", q.shape());
  NodeId logits = build_episode_logits(g, sn, ep.support_labels, n_way, qn, head);
  g.forward({{"support", std::move(s)}, {"query", std::move(q)}});
  return auroc_multiclass_ovr(softmax_rows(g.value(logits)), ep.query_labels).mean;
}

std::string cell_run_id(const ExperimentConfig& c, PretrainKind p, FinetuneKind f, std::size_t shot) {
  return c.run_id + "/" + to_string(p) + "/" + to_string(f) + "/k" + std::to_string(shot);
}

void add_aucm_params(ParameterSetF& params, std::size_t classes) {
  params.add("aucm.a", ArrayF({classes}, 0.0f));
  params.add("aucm.b", ArrayF({classes}, 0.0f));
  params.add("aucm.alpha", ArrayF({classes}, 0.0f));
}

NodeId aucm_on_probabilities(Graph<float>& g, NodeId logits, const std::vector<std::size_t>& labels,
                             std::vector<double> p_hat, double margin) {
  const std::size_t rows = g.shape(logits)[0], cols = g.shape(logits)[1];
  NodeId ones = g.constant(ArrayF({rows, cols}, 1.0f));
  NodeId probs = ops::weighted_softmax_rows(g, logits, ones);
  return aucm_ovr_loss(g, probs, g.parameter("aucm.a"), g.parameter("aucm.b"), g.parameter("aucm.alpha"),
                       labels, std::move(p_hat), margin);
}

PesgConfig pesg_config(const FinetuneSettings& f) {
  PesgConfig p;
  p.lr = f.lr;
  p.weight_decay = f.weight_decay;
  p.epoch_decay = f.epoch_decay;
  p.decay_epochs = f.decay_epochs;
  return p;
}

struct ShotOutcome {
  double val_auroc = 0.0;
  MetricSummary test;
  std::size_t episodes = 0;
  std::size_t repeats = 0;
};

/// Episodic meta-fine-tuning for one shot setting.
ShotOutcome meta_finetune(const ExperimentConfig& cfg, const ExperimentData& data, const ParameterSetF& pretrained,
                          std::size_t shot, bool evaluate_test, const std::string& run_id,
                          std::vector<MetricRow>& rows) {
  const FinetuneSettings& f = cfg.finetune;
  const LabelPlan plan = label_plan(f.kind);
  const SeededRng root = SeededRng(cfg.seed).fork(100 + shot);

  const std::vector<LabeledImage>& train_images = plan.other_source ? data.other.images : data.source.images;
  const std::vector<std::size_t> train_pool =
      plan.other_source ? iota_indices(data.other.images.size()) : data.split.train;
  const EpisodeSpec train_spec{cfg.train_ways, shot, cfg.queries, plan.train_space};
  const EpisodeSpec eval_spec{cfg.eval_ways, shot, cfg.queries, LabelSpace::coarse};

  std::vector<Episode> val_episodes;
  for (std::size_t v = 0; v < f.val_episodes; ++v) {
    SeededRng r = root.fork(7000000 + v);
    val_episodes.push_back(sample_episode(data.source.images, data.split.val, eval_spec, r));
  }

  ParameterSetF params = pretrained;
  const bool aucm = f.loss == EpisodeLoss::aucm;
  if (aucm) add_aucm_params(params, cfg.train_ways);
  Pesg<float> opt(params, pesg_config(f), aucm ? std::set<std::string>{"aucm.alpha"} : std::set<std::string>{});
  const std::vector<double> p_hat(cfg.train_ways, 1.0 / static_cast<double>(cfg.train_ways));

  SeededRng train_rng = root.fork(1);
  ParameterSetF best = params;
  double best_val = -1.0;
  for (std::size_t epoch = 0; epoch < f.epochs; ++epoch) {
    opt.begin_epoch(epoch, params);
    for (std::size_t e = 0; e < f.episodes_per_epoch; ++e) {
      const Episode ep = sample_episode(train_images, train_pool, train_spec, train_rng);
      std::vector<std::size_t> all = ep.support;
      all.insert(all.end(), ep.query.begin(), ep.query.end());
      const auto px = pixels_at(train_images, all);
      ArrayF packed = pack_images<float>(px, cfg.encoder);

      Graph<float> g(&params);
      NodeId in = g.input("images", packed.shape());
      NodeId bdc = build_bdc(g, build_encoder(g, cfg.encoder, in), f.head.normalize);
      const std::size_t ns = ep.support.size();
      std::vector<std::size_t> srows = iota_indices(ns), qrows;
      for (std::size_t i = 0; i < ep.query.size(); ++i) qrows.push_back(ns + i);
      NodeId logits = build_episode_logits(g, ops::gather_rows(g, bdc, srows), ep.support_labels, cfg.train_ways,
                                           ops::gather_rows(g, bdc, qrows), f.head);
      NodeId loss = aucm ? aucm_on_probabilities(g, logits, ep.query_labels, p_hat, f.aucm_margin)
                         : ops::softmax_cross_entropy(g, logits, ep.query_labels);
      g.forward({{"images", std::move(packed)}});
      if (!std::isfinite(g.value(loss)[0])) {
        throw NumericError("meta-fine-tuning loss is not finite at epoch " + std::to_string(epoch));
      }
      params.zero_grad();
      g.backward(loss);
      opt.step(params);
    }

    const EmbeddedPool val_pool = embed_pool(params, cfg.encoder, data.source.images, data.split.val, f.head.normalize);
    double sum = 0.0;
    for (std::size_t v = 0; v < val_episodes.size(); ++v) {
      const double a = episode_auroc(val_pool, val_episodes[v], cfg.eval_ways, f.head);
      rows.push_back({run_id, "val", v, epoch, a});
      sum += a;
    }
    const double mean = sum / static_cast<double>(val_episodes.size());
    if (mean > best_val) {
      best_val = mean;
      best = params;
    }
  }

  ShotOutcome out;
  out.val_auroc = best_val;
  if (!evaluate_test) return out;
  const EmbeddedPool test_pool = embed_pool(best, cfg.encoder, data.source.images, data.split.test, f.head.normalize);
  std::vector<std::vector<double>> per_repeat(cfg.evaluation.repeats);
  for (std::size_t r = 0; r < cfg.evaluation.repeats; ++r) {
    for (std::size_t e = 0; e < cfg.evaluation.test_episodes; ++e) {
      SeededRng er = root.fork(9000000 + r * 100000 + e);
      const Episode ep = sample_episode(data.source.images, data.split.test, eval_spec, er);
      const double a = episode_auroc(test_pool, ep, cfg.eval_ways, f.head);
      per_repeat[r].push_back(a);
      rows.push_back({run_id, "test", e, r, a});
    }
  }
  out.test = aggregate_episode_metrics(per_repeat);
  out.episodes = cfg.evaluation.test_episodes;
  out.repeats = cfg.evaluation.repeats;
  return out;
}

ArrayD classifier_probabilities(const ParameterSetF& params, const EncoderConfig& enc,
                                std::span<const ArrayF> images, std::size_t classes) {
  std::vector<double> out;
  for (std::size_t start = 0; start < images.size(); start += kEmbedBatch) {
    const std::size_t len = std::min(kEmbedBatch, images.size() - start);
    ArrayF packed = pack_images(images.subspan(start, len), enc);
    Graph<float> g(static_cast<const ParameterSetF*>(&params));
    NodeId in = g.input("images", packed.shape());
    NodeId s = build_classifier(g, build_encoder(g, enc, in), classes);
    g.forward({{"images", std::move(packed)}});
    const ArrayF& v = g.value(s);
    out.insert(out.end(), v.data().begin(), v.data().end());
  }
  return softmax_rows(ArrayD({images.size(), classes}, std::move(out)));
}

std::vector<std::size_t> coarse_labels(const std::vector<LabeledImage>& images, std::span<const std::size_t> idx) {
  std::vector<std::size_t> out;
  for (std::size_t i : idx) out.push_back(images.at(i).coarse);
  return out;
}

/// Conventional mini-batch training of a coarse classifier with AUC-M and
/// PESG; evaluated once on the whole test split.
ShotOutcome supervised_finetune(const ExperimentConfig& cfg, const ExperimentData& data,
                                const ParameterSetF& pretrained, bool evaluate_test, const std::string& run_id,
                                std::vector<MetricRow>& rows) {
  const FinetuneSettings& f = cfg.finetune;
  const SeededRng root = SeededRng(cfg.seed).fork(100);
  const std::size_t classes = data.source.hierarchy.n_coarse;
  const auto& images = data.source.images;

  ParameterSetF params = pretrained;
  SeededRng init_rng = root.fork(2);
  add_classifier_head(params, cfg.encoder, classes, init_rng);
  add_aucm_params(params, classes);
  Pesg<float> opt(params, pesg_config(f), {"aucm.alpha"});

  std::vector<double> p_hat(classes, 0.0);
  for (std::size_t i : data.split.train) p_hat[images[i].coarse] += 1.0;
  for (double& p : p_hat) p /= static_cast<double>(data.split.train.size());

  const auto val_px = pixels_at(images, data.split.val);
  const auto val_labels = coarse_labels(images, data.split.val);

  SeededRng shuffle_rng = root.fork(1);
  ParameterSetF best = params;
  double best_val = -1.0;
  std::vector<std::size_t> order = data.split.train;
  for (std::size_t epoch = 0; epoch < f.epochs; ++epoch) {
    opt.begin_epoch(epoch, params);
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start + 1 < order.size(); start += f.batch_size) {
      const std::size_t len = std::min(f.batch_size, order.size() - start);
      if (len < 2) break;
      std::span<const std::size_t> idx(order.data() + start, len);
      const auto px = pixels_at(images, idx);
      ArrayF packed = pack_images<float>(px, cfg.encoder);
      Graph<float> g(&params);
      NodeId in = g.input("images", packed.shape());
      NodeId logits = build_classifier(g, build_encoder(g, cfg.encoder, in), classes);
      NodeId loss = aucm_on_probabilities(g, logits, coarse_labels(images, idx), p_hat, f.aucm_margin);
      g.forward({{"images", std::move(packed)}});
      if (!std::isfinite(g.value(loss)[0])) {
        throw NumericError("supervised fine-tuning loss is not finite at epoch " + std::to_string(epoch));
      }
      params.zero_grad();
      g.backward(loss);
      opt.step(params);
    }
    const double val = auroc_multiclass_ovr(classifier_probabilities(params, cfg.encoder, val_px, classes), val_labels).mean;
    rows.push_back({run_id, "val", 0, epoch, val});
    if (val > best_val) {
      best_val = val;
      best = params;
    }
  }

  ShotOutcome out;
  out.val_auroc = best_val;
  if (!evaluate_test) return out;
  const auto test_px = pixels_at(images, data.split.test);
  const double test =
      auroc_multiclass_ovr(classifier_probabilities(best, cfg.encoder, test_px, classes),
                           coarse_labels(images, data.split.test))
          .mean;
  rows.push_back({run_id, "test", 0, 0, test});
  out.test = aggregate_episode_metrics({{test}});
  out.episodes = 1;
  out.repeats = 1;
  return out;
}

ParameterSetF supervised_proxy_pretrain(const ExperimentConfig& cfg, const Dataset& proxy, SeededRng& rng,
                                        std::vector<TraceRow>* trace) {
  const PretrainSettings& p = cfg.pretrain;
  const std::size_t classes = proxy.hierarchy.n_fine();
  ParameterSetF params = init_encoder<float>(cfg.encoder, rng);
  add_classifier_head(params, cfg.encoder, classes, rng);
  Sgd<float> sgd(params, {p.momentum, p.weight_decay});
  ScheduleConfig sched;
  sched.base_lr = p.base_lr > 0.0 ? p.base_lr : lr_from_batch(static_cast<std::int64_t>(p.batch_size));
  sched.total_epochs = p.epochs;

  std::vector<std::size_t> order = iota_indices(proxy.images.size());
  std::size_t iter = 0;
  for (std::size_t epoch = 0; epoch < p.epochs; ++epoch) {
    const double lr = schedule_lr(sched, epoch);
    SeededRng er = rng.fork(10000 + epoch);
    er.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += p.batch_size) {
      const std::size_t len = std::min(p.batch_size, order.size() - start);
      if (len < 2) break;
      std::span<const std::size_t> idx(order.data() + start, len);
      const auto px = pixels_at(proxy.images, idx);
      std::vector<std::size_t> labels;
      for (std::size_t i : idx) labels.push_back(proxy.images[i].fine);
      ArrayF packed = pack_images<float>(px, cfg.encoder);
      Graph<float> g(&params);
      NodeId in = g.input("images", packed.shape());
      NodeId loss = ops::softmax_cross_entropy(
          g, build_classifier(g, build_encoder(g, cfg.encoder, in), classes), labels);
      g.forward({{"images", std::move(packed)}});
      const double value = g.value(loss)[0];
      if (!std::isfinite(value)) throw NumericError("supervised proxy loss is not finite");
      params.zero_grad();
      g.backward(loss);
      sgd.step(params, lr);
      if (trace) trace->push_back({iter, 0, value, 0.0, lr});
      ++iter;
    }
  }
  return params;
}

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

}  // namespace

// ------------------------------------------------------------------------ data

RawData generate_raw_data(const DataSettings& data, std::uint64_t seed) {
  const SyntheticConfig base = SyntheticConfig::family_default(0);
  const DomainStyle& s_style = base.domains.at(0);
  const DomainStyle& p_style = base.domains.at(1);

  RawData raw;
  SyntheticConfig src = family_config(0, data, splitmix64(seed + 1), "src-");
  // Only labeled train-domain images carry annotation markers.
  src.domains = {domain_like(data.train_domain, data.train_per_class, s_style, data.noise_scale,
                             data.marker_probability),
                 domain_like(data.eval_domain, data.eval_per_class, p_style, data.noise_scale)};
  raw.source = generate_synthetic(src);

  SyntheticConfig unl = family_config(0, data, splitmix64(seed + 2), "unl-");
  unl.domains = {domain_like(data.train_domain, data.unlabeled_per_class, s_style, data.noise_scale)};
  raw.unlabeled = generate_synthetic(unl);

  SyntheticConfig oth = family_config(1, data, splitmix64(seed + 3), "oth-");
  // A separate acquisition: its own tone curve and noise level.
  DomainStyle o_style = s_style;
  o_style.gamma = data.other_gamma;
  oth.domains = {domain_like(data.train_domain, data.other_per_class, o_style, data.other_noise_scale)};
  raw.other = generate_synthetic(oth);

  SyntheticConfig prx = family_config(2, data, splitmix64(seed + 4), "prx-");
  prx.domains = {domain_like(data.train_domain, data.proxy_per_class, s_style, data.noise_scale)};
  raw.proxy = generate_synthetic(prx);
  return raw;
}

void write_raw_data(const std::filesystem::path& dir, const RawData& raw) {
  write_dataset(dir / "source", raw.source);
  write_dataset(dir / "other", raw.other);
  write_dataset(dir / "unlabeled", raw.unlabeled);
  write_dataset(dir / "proxy", raw.proxy);
}

ExperimentData prepare_data(const ExperimentConfig& config) {
  const DataSettings& d = config.data;
  RawData raw;
  if (d.dir.empty()) {
    raw = generate_raw_data(d, d.seed != 0 ? d.seed : config.seed);
  } else {
    const std::filesystem::path dir(d.dir);
    raw.source = read_dataset(dir / "source");
    raw.other = read_dataset(dir / "other");
    raw.unlabeled = read_dataset(dir / "unlabeled");
    raw.proxy = read_dataset(dir / "proxy");
  }
  ExperimentData out;
  out.source = preprocess_dataset(raw.source, d.fov_mm, d.image_size);
  out.other = preprocess_dataset(raw.other, d.fov_mm, d.image_size);
  out.unlabeled = preprocess_dataset(raw.unlabeled, d.fov_mm, d.image_size);
  out.proxy = preprocess_dataset(raw.proxy, d.fov_mm, d.image_size);

  // All train-domain images go to training; the eval domain is halved into
  // validation and test.
  std::size_t n_train = 0;
  for (const auto& img : out.source.images) n_train += img.domain == d.train_domain ? 1 : 0;
  const double n = static_cast<double>(out.source.images.size());
  const double eval = (n - static_cast<double>(n_train)) / (2.0 * n);
  out.split = split_dataset(out.source, d.train_domain, d.eval_domain,
                            SplitFractions{static_cast<double>(n_train) / n, eval, eval});
  return out;
}

// ------------------------------------------------------------------- training

ParameterSetF run_pretrain(const ExperimentConfig& config, const ExperimentData& data,
                           std::vector<TraceRow>* trace) {
  SeededRng rng = SeededRng(config.seed).fork(1);
  const PretrainSettings& p = config.pretrain;
  switch (p.kind) {
    case PretrainKind::none:
      return strip_heads(init_encoder<float>(config.encoder, rng));
    case PretrainKind::supervised_proxy:
      return strip_heads(supervised_proxy_pretrain(config, data.proxy, rng, trace));
    case PretrainKind::simclr:
    case PretrainKind::ipirm: {
      PretrainConfig pc;
      pc.mode = p.kind == PretrainKind::simclr ? PretrainMode::simclr : PretrainMode::ipirm;
      pc.ipirm = p.ipirm;
      pc.augment = p.augment;
      pc.epochs = p.epochs;
      pc.batch_size = p.batch_size;
      pc.sgd = {p.momentum, p.weight_decay};
      pc.base_lr = p.base_lr;
      const auto images = pixels_of(data.unlabeled.images);
      PretrainResult<float> r = pretrain<float>(config.encoder, images, pc, rng);
      if (trace) trace->insert(trace->end(), r.trace.begin(), r.trace.end());
      return strip_heads(r.params);
    }
  }
  throw Error("unknown pretrain kind");
}

RunArtifacts run_finetune(const ExperimentConfig& config, const ExperimentData& data,
                          const ParameterSetF& pretrained, bool evaluate_test) {
  RunArtifacts art;
  art.encoder_params = pretrained;
  const FinetuneKind kind = config.finetune.kind;
  std::optional<ShotOutcome> supervised;
  std::vector<MetricRow> supervised_rows;
  std::string supervised_error;
  for (std::size_t shot : config.shots) {
    CellResult cell;
    cell.pretrain = config.pretrain.kind;
    cell.finetune = kind;
    cell.shot = shot;
    const std::string run_id = cell_run_id(config, cell.pretrain, kind, shot);
    try {
      ShotOutcome o;
      if (kind == FinetuneKind::supervised) {
        // Independent of K: trained once, reported under every shot column.
        if (!supervised && supervised_error.empty()) {
          try {
            supervised = supervised_finetune(config, data, pretrained, evaluate_test, run_id, supervised_rows);
          } catch (const Error& e) {
            supervised_error = e.what();
          }
        }
        if (!supervised) throw Error(supervised_error);
        o = *supervised;
        for (MetricRow row : supervised_rows) {
          row.run_id = run_id;
          art.metrics.push_back(std::move(row));
        }
      } else {
        o = meta_finetune(config, data, pretrained, shot, evaluate_test, run_id, art.metrics);
      }
      cell.ok = true;
      cell.val_auroc = o.val_auroc;
      cell.test = o.test;
      cell.episodes = o.episodes;
      cell.repeats = o.repeats;
    } catch (const Error& e) {
      cell.ok = false;
      cell.reason = e.what();
    }
    art.cells.push_back(std::move(cell));
  }
  return art;
}

RunArtifacts run_experiment(const ExperimentConfig& config, const ExperimentData& data, bool evaluate_test) {
  config.validate();
  std::vector<TraceRow> trace;
  ParameterSetF encoder;
  try {
    encoder = run_pretrain(config, data, &trace);
  } catch (const Error& e) {
    RunArtifacts art;
    for (std::size_t shot : config.shots) {
      CellResult cell;
      cell.pretrain = config.pretrain.kind;
      cell.finetune = config.finetune.kind;
      cell.shot = shot;
      cell.reason = std::string("pretraining: ") + e.what();
      art.cells.push_back(std::move(cell));
    }
    art.pretrain_trace = std::move(trace);
    return art;
  }
  RunArtifacts art = run_finetune(config, data, encoder, evaluate_test);
  art.pretrain_trace = std::move(trace);
  return art;
}

AblationResult run_ablation(const ExperimentConfig& config, const ExperimentData& data) {
  config.validate();
  AblationResult out;
  out.table.seed = config.seed;
  out.table.config_digest = config.digest();
  for (PretrainKind p : config.table_pretrain) {
    ExperimentConfig c = config;
    c.pretrain.kind = p;
    std::optional<ParameterSetF> encoder;
    std::string failure;
    try {
      encoder = run_pretrain(c, data);
    } catch (const Error& e) {
      failure = std::string("pretraining: ") + e.what();
    }
    for (FinetuneKind f : config.table_finetune) {
      c.finetune.kind = f;
      if (!encoder) {
        for (std::size_t shot : c.shots) {
          CellResult cell;
          cell.pretrain = p;
          cell.finetune = f;
          cell.shot = shot;
          cell.reason = failure;
          out.table.cells.push_back(std::move(cell));
        }
        continue;
      }
      RunArtifacts art = run_finetune(c, data, *encoder, true);
      out.table.cells.insert(out.table.cells.end(), art.cells.begin(), art.cells.end());
      out.metrics.insert(out.metrics.end(), art.metrics.begin(), art.metrics.end());
    }
  }
  return out;
}

GridResult grid_search(const ExperimentConfig& base, const ExperimentData& data) {
  if (base.grid.empty()) throw Error("grid_search: grid is empty");
  std::size_t total = 1;
  for (const auto& [key, values] : base.grid) {
    if (values.empty()) throw Error("grid_search: axis '" + key + "' has no values");
    total *= values.size();
  }
  GridResult result;
  bool found = false;
  double best = 0.0;
  for (std::size_t cell_index = 0; cell_index < total; ++cell_index) {
    // First axis varies slowest.
    ExperimentConfig c = base;
    c.grid.clear();
    GridCell cell;
    std::size_t rem = cell_index;
    std::vector<std::size_t> pick(base.grid.size());
    for (std::size_t a = base.grid.size(); a-- > 0;) {
      pick[a] = rem % base.grid[a].second.size();
      rem /= base.grid[a].second.size();
    }
    try {
      for (std::size_t a = 0; a < base.grid.size(); ++a) {
        const auto& [key, values] = base.grid[a];
        cell.values[key] = values[pick[a]];
        set_config_value(c, key, values[pick[a]]);
      }
      c.validate();
      RunArtifacts art = run_experiment(c, data, false);
      double sum = 0.0;
      for (const auto& r : art.cells) {
        if (!r.ok) throw Error(r.reason);
        sum += r.val_auroc;
      }
      cell.ok = true;
      cell.val_auroc = sum / static_cast<double>(art.cells.size());
    } catch (const Error& e) {
      cell.ok = false;
      cell.reason = e.what();
    }
    if (cell.ok && (!found || cell.val_auroc > best)) {
      found = true;
      best = cell.val_auroc;
      result.best = c;
      result.best_index = cell_index;
    }
    result.cells.push_back(std::move(cell));
  }
  if (!found) throw Error("grid_search: every grid cell failed");
  return result;
}

// --------------------------------------------------------------------- report

void emit_report(const ResultsTable& table, const std::filesystem::path& dir) {
  if (table.cells.empty()) throw Error("emit_report: results table is empty");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("emit_report: cannot create '" + dir.string() + "': " + ec.message());

  {
    std::ofstream csv(dir / "results.csv", std::ios::binary);
    if (!csv) throw Error("emit_report: cannot write '" + (dir / "results.csv").string() + "'");
    csv << "seed,config_digest,pretrain,finetune,shot,status,mean,std,val_auroc,episodes,repeats,reason\n";
    for (const auto& c : table.cells) {
      csv << table.seed << ',' << table.config_digest << ',' << to_string(c.pretrain) << ','
          << to_string(c.finetune) << ',' << c.shot << ',' << (c.ok ? "ok" : "failed") << ','
          << (c.ok ? format_double(c.test.mean) : "") << ',' << (c.ok ? format_double(c.test.std) : "") << ','
          << (c.ok ? format_double(c.val_auroc) : "") << ',' << c.episodes << ',' << c.repeats << ','
          << csv_field(c.reason) << '\n';
    }
    if (!csv) throw Error("emit_report: failed writing results.csv");
  }

  // Rows are pretrain kinds, columns fine-tune kinds x shots, in first-seen order.
  std::vector<PretrainKind> rows;
  std::vector<std::pair<FinetuneKind, std::size_t>> cols;
  std::map<std::pair<std::size_t, std::size_t>, std::string> text;
  for (const auto& c : table.cells) {
    auto r = std::find(rows.begin(), rows.end(), c.pretrain);
    if (r == rows.end()) r = rows.insert(rows.end(), c.pretrain);
    const std::pair<FinetuneKind, std::size_t> key{c.finetune, c.shot};
    auto k = std::find(cols.begin(), cols.end(), key);
    if (k == cols.end()) k = cols.insert(cols.end(), key);
    text[{static_cast<std::size_t>(r - rows.begin()), static_cast<std::size_t>(k - cols.begin())}] =
        c.ok ? fixed4(c.test.mean) + " +/- " + fixed4(c.test.std) : "FAILED(" + c.reason + ")";
  }
  std::vector<std::string> header{"pretrain"};
  for (const auto& [f, k] : cols) header.push_back(to_string(f) + " " + std::to_string(k) + "-shot");
  std::vector<std::vector<std::string>> grid{header};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::vector<std::string> line{to_string(rows[r])};
    for (std::size_t k = 0; k < cols.size(); ++k) {
      auto it = text.find({r, k});
      line.push_back(it == text.end() ? "-" : it->second);
    }
    grid.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : grid) {
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  }
  std::ofstream txt(dir / "results.txt", std::ios::binary);
  if (!txt) throw Error("emit_report: cannot write '" + (dir / "results.txt").string() + "'");
  txt << "seed: " << table.seed << "\nconfig digest: " << table.config_digest << "\n";
  txt << "cells: mean +/- std of meta-test AUROC over repeats\n\n";
  for (const auto& line : grid) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      txt << line[i];
      if (i + 1 < line.size()) txt << std::string(width[i] - line[i].size() + 2, ' ');
    }
    txt << '\n';
  }
  if (!txt) throw Error("emit_report: failed writing results.txt");
}

}  // namespace metabdc
