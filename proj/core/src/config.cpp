#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "metabdc/runner.hpp"

namespace metabdc {

using nlohmann::json;

namespace {

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

constexpr EnumName<PretrainKind> kPretrainNames[] = {{PretrainKind::none, "none"},
                                                     {PretrainKind::supervised_proxy, "supervised_proxy"},
                                                     {PretrainKind::simclr, "simclr"},
                                                     {PretrainKind::ipirm, "ipirm"}};
constexpr EnumName<FinetuneKind> kFinetuneNames[] = {
    {FinetuneKind::meta_fine_same, "meta_fine_same"},
    {FinetuneKind::meta_fine_other, "meta_fine_other"},
    {FinetuneKind::meta_coarse_other, "meta_coarse_other"},
    {FinetuneKind::meta_coarse_same, "meta_coarse_same"},
    {FinetuneKind::supervised, "supervised"}};

template <typename E, std::size_t N>
std::string name_of(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table) {
    if (e.value == v) return e.name;
  }
  throw Error("unnamed enum value");
}

template <typename E, std::size_t N>
E parse_name(const EnumName<E> (&table)[N], const std::string& s, const char* what) {
  std::string allowed;
  for (const auto& e : table) {
    if (s == e.name) return e.value;
    allowed += std::string(allowed.empty() ? "" : ", ") + e.name;
  }
  throw FormatError(std::string("unknown ") + what + " '" + s + "' (expected one of: " + allowed + ")");
}

// Reads fields of one JSON object and rejects any key that was not consumed.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw FormatError("config: '" + label() + "' must be an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const json::exception& e) {
      throw FormatError("config: '" + child(key) + "': " + e.what());
    }
  }

  const json* object(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw FormatError("config: unknown key '" + child(it.key().c_str()) + "'");
      }
    }
  }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json encoder_json(const EncoderConfig& e) {
  json stages = json::array();
  for (const auto& s : e.stages) stages.push_back({{"out_channels", s.out_channels}, {"kernel", s.kernel}, {"stride", s.stride}});
  return {{"height", e.height},
          {"width", e.width},
          {"channels", e.channels},
          {"stages", stages},
          {"projection_hidden", e.projection_hidden},
          {"projection_dim", e.projection_dim}};
}

void read_encoder(const json& j, EncoderConfig& e) {
  ObjectReader r(j, "encoder");
  r.get("height", e.height);
  r.get("width", e.width);
  r.get("channels", e.channels);
  r.get("projection_hidden", e.projection_hidden);
  r.get("projection_dim", e.projection_dim);
  if (const json* st = r.object("stages")) {
    if (!st->is_array()) throw FormatError("config: 'encoder.stages' must be an array");
    e.stages.clear();
    for (std::size_t i = 0; i < st->size(); ++i) {
      ConvStage s;
      ObjectReader sr((*st)[i], "encoder.stages[" + std::to_string(i) + "]");
      sr.get("out_channels", s.out_channels);
      sr.get("kernel", s.kernel);
      sr.get("stride", s.stride);
      sr.finish();
      e.stages.push_back(s);
    }
  }
  r.finish();
}

std::string reduction_name(LossReduction r) { return r == LossReduction::mean ? "mean" : "sum"; }
std::string metric_name(BdcMetric m) { return m == BdcMetric::neg_sq_distance ? "neg_sq_distance" : "inner_product"; }
std::string loss_name(EpisodeLoss l) { return l == EpisodeLoss::cross_entropy ? "cross_entropy" : "aucm"; }

}  // namespace

std::string to_string(PretrainKind k) { return name_of(kPretrainNames, k); }
std::string to_string(FinetuneKind k) { return name_of(kFinetuneNames, k); }
PretrainKind parse_pretrain_kind(const std::string& s) { return parse_name(kPretrainNames, s, "pretrain kind"); }
FinetuneKind parse_finetune_kind(const std::string& s) { return parse_name(kFinetuneNames, s, "fine-tune kind"); }

LabelPlan label_plan(FinetuneKind kind) {
  switch (kind) {
    case FinetuneKind::meta_fine_same:
      return {LabelSpace::fine, false, true};
    case FinetuneKind::meta_fine_other:
      return {LabelSpace::fine, true, true};
    case FinetuneKind::meta_coarse_other:
      return {LabelSpace::coarse, true, true};
    case FinetuneKind::meta_coarse_same:
      return {LabelSpace::coarse, false, true};
    case FinetuneKind::supervised:
      return {LabelSpace::coarse, false, false};
  }
  throw Error("unknown fine-tune kind");
}

std::string config_to_json(const ExperimentConfig& c) {
  const auto& p = c.pretrain;
  const auto& f = c.finetune;
  const auto& d = c.data;
  json grid = json::array();
  for (const auto& [key, values] : c.grid) grid.push_back({{"key", key}, {"values", values}});
  json rows = json::array(), cols = json::array();
  for (auto k : c.table_pretrain) rows.push_back(to_string(k));
  for (auto k : c.table_finetune) cols.push_back(to_string(k));
  json j = {
      {"run_id", c.run_id},
      {"seed", c.seed},
      {"encoder", encoder_json(c.encoder)},
      {"pretrain",
       {{"kind", to_string(p.kind)},
        {"epochs", p.epochs},
        {"batch_size", p.batch_size},
        {"weight_decay", p.weight_decay},
        {"momentum", p.momentum},
        {"base_lr", p.base_lr},
        {"lambda1", p.ipirm.lambda1},
        {"lambda2", p.ipirm.lambda2},
        {"tau", p.ipirm.tau},
        {"outer_iterations", p.ipirm.outer_iterations},
        {"search_steps", p.ipirm.search_steps},
        {"search_lr", p.ipirm.search_lr},
        {"search_restarts", p.ipirm.search_restarts},
        {"search_batch", p.ipirm.search_batch},
        {"refine_max_n", p.ipirm.refine_max_n},
        {"tolerance", p.ipirm.tolerance},
        {"reduction", reduction_name(p.ipirm.reduction)},
        {"augment",
         {{"identity", p.augment.identity},
          {"crop_scale_min", p.augment.crop_scale_min},
          {"crop_scale_max", p.augment.crop_scale_max},
          {"gain_min", p.augment.gain_min},
          {"gain_max", p.augment.gain_max},
          {"bias_range", p.augment.bias_range},
          {"noise_std", p.augment.noise_std}}}}},
      {"finetune",
       {{"kind", to_string(f.kind)},
        {"epochs", f.epochs},
        {"episodes_per_epoch", f.episodes_per_epoch},
        {"lr", f.lr},
        {"weight_decay", f.weight_decay},
        {"epoch_decay", f.epoch_decay},
        {"decay_epochs", f.decay_epochs},
        {"loss", loss_name(f.loss)},
        {"aucm_margin", f.aucm_margin},
        {"metric", metric_name(f.head.metric)},
        {"temperature", f.head.temperature},
        {"normalize", f.head.normalize},
        {"val_episodes", f.val_episodes},
        {"batch_size", f.batch_size}}},
      {"episodes", {{"train_ways", c.train_ways}, {"eval_ways", c.eval_ways}, {"queries", c.queries}, {"shots", c.shots}}},
      {"evaluation", {{"test_episodes", c.evaluation.test_episodes}, {"repeats", c.evaluation.repeats}}},
      {"data",
       {{"dir", d.dir},
        {"seed", d.seed},
        {"train_per_class", d.train_per_class},
        {"eval_per_class", d.eval_per_class},
        {"unlabeled_per_class", d.unlabeled_per_class},
        {"other_per_class", d.other_per_class},
        {"proxy_per_class", d.proxy_per_class},
        {"group_size", d.group_size},
        {"fov_mm", d.fov_mm},
        {"image_size", d.image_size},
        {"train_domain", d.train_domain},
        {"eval_domain", d.eval_domain},
        {"marker_probability", d.marker_probability},
        {"noise_scale", d.noise_scale},
        {"other_gamma", d.other_gamma},
        {"other_noise_scale", d.other_noise_scale}}},
      {"grid", grid},
      {"table", {{"pretrain", rows}, {"finetune", cols}}}};
  return j.dump(2);
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig c;
  ObjectReader root(j, "");
  root.get("run_id", c.run_id);
  root.get("seed", c.seed);
  if (const json* e = root.object("encoder")) read_encoder(*e, c.encoder);
  if (const json* pj = root.object("pretrain")) {
    auto& p = c.pretrain;
    ObjectReader r(*pj, "pretrain");
    std::string kind = to_string(p.kind), reduction = reduction_name(p.ipirm.reduction);
    r.get("kind", kind);
    p.kind = parse_pretrain_kind(kind);
    r.get("epochs", p.epochs);
    r.get("batch_size", p.batch_size);
    r.get("weight_decay", p.weight_decay);
    r.get("momentum", p.momentum);
    r.get("base_lr", p.base_lr);
    r.get("lambda1", p.ipirm.lambda1);
    r.get("lambda2", p.ipirm.lambda2);
    r.get("tau", p.ipirm.tau);
    r.get("outer_iterations", p.ipirm.outer_iterations);
    r.get("search_steps", p.ipirm.search_steps);
    r.get("search_lr", p.ipirm.search_lr);
    r.get("search_restarts", p.ipirm.search_restarts);
    r.get("search_batch", p.ipirm.search_batch);
    r.get("refine_max_n", p.ipirm.refine_max_n);
    r.get("tolerance", p.ipirm.tolerance);
    r.get("reduction", reduction);
    if (reduction == "mean") {
      p.ipirm.reduction = LossReduction::mean;
    } else if (reduction == "sum") {
      p.ipirm.reduction = LossReduction::sum;
    } else {
      throw FormatError("config: 'pretrain.reduction' must be 'mean' or 'sum'");
    }
    if (const json* aj = r.object("augment")) {
      ObjectReader a(*aj, "pretrain.augment");
      a.get("identity", p.augment.identity);
      a.get("crop_scale_min", p.augment.crop_scale_min);
      a.get("crop_scale_max", p.augment.crop_scale_max);
      a.get("gain_min", p.augment.gain_min);
      a.get("gain_max", p.augment.gain_max);
      a.get("bias_range", p.augment.bias_range);
      a.get("noise_std", p.augment.noise_std);
      a.finish();
    }
    r.finish();
  }
  if (const json* fj = root.object("finetune")) {
    auto& f = c.finetune;
    ObjectReader r(*fj, "finetune");
    std::string kind = to_string(f.kind), loss = loss_name(f.loss), metric = metric_name(f.head.metric);
    r.get("kind", kind);
    f.kind = parse_finetune_kind(kind);
    r.get("epochs", f.epochs);
    r.get("episodes_per_epoch", f.episodes_per_epoch);
    r.get("lr", f.lr);
    r.get("weight_decay", f.weight_decay);
    r.get("epoch_decay", f.epoch_decay);
    r.get("decay_epochs", f.decay_epochs);
    r.get("loss", loss);
    r.get("aucm_margin", f.aucm_margin);
    r.get("metric", metric);
    r.get("temperature", f.head.temperature);
    r.get("normalize", f.head.normalize);
    r.get("val_episodes", f.val_episodes);
    r.get("batch_size", f.batch_size);
    if (loss == "cross_entropy") {
      f.loss = EpisodeLoss::cross_entropy;
    } else if (loss == "aucm") {
      f.loss = EpisodeLoss::aucm;
    } else {
      throw FormatError("config: 'finetune.loss' must be 'cross_entropy' or 'aucm'");
    }
    if (metric == "neg_sq_distance") {
      f.head.metric = BdcMetric::neg_sq_distance;
    } else if (metric == "inner_product") {
      f.head.metric = BdcMetric::inner_product;
    } else {
      throw FormatError("config: 'finetune.metric' must be 'neg_sq_distance' or 'inner_product'");
    }
    r.finish();
  }
  if (const json* ej = root.object("episodes")) {
    ObjectReader r(*ej, "episodes");
    r.get("train_ways", c.train_ways);
    r.get("eval_ways", c.eval_ways);
    r.get("queries", c.queries);
    r.get("shots", c.shots);
    r.finish();
  }
  if (const json* vj = root.object("evaluation")) {
    ObjectReader r(*vj, "evaluation");
    r.get("test_episodes", c.evaluation.test_episodes);
    r.get("repeats", c.evaluation.repeats);
    r.finish();
  }
  if (const json* dj = root.object("data")) {
    auto& d = c.data;
    ObjectReader r(*dj, "data");
    r.get("dir", d.dir);
    r.get("seed", d.seed);
    r.get("train_per_class", d.train_per_class);
    r.get("eval_per_class", d.eval_per_class);
    r.get("unlabeled_per_class", d.unlabeled_per_class);
    r.get("other_per_class", d.other_per_class);
    r.get("proxy_per_class", d.proxy_per_class);
    r.get("group_size", d.group_size);
    r.get("fov_mm", d.fov_mm);
    r.get("image_size", d.image_size);
    r.get("train_domain", d.train_domain);
    r.get("eval_domain", d.eval_domain);
    r.get("marker_probability", d.marker_probability);
    r.get("noise_scale", d.noise_scale);
    r.get("other_gamma", d.other_gamma);
    r.get("other_noise_scale", d.other_noise_scale);
    r.finish();
  }
  if (const json* gj = root.object("grid")) {
    if (!gj->is_array()) throw FormatError("config: 'grid' must be an array of {key, values}");
    for (std::size_t i = 0; i < gj->size(); ++i) {
      ObjectReader r((*gj)[i], "grid[" + std::to_string(i) + "]");
      std::string key;
      std::vector<double> values;
      r.get("key", key);
      r.get("values", values);
      r.finish();
      c.grid.emplace_back(key, values);
    }
  }
  if (const json* tj = root.object("table")) {
    ObjectReader r(*tj, "table");
    std::vector<std::string> rows, cols;
    for (auto k : c.table_pretrain) rows.push_back(to_string(k));
    for (auto k : c.table_finetune) cols.push_back(to_string(k));
    r.get("pretrain", rows);
    r.get("finetune", cols);
    r.finish();
    c.table_pretrain.clear();
    c.table_finetune.clear();
    for (const auto& n : rows) c.table_pretrain.push_back(parse_pretrain_kind(n));
    for (const auto& n : cols) c.table_finetune.push_back(parse_finetune_kind(n));
  }
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void ExperimentConfig::validate() const {
  encoder.validate();
  pretrain.ipirm.validate();
  pretrain.augment.validate();
  if (pretrain.batch_size < 2) throw Error("config: pretrain.batch_size must be >= 2");
  if (pretrain.kind != PretrainKind::none && pretrain.epochs == 0) throw Error("config: pretrain.epochs must be positive");
  if (finetune.epochs == 0) throw Error("config: finetune.epochs must be positive");
  if (!(finetune.lr > 0.0)) throw Error("config: finetune.lr must be positive");
  for (std::size_t e : finetune.decay_epochs) {
    if (e >= finetune.epochs) throw Error("config: finetune decay epoch " + std::to_string(e) + " not below epochs");
  }
  if (!(finetune.head.temperature > 0.0)) throw Error("config: finetune.temperature must be positive");
  if (finetune.val_episodes == 0) throw Error("config: finetune.val_episodes must be positive");
  if (train_ways < 2 || eval_ways < 2) throw Error("config: episode ways must be >= 2");
  if (queries == 0) throw Error("config: episodes.queries must be positive");
  if (shots.empty()) throw Error("config: episodes.shots is empty");
  for (std::size_t k : shots) {
    if (k == 0) throw Error("config: shots must be positive");
  }
  if (evaluation.test_episodes == 0 || evaluation.repeats == 0) throw Error("config: evaluation counts must be positive");
  if (data.image_size != encoder.height || data.image_size != encoder.width) {
    throw Error("config: data.image_size must equal the encoder input size");
  }
  if (!(data.marker_probability >= 0.0 && data.marker_probability <= 1.0)) {
    throw Error("config: data.marker_probability must be in [0, 1]");
  }
  if (!(data.noise_scale >= 0.0)) throw Error("config: data.noise_scale must be >= 0");
  if (!(data.other_noise_scale >= 0.0)) throw Error("config: data.other_noise_scale must be >= 0");
  if (!(data.other_gamma > 0.0)) throw Error("config: data.other_gamma must be > 0");
  if (table_pretrain.empty() || table_finetune.empty()) throw Error("config: ablation table is empty");
  for (const auto& [key, values] : grid) {
    if (values.empty()) throw Error("config: grid axis '" + key + "' has no values");
    ExperimentConfig probe = *this;
    set_config_value(probe, key, values.front());
  }
}

std::string ExperimentConfig::digest() const {
  const std::string text = config_to_json(*this);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void apply_profile(ExperimentConfig& config, Profile profile) {
  if (profile == Profile::paper) {
    config.evaluation.test_episodes = 600;
    config.evaluation.repeats = 5;
  } else {
    config.evaluation.test_episodes = 100;
    config.evaluation.repeats = 3;
  }
}

void set_config_value(ExperimentConfig& c, const std::string& path, double v) {
  auto count = [&](double x) {
    if (!(x >= 0.0) || x != std::floor(x)) throw Error("grid: '" + path + "' needs a non-negative integer");
    return static_cast<std::size_t>(x);
  };
  if (path == "pretrain.weight_decay") {
    c.pretrain.weight_decay = v;
  } else if (path == "pretrain.batch_size") {
    c.pretrain.batch_size = count(v);
  } else if (path == "pretrain.epochs") {
    c.pretrain.epochs = count(v);
  } else if (path == "pretrain.lambda1") {
    c.pretrain.ipirm.lambda1 = v;
  } else if (path == "pretrain.lambda2") {
    c.pretrain.ipirm.lambda2 = v;
  } else if (path == "pretrain.tau") {
    c.pretrain.ipirm.tau = v;
  } else if (path == "finetune.lr") {
    c.finetune.lr = v;
  } else if (path == "finetune.weight_decay") {
    c.finetune.weight_decay = v;
  } else if (path == "finetune.epochs") {
    // Decay points follow the epoch budget at 20% and 50%.
    c.finetune.epochs = count(v);
    c.finetune.decay_epochs.clear();
    for (double frac : {0.2, 0.5}) {
      const auto e = static_cast<std::size_t>(std::floor(frac * v + 0.5));
      if (e > 0 && e < c.finetune.epochs) c.finetune.decay_epochs.push_back(e);
    }
  } else if (path == "finetune.temperature") {
    c.finetune.head.temperature = v;
  } else {
    throw Error("grid: unsupported key '" + path + "'");
  }
}

}  // namespace metabdc
