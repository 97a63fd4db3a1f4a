#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "metabdc/bdc.hpp"
#include "metabdc/data.hpp"
#include "metabdc/encoder.hpp"
#include "metabdc/metrics.hpp"
#include "metabdc/optim.hpp"
#include "metabdc/ssl.hpp"

namespace metabdc {

enum class PretrainKind { none, supervised_proxy, simclr, ipirm };
enum class FinetuneKind { meta_fine_same, meta_fine_other, meta_coarse_other, meta_coarse_same, supervised };
enum class EpisodeLoss { cross_entropy, aucm };
enum class Profile { ci, paper };

std::string to_string(PretrainKind k);
std::string to_string(FinetuneKind k);
PretrainKind parse_pretrain_kind(const std::string& s);
FinetuneKind parse_finetune_kind(const std::string& s);

/// Label spaces implied by a fine-tune kind: meta-train space and whether the
/// meta-train episodes come from the other-source dataset. Meta-val and
/// meta-test always use source coarse labels.
struct LabelPlan {
  LabelSpace train_space = LabelSpace::fine;
  bool other_source = false;
  bool episodic = true;
};
LabelPlan label_plan(FinetuneKind kind);

struct PretrainSettings {
  PretrainKind kind = PretrainKind::ipirm;
  std::size_t epochs = 4;
  std::size_t batch_size = 64;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  /// 0 = batch-size rule.
  double base_lr = 0.0;
  IpIrmConfig ipirm;
  AugmentConfig augment;
};

struct FinetuneSettings {
  FinetuneKind kind = FinetuneKind::meta_fine_same;
  std::size_t epochs = 6;
  std::size_t episodes_per_epoch = 20;
  double lr = 5e-2;
  double weight_decay = 1e-4;
  double epoch_decay = 1e-3;
  std::vector<std::size_t> decay_epochs;
  EpisodeLoss loss = EpisodeLoss::cross_entropy;
  double aucm_margin = 1.0;
  BdcHeadConfig head{BdcMetric::neg_sq_distance, 0.05, true};
  std::size_t val_episodes = 20;
  /// Mini-batch size of the fully-supervised arm.
  std::size_t batch_size = 32;
};

struct EvaluationSettings {
  std::size_t test_episodes = 100;
  std::size_t repeats = 3;
};

/// Synthetic stand-ins for the source, other-source, unlabeled and proxy sets,
/// or a directory written by `generate-data`.
struct DataSettings {
  std::string dir;  // empty = generate in memory
  /// 0 = derive from the run seed.
  std::uint64_t seed = 0;
  std::size_t train_per_class = 16;
  std::size_t eval_per_class = 40;
  std::size_t unlabeled_per_class = 64;
  std::size_t other_per_class = 30;
  std::size_t proxy_per_class = 30;
  std::size_t group_size = 4;
  double fov_mm = 100.0;
  std::size_t image_size = 32;
  std::string train_domain = "S";
  std::string eval_domain = "P";
  /// Annotation-marker rate of labeled train-domain source images.
  double marker_probability = 1.0;
  /// Multiplies the pixel noise of the source and unlabeled domains.
  double noise_scale = 3.0;
  /// Acquisition of the other labeled source.
  double other_gamma = 1.5;
  double other_noise_scale = 1.0;
};

struct ExperimentConfig {
  std::string run_id = "run";
  std::uint64_t seed = 1;
  EncoderConfig encoder;
  PretrainSettings pretrain;
  FinetuneSettings finetune;
  /// N, Q of meta-train and meta-test episodes; K comes from `shots`.
  std::size_t train_ways = 4;
  std::size_t eval_ways = 4;
  std::size_t queries = 10;
  std::vector<std::size_t> shots = {5};
  EvaluationSettings evaluation;
  DataSettings data;
  /// Cartesian grid; keys are dotted config paths, e.g. "finetune.lr".
  std::vector<std::pair<std::string, std::vector<double>>> grid;
  /// Rows and columns of the ablation table built by run_ablation.
  std::vector<PretrainKind> table_pretrain = {PretrainKind::supervised_proxy, PretrainKind::simclr,
                                              PretrainKind::ipirm};
  std::vector<FinetuneKind> table_finetune = {FinetuneKind::meta_fine_same, FinetuneKind::meta_fine_other,
                                              FinetuneKind::meta_coarse_other, FinetuneKind::supervised};

  void validate() const;
  /// Stable FNV-1a digest of the canonical JSON form.
  std::string digest() const;
};

/// Strict parsing: unknown keys are errors naming their path.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const ExperimentConfig& config);
/// Episode and repeat counts of a profile.
void apply_profile(ExperimentConfig& config, Profile profile);
/// Sets a numeric field by dotted path; used by grid search.
void set_config_value(ExperimentConfig& config, const std::string& path, double value);

/// Preprocessed datasets for one run.
struct ExperimentData {
  Dataset source;
  SplitIndices split;
  Dataset other;
  Dataset unlabeled;
  Dataset proxy;
};

/// Raw (unpreprocessed) synthetic sets, as written by `generate-data`.
struct RawData {
  Dataset source;
  Dataset other;
  Dataset unlabeled;
  Dataset proxy;
};
RawData generate_raw_data(const DataSettings& data, std::uint64_t seed);
void write_raw_data(const std::filesystem::path& dir, const RawData& raw);
ExperimentData prepare_data(const ExperimentConfig& config);

struct CellResult {
  PretrainKind pretrain = PretrainKind::none;
  FinetuneKind finetune = FinetuneKind::meta_fine_same;
  std::size_t shot = 0;
  bool ok = false;
  std::string reason;
  double val_auroc = 0.0;
  MetricSummary test;
  std::size_t episodes = 0;
  std::size_t repeats = 0;
};

struct ResultsTable {
  std::uint64_t seed = 0;
  std::string config_digest;
  std::vector<CellResult> cells;
};

struct RunArtifacts {
  std::vector<CellResult> cells;  // one per shot
  std::vector<MetricRow> metrics;
  std::vector<TraceRow> pretrain_trace;
  ParameterSetF encoder_params;
};

/// Pretrained encoder parameters (projection and classifier heads removed).
ParameterSetF run_pretrain(const ExperimentConfig& config, const ExperimentData& data,
                           std::vector<TraceRow>* trace = nullptr);

/// Fine-tunes from `pretrained` per shot setting, selects the best epoch by
/// validation AUROC, and evaluates on test when `evaluate_test`.
RunArtifacts run_finetune(const ExperimentConfig& config, const ExperimentData& data,
                          const ParameterSetF& pretrained, bool evaluate_test = true);

/// Pretrain + fine-tune + evaluate. Failures are recorded in the cells.
RunArtifacts run_experiment(const ExperimentConfig& config, const ExperimentData& data,
                            bool evaluate_test = true);

struct AblationResult {
  ResultsTable table;
  std::vector<MetricRow> metrics;
};

/// Every (table_pretrain x table_finetune x shots) cell. Each pretrain kind
/// is trained once and shared by its row.
AblationResult run_ablation(const ExperimentConfig& config, const ExperimentData& data);

struct GridCell {
  std::map<std::string, double> values;
  bool ok = false;
  std::string reason;
  double val_auroc = 0.0;
};

struct GridResult {
  ExperimentConfig best;
  std::size_t best_index = 0;
  std::vector<GridCell> cells;
};

/// Exhaustive search by mean validation AUROC; ties keep the earlier cell.
/// Throws when every cell fails.
GridResult grid_search(const ExperimentConfig& base, const ExperimentData& data);

/// Writes `results.csv` and `results.txt`; identical tables give identical
/// bytes.
void emit_report(const ResultsTable& table, const std::filesystem::path& dir);

}  // namespace metabdc
