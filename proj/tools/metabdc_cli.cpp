#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "metabdc/runner.hpp"

namespace fs = std::filesystem;
using namespace metabdc;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string profile;
  std::string out = "out";
  std::string checkpoint;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_checkpoint) {
  cmd->add_option("--config", o.config, "Experiment config (JSON)");
  cmd->add_option("--seed", o.seed, "Run seed; overrides the config");
  cmd->add_option("--profile", o.profile, "Episode and repeat counts")->check(CLI::IsMember({"ci", "paper"}));
  cmd->add_option("--out", o.out, "Output directory");
  if (with_checkpoint) {
    cmd->add_option("--checkpoint", o.checkpoint, "Pretrained encoder; pretraining is run when omitted");
  }
}

ExperimentConfig resolve_config(const CommonOptions& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.profile.empty()) apply_profile(c, o.profile == "paper" ? Profile::paper : Profile::ci);
  c.validate();
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write '" + path.string() + "'");
}

void prepare_out(const CommonOptions& o, const ExperimentConfig& c) {
  fs::create_directories(o.out);
  write_text(fs::path(o.out) / "config.json", config_to_json(c) + "\n");
}

ParameterSetF encoder_for(const CommonOptions& o, const ExperimentConfig& c, const ExperimentData& data,
                          std::vector<TraceRow>* trace) {
  if (!o.checkpoint.empty()) return load_checkpoint<float>(o.checkpoint, c.encoder.digest());
  return run_pretrain(c, data, trace);
}

void print_cells(const std::vector<CellResult>& cells, bool with_test) {
  for (const auto& c : cells) {
    std::cout << to_string(c.pretrain) << " / " << to_string(c.finetune) << " / " << c.shot << "-shot: ";
    if (!c.ok) {
      std::cout << "FAILED(" << c.reason << ")\n";
      continue;
    }
    std::cout << "val " << format_double(c.val_auroc);
    if (with_test) std::cout << ", test " << format_double(c.test.mean) << " +/- " << format_double(c.test.std);
    std::cout << '\n';
  }
}

int cmd_generate(const CommonOptions& o) {
  const ExperimentConfig c = resolve_config(o);
  const RawData raw = generate_raw_data(c.data, c.data.seed != 0 ? c.data.seed : c.seed);
  write_raw_data(o.out, raw);
  std::cout << "wrote " << raw.source.images.size() << " source, " << raw.other.images.size() << " other, "
            << raw.unlabeled.images.size() << " unlabeled and " << raw.proxy.images.size()
            << " proxy images to " << o.out << '\n';
  return 0;
}

int cmd_pretrain(const CommonOptions& o) {
  const ExperimentConfig c = resolve_config(o);
  prepare_out(o, c);
  const ExperimentData data = prepare_data(c);
  std::vector<TraceRow> trace;
  const ParameterSetF params = run_pretrain(c, data, &trace);
  save_checkpoint(fs::path(o.out) / "encoder.ckpt", params, c.encoder.digest());
  write_trace_csv(fs::path(o.out) / "pretrain_trace.csv", trace);
  std::cout << "pretrained " << to_string(c.pretrain.kind) << " encoder (" << trace.size() << " steps) -> "
            << (fs::path(o.out) / "encoder.ckpt").string() << '\n';
  return 0;
}

int cmd_finetune(const CommonOptions& o, bool evaluate) {
  const ExperimentConfig c = resolve_config(o);
  prepare_out(o, c);
  const ExperimentData data = prepare_data(c);
  std::vector<TraceRow> trace;
  const ParameterSetF encoder = encoder_for(o, c, data, &trace);
  const RunArtifacts art = run_finetune(c, data, encoder, evaluate);
  const fs::path out(o.out);
  write_metrics_csv(out / "metrics.csv", art.metrics);
  if (!trace.empty()) write_trace_csv(out / "pretrain_trace.csv", trace);
  if (evaluate) emit_report(ResultsTable{c.seed, c.digest(), art.cells}, out);
  print_cells(art.cells, evaluate);
  for (const auto& cell : art.cells) {
    if (!cell.ok) return 1;
  }
  return 0;
}

int cmd_grid(const CommonOptions& o) {
  const ExperimentConfig c = resolve_config(o);
  prepare_out(o, c);
  const ExperimentData data = prepare_data(c);
  const GridResult g = grid_search(c, data);
  std::ofstream csv(fs::path(o.out) / "grid.csv", std::ios::binary);
  csv << "cell";
  for (const auto& [key, values] : c.grid) csv << ',' << key;
  csv << ",status,val_auroc,reason\n";
  for (std::size_t i = 0; i < g.cells.size(); ++i) {
    const GridCell& cell = g.cells[i];
    csv << i;
    for (const auto& [key, values] : c.grid) {
      auto it = cell.values.find(key);
      csv << ',' << (it == cell.values.end() ? "" : format_double(it->second));
    }
    csv << ',' << (cell.ok ? "ok" : "failed") << ',' << (cell.ok ? format_double(cell.val_auroc) : "") << ",\""
        << cell.reason << "\"\n";
  }
  if (!csv) throw Error("cannot write grid.csv");
  write_text(fs::path(o.out) / "best_config.json", config_to_json(g.best) + "\n");
  std::cout << "best cell " << g.best_index << " (val AUROC " << format_double(g.cells[g.best_index].val_auroc)
            << ")\n";
  return 0;
}

int cmd_report(const CommonOptions& o) {
  const ExperimentConfig c = resolve_config(o);
  prepare_out(o, c);
  const ExperimentData data = prepare_data(c);
  const AblationResult r = run_ablation(c, data);
  write_metrics_csv(fs::path(o.out) / "metrics.csv", r.metrics);
  emit_report(r.table, o.out);
  std::ifstream txt(fs::path(o.out) / "results.txt");
  std::cout << txt.rdbuf();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot meta-learning with disentangled pretraining and a BDC metric head"};
  app.require_subcommand(1);
  CommonOptions o;

  auto* gen = app.add_subcommand("generate-data", "Write the synthetic raw datasets to --out");
  auto* pre = app.add_subcommand("pretrain", "Pretrain an encoder and save a checkpoint");
  auto* fin = app.add_subcommand("finetune", "Meta-fine-tune and select by validation AUROC");
  auto* eva = app.add_subcommand("evaluate", "Fine-tune, then meta-test the selected model");
  auto* grid = app.add_subcommand("grid", "Grid search over the config's grid axes");
  auto* rep = app.add_subcommand("report", "Run the ablation table and emit the report");
  add_common(gen, o, false);
  add_common(pre, o, false);
  add_common(fin, o, true);
  add_common(eva, o, true);
  add_common(grid, o, false);
  add_common(rep, o, false);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_generate(o);
    if (*pre) return cmd_pretrain(o);
    if (*fin) return cmd_finetune(o, false);
    if (*eva) return cmd_finetune(o, true);
    if (*grid) return cmd_grid(o);
    if (*rep) return cmd_report(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
