// Command-line front end: train, evaluate, gradcheck, audit, synth-data.
// Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "muslcat/data.hpp"
#include "muslcat/errors.hpp"
#include "muslcat/gradsuite.hpp"
#include "muslcat/metrics.hpp"
#include "muslcat/model.hpp"
#include "muslcat/train.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using namespace muslcat;

namespace {

void set_threads(std::optional<int> flag) {
  int n = 0;
  if (flag) {
    n = *flag;
  } else if (const char* env = std::getenv("MUSLCAT_THREADS")) {
    try {
      n = std::stoi(env);
    } catch (const std::exception&) {
      throw ValidationError(std::string("MUSLCAT_THREADS='") + env + "' is not an integer");
    }
  }
  if (n < 0) throw ValidationError("thread count must be positive");
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#endif
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out << text;
}

int run_train(const std::string& config, std::optional<std::uint64_t> seed, const std::string& out,
              std::optional<std::size_t> epochs, std::optional<double> max_seconds) {
  TrainConfig cfg = load_train_config(config);
  if (seed) {
    cfg.seed = *seed;
    cfg.model.seed = *seed;
  }
  if (!out.empty()) cfg.out_dir = out;
  if (epochs) cfg.max_epochs = *epochs;
  if (max_seconds) cfg.max_seconds = *max_seconds;
  const TrainReport r = train(cfg, &std::cout);
  nlohmann::json summary = {{"config", to_json(cfg)},
                            {"best_epoch", r.best_epoch},
                            {"best_val_loss", r.best_val_loss},
                            {"checkpoint", r.checkpoint},
                            {"trace", r.trace_csv},
                            {"stop_reason", r.stop_reason},
                            {"seconds", r.seconds}};
  write_text((fs::path(cfg.out_dir) / "run.json").string(), summary.dump(2) + "\n");
  std::cout << "stopped (" << r.stop_reason << ") after " << r.epochs.size() << " epochs; best epoch "
            << r.best_epoch << " valid loss " << r.best_val_loss << "\ncheckpoint " << r.checkpoint << "\ntrace "
            << r.trace_csv << "\n";
  return 0;
}

int run_evaluate(const std::string& checkpoint, const std::string& manifest, const std::string& split,
                 std::size_t batch, const std::string& json_out, const std::string& csv_out) {
  auto model = load_checkpoint(checkpoint);
  const Manifest m = load_manifest(manifest);
  const MetricsReport r = evaluate(*model, m, split, batch);
  std::cout << std::left << std::setw(24) << "tag" << std::right << std::setw(6) << "pos" << std::setw(6) << "neg"
            << std::setw(10) << "ROC-AUC" << std::setw(10) << "PR-AUC" << "\n"
            << std::fixed << std::setprecision(4);
  for (const auto& t : r.tags) {
    std::cout << std::left << std::setw(24) << t.tag << std::right << std::setw(6) << t.positives << std::setw(6)
              << t.negatives;
    if (t.roc_auc)
      std::cout << std::setw(10) << *t.roc_auc << std::setw(10) << *t.pr_auc << "\n";
    else
      std::cout << std::setw(20) << "skipped" << "\n";
  }
  std::cout << "macro ROC-AUC " << r.macro_roc_auc << "  macro PR-AUC " << r.macro_pr_auc << "  (" << r.songs
            << " songs, " << r.chunks << " chunks, " << r.included() << " tags";
  if (!r.skipped_tags.empty()) std::cout << ", " << r.skipped_tags.size() << " skipped";
  std::cout << ")\n";
  if (!r.unreadable.empty()) std::cout << r.unreadable.size() << " unreadable clips skipped\n";
  if (!json_out.empty()) write_text(json_out, report_to_json(r).dump(2) + "\n");
  if (!csv_out.empty()) write_text(csv_out, report_to_csv(r));
  return 0;
}

int run_gradcheck(const std::string& module, std::optional<std::uint64_t> seed, bool list) {
  if (list) {
    for (const auto& n : gradcheck_module_names()) std::cout << n << "\n";
    return 0;
  }
  const auto entries = run_gradcheck_suite(module, seed.value_or(7));
  std::size_t failed = 0;
  for (const auto& e : entries) {
    std::cout << (e.report.pass ? "PASS " : "FAIL ") << std::left << std::setw(20) << e.module << std::setw(14)
              << e.shape << " max rel err " << std::scientific << std::setprecision(2) << e.report.max_rel_error
              << std::defaultfloat << " (" << e.report.checked << " derivatives)";
    if (!e.report.pass) std::cout << "  " << e.report.detail;
    std::cout << "\n";
    failed += !e.report.pass;
  }
  std::cout << entries.size() - failed << "/" << entries.size() << " checks passed at tolerance 1e-4\n";
  return failed ? 2 : 0;
}

int run_audit(const std::string& config, bool as_json) {
  const ModelConfig cfg = load_model_config(config);
  Model model(cfg);
  const ParamAudit a = audit_params(model);
  if (as_json)
    std::cout << audit_to_json(a).dump(2) << "\n";
  else
    std::cout << format_audit(a);
  return 0;
}

int run_synth(SynthConfig cfg, std::optional<std::uint64_t> seed) {
  if (seed) cfg.seed = *seed;
  const std::string manifest = synth_dataset(cfg);
  std::cout << "wrote " << cfg.songs << " clips (" << cfg.tags << " tags) and " << manifest << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MuSLCAT / MuSLCAN raw-waveform music tagging"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  app.add_option("--seed", seed, "Seed for sampling, initialization and synthesis");
  app.add_option("--threads", threads, "Worker threads (default: MUSLCAT_THREADS, else the runtime's choice)");

  auto* train_cmd = app.add_subcommand("train", "Train from a JSON training config");
  std::string train_config, train_out;
  std::optional<std::size_t> epochs;
  std::optional<double> max_seconds;
  train_cmd->add_option("config", train_config, "Training config")->required();
  train_cmd->add_option("--out", train_out, "Override the output directory");
  train_cmd->add_option("--epochs", epochs, "Cap on epochs");
  train_cmd->add_option("--max-seconds", max_seconds, "Wall-clock budget");

  auto* eval_cmd = app.add_subcommand("evaluate", "Song-level ROC-AUC / PR-AUC of a checkpoint");
  std::string checkpoint, manifest, split = "test", json_out, csv_out;
  std::size_t batch = 16;
  eval_cmd->add_option("checkpoint", checkpoint)->required();
  eval_cmd->add_option("manifest", manifest)->required();
  eval_cmd->add_option("--split", split, "train, valid, test or all")->capture_default_str();
  eval_cmd->add_option("--batch", batch, "Chunks per forward pass")->capture_default_str();
  eval_cmd->add_option("--json", json_out, "Write the report as JSON");
  eval_cmd->add_option("--csv", csv_out, "Write the per-tag table as CSV");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every layer");
  std::string module;
  bool list = false;
  grad_cmd->add_option("--module", module, "Only this layer");
  grad_cmd->add_flag("--list", list, "List layer names");

  auto* audit_cmd = app.add_subcommand("audit", "Parameter counts per component");
  std::string audit_config;
  bool audit_json = false;
  audit_cmd->add_option("config", audit_config, "Model config")->required();
  audit_cmd->add_flag("--json", audit_json);

  auto* synth_cmd = app.add_subcommand("synth-data", "Generate the sine-band synthetic dataset");
  SynthConfig synth;
  synth_cmd->add_option("--out", synth.out_dir, "Output directory")->required();
  synth_cmd->add_option("--songs", synth.songs)->capture_default_str();
  synth_cmd->add_option("--tags", synth.tags, "At most 6")->capture_default_str();
  synth_cmd->add_option("--seconds", synth.seconds)->capture_default_str();
  synth_cmd->add_option("--snr-db", synth.snr_db)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    set_threads(threads);
    if (*train_cmd) return run_train(train_config, seed, train_out, epochs, max_seconds);
    if (*eval_cmd) return run_evaluate(checkpoint, manifest, split, batch, json_out, csv_out);
    if (*grad_cmd) return run_gradcheck(module, seed, list);
    if (*audit_cmd) return run_audit(audit_config, audit_json);
    if (*synth_cmd) return run_synth(synth, seed);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
