#include "contextflow/cli/run.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "contextflow/cli/run_config.hpp"
#include "contextflow/core/error.hpp"
#include "contextflow/core/log.hpp"
#include "contextflow/train/checkpoint.hpp"
#include "contextflow/train/trainer.hpp"

namespace contextflow {

namespace {

namespace fs = std::filesystem;

struct CliArgs {
  std::string command;
  std::string config;
  std::string out;         // --out: overrides the config's output dir
  std::string generalist;  // train-specialist: source checkpoint
  std::string checkpoint;  // eval / sample / inspect target
  std::int64_t seed = -1;  // --seed: overrides train.seed and data.seed
  std::vector<std::string> overrides;
};

// Flags become plain overrides so the effective-config dump reflects them.
RunConfig load_config(const CliArgs& args, std::string* effective) {
  std::vector<std::string> overrides = args.overrides;
  if (args.seed >= 0) {
    overrides.push_back("train.seed=" + std::to_string(args.seed));
    overrides.push_back("data.seed=" + std::to_string(args.seed));
  }
  if (!args.out.empty()) overrides.push_back("out=" + args.out);
  return load_run_config(args.config, overrides, effective);
}

void prepare_out(const RunConfig& cfg, const std::string& effective) {
  fs::create_directories(cfg.out);
  std::ofstream f(fs::path(cfg.out) / "effective_config.json");
  if (!f) throw ConfigError("cannot write effective config under '" + cfg.out + "'");
  f << effective;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setfill('0') << std::setw(16) << v;
  return os.str();
}

using MetricRows = std::vector<std::pair<std::string, std::optional<double>>>;

MetricRows metric_rows(const MetricsReport& r) {
  return {{"accuracy", r.accuracy},
          {"balanced_accuracy", r.balanced_accuracy},
          {"ms", r.ms},
          {"auroc", r.auroc},
          {"ap", r.ap},
          {"precision", r.precision},
          {"recall", r.recall},
          {"f1", r.f1},
          {"threshold", r.threshold},
          {"nll", r.nll}};
}

void print_aligned(const std::vector<std::pair<std::string, std::string>>& rows) {
  std::size_t w = 0;
  for (const auto& [k, v] : rows) {
    (void)v;
    w = std::max(w, k.size());
  }
  for (const auto& [k, v] : rows) {
    std::cout << k << std::string(w - k.size() + 2, ' ') << v << "\n";
  }
}

int cmd_train_generalist(const CliArgs& args) {
  std::string effective;
  RunConfig cfg = load_config(args, &effective);
  prepare_out(cfg, effective);
  DatasetSplits splits = build_dataset(cfg.data);
  FlowModel model(cfg.model, cfg.train.seed);

  TrainConfig tcfg = cfg.train;
  tcfg.phase = Phase::kGeneralist;
  tcfg.log_csv = (fs::path(cfg.out) / "train_log.csv").string();
  tcfg.checkpoint_path = (fs::path(cfg.out) / "generalist.ckpt").string();
  TrainLog log = fit(model, splits.train, &splits.val, tcfg);
  if (log.aborted_nan) return 4;
  std::cout << "generalist trained: epochs=" << log.epochs.size()
            << " final_loss=" << fmt(log.final_loss()) << " rejected=" << log.rejected_steps
            << " checkpoint=" << tcfg.checkpoint_path << "\n";
  return 0;
}

int cmd_train_specialist(const CliArgs& args) {
  std::string effective;
  RunConfig cfg = load_config(args, &effective);
  if (args.generalist.empty()) {
    throw ConfigError("train-specialist needs --generalist <checkpoint>");
  }
  if (cfg.model.mode != CondMode::kAdditive) {
    throw ConfigError("train-specialist applies to additive mode only; concat models train "
                      "everything in one phase (use train-generalist)");
  }
  prepare_out(cfg, effective);
  DatasetSplits splits = build_dataset(cfg.data);
  std::unique_ptr<FlowModel> model = load_checkpoint(cfg.model, args.generalist, cfg.train.seed);
  if (model->phase() != Phase::kGeneralist) {
    throw CheckpointError("'" + args.generalist + "' is already a specialist checkpoint; "
                          "train-specialist starts from a generalist one");
  }
  Rng attach_rng = Rng(cfg.train.seed).split("attach");
  model->attach_specialist(attach_rng);

  TrainConfig tcfg = cfg.train;
  tcfg.phase = Phase::kSpecialist;
  tcfg.log_csv = (fs::path(cfg.out) / "train_log.csv").string();
  tcfg.checkpoint_path = (fs::path(cfg.out) / "specialist.ckpt").string();
  TrainLog log = fit(*model, splits.train, &splits.val, tcfg);
  if (log.aborted_nan) return 4;
  std::cout << "specialist trained: epochs=" << log.epochs.size()
            << " final_loss=" << fmt(log.final_loss()) << " rejected=" << log.rejected_steps
            << " checkpoint=" << tcfg.checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const CliArgs& args) {
  std::string effective;
  RunConfig cfg = load_config(args, &effective);
  if (args.checkpoint.empty()) throw ConfigError("eval needs --checkpoint <path>");
  prepare_out(cfg, effective);
  DatasetSplits splits = build_dataset(cfg.data);
  std::unique_ptr<FlowModel> model = load_checkpoint(cfg.model, args.checkpoint, cfg.train.seed);

  MetricsReport report;
  if (cfg.data.task == "classify") {
    report = evaluate_classify(*model, splits.test, cfg.train.seed);
  } else if (cfg.data.task == "detect") {
    report = evaluate_detect(*model, splits.val, splits.test, cfg.train.seed);
  } else {
    std::vector<double> totals = score_total(*model, splits.test, cfg.train.seed);
    double sum = 0.0;
    for (double t : totals) sum -= t;
    report.nll = sum / double(totals.size());
  }

  std::vector<std::pair<std::string, std::string>> table;
  for (const auto& [name, value] : metric_rows(report)) {
    table.emplace_back(name, value ? fmt(*value) : "NA");
  }
  print_aligned(table);

  const fs::path csv_path = fs::path(cfg.out) / "eval.csv";
  std::ofstream f(csv_path);
  if (!f) throw ConfigError("cannot write '" + csv_path.string() + "'");
  f << "metric,value\n";
  for (const auto& [name, value] : metric_rows(report)) f << name << "," << metric_csv(value) << "\n";
  log_info("eval metrics written to " + csv_path.string());
  return 0;
}

// Raw context records drawn per the model's spec: discrete vars uniform over
// their categories, continuous vars at 0 (the standardized mean).
NdArray draw_contexts(const ContextSpec& spec, std::size_t n, Rng& rng) {
  NdArray ctx({n, spec.vars.size()});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < spec.vars.size(); ++j) {
      const ContextVar& var = spec.vars[j];
      ctx.data()[i * spec.vars.size() + j] =
          var.discrete ? double(rng.uniform_int(var.cardinality)) : 0.0;
    }
  }
  return ctx;
}

int cmd_sample(const CliArgs& args) {
  std::string effective;
  RunConfig cfg = load_config(args, &effective);
  if (args.checkpoint.empty()) throw ConfigError("sample needs --checkpoint <path>");
  prepare_out(cfg, effective);
  std::unique_ptr<FlowModel> model = load_checkpoint(cfg.model, args.checkpoint, cfg.train.seed);

  const std::size_t n = cfg.sample.n;
  Rng rng = Rng(cfg.train.seed).split("sample");
  NdArray ctx;
  const bool with_ctx = model->needs_context();
  if (with_ctx) ctx = draw_contexts(cfg.model.context, n, rng);
  std::vector<std::size_t> classes;
  NdArray out = model->sample(n, cfg.sample.class_idx, with_ctx ? &ctx : nullptr, rng, &classes);

  const bool image_like = cfg.model.input_shape.size() >= 2 &&
                          cfg.model.data_dequant != DataDequant::kNone;
  fs::path sample_path;
  if (image_like) {
    sample_path = fs::path(cfg.out) / "samples.idx";
    save_idx(sample_path.string(), out);
  } else {
    sample_path = fs::path(cfg.out) / "samples.csv";
    Csv csv;
    const std::size_t d = out.numel() / n;
    for (std::size_t j = 0; j < d; ++j) csv.header.push_back("v" + std::to_string(j));
    csv.header.push_back("class");
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::string> row;
      for (std::size_t j = 0; j < d; ++j) row.push_back(fmt(out.data()[i * d + j]));
      row.push_back(std::to_string(classes[i]));
      csv.rows.push_back(std::move(row));
    }
    save_csv(sample_path.string(), csv);
  }

  // class + raw context per sample, so image samples stay interpretable
  Csv meta;
  meta.header.push_back("class");
  for (const ContextVar& var : cfg.model.context.vars) meta.header.push_back(var.name);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> row{std::to_string(classes[i])};
    for (std::size_t j = 0; j < cfg.model.context.vars.size(); ++j) {
      row.push_back(with_ctx ? fmt(ctx.data()[i * cfg.model.context.vars.size() + j]) : "NA");
    }
    meta.rows.push_back(std::move(row));
  }
  const fs::path meta_path = fs::path(cfg.out) / "sample_meta.csv";
  save_csv(meta_path.string(), meta);
  std::cout << "wrote " << n << " samples to " << sample_path.string() << " (meta: "
            << meta_path.string() << ")\n";
  return 0;
}

int cmd_inspect(const CliArgs& args) {
  std::string effective;
  RunConfig cfg = load_config(args, &effective);
  if (args.checkpoint.empty()) throw ConfigError("inspect needs --checkpoint <path>");
  std::unique_ptr<FlowModel> model = load_checkpoint(cfg.model, args.checkpoint, cfg.train.seed);

  std::vector<std::pair<std::string, std::string>> table{
      {"phase", phase_name(model->phase())},
      {"mode", cond_mode_name(cfg.model.mode)},
      {"config_digest", hex64(cfg.model.digest())},
      {"generalist_fingerprint", hex64(model->generalist_fingerprint())},
      {"layers", std::to_string(model->layer_count())},
      {"latent_dim", std::to_string(model->latent_dim())},
  };
  print_aligned(table);

  const std::string active = model->trainable_prefix();
  std::cout << "\nnamespace    parameters  trainable\n";
  for (const std::string& ns : {std::string("generalist"), std::string("specialist")}) {
    const std::size_t count = model->store().param_count(ns);
    if (ns == "specialist" && model->phase() == Phase::kGeneralist) continue;
    std::ostringstream row;
    row << ns << std::string(13 - ns.size(), ' ') << count
        << std::string(count ? std::max<std::size_t>(12 - std::to_string(count).size(), 1) : 11,
                       ' ')
        << (ns == active ? "yes" : "no");
    std::cout << row.str() << "\n";
  }
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"context-conditional normalizing flows"};
  app.require_subcommand(1);

  CliArgs args;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", args.config, "run config (JSON)")->required();
    cmd->add_option("--out", args.out, "output directory (overrides the config)");
    cmd->add_option("--seed", args.seed, "overrides train.seed and data.seed");
    cmd->add_option("overrides", args.overrides, "dotted config overrides (key.path=value)");
    cmd->callback([&args, cmd] { args.command = cmd->get_name(); });
  };

  add_common(app.add_subcommand("train-generalist", "phase 1: fit the generalist"));
  CLI::App* spec_cmd = app.add_subcommand("train-specialist", "phase 2: fit the specialist");
  add_common(spec_cmd);
  spec_cmd->add_option("--generalist", args.generalist, "generalist checkpoint to build on");
  for (const char* name : {"eval", "sample", "inspect"}) {
    CLI::App* cmd = app.add_subcommand(
        name, name == std::string("eval")     ? "evaluate a checkpoint on the configured data"
              : name == std::string("sample") ? "draw samples from a checkpoint"
                                              : "report a checkpoint's layout and census");
    add_common(cmd);
    cmd->add_option("--checkpoint", args.checkpoint, "checkpoint to load")->required();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (args.command == "train-generalist") return cmd_train_generalist(args);
    if (args.command == "train-specialist") return cmd_train_specialist(args);
    if (args.command == "eval") return cmd_eval(args);
    if (args.command == "sample") return cmd_sample(args);
    if (args.command == "inspect") return cmd_inspect(args);
    throw ConfigError("unknown command '" + args.command + "'");
  } catch (const CheckpointError& e) {
    log_error(e.what());
    return 3;
  } catch (const SingularMatrixError& e) {
    log_error(e.what());
    return 4;
  } catch (const NumericalError& e) {
    log_error(e.what());
    return 4;
  } catch (const DecodeError& e) {
    log_error(e.what());
    return 4;
  } catch (const ConfigError& e) {
    log_error(e.what());
    return 2;
  } catch (const DataError& e) {
    log_error(e.what());
    return 2;
  } catch (const Error& e) {
    log_error(e.what());
    return 2;
  }
}

}  // namespace contextflow
