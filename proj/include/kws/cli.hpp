#pragma once

// `kws` command-line front end. Lives in a header so the test suites can
// drive it in-process.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O error.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kws/audio_io.hpp"
#include "kws/checkpoint.hpp"
#include "kws/config.hpp"
#include "kws/dsp.hpp"
#include "kws/error.hpp"
#include "kws/eval.hpp"
#include "kws/models.hpp"
#include "kws/training.hpp"

namespace kws::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

inline std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return f;
}

inline void print_run_header(std::ostream& os, const std::string& command, const config::Settings& s) {
  os << "# kws " << command << '\n';
  for (const auto& k : config::registry()) os << "#   " << k.name << " = " << s.get(k.name) << '\n';
}

inline training::LabeledFeatures featurize_split(const DatasetIndex& index, const dsp::DspConfig& dsp_config,
                                                 const dsp::MelFilterBank& bank) {
  training::LabeledFeatures out;
  for (const auto& entry : index.entries) {
    out.features.push_back(dsp::mfcc_pipeline(load_clip(entry), dsp_config, bank).values);
    out.labels.push_back(index.label_index(entry.label));
  }
  return out;
}

namespace detail {

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::optional<std::string> config_path;
  std::map<std::string, std::string> flag_values;  // registry key -> flag text
  std::vector<std::pair<std::string, std::string>> overrides() const {
    std::vector<std::pair<std::string, std::string>> v;
    for (const auto& [k, val] : flag_values) v.emplace_back(k, val);
    return v;
  }
};

inline int cmd_featurize(Context& ctx, const std::string& wav, const std::optional<std::string>& out_path) {
  const auto settings = config::parse_config(ctx.config_path, ctx.overrides());
  print_run_header(ctx.err, "featurize", settings);
  const auto dsp_config = config::dsp_config(settings);
  const auto features = dsp::mfcc_pipeline(read_wav(wav), dsp_config);

  std::string csv;
  for (std::size_t c = 0; c < features.dim(); ++c) csv += (c ? ",c" : "c") + std::to_string(c);
  csv += '\n';
  char buf[64];
  for (std::size_t t = 0; t < features.frames(); ++t) {
    for (std::size_t c = 0; c < features.dim(); ++c) {
      std::snprintf(buf, sizeof buf, "%s%.9g", c ? "," : "", features.values(t, c));
      csv += buf;
    }
    csv += '\n';
  }
  if (out_path) {
    std::ofstream f(*out_path);
    if (!f) throw IoError("cannot write " + *out_path);
    f << csv;
    ctx.err << "wrote " << features.frames() << " x " << features.dim() << " features to " << *out_path << '\n';
  } else {
    ctx.out << csv;
  }
  return kExitOk;
}

inline int cmd_synth(Context& ctx, const std::optional<std::string>& spec_path, const std::string& out_dir) {
  const auto settings = config::parse_config(spec_path ? spec_path : ctx.config_path, ctx.overrides());
  print_run_header(ctx.out, "synth", settings);
  const auto spec = config::synth_spec(settings);
  const auto index = synth_dataset(spec, static_cast<std::uint64_t>(settings.get_int("seed")));
  namespace fs = std::filesystem;
  for (const auto& label : index.label_set) fs::create_directories(fs::path(out_dir) / label);
  std::map<std::string, int> counters;
  for (const auto& entry : index.entries) {
    char name[128];
    std::snprintf(name, sizeof name, "%s_%04d.wav", entry.label.c_str(), counters[entry.label]++);
    write_wav(fs::path(out_dir) / entry.label / name, *entry.clip);
  }
  ctx.out << "wrote " << index.entries.size() << " clips in " << index.label_set.size() << " classes to " << out_dir
          << '\n';
  return kExitOk;
}

inline int cmd_train(Context& ctx, const std::string& data_dir, const std::string& ckpt_path,
                     const std::optional<std::string>& metrics_path) {
  auto settings = config::parse_config(ctx.config_path, ctx.overrides());
  auto labels = settings.get_list("labels");
  if (labels.empty()) {
    labels = discover_labels(data_dir);
    std::string joined;
    for (std::size_t i = 0; i < labels.size(); ++i) joined += (i ? "," : "") + labels[i];
    settings.set("labels", joined);
  }
  print_run_header(ctx.out, "train", settings);

  const auto dsp_config = config::dsp_config(settings);
  const auto train_config = config::train_config(settings);
  const auto index = scan_dataset(data_dir, labels);
  const auto splits = split_dataset(index, config::split_ratios(settings), train_config.seed);
  const auto bank = dsp::build_mel_filterbank(dsp_config);
  const auto train = featurize_split(splits.train, dsp_config, bank);
  const auto val = featurize_split(splits.val, dsp_config, bank);
  if (train.size() == 0 || val.size() == 0) throw DataError("training and validation splits must be non-empty");

  const auto frames = dsp::frame_count(static_cast<std::size_t>(dsp_config.sample_rate), dsp_config.frame_len,
                                       dsp_config.hop_len);
  const auto model_config = config::model_config(settings, labels.size(), frames,
                                                 static_cast<std::size_t>(dsp::feature_dim(dsp_config)));
  auto model = models::build_model(model_config);
  ctx.out << "# " << models::to_string(model_config.arch) << ": " << model.parameter_count() << " parameters, "
          << train.size() << " train / " << val.size() << " val / " << splits.test.entries.size() << " test clips\n";

  training::AdamState opt;
  training::FitHooks hooks;
  hooks.optimizer = &opt;
  hooks.on_epoch = [&](const training::EpochRecord& r) { ctx.out << training::format_metrics_row(r) << '\n'; };
  const auto history = training::fit(model, train, val, train_config, hooks);

  training::save_checkpoint(ckpt_path, model, &opt, &history, settings);
  const std::string metrics = metrics_path ? *metrics_path : ckpt_path + ".metrics.csv";
  training::write_metrics_csv(metrics, history);
  ctx.out << "best epoch " << history.best_epoch << "; checkpoint " << ckpt_path << "; metrics " << metrics << '\n';
  return kExitOk;
}

inline int cmd_eval(Context& ctx, const std::string& ckpt_path, const std::string& data_dir,
                    const std::string& report_path, const std::string& format, const std::string& split) {
  auto ck = training::load_checkpoint(ckpt_path);
  print_run_header(ctx.out, "eval", ck.settings);
  const auto labels = ck.settings.get_list("labels");
  const auto dsp_config = config::dsp_config(ck.settings);
  auto index = scan_dataset(data_dir, labels);
  if (split != "all") {
    auto parts = split_dataset(index, config::split_ratios(ck.settings),
                               static_cast<std::uint64_t>(ck.settings.get_int("seed")));
    index = split == "train" ? parts.train : split == "val" ? parts.val : parts.test;
  }
  const auto report = eval::evaluate(ck.model, index, dsp_config, labels);
  eval::ReportFormat fmt = eval::ReportFormat::csv;
  if (format == "text" || (format.empty() && std::filesystem::path(report_path).extension() != ".csv")) {
    fmt = eval::ReportFormat::text;
  }
  eval::emit_report(report, report_path, fmt);
  ctx.out << eval::report_text(report);
  return kExitOk;
}

inline int cmd_report(Context& ctx, const std::string& metrics_path) {
  const auto h = training::read_metrics_csv(metrics_path);
  char buf[160];
  std::snprintf(buf, sizeof buf, "%5s  %10s  %9s  %10s  %9s  %10s  %8s\n", "epoch", "train_loss", "train_acc",
                "val_loss", "val_acc", "lr", "seconds");
  ctx.out << buf;
  for (const auto& r : h.records) {
    std::snprintf(buf, sizeof buf, "%5zu  %10.4f  %9.4f  %10.4f  %9.4f  %10.3g  %8.2f%s\n", r.epoch, r.train_loss,
                  r.train_acc, r.val_loss, r.val_acc, r.lr, r.seconds, r.epoch == h.best_epoch ? "  *" : "");
    ctx.out << buf;
  }
  if (h.records.empty()) {
    ctx.out << "no epochs recorded\n";
  } else {
    const auto& best = h.records[h.best_epoch - h.records.front().epoch];
    ctx.out << "best: epoch " << best.epoch << " val_acc " << eval::format_accuracy(best.val_acc) << " of "
            << h.records.size() << " epochs\n";
  }
  return kExitOk;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  detail::Context ctx{out, err, std::nullopt, {}};
  CLI::App app{"Keyword spotting toolkit: features, training and evaluation", "kws"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "key = value settings file");
  std::map<std::string, std::string> flag_storage;
  std::map<std::string, CLI::Option*> flag_options;
  for (const auto& k : config::registry()) {
    auto& slot = flag_storage[k.name];
    std::string help = std::string(k.help) + " (default: " + (*k.default_value ? k.default_value : "empty") + ")";
    flag_options[k.name] = app.add_option("--" + flag_name(k.name), slot, help);
  }

  std::string wav, featurize_out;
  auto* featurize = app.add_subcommand("featurize", "dump the feature matrix of one WAV file as CSV");
  featurize->add_option("wav", wav, "input WAV (PCM16 mono)")->required();
  auto* featurize_out_opt = featurize->add_option("--out", featurize_out, "CSV path (default: stdout)");

  std::string spec_path, synth_out;
  auto* synth = app.add_subcommand("synth", "write a synthetic tone dataset as WAV files");
  auto* spec_opt = synth->add_option("--spec", spec_path, "settings file with the synthetic dataset keys");
  synth->add_option("--out", synth_out, "output directory")->required();

  std::string train_data, train_out, train_metrics;
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint plus metrics CSV");
  train->add_option("--data", train_data, "dataset root: <root>/<label>/*.wav")->required();
  train->add_option("--out", train_out, "checkpoint path")->required();
  auto* metrics_opt = train->add_option("--metrics", train_metrics, "metrics CSV (default: <out>.metrics.csv)");

  std::string eval_ckpt, eval_data, eval_out, eval_format, eval_split = "test";
  auto* evaluate = app.add_subcommand("eval", "evaluate a checkpoint and write a per-keyword report");
  evaluate->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  evaluate->add_option("--data", eval_data, "dataset root")->required();
  evaluate->add_option("--out", eval_out, "report path (.csv for CSV, text otherwise)")->required();
  evaluate->add_option("--format", eval_format, "csv or text (default: from the extension)")
      ->check(CLI::IsMember({"csv", "text"}));
  evaluate->add_option("--split", eval_split, "which split of --data to evaluate")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));

  std::string report_metrics;
  auto* report = app.add_subcommand("report", "summarize a training metrics CSV");
  report->add_option("--metrics", report_metrics, "metrics CSV written by train")->required();

  for (auto* sub : {featurize, synth, train, evaluate, report}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  if (!config_path.empty()) ctx.config_path = config_path;
  for (const auto& [key, opt] : flag_options) {
    if (opt->count() > 0) ctx.flag_values[key] = flag_storage[key];
  }

  try {
    if (featurize->parsed()) {
      return detail::cmd_featurize(ctx, wav, featurize_out_opt->count() ? std::optional(featurize_out) : std::nullopt);
    }
    if (synth->parsed()) return detail::cmd_synth(ctx, spec_opt->count() ? std::optional(spec_path) : std::nullopt, synth_out);
    if (train->parsed()) {
      return detail::cmd_train(ctx, train_data, train_out,
                               metrics_opt->count() ? std::optional(train_metrics) : std::nullopt);
    }
    if (evaluate->parsed()) return detail::cmd_eval(ctx, eval_ckpt, eval_data, eval_out, eval_format, eval_split);
    if (report->parsed()) return detail::cmd_report(ctx, report_metrics);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace kws::cli
