#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kws/audio_io.hpp"
#include "kws/dsp.hpp"
#include "kws/error.hpp"
#include "kws/models.hpp"

namespace kws::eval {

/// Rows are true labels, columns predictions.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;  // classes x classes

  explicit ConfusionMatrix(std::size_t c = 0) : classes(c), counts(c * c, 0) {}

  std::size_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }

  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
  std::size_t trace() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < classes; ++i) n += at(i, i);
    return n;
  }
  std::size_t row_sum(std::size_t truth) const {
    std::size_t n = 0;
    for (std::size_t j = 0; j < classes; ++j) n += at(truth, j);
    return n;
  }

  /// Elementwise sum; lets shards be merged in any order.
  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.classes != classes) throw DataError("cannot merge confusion matrices of different sizes");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
    return *this;
  }

  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion_matrix(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                                        std::size_t classes) {
  if (predictions.size() != labels.size()) throw DataError("predictions and labels differ in length");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes || predictions[i] >= classes) {
      throw DataError("class index out of range at position " + std::to_string(i));
    }
    ++cm.at(labels[i], predictions[i]);
  }
  return cm;
}

struct EvalReport {
  std::vector<std::string> labels;
  ConfusionMatrix confusion;
  std::size_t n_samples = 0;
  double overall_accuracy = 0.0;
  // Row recall per label; absent for labels with no samples.
  std::vector<std::optional<double>> per_keyword;

  std::optional<double> accuracy_of(const std::string& label) const {
    const auto it = std::find(labels.begin(), labels.end(), label);
    if (it == labels.end()) return std::nullopt;
    return per_keyword[static_cast<std::size_t>(it - labels.begin())];
  }
};

inline EvalReport make_report(const ConfusionMatrix& cm, std::vector<std::string> labels) {
  if (labels.size() != cm.classes) throw DataError("label count does not match the confusion matrix");
  EvalReport r;
  r.labels = std::move(labels);
  r.confusion = cm;
  r.n_samples = cm.total();
  r.overall_accuracy = r.n_samples ? static_cast<double>(cm.trace()) / static_cast<double>(r.n_samples) : 0.0;
  for (std::size_t i = 0; i < cm.classes; ++i) {
    const std::size_t row = cm.row_sum(i);
    r.per_keyword.push_back(row ? std::optional(static_cast<double>(cm.at(i, i)) / static_cast<double>(row))
                                : std::nullopt);
  }
  return r;
}

/// Featurizes every entry, classifies it and tallies the results.
/// `model_labels` gives the class order the model was trained with.
inline EvalReport evaluate(models::Model& model, const DatasetIndex& dataset, const dsp::DspConfig& dsp_config,
                           const std::vector<std::string>& model_labels) {
  if (model_labels.size() != model.config.n_classes) {
    throw DataError("model has " + std::to_string(model.config.n_classes) + " classes but " +
                    std::to_string(model_labels.size()) + " labels were given");
  }
  const auto saved_mode = model.mode;
  model.mode = layers::Mode::infer;
  const auto bank = dsp::build_mel_filterbank(dsp_config);
  ConfusionMatrix cm(model_labels.size());
  for (const auto& entry : dataset.entries) {
    const auto it = std::find(model_labels.begin(), model_labels.end(), entry.label);
    if (it == model_labels.end()) throw DataError("label '" + entry.label + "' is not one of the model's classes");
    const auto features = dsp::mfcc_pipeline(load_clip(entry), dsp_config, bank);
    const auto pred = models::predict(model, features.values);
    ++cm.at(static_cast<std::size_t>(it - model_labels.begin()), pred.label);
  }
  model.mode = saved_mode;
  return make_report(cm, model_labels);
}

// ---------------------------------------------------------------------------
// Report files

inline std::string format_accuracy(double a) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", a);
  return buf;
}

/// `label,accuracy,n` rows plus a final `__overall__` row. Empty labels
/// leave the accuracy field blank.
inline std::string report_csv(const EvalReport& r) {
  std::string out = "label,accuracy,n\n";
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    out += r.labels[i] + "," + (r.per_keyword[i] ? format_accuracy(*r.per_keyword[i]) : "") + "," +
           std::to_string(r.confusion.row_sum(i)) + "\n";
  }
  out += "__overall__," + format_accuracy(r.overall_accuracy) + "," + std::to_string(r.n_samples) + "\n";
  return out;
}

inline std::string report_text(const EvalReport& r) {
  std::size_t width = std::string("overall").size();
  for (const auto& l : r.labels) width = std::max(width, l.size());
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-*s  %8s  %6s\n", static_cast<int>(width), "keyword", "accuracy", "n");
  os << buf;
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%-*s  %8s  %6zu\n", static_cast<int>(width), r.labels[i].c_str(),
                  r.per_keyword[i] ? format_accuracy(*r.per_keyword[i]).c_str() : "-", r.confusion.row_sum(i));
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%-*s  %8s  %6zu\n", static_cast<int>(width), "overall",
                format_accuracy(r.overall_accuracy).c_str(), r.n_samples);
  os << buf << "\nconfusion (rows: true, columns: predicted)\n";

  std::size_t cell = 1;
  for (auto c : r.confusion.counts) cell = std::max(cell, std::to_string(c).size());
  std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(width), "");
  os << buf;
  for (std::size_t j = 0; j < r.labels.size(); ++j) {
    std::snprintf(buf, sizeof buf, " %*zu", static_cast<int>(cell), j);
    os << buf;
  }
  os << '\n';
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(width), r.labels[i].c_str());
    os << buf;
    for (std::size_t j = 0; j < r.labels.size(); ++j) {
      std::snprintf(buf, sizeof buf, " %*zu", static_cast<int>(cell), r.confusion.at(i, j));
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

enum class ReportFormat { csv, text };

inline void emit_report(const EvalReport& r, const std::string& path, ReportFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write report " + path);
  out << (format == ReportFormat::csv ? report_csv(r) : report_text(r));
  if (!out) throw IoError("write failed for " + path);
}

/// What a CSV report carries: per-label accuracy (4 decimals) and counts.
struct ReportRow {
  std::string label;
  std::optional<double> accuracy;
  std::size_t n = 0;

  bool operator==(const ReportRow&) const = default;
};

inline std::vector<ReportRow> report_rows(const EvalReport& r) {
  std::vector<ReportRow> rows;
  const auto round4 = [](double a) { return std::stod(format_accuracy(a)); };
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    rows.push_back({r.labels[i], r.per_keyword[i] ? std::optional(round4(*r.per_keyword[i])) : std::nullopt,
                    r.confusion.row_sum(i)});
  }
  rows.push_back({"__overall__", round4(r.overall_accuracy), r.n_samples});
  return rows;
}

inline std::vector<ReportRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "label,accuracy,n") throw DataError("report CSV lacks its header");
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.rfind(',');
    if (c1 == std::string::npos || c1 == c2) throw DataError("malformed report row '" + line + "'");
    ReportRow row;
    row.label = line.substr(0, c1);
    const std::string acc = line.substr(c1 + 1, c2 - c1 - 1);
    if (!acc.empty()) row.accuracy = std::stod(acc);
    row.n = static_cast<std::size_t>(std::stoull(line.substr(c2 + 1)));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace kws::eval
