#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "kws/autodiff.hpp"
#include "kws/error.hpp"
#include "kws/matrix.hpp"
#include "kws/models.hpp"
#include "kws/random.hpp"

namespace kws::training {

using ad::Tensor;
using models::Model;

struct TrainConfig {
  std::size_t max_epochs = 40;
  std::size_t batch_size = 64;
  double base_lr = 1e-3;
  double lr_decay = 0.97;  // multiplicative, per epoch
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  bool log_seconds = true;  // false writes 0 in the metrics `seconds` column

  bool operator==(const TrainConfig&) const = default;
};

inline void validate(const TrainConfig& c) {
  if (c.max_epochs == 0) throw ConfigError("max_epochs must be positive");
  if (c.batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (c.patience >= c.max_epochs) throw ConfigError("patience must be smaller than max_epochs");
  if (!(c.base_lr >= 0.0)) throw ConfigError("base_lr must be non-negative");
  if (!(c.lr_decay > 0.0)) throw ConfigError("lr_decay must be positive");
}

/// Learning rate for zero-based epoch index: base_lr * lr_decay^epoch.
inline double lr_schedule(std::size_t epoch, const TrainConfig& c) {
  return c.base_lr * std::pow(c.lr_decay, static_cast<double>(epoch));
}

/// Mean negative log-likelihood of `labels` under softmax(logits), via
/// log-sum-exp with the (constant) row max subtracted.
inline Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy_loss: logits " + ad::shape_str(logits.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<double> row_max(n), onehot(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw DataError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(c) + ")");
    }
    const auto row = logits.data().subspan(i * c, c);
    row_max[i] = *std::max_element(row.begin(), row.end());
    onehot[i * c + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  const Tensor shifted = ad::sub(logits, Tensor::from({n, 1}, std::move(row_max)));
  const Tensor lse = ad::log(ad::sum(ad::exp(shifted), 1, true));  // N x 1
  const Tensor picked = ad::sum(ad::mul(shifted, Tensor::from({n, c}, std::move(onehot))), 1, true);
  return ad::scale(ad::sum(ad::sub(lse, picked)), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;  // aligned with the parameter list
};

/// One Adam update with bias correction. Parameters without an accumulated
/// gradient are treated as having a zero gradient.
inline void adam_step(std::span<Tensor> params, AdamState& s, double lr) {
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.emplace_back(p.size(), 0.0);
      s.v.emplace_back(p.size(), 0.0);
    }
  }
  if (s.m.size() != params.size()) throw UsageError("adam_step: optimizer state does not match parameters");
  ++s.step;
  const double corr1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double corr2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto theta = params[k].mutable_data();
    const auto g = params[k].grad();
    auto& m = s.m[k];
    auto& v = s.v[k];
    if (m.size() != theta.size()) throw UsageError("adam_step: state shape mismatch");
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * gi;
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * gi * gi;
      const double m_hat = m[i] / corr1;
      const double v_hat = v[i] / corr2;
      theta[i] -= lr * m_hat / (std::sqrt(v_hat) + s.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Data

/// Precomputed features with class indices; all matrices share one shape.
struct LabeledFeatures {
  std::vector<Matrix> features;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

inline Tensor stack(const LabeledFeatures& data, std::span<const std::size_t> indices) {
  const Matrix& first = data.features.at(indices.front());
  std::vector<double> values;
  values.reserve(indices.size() * first.data.size());
  for (std::size_t i : indices) {
    const Matrix& f = data.features.at(i);
    if (f.rows != first.rows || f.cols != first.cols) throw ShapeError("feature matrices differ in shape");
    values.insert(values.end(), f.data.begin(), f.data.end());
  }
  return Tensor::from({indices.size(), first.rows, first.cols}, std::move(values));
}

/// Seeded shuffle of [0, n) for an epoch, cut into batches; the last batch
/// may be short.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                          std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, epoch));
  rng.shuffle(std::span(order));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return batches;
}

struct EpochStats {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t batches = 0;
};

inline std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t c = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (models::argmax(logits.data().subspan(i * c, c)) == static_cast<std::size_t>(labels[i])) ++correct;
  }
  return correct;
}

/// One pass over `data` in train mode. `epoch` is 1-based; it seeds the
/// shuffle and selects the learning rate.
inline EpochStats train_epoch(Model& model, const LabeledFeatures& data, AdamState& opt, const TrainConfig& config,
                              std::size_t epoch) {
  if (data.size() == 0) throw DataError("train_epoch: empty training set");
  model.mode = layers::Mode::train;
  const double lr = lr_schedule(epoch - 1, config);
  auto named = model.trainable();
  std::vector<Tensor> params;
  for (auto& [name, t] : named) params.push_back(t);

  EpochStats stats;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (const auto& batch : make_batches(data.size(), config.batch_size, config.seed, epoch)) {
    std::vector<int> labels;
    for (std::size_t i : batch) labels.push_back(data.labels[i]);
    const Tensor logits = models::model_forward(model, stack(data, batch));
    const Tensor loss = cross_entropy_loss(logits, labels);
    model.zero_grad();
    ad::backward(loss);
    adam_step(params, opt, lr);
    loss_sum += loss.item() * static_cast<double>(batch.size());
    correct += count_correct(logits, labels);
    ++stats.batches;
  }
  stats.loss = loss_sum / static_cast<double>(data.size());
  stats.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return stats;
}

/// Loss and accuracy in infer mode, without recording a graph. The model's
/// mode is restored afterwards.
inline EpochStats evaluate_split(Model& model, const LabeledFeatures& data, std::size_t batch_size = 64) {
  if (data.size() == 0) throw DataError("evaluate_split: empty set");
  const auto saved_mode = model.mode;
  model.mode = layers::Mode::infer;
  ad::NoGradGuard no_grad;
  EpochStats stats;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    std::vector<int> labels;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) {
      idx.push_back(i);
      labels.push_back(data.labels[i]);
    }
    const Tensor logits = models::model_forward(model, stack(data, idx));
    loss_sum += cross_entropy_loss(logits, labels).item() * static_cast<double>(idx.size());
    correct += count_correct(logits, labels);
    ++stats.batches;
  }
  model.mode = saved_mode;
  stats.loss = loss_sum / static_cast<double>(data.size());
  stats.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return stats;
}

// ---------------------------------------------------------------------------
// Fitting

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0, train_acc = 0;
  double val_loss = 0, val_acc = 0;
  double lr = 0;
  double seconds = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  std::size_t best_epoch = 0;  // 1-based; 0 before any epoch ran
};

struct FitHooks {
  // Replaces validation on `val` when set; receives the 1-based epoch.
  std::function<EpochStats(Model&, std::size_t)> validator;
  std::function<void(const EpochRecord&)> on_epoch;
  // Optimizer state to use (and leave updated); a fresh one when null.
  AdamState* optimizer = nullptr;
};

/// Trains until max_epochs or until `patience` epochs pass without a strictly
/// better validation accuracy, then restores the parameters of the best epoch.
inline TrainHistory fit(Model& model, const LabeledFeatures& train, const LabeledFeatures& val,
                        const TrainConfig& config, const FitHooks& hooks = {}) {
  validate(config);
  if (train.size() == 0) throw DataError("fit: empty training split");
  if (!hooks.validator && val.size() == 0) throw DataError("fit: empty validation split");

  AdamState local_opt;
  AdamState& opt = hooks.optimizer ? *hooks.optimizer : local_opt;
  TrainHistory history;
  std::vector<std::vector<double>> best_params;
  double best_acc = -1.0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const EpochStats tr = train_epoch(model, train, opt, config, epoch);
    const EpochStats va = hooks.validator ? hooks.validator(model, epoch) : evaluate_split(model, val, config.batch_size);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    EpochRecord rec{epoch, tr.loss, tr.accuracy, va.loss, va.accuracy, lr_schedule(epoch - 1, config),
                    config.log_seconds ? seconds : 0.0};
    history.records.push_back(rec);
    if (va.accuracy > best_acc) {
      best_acc = va.accuracy;
      history.best_epoch = epoch;
      best_params = model.snapshot();
    }
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (epoch - history.best_epoch >= config.patience) break;
  }
  model.restore(best_params);
  model.mode = layers::Mode::infer;
  return history;
}

// ---------------------------------------------------------------------------
// Metrics log

inline constexpr const char* kMetricsHeader = "epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds";

inline std::string format_metrics_row(const EpochRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.8f,%.6f,%.8f,%.6f,%.8g,%.3f", r.epoch, r.train_loss, r.train_acc, r.val_loss,
                r.val_acc, r.lr, r.seconds);
  return buf;
}

inline void write_metrics_csv(const std::string& path, const TrainHistory& h) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write metrics to " + path);
  out << kMetricsHeader << '\n';
  for (const auto& r : h.records) out << format_metrics_row(r) << '\n';
  if (!out) throw IoError("write failed for " + path);
}

inline TrainHistory read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw DataError(path + ": missing metrics header");
  TrainHistory h;
  double best = -1.0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    EpochRecord r;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf,%lf,%lf", &r.epoch, &r.train_loss, &r.train_acc, &r.val_loss,
                    &r.val_acc, &r.lr, &r.seconds) != 7) {
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed metrics row");
    }
    if (r.val_acc > best) {
      best = r.val_acc;
      h.best_epoch = r.epoch;
    }
    h.records.push_back(r);
  }
  return h;
}

}  // namespace kws::training
