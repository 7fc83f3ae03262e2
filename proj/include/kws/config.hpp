#pragma once

// Flat `key = value` settings covering every configurable knob. The same
// registry backs config files, CLI flag overrides and checkpoint metadata.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "kws/audio_io.hpp"
#include "kws/dsp.hpp"
#include "kws/error.hpp"
#include "kws/models.hpp"
#include "kws/training.hpp"

namespace kws::config {

enum class Kind { integer, real, boolean, text, choice, int_list, real_list, text_list };

struct KeySpec {
  const char* name;
  Kind kind;
  const char* default_value;
  const char* help;
  std::vector<std::string> choices = {};
};

inline const std::vector<KeySpec>& registry() {
  static const std::vector<KeySpec> keys = {
      // feature extraction
      {"sample_rate", Kind::integer, "16000", "audio sample rate in Hz"},
      {"frame_len", Kind::integer, "400", "analysis frame length in samples"},
      {"hop_len", Kind::integer, "160", "frame hop in samples"},
      {"n_fft", Kind::integer, "512", "FFT size (power of two >= frame_len)"},
      {"pre_emphasis", Kind::real, "0.97", "pre-emphasis coefficient in [0, 1)"},
      {"n_mel_filters", Kind::integer, "40", "number of triangular mel filters"},
      {"n_mfcc", Kind::integer, "20", "cepstral coefficients kept after the DCT"},
      {"fmin", Kind::real, "20", "lowest filterbank edge in Hz"},
      {"fmax", Kind::real, "8000", "highest filterbank edge in Hz"},
      {"log_floor", Kind::real, "1e-10", "energy floor applied before the log"},
      {"window", Kind::choice, "hamming", "frame window", {"hamming", "rectangular"}},
      {"feature_kind", Kind::choice, "log_mel", "model input features", {"log_mel", "mfcc"}},
      // model
      {"arch", Kind::choice, "multilayer_attention", "network architecture",
       {"cnn", "cnn_bilstm", "attention_rnn", "multilayer_attention"}},
      {"conv_channels", Kind::int_list, "", "channels per conv block (empty: architecture default)"},
      {"kernel_size", Kind::integer, "3", "square conv kernel size"},
      {"pool_size", Kind::integer, "2", "square max-pool window and stride"},
      {"lstm_hidden", Kind::integer, "64", "LSTM units per direction"},
      {"dense_units", Kind::text, "default", "hidden dense widths: 'default', 'none' or a comma list"},
      {"dropout_rate", Kind::real, "0.2", "dropout after each conv block"},
      // training
      {"max_epochs", Kind::integer, "40", "epoch limit"},
      {"batch_size", Kind::integer, "64", "minibatch size"},
      {"base_lr", Kind::real, "0.001", "initial Adam learning rate"},
      {"lr_decay", Kind::real, "0.97", "multiplicative learning-rate decay per epoch"},
      {"patience", Kind::integer, "10", "early-stopping patience in epochs"},
      {"seed", Kind::integer, "0", "seed for initialization, splits and shuffling"},
      {"log_seconds", Kind::boolean, "true", "record wall time in the metrics log"},
      // data
      {"labels", Kind::text_list, "", "keyword labels in class order (empty: subdirectories, sorted)"},
      {"train_ratio", Kind::real, "0.8", "training share of each label"},
      {"val_ratio", Kind::real, "0.1", "validation share of each label"},
      {"test_ratio", Kind::real, "0.1", "test share of each label"},
      // synthetic data
      {"n_classes", Kind::integer, "3", "synthetic classes"},
      {"clips_per_class", Kind::integer, "20", "synthetic clips per class"},
      {"frequencies", Kind::real_list, "", "tone frequency per synthetic class in Hz (empty: spread evenly)"},
      {"noise_amplitude", Kind::real, "0.05", "uniform noise amplitude added to synthetic tones"},
      {"tone_amplitude", Kind::real, "0.5", "peak amplitude of synthetic tones"},
  };
  return keys;
}

inline const KeySpec* find_key(std::string_view name) {
  for (const auto& k : registry()) {
    if (name == k.name) return &k;
  }
  return nullptr;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

inline std::optional<long long> parse_int(const std::string& s) {
  long long v = 0;
  const auto t = trim(s);
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) return std::nullopt;
  return v;
}

inline std::optional<double> parse_real(const std::string& s) {
  const auto t = trim(s);
  if (t.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (end != t.c_str() + t.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

/// Empty string when `value` suits `key`, otherwise the reason it does not.
inline std::string check_value(const KeySpec& key, const std::string& value) {
  switch (key.kind) {
    case Kind::integer:
      return parse_int(value) ? "" : "expected an integer";
    case Kind::real:
      return parse_real(value) ? "" : "expected a number";
    case Kind::boolean:
      return (value == "true" || value == "false") ? "" : "expected true or false";
    case Kind::choice:
      return std::find(key.choices.begin(), key.choices.end(), value) != key.choices.end() ? ""
                                                                                            : "not one of the allowed values";
    case Kind::int_list:
      for (const auto& item : split_list(value)) {
        if (!parse_int(item)) return "expected a comma-separated list of integers";
      }
      return "";
    case Kind::real_list:
      for (const auto& item : split_list(value)) {
        if (!parse_real(item)) return "expected a comma-separated list of numbers";
      }
      return "";
    case Kind::text:
    case Kind::text_list:
      return "";
  }
  return "";
}

/// Fully resolved settings: every registry key has a value.
class Settings {
 public:
  Settings() {
    for (const auto& k : registry()) values_[k.name] = k.default_value;
  }

  /// Sets a known key after validating its value; `where` prefixes errors.
  void set(const std::string& key, const std::string& value, const std::string& where = "") {
    const KeySpec* spec = find_key(key);
    const std::string prefix = where.empty() ? "" : where + ": ";
    if (!spec) throw ConfigError(prefix + "unknown key '" + key + "'");
    const std::string v = trim(value);
    const std::string problem = check_value(*spec, v);
    if (!problem.empty()) throw ConfigError(prefix + "bad value '" + v + "' for key '" + key + "': " + problem);
    values_[key] = v;
  }

  const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
    return it->second;
  }

  long long get_int(const std::string& key) const { return *parse_int(get(key)); }
  std::size_t get_size(const std::string& key) const {
    const long long v = get_int(key);
    if (v < 0) throw ConfigError("key '" + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
  }
  double get_real(const std::string& key) const { return *parse_real(get(key)); }
  bool get_bool(const std::string& key) const { return get(key) == "true"; }
  std::vector<std::string> get_list(const std::string& key) const { return split_list(get(key)); }

  const std::map<std::string, std::string>& values() const { return values_; }

  /// One `key = value` line per key, in registry order.
  std::string to_text() const {
    std::string out;
    for (const auto& k : registry()) out += std::string(k.name) + " = " + values_.at(k.name) + "\n";
    return out;
  }

  bool operator==(const Settings&) const = default;

 private:
  std::map<std::string, std::string> values_;
};

/// Applies `key = value` lines from `text`. `#` starts a comment; blank lines
/// are skipped. Errors name the source and line.
inline void apply_text(Settings& s, const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    s.set(trim(line.substr(0, eq)), line.substr(eq + 1), where);
  }
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Defaults, then the file (if any), then overrides: later wins.
inline Settings parse_config(const std::optional<std::string>& path,
                             const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  Settings s;
  if (path) apply_text(s, read_text_file(*path), *path);
  for (const auto& [k, v] : overrides) s.set(k, v, "--" + k);
  return s;
}

// ---------------------------------------------------------------------------
// Typed views

inline dsp::DspConfig dsp_config(const Settings& s) {
  dsp::DspConfig c;
  c.sample_rate = static_cast<int>(s.get_int("sample_rate"));
  c.frame_len = static_cast<int>(s.get_int("frame_len"));
  c.hop_len = static_cast<int>(s.get_int("hop_len"));
  c.n_fft = static_cast<int>(s.get_int("n_fft"));
  c.pre_emphasis_alpha = s.get_real("pre_emphasis");
  c.n_mel_filters = static_cast<int>(s.get_int("n_mel_filters"));
  c.n_mfcc = static_cast<int>(s.get_int("n_mfcc"));
  c.fmin = s.get_real("fmin");
  c.fmax = s.get_real("fmax");
  c.log_floor = s.get_real("log_floor");
  c.window = s.get("window") == "hamming" ? dsp::Window::hamming : dsp::Window::rectangular;
  c.kind = s.get("feature_kind") == "mfcc" ? dsp::FeatureKind::mfcc : dsp::FeatureKind::log_mel;
  try {
    dsp::validate(c);
  } catch (const DspError& e) {
    throw ConfigError(std::string("feature settings: ") + e.what());
  }
  return c;
}

inline std::vector<std::size_t> size_list(const Settings& s, const std::string& key) {
  std::vector<std::size_t> out;
  for (const auto& item : s.get_list(key)) {
    const auto v = parse_int(item);
    if (!v || *v <= 0) throw ConfigError("key '" + key + "' needs positive integers");
    out.push_back(static_cast<std::size_t>(*v));
  }
  return out;
}

/// Model settings for a dataset with `n_classes` labels and features of
/// frames x dim.
inline models::ModelConfig model_config(const Settings& s, std::size_t n_classes, std::size_t frames,
                                        std::size_t dim) {
  models::ModelConfig c;
  c.arch = models::parse_arch(s.get("arch"));
  c.n_classes = n_classes;
  c.input_frames = frames;
  c.input_dim = dim;
  c.conv_channels = size_list(s, "conv_channels");
  c.kernel_size = s.get_size("kernel_size");
  c.pool_size = s.get_size("pool_size");
  c.lstm_hidden = s.get_size("lstm_hidden");
  const std::string dense = s.get("dense_units");
  if (dense == "default") {
    c.default_dense = true;
  } else if (dense == "none") {
    c.default_dense = false;
  } else {
    c.default_dense = false;
    for (const auto& item : split_list(dense)) {
      const auto v = parse_int(item);
      if (!v || *v <= 0) throw ConfigError("dense_units must be 'default', 'none' or positive integers");
      c.dense_units.push_back(static_cast<std::size_t>(*v));
    }
  }
  c.dropout_rate = s.get_real("dropout_rate");
  c.seed = static_cast<std::uint64_t>(s.get_int("seed"));
  models::validate(c);
  return c;
}

inline training::TrainConfig train_config(const Settings& s) {
  training::TrainConfig c;
  c.max_epochs = s.get_size("max_epochs");
  c.batch_size = s.get_size("batch_size");
  c.base_lr = s.get_real("base_lr");
  c.lr_decay = s.get_real("lr_decay");
  c.patience = s.get_size("patience");
  c.seed = static_cast<std::uint64_t>(s.get_int("seed"));
  c.log_seconds = s.get_bool("log_seconds");
  training::validate(c);
  return c;
}

inline SplitRatios split_ratios(const Settings& s) {
  return {s.get_real("train_ratio"), s.get_real("val_ratio"), s.get_real("test_ratio")};
}

inline SynthSpec synth_spec(const Settings& s) {
  SynthSpec spec;
  spec.n_classes = static_cast<int>(s.get_int("n_classes"));
  spec.clips_per_class = static_cast<int>(s.get_int("clips_per_class"));
  spec.sample_rate = static_cast<int>(s.get_int("sample_rate"));
  spec.noise_amplitude = s.get_real("noise_amplitude");
  spec.tone_amplitude = s.get_real("tone_amplitude");
  for (const auto& item : s.get_list("frequencies")) spec.class_frequencies.push_back(*parse_real(item));
  if (spec.class_frequencies.empty() && spec.n_classes > 0) {
    // Evenly spread between 300 Hz and 0.4 * sample_rate.
    const double lo = 300.0, hi = 0.4 * spec.sample_rate;
    for (int c = 0; c < spec.n_classes; ++c) {
      spec.class_frequencies.push_back(spec.n_classes == 1 ? lo : lo + (hi - lo) * c / (spec.n_classes - 1));
    }
  }
  spec.labels = s.get_list("labels");
  return spec;
}

}  // namespace kws::config
