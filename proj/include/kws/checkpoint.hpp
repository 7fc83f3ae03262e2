#pragma once

// Binary checkpoint layout (all integers little-endian):
//
//   "KWSA" | u32 version | u32 metadata length | metadata (UTF-8 key=value lines)
//   then until end of file, one record per tensor in name order:
//   u32 name length | name | u32 rank | u32 dims[rank] | f64 values[prod(dims)]
//
// Model parameters and batch-norm buffers are stored under their model names,
// Adam moments under "adam.m/<name>" and "adam.v/<name>".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kws/config.hpp"
#include "kws/error.hpp"
#include "kws/models.hpp"
#include "kws/training.hpp"

namespace kws::training {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'K', 'W', 'S', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  AdamState adam;
  config::Settings settings;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

inline void put_record(std::string& out, const std::string& name, const ad::Shape& shape,
                       std::span<const double> values) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) put_u32(out, static_cast<std::uint32_t>(d));
  out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  bool done() const { return pos_ == bytes_.size(); }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> doubles(std::size_t n, const char* what) {
    if (n > (bytes_.size() - pos_) / sizeof(double)) throw CheckpointError(std::string("truncated checkpoint: ") + what);
    std::vector<double> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError(std::string("truncated checkpoint: ") + what);
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::string encode_checkpoint(const Model& model, const AdamState* adam, const TrainHistory* history,
                                     const config::Settings& settings) {
  const auto& c = model.config;
  std::ostringstream meta;
  meta << "model.arch=" << models::to_string(c.arch) << '\n'
       << "model.n_classes=" << c.n_classes << '\n'
       << "model.input_frames=" << c.input_frames << '\n'
       << "model.input_dim=" << c.input_dim << '\n'
       << "model.conv_channels=" << detail::join_sizes(c.conv_channels) << '\n'
       << "model.kernel_size=" << c.kernel_size << '\n'
       << "model.pool_size=" << c.pool_size << '\n'
       << "model.lstm_hidden=" << c.lstm_hidden << '\n'
       << "model.dense_units=" << detail::join_sizes(c.dense_units) << '\n'
       << "model.default_dense=" << (c.default_dense ? "true" : "false") << '\n'
       << "model.dropout_rate=" << detail::exact(c.dropout_rate) << '\n'
       << "model.seed=" << c.seed << '\n'
       << "adam.step=" << (adam ? adam->step : 0) << '\n'
       << "history.best_epoch=" << (history ? history->best_epoch : 0) << '\n'
       << "history.epochs=" << (history ? history->records.size() : 0) << '\n';
  for (const auto& [k, v] : settings.values()) meta << k << '=' << v << '\n';
  const std::string metadata = meta.str();

  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(metadata.size()));
  out += metadata;

  std::map<std::string, std::pair<ad::Shape, std::span<const double>>> records;
  for (const auto& [name, t] : model.named_params) records[name] = {t.shape(), t.data()};
  if (adam && !adam->m.empty()) {
    const auto trainable = model.trainable();
    if (adam->m.size() != trainable.size()) throw CheckpointError("optimizer state does not match model");
    for (std::size_t i = 0; i < trainable.size(); ++i) {
      const auto& [name, t] = trainable[i];
      records["adam.m/" + name] = {t.shape(), adam->m[i]};
      records["adam.v/" + name] = {t.shape(), adam->v[i]};
    }
  }
  for (const auto& [name, rec] : records) detail::put_record(out, name, rec.first, rec.second);
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& model, const AdamState* adam = nullptr,
                            const TrainHistory* history = nullptr, const config::Settings& settings = {}) {
  const std::string bytes = encode_checkpoint(model, adam, history, settings);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::Reader in(bytes);
  if (in.str(4, "magic") != std::string(kCheckpointMagic, 4)) throw CheckpointError("bad checkpoint magic");
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::string metadata = in.str(in.u32("metadata length"), "metadata");

  std::map<std::string, std::string> meta;
  Checkpoint ck;
  std::istringstream lines(metadata);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed metadata line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (config::find_key(key)) {
      try {
        ck.settings.set(key, value);
      } catch (const ConfigError& e) {
        throw CheckpointError(std::string("metadata: ") + e.what());
      }
    } else {
      meta[key] = value;
    }
  }
  const auto need = [&](const std::string& key) -> const std::string& {
    const auto it = meta.find(key);
    if (it == meta.end()) throw CheckpointError("metadata lacks '" + key + "'");
    return it->second;
  };
  const auto need_size = [&](const std::string& key) {
    const auto v = config::parse_int(need(key));
    if (!v || *v < 0) throw CheckpointError("metadata '" + key + "' is not a count");
    return static_cast<std::size_t>(*v);
  };
  const auto size_list = [&](const std::string& key) {
    std::vector<std::size_t> out;
    for (const auto& item : config::split_list(need(key))) {
      const auto v = config::parse_int(item);
      if (!v || *v <= 0) throw CheckpointError("metadata '" + key + "' is not a list of counts");
      out.push_back(static_cast<std::size_t>(*v));
    }
    return out;
  };

  models::ModelConfig mc;
  try {
    mc.arch = models::parse_arch(need("model.arch"));
  } catch (const ConfigError& e) {
    throw CheckpointError(e.what());
  }
  mc.n_classes = need_size("model.n_classes");
  mc.input_frames = need_size("model.input_frames");
  mc.input_dim = need_size("model.input_dim");
  mc.conv_channels = size_list("model.conv_channels");
  mc.kernel_size = need_size("model.kernel_size");
  mc.pool_size = need_size("model.pool_size");
  mc.lstm_hidden = need_size("model.lstm_hidden");
  mc.dense_units = size_list("model.dense_units");
  mc.default_dense = need("model.default_dense") == "true";
  const auto rate = config::parse_real(need("model.dropout_rate"));
  if (!rate) throw CheckpointError("metadata 'model.dropout_rate' is not a number");
  mc.dropout_rate = *rate;
  mc.seed = static_cast<std::uint64_t>(need_size("model.seed"));
  ck.adam.step = need_size("adam.step");
  ck.best_epoch = need_size("history.best_epoch");
  ck.epochs_run = need_size("history.epochs");

  try {
    ck.model = models::build_model(mc);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("stored model config is invalid: ") + e.what());
  }

  std::map<std::string, std::vector<double>> moments;
  std::size_t loaded = 0;
  while (!in.done()) {
    const std::string name = in.str(in.u32("name length"), "name");
    const std::uint32_t rank = in.u32("rank");
    if (rank == 0 || rank > 8) throw CheckpointError("implausible rank for '" + name + "'");
    ad::Shape shape(rank);
    for (auto& d : shape) d = in.u32("dims");
    auto values = in.doubles(ad::numel(shape), "tensor data");
    if (name.rfind("adam.", 0) == 0) {
      moments[name] = std::move(values);
      continue;
    }
    const auto it = ck.model.named_params.find(name);
    if (it == ck.model.named_params.end()) throw CheckpointError("unexpected tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw CheckpointError("tensor '" + name + "' has shape " + ad::shape_str(shape) + ", model expects " +
                            ad::shape_str(it->second.shape()));
    }
    std::copy(values.begin(), values.end(), it->second.mutable_data().begin());
    ++loaded;
  }
  if (loaded != ck.model.named_params.size()) throw CheckpointError("checkpoint is missing model tensors");

  if (!moments.empty()) {
    for (const auto& [name, t] : ck.model.trainable()) {
      const auto m = moments.find("adam.m/" + name);
      const auto v = moments.find("adam.v/" + name);
      if (m == moments.end() || v == moments.end()) throw CheckpointError("incomplete optimizer state for " + name);
      ck.adam.m.push_back(m->second);
      ck.adam.v.push_back(v->second);
    }
  }
  ck.model.mode = layers::Mode::infer;
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace kws::training
