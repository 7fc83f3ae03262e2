#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "kws/error.hpp"
#include "kws/random.hpp"

namespace kws {

/// One second of mono audio, samples in [-1, 1].
struct AudioClip {
  std::vector<double> samples;
  int sample_rate = 16000;
  std::optional<std::string> label;
};

/// Pads with zeros or truncates so the clip holds exactly one second.
inline void fit_to_one_second(AudioClip& clip) {
  clip.samples.resize(static_cast<std::size_t>(clip.sample_rate), 0.0);
}

namespace detail {

inline std::uint16_t le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline void put16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}
inline void put32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

}  // namespace detail

/// Decodes an in-memory RIFF/WAVE image (PCM, 16-bit, mono).
inline AudioClip decode_wav(const std::vector<unsigned char>& bytes, const std::string& what = "<memory>") {
  using detail::le16;
  using detail::le32;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError(what + ": not a RIFF/WAVE file");
  }

  bool have_fmt = false;
  std::uint16_t format_tag = 0, channels = 0, bits = 0;
  std::uint32_t sample_rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::uint32_t size = le32(hdr + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (size < 16 || body + 16 > bytes.size()) throw FormatError(what + ": truncated fmt chunk");
      format_tag = le16(bytes.data() + body);
      channels = le16(bytes.data() + body + 2);
      sample_rate = le32(bytes.data() + body + 4);
      bits = le16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      if (!have_fmt) throw FormatError(what + ": data chunk before fmt chunk");
      if (format_tag != 1) {
        throw UnsupportedError(what + ": audio format " + std::to_string(format_tag) + " is not PCM");
      }
      if (channels != 1) {
        throw UnsupportedError(what + ": " + std::to_string(channels) + " channels, expected mono");
      }
      if (bits != 16) {
        throw UnsupportedError(what + ": " + std::to_string(bits) + " bits per sample, expected 16");
      }
      if (sample_rate == 0) throw FormatError(what + ": zero sample rate");

      // Streamed files sometimes carry a bogus data size; read what exists.
      const std::size_t available = std::min<std::size_t>(size, bytes.size() - body);
      const std::size_t cap = static_cast<std::size_t>(sample_rate);
      const std::size_t count = std::min(available / 2, cap);
      AudioClip clip;
      clip.sample_rate = static_cast<int>(sample_rate);
      clip.samples.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        const auto raw = static_cast<std::int16_t>(le16(bytes.data() + body + 2 * i));
        clip.samples[i] = static_cast<double>(raw) / 32768.0;
      }
      fit_to_one_second(clip);
      return clip;
    }
    pos = body + size + (size & 1u);
  }
  throw FormatError(what + (have_fmt ? ": missing data chunk" : ": missing fmt chunk"));
}

inline AudioClip read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes, path.string());
}

/// Encodes as canonical 44-byte-header PCM16 mono. Samples are rounded and
/// clamped to the int16 range.
inline std::string encode_wav(const AudioClip& clip) {
  using detail::put16;
  using detail::put32;
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  put32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  put32(out, 16);
  put16(out, 1);
  put16(out, 1);
  put32(out, static_cast<std::uint32_t>(clip.sample_rate));
  put32(out, static_cast<std::uint32_t>(clip.sample_rate * 2));
  put16(out, 2);
  put16(out, 16);
  out += "data";
  put32(out, data_bytes);
  for (double s : clip.samples) {
    const double q = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
    put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

inline void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const std::string bytes = encode_wav(clip);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetEntry {
  std::string source;  // file path, or a synthetic id
  std::string label;
  std::optional<AudioClip> clip;  // set for in-memory datasets
};

struct DatasetIndex {
  std::vector<DatasetEntry> entries;
  std::vector<std::string> label_set;

  int label_index(const std::string& label) const {
    const auto it = std::find(label_set.begin(), label_set.end(), label);
    if (it == label_set.end()) throw DataError("label '" + label + "' not in label set");
    return static_cast<int>(it - label_set.begin());
  }

  std::size_t count(const std::string& label) const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                  [&](const DatasetEntry& e) { return e.label == label; }));
  }
};

inline AudioClip load_clip(const DatasetEntry& entry) {
  AudioClip clip = entry.clip ? *entry.clip : read_wav(entry.source);
  clip.label = entry.label;
  return clip;
}

inline void validate_label_set(const std::vector<std::string>& label_set) {
  std::set<std::string> seen;
  for (const auto& l : label_set) {
    if (l.empty()) throw DatasetError("empty label name");
    if (!seen.insert(l).second) throw DatasetError("duplicate label '" + l + "'");
  }
}

/// Indexes `<root>/<label>/*.wav`. Entries come back sorted by path.
inline DatasetIndex scan_dataset(const std::filesystem::path& root, const std::vector<std::string>& label_set) {
  namespace fs = std::filesystem;
  validate_label_set(label_set);
  if (!fs::is_directory(root)) throw DatasetError("dataset root '" + root.string() + "' is not a directory");
  DatasetIndex index;
  index.label_set = label_set;
  for (const auto& label : label_set) {
    const fs::path dir = root / label;
    if (!fs::is_directory(dir)) throw DatasetError("missing directory for label '" + label + "': " + dir.string());
    for (const auto& item : fs::directory_iterator(dir)) {
      if (item.is_regular_file() && item.path().extension() == ".wav") {
        index.entries.push_back({item.path().string(), label, std::nullopt});
      }
    }
  }
  std::sort(index.entries.begin(), index.entries.end(),
            [](const DatasetEntry& a, const DatasetEntry& b) { return a.source < b.source; });
  return index;
}

/// Subdirectory names of `root`, sorted. Used when no label set is given.
inline std::vector<std::string> discover_labels(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DatasetError("dataset root '" + root.string() + "' is not a directory");
  std::vector<std::string> labels;
  for (const auto& item : fs::directory_iterator(root)) {
    if (item.is_directory()) labels.push_back(item.path().filename().string());
  }
  std::sort(labels.begin(), labels.end());
  return labels;
}

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DatasetSplits {
  DatasetIndex train, val, test;
};

/// Stratified, seeded split. Each label's entries are shuffled and cut
/// independently; every non-zero split gets at least one entry per label and
/// rounding remainders go to train.
inline DatasetSplits split_dataset(const DatasetIndex& index, SplitRatios ratios, std::uint64_t seed) {
  if (ratios.train <= 0 || ratios.val < 0 || ratios.test < 0) {
    throw SplitError("split ratios must be positive");
  }
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw SplitError("split ratios must sum to 1");
  }
  const std::size_t nonzero = 1 + (ratios.val > 0) + (ratios.test > 0);

  DatasetSplits out;
  out.train.label_set = out.val.label_set = out.test.label_set = index.label_set;
  std::vector<int> assignment(index.entries.size(), 0);

  for (std::size_t li = 0; li < index.label_set.size(); ++li) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < index.entries.size(); ++i) {
      if (index.entries[i].label == index.label_set[li]) members.push_back(i);
    }
    if (members.empty()) continue;
    if (members.size() < nonzero) {
      throw SplitError("label '" + index.label_set[li] + "' has " + std::to_string(members.size()) +
                       " entries, fewer than the " + std::to_string(nonzero) + " non-empty splits");
    }
    Rng rng(mix_seed(seed, li));
    rng.shuffle(std::span(members));
    const auto share = [&](double r) -> std::size_t {
      if (r <= 0) return 0;
      return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(members.size() * r + 1e-9)));
    };
    const std::size_t n_val = share(ratios.val);
    const std::size_t n_test = share(ratios.test);
    if (n_val + n_test >= members.size()) {
      throw SplitError("label '" + index.label_set[li] + "' too small for the requested ratios");
    }
    for (std::size_t k = 0; k < n_val; ++k) assignment[members[k]] = 1;
    for (std::size_t k = n_val; k < n_val + n_test; ++k) assignment[members[k]] = 2;
  }

  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    DatasetIndex* target = assignment[i] == 0 ? &out.train : assignment[i] == 1 ? &out.val : &out.test;
    target->entries.push_back(index.entries[i]);
  }
  return out;
}

struct SynthSpec {
  int n_classes = 3;
  int clips_per_class = 20;
  int sample_rate = 16000;
  std::vector<double> class_frequencies;  // Hz, one per class
  double noise_amplitude = 0.05;
  double tone_amplitude = 0.5;
  std::vector<std::string> labels;  // optional; defaults to class0, class1, ...
};

inline void validate(const SynthSpec& spec) {
  if (spec.n_classes < 1) throw DatasetError("synth: n_classes must be positive");
  if (spec.clips_per_class < 1) throw DatasetError("synth: clips_per_class must be positive");
  if (spec.sample_rate <= 0) throw DatasetError("synth: sample_rate must be positive");
  if (spec.class_frequencies.size() != static_cast<std::size_t>(spec.n_classes)) {
    throw DatasetError("synth: need one frequency per class");
  }
  std::set<double> seen;
  for (double f : spec.class_frequencies) {
    if (!(f > 0) || f >= spec.sample_rate / 2.0) throw DatasetError("synth: frequency outside (0, sample_rate/2)");
    if (!seen.insert(f).second) throw DatasetError("synth: class frequencies must be distinct");
  }
  if (spec.noise_amplitude < 0) throw DatasetError("synth: noise_amplitude must be non-negative");
  if (!spec.labels.empty() && spec.labels.size() != spec.class_frequencies.size()) {
    throw DatasetError("synth: need one label per class");
  }
}

inline std::vector<std::string> synth_labels(const SynthSpec& spec) {
  if (!spec.labels.empty()) return spec.labels;
  std::vector<std::string> labels;
  for (int c = 0; c < spec.n_classes; ++c) labels.push_back("class" + std::to_string(c));
  return labels;
}

/// Tone-per-class dataset held in memory. Deterministic in `seed`.
inline DatasetIndex synth_dataset(const SynthSpec& spec, std::uint64_t seed) {
  validate(spec);
  DatasetIndex index;
  index.label_set = synth_labels(spec);
  validate_label_set(index.label_set);
  for (int c = 0; c < spec.n_classes; ++c) {
    for (int k = 0; k < spec.clips_per_class; ++k) {
      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(c) * 1000003ULL + static_cast<std::uint64_t>(k)));
      const double phase = rng.uniform(0.0, 2.0 * M_PI);
      const double w = 2.0 * M_PI * spec.class_frequencies[static_cast<std::size_t>(c)] / spec.sample_rate;
      AudioClip clip;
      clip.sample_rate = spec.sample_rate;
      clip.label = index.label_set[static_cast<std::size_t>(c)];
      clip.samples.resize(static_cast<std::size_t>(spec.sample_rate));
      for (std::size_t n = 0; n < clip.samples.size(); ++n) {
        double v = spec.tone_amplitude * std::sin(w * static_cast<double>(n) + phase);
        if (spec.noise_amplitude > 0) v += rng.uniform(-spec.noise_amplitude, spec.noise_amplitude);
        clip.samples[n] = std::clamp(v, -1.0, 1.0);
      }
      char id[64];
      std::snprintf(id, sizeof id, "synth:%s/%04d", clip.label->c_str(), k);
      index.entries.push_back({id, *clip.label, std::move(clip)});
    }
  }
  return index;
}

}  // namespace kws
