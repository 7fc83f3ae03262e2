#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "kws/audio_io.hpp"
#include "kws/error.hpp"
#include "kws/matrix.hpp"

namespace kws::dsp {

enum class Window { hamming, rectangular };
enum class FeatureKind { mfcc, log_mel };

struct DspConfig {
  int sample_rate = 16000;
  int frame_len = 400;  // 25 ms
  int hop_len = 160;    // 10 ms
  int n_fft = 512;
  double pre_emphasis_alpha = 0.97;
  int n_mel_filters = 40;
  int n_mfcc = 20;
  double fmin = 20.0;
  double fmax = 8000.0;
  double log_floor = 1e-10;
  Window window = Window::hamming;
  FeatureKind kind = FeatureKind::log_mel;

  bool operator==(const DspConfig&) const = default;
};

inline bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

inline void validate(const DspConfig& c) {
  if (c.sample_rate <= 0) throw DspError("sample_rate must be positive");
  if (c.frame_len <= 0 || c.hop_len <= 0) throw DspError("frame_len and hop_len must be positive");
  if (c.hop_len > c.frame_len) throw DspError("hop_len must not exceed frame_len");
  if (!is_power_of_two(c.n_fft) || c.n_fft < c.frame_len) {
    throw DspError("n_fft must be a power of two >= frame_len");
  }
  if (!(c.pre_emphasis_alpha >= 0.0 && c.pre_emphasis_alpha < 1.0)) {
    throw DspError("pre_emphasis_alpha must lie in [0, 1)");
  }
  if (c.n_mel_filters < 1) throw DspError("n_mel_filters must be positive");
  if (c.n_mfcc < 1 || c.n_mfcc > c.n_mel_filters) throw DspError("n_mfcc must lie in [1, n_mel_filters]");
  if (!(c.fmin >= 0.0 && c.fmin < c.fmax)) throw DspError("need 0 <= fmin < fmax");
  if (c.fmax > c.sample_rate / 2.0) throw DspError("fmax must not exceed sample_rate/2");
  if (!(c.log_floor > 0.0)) throw DspError("log_floor must be positive");
}

/// Frames produced for a signal of `signal_len` samples.
inline std::size_t frame_count(std::size_t signal_len, int frame_len, int hop_len) {
  if (signal_len < static_cast<std::size_t>(frame_len)) return 0;
  return 1 + (signal_len - static_cast<std::size_t>(frame_len)) / static_cast<std::size_t>(hop_len);
}

/// Width of the features the pipeline produces for `c`.
inline int feature_dim(const DspConfig& c) { return c.kind == FeatureKind::mfcc ? c.n_mfcc : c.n_mel_filters; }

// ---------------------------------------------------------------------------
// Step 1: pre-emphasis, framing, windowing

inline std::vector<double> pre_emphasis(std::span<const double> x, double alpha) {
  std::vector<double> y(x.size());
  if (x.empty()) return y;
  y[0] = x[0];
  for (std::size_t n = 1; n < x.size(); ++n) y[n] = x[n] - alpha * x[n - 1];
  return y;
}

/// Frames as rows. Samples past the last full frame are dropped.
inline Matrix frame_signal(std::span<const double> signal, int frame_len, int hop_len) {
  if (frame_len <= 0 || hop_len <= 0) throw DspError("frame_len and hop_len must be positive");
  if (signal.size() < static_cast<std::size_t>(frame_len)) {
    throw DspError("signal of " + std::to_string(signal.size()) + " samples is shorter than one frame (" +
                   std::to_string(frame_len) + ")");
  }
  const std::size_t n_frames = frame_count(signal.size(), frame_len, hop_len);
  Matrix frames(n_frames, static_cast<std::size_t>(frame_len));
  for (std::size_t t = 0; t < n_frames; ++t) {
    const auto start = signal.begin() + static_cast<std::ptrdiff_t>(t * static_cast<std::size_t>(hop_len));
    std::copy(start, start + frame_len, frames.row(t).begin());
  }
  return frames;
}

inline std::vector<double> window_coefficients(Window w, std::size_t n) {
  std::vector<double> coeffs(n, 1.0);
  if (w == Window::hamming && n > 1) {
    for (std::size_t i = 0; i < n; ++i) {
      coeffs[i] = 0.54 - 0.46 * std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n - 1));
    }
  }
  return coeffs;
}

inline Matrix apply_window(Matrix frames, Window w) {
  if (w == Window::rectangular) return frames;
  const auto coeffs = window_coefficients(w, frames.cols);
  for (std::size_t t = 0; t < frames.rows; ++t) {
    auto row = frames.row(t);
    for (std::size_t i = 0; i < row.size(); ++i) row[i] *= coeffs[i];
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Step 2: Fourier transform

/// In-place iterative radix-2 FFT. Size must be a power of two.
inline void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw DspError("fft size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::size_t half = len / 2;
    for (std::size_t k = 0; k < half; ++k) {
      // Twiddles computed directly rather than by recurrence keeps the error flat in n.
      const std::complex<double> w(std::cos(ang * static_cast<double>(k)), std::sin(ang * static_cast<double>(k)));
      for (std::size_t i = 0; i < n; i += len) {
        const auto u = a[i + k];
        const auto v = a[i + k + half] * w;
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
}

/// |X(k)|^2 for k = 0..n_fft/2 of each zero-padded frame.
inline Matrix power_spectrum(const Matrix& frames, int n_fft) {
  if (!is_power_of_two(n_fft) || static_cast<std::size_t>(n_fft) < frames.cols) {
    throw DspError("n_fft must be a power of two >= frame length");
  }
  const std::size_t bins = static_cast<std::size_t>(n_fft) / 2 + 1;
  Matrix spectra(frames.rows, bins);
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(n_fft));
  for (std::size_t t = 0; t < frames.rows; ++t) {
    std::fill(buf.begin(), buf.end(), std::complex<double>{});
    const auto row = frames.row(t);
    std::copy(row.begin(), row.end(), buf.begin());
    fft(buf);
    for (std::size_t k = 0; k < bins; ++k) spectra(t, k) = std::norm(buf[k]);
  }
  return spectra;
}

// ---------------------------------------------------------------------------
// Step 3: mel filterbank

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct MelFilterBank {
  Matrix weights;                       // M x (n_fft/2 + 1); row m-1 holds H_m
  std::vector<std::size_t> center_bins;  // f(0) .. f(M+1)

  std::size_t n_filters() const { return weights.rows; }
  std::size_t n_bins() const { return weights.cols; }
};

/// Triangular filters with centers equally spaced in mel between fmin and fmax.
///
/// H_m(k) rises linearly on [f(m-1), f(m)] and falls on [f(m), f(m+1)]. The
/// textbook statement of this filter is sometimes printed with the rising
/// interval repeated for the falling edge; the falling edge here uses
/// f(m) <= k <= f(m+1), which is what makes adjacent filters sum to one.
inline MelFilterBank build_mel_filterbank(const DspConfig& config) {
  validate(config);
  const std::size_t m_count = static_cast<std::size_t>(config.n_mel_filters);
  const std::size_t bins = static_cast<std::size_t>(config.n_fft) / 2 + 1;
  const double mel_lo = hz_to_mel(config.fmin);
  const double mel_hi = hz_to_mel(config.fmax);

  MelFilterBank bank;
  bank.center_bins.resize(m_count + 2);
  for (std::size_t i = 0; i < m_count + 2; ++i) {
    const double mel = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(m_count + 1);
    const double hz = mel_to_hz(mel);
    auto bin = static_cast<std::size_t>(std::floor((config.n_fft + 1) * hz / config.sample_rate));
    bank.center_bins[i] = std::min(bin, bins - 1);
  }
  for (std::size_t i = 0; i + 1 < bank.center_bins.size(); ++i) {
    if (bank.center_bins[i] >= bank.center_bins[i + 1]) {
      throw DspError("mel filter centers " + std::to_string(i) + " and " + std::to_string(i + 1) +
                     " collapse onto FFT bin " + std::to_string(bank.center_bins[i]) +
                     "; use a larger n_fft or fewer mel filters");
    }
  }

  bank.weights = Matrix(m_count, bins);
  for (std::size_t m = 1; m <= m_count; ++m) {
    const double lo = static_cast<double>(bank.center_bins[m - 1]);
    const double mid = static_cast<double>(bank.center_bins[m]);
    const double hi = static_cast<double>(bank.center_bins[m + 1]);
    for (std::size_t k = bank.center_bins[m - 1]; k <= bank.center_bins[m + 1]; ++k) {
      const double kk = static_cast<double>(k);
      double h = 0.0;
      if (kk <= mid) {
        h = (kk - lo) / (mid - lo);
      } else {
        h = (hi - kk) / (hi - mid);
      }
      bank.weights(m - 1, k) = h;
    }
  }
  return bank;
}

/// MELSPEC[t][m] = sum_k H_m(k) |X_t(k)|^2.
inline Matrix mel_energies(const Matrix& spectra, const MelFilterBank& bank) {
  if (spectra.cols != bank.n_bins()) {
    throw DspError("spectra have " + std::to_string(spectra.cols) + " bins, filterbank expects " +
                   std::to_string(bank.n_bins()));
  }
  Matrix out(spectra.rows, bank.n_filters());
  for (std::size_t t = 0; t < spectra.rows; ++t) {
    const auto s = spectra.row(t);
    for (std::size_t m = 0; m < bank.n_filters(); ++m) {
      const auto w = bank.weights.row(m);
      double acc = 0.0;
      for (std::size_t k = 0; k < s.size(); ++k) acc += w[k] * s[k];
      out(t, m) = acc;
    }
  }
  return out;
}

inline Matrix log_compress(Matrix energies, double log_floor) {
  for (double& e : energies.data) e = std::log(std::max(e, log_floor));
  return energies;
}

// ---------------------------------------------------------------------------
// Step 4: DCT

/// Orthonormal DCT-II along each row, keeping the first `n_out` coefficients.
inline Matrix dct_ii(const Matrix& input, std::size_t n_out) {
  const std::size_t m_count = input.cols;
  if (n_out > m_count) throw DspError("cannot keep more DCT coefficients than inputs");
  Matrix basis(n_out, m_count);
  for (std::size_t c = 0; c < n_out; ++c) {
    const double scale = std::sqrt((c == 0 ? 1.0 : 2.0) / static_cast<double>(m_count));
    for (std::size_t m = 0; m < m_count; ++m) {
      basis(c, m) = scale * std::cos(M_PI * static_cast<double>(c) * (2.0 * static_cast<double>(m) + 1.0) /
                                     (2.0 * static_cast<double>(m_count)));
    }
  }
  Matrix out(input.rows, n_out);
  for (std::size_t t = 0; t < input.rows; ++t) {
    const auto x = input.row(t);
    for (std::size_t c = 0; c < n_out; ++c) {
      const auto b = basis.row(c);
      double acc = 0.0;
      for (std::size_t m = 0; m < m_count; ++m) acc += b[m] * x[m];
      out(t, c) = acc;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

struct FeatureMatrix {
  Matrix values;  // frames x coefficients
  FeatureKind kind = FeatureKind::log_mel;

  std::size_t frames() const { return values.rows; }
  std::size_t dim() const { return values.cols; }
};

/// Pipeline with a prebuilt filterbank, for callers featurizing many clips.
inline FeatureMatrix mfcc_pipeline(const AudioClip& clip, const DspConfig& config, const MelFilterBank& bank) {
  if (clip.sample_rate != config.sample_rate) {
    throw DspError("clip sample rate " + std::to_string(clip.sample_rate) + " does not match config " +
                   std::to_string(config.sample_rate));
  }
  const auto emphasized = pre_emphasis(clip.samples, config.pre_emphasis_alpha);
  auto frames = apply_window(frame_signal(emphasized, config.frame_len, config.hop_len), config.window);
  auto logmel = log_compress(mel_energies(power_spectrum(frames, config.n_fft), bank), config.log_floor);
  if (config.kind == FeatureKind::log_mel) return {std::move(logmel), FeatureKind::log_mel};
  return {dct_ii(logmel, static_cast<std::size_t>(config.n_mfcc)), FeatureKind::mfcc};
}

inline FeatureMatrix mfcc_pipeline(const AudioClip& clip, const DspConfig& config) {
  return mfcc_pipeline(clip, config, build_mel_filterbank(config));
}

inline std::string to_string(FeatureKind k) { return k == FeatureKind::mfcc ? "mfcc" : "log_mel"; }
inline std::string to_string(Window w) { return w == Window::hamming ? "hamming" : "rectangular"; }

}  // namespace kws::dsp
