#include "faircl/features.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "faircl/error.hpp"
#include "faircl/rng.hpp"

namespace faircl::features {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

namespace {

// n_mels + 2 equally spaced mel points from 0 Hz to Nyquist, in Hz.
std::vector<double> mel_edges(std::size_t n_mels, double sample_rate) {
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  return edges;
}

// Dense [n_mels × n_bins] filterbank; triangles evaluated at bin frequencies.
std::vector<double> filterbank(std::size_t n_mels, std::size_t n_bins, std::size_t n_fft, double sample_rate) {
  const auto edges = mel_edges(n_mels, sample_rate);
  std::vector<double> fb(n_mels * n_bins, 0.0);
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
      double w = 0.0;
      if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
      fb[m * n_bins + k] = w;
    }
  }
  return fb;
}

}  // namespace

std::vector<double> mel_band_centers(std::size_t n_mels, double sample_rate) {
  auto edges = mel_edges(n_mels, sample_rate);
  return {edges.begin() + 1, edges.end() - 1};
}

std::size_t frame_count(std::size_t n_samples, std::size_t frame_len, std::size_t hop) {
  if (n_samples < frame_len) return 0;
  return 1 + (n_samples - frame_len) / hop;
}

MelSpectrogram mel_spectrogram(std::span<const double> waveform, const MelConfig& cfg) {
  if (cfg.n_mels == 0) throw ConfigError("mel_spectrogram: n_mels must be >= 1");
  if (cfg.frame_len == 0 || cfg.hop == 0) throw ConfigError("mel_spectrogram: frame_len and hop must be >= 1");
  if (waveform.size() < cfg.frame_len) {
    throw ConfigError("mel_spectrogram: waveform of " + std::to_string(waveform.size()) +
                      " samples is shorter than one frame (" + std::to_string(cfg.frame_len) + ")");
  }
  const std::size_t n_fft = cfg.frame_len;
  const std::size_t n_bins = n_fft / 2 + 1;
  const std::size_t frames = frame_count(waveform.size(), cfg.frame_len, cfg.hop);

  std::vector<double> window(n_fft);
  for (std::size_t i = 0; i < n_fft; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n_fft));
  }
  // Twiddle table: cos/sin of 2*pi*j/n_fft, indexed by (k*n) mod n_fft.
  std::vector<double> cos_tab(n_fft), sin_tab(n_fft);
  for (std::size_t j = 0; j < n_fft; ++j) {
    const double ang = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n_fft);
    cos_tab[j] = std::cos(ang);
    sin_tab[j] = std::sin(ang);
  }
  const auto fb = filterbank(cfg.n_mels, n_bins, n_fft, cfg.sample_rate);

  MelSpectrogram spec{frames, cfg.n_mels, std::vector<double>(frames * cfg.n_mels)};
  std::vector<double> frame(n_fft), mag(n_bins);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < n_fft; ++i) frame[i] = waveform[t * cfg.hop + i] * window[i];
    for (std::size_t k = 0; k < n_bins; ++k) {
      double re = 0.0, im = 0.0;
      std::size_t phase = 0;
      for (std::size_t n = 0; n < n_fft; ++n) {
        re += frame[n] * cos_tab[phase];
        im -= frame[n] * sin_tab[phase];
        phase += k;
        if (phase >= n_fft) phase -= n_fft;
      }
      mag[k] = std::sqrt(re * re + im * im);
    }
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < n_bins; ++k) e += fb[m * n_bins + k] * mag[k];
      spec.at(t, m) = std::log(std::max(e, kLogFloor));
    }
  }
  return spec;
}

void normalize_utterance(MelSpectrogram& spec) {
  if (spec.values.empty()) return;
  const double n = static_cast<double>(spec.values.size());
  double mu = 0.0;
  for (double v : spec.values) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : spec.values) var += (v - mu) * (v - mu);
  var /= n;
  const double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
  for (double& v : spec.values) v = (v - mu) * inv;
}

void validate_policy(const AugmentPolicy& policy, std::size_t frames, std::size_t bins) {
  if (policy.n_time_masks > 0 && policy.max_time_mask_width >= frames) {
    throw ConfigError("augment: max_time_mask_width " + std::to_string(policy.max_time_mask_width) +
                      " must be < frame count " + std::to_string(frames));
  }
  if (policy.n_freq_masks > 0 && policy.max_freq_mask_width >= bins) {
    throw ConfigError("augment: max_freq_mask_width " + std::to_string(policy.max_freq_mask_width) +
                      " must be < bin count " + std::to_string(bins));
  }
}

MelSpectrogram spec_augment(const MelSpectrogram& spec, const AugmentPolicy& policy, Rng& rng) {
  validate_policy(policy, spec.frames, spec.bins);
  MelSpectrogram out = spec;
  for (std::size_t i = 0; i < policy.n_time_masks; ++i) {
    const auto width = static_cast<std::size_t>(rng.index(policy.max_time_mask_width + 1));
    const auto start = static_cast<std::size_t>(rng.index(spec.frames - width + 1));
    for (std::size_t t = start; t < start + width; ++t) {
      for (std::size_t m = 0; m < spec.bins; ++m) out.at(t, m) = policy.mask_value;
    }
  }
  for (std::size_t i = 0; i < policy.n_freq_masks; ++i) {
    const auto width = static_cast<std::size_t>(rng.index(policy.max_freq_mask_width + 1));
    const auto start = static_cast<std::size_t>(rng.index(spec.bins - width + 1));
    for (std::size_t t = 0; t < spec.frames; ++t) {
      for (std::size_t m = start; m < start + width; ++m) out.at(t, m) = policy.mask_value;
    }
  }
  return out;
}

}  // namespace faircl::features
