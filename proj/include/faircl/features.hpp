#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace faircl {
class Rng;
}

namespace faircl::features {

// Log-mel energies, T frames × M bins, row-major by frame.
struct MelSpectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<double> values;

  double at(std::size_t t, std::size_t m) const { return values[t * bins + m]; }
  double& at(std::size_t t, std::size_t m) { return values[t * bins + m]; }
  bool operator==(const MelSpectrogram&) const = default;
};

struct AugmentPolicy {
  std::size_t max_time_mask_width = 10;
  std::size_t n_time_masks = 2;
  std::size_t max_freq_mask_width = 8;
  std::size_t n_freq_masks = 2;
  double mask_value = 0.0;
};

struct MelConfig {
  std::size_t n_mels = 80;
  std::size_t frame_len = 400;
  std::size_t hop = 160;
  double sample_rate = 16000.0;
};

inline constexpr double kLogFloor = 1e-10;

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Center frequencies (Hz) of the triangular filters.
std::vector<double> mel_band_centers(std::size_t n_mels, double sample_rate);

std::size_t frame_count(std::size_t n_samples, std::size_t frame_len, std::size_t hop);

// Hann-windowed frames, magnitude spectrum by direct DFT, HTK mel
// filterbank, natural log with kLogFloor clamp.
MelSpectrogram mel_spectrogram(std::span<const double> waveform, const MelConfig& cfg = {});

// Zero mean, unit variance over all entries of one utterance. A constant
// spectrogram maps to all zeros.
void normalize_utterance(MelSpectrogram& spec);

// Throws ConfigError if a mask width does not fit the spectrogram.
void validate_policy(const AugmentPolicy& policy, std::size_t frames, std::size_t bins);

MelSpectrogram spec_augment(const MelSpectrogram& spec, const AugmentPolicy& policy, Rng& rng);

}  // namespace faircl::features
