#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "faircl/error.hpp"
#include "faircl/features.hpp"
#include "faircl/rng.hpp"

using namespace faircl;
using namespace faircl::features;

namespace {

std::vector<double> sine(double hz, std::size_t n, double sr = 16000.0) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / sr);
  return w;
}

MelSpectrogram ramp(std::size_t frames, std::size_t bins) {
  MelSpectrogram s{frames, bins, std::vector<double>(frames * bins)};
  for (std::size_t i = 0; i < s.values.size(); ++i) s.values[i] = 1.0 + static_cast<double>(i);
  return s;
}

}  // namespace

TEST_CASE("mel scale round trip and HTK anchor") {
  CHECK(hz_to_mel(700.0) == doctest::Approx(2595.0 * std::log10(2.0)));
  for (double hz : {0.0, 100.0, 1000.0, 7999.0}) CHECK(mel_to_hz(hz_to_mel(hz)) == doctest::Approx(hz).epsilon(1e-12));
  auto c = mel_band_centers(80, 16000.0);
  REQUIRE(c.size() == 80);
  for (std::size_t i = 1; i < c.size(); ++i) CHECK(c[i] > c[i - 1]);
  CHECK(c.back() < 8000.0);
}

TEST_CASE("one second at 16 kHz gives 98 frames") {
  CHECK(frame_count(16000, 400, 160) == 98);
  CHECK(frame_count(399, 400, 160) == 0);
  CHECK(frame_count(400, 400, 160) == 1);
  auto spec = mel_spectrogram(sine(440.0, 16000));
  CHECK(spec.frames == 98);
  CHECK(spec.bins == 80);
}

TEST_CASE("silence hits the log floor everywhere") {
  auto spec = mel_spectrogram(std::vector<double>(4000, 0.0));
  for (double v : spec.values) CHECK(v == std::log(kLogFloor));
}

TEST_CASE("a tone at a band centre peaks in that band") {
  auto centers = mel_band_centers(80, 16000.0);
  for (std::size_t band : {10u, 30u, 55u, 70u}) {
    auto spec = mel_spectrogram(sine(centers[band], 8000));
    for (std::size_t t = 0; t < spec.frames; ++t) {
      std::size_t best = 0;
      for (std::size_t m = 1; m < spec.bins; ++m)
        if (spec.at(t, m) > spec.at(t, best)) best = m;
      CAPTURE(band);
      CHECK(best == band);
    }
  }
}

TEST_CASE("per-utterance normalization") {
  auto s = ramp(7, 5);
  normalize_utterance(s);
  double mean = 0.0, var = 0.0;
  for (double v : s.values) mean += v;
  mean /= static_cast<double>(s.values.size());
  for (double v : s.values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(s.values.size());
  CHECK(std::abs(mean) < 1e-12);
  CHECK(var == doctest::Approx(1.0).epsilon(1e-12));

  MelSpectrogram c{3, 2, std::vector<double>(6, 4.2)};
  normalize_utterance(c);
  for (double v : c.values) CHECK(v == 0.0);
}

TEST_CASE("spec_augment masks whole bands and is seed-determined") {
  AugmentPolicy p;
  p.n_time_masks = 2;
  p.max_time_mask_width = 3;
  p.n_freq_masks = 1;
  p.max_freq_mask_width = 2;
  p.mask_value = -99.0;
  const auto src = ramp(20, 10);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng a(seed), b(seed);
    auto x = spec_augment(src, p, a);
    auto y = spec_augment(src, p, b);
    CHECK(x == y);
    REQUIRE(x.frames == 20);
    REQUIRE(x.bins == 10);
    // Every masked cell lies in a fully masked row or a fully masked column.
    std::set<std::size_t> rows, cols;
    for (std::size_t t = 0; t < 20; ++t) {
      bool all = true;
      for (std::size_t m = 0; m < 10; ++m) all &= x.at(t, m) == -99.0;
      if (all) rows.insert(t);
    }
    for (std::size_t m = 0; m < 10; ++m) {
      bool all = true;
      for (std::size_t t = 0; t < 20; ++t) all &= x.at(t, m) == -99.0;
      if (all) cols.insert(m);
    }
    CHECK(rows.size() <= 6);
    CHECK(cols.size() <= 2);
    for (std::size_t t = 0; t < 20; ++t)
      for (std::size_t m = 0; m < 10; ++m) {
        if (rows.contains(t) || cols.contains(m))
          CHECK(x.at(t, m) == -99.0);
        else
          CHECK(x.at(t, m) == src.at(t, m));
      }
  }
}

TEST_CASE("augment policy must fit the spectrogram") {
  AugmentPolicy p;  // widths 10 and 8
  CHECK_NOTHROW(validate_policy(p, 11, 9));
  CHECK_THROWS_AS(validate_policy(p, 10, 9), ConfigError);
  CHECK_THROWS_AS(validate_policy(p, 11, 8), ConfigError);
  Rng r(1);
  CHECK_THROWS_AS(spec_augment(ramp(5, 20), p, r), ConfigError);
}
