#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "faircl/features.hpp"

namespace faircl::data {

// Attribute name -> categorical value.
using Demographics = std::map<std::string, std::string>;

struct Utterance {
  std::string id;
  features::MelSpectrogram spec;
  std::vector<int> transcript;  // token ids in [1, vocab); 0 is the CTC blank
  Demographics demographics;

  bool operator==(const Utterance&) const = default;
};

using Corpus = std::vector<Utterance>;

// Selector value meaning "tuple of all attributes".
inline constexpr const char* kComposite = "composite";

// "a=x|b=y" over the given attribute names (all attributes when empty).
std::string composite_key(const Demographics& d, const std::vector<std::string>& attributes = {});
// Group label used for contrastive positives: a single attribute's value or
// the composite key when selector == kComposite.
std::string group_key(const Demographics& d, const std::string& selector);

struct AttributeSpec {
  std::string name;
  std::vector<std::string> categories;
  std::vector<double> weights;  // empty: uniform
};

struct SyntheticCorpusConfig {
  std::size_t n_utterances = 256;
  std::size_t vocab_size = 8;
  std::size_t min_tokens = 2;
  std::size_t max_tokens = 4;
  std::size_t frames_per_token = 6;
  std::size_t n_mels = 20;
  double group_strength = 5.0;  // L2 norm of the per-group additive signature
  double noise_std = 1.0;
  std::vector<AttributeSpec> schema = default_schema();
  std::uint64_t seed = 1;

  static std::vector<AttributeSpec> default_schema();
  void validate() const;
};

// Token templates and group signatures are drawn from the seed, so two
// corpora from the same config share them. Adjacent tokens never repeat.
Corpus generate_synthetic_corpus(const SyntheticCorpusConfig& cfg);

struct LoadOptions {
  features::MelConfig mel;
  // Utterances with more frames are dropped (0 = no cap).
  std::size_t max_frames = 0;
};

// One JSON object per line: id, features|audio (path relative to the
// manifest), transcript (space-separated ids), demographics (object).
Corpus load_manifest(const std::filesystem::path& path, const LoadOptions& options = {});
// Writes `<dir>/<id>.feat` for every utterance plus the manifest itself.
void write_manifest(const Corpus& corpus, const std::filesystem::path& path,
                    const std::string& feature_subdir = "features");

// u32 T, u32 M, then T*M little-endian float32, row-major by frame.
features::MelSpectrogram read_feature_file(const std::filesystem::path& path);
void write_feature_file(const std::filesystem::path& path, const features::MelSpectrogram& spec);
// Raw little-endian float32 samples (.f32) or 16-bit PCM mono WAV (.wav).
std::vector<double> read_waveform(const std::filesystem::path& path);

struct Split {
  Corpus train;
  Corpus test;
  std::vector<std::string> warnings;
};

// Per stratum (composite key over key_attributes), round(test_fraction * n)
// items go to test; strata with fewer than two items go wholly to train.
// Both halves keep corpus order.
Split stratified_split(const Corpus& corpus, double test_fraction, const std::vector<std::string>& key_attributes,
                       std::uint64_t seed);

struct ContrastiveBatch {
  std::vector<features::MelSpectrogram> samples;  // 2N: originals then views
  std::vector<std::size_t> pair_of;
  std::vector<std::string> group_key;
  std::vector<bool> is_augmented;

  std::size_t size() const { return samples.size(); }
};

// Seed used for the augmented view of original index i.
std::uint64_t view_seed(std::uint64_t batch_seed, std::size_t i);

// Layout: originals at [0, N), view of i at i + N.
ContrastiveBatch make_contrastive_batch(const std::vector<const Utterance*>& utterances,
                                        const std::string& fsc_attribute, const features::AugmentPolicy& policy,
                                        std::uint64_t seed);

}  // namespace faircl::data
