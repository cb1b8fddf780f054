#pragma once

// Flat key = value experiment configuration. Keys are grouped by prefix
// (corpus., augment., model., pretrain., finetune., eval.); every key is
// also a command-line flag of the same name.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "faircl/data.hpp"
#include "faircl/features.hpp"
#include "faircl/model.hpp"
#include "faircl/train.hpp"

namespace faircl::config {

struct ExperimentConfig {
  std::uint64_t seed = 1;
  data::SyntheticCorpusConfig corpus;
  features::MelConfig mel;
  std::size_t max_frames = 0;
  // input_dim / vocab_size of 0 are resolved from the corpus.
  model::ModelConfig model = default_model();
  train::TrainConfig pretrain = default_stage(train::Stage::Pretrain);
  train::TrainConfig finetune = default_stage(train::Stage::Finetune);
  std::vector<std::string> eval_attributes;   // empty: every corpus attribute
  std::vector<std::string> split_attributes;  // empty: every corpus attribute
  double test_fraction = 0.2;
  std::string probe_attribute;  // empty: first eval attribute

  static model::ModelConfig default_model();
  static train::TrainConfig default_stage(train::Stage stage);

  // Derived per-purpose seeds so one `seed` governs every random draw.
  void apply_seed();
  void validate() const;
};

struct KeyInfo {
  std::string name;
  std::string doc;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

const std::vector<KeyInfo>& keys();
const KeyInfo* find_key(const std::string& name);

// Sets one key; ConfigError names the key on unknown names or bad values.
void set_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);

// Applies a config file on top of cfg. Unknown keys fail with file:line.
void load_file(ExperimentConfig& cfg, const std::filesystem::path& path);

// Every key = value, in registry order.
std::string dump(const ExperimentConfig& cfg);

// "name=cat[:weight],cat...; name=..." <-> schema
std::vector<data::AttributeSpec> parse_schema(const std::string& text);
std::string format_schema(const std::vector<data::AttributeSpec>& schema);

}  // namespace faircl::config
