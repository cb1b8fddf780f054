#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "faircl/cli.hpp"

namespace faircl::testing {

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

inline CliResult run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  CliResult r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Small enough that a full pretrain/finetune/evaluate pass takes well under
// a second.
inline const char* kTinyConfig = R"(# tiny end-to-end run
seed = 5
corpus.n_utterances = 48
corpus.n_mels = 8
corpus.vocab_size = 5
augment.max_time_mask_width = 3
augment.max_freq_mask_width = 2
model.n_blocks = 1
model.model_dim = 8
model.ff_dim = 12
model.conv_kernel = 3
model.proj_hidden = 8
model.proj_dim = 4
pretrain.epochs = 2
pretrain.batch_size = 8
pretrain.learning_rate = 0.003
finetune.epochs = 3
finetune.batch_size = 8
finetune.learning_rate = 0.003
eval.test_fraction = 0.25
)";

inline std::filesystem::path write_tiny_config(const std::filesystem::path& dir) {
  const auto p = dir / "tiny.conf";
  std::ofstream(p) << kTinyConfig;
  return p;
}

}  // namespace faircl::testing
