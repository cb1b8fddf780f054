#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "faircl/autograd.hpp"
#include "faircl/features.hpp"

namespace faircl::model {

// Desk-scale conformer-style encoder. Each block: half-step feedforward,
// optional single-head self-attention, depthwise time convolution with
// pointwise mixing, half-step feedforward, final layer norm.
struct EncoderConfig {
  std::size_t input_dim = 80;
  std::size_t n_blocks = 2;
  std::size_t model_dim = 64;
  std::size_t ff_dim = 128;
  std::size_t conv_kernel = 5;
  std::size_t subsample_factor = 2;
  bool use_attention = true;

  void validate() const;
  std::size_t output_frames(std::size_t frames) const {
    return (frames + subsample_factor - 1) / subsample_factor;
  }
};

struct HeadConfig {
  std::size_t proj_hidden = 64;
  std::size_t proj_dim = 32;
  bool normalize_projections = true;
  // Second projection head for the gradient-reversed branch.
  bool independent_heads = false;
  // Decoder vocabulary including blank; 0 = no decoder head.
  std::size_t vocab_size = 0;

  void validate() const;
};

struct ModelConfig {
  EncoderConfig encoder;
  HeadConfig head;

  void validate() const;
  // Canonical text of every architecture field; hashed into checkpoints.
  std::string canonical() const;
  std::uint64_t digest() const;
};

// Parameter path -> leaf tensor. Ordered so iteration is deterministic.
class ModelParams {
 public:
  std::map<std::string, ag::Tensor> tensors;

  const ag::Tensor& at(const std::string& path) const;
  bool contains(const std::string& path) const { return tensors.contains(path); }
  void zero_grad();
  bool all_finite() const;
  std::size_t count() const;
  ModelParams clone() const;
};

inline constexpr const char* kProjHead = "proj";
inline constexpr const char* kProjRevHead = "proj_rev";

// Weights uniform in +-1/sqrt(fan_in), biases zero, layer-norm gains one.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);
// Adds or replaces the decoder head only.
void init_decoder(ModelParams& params, const ModelConfig& cfg, std::uint64_t seed);

bool is_encoder_param(const std::string& path);
bool is_decoder_param(const std::string& path);

struct PaddedBatch {
  ag::Tensor x;  // [B, T_max, M], zeros past each length
  std::vector<std::size_t> lengths;
};

PaddedBatch pad_batch(const std::vector<const features::MelSpectrogram*>& specs);

struct Encoded {
  ag::Tensor h;     // [B, T', D] frame features; zero at padded frames
  ag::Tensor mask;  // [B, T', 1] constant 0/1
  std::vector<std::size_t> lengths;
};

Encoded encode(const PaddedBatch& batch, const ModelParams& params, const EncoderConfig& cfg);

// Masked mean over valid frames -> [B, D].
ag::Tensor mean_pool(const Encoded& enc);

// Two-layer MLP with ReLU; rows L2-normalized when cfg.normalize_projections.
ag::Tensor project(const ag::Tensor& pooled, const ModelParams& params, const HeadConfig& cfg,
                   const std::string& head = kProjHead);

// LSTM over valid frames, linear to the vocabulary, log-softmax:
// [B, T', V]. State is per sample; nothing crosses the batch axis.
ag::Tensor decode_logits(const Encoded& enc, const ModelParams& params, const HeadConfig& cfg);

inline constexpr std::uint32_t kCheckpointVersion = 1;

// "FCLK", u32 version, u64 config digest, u32 count, then per entry:
// u32 path length, path bytes, u32 rank, u64 dims, float64 payload. LE.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const ModelConfig& cfg);
// Throws ConfigError when the digest differs from `cfg`'s, unless cfg is null.
ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig* cfg,
                            std::uint64_t* digest_out = nullptr);

}  // namespace faircl::model
