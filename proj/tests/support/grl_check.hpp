#pragma once

#include <cmath>
#include <cstring>

#include "faircl/data.hpp"
#include "faircl/losses.hpp"
#include "faircl/model.hpp"
#include "faircl/rng.hpp"

namespace faircl::testing {

struct GrlComparison {
  double max_abs_diff = 0.0;  // encoder grads: reversed vs -1 * plain
  bool forward_bitwise = true;
  std::size_t compared = 0;
};

// Tiny encoder + shared head; FSC on g(grad_reverse(pooled, 1)) against FSC
// on g(pooled). Only encoder parameters are compared: the head sits after
// the reversal and keeps its ordinary gradient.
inline GrlComparison compare_reversed_fsc(std::uint64_t seed) {
  model::ModelConfig cfg;
  cfg.encoder.input_dim = 5;
  cfg.encoder.model_dim = 8;
  cfg.encoder.ff_dim = 8;
  cfg.encoder.n_blocks = 1;
  cfg.encoder.conv_kernel = 3;
  cfg.head.proj_hidden = 6;
  cfg.head.proj_dim = 4;

  Rng rng(seed);
  std::vector<features::MelSpectrogram> specs;
  std::vector<std::size_t> pair_of;
  std::vector<std::string> groups;
  const std::size_t n = 3;
  for (std::size_t i = 0; i < 2 * n; ++i) {
    const std::size_t frames = 3 + rng.index(5);
    features::MelSpectrogram s{frames, 5, std::vector<double>(frames * 5)};
    for (double& v : s.values) v = rng.normal();
    specs.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < n; ++i) {
    pair_of.push_back(i + n);
    groups.push_back(i % 2 ? "a" : "b");
  }
  for (std::size_t i = 0; i < n; ++i) {
    pair_of.push_back(i);
    groups.push_back(groups[i]);
  }
  std::vector<const features::MelSpectrogram*> ptrs;
  for (const auto& s : specs) ptrs.push_back(&s);
  const auto batch = model::pad_batch(ptrs);

  auto run = [&](bool reverse, ag::Tensor* pooled_out) {
    auto params = model::init_params(cfg, seed);
    auto pooled = model::mean_pool(model::encode(batch, params, cfg.encoder));
    auto in = reverse ? ag::grad_reverse(pooled, 1.0) : pooled;
    *pooled_out = in;
    auto loss = losses::fsc({model::project(in, params, cfg.head), pair_of, groups, 0.2});
    ag::backward(loss);
    return params;
  };
  ag::Tensor plain_pooled, rev_pooled;
  auto plain = run(false, &plain_pooled);
  auto rev = run(true, &rev_pooled);

  GrlComparison out;
  out.forward_bitwise = std::memcmp(plain_pooled.values().data(), rev_pooled.values().data(),
                                    plain_pooled.size() * sizeof(double)) == 0;
  for (const auto& [path, t] : plain.tensors) {
    if (!model::is_encoder_param(path) || !t.has_grad()) continue;
    const auto& g_rev = rev.at(path).grad();
    for (std::size_t i = 0; i < t.size(); ++i) {
      out.max_abs_diff = std::max(out.max_abs_diff, std::abs(g_rev[i] + t.grad()[i]));
      ++out.compared;
    }
  }
  return out;
}

}  // namespace faircl::testing
