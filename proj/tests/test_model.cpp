#include <doctest.h>

#include <cmath>
#include <fstream>

#include "faircl/data.hpp"
#include "faircl/error.hpp"
#include "faircl/model.hpp"
#include "faircl/rng.hpp"
#include "tempdir.hpp"

using namespace faircl;
using namespace faircl::model;

namespace {

ModelConfig tiny_model(bool attention = true) {
  ModelConfig c;
  c.encoder.input_dim = 6;
  c.encoder.model_dim = 8;
  c.encoder.ff_dim = 12;
  c.encoder.n_blocks = 2;
  c.encoder.conv_kernel = 3;
  c.encoder.use_attention = attention;
  c.head.proj_hidden = 8;
  c.head.proj_dim = 4;
  c.head.vocab_size = 5;
  return c;
}

features::MelSpectrogram random_spec(Rng& rng, std::size_t frames, std::size_t bins) {
  features::MelSpectrogram s{frames, bins, std::vector<double>(frames * bins)};
  for (double& v : s.values) v = rng.normal();
  return s;
}

std::vector<double> row(const ag::Tensor& t, std::size_t r) {
  const std::size_t w = t.size() / t.dim(0);
  return {t.values().begin() + static_cast<std::ptrdiff_t>(r * w), t.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * w)};
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("pooled features ignore padding and batch neighbours") {
  for (bool attention : {true, false}) {
    CAPTURE(attention);
    auto cfg = tiny_model(attention);
    auto params = init_params(cfg, 3);
    Rng rng(8);
    auto a = random_spec(rng, 7, 6), b = random_spec(rng, 13, 6), c = random_spec(rng, 4, 6);
    ag::NoGradGuard ng;
    auto alone = mean_pool(encode(pad_batch({&a}), params, cfg.encoder));
    auto batch = mean_pool(encode(pad_batch({&b, &a, &c}), params, cfg.encoder));
    auto perm = mean_pool(encode(pad_batch({&c, &b, &a}), params, cfg.encoder));
    CHECK(max_diff(row(alone, 0), row(batch, 1)) < 1e-12);
    CHECK(max_diff(row(batch, 1), row(perm, 2)) < 1e-12);
    CHECK(max_diff(row(batch, 0), row(perm, 1)) < 1e-12);

    auto logits_alone = decode_logits(encode(pad_batch({&a}), params, cfg.encoder), params, cfg.head);
    auto enc = encode(pad_batch({&b, &a}), params, cfg.encoder);
    auto logits = decode_logits(enc, params, cfg.head);
    const std::size_t t_a = cfg.encoder.output_frames(7), t_max = cfg.encoder.output_frames(13), v = 5;
    CHECK(enc.lengths[1] == t_a);
    for (std::size_t t = 0; t < t_a; ++t)
      for (std::size_t k = 0; k < v; ++k)
        CHECK(std::abs(logits[(t_max + t) * v + k] - logits_alone[t * v + k]) < 1e-12);
    // padded frames of h are exactly zero
    const std::size_t d = cfg.encoder.model_dim;
    for (std::size_t t = t_a; t < t_max; ++t)
      for (std::size_t k = 0; k < d; ++k) CHECK(enc.h[(t_max + t) * d + k] == 0.0);
  }
}

TEST_CASE("heads produce the documented shapes and normalization") {
  auto cfg = tiny_model();
  auto params = init_params(cfg, 1);
  Rng rng(2);
  auto a = random_spec(rng, 9, 6), b = random_spec(rng, 5, 6);
  auto enc = encode(pad_batch({&a, &b}), params, cfg.encoder);
  CHECK(enc.h.shape() == ag::Shape{2, 5, 8});
  auto z = project(mean_pool(enc), params, cfg.head);
  CHECK(z.shape() == ag::Shape{2, 4});
  for (std::size_t r = 0; r < 2; ++r) {
    double n = 0.0;
    for (double x : row(z, r)) n += x * x;
    CHECK(n == doctest::Approx(1.0).epsilon(1e-12));
  }
  auto lp = decode_logits(enc, params, cfg.head);
  CHECK(lp.shape() == ag::Shape{2, 5, 5});
  for (std::size_t i = 0; i < 10; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 5; ++k) s += std::exp(lp[i * 5 + k]);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(cfg.encoder.output_frames(9) == 5);
  CHECK(cfg.encoder.output_frames(1) == 1);
}

TEST_CASE("parameter initialization and grouping") {
  auto cfg = tiny_model();
  auto p1 = init_params(cfg, 5), p2 = init_params(cfg, 5), p3 = init_params(cfg, 6);
  bool differs = false;
  for (const auto& [path, t] : p1.tensors) {
    CHECK(std::vector<double>(t.values().begin(), t.values().end()) ==
          std::vector<double>(p2.at(path).values().begin(), p2.at(path).values().end()));
    differs |= max_diff({t.values().begin(), t.values().end()}, {p3.at(path).values().begin(), p3.at(path).values().end()}) > 0;
    CHECK(is_encoder_param(path) + is_decoder_param(path) + (path.rfind("proj", 0) == 0) == 1);
  }
  CHECK(differs);
  CHECK(p1.contains("proj.l1.w"));
  CHECK_FALSE(p1.contains("proj_rev.l1.w"));
  CHECK(p1.contains("dec.lstm.wx"));

  cfg.head.independent_heads = true;
  auto p4 = init_params(cfg, 5);
  CHECK(p4.contains("proj_rev.l1.w"));
  CHECK_THROWS_AS(p1.at("missing.path"), ConfigError);
}

TEST_CASE("checkpoints round trip and reject a mismatched architecture") {
  testing::TempDir dir("model_ckpt");
  auto cfg = tiny_model();
  auto params = init_params(cfg, 9);
  save_checkpoint(dir / "m.ckpt", params, cfg);
  std::uint64_t digest = 0;
  auto back = load_checkpoint(dir / "m.ckpt", &cfg, &digest);
  CHECK(digest == cfg.digest());
  REQUIRE(back.tensors.size() == params.tensors.size());
  for (const auto& [path, t] : params.tensors) {
    CHECK(back.at(path).shape() == t.shape());
    CHECK(max_diff({t.values().begin(), t.values().end()},
                   {back.at(path).values().begin(), back.at(path).values().end()}) == 0.0);
  }

  auto other = cfg;
  other.encoder.model_dim = 16;
  CHECK(other.digest() != cfg.digest());
  CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", &other), ConfigError);
  CHECK_NOTHROW(load_checkpoint(dir / "m.ckpt", nullptr));

  std::ofstream(dir / "junk.ckpt", std::ios::binary) << "NOPE";
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt", nullptr), ConfigError);
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt", nullptr), ConfigError);
}

TEST_CASE("invalid architectures are rejected") {
  auto cfg = tiny_model();
  cfg.encoder.conv_kernel = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_model();
  cfg.encoder.subsample_factor = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_model();
  cfg.head.vocab_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
