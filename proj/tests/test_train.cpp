#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <sstream>

#include "faircl/data.hpp"
#include "faircl/error.hpp"
#include "faircl/train.hpp"

using namespace faircl;
using namespace faircl::train;

namespace {

data::Corpus corpus(std::size_t n, std::uint64_t seed = 2) {
  data::SyntheticCorpusConfig c;
  c.n_utterances = n;
  c.n_mels = 8;
  c.vocab_size = 5;
  c.seed = seed;
  return data::generate_synthetic_corpus(c);
}

model::ModelConfig small_model() {
  model::ModelConfig m;
  m.encoder.input_dim = 8;
  m.encoder.model_dim = 12;
  m.encoder.ff_dim = 16;
  m.encoder.n_blocks = 1;
  m.encoder.conv_kernel = 3;
  m.head.proj_hidden = 12;
  m.head.proj_dim = 8;
  m.head.vocab_size = 5;
  return m;
}

TrainConfig pre_cfg(std::size_t epochs = 2) {
  TrainConfig c;
  c.stage = Stage::Pretrain;
  c.epochs = epochs;
  c.batch_size = 8;
  c.optim.lr = 3e-3;
  c.augment.max_time_mask_width = 3;
  c.augment.max_freq_mask_width = 2;
  c.seed = 11;
  return c;
}

TrainConfig fine_cfg(std::size_t epochs = 2) {
  TrainConfig c;
  c.stage = Stage::Finetune;
  c.epochs = epochs;
  c.batch_size = 8;
  c.optim.lr = 3e-3;
  c.seed = 12;
  return c;
}

std::vector<double> values(const ag::Tensor& t) { return {t.values().begin(), t.values().end()}; }

bool same_params(const model::ModelParams& a, const model::ModelParams& b,
                 const std::function<bool(const std::string&)>& which = {}) {
  for (const auto& [path, t] : a.tensors) {
    if (which && !which(path)) continue;
    if (!b.contains(path) || values(t) != values(b.at(path))) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("AdamW matches a hand-stepped update") {
  model::ModelParams p;
  p.tensors["w"] = ag::Tensor::from({3}, {0.5, -1.0, 2.0}, true);
  AdamWHyper h;
  h.lr = 0.1;
  h.weight_decay = 0.05;
  AdamWState s;
  const std::vector<std::vector<double>> grads = {{0.2, -0.4, 1.0}, {-0.1, 0.3, 0.0}, {0.5, 0.5, -2.0}};
  std::vector<double> w = {0.5, -1.0, 2.0}, m(3, 0.0), v(3, 0.0);
  for (std::size_t k = 0; k < grads.size(); ++k) {
    auto g = p.tensors["w"].mutable_grad();
    std::copy(grads[k].begin(), grads[k].end(), g.begin());
    adamw_step(p, s, h);
    const double t = static_cast<double>(k + 1);
    for (std::size_t i = 0; i < 3; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * grads[k][i];
      v[i] = 0.999 * v[i] + 0.001 * grads[k][i] * grads[k][i];
      const double mh = m[i] / (1.0 - std::pow(0.9, t)), vh = v[i] / (1.0 - std::pow(0.999, t));
      w[i] = w[i] - 0.1 * (mh / (std::sqrt(vh) + 1e-8)) - 0.1 * 0.05 * w[i];
      CHECK(p.at("w")[i] == doctest::Approx(w[i]).epsilon(1e-14));
    }
  }
  CHECK(s.step == 3);
}

TEST_CASE("AdamW with a zero gradient only decays") {
  model::ModelParams p;
  p.tensors["w"] = ag::Tensor::from({2}, {1.0, -3.0}, true);
  p.tensors["w"].mutable_grad();  // zeros
  AdamWState s;
  AdamWHyper h;
  h.lr = 0.01;
  h.weight_decay = 0.1;
  adamw_step(p, s, h);
  CHECK(p.at("w")[0] == doctest::Approx(1.0 * (1 - 0.001)).epsilon(1e-15));
  CHECK(p.at("w")[1] == doctest::Approx(-3.0 * (1 - 0.001)).epsilon(1e-15));
}

TEST_CASE("AdamW refuses non-finite gradients before touching weights") {
  model::ModelParams p;
  p.tensors["a"] = ag::Tensor::from({1}, {1.0}, true);
  p.tensors["b"] = ag::Tensor::from({1}, {2.0}, true);
  p.tensors["a"].mutable_grad()[0] = 1.0;
  p.tensors["b"].mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  AdamWState s;
  try {
    adamw_step(p, s, {});
    FAIL("expected RuntimeFailure");
  } catch (const RuntimeFailure& e) {
    CHECK(std::string(e.what()).find("'b'") != std::string::npos);
  }
  CHECK(p.at("a")[0] == 1.0);
  CHECK(s.step == 0);
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3);
  CHECK(cosine_lr(100, 100, 1e-3, 1e-5) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(cosine_lr(50, 100, 1e-3, 0.0) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(cosine_lr(25, 100, 1.0, 0.0) == doctest::Approx(0.5 * (1 + std::cos(std::numbers::pi / 4))).epsilon(1e-14));
  for (std::size_t s = 1; s <= 100; ++s) CHECK(cosine_lr(s, 100, 1.0, 0.1) <= cosine_lr(s - 1, 100, 1.0, 0.1));
}

TEST_CASE("global norm clipping") {
  model::ModelParams p;
  p.tensors["a"] = ag::Tensor::from({2}, {0.0, 0.0}, true);
  p.tensors["b"] = ag::Tensor::from({1}, {0.0}, true);
  auto ga = p.tensors["a"].mutable_grad();
  ga[0] = 3.0, ga[1] = 4.0;
  p.tensors["b"].mutable_grad()[0] = 12.0;
  CHECK(clip_grad_norm(p, 5.0) == doctest::Approx(13.0));
  CHECK(p.at("a").grad()[0] == doctest::Approx(3.0 * 5.0 / 13.0));
  CHECK(p.at("b").grad()[0] == doctest::Approx(12.0 * 5.0 / 13.0));
  CHECK(clip_grad_norm(p, 5.0) == doctest::Approx(5.0));
  CHECK(clip_grad_norm(p, 0.0) == doctest::Approx(5.0));
}

TEST_CASE("pretraining is deterministic and lambda zero equals the InfoNCE loop") {
  const auto c = corpus(24);
  const auto m = small_model();
  auto cfg = pre_cfg();
  auto a = pretrain(c, m, cfg);
  auto b = pretrain(c, m, cfg);
  std::ostringstream la, lb;
  a.log.write(la, false);
  b.log.write(lb, false);
  CHECK(la.str() == lb.str());
  CHECK(same_params(a.params, b.params));

  cfg.loss.lambda = 0.0;
  auto zero = pretrain(c, m, cfg);
  cfg.objective = Objective::InfoNceOnly;
  auto nce = pretrain(c, m, cfg);
  REQUIRE(zero.log.steps.size() == nce.log.steps.size());
  for (std::size_t i = 0; i < zero.log.steps.size(); ++i) {
    CHECK(zero.log.steps[i].loss == nce.log.steps[i].loss);
    CHECK(zero.log.steps[i].grad_norm == nce.log.steps[i].grad_norm);
  }
  CHECK(same_params(zero.params, nce.params));
}

TEST_CASE("InfoNCE pretraining lowers the contrastive loss") {
  const auto c = corpus(64, 5);
  auto cfg = pre_cfg(15);
  cfg.objective = Objective::InfoNceOnly;
  auto r = pretrain(c, small_model(), cfg);
  CHECK(r.log.epochs.back().mean_loss < 0.8 * r.log.epochs.front().mean_loss);
}

TEST_CASE("CTC fine-tuning lowers the loss; a frozen encoder stays bit-identical") {
  const auto c = corpus(16, 6);
  const auto m = small_model();
  auto pre = pretrain(c, m, pre_cfg(1));
  auto cfg = fine_cfg(30);
  cfg.optim.lr = 1e-2;
  auto r = finetune(c, pre.params, m, cfg);
  CHECK(r.log.epochs.back().mean_loss < 0.5 * r.log.epochs.front().mean_loss);
  CHECK_FALSE(same_params(pre.params, r.params, model::is_encoder_param));

  cfg.freeze_encoder = true;
  cfg.epochs = 3;
  auto frozen = finetune(c, pre.params, m, cfg);
  CHECK(same_params(pre.params, frozen.params, model::is_encoder_param));
  CHECK(frozen.params.contains("dec.out.w"));
}

TEST_CASE("training rejects bad inputs and stops on a non-finite loss") {
  auto c = corpus(8);
  const auto m = small_model();
  auto cfg = pre_cfg(1);
  cfg.augment.max_time_mask_width = 50;
  try {
    pretrain(c, m, cfg);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("utterance 'utt0'") != std::string::npos);
  }
  cfg = pre_cfg(1);
  cfg.batch_size = 1;
  CHECK_THROWS_AS(pretrain(c, m, cfg), ConfigError);
  CHECK_THROWS_AS(pretrain(c, m, fine_cfg()), ConfigError);

  auto wrong = m;
  wrong.encoder.input_dim = 9;
  CHECK_THROWS_AS(pretrain(c, wrong, pre_cfg(1)), ConfigError);

  auto pre = pretrain(c, m, pre_cfg(1));
  auto small_vocab = m;
  small_vocab.head.vocab_size = 3;
  CHECK_THROWS_AS(finetune(c, pre.params, small_vocab, fine_cfg()), ConfigError);
  auto other_enc = m;
  other_enc.encoder.model_dim = 16;
  CHECK_THROWS_AS(finetune(c, pre.params, other_enc, fine_cfg()), ConfigError);

  c[3].spec.values[0] = std::numeric_limits<double>::quiet_NaN();
  TrainHooks hooks;
  hooks.last_good = [] { return std::string("ckpt/pretrain_epoch000.ckpt"); };
  try {
    pretrain(c, m, pre_cfg(1), nullptr, hooks);
    FAIL("expected RuntimeFailure");
  } catch (const RuntimeFailure& e) {
    const std::string msg = e.what();
    CHECK(msg.find("non-finite loss") != std::string::npos);
    CHECK(msg.find("ckpt/pretrain_epoch000.ckpt") != std::string::npos);
  }
}

TEST_CASE("step log lines are JSON with optional wall time") {
  auto r = pretrain(corpus(8), small_model(), pre_cfg(1));
  std::ostringstream with, without;
  r.log.write(with, true);
  r.log.write(without, false);
  CHECK(with.str().find("wall_ms") != std::string::npos);
  CHECK(without.str().find("wall_ms") == std::string::npos);
  CHECK(without.str().find("\"type\":\"epoch\"") != std::string::npos);
}
