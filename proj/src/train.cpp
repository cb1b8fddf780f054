#include "faircl/train.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "faircl/error.hpp"
#include "faircl/kernels.hpp"
#include "faircl/rng.hpp"

namespace faircl::train {

using model::ModelParams;

void adamw_step(ModelParams& params, AdamWState& state, const AdamWHyper& hyper,
                const std::function<bool(const std::string&)>& trainable) {
  auto selected = [&](const std::string& path, const ag::Tensor& t) {
    return t.has_grad() && (!trainable || trainable(path));
  };
  for (const auto& [path, t] : params.tensors) {
    if (!selected(path, t)) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw RuntimeFailure("adamw: non-finite gradient in parameter '" + path + "'");
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (auto& [path, t] : params.tensors) {
    if (!selected(path, t)) continue;
    auto& m = state.m[path];
    auto& v = state.v[path];
    if (m.size() != t.size()) {
      m.assign(t.size(), 0.0);
      v.assign(t.size(), 0.0);
    }
    const auto g = t.grad();
    auto w = t.mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] -= hyper.lr * hyper.weight_decay * w[i] + hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min) {
  if (total_steps == 0) return lr_max;
  const double frac = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

double clip_grad_norm(ModelParams& params, double max_norm) {
  const auto& kt = kernels::active();
  double sq = 0.0;
  for (const auto& [_, t] : params.tensors) {
    if (t.has_grad()) sq += kt.dot(t.grad().data(), t.grad().data(), t.size());
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [_, t] : params.tensors) {
      if (!t.has_grad()) continue;
      auto g = t.mutable_grad();
      kt.scale(g.data(), s, g.data(), g.size());
    }
  }
  return norm;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (stage == Stage::Pretrain && batch_size < 2) throw ConfigError("pretrain: batch_size must be >= 2");
  if (!(optim.lr > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  if (!(lr_min >= 0.0) || lr_min > optim.lr) throw ConfigError("train: lr_min must be in [0, learning_rate]");
  if (!(optim.weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    throw ConfigError("train: betas must be in [0, 1)");
  }
  if (!(temperature > 0.0)) throw ConfigError("train: temperature must be > 0");
  loss.validate();
}

void TrainLog::write(std::ostream& os, bool include_time) const {
  for (const auto& r : steps) {
    nlohmann::ordered_json j;
    j["type"] = "step";
    j["stage"] = r.stage;
    j["step"] = r.step;
    j["epoch"] = r.epoch;
    j["lr"] = r.lr;
    j["loss"] = r.loss;
    if (r.stage == "pretrain") {
      j["info_nce"] = r.info_nce;
      j["fsc"] = r.fsc;
    }
    j["grad_norm"] = r.grad_norm;
    if (include_time) j["wall_ms"] = r.wall_ms;
    os << j.dump() << '\n';
  }
  for (const auto& e : epochs) {
    nlohmann::ordered_json j;
    j["type"] = "epoch";
    j["epoch"] = e.epoch;
    j["mean_loss"] = e.mean_loss;
    j["mean_info_nce"] = e.mean_info_nce;
    j["mean_fsc"] = e.mean_fsc;
    os << j.dump() << '\n';
  }
}

namespace {

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::size_t min_size,
                                                    std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (end - start < min_size) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

[[noreturn]] void abort_non_finite(const char* stage, std::size_t step, const TrainHooks& hooks) {
  std::string msg = std::string(stage) + ": non-finite loss at step " + std::to_string(step);
  if (hooks.last_good) {
    const std::string where = hooks.last_good();
    msg += where.empty() ? "; no checkpoint written yet" : "; last good checkpoint: " + where;
  }
  throw RuntimeFailure(msg);
}

void check_corpus_dims(const data::Corpus& corpus, const model::ModelConfig& cfg) {
  for (const auto& u : corpus) {
    if (u.spec.bins != cfg.encoder.input_dim) {
      throw ConfigError("utterance '" + u.id + "' has " + std::to_string(u.spec.bins) + " mel bins but the model expects " +
                        std::to_string(cfg.encoder.input_dim));
    }
  }
}

}  // namespace

TrainResult pretrain(const data::Corpus& corpus, const model::ModelConfig& model_cfg, const TrainConfig& cfg,
                     const ModelParams* init, const TrainHooks& hooks) {
  cfg.validate();
  if (cfg.stage != Stage::Pretrain) throw ConfigError("pretrain: config stage must be pretrain");
  if (corpus.size() < 2) throw ConfigError("pretrain: corpus needs at least 2 utterances");
  check_corpus_dims(corpus, model_cfg);
  for (const auto& u : corpus) {
    try {
      features::validate_policy(cfg.augment, u.spec.frames, u.spec.bins);
    } catch (const ConfigError& e) {
      throw ConfigError("augment: utterance '" + u.id + "': " + e.what());
    }
  }
  model::ModelConfig cfg_no_decoder = model_cfg;
  cfg_no_decoder.head.vocab_size = 0;
  cfg_no_decoder.head.independent_heads = !cfg.loss.shared_embedding_space;

  TrainResult result;
  result.params = init ? init->clone() : model::init_params(cfg_no_decoder, derive_seed(cfg.seed, 3));
  AdamWState state;
  AdamWHyper hyper = cfg.optim;

  const std::size_t per_epoch = epoch_batches(corpus.size(), cfg.batch_size, 2, 0).size();
  const std::size_t total = per_epoch * cfg.epochs;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochSummary summary{epoch, 0.0, 0.0, 0.0};
    const auto batches = epoch_batches(corpus.size(), cfg.batch_size, 2, derive_seed(cfg.seed, 7000 + epoch));
    for (const auto& idx : batches) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<const data::Utterance*> utts;
      for (std::size_t i : idx) utts.push_back(&corpus[i]);
      const auto batch =
          data::make_contrastive_batch(utts, cfg.fsc_attribute, cfg.augment, derive_seed(cfg.seed, 50000 + step));
      std::vector<const features::MelSpectrogram*> specs;
      for (const auto& s : batch.samples) specs.push_back(&s);

      result.params.zero_grad();
      const auto enc = model::encode(model::pad_batch(specs), result.params, cfg_no_decoder.encoder);
      const ag::Tensor pooled = model::mean_pool(enc);
      StepRecord rec;
      rec.stage = "pretrain";
      rec.step = step;
      rec.epoch = epoch;
      ag::Tensor loss;
      if (cfg.objective == Objective::InfoNceOnly) {
        loss = losses::info_nce(
            {model::project(pooled, result.params, cfg_no_decoder.head), batch.pair_of, {}, cfg.temperature});
        rec.info_nce = loss.item();
      } else {
        auto parts = losses::fairasr_loss(pooled, batch, result.params, cfg_no_decoder.head, cfg.loss, cfg.temperature);
        loss = parts.total;
        rec.info_nce = parts.info_nce.item();
        rec.fsc = parts.fsc.item();
      }
      rec.loss = loss.item();
      if (!std::isfinite(rec.loss)) abort_non_finite("pretrain", step, hooks);
      ag::backward(loss);
      rec.grad_norm = clip_grad_norm(result.params, cfg.clip_norm);
      hyper.lr = cosine_lr(step, total, cfg.optim.lr, cfg.lr_min);
      rec.lr = hyper.lr;
      adamw_step(result.params, state, hyper);
      if (!result.params.all_finite()) abort_non_finite("pretrain", step, hooks);
      rec.wall_ms = elapsed_ms(t0);
      summary.mean_loss += rec.loss;
      summary.mean_info_nce += rec.info_nce;
      summary.mean_fsc += rec.fsc;
      result.log.steps.push_back(rec);
      ++step;
    }
    const double nb = static_cast<double>(std::max<std::size_t>(batches.size(), 1));
    summary.mean_loss /= nb;
    summary.mean_info_nce /= nb;
    summary.mean_fsc /= nb;
    result.log.epochs.push_back(summary);
    if (hooks.on_epoch) hooks.on_epoch(epoch, result.params, summary);
  }
  result.params.zero_grad();
  return result;
}

TrainResult finetune(const data::Corpus& corpus, const ModelParams& pretrained, const model::ModelConfig& model_cfg,
                     const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (cfg.stage != Stage::Finetune) throw ConfigError("finetune: config stage must be finetune");
  if (corpus.empty()) throw ConfigError("finetune: empty corpus");
  check_corpus_dims(corpus, model_cfg);
  const std::size_t vocab = model_cfg.head.vocab_size;
  if (vocab < 2) throw ConfigError("finetune: model vocab_size must be >= 2");
  for (const auto& u : corpus) {
    for (int tok : u.transcript) {
      if (tok < 1 || static_cast<std::size_t>(tok) >= vocab) {
        throw ConfigError("finetune: utterance '" + u.id + "' has token " + std::to_string(tok) +
                          " outside the decoder vocabulary of " + std::to_string(vocab));
      }
    }
  }

  TrainResult result;
  // Encoder must match the configured architecture exactly.
  const ModelParams reference = model::init_params(
      [&] {
        auto c = model_cfg;
        c.head.vocab_size = 0;
        c.head.independent_heads = false;
        return c;
      }(),
      0);
  for (const auto& [path, t] : reference.tensors) {
    if (!model::is_encoder_param(path)) continue;
    if (!pretrained.contains(path) || pretrained.at(path).shape() != t.shape()) {
      throw ConfigError("finetune: pretrained weights do not match the encoder configuration at '" + path + "'");
    }
  }
  result.params = pretrained.clone();
  model::init_decoder(result.params, model_cfg, derive_seed(cfg.seed, 4));

  auto trainable = [&](const std::string& path) {
    if (model::is_decoder_param(path)) return true;
    return model::is_encoder_param(path) && !cfg.freeze_encoder;
  };
  AdamWState state;
  AdamWHyper hyper = cfg.optim;
  const std::size_t per_epoch = epoch_batches(corpus.size(), cfg.batch_size, 1, 0).size();
  const std::size_t total = per_epoch * cfg.epochs;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochSummary summary{epoch, 0.0, 0.0, 0.0};
    const auto batches = epoch_batches(corpus.size(), cfg.batch_size, 1, derive_seed(cfg.seed, 9000 + epoch));
    for (const auto& idx : batches) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<const features::MelSpectrogram*> specs;
      std::vector<std::vector<int>> targets;
      for (std::size_t i : idx) {
        specs.push_back(&corpus[i].spec);
        targets.push_back(corpus[i].transcript);
      }
      result.params.zero_grad();
      const auto padded = model::pad_batch(specs);
      model::Encoded enc;
      if (cfg.freeze_encoder) {
        ag::NoGradGuard no_grad;
        enc = model::encode(padded, result.params, model_cfg.encoder);
      } else {
        enc = model::encode(padded, result.params, model_cfg.encoder);
      }
      const ag::Tensor log_probs = model::decode_logits(enc, result.params, model_cfg.head);
      const ag::Tensor loss = losses::ctc_loss_batch(log_probs, enc.lengths, targets, cfg.blank);
      StepRecord rec;
      rec.stage = "finetune";
      rec.step = step;
      rec.epoch = epoch;
      rec.loss = loss.item();
      if (!std::isfinite(rec.loss)) abort_non_finite("finetune", step, hooks);
      ag::backward(loss);
      if (cfg.freeze_encoder) {
        for (auto& [path, t] : result.params.tensors) {
          if (!trainable(path)) t.zero_grad();
        }
      }
      rec.grad_norm = clip_grad_norm(result.params, cfg.clip_norm);
      hyper.lr = cosine_lr(step, total, cfg.optim.lr, cfg.lr_min);
      rec.lr = hyper.lr;
      adamw_step(result.params, state, hyper, trainable);
      if (!result.params.all_finite()) abort_non_finite("finetune", step, hooks);
      rec.wall_ms = elapsed_ms(t0);
      summary.mean_loss += rec.loss;
      result.log.steps.push_back(rec);
      ++step;
    }
    summary.mean_loss /= static_cast<double>(std::max<std::size_t>(batches.size(), 1));
    result.log.epochs.push_back(summary);
    if (hooks.on_epoch) hooks.on_epoch(epoch, result.params, summary);
  }
  result.params.zero_grad();
  return result;
}

}  // namespace faircl::train
