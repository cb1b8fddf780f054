#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "faircl/data.hpp"
#include "faircl/features.hpp"
#include "faircl/losses.hpp"
#include "faircl/model.hpp"

namespace faircl::train {

enum class Stage { Pretrain, Finetune };
// FairAsr: info_nce + lambda * fsc. InfoNceOnly: the contrastive baseline.
enum class Objective { FairAsr, InfoNceOnly };

struct AdamWHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  std::map<std::string, std::vector<double>> m, v;
  std::uint64_t step = 0;
};

// One decoupled-weight-decay Adam update on every parameter that has a
// gradient and passes `trainable`. Throws RuntimeFailure naming the path of
// any non-finite gradient before touching weights.
void adamw_step(model::ModelParams& params, AdamWState& state, const AdamWHyper& hyper,
                const std::function<bool(const std::string&)>& trainable = {});

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min);

// Scales all gradients so their joint L2 norm is at most max_norm; returns
// the norm before clipping. max_norm <= 0 disables.
double clip_grad_norm(model::ModelParams& params, double max_norm);

struct TrainConfig {
  Stage stage = Stage::Pretrain;
  Objective objective = Objective::FairAsr;
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  AdamWHyper optim;
  double lr_min = 0.0;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  // pretrain
  losses::FairLossConfig loss;
  double temperature = 0.2;
  std::string fsc_attribute = data::kComposite;
  features::AugmentPolicy augment;
  // finetune
  int blank = 0;
  bool freeze_encoder = false;

  void validate() const;
};

struct StepRecord {
  std::string stage;
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double info_nce = 0.0;  // pretrain only
  double fsc = 0.0;       // pretrain only
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

struct EpochSummary {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double mean_info_nce = 0.0;
  double mean_fsc = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochSummary> epochs;

  // One JSON object per line; wall time is omitted when include_time is false.
  void write(std::ostream& os, bool include_time = true) const;
};

struct TrainResult {
  model::ModelParams params;
  TrainLog log;
};

struct TrainHooks {
  // Called after every epoch with the updated parameters.
  std::function<void(std::size_t epoch, const model::ModelParams&, const EpochSummary&)> on_epoch;
  // Consulted when a step produces a non-finite loss; its return value
  // (e.g. the last checkpoint written) is included in the error.
  std::function<std::string()> last_good;
};

// Starts from `init` when given (otherwise fresh weights from cfg.seed).
TrainResult pretrain(const data::Corpus& corpus, const model::ModelConfig& model_cfg, const TrainConfig& cfg,
                     const model::ModelParams* init = nullptr, const TrainHooks& hooks = {});

// Copies the pretrained encoder, attaches a fresh decoder head and minimizes
// mean CTC. No augmentation.
TrainResult finetune(const data::Corpus& corpus, const model::ModelParams& pretrained,
                     const model::ModelConfig& model_cfg, const TrainConfig& cfg, const TrainHooks& hooks = {});

}  // namespace faircl::train
