#include "faircl/losses.hpp"

#include <cmath>
#include <map>

#include "faircl/error.hpp"

namespace faircl::losses {

using ag::Tensor;

void ContrastiveInputs::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("contrastive: temperature must be > 0");
  if (z.rank() != 2) throw ShapeError("contrastive: embeddings must be [2N, D'], got " + ag::shape_str(z.shape()));
  const std::size_t n = z.dim(0);
  if (pair_of.size() != n) throw ShapeError("contrastive: pair_of size does not match the batch");
  for (std::size_t i = 0; i < n; ++i) {
    if (pair_of[i] >= n || pair_of[i] == i || pair_of[pair_of[i]] != i) {
      throw ConfigError("contrastive: pair_of is not a fixed-point-free involution at index " + std::to_string(i));
    }
  }
  if (!group_key.empty() && group_key.size() != n) throw ShapeError("contrastive: group_key size does not match the batch");
}

void FairLossConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("loss: lambda must be >= 0");
  if (!(grl_alpha > 0.0)) throw ConfigError("loss: grl_alpha must be > 0");
}

namespace {

// Temperature-scaled similarity matrix and the per-anchor log-denominator
// over a != i.
struct Similarity {
  Tensor sim;  // [2N, 2N]
  Tensor lse;  // [2N]
};

Similarity similarity(const Tensor& z, double temperature) {
  const std::size_t n = z.dim(0);
  Tensor sim = ag::scale(ag::matmul(z, ag::transpose(z)), 1.0 / temperature);
  std::vector<double> diag(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) diag[i * n + i] = ag::kLogZero;
  Tensor lse = ag::log_sum_exp(ag::add(sim, Tensor::from({n, n}, std::move(diag))), 1);
  return {sim, lse};
}

}  // namespace

namespace detail {

Tensor info_nce_kernel(const Tensor& z, const std::vector<std::size_t>& pair_of, double temperature) {
  const std::size_t n = z.dim(0);
  auto [sim, lse] = similarity(z, temperature);
  std::vector<std::size_t> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = i * n + pair_of[i];
  return ag::sum_all(ag::sub(lse, ag::gather(sim, std::move(pos), {n})));
}

}  // namespace detail

Tensor info_nce(const ContrastiveInputs& in) {
  in.validate();
  if (in.z.dim(0) < 4) {
    throw ConfigError("info_nce: need 2N >= 4 samples for a negative per anchor, got " + std::to_string(in.z.dim(0)));
  }
  return detail::info_nce_kernel(in.z, in.pair_of, in.temperature);
}

Tensor fsc(const ContrastiveInputs& in) {
  in.validate();
  const std::size_t n = in.z.dim(0);
  if (in.group_key.size() != n) throw ShapeError("fsc: group_key size does not match the batch");
  // sum_p (1/|P|)(sim_ip - lse_i) = (weights . sim)_i - lse_i
  std::vector<double> weights(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < n; ++j) count += (j != i && in.group_key[j] == in.group_key[i]);
    if (count == 0) throw ConfigError("fsc: anchor " + std::to_string(i) + " has no same-group positive");
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && in.group_key[j] == in.group_key[i]) weights[i * n + j] = 1.0 / static_cast<double>(count);
    }
  }
  auto [sim, lse] = similarity(in.z, in.temperature);
  Tensor attract = ag::sum_all(ag::mul(sim, Tensor::from({n, n}, std::move(weights))));
  return ag::sub(ag::sum_all(lse), attract);
}

FairLoss fairasr_loss(const Tensor& pooled, const data::ContrastiveBatch& batch, const model::ModelParams& params,
                      const model::HeadConfig& head, const FairLossConfig& cfg, double temperature) {
  cfg.validate();
  if (cfg.shared_embedding_space == head.independent_heads) {
    throw ConfigError("loss: shared_embedding_space must match the model's projection heads");
  }
  const std::string rev_head = cfg.shared_embedding_space ? model::kProjHead : model::kProjRevHead;
  FairLoss out;
  out.info_nce = info_nce({model::project(pooled, params, head, model::kProjHead), batch.pair_of, {}, temperature});
  auto fsc_term = [&] {
    Tensor z_rev = model::project(ag::grad_reverse(pooled, cfg.grl_alpha), params, head, rev_head);
    return fsc({z_rev, batch.pair_of, batch.group_key, temperature});
  };
  if (cfg.lambda == 0.0) {
    ag::NoGradGuard no_grad;
    out.fsc = fsc_term();
    out.total = out.info_nce;
    return out;
  }
  out.fsc = fsc_term();
  out.total = ag::add(out.info_nce, ag::scale(out.fsc, cfg.lambda));
  return out;
}

std::size_t ctc_min_frames(const std::vector<int>& target) {
  std::size_t repeats = 0;
  for (std::size_t i = 1; i < target.size(); ++i) repeats += target[i] == target[i - 1];
  return target.size() + repeats;
}

Tensor ctc_loss(const Tensor& log_probs, const std::vector<int>& target, int blank) {
  if (log_probs.rank() != 2) throw ShapeError("ctc_loss: log_probs must be [T', V], got " + ag::shape_str(log_probs.shape()));
  const std::size_t frames = log_probs.dim(0), vocab = log_probs.dim(1);
  for (int tok : target) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab || tok == blank) {
      throw ConfigError("ctc_loss: target token " + std::to_string(tok) + " outside vocabulary of " +
                        std::to_string(vocab) + " (blank " + std::to_string(blank) + ")");
    }
  }
  const std::size_t need = ctc_min_frames(target);
  if (frames < need || frames == 0) {
    throw ConfigError("ctc_loss: " + std::to_string(frames) + " frames cannot emit a target needing " +
                      std::to_string(need));
  }

  // Blank-interleaved target: b y1 b y2 ... yL b.
  const std::size_t states = 2 * target.size() + 1;
  std::vector<int> ext(states, blank);
  for (std::size_t k = 0; k < target.size(); ++k) ext[2 * k + 1] = target[k];

  // Flattened log-probs with one trailing log-zero slot.
  const std::size_t zero_slot = frames * vocab;
  Tensor lp = ag::concat({ag::reshape(log_probs, {zero_slot}), Tensor::full({1}, ag::kLogZero)}, 0);
  auto emissions = [&](std::size_t t) {
    std::vector<std::size_t> idx(states);
    for (std::size_t s = 0; s < states; ++s) idx[s] = t * vocab + static_cast<std::size_t>(ext[s]);
    return ag::gather(lp, std::move(idx), {states});
  };

  std::vector<std::size_t> start(states, zero_slot);
  start[0] = static_cast<std::size_t>(blank);
  if (states > 1) start[1] = static_cast<std::size_t>(ext[1]);
  Tensor alpha = ag::gather(lp, std::move(start), {states});

  // Predecessors of state s: s, s-1, and s-2 when skipping a blank between
  // distinct labels. Index `states` points at a log-zero slot.
  std::vector<std::size_t> pred(states * 3);
  for (std::size_t s = 0; s < states; ++s) {
    pred[s * 3 + 0] = s;
    pred[s * 3 + 1] = s >= 1 ? s - 1 : states;
    pred[s * 3 + 2] = (s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]) ? s - 2 : states;
  }
  const Tensor log_zero = Tensor::full({1}, ag::kLogZero);
  for (std::size_t t = 1; t < frames; ++t) {
    Tensor padded = ag::concat({alpha, log_zero}, 0);
    Tensor merged = ag::log_sum_exp(ag::gather(padded, pred, {states, 3}), 1);
    alpha = ag::add(merged, emissions(t));
  }
  std::vector<std::size_t> finals{states - 1};
  if (states > 1) finals.push_back(states - 2);
  const std::size_t n_finals = finals.size();
  return ag::neg(ag::log_sum_exp(ag::gather(alpha, std::move(finals), {n_finals}), 0));
}

Tensor ctc_loss_batch(const Tensor& log_probs, const std::vector<std::size_t>& lengths,
                      const std::vector<std::vector<int>>& targets, int blank) {
  if (log_probs.rank() != 3 || lengths.size() != log_probs.dim(0) || targets.size() != log_probs.dim(0)) {
    throw ShapeError("ctc_loss_batch: log_probs " + ag::shape_str(log_probs.shape()) + " with " +
                     std::to_string(lengths.size()) + " lengths and " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t b = log_probs.dim(0), t_max = log_probs.dim(1), vocab = log_probs.dim(2);
  std::vector<Tensor> per;
  per.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (lengths[i] == 0 || lengths[i] > t_max) throw ShapeError("ctc_loss_batch: invalid length");
    Tensor sample = ag::reshape(ag::slice(log_probs, 0, i, 1), {t_max, vocab});
    if (lengths[i] < t_max) sample = ag::slice(sample, 0, 0, lengths[i]);
    per.push_back(ag::reshape(ctc_loss(sample, targets[i], blank), {1}));
  }
  return ag::scale(ag::sum_all(ag::concat(per, 0)), 1.0 / static_cast<double>(b));
}

}  // namespace faircl::losses
