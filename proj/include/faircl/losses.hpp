#pragma once

#include <string>
#include <vector>

#include "faircl/autograd.hpp"
#include "faircl/data.hpp"
#include "faircl/model.hpp"

namespace faircl::losses {

struct ContrastiveInputs {
  ag::Tensor z;  // [2N, D']
  std::vector<std::size_t> pair_of;
  std::vector<std::string> group_key;
  double temperature = 0.2;

  void validate() const;
};

struct FairLossConfig {
  double lambda = 0.1;
  double grl_alpha = 1.0;
  bool shared_embedding_space = true;

  void validate() const;
};

// -sum_i log( exp(z_i.z_pair(i)/tau) / sum_{j != i} exp(z_i.z_j/tau) )
ag::Tensor info_nce(const ContrastiveInputs& in);

// -sum_i 1/|P(i)| sum_{p in P(i)} log( exp(z_i.z_p/tau) / sum_{a != i} exp(z_i.z_a/tau) ),
// P(i) = { j != i : group(j) == group(i) }.
ag::Tensor fsc(const ContrastiveInputs& in);

namespace detail {
// info_nce without the 2N >= 4 precondition.
ag::Tensor info_nce_kernel(const ag::Tensor& z, const std::vector<std::size_t>& pair_of, double temperature);
}  // namespace detail

struct FairLoss {
  ag::Tensor total;
  ag::Tensor info_nce;
  ag::Tensor fsc;
};

// z = g(pooled), z_rev = g(grad_reverse(pooled, alpha)) (g' when the
// embedding spaces are independent); total = info_nce(z) + lambda * fsc(z_rev).
// With lambda == 0 the FSC value is computed outside the graph.
FairLoss fairasr_loss(const ag::Tensor& pooled, const data::ContrastiveBatch& batch, const model::ModelParams& params,
                      const model::HeadConfig& head, const FairLossConfig& cfg, double temperature);

// Smallest frame count that can emit `target` (a blank between repeats).
std::size_t ctc_min_frames(const std::vector<int>& target);

// -log P(target | log_probs) by the log-space forward recursion over the
// blank-interleaved target. log_probs: [T', V], rows normalized.
ag::Tensor ctc_loss(const ag::Tensor& log_probs, const std::vector<int>& target, int blank = 0);

// Mean of per-utterance CTC over a padded batch [B, T', V].
ag::Tensor ctc_loss_batch(const ag::Tensor& log_probs, const std::vector<std::size_t>& lengths,
                          const std::vector<std::vector<int>>& targets, int blank = 0);

}  // namespace faircl::losses
