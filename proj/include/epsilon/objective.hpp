#pragma once

#include <cstdint>
#include <vector>

#include "epsilon/labelspace.hpp"
#include "epsilon/tensor.hpp"

namespace epsilon {

struct LossConfig {
  double lambda = 0.3;  // blend weight between ranking term and regularizer
  // Alternative regularizer reading: variance across the M group rows per
  // embedding dimension, instead of within each row.
  bool reg_across_groups = false;

  void validate() const;  // lambda must lie in [0, 1]
};

// Label rows are binary indicator vectors over the full vocabulary; the
// ranking terms only look at the seen classes.
std::vector<std::size_t> seen_positives(const std::vector<std::uint8_t>& y,
                                        const LabelSpace& space);
std::vector<std::size_t> seen_negatives(const std::vector<std::uint8_t>& y,
                                        const LabelSpace& space);

// True when the sample has at least one present and one absent seen class,
// i.e. the ranking term is defined.
bool has_rank_pair(const std::vector<std::uint8_t>& y, const LabelSpace& space);

// tau[j][k] = max_m <s_m, e_neg_j> - max_m <s_m, e_pos_k> over absent (j) and
// present (k) seen classes. s is the M x d_w semantic group.
Tensor tau_matrix(const Tensor& s, const std::vector<std::uint8_t>& y, const LabelSpace& space);

// Pairwise ranking loss: mean over all (absent, present) pairs of
// softplus(tau), i.e. alpha = (|T| * |T_bar|)^-1 times the pair sum.
Tensor ranknet(const Tensor& s, const std::vector<std::uint8_t>& y, const LabelSpace& space);

// omega = 1 + population variance of the seen-class indicator vector.
double diversity_weight(const std::vector<std::uint8_t>& y, const LabelSpace& space);

// | sum over rows of the population variance of each row's d_w components |
// (or, behind the flag, variance across rows per component).
Tensor regularizer(const Tensor& s, const LossConfig& cfg);

// (1/B) * sum_i [ omega_i * (1 - lambda) * ranknet_i + lambda * reg_i ].
// Samples without a rank pair contribute only their regularizer term; B
// counts every sample.
Tensor total_loss(const Tensor& s_batch, const std::vector<std::vector<std::uint8_t>>& labels,
                  const LabelSpace& space, const LossConfig& cfg);

}  // namespace epsilon
