#include "epsilon/objective.hpp"

#include <stdexcept>
#include <string>

namespace epsilon {

namespace {

void check_semantic_group(const Tensor& s, const LabelSpace& space, const char* op) {
  if (!s.defined() || s.rank() != 2 || s.shape()[1] != space.dim()) {
    throw std::invalid_argument(std::string(op) + ": semantic group must be [M, " +
                                std::to_string(space.dim()) + "]");
  }
}

void check_labels(const std::vector<std::uint8_t>& y, const LabelSpace& space, const char* op) {
  if (y.size() != space.num_labels()) {
    throw std::invalid_argument(std::string(op) + ": label row has " + std::to_string(y.size()) +
                                " entries, vocabulary has " +
                                std::to_string(space.num_labels()));
  }
  for (std::uint8_t v : y) {
    if (v > 1) throw std::invalid_argument(std::string(op) + ": labels must be binary");
  }
}

// Per-label scores max_m <s_m, e_c> as a rank-1 tensor over the vocabulary,
// kept on the autodiff graph.
Tensor label_scores(const Tensor& s, const LabelSpace& space) {
  Tensor et = transpose(space.embeddings(), 0, 1);  // d_w x C
  return max(matmul(s, et), 0);                     // M x C -> C
}

}  // namespace

void LossConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw std::invalid_argument("loss config: lambda must lie in [0, 1]");
  }
}

std::vector<std::size_t> seen_positives(const std::vector<std::uint8_t>& y,
                                        const LabelSpace& space) {
  check_labels(y, space, "seen_positives");
  std::vector<std::size_t> out;
  for (std::size_t c : space.indices(LabelSubset::Seen)) {
    if (y[c]) out.push_back(c);
  }
  return out;
}

std::vector<std::size_t> seen_negatives(const std::vector<std::uint8_t>& y,
                                        const LabelSpace& space) {
  check_labels(y, space, "seen_negatives");
  std::vector<std::size_t> out;
  for (std::size_t c : space.indices(LabelSubset::Seen)) {
    if (!y[c]) out.push_back(c);
  }
  return out;
}

bool has_rank_pair(const std::vector<std::uint8_t>& y, const LabelSpace& space) {
  check_labels(y, space, "has_rank_pair");
  bool pos = false, neg = false;
  for (std::size_t c : space.indices(LabelSubset::Seen)) {
    (y[c] ? pos : neg) = true;
    if (pos && neg) return true;
  }
  return false;
}

Tensor tau_matrix(const Tensor& s, const std::vector<std::uint8_t>& y, const LabelSpace& space) {
  check_semantic_group(s, space, "tau_matrix");
  const auto pos = seen_positives(y, space);
  const auto neg = seen_negatives(y, space);
  if (pos.empty() || neg.empty()) {
    throw std::invalid_argument("tau_matrix: sample lacks a positive/negative seen pair");
  }
  Tensor scores = label_scores(s, space);
  Tensor neg_scores = reshape(take(scores, neg), {neg.size(), 1});
  Tensor pos_scores = reshape(take(scores, pos), {1, pos.size()});
  return sub(neg_scores, pos_scores);  // |T_bar| x |T|
}

Tensor ranknet(const Tensor& s, const std::vector<std::uint8_t>& y, const LabelSpace& space) {
  Tensor tau = tau_matrix(s, y, space);
  const double alpha = 1.0 / static_cast<double>(tau.size());
  return scale(sum(log1pexp(tau)), alpha);
}

double diversity_weight(const std::vector<std::uint8_t>& y, const LabelSpace& space) {
  check_labels(y, space, "diversity_weight");
  const auto& seen = space.indices(LabelSubset::Seen);
  if (seen.empty()) return 1.0;
  std::size_t k = 0;
  for (std::size_t c : seen) k += y[c];
  const double p = static_cast<double>(k) / static_cast<double>(seen.size());
  return 1.0 + p * (1.0 - p);  // population variance of a binary vector
}

Tensor regularizer(const Tensor& s, const LossConfig& cfg) {
  if (!s.defined() || s.rank() != 2) {
    throw std::invalid_argument("regularizer: semantic group must be [M, d_w]");
  }
  const std::size_t axis = cfg.reg_across_groups ? 0 : 1;
  return abs(sum(variance(s, axis)));
}

Tensor total_loss(const Tensor& s_batch, const std::vector<std::vector<std::uint8_t>>& labels,
                  const LabelSpace& space, const LossConfig& cfg) {
  cfg.validate();
  if (!s_batch.defined() || s_batch.rank() != 3 || s_batch.shape()[2] != space.dim()) {
    throw std::invalid_argument("total_loss: batch must be [B, M, d_w]");
  }
  const std::size_t b = s_batch.shape()[0];
  if (b == 0 || labels.size() != b) {
    throw std::invalid_argument("total_loss: need one label row per sample, batch nonempty");
  }
  const std::size_t m = s_batch.shape()[1];
  const std::size_t dw = s_batch.shape()[2];

  Tensor acc;
  for (std::size_t i = 0; i < b; ++i) {
    Tensor s_i = reshape(slice(s_batch, 0, i, 1), {m, dw});
    Tensor term = scale(regularizer(s_i, cfg), cfg.lambda);
    if (has_rank_pair(labels[i], space)) {
      const double w = diversity_weight(labels[i], space) * (1.0 - cfg.lambda);
      term = add(term, scale(ranknet(s_i, labels[i], space), w));
    }
    acc = acc.defined() ? add(acc, term) : term;
  }
  return scale(acc, 1.0 / static_cast<double>(b));
}

}  // namespace epsilon
