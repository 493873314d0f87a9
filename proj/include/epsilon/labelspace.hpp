#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "epsilon/tensor.hpp"

namespace epsilon {

enum class LabelSubset { Seen, Unseen, All };

// Label vocabulary with its seen/unseen partition and the C x d_w embedding
// table. Immutable after construction; rows align with `names`.
class LabelSpace {
 public:
  // Validates: unique names, mask length C, finite nonzero embedding rows.
  LabelSpace(std::vector<std::string> names, std::vector<bool> seen_mask, Tensor embeddings);

  std::size_t num_labels() const { return names_.size(); }
  std::size_t dim() const { return embeddings_.shape()[1]; }
  std::size_t num_seen() const { return seen_count_; }
  std::size_t num_unseen() const { return names_.size() - seen_count_; }

  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  bool is_seen(std::size_t i) const { return seen_mask_.at(i); }
  const Tensor& embeddings() const { return embeddings_; }

  // Global label indices belonging to the subset, ascending.
  const std::vector<std::size_t>& indices(LabelSubset subset) const;

  // Index of `name`; throws std::invalid_argument when unknown.
  std::size_t index_of(const std::string& name) const;
  bool contains(const std::string& name) const;

 private:
  std::vector<std::string> names_;
  std::vector<bool> seen_mask_;
  Tensor embeddings_;  // C x d_w
  std::size_t seen_count_ = 0;
  std::vector<std::size_t> seen_indices_, unseen_indices_, all_indices_;
};

// Embedding file: one label per line, `name<TAB>v1 v2 ... v_dw`.
// Unseen-list file: one label name per line. Every unseen name must exist in
// the vocabulary; duplicates and zero/non-finite rows are rejected.
LabelSpace load_labelspace(const std::string& embedding_file, const std::string& unseen_list_file);
void save_labelspace(const LabelSpace& space, const std::string& embedding_file,
                     const std::string& unseen_list_file);

// Per-label score: max over the M rows of `semantic_group` (M x d_w) of the
// dot product with that label's embedding. Result order follows
// space.indices(subset).
std::vector<double> score_labels(const Tensor& semantic_group, const LabelSpace& space,
                                 LabelSubset subset);

// Indices of the k largest scores, ties broken by ascending index.
std::vector<std::size_t> rank_labels(const std::vector<double>& scores, std::size_t k);

}  // namespace epsilon
