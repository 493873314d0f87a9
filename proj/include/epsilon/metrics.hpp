#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "epsilon/labelspace.hpp"

namespace epsilon {

// Dense images x labels score matrix with binary ground truth.
struct ScoreTable {
  std::size_t num_images = 0;
  std::size_t num_labels = 0;
  std::vector<double> scores;       // row-major, finite
  std::vector<std::uint8_t> truth;  // row-major, 0/1

  void validate() const;  // throws std::invalid_argument
  double score(std::size_t image, std::size_t label) const {
    return scores[image * num_labels + label];
  }
  bool positive(std::size_t image, std::size_t label) const {
    return truth[image * num_labels + label] != 0;
  }
};

enum class Protocol { Zsl, Gzsl };

struct KMetrics {
  std::size_t k = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct EvalReport {
  std::string protocol;  // "zsl" | "gzsl"
  double map = 0.0;
  std::size_t classes_evaluated = 0;
  std::size_t classes_skipped = 0;  // zero-positive classes excluded from mAP
  std::vector<KMetrics> per_k;

  std::string to_json() const;  // UTF-8, fixed key names, deterministic order
};

// AP of ranking images by descending score (ascending image index on ties):
// mean over the positive ranks of the precision at that rank. Requires at
// least one positive.
double average_precision(const std::vector<double>& scores_for_class,
                         const std::vector<std::uint8_t>& truth_for_class);

// Unweighted mean AP over the subset's classes; classes without a positive
// are excluded and counted in *skipped. Throws when every class is skipped.
double map_score(const ScoreTable& table, const std::vector<std::size_t>& label_subset,
                 std::size_t* skipped = nullptr);

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Micro-averaged top-k precision/recall over the subset: each image selects
// its k highest-scoring subset labels (ascending-index tie-break), hits are
// pooled across images.
Prf topk_prf(const ScoreTable& table, std::size_t k, const std::vector<std::size_t>& label_subset);

// Full report. Protocol zsl scores only the unseen labels, gzsl all labels.
EvalReport evaluate(const ScoreTable& table, const LabelSpace& space, Protocol protocol,
                    const std::vector<std::size_t>& ks);

}  // namespace epsilon
