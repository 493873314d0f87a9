#include "epsilon/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace epsilon {

void ScoreTable::validate() const {
  if (num_images == 0 || num_labels == 0) {
    throw std::invalid_argument("score table: needs at least one image and one label");
  }
  const std::size_t want = num_images * num_labels;
  if (scores.size() != want) {
    std::ostringstream os;
    os << "score table: expected " << want << " scores, got " << scores.size();
    throw std::invalid_argument(os.str());
  }
  if (truth.size() != want) {
    std::ostringstream os;
    os << "score table: expected " << want << " truth entries, got " << truth.size();
    throw std::invalid_argument(os.str());
  }
  for (std::size_t i = 0; i < want; ++i) {
    if (!std::isfinite(scores[i])) {
      std::ostringstream os;
      os << "score table: non-finite score at flat index " << i;
      throw std::invalid_argument(os.str());
    }
    if (truth[i] > 1) {
      std::ostringstream os;
      os << "score table: truth must be 0/1, got " << static_cast<int>(truth[i])
         << " at flat index " << i;
      throw std::invalid_argument(os.str());
    }
  }
}

double average_precision(const std::vector<double>& scores_for_class,
                         const std::vector<std::uint8_t>& truth_for_class) {
  if (scores_for_class.empty() || scores_for_class.size() != truth_for_class.size()) {
    throw std::invalid_argument("average_precision: scores and truth must be non-empty and equal-sized");
  }
  std::vector<std::size_t> order(scores_for_class.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores_for_class[a] > scores_for_class[b];
  });
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (truth_for_class[order[rank]] != 0) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  if (hits == 0) {
    throw std::invalid_argument("average_precision: class has no positive images");
  }
  return sum / static_cast<double>(hits);
}

double map_score(const ScoreTable& table, const std::vector<std::size_t>& label_subset,
                 std::size_t* skipped) {
  table.validate();
  if (label_subset.empty()) {
    throw std::invalid_argument("map: label subset is empty");
  }
  std::vector<double> col_scores(table.num_images);
  std::vector<std::uint8_t> col_truth(table.num_images);
  double sum = 0.0;
  std::size_t included = 0;
  std::size_t zero_positive = 0;
  for (std::size_t label : label_subset) {
    if (label >= table.num_labels) {
      std::ostringstream os;
      os << "map: label index " << label << " out of range (have " << table.num_labels << ")";
      throw std::invalid_argument(os.str());
    }
    bool any = false;
    for (std::size_t i = 0; i < table.num_images; ++i) {
      col_scores[i] = table.score(i, label);
      col_truth[i] = table.truth[i * table.num_labels + label];
      any = any || col_truth[i] != 0;
    }
    if (!any) {
      ++zero_positive;
      continue;
    }
    sum += average_precision(col_scores, col_truth);
    ++included;
  }
  if (skipped != nullptr) {
    *skipped = zero_positive;
  }
  if (included == 0) {
    throw std::runtime_error("map: every class in the subset has zero positive images");
  }
  if (zero_positive > 0) {
    std::clog << "map: excluded " << zero_positive << " of " << label_subset.size()
              << " classes with zero positive images\n";
  }
  return sum / static_cast<double>(included);
}

Prf topk_prf(const ScoreTable& table, std::size_t k, const std::vector<std::size_t>& label_subset) {
  table.validate();
  if (label_subset.empty()) {
    throw std::invalid_argument("topk: label subset is empty");
  }
  if (k == 0 || k > label_subset.size()) {
    std::ostringstream os;
    os << "topk: k must be in [1, " << label_subset.size() << "], got " << k;
    throw std::invalid_argument(os.str());
  }
  for (std::size_t label : label_subset) {
    if (label >= table.num_labels) {
      std::ostringstream os;
      os << "topk: label index " << label << " out of range (have " << table.num_labels << ")";
      throw std::invalid_argument(os.str());
    }
  }
  std::size_t hits = 0;
  std::size_t total_positives = 0;
  std::vector<std::size_t> order(label_subset.size());
  for (std::size_t i = 0; i < table.num_images; ++i) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double sa = table.score(i, label_subset[a]);
      const double sb = table.score(i, label_subset[b]);
      if (sa != sb) return sa > sb;
      return label_subset[a] < label_subset[b];
    });
    for (std::size_t r = 0; r < k; ++r) {
      if (table.positive(i, label_subset[order[r]])) ++hits;
    }
    for (std::size_t label : label_subset) {
      if (table.positive(i, label)) ++total_positives;
    }
  }
  Prf out;
  out.precision = static_cast<double>(hits) /
                  static_cast<double>(k * table.num_images);
  out.recall = total_positives == 0
                   ? 0.0
                   : static_cast<double>(hits) / static_cast<double>(total_positives);
  const double pr = out.precision + out.recall;
  out.f1 = pr == 0.0 ? 0.0 : 2.0 * out.precision * out.recall / pr;
  return out;
}

EvalReport evaluate(const ScoreTable& table, const LabelSpace& space, Protocol protocol,
                    const std::vector<std::size_t>& ks) {
  table.validate();
  if (table.num_labels != space.num_labels()) {
    std::ostringstream os;
    os << "evaluate: table has " << table.num_labels << " labels, space has "
       << space.num_labels();
    throw std::invalid_argument(os.str());
  }
  std::vector<std::size_t> subset;
  EvalReport report;
  if (protocol == Protocol::Zsl) {
    report.protocol = "zsl";
    subset = space.indices(LabelSubset::Unseen);
    if (subset.empty()) {
      throw std::invalid_argument("evaluate: zsl protocol requires at least one unseen label");
    }
  } else {
    report.protocol = "gzsl";
    subset = space.indices(LabelSubset::All);
  }
  std::size_t skipped = 0;
  report.map = map_score(table, subset, &skipped);
  report.classes_skipped = skipped;
  report.classes_evaluated = subset.size() - skipped;
  for (std::size_t k : ks) {
    const Prf prf = topk_prf(table, k, subset);
    KMetrics km;
    km.k = k;
    km.precision = prf.precision;
    km.recall = prf.recall;
    km.f1 = prf.f1;
    report.per_k.push_back(km);
  }
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["protocol"] = protocol;
  j["map"] = map;
  j["classes_evaluated"] = classes_evaluated;
  j["classes_skipped"] = classes_skipped;
  nlohmann::ordered_json ks = nlohmann::ordered_json::array();
  for (const KMetrics& km : per_k) {
    nlohmann::ordered_json entry;
    entry["k"] = km.k;
    entry["precision"] = km.precision;
    entry["recall"] = km.recall;
    entry["f1"] = km.f1;
    ks.push_back(entry);
  }
  j["per_k"] = ks;
  return j.dump();
}

}  // namespace epsilon
