#include "epsilon/labelspace.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace epsilon {

namespace {

std::string trimmed(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

LabelSpace::LabelSpace(std::vector<std::string> names, std::vector<bool> seen_mask,
                       Tensor embeddings)
    : names_(std::move(names)), seen_mask_(std::move(seen_mask)), embeddings_(std::move(embeddings)) {
  const std::size_t c = names_.size();
  if (c == 0) throw std::invalid_argument("labelspace: empty vocabulary");
  if (seen_mask_.size() != c) {
    throw std::invalid_argument("labelspace: mask size " + std::to_string(seen_mask_.size()) +
                                " does not match " + std::to_string(c) + " labels");
  }
  if (!embeddings_.defined() || embeddings_.rank() != 2 || embeddings_.shape()[0] != c) {
    throw std::invalid_argument("labelspace: embeddings must be [" + std::to_string(c) +
                                ", d_w]");
  }
  std::unordered_set<std::string> seen_names;
  for (const auto& n : names_) {
    if (n.empty()) throw std::invalid_argument("labelspace: empty label name");
    if (!seen_names.insert(n).second) {
      throw std::invalid_argument("labelspace: duplicate label '" + n + "'");
    }
  }
  const std::size_t dw = embeddings_.shape()[1];
  const auto e = embeddings_.data();
  for (std::size_t i = 0; i < c; ++i) {
    bool all_zero = true;
    for (std::size_t j = 0; j < dw; ++j) {
      const double v = e[i * dw + j];
      if (!std::isfinite(v)) {
        throw std::invalid_argument("labelspace: non-finite embedding for '" + names_[i] + "'");
      }
      if (v != 0.0) all_zero = false;
    }
    if (all_zero) {
      throw std::invalid_argument("labelspace: zero embedding row for '" + names_[i] + "'");
    }
  }
  for (std::size_t i = 0; i < c; ++i) {
    all_indices_.push_back(i);
    if (seen_mask_[i]) {
      seen_indices_.push_back(i);
      ++seen_count_;
    } else {
      unseen_indices_.push_back(i);
    }
  }
}

const std::vector<std::size_t>& LabelSpace::indices(LabelSubset subset) const {
  switch (subset) {
    case LabelSubset::Seen:
      return seen_indices_;
    case LabelSubset::Unseen:
      return unseen_indices_;
    case LabelSubset::All:
      return all_indices_;
  }
  throw std::invalid_argument("labelspace: bad subset");
}

std::size_t LabelSpace::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  throw std::invalid_argument("labelspace: unknown label '" + name + "'");
}

bool LabelSpace::contains(const std::string& name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

LabelSpace load_labelspace(const std::string& embedding_file,
                           const std::string& unseen_list_file) {
  std::ifstream in(embedding_file);
  if (!in) throw std::runtime_error("labelspace: cannot open '" + embedding_file + "'");

  std::vector<std::string> names;
  std::vector<double> values;
  std::size_t dw = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trimmed(line);
    if (t.empty()) continue;
    const auto tab = t.find('\t');
    if (tab == std::string::npos) {
      throw std::invalid_argument("labelspace: line " + std::to_string(line_no) + " of '" +
                                  embedding_file + "' has no tab separator");
    }
    names.push_back(t.substr(0, tab));
    std::istringstream fields(t.substr(tab + 1));
    std::size_t count = 0;
    double v;
    while (fields >> v) {
      values.push_back(v);
      ++count;
    }
    if (!fields.eof()) {
      throw std::invalid_argument("labelspace: unparsable number on line " +
                                  std::to_string(line_no) + " of '" + embedding_file + "'");
    }
    if (dw == 0) {
      dw = count;
    } else if (count != dw) {
      throw std::invalid_argument("labelspace: line " + std::to_string(line_no) + " has " +
                                  std::to_string(count) + " values, expected " +
                                  std::to_string(dw));
    }
  }
  if (names.empty()) throw std::invalid_argument("labelspace: no labels in '" + embedding_file + "'");
  if (dw == 0) throw std::invalid_argument("labelspace: zero-width embeddings");

  std::vector<bool> seen(names.size(), true);
  std::ifstream ul(unseen_list_file);
  if (!ul) throw std::runtime_error("labelspace: cannot open '" + unseen_list_file + "'");
  std::string uline;
  while (std::getline(ul, uline)) {
    const std::string name = trimmed(uline);
    if (name.empty()) continue;
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) {
      throw std::invalid_argument("labelspace: unseen label '" + name +
                                  "' is not in the vocabulary");
    }
    seen[static_cast<std::size_t>(it - names.begin())] = false;
  }

  const std::size_t c = names.size();
  LabelSpace space(std::move(names), std::move(seen),
                   Tensor::from_data({c, dw}, std::move(values)));
  std::clog << "labelspace: " << space.num_labels() << " labels (" << space.num_seen()
            << " seen / " << space.num_unseen() << " unseen), d_w=" << dw << "\n";
  return space;
}

void save_labelspace(const LabelSpace& space, const std::string& embedding_file,
                     const std::string& unseen_list_file) {
  std::ofstream out(embedding_file);
  if (!out) throw std::runtime_error("labelspace: cannot write '" + embedding_file + "'");
  const std::size_t dw = space.dim();
  const auto e = space.embeddings().data();
  char buf[32];
  for (std::size_t i = 0; i < space.num_labels(); ++i) {
    out << space.name(i) << '\t';
    for (std::size_t j = 0; j < dw; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", e[i * dw + j]);
      out << buf << (j + 1 == dw ? "" : " ");
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("labelspace: write failed for '" + embedding_file + "'");

  std::ofstream ul(unseen_list_file);
  if (!ul) throw std::runtime_error("labelspace: cannot write '" + unseen_list_file + "'");
  for (std::size_t i : space.indices(LabelSubset::Unseen)) ul << space.name(i) << '\n';
  if (!ul) throw std::runtime_error("labelspace: write failed for '" + unseen_list_file + "'");
}

std::vector<double> score_labels(const Tensor& semantic_group, const LabelSpace& space,
                                 LabelSubset subset) {
  if (!semantic_group.defined() || semantic_group.rank() != 2) {
    throw std::invalid_argument("score_labels: semantic group must be [M, d_w]");
  }
  const std::size_t m = semantic_group.shape()[0];
  const std::size_t dw = semantic_group.shape()[1];
  if (dw != space.dim()) {
    throw std::invalid_argument("score_labels: semantic dim " + std::to_string(dw) +
                                " does not match embedding dim " + std::to_string(space.dim()));
  }
  const auto s = semantic_group.data();
  const auto e = space.embeddings().data();
  const auto& idx = space.indices(subset);
  std::vector<double> scores;
  scores.reserve(idx.size());
  for (std::size_t c : idx) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < dw; ++j) dot += s[r * dw + j] * e[c * dw + j];
      best = std::max(best, dot);
    }
    scores.push_back(best);
  }
  return scores;
}

std::vector<std::size_t> rank_labels(const std::vector<double>& scores, std::size_t k) {
  if (k > scores.size()) {
    throw std::invalid_argument("rank_labels: k=" + std::to_string(k) + " exceeds " +
                                std::to_string(scores.size()) + " scores");
  }
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&scores](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  order.resize(k);
  return order;
}

}  // namespace epsilon
