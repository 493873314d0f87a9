#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "epsilon/labelspace.hpp"

namespace epsilon {

// Synthetic corpus knobs. Defaults are sized for seconds-scale runs.
struct SynthConfig {
  std::size_t num_seen = 20;
  std::size_t num_unseen = 5;
  std::size_t d_w = 32;  // label embedding width
  std::size_t D = 64;    // token width
  std::size_t N = 16;    // tokens per image
  std::size_t min_labels = 1;
  std::size_t max_labels = 3;
  double noise_sigma = 0.3;
  std::size_t train_size = 512;
  std::size_t test_size = 128;
  std::uint64_t seed = 0;

  std::size_t num_labels() const { return num_seen + num_unseen; }
  void validate() const;  // throws std::invalid_argument
};

// One split of images: features are row-major images x N x D, labels are
// binary rows over the full vocabulary.
struct Split {
  std::size_t num_images = 0;
  std::size_t N = 0;
  std::size_t D = 0;
  std::size_t C = 0;
  std::vector<double> features;
  std::vector<std::uint8_t> labels;

  void validate() const;
  const double* image(std::size_t i) const { return features.data() + i * N * D; }
  bool positive(std::size_t i, std::size_t c) const { return labels[i * C + c] != 0; }
};

struct Dataset {
  LabelSpace space;
  Split train;  // only seen labels appear here, each image has >= 1
  Split test;   // may carry unseen positives
  std::vector<double> hidden_map;  // the generator's D x d_w linear map, kept
                                   // so probes can invert the construction
};

// Pure function of cfg: same config reproduces identical bytes. Tokens are
// H * e_c for the image's active labels (assigned round-robin over the N
// token slots) plus gaussian noise scaled by noise_sigma.
Dataset generate(const SynthConfig& cfg);

// Binary tensor container: magic "EPSF", version byte, rank and dims as
// unsigned 32-bit little-endian, then the row-major payload as 32-bit
// little-endian floats. Writing quantizes to f32; reading upcasts to f64, so
// write -> read -> write reproduces the file byte for byte.
struct EpsfTensor {
  std::vector<std::size_t> dims;
  std::vector<double> values;
};
void write_epsf(const std::string& path, const std::vector<std::size_t>& dims,
                const std::vector<double>& values);
EpsfTensor read_epsf(const std::string& path);

// Label text file: one image per line, `image_id<TAB>name1,name2,...`
// (names ascending by vocabulary index; the tab is kept for label-free
// images).
void write_labels_file(const Split& split, const LabelSpace& space, const std::string& path);

// Builds a split from an EPSF feature file plus a label file whose names must
// all exist in `space`. expected_n / expected_d of 0 accept the file's dims.
Split ingest_external(const std::string& features_path, const std::string& labels_path,
                      const LabelSpace& space, std::size_t expected_n = 0,
                      std::size_t expected_d = 0);

// On-disk dataset family: <prefix>.labels.tsv, <prefix>.unseen.txt,
// <prefix>.{train,test}.epsf, <prefix>.{train,test}.labels. The hidden map is
// emitted as <prefix>.hidden.epsf so decoding probes survive a round trip.
void write_dataset(const Dataset& ds, const std::string& prefix);
Dataset read_dataset(const std::string& prefix);

}  // namespace epsilon
