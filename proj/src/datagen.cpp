#include "epsilon/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "binio.hpp"
#include "epsilon/rng.hpp"
#include "epsilon/tensor.hpp"

namespace epsilon {

using detail::get_u32;
using detail::put_u32;
using detail::slurp;
using detail::write_file;

namespace {

constexpr std::uint8_t kEpsfVersion = 1;
constexpr std::size_t kHeaderDimsOffset = 9;  // magic(4) + version(1) + rank(4)

std::string padded_name(const char* stem, std::size_t i, std::size_t count) {
  const std::size_t width = std::to_string(count == 0 ? 0 : count - 1).size();
  std::string digits = std::to_string(i);
  std::string out = stem;
  out.append(width - digits.size(), '0');
  out += digits;
  return out;
}

}  // namespace

void SynthConfig::validate() const {
  std::ostringstream os;
  if (num_seen < 2) {
    os << "synth config: num_seen must be at least 2 (a ranking needs a positive and a "
          "negative), got "
       << num_seen;
    throw std::invalid_argument(os.str());
  }
  if (num_unseen < 1) {
    throw std::invalid_argument("synth config: num_unseen must be positive");
  }
  if (d_w == 0 || D == 0 || N == 0) {
    throw std::invalid_argument("synth config: d_w, D and N must be positive");
  }
  if (d_w > D) {
    os << "synth config: d_w (" << d_w << ") must not exceed D (" << D
       << "); the token map must be invertible for decoding probes";
    throw std::invalid_argument(os.str());
  }
  if (min_labels < 1 || min_labels > max_labels) {
    os << "synth config: labels-per-image range [" << min_labels << ", " << max_labels
       << "] is invalid";
    throw std::invalid_argument(os.str());
  }
  if (max_labels > num_seen) {
    os << "synth config: max_labels (" << max_labels << ") exceeds num_seen (" << num_seen
       << "); train images carry seen labels only";
    throw std::invalid_argument(os.str());
  }
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
    throw std::invalid_argument("synth config: noise_sigma must be finite and >= 0");
  }
  if (train_size == 0 || test_size == 0) {
    throw std::invalid_argument("synth config: train_size and test_size must be positive");
  }
}

void Split::validate() const {
  if (num_images == 0 || N == 0 || D == 0 || C == 0) {
    throw std::invalid_argument("split: num_images, N, D and C must be positive");
  }
  if (features.size() != num_images * N * D) {
    std::ostringstream os;
    os << "split: expected " << num_images * N * D << " feature values, got " << features.size();
    throw std::invalid_argument(os.str());
  }
  if (labels.size() != num_images * C) {
    std::ostringstream os;
    os << "split: expected " << num_images * C << " label entries, got " << labels.size();
    throw std::invalid_argument(os.str());
  }
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (!std::isfinite(features[i])) {
      std::ostringstream os;
      os << "split: non-finite feature at flat index " << i;
      throw std::invalid_argument(os.str());
    }
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > 1) {
      std::ostringstream os;
      os << "split: labels must be 0/1, got " << static_cast<int>(labels[i]) << " at flat index "
         << i;
      throw std::invalid_argument(os.str());
    }
  }
}

Dataset generate(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.num_labels();
  CounterRng rng(CounterRng::derive(cfg.seed, 2));

  std::vector<std::string> names;
  std::vector<bool> mask;
  names.reserve(C);
  mask.reserve(C);
  for (std::size_t i = 0; i < cfg.num_seen; ++i) {
    names.push_back(padded_name("seen_", i, cfg.num_seen));
    mask.push_back(true);
  }
  for (std::size_t i = 0; i < cfg.num_unseen; ++i) {
    names.push_back(padded_name("unseen_", i, cfg.num_unseen));
    mask.push_back(false);
  }

  // Unit-norm label embeddings, one row per class.
  Tensor emb = Tensor::zeros({C, cfg.d_w});
  double* e = emb.mutable_data().data();
  for (std::size_t c = 0; c < C; ++c) {
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (std::size_t j = 0; j < cfg.d_w; ++j) {
        const double v = rng.gaussian();
        e[c * cfg.d_w + j] = v;
        norm2 += v * v;
      }
    } while (norm2 == 0.0);
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t j = 0; j < cfg.d_w; ++j) {
      e[c * cfg.d_w + j] *= inv;
    }
  }
  LabelSpace space(std::move(names), std::move(mask), emb);

  // One fixed linear map from embedding space into token space.
  std::vector<double> hidden(cfg.D * cfg.d_w);
  for (double& h : hidden) {
    h = rng.gaussian();
  }

  const auto make_split = [&](std::size_t count, bool seen_only) {
    Split s;
    s.num_images = count;
    s.N = cfg.N;
    s.D = cfg.D;
    s.C = C;
    s.features.assign(count * cfg.N * cfg.D, 0.0);
    s.labels.assign(count * C, 0);

    std::vector<std::size_t> pool_template;
    if (seen_only) {
      pool_template = space.indices(LabelSubset::Seen);
    } else {
      pool_template.resize(C);
      for (std::size_t c = 0; c < C; ++c) pool_template[c] = c;
    }

    std::vector<std::size_t> pool;
    const std::size_t span = cfg.max_labels - cfg.min_labels + 1;
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t k = cfg.min_labels + rng.uniform_int(span);
      pool = pool_template;
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t pick = j + rng.uniform_int(pool.size() - j);
        std::swap(pool[j], pool[pick]);
      }
      for (std::size_t j = 0; j < k; ++j) {
        s.labels[i * C + pool[j]] = 1;
      }
      double* img = s.features.data() + i * cfg.N * cfg.D;
      for (std::size_t t = 0; t < cfg.N; ++t) {
        const std::size_t c = pool[t % k];
        const double* ec = e + c * cfg.d_w;
        double* out = img + t * cfg.D;
        for (std::size_t d = 0; d < cfg.D; ++d) {
          double v = 0.0;
          const double* hrow = hidden.data() + d * cfg.d_w;
          for (std::size_t j = 0; j < cfg.d_w; ++j) {
            v += hrow[j] * ec[j];
          }
          if (cfg.noise_sigma > 0.0) {
            v += cfg.noise_sigma * rng.gaussian();
          }
          out[d] = v;
        }
      }
    }
    return s;
  };

  Split train = make_split(cfg.train_size, /*seen_only=*/true);
  Split test = make_split(cfg.test_size, /*seen_only=*/false);
  return Dataset{std::move(space), std::move(train), std::move(test), std::move(hidden)};
}

void write_epsf(const std::string& path, const std::vector<std::size_t>& dims,
                const std::vector<double>& values) {
  if (dims.empty() || dims.size() > 8) {
    throw std::invalid_argument("epsf: rank must be in [1, 8]");
  }
  std::size_t numel = 1;
  for (std::size_t d : dims) {
    if (d == 0) {
      throw std::invalid_argument("epsf: zero dimension");
    }
    if (d > 0xffffffffull) {
      throw std::invalid_argument("epsf: dimension exceeds the u32 header field");
    }
    if (numel > std::numeric_limits<std::size_t>::max() / d) {
      throw std::invalid_argument("epsf: element count overflows");
    }
    numel *= d;
  }
  if (numel != values.size()) {
    std::ostringstream os;
    os << "epsf: dims imply " << numel << " values, got " << values.size();
    throw std::invalid_argument(os.str());
  }

  std::string buf;
  buf.reserve(kHeaderDimsOffset + 4 * dims.size() + 4 * numel);
  buf += "EPSF";
  buf.push_back(static_cast<char>(kEpsfVersion));
  put_u32(buf, static_cast<std::uint32_t>(dims.size()));
  for (std::size_t d : dims) {
    put_u32(buf, static_cast<std::uint32_t>(d));
  }
  for (double v : values) {
    const float f = static_cast<float>(v);
    std::uint32_t bits = 0;
    std::memcpy(&bits, &f, sizeof bits);
    put_u32(buf, bits);
  }
  write_file(path, buf);
}

EpsfTensor read_epsf(const std::string& path) {
  const std::string s = slurp(path);
  const auto need = [&](std::size_t off, std::size_t n, const char* what) {
    if (s.size() < off + n) {
      std::ostringstream os;
      os << "epsf: truncated " << what << " at offset " << off << " in " << path;
      throw std::runtime_error(os.str());
    }
  };

  need(0, 4, "magic");
  if (s.compare(0, 4, "EPSF") != 0) {
    throw std::runtime_error("epsf: bad magic at offset 0 in " + path);
  }
  need(4, 1, "version");
  if (static_cast<unsigned char>(s[4]) != kEpsfVersion) {
    std::ostringstream os;
    os << "epsf: unsupported version " << static_cast<int>(static_cast<unsigned char>(s[4]))
       << " at offset 4 in " << path;
    throw std::runtime_error(os.str());
  }
  need(5, 4, "rank");
  const std::uint32_t rank = get_u32(s, 5);
  if (rank < 1 || rank > 8) {
    std::ostringstream os;
    os << "epsf: implausible rank " << rank << " at offset 5 in " << path;
    throw std::runtime_error(os.str());
  }

  need(kHeaderDimsOffset, 4 * static_cast<std::size_t>(rank), "dims");
  EpsfTensor t;
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::size_t off = kHeaderDimsOffset + 4 * static_cast<std::size_t>(i);
    const std::uint32_t d = get_u32(s, off);
    if (d == 0) {
      std::ostringstream os;
      os << "epsf: zero dimension at offset " << off << " in " << path;
      throw std::runtime_error(os.str());
    }
    if (numel > std::numeric_limits<std::size_t>::max() / 8 / d) {
      std::ostringstream os;
      os << "epsf: dimension overflow at offset " << off << " in " << path;
      throw std::runtime_error(os.str());
    }
    numel *= d;
    t.dims.push_back(d);
  }

  const std::size_t payload = kHeaderDimsOffset + 4 * static_cast<std::size_t>(rank);
  const std::size_t want = payload + 4 * numel;
  if (s.size() < want) {
    std::ostringstream os;
    os << "epsf: truncated payload in " << path << ": header implies " << want
       << " bytes, file has " << s.size() << " (offset " << s.size() << ")";
    throw std::runtime_error(os.str());
  }
  if (s.size() > want) {
    std::ostringstream os;
    os << "epsf: trailing bytes at offset " << want << " in " << path;
    throw std::runtime_error(os.str());
  }

  t.values.resize(numel);
  for (std::size_t i = 0; i < numel; ++i) {
    const std::uint32_t bits = get_u32(s, payload + 4 * i);
    float f = 0.0f;
    std::memcpy(&f, &bits, sizeof f);
    t.values[i] = static_cast<double>(f);
  }
  return t;
}

void write_labels_file(const Split& split, const LabelSpace& space, const std::string& path) {
  split.validate();
  if (split.C != space.num_labels()) {
    std::ostringstream os;
    os << "labels file: split has " << split.C << " classes, space has " << space.num_labels();
    throw std::invalid_argument(os.str());
  }
  std::ostringstream out;
  char id[32];
  for (std::size_t i = 0; i < split.num_images; ++i) {
    std::snprintf(id, sizeof id, "img_%06zu", i);
    out << id << '\t';
    bool first = true;
    for (std::size_t c = 0; c < split.C; ++c) {
      if (!split.positive(i, c)) continue;
      if (!first) out << ',';
      out << space.name(c);
      first = false;
    }
    out << '\n';
  }
  write_file(path, out.str());
}

Split ingest_external(const std::string& features_path, const std::string& labels_path,
                      const LabelSpace& space, std::size_t expected_n, std::size_t expected_d) {
  const EpsfTensor t = read_epsf(features_path);
  if (t.dims.size() != 3) {
    std::ostringstream os;
    os << "feature file " << features_path << " must be rank 3 (images x tokens x channels), got "
       << t.dims.size();
    throw std::invalid_argument(os.str());
  }
  if (expected_n != 0 && t.dims[1] != expected_n) {
    std::ostringstream os;
    os << "token count mismatch: " << features_path << " has N=" << t.dims[1]
       << ", config wants N=" << expected_n;
    throw std::invalid_argument(os.str());
  }
  if (expected_d != 0 && t.dims[2] != expected_d) {
    std::ostringstream os;
    os << "channel width mismatch: " << features_path << " has D=" << t.dims[2]
       << ", config wants D=" << expected_d;
    throw std::invalid_argument(os.str());
  }

  const std::string text = slurp(labels_path);
  Split s;
  s.num_images = t.dims[0];
  s.N = t.dims[1];
  s.D = t.dims[2];
  s.C = space.num_labels();
  s.features = t.values;
  s.labels.assign(s.num_images * s.C, 0);

  std::istringstream lines(text);
  std::string line;
  std::size_t row = 0;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      std::ostringstream os;
      os << labels_path << " line " << line_no << ": missing tab separator";
      throw std::invalid_argument(os.str());
    }
    if (row >= s.num_images) {
      std::ostringstream os;
      os << labels_path << " has more lines than the " << s.num_images
         << " images in " << features_path;
      throw std::invalid_argument(os.str());
    }
    std::string rest = line.substr(tab + 1);
    std::size_t begin = 0;
    while (!rest.empty() && begin <= rest.size()) {
      std::size_t comma = rest.find(',', begin);
      if (comma == std::string::npos) comma = rest.size();
      const std::string name = rest.substr(begin, comma - begin);
      if (name.empty()) {
        std::ostringstream os;
        os << labels_path << " line " << line_no << ": empty label name";
        throw std::invalid_argument(os.str());
      }
      std::size_t idx = 0;
      try {
        idx = space.index_of(name);
      } catch (const std::invalid_argument& e) {
        std::ostringstream os;
        os << labels_path << " line " << line_no << ": " << e.what();
        throw std::invalid_argument(os.str());
      }
      if (s.labels[row * s.C + idx] != 0) {
        std::ostringstream os;
        os << labels_path << " line " << line_no << ": duplicate label '" << name << "'";
        throw std::invalid_argument(os.str());
      }
      s.labels[row * s.C + idx] = 1;
      begin = comma + 1;
    }
    ++row;
  }
  if (row != s.num_images) {
    std::ostringstream os;
    os << labels_path << " has " << row << " lines but " << features_path << " has "
       << s.num_images << " images";
    throw std::invalid_argument(os.str());
  }
  s.validate();
  return s;
}

void write_dataset(const Dataset& ds, const std::string& prefix) {
  save_labelspace(ds.space, prefix + ".labels.tsv", prefix + ".unseen.txt");
  write_epsf(prefix + ".train.epsf", {ds.train.num_images, ds.train.N, ds.train.D},
             ds.train.features);
  write_labels_file(ds.train, ds.space, prefix + ".train.labels");
  write_epsf(prefix + ".test.epsf", {ds.test.num_images, ds.test.N, ds.test.D},
             ds.test.features);
  write_labels_file(ds.test, ds.space, prefix + ".test.labels");
  if (!ds.hidden_map.empty()) {
    const std::size_t d_w = ds.space.dim();
    write_epsf(prefix + ".hidden.epsf", {ds.hidden_map.size() / d_w, d_w}, ds.hidden_map);
  }
}

Dataset read_dataset(const std::string& prefix) {
  LabelSpace space = load_labelspace(prefix + ".labels.tsv", prefix + ".unseen.txt");
  Split train = ingest_external(prefix + ".train.epsf", prefix + ".train.labels", space);
  Split test = ingest_external(prefix + ".test.epsf", prefix + ".test.labels", space);
  if (train.N != test.N || train.D != test.D) {
    std::ostringstream os;
    os << "dataset " << prefix << ": train split is " << train.N << "x" << train.D
       << " per image, test split is " << test.N << "x" << test.D;
    throw std::runtime_error(os.str());
  }
  std::vector<double> hidden;
  const std::string hidden_path = prefix + ".hidden.epsf";
  if (std::filesystem::exists(hidden_path)) {
    const EpsfTensor h = read_epsf(hidden_path);
    if (h.dims.size() != 2 || h.dims[1] != space.dim()) {
      throw std::runtime_error("dataset " + prefix + ": hidden map has unexpected shape");
    }
    hidden = h.values;
  }
  return Dataset{std::move(space), std::move(train), std::move(test), std::move(hidden)};
}

}  // namespace epsilon
