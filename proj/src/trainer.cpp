#include "epsilon/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "binio.hpp"
#include "epsilon/rng.hpp"
#include "json.hpp"

namespace epsilon {

namespace {

constexpr std::uint8_t kCheckpointVersion = 1;

double bits_to_double(std::uint64_t bits) {
  double d = 0.0;
  std::memcpy(&d, &bits, sizeof d);
  return d;
}

std::uint64_t double_to_bits(double d) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &d, sizeof bits);
  return bits;
}

}  // namespace

void OptimConfig::validate() const {
  std::ostringstream os;
  if (!(lr > 0.0) || !std::isfinite(lr)) {
    os << "optim config: lr must be positive and finite, got " << lr;
    throw std::invalid_argument(os.str());
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    os << "optim config: weight_decay must be >= 0, got " << weight_decay;
    throw std::invalid_argument(os.str());
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    os << "optim config: betas must lie in [0, 1), got " << beta1 << " and " << beta2;
    throw std::invalid_argument(os.str());
  }
  if (!(eps > 0.0) || !std::isfinite(eps)) {
    os << "optim config: eps must be positive, got " << eps;
    throw std::invalid_argument(os.str());
  }
  if (epochs == 0 || batch_size == 0 || halve_at_epoch == 0) {
    throw std::invalid_argument("optim config: epochs, batch_size and halve_at_epoch must be >= 1");
  }
}

AdamState make_adam_state(const EpsilonParams& params) {
  AdamState state;
  for (const auto& [name, tensor] : params.named()) {
    (void)name;
    state.m.emplace_back(tensor.data().size(), 0.0);
    state.v.emplace_back(tensor.data().size(), 0.0);
  }
  return state;
}

double lr_schedule(std::size_t epoch, const OptimConfig& cfg) {
  if (epoch == 0) {
    throw std::invalid_argument("lr_schedule: epochs are 1-based");
  }
  return epoch < cfg.halve_at_epoch ? cfg.lr : cfg.lr * 0.5;
}

void adam_step(EpsilonParams& params, AdamState& state, const OptimConfig& cfg, double lr_now) {
  const auto named = params.named();
  if (state.m.size() != named.size() || state.v.size() != named.size()) {
    std::ostringstream os;
    os << "adam: state holds " << state.m.size() << " buffers for " << named.size()
       << " parameters";
    throw std::invalid_argument(os.str());
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t p = 0; p < named.size(); ++p) {
    Tensor tensor = named[p].second;
    auto data = tensor.mutable_data();
    std::vector<double>& m = state.m[p];
    std::vector<double>& v = state.v[p];
    if (m.size() != data.size() || v.size() != data.size()) {
      throw std::invalid_argument("adam: moment shape mismatch for " + named[p].first);
    }
    const bool decay =
        cfg.weight_decay > 0.0 &&
        (!cfg.decay_weights_only || EpsilonParams::decayable(named[p].first, tensor));
    std::span<const double> g;
    if (tensor.has_grad()) {
      g = tensor.grad();
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double update = mhat / (std::sqrt(vhat) + cfg.eps);
      if (decay) {
        update += cfg.weight_decay * data[i];
      }
      data[i] -= lr_now * update;
    }
  }
}

std::string EpochRecord::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["lr"] = lr;
  j["mean_loss"] = mean_loss;
  j["zsl_map"] = zsl_map;
  j["gzsl_map"] = gzsl_map;
  nlohmann::ordered_json f1s;
  f1s["zsl"] = zsl_f1s;
  f1s["gzsl"] = gzsl_f1s;
  j["f1s"] = f1s;
  return j.dump();
}

std::string TrainResult::history_jsonl() const {
  std::string out;
  for (const EpochRecord& rec : history) {
    out += rec.to_json();
    out += '\n';
  }
  return out;
}

namespace {

void put_tensor(std::string& buf, const std::string& name, const std::vector<std::size_t>& dims,
                const double* values, std::size_t count) {
  if (name.size() > 0xffff) {
    throw std::invalid_argument("checkpoint: tensor name too long: " + name);
  }
  detail::put_u16(buf, static_cast<std::uint16_t>(name.size()));
  buf += name;
  detail::put_u32(buf, static_cast<std::uint32_t>(dims.size()));
  for (std::size_t d : dims) {
    detail::put_u32(buf, static_cast<std::uint32_t>(d));
  }
  for (std::size_t i = 0; i < count; ++i) {
    detail::put_u64(buf, double_to_bits(values[i]));
  }
}

struct RawTensor {
  std::string name;
  std::vector<std::size_t> dims;
  std::vector<double> values;
};

std::vector<double> model_meta(const ModelConfig& m) {
  return {static_cast<double>(m.M),
          static_cast<double>(m.D),
          static_cast<double>(m.N),
          static_cast<double>(m.d_w),
          static_cast<double>(m.encoder_layers),
          static_cast<double>(m.encoder_heads),
          static_cast<double>(m.mlp_hidden),
          m.cross_attn_projected ? 1.0 : 0.0,
          m.use_gpa ? 1.0 : 0.0,
          m.use_gfp ? 1.0 : 0.0};
}

std::vector<double> optim_meta(const OptimConfig& o) {
  return {o.lr,
          o.weight_decay,
          o.beta1,
          o.beta2,
          o.eps,
          static_cast<double>(o.epochs),
          static_cast<double>(o.batch_size),
          static_cast<double>(o.halve_at_epoch),
          o.decay_weights_only ? 1.0 : 0.0,
          bits_to_double(o.seed)};  // raw bit pattern, never used arithmetically
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  ckpt.model.validate();
  ckpt.optim.validate();
  ckpt.loss.validate();
  const auto named = ckpt.params.named();
  if (ckpt.adam.m.size() != named.size() || ckpt.adam.v.size() != named.size()) {
    throw std::invalid_argument("checkpoint: optimizer state does not match the parameter list");
  }

  std::string buf;
  buf += "EPSC";
  buf.push_back(static_cast<char>(kCheckpointVersion));
  const std::size_t count = 3 * named.size() + 4;
  detail::put_u32(buf, static_cast<std::uint32_t>(count));

  for (const auto& [name, tensor] : named) {
    put_tensor(buf, name, tensor.shape(), tensor.data().data(), tensor.data().size());
  }
  for (std::size_t p = 0; p < named.size(); ++p) {
    if (ckpt.adam.m[p].size() != named[p].second.data().size()) {
      throw std::invalid_argument("checkpoint: first-moment shape mismatch for " + named[p].first);
    }
    put_tensor(buf, "adam.m." + named[p].first, named[p].second.shape(), ckpt.adam.m[p].data(),
               ckpt.adam.m[p].size());
  }
  for (std::size_t p = 0; p < named.size(); ++p) {
    if (ckpt.adam.v[p].size() != named[p].second.data().size()) {
      throw std::invalid_argument("checkpoint: second-moment shape mismatch for " + named[p].first);
    }
    put_tensor(buf, "adam.v." + named[p].first, named[p].second.shape(), ckpt.adam.v[p].data(),
               ckpt.adam.v[p].size());
  }

  const std::vector<double> mm = model_meta(ckpt.model);
  put_tensor(buf, "meta.model", {mm.size()}, mm.data(), mm.size());
  const std::vector<double> om = optim_meta(ckpt.optim);
  put_tensor(buf, "meta.optim", {om.size()}, om.data(), om.size());
  const std::vector<double> lm = {ckpt.loss.lambda, ckpt.loss.reg_across_groups ? 1.0 : 0.0};
  put_tensor(buf, "meta.loss", {lm.size()}, lm.data(), lm.size());
  const std::vector<double> pm = {static_cast<double>(ckpt.epochs_completed),
                                  static_cast<double>(ckpt.adam.t),
                                  bits_to_double(ckpt.shuffle_rng_state)};
  put_tensor(buf, "meta.progress", {pm.size()}, pm.data(), pm.size());

  detail::write_file(path, buf);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string s = detail::slurp(path);
  std::size_t off = 0;
  const auto need = [&](std::size_t n, const char* what) {
    if (s.size() < off + n) {
      std::ostringstream os;
      os << "checkpoint: truncated " << what << " at offset " << off << " in " << path;
      throw std::runtime_error(os.str());
    }
  };

  need(4, "magic");
  if (s.compare(0, 4, "EPSC") != 0) {
    throw std::runtime_error("checkpoint: bad magic at offset 0 in " + path);
  }
  off = 4;
  need(1, "version");
  if (static_cast<unsigned char>(s[off]) != kCheckpointVersion) {
    std::ostringstream os;
    os << "checkpoint: unsupported version "
       << static_cast<int>(static_cast<unsigned char>(s[off])) << " at offset " << off << " in "
       << path;
    throw std::runtime_error(os.str());
  }
  off = 5;
  need(4, "tensor count");
  const std::uint32_t count = detail::get_u32(s, off);
  off += 4;

  std::vector<RawTensor> raws;
  raws.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    RawTensor raw;
    need(2, "name length");
    const std::uint16_t name_len = detail::get_u16(s, off);
    off += 2;
    need(name_len, "name");
    raw.name = s.substr(off, name_len);
    off += name_len;
    need(4, "rank");
    const std::uint32_t rank = detail::get_u32(s, off);
    off += 4;
    if (rank < 1 || rank > 8) {
      std::ostringstream os;
      os << "checkpoint: implausible rank " << rank << " for " << raw.name << " at offset "
         << off - 4 << " in " << path;
      throw std::runtime_error(os.str());
    }
    need(4 * rank, "dims");
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = detail::get_u32(s, off);
      off += 4;
      if (dim == 0 || numel > std::numeric_limits<std::size_t>::max() / 8 / dim) {
        std::ostringstream os;
        os << "checkpoint: bad dimension " << dim << " for " << raw.name << " at offset "
           << off - 4 << " in " << path;
        throw std::runtime_error(os.str());
      }
      raw.dims.push_back(dim);
      numel *= dim;
    }
    need(8 * numel, "payload");
    raw.values.resize(numel);
    for (std::size_t k = 0; k < numel; ++k) {
      raw.values[k] = bits_to_double(detail::get_u64(s, off));
      off += 8;
    }
    raws.push_back(std::move(raw));
  }
  if (off != s.size()) {
    std::ostringstream os;
    os << "checkpoint: trailing bytes at offset " << off << " in " << path;
    throw std::runtime_error(os.str());
  }

  if (count < 4 || (count - 4) % 3 != 0) {
    std::ostringstream os;
    os << "checkpoint: implausible tensor count " << count << " in " << path;
    throw std::runtime_error(os.str());
  }
  const std::size_t P = (count - 4) / 3;
  const auto expect_meta = [&](std::size_t idx, const char* name, std::size_t len) {
    const RawTensor& raw = raws[idx];
    if (raw.name != name || raw.values.size() != len) {
      std::ostringstream os;
      os << "checkpoint: expected " << name << " with " << len << " entries, found " << raw.name
         << " with " << raw.values.size() << " in " << path;
      throw std::runtime_error(os.str());
    }
  };
  expect_meta(3 * P + 0, "meta.model", 10);
  expect_meta(3 * P + 1, "meta.optim", 10);
  expect_meta(3 * P + 2, "meta.loss", 2);
  expect_meta(3 * P + 3, "meta.progress", 3);

  Checkpoint ckpt;
  const std::vector<double>& mm = raws[3 * P + 0].values;
  ckpt.model.M = static_cast<std::size_t>(mm[0]);
  ckpt.model.D = static_cast<std::size_t>(mm[1]);
  ckpt.model.N = static_cast<std::size_t>(mm[2]);
  ckpt.model.d_w = static_cast<std::size_t>(mm[3]);
  ckpt.model.encoder_layers = static_cast<std::size_t>(mm[4]);
  ckpt.model.encoder_heads = static_cast<std::size_t>(mm[5]);
  ckpt.model.mlp_hidden = static_cast<std::size_t>(mm[6]);
  ckpt.model.cross_attn_projected = mm[7] != 0.0;
  ckpt.model.use_gpa = mm[8] != 0.0;
  ckpt.model.use_gfp = mm[9] != 0.0;

  const std::vector<double>& om = raws[3 * P + 1].values;
  ckpt.optim.lr = om[0];
  ckpt.optim.weight_decay = om[1];
  ckpt.optim.beta1 = om[2];
  ckpt.optim.beta2 = om[3];
  ckpt.optim.eps = om[4];
  ckpt.optim.epochs = static_cast<std::size_t>(om[5]);
  ckpt.optim.batch_size = static_cast<std::size_t>(om[6]);
  ckpt.optim.halve_at_epoch = static_cast<std::size_t>(om[7]);
  ckpt.optim.decay_weights_only = om[8] != 0.0;
  ckpt.optim.seed = double_to_bits(om[9]);

  const std::vector<double>& lm = raws[3 * P + 2].values;
  ckpt.loss.lambda = lm[0];
  ckpt.loss.reg_across_groups = lm[1] != 0.0;

  const std::vector<double>& pm = raws[3 * P + 3].values;
  ckpt.epochs_completed = static_cast<std::size_t>(pm[0]);
  const std::uint64_t adam_t = static_cast<std::uint64_t>(pm[1]);
  ckpt.shuffle_rng_state = double_to_bits(pm[2]);

  try {
    ckpt.model.validate();
    ckpt.optim.validate();
    ckpt.loss.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error("checkpoint: invalid stored config in " + path + ": " + e.what());
  }

  ckpt.params = EpsilonParams::init(ckpt.model, 0);
  const auto named = ckpt.params.named();
  if (named.size() != P) {
    std::ostringstream os;
    os << "checkpoint: config implies " << named.size() << " parameter tensors, file has " << P
       << " in " << path;
    throw std::runtime_error(os.str());
  }
  const auto check_tensor = [&](const RawTensor& raw, const std::string& want_name,
                                const Tensor& like) {
    if (raw.name != want_name) {
      throw std::runtime_error("checkpoint: expected tensor " + want_name + ", found " + raw.name +
                               " in " + path);
    }
    if (raw.dims != like.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + want_name + " in " + path);
    }
  };
  for (std::size_t p = 0; p < P; ++p) {
    check_tensor(raws[p], named[p].first, named[p].second);
    Tensor dst_tensor = named[p].second;  // shares storage
    auto dst = dst_tensor.mutable_data();
    std::copy(raws[p].values.begin(), raws[p].values.end(), dst.begin());
  }
  ckpt.adam = AdamState{};
  ckpt.adam.t = adam_t;
  for (std::size_t p = 0; p < P; ++p) {
    check_tensor(raws[P + p], "adam.m." + named[p].first, named[p].second);
    ckpt.adam.m.push_back(raws[P + p].values);
  }
  for (std::size_t p = 0; p < P; ++p) {
    check_tensor(raws[2 * P + p], "adam.v." + named[p].first, named[p].second);
    ckpt.adam.v.push_back(raws[2 * P + p].values);
  }
  return ckpt;
}

ScoreTable score_split(const Split& split, const EpsilonParams& params, const ModelConfig& cfg,
                       const LabelSpace& space, std::size_t eval_batch) {
  split.validate();
  if (eval_batch == 0) {
    throw std::invalid_argument("score_split: eval_batch must be positive");
  }
  if (split.N != cfg.N || split.D != cfg.D) {
    std::ostringstream os;
    os << "score_split: split images are " << split.N << "x" << split.D << ", model expects "
       << cfg.N << "x" << cfg.D;
    throw std::invalid_argument(os.str());
  }
  if (split.C != space.num_labels()) {
    std::ostringstream os;
    os << "score_split: split has " << split.C << " classes, space has " << space.num_labels();
    throw std::invalid_argument(os.str());
  }
  if (space.dim() != cfg.d_w) {
    std::ostringstream os;
    os << "score_split: embeddings are " << space.dim() << "-dimensional, model expects "
       << cfg.d_w;
    throw std::invalid_argument(os.str());
  }

  NoGradGuard guard;
  ScoreTable table;
  table.num_images = split.num_images;
  table.num_labels = split.C;
  table.scores.resize(split.num_images * split.C);
  table.truth = split.labels;

  const double* emb = space.embeddings().data().data();
  const std::size_t per_image = split.N * split.D;
  for (std::size_t b0 = 0; b0 < split.num_images; b0 += eval_batch) {
    const std::size_t B = std::min(eval_batch, split.num_images - b0);
    Tensor feats = Tensor::zeros({B, split.N, split.D});
    auto fd = feats.mutable_data();
    for (std::size_t i = 0; i < B; ++i) {
      const double* src = split.image(b0 + i);
      std::copy(src, src + per_image, fd.begin() + i * per_image);
    }
    const Tensor s = forward(feats, params, cfg).first;  // B x M x d_w
    const double* sd = s.data().data();
    for (std::size_t i = 0; i < B; ++i) {
      for (std::size_t c = 0; c < split.C; ++c) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t m = 0; m < cfg.M; ++m) {
          double dot = 0.0;
          const double* srow = sd + (i * cfg.M + m) * cfg.d_w;
          const double* erow = emb + c * cfg.d_w;
          for (std::size_t j = 0; j < cfg.d_w; ++j) {
            dot += srow[j] * erow[j];
          }
          if (dot > best) {
            best = dot;
          }
        }
        table.scores[(b0 + i) * split.C + c] = best;
      }
    }
  }
  return table;
}

TrainResult train(const Dataset& ds, const TrainOptions& opt) {
  ds.train.validate();
  ds.test.validate();

  ModelConfig model = opt.model;
  OptimConfig optim = opt.optim;
  LossConfig loss_cfg = opt.loss;
  EpsilonParams params;
  AdamState adam;
  CounterRng shuffle(0);
  std::size_t completed = 0;

  if (!opt.resume_from.empty()) {
    Checkpoint ckpt = load_checkpoint(opt.resume_from);
    model = ckpt.model;
    optim = ckpt.optim;
    optim.epochs = opt.optim.epochs;  // the caller owns the target epoch count
    loss_cfg = ckpt.loss;
    params = std::move(ckpt.params);
    adam = std::move(ckpt.adam);
    shuffle.set_state(ckpt.shuffle_rng_state);
    completed = ckpt.epochs_completed;
  } else {
    model.validate();
    optim.validate();
    loss_cfg.validate();
    params = EpsilonParams::init(model, optim.seed);
    adam = make_adam_state(params);
    shuffle = CounterRng(CounterRng::derive(optim.seed, 3));
  }

  if (ds.train.N != model.N || ds.train.D != model.D) {
    std::ostringstream os;
    os << "train: dataset images are " << ds.train.N << "x" << ds.train.D << ", model expects "
       << model.N << "x" << model.D;
    throw std::invalid_argument(os.str());
  }
  if (ds.space.dim() != model.d_w) {
    std::ostringstream os;
    os << "train: label embeddings are " << ds.space.dim() << "-dimensional, model expects "
       << model.d_w;
    throw std::invalid_argument(os.str());
  }

  params.set_requires_grad(true);
  const std::size_t n = ds.train.num_images;
  const std::size_t per_image = model.N * model.D;
  const std::size_t C = ds.space.num_labels();
  std::vector<std::size_t> order(n);

  TrainResult res;
  res.model = model;
  res.optim = optim;
  res.loss = loss_cfg;

  for (std::size_t epoch = completed + 1; epoch <= optim.epochs; ++epoch) {
    const double lr_now = lr_schedule(epoch, optim);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
      std::swap(order[i - 1], order[shuffle.uniform_int(i)]);
    }

    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += optim.batch_size, ++batch_index) {
      const std::size_t B = std::min(optim.batch_size, n - b0);
      Tensor feats = Tensor::zeros({B, model.N, model.D});
      auto fd = feats.mutable_data();
      std::vector<std::vector<std::uint8_t>> labels(B);
      for (std::size_t i = 0; i < B; ++i) {
        const std::size_t idx = order[b0 + i];
        const double* src = ds.train.image(idx);
        std::copy(src, src + per_image, fd.begin() + i * per_image);
        const std::uint8_t* row = ds.train.labels.data() + idx * C;
        labels[i].assign(row, row + C);
      }

      params.zero_grads();
      const Tensor loss = total_loss(forward(feats, params, model).first, labels, ds.space,
                                     loss_cfg);
      const double lv = loss.value();
      if (!std::isfinite(lv)) {
        std::ostringstream os;
        os << "training aborted: non-finite loss at epoch " << epoch << ", batch " << batch_index;
        throw std::runtime_error(os.str());
      }
      loss_sum += lv * static_cast<double>(B);
      backward(loss);
      adam_step(params, adam, optim, lr_now);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_now;
    rec.mean_loss = loss_sum / static_cast<double>(n);
    const ScoreTable table = score_split(ds.test, params, model, ds.space);
    res.final_zsl = evaluate(table, ds.space, Protocol::Zsl, opt.eval_ks);
    res.final_gzsl = evaluate(table, ds.space, Protocol::Gzsl, opt.eval_ks);
    rec.zsl_map = res.final_zsl.map;
    rec.gzsl_map = res.final_gzsl.map;
    for (const KMetrics& km : res.final_zsl.per_k) rec.zsl_f1s.push_back(km.f1);
    for (const KMetrics& km : res.final_gzsl.per_k) rec.gzsl_f1s.push_back(km.f1);
    res.history.push_back(rec);
    completed = epoch;
  }

  if (res.history.empty()) {
    const ScoreTable table = score_split(ds.test, params, model, ds.space);
    res.final_zsl = evaluate(table, ds.space, Protocol::Zsl, opt.eval_ks);
    res.final_gzsl = evaluate(table, ds.space, Protocol::Gzsl, opt.eval_ks);
  }

  res.params = params;
  res.adam = adam;
  if (!opt.checkpoint_path.empty()) {
    Checkpoint ckpt;
    ckpt.model = model;
    ckpt.optim = optim;
    ckpt.loss = loss_cfg;
    ckpt.epochs_completed = completed;
    ckpt.params = params;
    ckpt.adam = res.adam;
    ckpt.shuffle_rng_state = shuffle.state();
    save_checkpoint(ckpt, opt.checkpoint_path);
  }
  return res;
}

}  // namespace epsilon
