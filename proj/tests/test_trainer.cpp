#include "epsilon/trainer.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "epsilon/datagen.hpp"
#include "epsilon/model.hpp"
#include "epsilon/tensor.hpp"
#include "temp_dir.hpp"

using epsilon::AdamState;
using epsilon::Checkpoint;
using epsilon::Dataset;
using epsilon::EpsilonParams;
using epsilon::generate;
using epsilon::load_checkpoint;
using epsilon::lr_schedule;
using epsilon::make_adam_state;
using epsilon::ModelConfig;
using epsilon::OptimConfig;
using epsilon::save_checkpoint;
using epsilon::ScoreTable;
using epsilon::score_split;
using epsilon::SynthConfig;
using epsilon::Tensor;
using epsilon::train;
using epsilon::TrainOptions;
using epsilon::TrainResult;

namespace {

ModelConfig micro_model() {
  ModelConfig m;
  m.M = 2;
  m.D = 8;
  m.N = 3;
  m.d_w = 4;
  m.encoder_layers = 1;
  m.encoder_heads = 2;
  return m;
}

SynthConfig micro_data() {
  SynthConfig cfg;
  cfg.num_seen = 4;
  cfg.num_unseen = 2;
  cfg.d_w = 4;
  cfg.D = 8;
  cfg.N = 3;
  cfg.min_labels = 1;
  cfg.max_labels = 2;
  cfg.noise_sigma = 0.2;
  cfg.train_size = 12;
  cfg.test_size = 6;
  cfg.seed = 17;
  return cfg;
}

// Accumulates grad = 1 into every parameter entry via a sum-of-sums loss.
void seed_unit_grads(EpsilonParams& params) {
  params.set_requires_grad(true);
  params.zero_grads();
  Tensor total = Tensor::scalar(0.0);
  for (const auto& [name, tensor] : params.named()) {
    (void)name;
    total = add(total, sum(tensor));
  }
  backward(total);
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool params_equal(const EpsilonParams& a, const EpsilonParams& b) {
  const auto na = a.named();
  const auto nb = b.named();
  if (na.size() != nb.size()) return false;
  for (std::size_t p = 0; p < na.size(); ++p) {
    if (na[p].first != nb[p].first) return false;
    const auto da = na[p].second.data();
    const auto db = nb[p].second.data();
    if (da.size() != db.size()) return false;
    for (std::size_t i = 0; i < da.size(); ++i) {
      if (da[i] != db[i]) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("optim config validation rejects out-of-range fields") {
  CHECK_NOTHROW(OptimConfig{}.validate());

  OptimConfig cfg;
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = OptimConfig{};
  cfg.lr = -1e-5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = OptimConfig{};
  cfg.weight_decay = -0.1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = OptimConfig{};
  cfg.beta1 = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = OptimConfig{};
  cfg.beta2 = -0.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = OptimConfig{};
  cfg.eps = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = OptimConfig{};
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = OptimConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = OptimConfig{};
  cfg.halve_at_epoch = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("lr schedule halves once at the configured epoch") {
  OptimConfig cfg;  // lr 1e-5, halve at 4
  CHECK(lr_schedule(1, cfg) == 1e-5);
  CHECK(lr_schedule(3, cfg) == 1e-5);
  CHECK(lr_schedule(4, cfg) == 5e-6);
  CHECK(lr_schedule(7, cfg) == 5e-6);
  CHECK(lr_schedule(100, cfg) == 5e-6);  // single halving only
  CHECK_THROWS_AS(lr_schedule(0, cfg), std::invalid_argument);

  cfg.halve_at_epoch = 1;
  CHECK(lr_schedule(1, cfg) == 5e-6);

  cfg.halve_at_epoch = 1000;
  CHECK(lr_schedule(999, cfg) == 1e-5);

  // Non-increasing in epoch.
  cfg = OptimConfig{};
  double prev = lr_schedule(1, cfg);
  for (std::size_t e = 2; e <= 10; ++e) {
    const double now = lr_schedule(e, cfg);
    CHECK(now <= prev);
    prev = now;
  }
}

TEST_CASE("adam first step moves a unit parameter by about the learning rate") {
  EpsilonParams params = EpsilonParams::init(micro_model(), 1);
  for (const auto& [name, tensor] : params.named()) {
    (void)name;
    Tensor t = tensor;
    auto d = t.mutable_data();
    std::fill(d.begin(), d.end(), 1.0);
  }
  seed_unit_grads(params);

  AdamState state = make_adam_state(params);
  OptimConfig cfg;
  cfg.lr = 0.001;
  cfg.weight_decay = 0.0;
  adam_step(params, state, cfg, cfg.lr);

  CHECK(state.t == 1);
  // theta = 1, g = 1: m-hat = 1, v-hat = 1, so theta' = 1 - lr/(1 + eps).
  for (const auto& [name, tensor] : params.named()) {
    CAPTURE(name);
    for (double v : tensor.data()) {
      CHECK(v == doctest::Approx(0.999).epsilon(1e-9));
    }
  }
}

TEST_CASE("adam with zero gradient leaves parameters alone unless decay applies") {
  EpsilonParams params = EpsilonParams::init(micro_model(), 2);
  AdamState state = make_adam_state(params);

  OptimConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.0;
  const auto before = params.named();
  std::vector<std::vector<double>> snapshot;
  for (const auto& [name, tensor] : before) {
    (void)name;
    snapshot.emplace_back(tensor.data().begin(), tensor.data().end());
  }

  // No grads anywhere, no decay: bitwise no-op.
  adam_step(params, state, cfg, cfg.lr);
  {
    const auto after = params.named();
    for (std::size_t p = 0; p < after.size(); ++p) {
      const auto d = after[p].second.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        CHECK(d[i] == snapshot[p][i]);
      }
    }
  }

  // Decay on: weight matrices shrink by exactly lr*wd*theta; biases, norm
  // parameters and the prompts stay put.
  cfg.weight_decay = 4e-3;
  adam_step(params, state, cfg, cfg.lr);
  CHECK(state.t == 2);
  {
    const auto after = params.named();
    for (std::size_t p = 0; p < after.size(); ++p) {
      const bool decayed = EpsilonParams::decayable(after[p].first, after[p].second);
      const auto d = after[p].second.data();
      CAPTURE(after[p].first);
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double want =
            decayed ? snapshot[p][i] - cfg.lr * (cfg.weight_decay * snapshot[p][i])
                    : snapshot[p][i];
        CHECK(d[i] == want);
      }
    }
  }
}

TEST_CASE("adam decays every parameter when decay_weights_only is off") {
  EpsilonParams params = EpsilonParams::init(micro_model(), 3);
  // Give biases non-zero values so the decay is observable.
  for (const auto& [name, tensor] : params.named()) {
    (void)name;
    Tensor t = tensor;
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d[i] == 0.0) d[i] = 0.5;
    }
  }
  AdamState state = make_adam_state(params);
  OptimConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.1;
  cfg.decay_weights_only = false;

  std::vector<std::vector<double>> snapshot;
  for (const auto& [name, tensor] : params.named()) {
    (void)name;
    snapshot.emplace_back(tensor.data().begin(), tensor.data().end());
  }
  adam_step(params, state, cfg, cfg.lr);
  const auto after = params.named();
  for (std::size_t p = 0; p < after.size(); ++p) {
    const auto d = after[p].second.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      CHECK(d[i] == snapshot[p][i] - cfg.lr * (cfg.weight_decay * snapshot[p][i]));
    }
  }
}

TEST_CASE("adam moments follow the textbook recurrence over several steps") {
  EpsilonParams params = EpsilonParams::init(micro_model(), 4);
  params.set_requires_grad(true);
  AdamState state = make_adam_state(params);
  OptimConfig cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = 0.0;

  // Independent reference on flat copies of every parameter.
  const auto named0 = params.named();
  std::vector<std::vector<double>> theta, m, v;
  for (const auto& [name, tensor] : named0) {
    (void)name;
    theta.emplace_back(tensor.data().begin(), tensor.data().end());
    m.emplace_back(tensor.data().size(), 0.0);
    v.emplace_back(tensor.data().size(), 0.0);
  }

  for (int step = 1; step <= 5; ++step) {
    // Loss sum_t sum(t*t) has gradient 2*theta: easy to mirror exactly.
    params.zero_grads();
    Tensor total = Tensor::scalar(0.0);
    for (const auto& [name, tensor] : params.named()) {
      (void)name;
      total = add(total, sum(mul(tensor, tensor)));
    }
    backward(total);
    adam_step(params, state, cfg, cfg.lr);

    for (std::size_t p = 0; p < theta.size(); ++p) {
      for (std::size_t i = 0; i < theta[p].size(); ++i) {
        const double g = 2.0 * theta[p][i];
        m[p][i] = cfg.beta1 * m[p][i] + (1.0 - cfg.beta1) * g;
        v[p][i] = cfg.beta2 * v[p][i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = m[p][i] / (1.0 - std::pow(cfg.beta1, step));
        const double vhat = v[p][i] / (1.0 - std::pow(cfg.beta2, step));
        theta[p][i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps));
      }
    }
  }

  CHECK(state.t == 5);
  const auto named = params.named();
  for (std::size_t p = 0; p < named.size(); ++p) {
    const auto d = named[p].second.data();
    CAPTURE(named[p].first);
    for (std::size_t i = 0; i < d.size(); ++i) {
      CHECK(d[i] == doctest::Approx(theta[p][i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("checkpoint save, load and save again is byte-identical") {
  TempDir dir("ckpt");
  const ModelConfig model = micro_model();
  EpsilonParams params = EpsilonParams::init(model, 5);
  AdamState state = make_adam_state(params);
  OptimConfig optim;
  optim.lr = 3e-4;
  optim.seed = 0xFEEDFACECAFEBEEFull;

  // A couple of real steps so the moments are non-trivial.
  for (int step = 0; step < 2; ++step) {
    seed_unit_grads(params);
    adam_step(params, state, optim, optim.lr);
  }

  Checkpoint ckpt;
  ckpt.model = model;
  ckpt.optim = optim;
  ckpt.loss.lambda = 0.45;
  ckpt.epochs_completed = 3;
  ckpt.params = params;
  ckpt.adam = state;
  ckpt.shuffle_rng_state = 0x0123456789ABCDEFull;

  const std::string p1 = dir.file("a.epsc");
  const std::string p2 = dir.file("b.epsc");
  save_checkpoint(ckpt, p1);
  const Checkpoint back = load_checkpoint(p1);

  CHECK(params_equal(back.params, ckpt.params));
  CHECK(back.adam.m == ckpt.adam.m);
  CHECK(back.adam.v == ckpt.adam.v);
  CHECK(back.adam.t == ckpt.adam.t);
  CHECK(back.epochs_completed == 3);
  CHECK(back.shuffle_rng_state == ckpt.shuffle_rng_state);
  CHECK(back.model.M == model.M);
  CHECK(back.model.encoder_heads == model.encoder_heads);
  CHECK(back.optim.lr == optim.lr);
  CHECK(back.optim.seed == optim.seed);
  CHECK(back.loss.lambda == 0.45);

  save_checkpoint(back, p2);
  CHECK(file_bytes(p1) == file_bytes(p2));
}

TEST_CASE("checkpoint loading rejects malformed files") {
  TempDir dir("ckpt_bad");
  const ModelConfig model = micro_model();
  Checkpoint ckpt;
  ckpt.model = model;
  ckpt.params = EpsilonParams::init(model, 6);
  ckpt.adam = make_adam_state(ckpt.params);
  const std::string good_path = dir.file("good.epsc");
  save_checkpoint(ckpt, good_path);
  const std::string good = file_bytes(good_path);
  const std::string bad_path = dir.file("bad.epsc");

  const auto write_bad = [&](const std::string& bytes) {
    std::ofstream out(bad_path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };

  std::string bad = good;
  bad[0] = 'Z';
  write_bad(bad);
  CHECK_THROWS_AS(load_checkpoint(bad_path), std::runtime_error);

  bad = good;
  bad[4] = 7;
  write_bad(bad);
  CHECK_THROWS_AS(load_checkpoint(bad_path), std::runtime_error);

  write_bad(good.substr(0, 2));
  CHECK_THROWS_AS(load_checkpoint(bad_path), std::runtime_error);

  write_bad(good.substr(0, good.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(bad_path), std::runtime_error);

  write_bad(good + "x");
  CHECK_THROWS_AS(load_checkpoint(bad_path), std::runtime_error);

  CHECK_THROWS_AS(load_checkpoint(dir.file("missing.epsc")), std::runtime_error);
}

TEST_CASE("training on one sample drives the ranking loss down") {
  SynthConfig data_cfg = micro_data();
  data_cfg.train_size = 1;
  data_cfg.test_size = 12;
  data_cfg.noise_sigma = 0.1;
  data_cfg.seed = 5;
  const Dataset ds = generate(data_cfg);

  TrainOptions opt;
  opt.model = micro_model();
  opt.loss.lambda = 0.0;  // ranking term only
  opt.optim.lr = 1e-3;
  opt.optim.weight_decay = 0.0;
  opt.optim.epochs = 50;
  opt.optim.batch_size = 1;
  opt.optim.halve_at_epoch = 1000;
  opt.optim.seed = 9;
  opt.eval_ks = {1, 2};

  const TrainResult res = train(ds, opt);
  REQUIRE(res.history.size() == 50);
  const double first = res.history.front().mean_loss;
  const double last = res.history.back().mean_loss;
  CHECK(first > 0.0);
  CHECK(last < first);
  CHECK(last < std::log(2.0));  // well below the zero-model plateau
  // Trend, not luck: the mean over the last ten epochs beats the first ten.
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += res.history[i].mean_loss;
    tail += res.history[40 + i].mean_loss;
  }
  CHECK(tail < head);
  CHECK(res.adam.t == 50);  // one step per batch
}

TEST_CASE("same seed gives identical history, different seed diverges") {
  const Dataset ds = generate(micro_data());
  TrainOptions opt;
  opt.model = micro_model();
  opt.optim.lr = 1e-3;
  opt.optim.epochs = 2;
  opt.optim.batch_size = 5;
  opt.optim.seed = 21;
  opt.eval_ks = {1, 2};

  const TrainResult a = train(ds, opt);
  const TrainResult b = train(ds, opt);
  CHECK(a.history_jsonl() == b.history_jsonl());
  CHECK(params_equal(a.params, b.params));
  CHECK(a.history_jsonl().find("\"epoch\":1") != std::string::npos);

  TrainOptions other = opt;
  other.optim.seed = 22;
  const TrainResult c = train(ds, other);
  CHECK(a.history_jsonl() != c.history_jsonl());
}

TEST_CASE("epoch records carry the expected keys") {
  epsilon::EpochRecord rec;
  rec.epoch = 3;
  rec.lr = 5e-6;
  rec.mean_loss = 0.25;
  rec.zsl_map = 0.5;
  rec.gzsl_map = 0.75;
  rec.zsl_f1s = {0.1, 0.2};
  rec.gzsl_f1s = {0.3, 0.4};
  const std::string j = rec.to_json();
  for (const char* key : {"\"epoch\":3", "\"lr\":5e-06", "\"mean_loss\":0.25", "\"zsl_map\":0.5",
                          "\"gzsl_map\":0.75", "\"f1s\":{\"zsl\":[0.1,0.2],\"gzsl\":[0.3,0.4]}"}) {
    CAPTURE(key);
    CHECK(j.find(key) != std::string::npos);
  }
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run bitwise") {
  TempDir dir("resume");
  const Dataset ds = generate(micro_data());

  TrainOptions opt;
  opt.model = micro_model();
  opt.optim.lr = 1e-3;
  opt.optim.epochs = 5;
  opt.optim.batch_size = 4;
  opt.optim.halve_at_epoch = 3;
  opt.optim.seed = 17;
  opt.eval_ks = {1, 2};

  // Straight-through run.
  TrainOptions straight = opt;
  straight.checkpoint_path = dir.file("straight.epsc");
  const TrainResult full = train(ds, straight);
  REQUIRE(full.history.size() == 5);

  // Interrupted at epoch 3, resumed to 5.
  TrainOptions leg1 = opt;
  leg1.optim.epochs = 3;
  leg1.checkpoint_path = dir.file("leg1.epsc");
  const TrainResult part = train(ds, leg1);
  REQUIRE(part.history.size() == 3);

  TrainOptions leg2 = opt;  // epochs 5 again; other hypers come from the checkpoint
  leg2.resume_from = leg1.checkpoint_path;
  leg2.checkpoint_path = dir.file("resumed.epsc");
  const TrainResult rest = train(ds, leg2);
  REQUIRE(rest.history.size() == 2);

  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(part.history[i].to_json() == full.history[i].to_json());
  }
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(rest.history[i].to_json() == full.history[3 + i].to_json());
  }
  CHECK(params_equal(rest.params, full.params));
  CHECK(file_bytes(dir.file("resumed.epsc")) == file_bytes(dir.file("straight.epsc")));

  // Resuming a finished run trains nothing but still evaluates.
  TrainOptions done = opt;
  done.resume_from = dir.file("straight.epsc");
  const TrainResult noop = train(ds, done);
  CHECK(noop.history.empty());
  CHECK(params_equal(noop.params, full.params));
  CHECK(noop.final_zsl.to_json() == full.final_zsl.to_json());
}

TEST_CASE("exploding training aborts with a batch diagnostic") {
  SynthConfig data_cfg = micro_data();
  data_cfg.train_size = 8;
  const Dataset ds = generate(data_cfg);

  TrainOptions opt;
  opt.model = micro_model();
  opt.optim.lr = 1e160;  // guarantees non-finite values after the first step
  opt.optim.epochs = 1;
  opt.optim.batch_size = 2;
  opt.optim.seed = 1;
  opt.eval_ks = {1};

  std::string msg;
  try {
    train(ds, opt);
  } catch (const std::runtime_error& e) {
    msg = e.what();
  }
  CHECK(msg.find("non-finite loss") != std::string::npos);
  CHECK(msg.find("batch") != std::string::npos);
  CHECK(msg.find("epoch 1") != std::string::npos);
}

TEST_CASE("train rejects dimension mismatches up front") {
  const Dataset ds = generate(micro_data());
  TrainOptions opt;
  opt.model = micro_model();
  opt.model.N = 5;  // dataset has N=3
  CHECK_THROWS_AS(train(ds, opt), std::invalid_argument);

  opt.model = micro_model();
  opt.model.d_w = 6;  // embeddings are 4-wide
  CHECK_THROWS_AS(train(ds, opt), std::invalid_argument);
}

TEST_CASE("score_split bytes do not depend on the evaluation batch size") {
  const Dataset ds = generate(micro_data());
  const ModelConfig model = micro_model();
  const EpsilonParams params = EpsilonParams::init(model, 23);

  const ScoreTable one = score_split(ds.test, params, model, ds.space, 1);
  const ScoreTable big = score_split(ds.test, params, model, ds.space, 64);
  CHECK(one.scores == big.scores);
  CHECK(one.truth == big.truth);

  // Dimension screening.
  CHECK_THROWS_AS(score_split(ds.train, params, model, ds.space, 0), std::invalid_argument);
  ModelConfig wrong = model;
  wrong.N = 7;
  CHECK_THROWS_AS(score_split(ds.test, params, wrong, ds.space), std::invalid_argument);
}
