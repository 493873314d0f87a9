#include "epsilon/cli.hpp"

#include <algorithm>
#include <array>
#include <cassert>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "CLI11.hpp"
#include "epsilon/metrics.hpp"
#include "epsilon/tensor.hpp"

namespace epsilon::cli {

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& where, const std::string& want) {
  std::ostringstream os;
  os << "config: key '" << key << "' needs " << want << ", got '" << value << "'";
  if (!where.empty()) os << " (" << where << ")";
  throw std::invalid_argument(os.str());
}

double parse_double(const std::string& key, const std::string& value, const std::string& where) {
  const char* begin = value.c_str();
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || errno == ERANGE) {
    bad_value(key, value, where, "a real number");
  }
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value,
                        const std::string& where) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc{} || ptr != value.data() + value.size()) {
    bad_value(key, value, where, "a non-negative integer");
  }
  return v;
}

std::size_t parse_size(const std::string& key, const std::string& value,
                       const std::string& where) {
  return static_cast<std::size_t>(parse_u64(key, value, where));
}

bool parse_bool(const std::string& key, const std::string& value, const std::string& where) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value, where, "true/false/1/0");
}

std::vector<std::size_t> parse_ks(const std::string& key, const std::string& value,
                                  const std::string& where) {
  std::vector<std::size_t> ks;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::size_t k = parse_size(key, item, where);
    if (k == 0) bad_value(key, value, where, "positive ranks");
    ks.push_back(k);
  }
  if (ks.empty()) bad_value(key, value, where, "a comma-separated rank list");
  return ks;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string fmt17(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string fmt6(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("failed writing " + path);
}

std::string image_tag(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%06zu", i);
  return buf;
}

std::string group_tag(std::size_t m) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "g%02zu", m);
  return buf;
}

// Descending-score order with ascending label index on ties, matching the
// ranking used by the metrics.
std::vector<std::size_t> rank_order(const double* scores, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      // model (d, n, d_w also set the generator)
      "m", "d", "n", "d_w", "encoder_layers", "encoder_heads", "mlp_hidden",
      "cross_attn_projected", "use_gpa", "use_gfp",
      // optimizer (seed also sets the generator)
      "lr", "weight_decay", "beta1", "beta2", "eps", "epochs", "batch_size", "halve_at_epoch",
      "decay_weights_only", "seed",
      // loss
      "lambda", "reg_across_groups",
      // synthetic data
      "num_seen", "num_unseen", "min_labels", "max_labels", "noise_sigma", "train_size",
      "test_size",
      // paths and evaluation
      "data", "out", "eval_ks"};
  return keys;
}

void RunConfig::apply(const std::string& key, const std::string& value, const std::string& where) {
  if (key == "m") {
    model.M = parse_size(key, value, where);
  } else if (key == "d") {
    model.D = parse_size(key, value, where);
    synth.D = model.D;
  } else if (key == "n") {
    model.N = parse_size(key, value, where);
    synth.N = model.N;
  } else if (key == "d_w") {
    model.d_w = parse_size(key, value, where);
    synth.d_w = model.d_w;
  } else if (key == "encoder_layers") {
    model.encoder_layers = parse_size(key, value, where);
  } else if (key == "encoder_heads") {
    model.encoder_heads = parse_size(key, value, where);
  } else if (key == "mlp_hidden") {
    model.mlp_hidden = parse_size(key, value, where);
  } else if (key == "cross_attn_projected") {
    model.cross_attn_projected = parse_bool(key, value, where);
  } else if (key == "use_gpa") {
    model.use_gpa = parse_bool(key, value, where);
  } else if (key == "use_gfp") {
    model.use_gfp = parse_bool(key, value, where);
  } else if (key == "lr") {
    optim.lr = parse_double(key, value, where);
  } else if (key == "weight_decay") {
    optim.weight_decay = parse_double(key, value, where);
  } else if (key == "beta1") {
    optim.beta1 = parse_double(key, value, where);
  } else if (key == "beta2") {
    optim.beta2 = parse_double(key, value, where);
  } else if (key == "eps") {
    optim.eps = parse_double(key, value, where);
  } else if (key == "epochs") {
    optim.epochs = parse_size(key, value, where);
  } else if (key == "batch_size") {
    optim.batch_size = parse_size(key, value, where);
  } else if (key == "halve_at_epoch") {
    optim.halve_at_epoch = parse_size(key, value, where);
  } else if (key == "decay_weights_only") {
    optim.decay_weights_only = parse_bool(key, value, where);
  } else if (key == "seed") {
    optim.seed = parse_u64(key, value, where);
    synth.seed = optim.seed;
  } else if (key == "lambda") {
    loss.lambda = parse_double(key, value, where);
  } else if (key == "reg_across_groups") {
    loss.reg_across_groups = parse_bool(key, value, where);
  } else if (key == "num_seen") {
    synth.num_seen = parse_size(key, value, where);
  } else if (key == "num_unseen") {
    synth.num_unseen = parse_size(key, value, where);
  } else if (key == "min_labels") {
    synth.min_labels = parse_size(key, value, where);
  } else if (key == "max_labels") {
    synth.max_labels = parse_size(key, value, where);
  } else if (key == "noise_sigma") {
    synth.noise_sigma = parse_double(key, value, where);
  } else if (key == "train_size") {
    synth.train_size = parse_size(key, value, where);
  } else if (key == "test_size") {
    synth.test_size = parse_size(key, value, where);
  } else if (key == "data") {
    data = value;
  } else if (key == "out") {
    out = value;
  } else if (key == "eval_ks") {
    eval_ks = parse_ks(key, value, where);
  } else {
    std::ostringstream os;
    os << "config: unknown key '" << key << "'";
    if (!where.empty()) os << " (" << where << ")";
    throw std::invalid_argument(os.str());
  }
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    std::ostringstream where;
    where << "line " << lineno;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: missing '=' (" + where.str() + ")");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw std::invalid_argument("config: empty key (" + where.str() + ")");
    }
    cfg.apply(key, value, where.str());
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;
};

void add_config_flags(CLI::App* sub, CommonOpts& common) {
  sub->add_option("--config", common.config_path, "config file with key = value lines");
  for (const std::string& key : config_keys()) {
    const std::string names = key == "eval_ks" ? "--eval_ks,--ks" : "--" + key;
    sub->add_option_function<std::string>(
        names,
        [key, &common](const std::string& v) { common.overrides.emplace_back(key, v); },
        "override config key '" + key + "'");
  }
}

RunConfig merged_config(const CommonOpts& common) {
  RunConfig cfg;
  if (!common.config_path.empty()) cfg = load_config(common.config_path);
  for (const auto& [key, value] : common.overrides) {
    cfg.apply(key, value, "flag --" + key);
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// gen

void cmd_gen(const RunConfig& cfg, std::ostream& out) {
  if (cfg.out.empty()) {
    throw std::invalid_argument("gen: output prefix required (--out or config key 'out')");
  }
  const Dataset ds = generate(cfg.synth);
  write_dataset(ds, cfg.out);
  out << "labels: " << ds.space.num_labels() << " (" << ds.space.num_seen() << " seen / "
      << ds.space.num_unseen() << " unseen), d_w=" << ds.space.dim() << "\n";
  out << "train: " << ds.train.num_images << " images, N=" << ds.train.N << ", D=" << ds.train.D
      << "\n";
  out << "test: " << ds.test.num_images << " images\n";
  out << "wrote: " << cfg.out
      << ".{labels.tsv,unseen.txt,train.epsf,train.labels,test.epsf,test.labels,hidden.epsf}\n";
}

// ---------------------------------------------------------------------------
// train

std::string default_history_path(const std::string& ckpt_path) {
  const std::string suffix = ".epsc";
  if (ckpt_path.size() > suffix.size() &&
      ckpt_path.compare(ckpt_path.size() - suffix.size(), suffix.size(), suffix) == 0) {
    return ckpt_path.substr(0, ckpt_path.size() - suffix.size()) + ".history.jsonl";
  }
  return ckpt_path + ".history.jsonl";
}

void cmd_train(const RunConfig& cfg, const std::string& history_path, const std::string& resume,
               std::ostream& out) {
  if (cfg.data.empty()) {
    throw std::invalid_argument("train: dataset prefix required (--data or config key 'data')");
  }
  if (cfg.out.empty()) {
    throw std::invalid_argument("train: checkpoint path required (--out or config key 'out')");
  }
  const Dataset ds = read_dataset(cfg.data);

  TrainOptions opt;
  opt.model = cfg.model;
  opt.optim = cfg.optim;
  opt.loss = cfg.loss;
  opt.eval_ks = cfg.eval_ks;
  opt.checkpoint_path = cfg.out;
  opt.resume_from = resume;
  const TrainResult res = train(ds, opt);

  const std::string hist = history_path.empty() ? default_history_path(cfg.out) : history_path;
  write_text(hist, res.history_jsonl());

  for (const EpochRecord& rec : res.history) {
    out << "epoch " << rec.epoch << "/" << res.optim.epochs << "  lr " << fmt6(rec.lr)
        << "  loss " << fmt6(rec.mean_loss) << "  zsl " << fmt6(rec.zsl_map) << "  gzsl "
        << fmt6(rec.gzsl_map) << "\n";
  }
  out << "final: zsl mAP " << fmt6(res.final_zsl.map) << ", gzsl mAP " << fmt6(res.final_gzsl.map)
      << "\n";
  out << "wrote: " << cfg.out << ", " << hist << "\n";
}

// ---------------------------------------------------------------------------
// eval

void cmd_eval(const std::string& ckpt_path, const std::string& data, const std::string& protocol,
              const std::string& ks_csv, const std::string& split_name,
              const std::string& out_path, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Dataset ds = read_dataset(data);
  const std::vector<std::size_t> ks = parse_ks("ks", ks_csv, "flag --ks");
  Protocol proto;
  if (protocol == "zsl") {
    proto = Protocol::Zsl;
  } else if (protocol == "gzsl") {
    proto = Protocol::Gzsl;
  } else {
    throw std::invalid_argument("eval: protocol must be zsl or gzsl, got '" + protocol + "'");
  }
  const Split* split = nullptr;
  if (split_name == "test") {
    split = &ds.test;
  } else if (split_name == "train") {
    split = &ds.train;
  } else {
    throw std::invalid_argument("eval: split must be train or test, got '" + split_name + "'");
  }
  const ScoreTable table = score_split(*split, ckpt.params, ckpt.model, ds.space);
  const EvalReport report = evaluate(table, ds.space, proto, ks);
  const std::string json = report.to_json();
  out << json << "\n";
  if (!out_path.empty()) write_text(out_path, json + "\n");
}

// ---------------------------------------------------------------------------
// predict

// Loads features either from an explicit EPSF file (validated against the
// model's N x D) or from the dataset's test split.
std::pair<std::size_t, std::vector<double>> load_features(const std::string& features_path,
                                                          const ModelConfig& model,
                                                          const Dataset* ds) {
  if (features_path.empty()) {
    if (ds == nullptr) {
      throw std::invalid_argument("no feature source: pass --features or --data");
    }
    return {ds->test.num_images, ds->test.features};
  }
  EpsfTensor t = read_epsf(features_path);
  if (t.dims.size() != 3) {
    std::ostringstream os;
    os << features_path << ": expected a rank-3 images x N x D tensor, got rank " << t.dims.size();
    throw std::invalid_argument(os.str());
  }
  if (t.dims[1] != model.N || t.dims[2] != model.D) {
    std::ostringstream os;
    os << features_path << ": file has N=" << t.dims[1] << ", D=" << t.dims[2]
       << ", model wants N=" << model.N << ", D=" << model.D;
    throw std::invalid_argument(os.str());
  }
  return {t.dims[0], std::move(t.values)};
}

void cmd_predict(const std::string& ckpt_path, const std::string& data,
                 const std::string& features_path, std::size_t k, std::ostream& out) {
  if (k == 0) throw std::invalid_argument("predict: k must be positive");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Dataset ds = read_dataset(data);
  auto [n, features] = load_features(features_path, ckpt.model, &ds);

  const std::size_t C = ds.space.num_labels();
  Split split;
  split.num_images = n;
  split.N = ckpt.model.N;
  split.D = ckpt.model.D;
  split.C = C;
  split.features = std::move(features);
  split.labels.assign(n * C, 0);
  const ScoreTable table = score_split(split, ckpt.params, ckpt.model, ds.space);

  const std::size_t top = std::min(k, C);
  out << "# image\trank\tlabel\tscore\n";
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = table.scores.data() + i * C;
    const std::vector<std::size_t> order = rank_order(row, C);
    for (std::size_t r = 0; r < top; ++r) {
      const std::size_t c = order[r];
      out << i << '\t' << (r + 1) << '\t' << ds.space.name(c)
          << (ds.space.is_seen(c) ? "" : "*") << '\t' << fmt17(row[c]) << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// attn

void write_pgm(const std::string& path, const std::vector<double>& map, std::size_t width,
               std::size_t height) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : map) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::ostringstream os;
  os << "P2\n" << width << " " << height << "\n255\n";
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double v = map[y * width + x];
      const long pixel = hi > lo ? std::lround(255.0 * (v - lo) / (hi - lo)) : 128;
      os << pixel << (x + 1 < width ? ' ' : '\n');
    }
  }
  write_text(path, os.str());
}

void write_csv_row(const std::string& path, const std::vector<double>& row) {
  std::ostringstream os;
  for (std::size_t i = 0; i < row.size(); ++i) {
    os << (i ? "," : "") << fmt17(row[i]);
  }
  os << "\n";
  write_text(path, os.str());
}

void cmd_attn(const std::string& ckpt_path, const std::string& data,
              const std::string& features_path, const std::string& out_dir, bool gfp_maps,
              std::ostream& out) {
  if (out_dir.empty()) throw std::invalid_argument("attn: output directory required (--out)");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  if (!ckpt.model.use_gpa) {
    throw std::invalid_argument(
        "attn: checkpoint was trained without the aggregation branch; no cross-attention maps");
  }
  if (gfp_maps && !ckpt.model.use_gfp) {
    throw std::invalid_argument(
        "attn: checkpoint was trained without the propagation branch; --gfp unavailable");
  }

  std::size_t n = 0;
  std::vector<double> features;
  if (data.empty()) {
    auto loaded = load_features(features_path, ckpt.model, nullptr);
    n = loaded.first;
    features = std::move(loaded.second);
  } else {
    const Dataset ds = read_dataset(data);
    auto loaded = load_features(features_path, ckpt.model, &ds);
    n = loaded.first;
    features = std::move(loaded.second);
  }

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("attn: cannot create directory " + out_dir + ": " + ec.message());

  const std::size_t N = ckpt.model.N;
  const std::size_t D = ckpt.model.D;
  const std::size_t M = ckpt.model.M;
  const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(double(N))));
  const bool grid = side * side == N;
  const std::size_t width = grid ? side : N;
  const std::size_t height = grid ? side : 1;

  NoGradGuard guard;
  const std::size_t batch = 64;
  const std::size_t per_image = N * D;
  std::size_t written = 0;
  for (std::size_t b0 = 0; b0 < n; b0 += batch) {
    const std::size_t B = std::min(batch, n - b0);
    Tensor feats = Tensor::zeros({B, N, D});
    auto fd = feats.mutable_data();
    std::copy(features.begin() + b0 * per_image, features.begin() + (b0 + B) * per_image,
              fd.begin());
    const ForwardTrace trace = forward(feats, ckpt.params, ckpt.model).second;
    const double* ac = trace.a_c.data().data();  // B x M x N
    for (std::size_t i = 0; i < B; ++i) {
      const std::string img = image_tag(b0 + i);
      for (std::size_t m = 0; m < M; ++m) {
        const std::string stem = out_dir + "/" + img + "." + group_tag(m);
        std::vector<double> row(ac + (i * M + m) * N, ac + (i * M + m + 1) * N);
        write_csv_row(stem + ".csv", row);
        write_pgm(stem + ".pgm", row, width, height);
        ++written;
        if (gfp_maps) {
          const double* am = trace.a_m[m].data().data();  // B x N x D
          std::vector<double> mean(N, 0.0);
          for (std::size_t t = 0; t < N; ++t) {
            double acc = 0.0;
            for (std::size_t d = 0; d < D; ++d) acc += am[(i * N + t) * D + d];
            mean[t] = acc / static_cast<double>(D);
          }
          write_csv_row(stem + ".gfp.csv", mean);
          write_pgm(stem + ".gfp.pgm", mean, width, height);
          ++written;
        }
      }
    }
  }
  out << "wrote " << written << " maps (" << M << " groups x " << n << " images"
      << (gfp_maps ? ", aggregation + propagation" : "") << ") to " << out_dir << "\n";
}

// ---------------------------------------------------------------------------
// sweep

void cmd_sweep(const RunConfig& cfg, std::ostream& out) {
  if (cfg.data.empty()) {
    throw std::invalid_argument("sweep: dataset prefix required (--data or config key 'data')");
  }
  if (cfg.out.empty()) {
    throw std::invalid_argument("sweep: output CSV path required (--out or config key 'out')");
  }
  const Dataset ds = read_dataset(cfg.data);

  const auto run_point = [&](const ModelConfig& model, const LossConfig& loss) {
    TrainOptions opt;
    opt.model = model;
    opt.optim = cfg.optim;
    opt.loss = loss;
    opt.eval_ks = cfg.eval_ks;
    const TrainResult res = train(ds, opt);
    return std::make_pair(res.final_zsl.map, res.final_gzsl.map);
  };

  std::ostringstream csv;
  csv << "m,lambda,zsl_map,gzsl_map\n";
  const std::array<std::size_t, 4> m_grid = {2, 4, 8, 16};
  for (std::size_t m : m_grid) {
    ModelConfig model = cfg.model;
    model.M = m;
    const auto [zsl, gzsl] = run_point(model, cfg.loss);
    csv << m << ',' << fmt6(cfg.loss.lambda) << ',' << fmt17(zsl) << ',' << fmt17(gzsl) << "\n";
    out << "sweep: m=" << m << " lambda=" << fmt6(cfg.loss.lambda) << " zsl " << fmt6(zsl)
        << " gzsl " << fmt6(gzsl) << "\n";
  }
  for (int i = 1; i <= 9; ++i) {
    LossConfig loss = cfg.loss;
    loss.lambda = static_cast<double>(i) / 10.0;
    const auto [zsl, gzsl] = run_point(cfg.model, loss);
    csv << cfg.model.M << ',' << fmt6(loss.lambda) << ',' << fmt17(zsl) << ',' << fmt17(gzsl)
        << "\n";
    out << "sweep: m=" << cfg.model.M << " lambda=" << fmt6(loss.lambda) << " zsl " << fmt6(zsl)
        << " gzsl " << fmt6(gzsl) << "\n";
  }
  write_text(cfg.out, csv.str());
  out << "wrote 13 rows to " << cfg.out << "\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"epsilon: multi-label zero-shot learning pipeline"};
  app.require_subcommand(1);

  CommonOpts gen_common, train_common, sweep_common;

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_config_flags(gen, gen_common);

  CLI::App* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  add_config_flags(train_cmd, train_common);
  std::string train_history, train_resume;
  train_cmd->add_option("--history", train_history,
                        "history JSONL path (default: derived from --out)");
  train_cmd->add_option("--resume", train_resume, "checkpoint to resume from");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  std::string eval_ckpt, eval_data, eval_protocol = "zsl", eval_ks = "3,5", eval_split = "test",
              eval_out;
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "dataset prefix")->required();
  eval_cmd->add_option("--protocol", eval_protocol, "zsl | gzsl (default zsl)");
  eval_cmd->add_option("--ks", eval_ks, "comma-separated ranks (default 3,5)");
  eval_cmd->add_option("--split", eval_split, "train | test (default test)");
  eval_cmd->add_option("--out", eval_out, "also write the JSON report here");

  CLI::App* predict = app.add_subcommand("predict", "rank the top-k labels per image");
  std::string pred_ckpt, pred_data, pred_features;
  std::size_t pred_k = 10;
  predict->add_option("--ckpt", pred_ckpt, "checkpoint file")->required();
  predict->add_option("--data", pred_data, "dataset prefix (label space + default features)")
      ->required();
  predict->add_option("--features", pred_features, "EPSF feature file (default: test split)");
  predict->add_option("--k", pred_k, "labels per image (default 10)");

  CLI::App* attn = app.add_subcommand("attn", "export per-group attention maps (CSV + PGM)");
  std::string attn_ckpt, attn_data, attn_features, attn_out;
  bool attn_gfp = false;
  attn->add_option("--ckpt", attn_ckpt, "checkpoint file")->required();
  attn->add_option("--data", attn_data, "dataset prefix for default features");
  attn->add_option("--features", attn_features, "EPSF feature file (default: test split)");
  attn->add_option("--out", attn_out, "output directory")->required();
  attn->add_flag("--gfp", attn_gfp, "also export channel-mean propagation weights");

  CLI::App* sweep = app.add_subcommand("sweep", "one-at-a-time sweep over m and lambda");
  add_config_flags(sweep, sweep_common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand(gen)) {
      cmd_gen(merged_config(gen_common), out);
    } else if (app.got_subcommand(train_cmd)) {
      cmd_train(merged_config(train_common), train_history, train_resume, out);
    } else if (app.got_subcommand(eval_cmd)) {
      cmd_eval(eval_ckpt, eval_data, eval_protocol, eval_ks, eval_split, eval_out, out);
    } else if (app.got_subcommand(predict)) {
      cmd_predict(pred_ckpt, pred_data, pred_features, pred_k, out);
    } else if (app.got_subcommand(attn)) {
      cmd_attn(attn_ckpt, attn_data, attn_features, attn_out, attn_gfp, out);
    } else if (app.got_subcommand(sweep)) {
      cmd_sweep(merged_config(sweep_common), out);
    }
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::runtime_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<std::string> full;
  full.reserve(args.size() + 1);
  full.push_back("epsilon");
  full.insert(full.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  argv.reserve(full.size());
  for (const std::string& s : full) argv.push_back(s.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace epsilon::cli
