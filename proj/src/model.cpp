#include "epsilon/model.hpp"

#include <cmath>
#include <stdexcept>

#include "epsilon/rng.hpp"

namespace epsilon {

namespace {

constexpr double kLayerNormEps = 1e-5;

Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, CounterRng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(numel(shape));
  for (double& x : v) x = (2.0 * rng.uniform() - 1.0) * a;
  return Tensor::from_data(std::move(shape), std::move(v));
}

Tensor gaussian_init(Shape shape, double sigma, CounterRng& rng) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = sigma * rng.gaussian();
  return Tensor::from_data(std::move(shape), std::move(v));
}

// Normalization over the last axis with learned gain/offset.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset) {
  const std::size_t axis = x.rank() - 1;
  Tensor mu = mean(x, axis, /*keepdims=*/true);
  Tensor var = variance(x, axis, /*keepdims=*/true);
  Tensor xhat = div(sub(x, mu), sqrt(add_scalar(var, kLayerNormEps)));
  return add(mul(xhat, gain), offset);
}

// Multi-head self-attention over tokens (axis 1 of B x T x D).
Tensor self_attention(const Tensor& x, const EncoderLayer& layer, const ModelConfig& cfg) {
  const std::size_t b = x.shape()[0], t = x.shape()[1];
  const std::size_t h = cfg.encoder_heads, dh = cfg.head_dim();
  auto split_heads = [&](const Tensor& m) {
    // B x T x D -> B x H x T x dh
    return transpose(reshape(m, {b, t, h, dh}), 1, 2);
  };
  Tensor q = split_heads(matmul(x, layer.wq));
  Tensor k = split_heads(matmul(x, layer.wk));
  Tensor v = split_heads(matmul(x, layer.wv));
  Tensor scores = scale(matmul(q, transpose(k, 2, 3)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = softmax(scores, 3);                       // B x H x T x T
  Tensor ctx = reshape(transpose(matmul(attn, v), 1, 2),  // back to B x T x D
                       {b, t, cfg.D});
  return matmul(ctx, layer.wo);
}

Tensor encoder_layer_forward(const Tensor& x, const EncoderLayer& layer, const ModelConfig& cfg) {
  Tensor h = add(x, self_attention(layer_norm(x, layer.ln1_g, layer.ln1_b), layer, cfg));
  Tensor ff_in = layer_norm(h, layer.ln2_g, layer.ln2_b);
  Tensor ff = linear(relu(linear(ff_in, layer.ff_w1, layer.ff_b1)), layer.ff_w2, layer.ff_b2);
  return add(h, ff);
}

void check_features(const Tensor& features, const ModelConfig& cfg, const char* op) {
  if (!features.defined() || features.rank() != 3 || features.shape()[1] != cfg.N ||
      features.shape()[2] != cfg.D || features.shape()[0] == 0) {
    throw std::invalid_argument(std::string(op) + ": features must be [B, " +
                                std::to_string(cfg.N) + ", " + std::to_string(cfg.D) +
                                "], got " +
                                (features.defined() ? shape_str(features.shape()) : "undefined"));
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (M < 1) throw std::invalid_argument("config: M must be >= 1");
  if (D == 0 || N == 0 || d_w == 0) throw std::invalid_argument("config: sizes must be positive");
  if (encoder_layers == 0 || encoder_heads == 0) {
    throw std::invalid_argument("config: encoder layers/heads must be positive");
  }
  if (D % encoder_heads != 0) {
    throw std::invalid_argument("config: D=" + std::to_string(D) + " not divisible by " +
                                std::to_string(encoder_heads) + " heads");
  }
  if (!use_gpa && !use_gfp) {
    throw std::invalid_argument("config: at least one of the GPA/GFP branches must be enabled");
  }
}

EpsilonParams EpsilonParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  CounterRng rng(CounterRng::derive(seed, 0));
  const std::size_t d = cfg.D, h = cfg.mlp_hidden_or_default();
  EpsilonParams p;
  p.group_prompts = gaussian_init({cfg.M, d}, 0.02, rng);
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
    EncoderLayer layer;
    layer.wq = xavier_uniform({d, d}, d, d, rng);
    layer.wk = xavier_uniform({d, d}, d, d, rng);
    layer.wv = xavier_uniform({d, d}, d, d, rng);
    layer.wo = xavier_uniform({d, d}, d, d, rng);
    layer.ff_w1 = xavier_uniform({d, h}, d, h, rng);
    layer.ff_b1 = Tensor::zeros({h});
    layer.ff_w2 = xavier_uniform({h, d}, h, d, rng);
    layer.ff_b2 = Tensor::zeros({d});
    layer.ln1_g = Tensor::full({d}, 1.0);
    layer.ln1_b = Tensor::zeros({d});
    layer.ln2_g = Tensor::full({d}, 1.0);
    layer.ln2_b = Tensor::zeros({d});
    p.encoder.push_back(std::move(layer));
  }
  p.cross.wq = xavier_uniform({d, d}, d, d, rng);
  p.cross.wk = xavier_uniform({d, d}, d, d, rng);
  p.cross.wv = xavier_uniform({d, d}, d, d, rng);
  for (std::size_t m = 0; m < cfg.M; ++m) {
    GfpHead head;
    head.proj = xavier_uniform({d, d}, d, d, rng);
    head.mlp_w1 = xavier_uniform({d, h}, d, h, rng);
    head.mlp_b1 = Tensor::zeros({h});
    head.mlp_w2 = xavier_uniform({h, d}, h, d, rng);
    head.mlp_b2 = Tensor::zeros({d});
    p.gfp.push_back(std::move(head));
  }
  p.fuser_w = xavier_uniform({2 * d, cfg.d_w}, 2 * d, cfg.d_w, rng);
  p.fuser_b = Tensor::zeros({cfg.d_w});
  return p;
}

std::vector<std::pair<std::string, Tensor>> EpsilonParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("group_prompts", group_prompts);
  for (std::size_t l = 0; l < encoder.size(); ++l) {
    const auto& e = encoder[l];
    const std::string base = "encoder." + std::to_string(l) + ".";
    out.emplace_back(base + "wq", e.wq);
    out.emplace_back(base + "wk", e.wk);
    out.emplace_back(base + "wv", e.wv);
    out.emplace_back(base + "wo", e.wo);
    out.emplace_back(base + "ff_w1", e.ff_w1);
    out.emplace_back(base + "ff_b1", e.ff_b1);
    out.emplace_back(base + "ff_w2", e.ff_w2);
    out.emplace_back(base + "ff_b2", e.ff_b2);
    out.emplace_back(base + "ln1_g", e.ln1_g);
    out.emplace_back(base + "ln1_b", e.ln1_b);
    out.emplace_back(base + "ln2_g", e.ln2_g);
    out.emplace_back(base + "ln2_b", e.ln2_b);
  }
  out.emplace_back("cross.wq", cross.wq);
  out.emplace_back("cross.wk", cross.wk);
  out.emplace_back("cross.wv", cross.wv);
  for (std::size_t m = 0; m < gfp.size(); ++m) {
    const auto& g = gfp[m];
    const std::string base = "gfp." + std::to_string(m) + ".";
    out.emplace_back(base + "proj", g.proj);
    out.emplace_back(base + "mlp_w1", g.mlp_w1);
    out.emplace_back(base + "mlp_b1", g.mlp_b1);
    out.emplace_back(base + "mlp_w2", g.mlp_w2);
    out.emplace_back(base + "mlp_b2", g.mlp_b2);
  }
  out.emplace_back("fuser.w", fuser_w);
  out.emplace_back("fuser.b", fuser_b);
  return out;
}

std::vector<Tensor> EpsilonParams::all() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

std::size_t EpsilonParams::count() const {
  std::size_t n = 0;
  for (const Tensor& t : all()) n += t.size();
  return n;
}

void EpsilonParams::set_requires_grad(bool on) {
  for (Tensor t : all()) t.set_requires_grad(on);
}

void EpsilonParams::zero_grads() {
  for (Tensor t : all()) t.zero_grad();
}

bool EpsilonParams::decayable(const std::string& name, const Tensor& t) {
  return t.rank() == 2 && name != "group_prompts";
}

Tensor gpa_aggregate(const Tensor& features, const EpsilonParams& params, const ModelConfig& cfg) {
  check_features(features, cfg, "gpa_aggregate");
  const std::size_t b = features.shape()[0];
  Tensor prompts = broadcast_to(reshape(params.group_prompts, {1, cfg.M, cfg.D}),
                                {b, cfg.M, cfg.D});
  Tensor x = concat({prompts, features}, 1);  // B x (M+N) x D
  for (const EncoderLayer& layer : params.encoder) {
    x = encoder_layer_forward(x, layer, cfg);
  }
  return slice(x, 1, 0, cfg.M);
}

std::pair<Tensor, Tensor> gpa_refine(const Tensor& gtq, const Tensor& features,
                                     const EpsilonParams& params, const ModelConfig& cfg) {
  check_features(features, cfg, "gpa_refine");
  if (!gtq.defined() || gtq.rank() != 3 || gtq.shape()[1] != cfg.M || gtq.shape()[2] != cfg.D ||
      gtq.shape()[0] != features.shape()[0]) {
    throw std::invalid_argument("gpa_refine: prompt tokens must be [B, " + std::to_string(cfg.M) +
                                ", " + std::to_string(cfg.D) + "]");
  }
  Tensor q = matmul(gtq, params.cross.wq);
  Tensor k = cfg.cross_attn_projected ? matmul(features, params.cross.wk) : features;
  Tensor v = cfg.cross_attn_projected ? matmul(features, params.cross.wv) : features;
  Tensor scores = scale(matmul(q, transpose(k, 1, 2)),
                        1.0 / std::sqrt(static_cast<double>(cfg.D)));  // B x M x N
  Tensor a_c = softmax(scores, 2);
  Tensor grs = matmul(a_c, v);  // B x M x D
  return {grs, a_c};
}

std::vector<Tensor> gfp_blocks(const Tensor& features, const EpsilonParams& params,
                               const ModelConfig& cfg) {
  check_features(features, cfg, "gfp_blocks");
  std::vector<Tensor> blocks;
  blocks.reserve(cfg.M);
  for (std::size_t m = 0; m < cfg.M; ++m) {
    blocks.push_back(matmul(features, params.gfp[m].proj));
  }
  return blocks;
}

std::pair<Tensor, Tensor> gfp_head(const Tensor& block, const GfpHead& head,
                                   const ModelConfig& cfg) {
  check_features(block, cfg, "gfp_head");
  Tensor w = linear(relu(linear(block, head.mlp_w1, head.mlp_b1)), head.mlp_w2, head.mlp_b2);
  Tensor a = softmax(w, 1);                 // over the N tokens, per channel
  Tensor s = sum(mul(block, a), 1);         // B x D
  return {s, a};
}

Tensor fuse(const Tensor& gos, const Tensor& grs, const EpsilonParams& params) {
  if (!gos.defined() || !grs.defined() || gos.shape() != grs.shape() || gos.rank() != 3) {
    throw std::invalid_argument("fuse: GoS and GrS must share a [B, M, D] shape");
  }
  Tensor gs = concat({gos, grs}, 2);  // B x M x 2D
  return linear(gs, params.fuser_w, params.fuser_b);
}

std::pair<Tensor, ForwardTrace> forward(const Tensor& features, const EpsilonParams& params,
                                        const ModelConfig& cfg) {
  check_features(features, cfg, "forward");
  const std::size_t b = features.shape()[0];
  ForwardTrace trace;

  if (cfg.use_gpa) {
    trace.gtq = gpa_aggregate(features, params, cfg);
    auto [grs, a_c] = gpa_refine(trace.gtq, features, params, cfg);
    trace.grs = grs;
    trace.a_c = a_c;
  } else {
    trace.grs = Tensor::zeros({b, cfg.M, cfg.D});
  }

  if (cfg.use_gfp) {
    auto blocks = gfp_blocks(features, params, cfg);
    std::vector<Tensor> pooled;
    pooled.reserve(cfg.M);
    for (std::size_t m = 0; m < cfg.M; ++m) {
      auto [s_m, a_m] = gfp_head(blocks[m], params.gfp[m], cfg);
      trace.a_m.push_back(a_m);
      pooled.push_back(reshape(s_m, {b, 1, cfg.D}));
    }
    trace.gos = concat(pooled, 1);  // B x M x D, head order
  } else {
    trace.gos = Tensor::zeros({b, cfg.M, cfg.D});
  }

  trace.gs = concat({trace.gos, trace.grs}, 2);
  trace.s = linear(trace.gs, params.fuser_w, params.fuser_b);
  return {trace.s, trace};
}

}  // namespace epsilon
