#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "epsilon/tensor.hpp"

namespace epsilon {

struct ModelConfig {
  std::size_t M = 8;            // semantic group count
  std::size_t D = 64;           // token feature dim
  std::size_t N = 16;           // tokens per image
  std::size_t d_w = 32;         // label-embedding dim
  std::size_t encoder_layers = 1;
  std::size_t encoder_heads = 4;
  std::size_t mlp_hidden = 0;   // 0 means D (shared by GFP MLPs and encoder FF)
  bool cross_attn_projected = true;  // learned W_K/W_V on features vs raw features
  bool use_gpa = true;          // ablation: zero the GrS half of the fuser input
  bool use_gfp = true;          // ablation: zero the GoS half of the fuser input

  std::size_t mlp_hidden_or_default() const { return mlp_hidden == 0 ? D : mlp_hidden; }
  std::size_t head_dim() const { return D / encoder_heads; }
  void validate() const;  // throws std::invalid_argument on any violation
};

// One pre-norm transformer encoder layer (self-attention + feed-forward).
struct EncoderLayer {
  Tensor wq, wk, wv, wo;              // D x D projections
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;  // D -> H -> D
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;  // normalization gain/offset, D each
};

struct CrossAttn {
  Tensor wq, wk, wv;  // D x D
};

// One global-pooling head: block projection + token-scoring MLP.
struct GfpHead {
  Tensor proj;                          // D x D
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // D -> H -> D
};

struct EpsilonParams {
  Tensor group_prompts;  // M x D
  std::vector<EncoderLayer> encoder;
  CrossAttn cross;
  std::vector<GfpHead> gfp;  // M heads
  Tensor fuser_w, fuser_b;   // 2D x d_w, d_w

  // Seeded initialization: uniform(-a, a) with a = sqrt(6/(fan_in+fan_out))
  // for projections, normal(0, 0.02) for prompts, zeros for biases/offsets,
  // ones for normalization gains.
  static EpsilonParams init(const ModelConfig& cfg, std::uint64_t seed);

  // Stable (name, tensor) enumeration; the order defines checkpoint layout.
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::vector<Tensor> all() const;
  std::size_t count() const;  // total scalar parameters

  void set_requires_grad(bool on);
  void zero_grads();

  // Weight decay applies to weight matrices only: rank-2 tensors except the
  // group prompts.
  static bool decayable(const std::string& name, const Tensor& t);
};

// Intermediate activations retained by forward() for inspection and export.
struct ForwardTrace {
  Tensor gtq;               // B x M x D   encoder output for the prompt tokens
  Tensor a_c;               // B x M x N   cross-attention map (undefined if GPA off)
  Tensor grs;               // B x M x D   refined group semantics
  std::vector<Tensor> a_m;  // M maps, B x N x D (empty if GFP off)
  Tensor gos;               // B x M x D   pooled global semantics
  Tensor gs;                // B x M x 2D  fuser input
  Tensor s;                 // B x M x d_w semantic group
};

// Prompt aggregation: encode [prompts; F] with the self-attention encoder and
// return the first M output tokens (B x M x D).
Tensor gpa_aggregate(const Tensor& features, const EpsilonParams& params, const ModelConfig& cfg);

// Cross-attention refinement: queries from the aggregated prompts, keys and
// values from the features. Returns (GrS: B x M x D, A_c: B x M x N).
std::pair<Tensor, Tensor> gpa_refine(const Tensor& gtq, const Tensor& features,
                                     const EpsilonParams& params, const ModelConfig& cfg);

// M independent feature blocks FG^m = F . P_m, each B x N x D.
std::vector<Tensor> gfp_blocks(const Tensor& features, const EpsilonParams& params,
                               const ModelConfig& cfg);

// Token-weighted pooling of one block. Returns (S^m: B x D, A^m: B x N x D);
// the weights are a softmax over the N tokens, independently per channel.
std::pair<Tensor, Tensor> gfp_head(const Tensor& block, const GfpHead& head,
                                   const ModelConfig& cfg);

// GS = concat(GoS, GrS) on the feature axis; S = GS . W_f + b_f per group row.
Tensor fuse(const Tensor& gos, const Tensor& grs, const EpsilonParams& params);

// Full pipeline: features (B x N x D) -> semantic groups (B x M x d_w).
std::pair<Tensor, ForwardTrace> forward(const Tensor& features, const EpsilonParams& params,
                                        const ModelConfig& cfg);

}  // namespace epsilon
