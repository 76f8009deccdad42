#pragma once

#include <string>

#include "hst/params.hpp"
#include "hst/tensor.hpp"

namespace hst {

/// Forward-pass context: when rng is set and dropout_rate > 0 the pass is a
/// training pass with inverted dropout; otherwise evaluation.
struct TrainContext {
  RandomStream* rng = nullptr;
  double dropout_rate = 0.0;
  bool active() const { return rng != nullptr && dropout_rate > 0.0; }
};

Tensor maybe_dropout(const Tensor& x, TrainContext& ctx);

/// y = x W + b with W [in, out], applied over the last axis.
struct LinearLayer {
  Tensor weight;
  Tensor bias;
  Tensor operator()(const Tensor& x) const;
};

LinearLayer make_linear(ParameterStore& store, const std::string& name, int in, int out,
                        RandomStream& rng, double init_std = -1.0);

struct AttentionWeights {
  LinearLayer query, key, value, out;
  int heads = 1;
};

AttentionWeights make_attention(ParameterStore& store, const std::string& name, int width,
                                int heads, RandomStream& rng);

/// Scaled dot-product multi-head attention.
///   q [..., Sq, h], k/v [..., Sk, h] -> [..., Sq, h]
/// key_valid broadcasts right-aligned against the score tensor
/// [..., heads, Sq, Sk]; if it carries a heads axis it must have size 1.
/// Query rows with no valid key yield exactly zero output rows.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Mask& key_valid, const AttentionWeights& w);

/// Post-norm Transformer layer: attention and feed-forward sublayers, each
/// with residual and layer norm. Self-attention passes kv = q.
struct TransformerLayer {
  AttentionWeights attn;
  LinearLayer ffn1, ffn2;
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  Tensor apply(const Tensor& q, const Tensor& kv, const Mask& key_valid,
               TrainContext& ctx) const;
};

TransformerLayer make_transformer_layer(ParameterStore& store, const std::string& name, int width,
                                        int heads, RandomStream& rng);

/// Fixed sinusoidal position code, [length, width].
Tensor sinusoidal_embedding(int length, int width);
/// Fixed 2D position code over a grid, [rows*cols, width] (row-major cells).
Tensor sinusoidal_embedding_2d(int rows, int cols, int width);

}  // namespace hst
