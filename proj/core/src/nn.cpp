#include "hst/nn.hpp"

#include <cmath>

namespace hst {

Tensor maybe_dropout(const Tensor& x, TrainContext& ctx) {
  if (!ctx.active()) return x;
  return dropout(x, ctx.dropout_rate, *ctx.rng);
}

Tensor LinearLayer::operator()(const Tensor& x) const { return matmul(x, weight) + bias; }

LinearLayer make_linear(ParameterStore& store, const std::string& name, int in, int out,
                        RandomStream& rng, double init_std) {
  const double stddev = init_std >= 0.0 ? init_std : std::sqrt(2.0 / (in + out));
  LinearLayer l;
  l.weight = store.add(name + ".w", stddev == 0.0 ? Tensor::zeros({in, out})
                                                  : Tensor::randn({in, out}, rng, stddev));
  l.bias = store.add(name + ".b", Tensor::zeros({out}));
  return l;
}

AttentionWeights make_attention(ParameterStore& store, const std::string& name, int width,
                                int heads, RandomStream& rng) {
  if (heads <= 0 || width % heads != 0) {
    throw Error("attention width " + std::to_string(width) + " not divisible by heads " +
                std::to_string(heads));
  }
  AttentionWeights w;
  w.query = make_linear(store, name + ".q", width, width, rng);
  w.key = make_linear(store, name + ".k", width, width, rng);
  w.value = make_linear(store, name + ".v", width, width, rng);
  w.out = make_linear(store, name + ".o", width, width, rng);
  w.heads = heads;
  return w;
}

namespace {

/// [.., S, h] -> [.., heads, S, dh]
Tensor split_heads(const Tensor& x, int heads) {
  const auto& s = x.shape();
  const int r = static_cast<int>(s.size());
  const int S = s[r - 2], h = s[r - 1];
  std::vector<int> ns(s.begin(), s.end() - 1);
  ns.push_back(heads);
  ns.push_back(h / heads);
  Tensor y = reshape(x, ns);  // [.., S, heads, dh]
  std::vector<int> perm(r + 1);
  for (int d = 0; d < r - 2; ++d) perm[d] = d;
  perm[r - 2] = r - 1;  // heads
  perm[r - 1] = r - 2;  // S
  perm[r] = r;          // dh
  return permute(y, perm);
}

/// [.., heads, S, dh] -> [.., S, h]
Tensor merge_heads(const Tensor& x) {
  const auto& s = x.shape();
  const int r = static_cast<int>(s.size());
  std::vector<int> perm(r);
  for (int d = 0; d < r - 3; ++d) perm[d] = d;
  perm[r - 3] = r - 2;  // S
  perm[r - 2] = r - 3;  // heads
  perm[r - 1] = r - 1;  // dh
  Tensor y = permute(x, perm);  // [.., S, heads, dh]
  std::vector<int> ns(s.begin(), s.end() - 3);
  ns.push_back(s[r - 2]);
  ns.push_back(s[r - 3] * s[r - 1]);
  return reshape(y, ns);
}

/// Indicator over query rows that can attend to at least one key: shape
/// [.., Sq, 1], computed against the score shape with the mask broadcast
/// right-aligned (heads axis, if present in the mask, must be size 1).
Tensor row_any_valid(const std::vector<int>& score_shape, const Mask& valid) {
  const int r = static_cast<int>(score_shape.size());
  const int mr = static_cast<int>(valid.shape.size());
  if (mr >= 3 && valid.shape[mr - 3] != 1) {
    throw Error("attention mask may not vary across heads");
  }
  // score shape without the heads axis (position r-3): [batch.., Sq, Sk]
  std::vector<int> rows_shape;
  for (int d = 0; d < r; ++d) {
    if (d != r - 3) rows_shape.push_back(score_shape[d]);
  }
  // mask aligned to rows_shape: drop the mask's heads axis too if present
  std::vector<int> mshape = valid.shape;
  if (mr >= 3) mshape.erase(mshape.end() - 3);
  // strides of the mask against rows_shape
  const int rr = static_cast<int>(rows_shape.size());
  std::vector<int64_t> ms(rr, 0);
  {
    std::vector<int64_t> own(mshape.size());
    int64_t acc = 1;
    for (int d = static_cast<int>(mshape.size()) - 1; d >= 0; --d) {
      own[d] = acc;
      acc *= mshape[d];
    }
    for (int d = 0; d < static_cast<int>(mshape.size()); ++d) {
      const int od = d + (rr - static_cast<int>(mshape.size()));
      ms[od] = (mshape[d] == 1 && rows_shape[od] != 1) ? 0 : own[d];
    }
  }
  int64_t n = 1;
  for (int d : rows_shape) n *= d;
  const int64_t Sk = rows_shape[rr - 1];
  const int64_t nrows = n / Sk;
  std::vector<double> out(nrows, 0.0);
  std::vector<int> idx(rr, 0);
  int64_t mo = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (valid.data[mo]) out[i / Sk] = 1.0;
    for (int d = rr - 1; d >= 0; --d) {
      idx[d]++;
      mo += ms[d];
      if (idx[d] < rows_shape[d]) break;
      idx[d] = 0;
      mo -= ms[d] * rows_shape[d];
    }
  }
  std::vector<int> out_shape(rows_shape.begin(), rows_shape.end() - 1);
  out_shape.push_back(1);  // [batch.., Sq, 1]
  return Tensor::from_data(out_shape, std::move(out));
}

}  // namespace

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Mask& key_valid, const AttentionWeights& w) {
  const int h = q.dim(-1);
  if (k.dim(-1) != h || v.dim(-1) != h) {
    throw Error("attention inputs disagree on width: " + shape_str(q.shape()) + ", " +
                shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const int dh = h / w.heads;
  Tensor qh = split_heads(w.query(q), w.heads);
  Tensor kh = split_heads(w.key(k), w.heads);
  Tensor vh = split_heads(w.value(v), w.heads);
  const int kr = kh.rank();
  std::vector<int> tperm(kr);
  for (int d = 0; d < kr; ++d) tperm[d] = d;
  std::swap(tperm[kr - 1], tperm[kr - 2]);
  Tensor scores = mul_scalar(matmul(qh, permute(kh, tperm)), 1.0 / std::sqrt(double(dh)));
  Mask fallback;
  const Mask* m = &key_valid;
  if (key_valid.empty()) {
    fallback = Mask::ones({1});
    m = &fallback;
  }
  Tensor probs = masked_softmax(scores, *m);
  Tensor ctxv = merge_heads(matmul(probs, vh));
  Tensor out = w.out(ctxv);
  // rows with no attendable key are defined to be zero
  bool all_valid = true;
  for (uint8_t b : m->data) {
    if (!b) {
      all_valid = false;
      break;
    }
  }
  if (!all_valid) out = out * row_any_valid(scores.shape(), *m);
  return out;
}

Tensor TransformerLayer::apply(const Tensor& q, const Tensor& kv, const Mask& key_valid,
                               TrainContext& ctx) const {
  Tensor a = multi_head_attention(q, kv, kv, key_valid, attn);
  Tensor x = layer_norm(q + maybe_dropout(a, ctx), ln1_gain, ln1_bias);
  Tensor f = ffn2(gelu(ffn1(x)));
  return layer_norm(x + maybe_dropout(f, ctx), ln2_gain, ln2_bias);
}

TransformerLayer make_transformer_layer(ParameterStore& store, const std::string& name, int width,
                                        int heads, RandomStream& rng) {
  TransformerLayer l;
  l.attn = make_attention(store, name + ".attn", width, heads, rng);
  l.ffn1 = make_linear(store, name + ".ffn1", width, width, rng);
  l.ffn2 = make_linear(store, name + ".ffn2", width, width, rng);
  l.ln1_gain = store.add(name + ".ln1.g", Tensor::full({width}, 1.0));
  l.ln1_bias = store.add(name + ".ln1.b", Tensor::zeros({width}));
  l.ln2_gain = store.add(name + ".ln2.g", Tensor::full({width}, 1.0));
  l.ln2_bias = store.add(name + ".ln2.b", Tensor::zeros({width}));
  return l;
}

Tensor sinusoidal_embedding(int length, int width) {
  std::vector<double> d(static_cast<size_t>(length) * width, 0.0);
  for (int t = 0; t < length; ++t) {
    for (int i = 0; i * 2 < width; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / width);
      d[t * width + 2 * i] = std::sin(t * freq);
      if (2 * i + 1 < width) d[t * width + 2 * i + 1] = std::cos(t * freq);
    }
  }
  return Tensor::from_data({length, width}, std::move(d));
}

Tensor sinusoidal_embedding_2d(int rows, int cols, int width) {
  const int half = width / 2;
  Tensor row_pe = sinusoidal_embedding(rows, half);
  Tensor col_pe = sinusoidal_embedding(cols, width - half);
  std::vector<double> d(static_cast<size_t>(rows) * cols * width);
  const auto& rv = row_pe.values();
  const auto& cv = col_pe.values();
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      double* dst = &d[(static_cast<size_t>(r) * cols + c) * width];
      for (int i = 0; i < half; ++i) dst[i] = rv[r * half + i];
      for (int i = 0; i < width - half; ++i) dst[half + i] = cv[c * (width - half) + i];
    }
  }
  return Tensor::from_data({rows * cols, width}, std::move(d));
}

}  // namespace hst
