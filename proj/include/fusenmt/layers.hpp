#pragma once

// Attention, feed-forward, normalization and embedding building blocks
// shared by the language models and the translation model.

#include <cmath>
#include <string>
#include <vector>

#include "fusenmt/tensor.hpp"

namespace fusenmt {

enum class MaskKind { kForward, kBackward, kNone, kCross };

inline const char* mask_kind_name(MaskKind k) {
  switch (k) {
    case MaskKind::kForward: return "forward";
    case MaskKind::kBackward: return "backward";
    case MaskKind::kNone: return "none";
    case MaskKind::kCross: return "cross";
  }
  return "?";
}

// Additive directional mask. forward: query c may only attend keys v <= c
// (entry (c,v) is the -inf sentinel iff c < v). backward is its transpose.
// none/cross are all-zero.
template <typename Real>
struct AttentionMask {
  MaskKind kind = MaskKind::kNone;
  Tensor<Real> matrix;  // [K_q, K_k], entries in {0, kNegInf}
};

template <typename Real>
AttentionMask<Real> build_mask(std::int64_t k_q, std::int64_t k_k,
                               MaskKind kind) {
  if (k_q <= 0 || k_k <= 0) {
    throw ContractError("build_mask: sequence length must be >= 1");
  }
  if ((kind == MaskKind::kForward || kind == MaskKind::kBackward) && k_q != k_k) {
    throw ContractError("directional masks must be square");
  }
  std::vector<Real> m(static_cast<std::size_t>(k_q * k_k), Real(0));
  if (kind == MaskKind::kForward) {
    for (std::int64_t c = 0; c < k_q; ++c) {
      for (std::int64_t v = c + 1; v < k_k; ++v) {
        m[static_cast<std::size_t>(c * k_k + v)] = Real(kNegInf);
      }
    }
  } else if (kind == MaskKind::kBackward) {
    for (std::int64_t c = 0; c < k_q; ++c) {
      for (std::int64_t v = 0; v < c; ++v) {
        m[static_cast<std::size_t>(c * k_k + v)] = Real(kNegInf);
      }
    }
  }
  AttentionMask<Real> out;
  out.kind = kind;
  out.matrix = Tensor<Real>(Shape{k_q, k_k}, std::move(m));
  return out;
}

template <typename Real>
AttentionMask<Real> build_mask(std::int64_t K, MaskKind kind) {
  return build_mask<Real>(K, K, kind);
}

// Key-padding mask for a batch, shaped [B,1,Kq,Kk] so it broadcasts over
// heads. Padded keys are masked everywhere; in self-attention a padded
// query keeps its own position unmasked so its softmax row never ends up
// empty (those rows are ignored by every loss).
template <typename Real>
Tensor<Real> make_pad_mask(const std::vector<std::int64_t>& key_lengths,
                           std::int64_t k_q, std::int64_t k_k,
                           bool self_attention) {
  const std::int64_t B = static_cast<std::int64_t>(key_lengths.size());
  std::vector<Real> m(static_cast<std::size_t>(B * k_q * k_k), Real(0));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t q = 0; q < k_q; ++q) {
      for (std::int64_t k = key_lengths[static_cast<std::size_t>(b)]; k < k_k; ++k) {
        if (self_attention && k == q) continue;
        m[static_cast<std::size_t>((b * k_q + q) * k_k + k)] = Real(kNegInf);
      }
    }
  }
  return Tensor<Real>(Shape{B, 1, k_q, k_k}, std::move(m));
}

// Sum of two additive masks (constants; sentinels stack and stay below the
// hard-mask threshold).
template <typename Real>
Tensor<Real> combine_masks(const Tensor<Real>& a, const Tensor<Real>& b) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor<Real> zero(out_shape, Real(0));
  auto tmp = add(zero, a);
  auto combined = add(tmp, b);
  return Tensor<Real>(combined.shape(), combined.values());  // constant copy
}

// Dropout context threaded through the layers. Inactive outside training so
// evaluation and decoding stay deterministic.
template <typename Real>
struct DropoutCtx {
  Real rate = Real(0);
  Rng* rng = nullptr;
  bool active() const { return rate > Real(0) && rng != nullptr; }
  Tensor<Real> operator()(const Tensor<Real>& t) const {
    return active() ? dropout(t, rate, *rng) : t;
  }
};

template <typename Real>
struct LayerNormParams {
  Tensor<Real> gain;    // [d]
  Tensor<Real> offset;  // [d]

  static LayerNormParams make(std::int64_t d) {
    LayerNormParams p;
    p.gain = Tensor<Real>(Shape{d}, Real(1));
    p.offset = Tensor<Real>(Shape{d}, Real(0));
    return p;
  }
  void register_params(const std::string& prefix, std::vector<Tensor<Real>>& out) {
    out.push_back(gain.mark_trainable(prefix + ".gain"));
    out.push_back(offset.mark_trainable(prefix + ".offset"));
  }
};

inline constexpr double kLayerNormEps = 1e-6;

// Normalize the last dimension to zero mean / unit variance, then apply the
// learned affine.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const LayerNormParams<Real>& p) {
  const std::size_t last = x.rank() - 1;
  auto mu = mean_axis(x, last, true);
  auto centered = sub(x, mu);
  auto var = mean_axis(mul(centered, centered), last, true);
  auto norm = divide(centered, fusenmt::sqrt(add_scalar(var, Real(kLayerNormEps))));
  return add(mul(norm, p.gain), p.offset);
}

template <typename Real>
struct AttentionParams {
  Tensor<Real> wq, wk, wv, wo;  // all [d, d], heads fused
  std::int64_t heads = 1;

  static AttentionParams make(std::int64_t d, std::int64_t heads, Rng& rng) {
    if (d % heads != 0) throw ContractError("model width not divisible by head count");
    AttentionParams p;
    p.heads = heads;
    for (auto* w : {&p.wq, &p.wk, &p.wv, &p.wo}) {
      *w = Tensor<Real>(Shape{d, d}, Real(0));
      init_glorot(*w, rng);
    }
    return p;
  }
  void register_params(const std::string& prefix, std::vector<Tensor<Real>>& out) {
    out.push_back(wq.mark_trainable(prefix + ".wq"));
    out.push_back(wk.mark_trainable(prefix + ".wk"));
    out.push_back(wv.mark_trainable(prefix + ".wv"));
    out.push_back(wo.mark_trainable(prefix + ".wo"));
  }
};

template <typename Real>
struct FfnParams {
  Tensor<Real> w1;  // [d, d_ff]
  Tensor<Real> w2;  // [d_ff, d]

  static FfnParams make(std::int64_t d, std::int64_t d_ff, Rng& rng) {
    FfnParams p;
    p.w1 = Tensor<Real>(Shape{d, d_ff}, Real(0));
    p.w2 = Tensor<Real>(Shape{d_ff, d}, Real(0));
    init_glorot(p.w1, rng);
    init_glorot(p.w2, rng);
    return p;
  }
  void register_params(const std::string& prefix, std::vector<Tensor<Real>>& out) {
    out.push_back(w1.mark_trainable(prefix + ".w1"));
    out.push_back(w2.mark_trainable(prefix + ".w2"));
  }
};

template <typename Real>
Tensor<Real> feed_forward(const Tensor<Real>& x, const FfnParams<Real>& p) {
  return matmul(relu(matmul(x, p.w1)), p.w2);
}

namespace detail {

// [.., T, d] -> [.., H, T, d/H]
template <typename Real>
Tensor<Real> split_heads(const Tensor<Real>& x, std::int64_t heads) {
  const std::int64_t d = x.shape()[x.rank() - 1];
  const std::int64_t t = x.shape()[x.rank() - 2];
  Shape s(x.shape().begin(), x.shape().end() - 2);
  s.push_back(t);
  s.push_back(heads);
  s.push_back(d / heads);
  auto r = reshape(x, s);
  std::vector<std::size_t> axes(r.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[r.rank() - 3], axes[r.rank() - 2]);
  return permute(r, axes);
}

// [.., H, T, d/H] -> [.., T, d]
template <typename Real>
Tensor<Real> merge_heads(const Tensor<Real>& x) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[x.rank() - 3], axes[x.rank() - 2]);
  auto p = permute(x, axes);
  Shape s(p.shape().begin(), p.shape().end() - 2);
  s.push_back(p.shape()[p.rank() - 2] * p.shape()[p.rank() - 1]);
  return reshape(p, s);
}

}  // namespace detail

// Scaled dot-product attention: softmax(Q K^T / sqrt(d_k) + mask) V.
// `mask`, when present, must broadcast to the score shape.
template <typename Real>
Tensor<Real> directional_attention(const Tensor<Real>& q, const Tensor<Real>& k,
                                   const Tensor<Real>& v,
                                   const Tensor<Real>* mask) {
  const std::int64_t d_k = q.shape()[q.rank() - 1];
  if (k.shape()[k.rank() - 1] != d_k || v.shape()[v.rank() - 2] != k.shape()[k.rank() - 2]) {
    throw ShapeError("attention shapes disagree: Q " + shape_str(q.shape()) +
                     " K " + shape_str(k.shape()) + " V " + shape_str(v.shape()));
  }
  auto scores = scale(matmul(q, transpose_last2(k)),
                      Real(1) / std::sqrt(static_cast<Real>(d_k)));
  auto probs = softmax_lastdim(scores, mask);
  return matmul(probs, v);
}

template <typename Real>
Tensor<Real> directional_attention(const Tensor<Real>& q, const Tensor<Real>& k,
                                   const Tensor<Real>& v,
                                   const AttentionMask<Real>& mask) {
  if (mask.matrix.shape()[0] != q.shape()[q.rank() - 2] ||
      mask.matrix.shape()[1] != k.shape()[k.rank() - 2]) {
    throw ShapeError("mask " + shape_str(mask.matrix.shape()) +
                     " does not match Q " + shape_str(q.shape()) + " / K " +
                     shape_str(k.shape()));
  }
  return directional_attention(q, k, v, &mask.matrix);
}

// Multi-head attention per Eq. 2: H parallel directional heads over
// projected Q/K/V, concatenated and output-projected. Works on [T,d] and
// [B,T,d] inputs; the mask broadcasts over batch and heads.
template <typename Real>
Tensor<Real> multi_head_attention(const Tensor<Real>& x_q,
                                  const Tensor<Real>& x_kv,
                                  const AttentionParams<Real>& p,
                                  const Tensor<Real>* mask) {
  auto q = detail::split_heads(matmul(x_q, p.wq), p.heads);
  auto k = detail::split_heads(matmul(x_kv, p.wk), p.heads);
  auto v = detail::split_heads(matmul(x_kv, p.wv), p.heads);
  auto ctx = directional_attention(q, k, v, mask);
  return matmul(detail::merge_heads(ctx), p.wo);
}

template <typename Real>
Tensor<Real> multi_head_attention(const Tensor<Real>& x_q,
                                  const Tensor<Real>& x_kv,
                                  const AttentionParams<Real>& p,
                                  const AttentionMask<Real>& mask) {
  return multi_head_attention(x_q, x_kv, p, &mask.matrix);
}

// Parameters of one SLM layer: attention, feed-forward and the single layer
// norm of the residual write-back.
template <typename Real>
struct SlmLayerParams {
  AttentionParams<Real> attn;
  FfnParams<Real> ffn;
  LayerNormParams<Real> ln;

  static SlmLayerParams make(std::int64_t d, std::int64_t d_ff,
                             std::int64_t heads, Rng& rng) {
    SlmLayerParams p;
    p.attn = AttentionParams<Real>::make(d, heads, rng);
    p.ffn = FfnParams<Real>::make(d, d_ff, rng);
    p.ln = LayerNormParams<Real>::make(d);
    return p;
  }
  void register_params(const std::string& prefix, std::vector<Tensor<Real>>& out) {
    attn.register_params(prefix + ".attn", out);
    ffn.register_params(prefix + ".ffn", out);
    ln.register_params(prefix + ".ln", out);
  }
};

// One SLM layer, exactly R_m = LN(FFN(H_m) + R_{m-1}) with
// H_m = MultiHead(R_{m-1}): a single residual wrapping the feed-forward
// output, no residual around the attention sublayer.
template <typename Real>
Tensor<Real> slm_layer(const Tensor<Real>& r_prev, const SlmLayerParams<Real>& p,
                       const Tensor<Real>* mask,
                       const DropoutCtx<Real>& drop = {}) {
  auto h = multi_head_attention(r_prev, r_prev, p.attn, mask);
  auto f = feed_forward(h, p.ffn);
  return layer_norm(add(drop(f), r_prev), p.ln);
}

template <typename Real>
Tensor<Real> slm_layer(const Tensor<Real>& r_prev, const SlmLayerParams<Real>& p,
                       const AttentionMask<Real>& mask,
                       const DropoutCtx<Real>& drop = {}) {
  return slm_layer(r_prev, p, &mask.matrix, drop);
}

// Standard two-sublayer Transformer encoder layer (post-norm).
template <typename Real>
struct EncoderLayerParams {
  AttentionParams<Real> attn;
  FfnParams<Real> ffn;
  LayerNormParams<Real> ln_attn, ln_ffn;

  static EncoderLayerParams make(std::int64_t d, std::int64_t d_ff,
                                 std::int64_t heads, Rng& rng) {
    EncoderLayerParams p;
    p.attn = AttentionParams<Real>::make(d, heads, rng);
    p.ffn = FfnParams<Real>::make(d, d_ff, rng);
    p.ln_attn = LayerNormParams<Real>::make(d);
    p.ln_ffn = LayerNormParams<Real>::make(d);
    return p;
  }
  void register_params(const std::string& prefix, std::vector<Tensor<Real>>& out) {
    attn.register_params(prefix + ".attn", out);
    ffn.register_params(prefix + ".ffn", out);
    ln_attn.register_params(prefix + ".ln_attn", out);
    ln_ffn.register_params(prefix + ".ln_ffn", out);
  }
};

template <typename Real>
Tensor<Real> encoder_layer(const Tensor<Real>& x, const EncoderLayerParams<Real>& p,
                           const Tensor<Real>* mask,
                           const DropoutCtx<Real>& drop = {}) {
  auto a = layer_norm(add(x, drop(multi_head_attention(x, x, p.attn, mask))), p.ln_attn);
  return layer_norm(add(a, drop(feed_forward(a, p.ffn))), p.ln_ffn);
}

// Decoder layer: causal self-attention, cross-attention over the encoder
// output, then feed-forward; each sublayer post-normed.
template <typename Real>
struct DecoderLayerParams {
  AttentionParams<Real> self_attn, cross_attn;
  FfnParams<Real> ffn;
  LayerNormParams<Real> ln_self, ln_cross, ln_ffn;

  static DecoderLayerParams make(std::int64_t d, std::int64_t d_ff,
                                 std::int64_t heads, Rng& rng) {
    DecoderLayerParams p;
    p.self_attn = AttentionParams<Real>::make(d, heads, rng);
    p.cross_attn = AttentionParams<Real>::make(d, heads, rng);
    p.ffn = FfnParams<Real>::make(d, d_ff, rng);
    p.ln_self = LayerNormParams<Real>::make(d);
    p.ln_cross = LayerNormParams<Real>::make(d);
    p.ln_ffn = LayerNormParams<Real>::make(d);
    return p;
  }
  void register_params(const std::string& prefix, std::vector<Tensor<Real>>& out) {
    self_attn.register_params(prefix + ".self", out);
    cross_attn.register_params(prefix + ".cross", out);
    ffn.register_params(prefix + ".ffn", out);
    ln_self.register_params(prefix + ".ln_self", out);
    ln_cross.register_params(prefix + ".ln_cross", out);
    ln_ffn.register_params(prefix + ".ln_ffn", out);
  }
};

template <typename Real>
Tensor<Real> decoder_layer(const Tensor<Real>& x, const Tensor<Real>& enc_out,
                           const DecoderLayerParams<Real>& p,
                           const Tensor<Real>* self_mask,
                           const Tensor<Real>* cross_mask,
                           const DropoutCtx<Real>& drop = {}) {
  auto a = layer_norm(add(x, drop(multi_head_attention(x, x, p.self_attn, self_mask))), p.ln_self);
  auto b = layer_norm(add(a, drop(multi_head_attention(a, enc_out, p.cross_attn, cross_mask))), p.ln_cross);
  return layer_norm(add(b, drop(feed_forward(b, p.ffn))), p.ln_ffn);
}

// Sinusoidal position table. Deterministic; row 0 is [0,1,0,1,...].
template <typename Real>
Tensor<Real> positional_encoding(std::int64_t K, std::int64_t d) {
  if (K < 1 || d < 1) throw ContractError("positional_encoding: K,d must be >= 1");
  if (d % 2 != 0) throw ContractError("positional_encoding: d must be even");
  std::vector<Real> table(static_cast<std::size_t>(K * d));
  for (std::int64_t pos = 0; pos < K; ++pos) {
    for (std::int64_t i = 0; i < d / 2; ++i) {
      const double rate = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      table[static_cast<std::size_t>(pos * d + 2 * i)] = static_cast<Real>(std::sin(angle));
      table[static_cast<std::size_t>(pos * d + 2 * i + 1)] = static_cast<Real>(std::cos(angle));
    }
  }
  return Tensor<Real>(Shape{K, d}, std::move(table));
}

// Token embedding + sqrt(d) scaling + position table, the standard input
// processing in front of the first layer.
template <typename Real>
Tensor<Real> embed_sequence(const Tensor<Real>& table, const std::vector<int>& ids,
                            bool add_positions) {
  const std::int64_t d = table.shape()[1];
  auto emb = scale(embedding_rows(table, ids), std::sqrt(static_cast<Real>(d)));
  if (!add_positions) return emb;
  auto pos = positional_encoding<Real>(static_cast<std::int64_t>(ids.size()), d);
  return add(emb, pos);
}

}  // namespace fusenmt
