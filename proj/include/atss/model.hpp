// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// The Atss separator: N attention blocks (dilated-CNN feature extraction,
// multi-head scaled dot-product attention over time frames, feed-forward),
// each wrapped in pre-layer-norm residuals, followed by a transform block
// that emits the time-frequency mask. Also the l2 and PIT training losses.

#ifndef ATSS_MODEL_HPP_
#define ATSS_MODEL_HPP_

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "atss/tensor.hpp"

namespace atss {

enum class AttentionAxis { kTime, kFreq };
enum class ModelMode { kFull, kNoAttention, kPit };

inline const char* to_string(AttentionAxis a) {
  return a == AttentionAxis::kTime ? "time" : "freq";
}
inline const char* to_string(ModelMode m) {
  switch (m) {
    case ModelMode::kFull: return "full";
    case ModelMode::kNoAttention: return "no_attention";
    default: return "pit";
  }
}

struct ModelConfig {
  int n_blocks = 3;
  int n_heads = 2;
  int d_k = 64;
  int freq_bins = 257;  // onesided STFT bins
  int embed_dim = 256;  // speaker-embedding width
  AttentionAxis attention_axis = AttentionAxis::kTime;
  ModelMode mode = ModelMode::kFull;

  // PIT variants take no embedding and emit one mask per source.
  bool uses_embedding() const { return mode != ModelMode::kPit; }
  int n_masks() const { return mode == ModelMode::kPit ? 2 : 1; }
  int feature_dim() const {
    return freq_bins + (uses_embedding() ? embed_dim : 0);
  }
  int ffn_hidden() const { return 4 * feature_dim(); }

  void validate() const {
    ATSS_CHECK(n_blocks >= 1 && n_heads >= 1 && d_k >= 1 && freq_bins >= 1 &&
                   embed_dim >= 1,
               "ModelConfig: sizes must be positive");
    ATSS_CHECK(d_k % n_heads == 0,
               "ModelConfig: d_k (" + std::to_string(d_k) +
                   ") must be divisible by n_heads (" +
                   std::to_string(n_heads) + ")");
  }
};

// Dilated-CNN stack of the attention block's feature extractor: five 5x5
// layers dilated 1,2,4,8,16 along time, then a 1x1 layer, all at d_k
// channels.
inline constexpr std::array<int, 6> kDcnnTimeDilation = {1, 2, 4, 8, 16, 1};
inline constexpr std::array<int, 6> kDcnnKernel = {5, 5, 5, 5, 5, 1};

// ---------------------------------------------------------------------------
// Operations

// R[t] = [mag[t] || emb]; concatenation along the frequency-bin axis.
template <class T>
Tensor<T> concat_inputs(const Tensor<T>& mag, const Tensor<T>& emb) {
  ATSS_CHECK(mag.ndim() == 2, "concat_inputs: magnitude must be [T, F]");
  ATSS_CHECK(emb.ndim() == 1, "concat_inputs: embedding must be a vector");
  return concat<T>({mag, tile_rows(emb, mag.dim(0))}, 1);
}

// Row-stochastic attention weights softmax(Q K^T / sqrt(scale_dim)).
template <class T>
Tensor<T> scaled_dot_attention_weights(const Tensor<T>& q, const Tensor<T>& k,
                                       int scale_dim) {
  ATSS_CHECK(q.ndim() == 2 && k.ndim() == 2 && q.dim(1) == k.dim(1),
             "attention: Q/K shape mismatch");
  ATSS_CHECK(scale_dim >= 1, "attention: bad scale dimension");
  auto scores = scale(matmul(q, transpose2d(k)),
                      static_cast<T>(1.0 / std::sqrt(double(scale_dim))));
  return softmax(scores, 1);
}

// softmax(Q K^T / sqrt(d_k)) V over the position axis (rows of Q/K/V).
template <class T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k,
                               const Tensor<T>& v, int scale_dim) {
  ATSS_CHECK(v.ndim() == 2 && v.dim(0) == k.dim(0),
             "attention: K/V row mismatch");
  return matmul(scaled_dot_attention_weights(q, k, scale_dim), v);
}

namespace detail {

// [C,T,F] -> [P, (C/heads)*S] per-head position matrix, where positions P
// are time frames (S=F) or frequency bins (S=T).
template <class T>
Tensor<T> head_to_positions(const Tensor<T>& x, AttentionAxis axis) {
  if (axis == AttentionAxis::kTime) {
    auto p = permute(x, {1, 0, 2});  // [T, c, F]
    return reshape(p, {p.dim(0), p.dim(1) * p.dim(2)});
  }
  auto p = permute(x, {2, 0, 1});  // [F, c, T]
  return reshape(p, {p.dim(0), p.dim(1) * p.dim(2)});
}

template <class T>
Tensor<T> positions_to_head(const Tensor<T>& m, int64_t c, int64_t t,
                            int64_t f, AttentionAxis axis) {
  if (axis == AttentionAxis::kTime)
    return permute(reshape(m, {t, c, f}), {1, 0, 2});
  return permute(reshape(m, {f, c, t}), {1, 2, 0});
}

}  // namespace detail

// Channel-split multi-head attention over [d_k,T,F] maps: each head flattens
// its (channels/heads x F) slice per time frame so the score matrix is TxT
// ("positions are time frames"); heads are concatenated back along channels
// and mixed by the 3x3 output convolution wo. The softmax scale uses d_k,
// the channel dimension of the feature maps.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k,
                               const Tensor<T>& v, const Tensor<T>& wo,
                               const Tensor<T>& wo_bias, int n_heads,
                               int scale_dim,
                               AttentionAxis axis = AttentionAxis::kTime) {
  ATSS_CHECK(q.ndim() == 3, "multi_head_attention: need [C,T,F] maps");
  const int64_t c = q.dim(0), t = q.dim(1), f = q.dim(2);
  ATSS_CHECK(c % n_heads == 0,
             "multi_head_attention: channels not divisible by head count");
  const int64_t ch = c / n_heads;
  std::vector<Tensor<T>> heads;
  heads.reserve(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    auto qh = detail::head_to_positions(slice(q, 0, h * ch, ch), axis);
    auto kh = detail::head_to_positions(slice(k, 0, h * ch, ch), axis);
    auto vh = detail::head_to_positions(slice(v, 0, h * ch, ch), axis);
    auto oh = scaled_dot_attention(qh, kh, vh, scale_dim);
    heads.push_back(detail::positions_to_head(oh, ch, t, f, axis));
  }
  auto cat = concat(heads, 0);
  return add_channel_bias(conv2d(cat, wo), wo_bias);
}

// FFN(x) = relu(x W1 + b1) W2 + b2 along the F axis, applied independently
// for every (channel, time) pair.
template <class T>
Tensor<T> feed_forward(const Tensor<T>& x, const Tensor<T>& w1,
                       const Tensor<T>& b1, const Tensor<T>& w2,
                       const Tensor<T>& b2) {
  ATSS_CHECK(x.ndim() == 3, "feed_forward: need [C,T,F]");
  const int64_t c = x.dim(0), t = x.dim(1), f = x.dim(2);
  auto flat = reshape(x, {c * t, f});
  auto hidden = relu(linear(flat, w1, b1));
  auto out = linear(hidden, w2, b2);
  return reshape(out, {c, t, static_cast<int64_t>(w2.dim(1))});
}

// |X_hat| = |X| . M, the element-wise masking product.
template <class T>
Tensor<T> apply_mask(const Tensor<T>& mag, const Tensor<T>& mask) {
  ATSS_CHECK(mag.shape() == mask.shape(), "apply_mask: shape mismatch");
  return mul(mag, mask);
}

// Squared l2 norm of the difference, summed over all (t,f) cells.
template <class T>
Tensor<T> l2_loss(const Tensor<T>& est, const Tensor<T>& target) {
  ATSS_CHECK(est.shape() == target.shape(), "l2_loss: shape mismatch " +
                                                shape_str(est.shape()) +
                                                " vs " +
                                                shape_str(target.shape()));
  const auto& ev = est.data();
  const auto& tv = target.data();
  double acc = 0.0;
  for (size_t i = 0; i < ev.size(); ++i) {
    const double d = double(ev[i]) - double(tv[i]);
    acc += d * d;
  }
  return detail::make_op<T>(
      Shape{1}, {static_cast<T>(acc)}, {est, target},
      [](detail::Node<T>* self, const T* adj, const std::vector<T*>& pa) {
        const auto& ev = self->parents[0]->value;
        const auto& tv = self->parents[1]->value;
        for (size_t i = 0; i < ev.size(); ++i) {
          const T g = static_cast<T>(2) * (ev[i] - tv[i]) * adj[0];
          if (pa[0]) pa[0][i] += g;
          if (pa[1]) pa[1][i] -= g;
        }
      });
}

template <class T>
struct PitResult {
  Tensor<T> loss;
  bool swapped = false;  // false: est i -> target i (identity assignment)
};

// Two-source permutation invariant loss: evaluates both assignments of the
// masked estimates to the targets and keeps the cheaper one; ties break
// toward the identity assignment.
template <class T>
PitResult<T> pit_loss(const std::vector<Tensor<T>>& masks,
                      const Tensor<T>& mixture_mag,
                      const std::vector<Tensor<T>>& targets) {
  ATSS_CHECK(masks.size() == 2 && targets.size() == 2,
             "pit_loss: exactly two estimates and two targets");
  auto est0 = apply_mask(mixture_mag, masks[0]);
  auto est1 = apply_mask(mixture_mag, masks[1]);
  auto identity = add(l2_loss(est0, targets[0]), l2_loss(est1, targets[1]));
  auto swapped = add(l2_loss(est0, targets[1]), l2_loss(est1, targets[0]));
  if (swapped.item() < identity.item()) return {swapped, true};
  return {identity, false};
}

// ---------------------------------------------------------------------------
// Model

template <class T>
struct AttentionBlockParams {
  std::vector<Tensor<T>> dcnn_kernels;  // 6 layers, Table-style stack
  std::vector<Tensor<T>> dcnn_biases;
  Tensor<T> wq, wq_bias, wk, wk_bias, wv, wv_bias;  // 1x1 projections
  Tensor<T> wo, wo_bias;                            // 3x3 output conv
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

template <class T>
struct TransformParams {
  Tensor<T> dense_w, dense_b;      // F -> freq_bins along the last axis
  Tensor<T> conv_kernel, conv_bias;  // 3x3, d_k -> n_masks channels
};

// Shared 6-layer dilated trunk (relu after layers 1-5, none after 6).
template <class T>
Tensor<T> dcnn_trunk(const Tensor<T>& x, const AttentionBlockParams<T>& p) {
  Tensor<T> h = x;
  for (int j = 0; j < 6; ++j) {
    h = add_channel_bias(conv2d(h, p.dcnn_kernels[j], kDcnnTimeDilation[j], 1),
                         p.dcnn_biases[j]);
    if (j < 5) h = relu(h);
  }
  return h;
}

template <class T>
std::array<Tensor<T>, 3> project_qkv(const Tensor<T>& trunk,
                                     const AttentionBlockParams<T>& p) {
  return {add_channel_bias(conv2d(trunk, p.wq), p.wq_bias),
          add_channel_bias(conv2d(trunk, p.wk), p.wk_bias),
          add_channel_bias(conv2d(trunk, p.wv), p.wv_bias)};
}

// Q', K', V' via the shared trunk and three separate 1x1 projections.
template <class T>
std::array<Tensor<T>, 3> dcnn_extract(const Tensor<T>& x,
                                      const AttentionBlockParams<T>& p) {
  return project_qkv(dcnn_trunk(x, p), p);
}

// One pre-norm attention block. The first block receives a 1-channel map;
// its trunk lifts the stream to d_k channels and serves as the residual
// base, since the raw input cannot meet the d_k-channel residual shape.
// In no-attention mode the extracted features pass through unattended.
template <class T>
Tensor<T> attention_block(const Tensor<T>& x, const AttentionBlockParams<T>& p,
                          const ModelConfig& cfg, bool first_block) {
  auto a = layer_norm(x, p.ln1_gamma, p.ln1_beta);
  auto trunk = dcnn_trunk(a, p);
  Tensor<T> sublayer;
  if (cfg.mode == ModelMode::kNoAttention) {
    sublayer = trunk;
  } else {
    auto qkv = project_qkv(trunk, p);
    sublayer = multi_head_attention(qkv[0], qkv[1], qkv[2], p.wo, p.wo_bias,
                                    cfg.n_heads, cfg.d_k, cfg.attention_axis);
  }
  auto u = add(first_block ? trunk : x, sublayer);
  auto f = feed_forward(layer_norm(u, p.ln2_gamma, p.ln2_beta), p.ffn_w1,
                        p.ffn_b1, p.ffn_w2, p.ffn_b2);
  return add(u, f);
}

// Dense layer (F -> freq_bins) followed by the 3x3 channel-compressing conv
// and a sigmoid; emits one [T, freq_bins] mask per output channel.
template <class T>
std::vector<Tensor<T>> transform_block(const Tensor<T>& x,
                                       const TransformParams<T>& p) {
  ATSS_CHECK(x.ndim() == 3, "transform_block: need [C,T,F]");
  const int64_t c = x.dim(0), t = x.dim(1), f = x.dim(2);
  const int64_t fbar = p.dense_w.dim(1);
  auto dense = linear(reshape(x, {c * t, f}), p.dense_w, p.dense_b);
  auto maps = reshape(dense, {c, t, fbar});
  auto compressed =
      sigmoid(add_channel_bias(conv2d(maps, p.conv_kernel), p.conv_bias));
  std::vector<Tensor<T>> masks;
  const int64_t n_masks = compressed.dim(0);
  masks.reserve(n_masks);
  for (int64_t m = 0; m < n_masks; ++m)
    masks.push_back(reshape(slice(compressed, 0, m, 1), {t, fbar}));
  return masks;
}

template <class T>
class AtssModel {
 public:
  AtssModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const int64_t dk = cfg_.d_k;
    const int64_t f = cfg_.feature_dim();
    const int64_t hidden = cfg_.ffn_hidden();
    blocks_.resize(cfg_.n_blocks);
    for (int i = 0; i < cfg_.n_blocks; ++i) {
      auto& b = blocks_[i];
      const int64_t c_in = i == 0 ? 1 : dk;
      for (int j = 0; j < 6; ++j) {
        const int64_t kin = j == 0 ? c_in : dk;
        const int64_t ks = kDcnnKernel[j];
        b.dcnn_kernels.push_back(he_kernel(rng, dk, kin, ks, ks));
        b.dcnn_biases.push_back(Tensor<T>::zeros({dk}, true));
      }
      if (cfg_.mode != ModelMode::kNoAttention) {
        b.wq = he_kernel(rng, dk, dk, 1, 1);
        b.wk = he_kernel(rng, dk, dk, 1, 1);
        b.wv = he_kernel(rng, dk, dk, 1, 1);
        b.wq_bias = Tensor<T>::zeros({dk}, true);
        b.wk_bias = Tensor<T>::zeros({dk}, true);
        b.wv_bias = Tensor<T>::zeros({dk}, true);
        // zero output kernel: every block starts as identity on the
        // residual stream
        b.wo = Tensor<T>::zeros({dk, dk, 3, 3}, true);
        b.wo_bias = Tensor<T>::zeros({dk}, true);
      }
      b.ffn_w1 = Tensor<T>::randn({f, hidden}, rng, std::sqrt(2.0 / f), true);
      b.ffn_b1 = Tensor<T>::zeros({hidden}, true);
      b.ffn_w2 = Tensor<T>::zeros({hidden, f}, true);  // identity at init
      b.ffn_b2 = Tensor<T>::zeros({f}, true);
      b.ln1_gamma = Tensor<T>::filled({f}, T(1), true);
      b.ln1_beta = Tensor<T>::zeros({f}, true);
      b.ln2_gamma = Tensor<T>::filled({f}, T(1), true);
      b.ln2_beta = Tensor<T>::zeros({f}, true);
    }
    transform_.dense_w = Tensor<T>::randn(
        {f, int64_t(cfg_.freq_bins)}, rng, std::sqrt(1.0 / f), true);
    transform_.dense_b = Tensor<T>::zeros({cfg_.freq_bins}, true);
    transform_.conv_kernel =
        he_kernel(rng, cfg_.n_masks(), dk, 3, 3);
    transform_.conv_bias = Tensor<T>::zeros({cfg_.n_masks()}, true);
  }

  const ModelConfig& config() const { return cfg_; }

  // mag: [T, freq_bins]; emb: [embed_dim] (ignored in PIT mode).
  std::vector<Tensor<T>> forward(const Tensor<T>& mag,
                                 const Tensor<T>& emb = {}) const {
    ATSS_CHECK(mag.ndim() == 2 && mag.dim(1) == cfg_.freq_bins,
               "forward: magnitude must be [T, freq_bins]");
    Tensor<T> r;
    if (cfg_.uses_embedding()) {
      ATSS_CHECK(emb.defined() && emb.ndim() == 1 &&
                     emb.dim(0) == cfg_.embed_dim,
                 "forward: embedding must have length " +
                     std::to_string(cfg_.embed_dim));
      r = concat_inputs(mag, emb);
    } else {
      r = mag;
    }
    auto x = reshape(r, {int64_t{1}, r.dim(0), r.dim(1)});
    for (int i = 0; i < cfg_.n_blocks; ++i)
      x = attention_block(x, blocks_[i], cfg_, i == 0);
    return transform_block(x, transform_);
  }

  // Single-mask convenience for the embedding-conditioned modes.
  Tensor<T> forward_mask(const Tensor<T>& mag, const Tensor<T>& emb) const {
    return forward(mag, emb)[0];
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (int i = 0; i < cfg_.n_blocks; ++i) {
      auto& b = blocks_[i];
      const std::string base = "block" + std::to_string(i + 1) + ".";
      for (int j = 0; j < 6; ++j) {
        const std::string conv = base + "dcnn.conv" + std::to_string(j + 1);
        out.emplace_back(conv + ".kernel", b.dcnn_kernels[j]);
        out.emplace_back(conv + ".bias", b.dcnn_biases[j]);
      }
      if (cfg_.mode != ModelMode::kNoAttention) {
        out.emplace_back(base + "attn.wq", b.wq);
        out.emplace_back(base + "attn.wq_bias", b.wq_bias);
        out.emplace_back(base + "attn.wk", b.wk);
        out.emplace_back(base + "attn.wk_bias", b.wk_bias);
        out.emplace_back(base + "attn.wv", b.wv);
        out.emplace_back(base + "attn.wv_bias", b.wv_bias);
        out.emplace_back(base + "attn.wo", b.wo);
        out.emplace_back(base + "attn.wo_bias", b.wo_bias);
      }
      out.emplace_back(base + "ffn.w1", b.ffn_w1);
      out.emplace_back(base + "ffn.b1", b.ffn_b1);
      out.emplace_back(base + "ffn.w2", b.ffn_w2);
      out.emplace_back(base + "ffn.b2", b.ffn_b2);
      out.emplace_back(base + "ln1.gamma", b.ln1_gamma);
      out.emplace_back(base + "ln1.beta", b.ln1_beta);
      out.emplace_back(base + "ln2.gamma", b.ln2_gamma);
      out.emplace_back(base + "ln2.beta", b.ln2_beta);
    }
    out.emplace_back("transform.dense.w", transform_.dense_w);
    out.emplace_back("transform.dense.b", transform_.dense_b);
    out.emplace_back("transform.conv.kernel", transform_.conv_kernel);
    out.emplace_back("transform.conv.bias", transform_.conv_bias);
    return out;
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  int64_t parameter_count() {
    int64_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }

  AttentionBlockParams<T>& block(int i) { return blocks_[i]; }
  TransformParams<T>& transform() { return transform_; }

 private:
  static Tensor<T> he_kernel(Rng& rng, int64_t c_out, int64_t c_in, int64_t kh,
                             int64_t kw) {
    const double std = std::sqrt(2.0 / double(c_in * kh * kw));
    return Tensor<T>::randn({c_out, c_in, kh, kw}, rng, std, true);
  }

  ModelConfig cfg_;
  std::vector<AttentionBlockParams<T>> blocks_;
  TransformParams<T> transform_;
};

}  // namespace atss

#endif  // ATSS_MODEL_HPP_
