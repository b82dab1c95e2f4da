// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Speaker verification subsystem: a ResNet front end over Fbank features,
// dual statistics pooling (mean and population std per channel) and two
// linear layers. Trained as a closed-set classifier; the first linear
// layer's output is the speaker embedding at inference.

#ifndef ATSS_EMBEDDER_HPP_
#define ATSS_EMBEDDER_HPP_

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "atss/tensor.hpp"

namespace atss {

struct EmbedderConfig {
  std::array<int, 4> channels = {16, 32, 64, 128};
  int embed_dim = 256;
  int n_speakers = 2;
  int n_mels = 64;

  void validate() const {
    ATSS_CHECK(embed_dim >= 1, "EmbedderConfig: embed_dim must be >= 1");
    ATSS_CHECK(n_speakers >= 2, "EmbedderConfig: need at least 2 speakers");
  }
};

// a.b / (|a||b|); throws on zero vectors.
template <class T>
double cosine_similarity(const std::vector<T>& a, const std::vector<T>& b) {
  ATSS_CHECK(a.size() == b.size() && !a.empty(),
             "cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * b[i];
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
  }
  ATSS_CHECK(na > 0.0 && nb > 0.0, "cosine_similarity: zero vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

template <class T>
class Embedder {
 public:
  // conv + per-channel learned affine scaling (batch-statistics-free
  // normalization stand-in)
  struct ConvUnit {
    Tensor<T> kernel, gamma, beta;
  };
  struct BasicBlock {
    ConvUnit conv1, conv2;
    ConvUnit shortcut;  // kernel undefined => identity shortcut
    int stride = 1;
  };

  Embedder(const EmbedderConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    stem_ = make_unit(rng, cfg_.channels[0], 1, 3);
    int in_ch = cfg_.channels[0];
    for (int s = 0; s < 4; ++s) {
      const int width = cfg_.channels[s];
      for (int b = 0; b < 2; ++b) {
        BasicBlock blk;
        blk.stride = (s > 0 && b == 0) ? 2 : 1;
        blk.conv1 = make_unit(rng, width, in_ch, 3);
        blk.conv2 = make_unit(rng, width, width, 3);
        if (blk.stride != 1 || in_ch != width)
          blk.shortcut = make_unit(rng, width, in_ch, 1);
        blocks_.push_back(std::move(blk));
        in_ch = width;
      }
    }
    const int pooled = 2 * cfg_.channels[3];
    fc1_w_ = Tensor<T>::randn({pooled, cfg_.embed_dim}, rng,
                              std::sqrt(1.0 / pooled), true);
    fc1_b_ = Tensor<T>::zeros({cfg_.embed_dim}, true);
    fc2_w_ = Tensor<T>::randn({cfg_.embed_dim, cfg_.n_speakers}, rng,
                              std::sqrt(1.0 / cfg_.embed_dim), true);
    fc2_b_ = Tensor<T>::zeros({cfg_.n_speakers}, true);
  }

  const EmbedderConfig& config() const { return cfg_; }

  // [1,T,n_mels] -> [channels[3], ceil(T/8), ceil(n_mels/8)]. Four stages of
  // two residual blocks; stages 2-4 downsample by 2 in their first conv.
  Tensor<T> resnet_forward(const Tensor<T>& x) const {
    ATSS_CHECK(x.ndim() == 3 && x.dim(0) == 1,
               "resnet_forward: need a [1,T,F] feature map");
    ATSS_CHECK(x.dim(1) >= 16, "resnet_forward: need at least 16 frames, got " +
                                   std::to_string(x.dim(1)));
    Tensor<T> h = relu(apply_unit(stem_, x, 1));
    for (const auto& blk : blocks_) {
      auto y = relu(apply_unit(blk.conv1, h, blk.stride));
      y = apply_unit(blk.conv2, y, 1);
      auto sc = blk.shortcut.kernel.defined()
                    ? apply_unit(blk.shortcut, h, blk.stride)
                    : h;
      h = relu(add(y, sc));
    }
    return h;
  }

  // fbank [T, n_mels] -> embedding [embed_dim] (first linear layer output).
  Tensor<T> embed(const Tensor<T>& fbank) const {
    auto pooled = stat_pool(resnet_forward(to_map(fbank)));
    return linear(pooled, fc1_w_, fc1_b_);
  }

  // Logits over the training speakers; softmax lives inside the loss.
  Tensor<T> classify(const Tensor<T>& fbank) const {
    return linear(embed(fbank), fc2_w_, fc2_b_);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto push_unit = [&out](const std::string& base, ConvUnit& u) {
      out.emplace_back(base + ".kernel", u.kernel);
      out.emplace_back(base + ".gamma", u.gamma);
      out.emplace_back(base + ".beta", u.beta);
    };
    push_unit("embedder.stem", stem_);
    for (size_t i = 0; i < blocks_.size(); ++i) {
      const std::string base = "embedder.stage" + std::to_string(i / 2 + 1) +
                               ".block" + std::to_string(i % 2 + 1);
      push_unit(base + ".conv1", blocks_[i].conv1);
      push_unit(base + ".conv2", blocks_[i].conv2);
      if (blocks_[i].shortcut.kernel.defined())
        push_unit(base + ".shortcut", blocks_[i].shortcut);
    }
    out.emplace_back("embedder.fc1.w", fc1_w_);
    out.emplace_back("embedder.fc1.b", fc1_b_);
    out.emplace_back("embedder.fc2.w", fc2_w_);
    out.emplace_back("embedder.fc2.b", fc2_b_);
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

  Tensor<T>& fc2_w() { return fc2_w_; }

 private:
  static Tensor<T> to_map(const Tensor<T>& fbank) {
    ATSS_CHECK(fbank.ndim() == 2, "embed: fbank must be [T, n_mels]");
    return reshape(fbank, {int64_t{1}, fbank.dim(0), fbank.dim(1)});
  }

  static ConvUnit make_unit(Rng& rng, int c_out, int c_in, int k) {
    ConvUnit u;
    const double std = std::sqrt(2.0 / double(c_in * k * k));
    u.kernel = Tensor<T>::randn({c_out, c_in, k, k}, rng, std, true);
    u.gamma = Tensor<T>::filled({c_out}, T(1), true);
    u.beta = Tensor<T>::zeros({c_out}, true);
    return u;
  }

  static Tensor<T> apply_unit(const ConvUnit& u, const Tensor<T>& x,
                              int stride) {
    return channel_affine(conv2d(x, u.kernel, 1, 1, stride, stride), u.gamma,
                          u.beta);
  }

  EmbedderConfig cfg_;
  ConvUnit stem_;
  std::vector<BasicBlock> blocks_;
  Tensor<T> fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

}  // namespace atss

#endif  // ATSS_EMBEDDER_HPP_
