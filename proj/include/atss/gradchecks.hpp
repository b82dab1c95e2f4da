// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Gradient verification suites on toy dimensions, shared by the gradcheck
// command and the tests. Scalar losses are formed as weighted sums with a
// fixed random probe so ops with degenerate plain-sum gradients (softmax,
// layer norm) still get informative checks.

#ifndef ATSS_GRADCHECKS_HPP_
#define ATSS_GRADCHECKS_HPP_

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "atss/model.hpp"
#include "atss/tensor.hpp"

namespace atss {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double threshold = 0.0;

  bool pass() const { return max_rel_err < threshold; }
};

// Finite-difference step and pass thresholds per storage type: float runs
// at h=1e-3, double at h=1e-5 with proportionally tighter bounds.
template <class T>
struct GradCheckRegime;

template <>
struct GradCheckRegime<float> {
  static constexpr double h = 1e-3;
  // composite graphs accumulate forward rounding; a wider step keeps the
  // difference quotient above the noise floor
  static constexpr double composite_h = 5e-3;
  static constexpr double layer_threshold = 1e-3;
  static constexpr double block_threshold = 1e-2;
  static constexpr double end2end_threshold = 1e-2;
};

template <>
struct GradCheckRegime<double> {
  static constexpr double h = 1e-5;
  static constexpr double composite_h = 1e-5;
  static constexpr double layer_threshold = 1e-6;
  static constexpr double block_threshold = 1e-4;
  static constexpr double end2end_threshold = 1e-4;
};

namespace detail {

// sum(y * probe) with a grad-free random probe of y's shape
template <class T>
Tensor<T> probed_sum(const Tensor<T>& y, uint64_t seed) {
  Rng rng(seed);
  auto probe = Tensor<T>::randn(y.shape(), rng, 1.0);
  return sum(mul(y, probe));
}

// relu gradients are checked away from the kink at 0
template <class T>
Tensor<T> randn_away_from_zero(const Shape& shape, Rng& rng, double margin) {
  auto t = Tensor<T>::randn(shape, rng, 1.0);
  for (auto& v : t.mutable_data())
    if (std::abs(double(v)) < margin) v = static_cast<T>(v < 0 ? -margin : margin);
  return t;
}

// Activation sign pattern of every relu evaluated while `fn` runs.
inline uint64_t relu_signature_of(const std::function<void()>& fn) {
  ReluProbe probe;
  ReluProbe* prev = g_relu_probe;
  g_relu_probe = &probe;
  fn();
  g_relu_probe = prev;
  return probe.signature;
}

}  // namespace detail

// grad_check variant for composite graphs with relu inside: coordinates
// whose perturbation flips any relu state are excluded, generalizing the
// per-op rule of checking relu away from its kink. `excluded` (when given)
// receives the number of skipped coordinates.
template <class T>
double grad_check_excluding_kinks(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& op,
    std::vector<Tensor<T>> inputs, double h, int64_t* excluded = nullptr) {
  for (auto& t : inputs) t.set_requires_grad(true);
  Tensor<T> out = op(inputs);
  ATSS_CHECK(out.numel() == 1, "grad_check: op must be scalar-valued");
  GradTape<T> tape(out);
  tape.backward();

  const uint64_t base_sig = detail::relu_signature_of([&] {
    NoGradGuard ng;
    op(inputs);
  });

  double max_rel = 0.0;
  int64_t skipped = 0;
  for (auto& input : inputs) {
    const std::vector<T> analytic = tape.grad_of(input);
    auto& data = input.mutable_data();
    for (size_t i = 0; i < data.size(); ++i) {
      const T orig = data[i];
      double fp = 0.0, fm = 0.0;
      uint64_t sig_p = 0, sig_m = 0;
      {
        NoGradGuard ng;
        data[i] = static_cast<T>(orig + h);
        sig_p = detail::relu_signature_of([&] { fp = op(inputs).item(); });
        data[i] = static_cast<T>(orig - h);
        sig_m = detail::relu_signature_of([&] { fm = op(inputs).item(); });
        data[i] = orig;
      }
      if (sig_p != base_sig || sig_m != base_sig) {
        ++skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) /
                         std::max({1.0, std::abs(a), std::abs(numeric)});
      max_rel = std::max(max_rel, rel);
    }
  }
  if (excluded) *excluded = skipped;
  return max_rel;
}

template <class T>
std::vector<GradCheckResult> gradcheck_layers(uint64_t seed) {
  using R = GradCheckRegime<T>;
  Rng rng(seed);
  std::vector<GradCheckResult> out;
  auto run = [&](const std::string& name,
                 const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>&
                     op,
                 std::vector<Tensor<T>> inputs) {
    out.push_back({name, grad_check<T>(op, std::move(inputs), R::h),
                   R::layer_threshold});
  };

  {
    auto x = Tensor<T>::randn({3, 5}, rng, 1.0);
    auto w = Tensor<T>::randn({5, 4}, rng, 0.5);
    auto b = Tensor<T>::randn({4}, rng, 0.5);
    const uint64_t probe = rng.fork_seed();
    run("linear",
        [probe](const std::vector<Tensor<T>>& in) {
          return detail::probed_sum(linear(in[0], in[1], in[2]), probe);
        },
        {x, w, b});
  }
  {
    auto x = Tensor<T>::randn({2, 6, 7}, rng, 1.0);
    auto k = Tensor<T>::randn({3, 2, 5, 3}, rng, 0.3);
    const uint64_t probe = rng.fork_seed();
    run("conv2d_dilated",
        [probe](const std::vector<Tensor<T>>& in) {
          return detail::probed_sum(conv2d(in[0], in[1], 2, 1), probe);
        },
        {x, k});
  }
  {
    auto x = Tensor<T>::randn({2, 8, 7}, rng, 1.0);
    auto k = Tensor<T>::randn({3, 2, 3, 3}, rng, 0.3);
    const uint64_t probe = rng.fork_seed();
    run("conv2d_strided",
        [probe](const std::vector<Tensor<T>>& in) {
          return detail::probed_sum(conv2d(in[0], in[1], 1, 1, 2, 2), probe);
        },
        {x, k});
  }
  {
    // kink exclusion: inputs must clear the difference window
    auto x = detail::randn_away_from_zero<T>({4, 6}, rng, 10.0 * R::h);
    const uint64_t probe = rng.fork_seed();
    run("relu",
        [probe](const std::vector<Tensor<T>>& in) {
          return detail::probed_sum(relu(in[0]), probe);
        },
        {x});
  }
  {
    auto x = Tensor<T>::randn({4, 6}, rng, 1.0);
    const uint64_t probe = rng.fork_seed();
    run("sigmoid",
        [probe](const std::vector<Tensor<T>>& in) {
          return detail::probed_sum(sigmoid(in[0]), probe);
        },
        {x});
  }
  {
    auto x = Tensor<T>::randn({3, 4, 5}, rng, 1.0);
    const uint64_t probe = rng.fork_seed();
    run("softmax",
        [probe](const std::vector<Tensor<T>>& in) {
          return detail::probed_sum(softmax(in[0], 1), probe);
        },
        {x});
  }
  {
    auto x = Tensor<T>::randn({4, 7}, rng, 1.0);
    auto g = Tensor<T>::randn({7}, rng, 0.5);
    auto b = Tensor<T>::randn({7}, rng, 0.5);
    const uint64_t probe = rng.fork_seed();
    run("layer_norm",
        [probe](const std::vector<Tensor<T>>& in) {
          return detail::probed_sum(layer_norm(in[0], in[1], in[2]), probe);
        },
        {x, g, b});
  }
  {
    auto x = Tensor<T>::randn({3, 4, 5}, rng, 1.0);
    const uint64_t probe = rng.fork_seed();
    run("stat_pool",
        [probe](const std::vector<Tensor<T>>& in) {
          return detail::probed_sum(stat_pool(in[0]), probe);
        },
        {x});
  }
  return out;
}

namespace detail {

inline ModelConfig toy_model_config() {
  ModelConfig cfg;
  cfg.n_blocks = 1;
  cfg.n_heads = 2;
  cfg.d_k = 4;
  cfg.freq_bins = 9;
  cfg.embed_dim = 4;
  return cfg;
}

// The default init zeroes wo/ffn_w2 for residual-identity; checks randomize
// every parameter so no path is degenerate.
template <class T>
void randomize_params(std::vector<Tensor<T>>& params, Rng& rng) {
  for (auto& p : params)
    for (auto& v : p.mutable_data())
      v = static_cast<T>(rng.normal() * 0.3);
}

}  // namespace detail

// Full attention block on toy dimensions, all parameters randomized.
template <class T>
std::vector<GradCheckResult> gradcheck_block(uint64_t seed) {
  using R = GradCheckRegime<T>;
  const ModelConfig cfg = detail::toy_model_config();
  AtssModel<T> model(cfg, seed);
  const int64_t t = 6, f = cfg.feature_dim();

  Rng rng(seed ^ 0xb10cull);
  auto params = model.parameters();
  detail::randomize_params(params, rng);
  auto x = Tensor<T>::randn({1, t, f}, rng, 1.0);
  const uint64_t probe = rng.fork_seed();

  auto op = [&model, &cfg, &x, probe](const std::vector<Tensor<T>>&) {
    return detail::probed_sum(attention_block(x, model.block(0), cfg, true),
                              probe);
  };
  int64_t excluded = 0;
  const double err =
      grad_check_excluding_kinks<T>(op, params, R::composite_h, &excluded);
  ATSS_CHECK(excluded < model.parameter_count() / 2,
             "gradcheck_block: kink exclusion swallowed most coordinates");
  return {{"attention_block", err, R::block_threshold}};
}

// l2 loss of the masked magnitude against a fixed target, differentiated
// with respect to every model parameter. Toy dims: T=6, 9 bins, 4-dim
// embedding, d_k=4, 2 heads, 1 block.
template <class T>
std::vector<GradCheckResult> gradcheck_end2end(uint64_t seed) {
  using R = GradCheckRegime<T>;
  const ModelConfig cfg = detail::toy_model_config();
  AtssModel<T> model(cfg, seed);
  const int64_t t = 6;

  Rng rng(seed ^ 0xe2eull);
  auto params = model.parameters();
  detail::randomize_params(params, rng);
  auto mag_src = Tensor<T>::randn({t, cfg.freq_bins}, rng, 1.0);
  for (auto& v : mag_src.mutable_data()) v = std::abs(v);
  auto emb = Tensor<T>::randn({cfg.embed_dim}, rng, 1.0);
  auto target = Tensor<T>::randn({t, cfg.freq_bins}, rng, 1.0);
  for (auto& v : target.mutable_data()) v = std::abs(v);

  auto op = [&](const std::vector<Tensor<T>>&) {
    auto mask = model.forward_mask(mag_src, emb);
    return l2_loss(apply_mask(mag_src, mask), target);
  };
  int64_t excluded = 0;
  const double err =
      grad_check_excluding_kinks<T>(op, params, R::composite_h, &excluded);
  ATSS_CHECK(excluded < model.parameter_count() / 2,
             "gradcheck_end2end: kink exclusion swallowed most coordinates");
  return {{"end2end_loss", err, R::end2end_threshold}};
}

// An op with a deliberately wrong (x1.1) gradient; the checker must flag it
// with an error above 0.05.
template <class T>
GradCheckResult gradcheck_injected_fault(uint64_t seed) {
  Rng rng(seed);
  auto x = Tensor<T>::randn({4, 4}, rng, 1.0);
  auto broken_scale = [](const Tensor<T>& a) {
    std::vector<T> v = a.data();
    return detail::make_op<T>(
        a.shape(), std::move(v), {a},
        [](typename atss::detail::Node<T>* self, const T* adj,
           const std::vector<T*>& pa) {
          if (!pa[0]) return;
          for (int64_t i = 0; i < self->numel(); ++i)
            pa[0][i] += adj[i] * T(1.1);  // 10% too large
        });
  };
  const uint64_t probe = rng.fork_seed();
  const double err = grad_check<T>(
      [&broken_scale, probe](const std::vector<Tensor<T>>& in) {
        return detail::probed_sum(broken_scale(in[0]), probe);
      },
      {x}, GradCheckRegime<T>::h);
  // the checker must report at least 0.05 here, so this check never passes;
  // tests assert !pass() and err > 0.05
  return {"injected_fault", err, 0.05};
}

}  // namespace atss

#endif  // ATSS_GRADCHECKS_HPP_
