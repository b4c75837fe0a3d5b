#pragma once

// Pyramid window self-attention over merged instances, branch mixing,
// FFN with Add&Norm, and the detection head.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "rayfusion/geometry.hpp"
#include "rayfusion/nn.hpp"
#include "rayfusion/scene.hpp"
#include "rayfusion/tensor.hpp"

namespace rayfusion {

struct FusionConfig {
  std::size_t channels = 64;
  std::vector<double> radii{4.0, 8.0, 16.0};
  bool global_branch_weights = false;  // one weight vector for all rows instead of per row
  std::size_t ffn_multiplier = 4;
  double logit_prior = -2.0;  // initial class-logit bias
  bool attention_residual = true;  // Add&Norm around the attention with a 2C->C skip projection

  void validate() const {
    if (radii.empty()) throw std::invalid_argument("fusion needs at least one window radius");
    for (std::size_t i = 0; i < radii.size(); ++i) {
      if (!(radii[i] > 0.0)) throw std::invalid_argument("window radii must be positive");
      if (i > 0 && !(radii[i] > radii[i - 1])) throw std::invalid_argument("window radii must increase strictly");
    }
  }
};

/// Additive mask: 0 where both rows are valid and closer than `radius`
/// (always on the diagonal of valid rows), -inf elsewhere.
inline Tensor window_mask(const std::vector<Vec3>& positions, double radius, const std::vector<bool>& validity) {
  if (!(radius > 0.0)) throw std::invalid_argument("window radius must be positive");
  const std::size_t m = positions.size();
  if (validity.size() != m) throw DimensionError("window_mask: validity length differs from positions");
  std::vector<double> mask(m * m, kNegInf);
  for (std::size_t i = 0; i < m; ++i) {
    if (!validity[i]) continue;
    mask[i * m + i] = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      if (j != i && validity[j] && (positions[i] - positions[j]).norm() < radius) mask[i * m + j] = 0.0;
  }
  return Tensor::from({m, m}, std::move(mask));
}

struct ScoredBox {
  Box3D box;
  double score = 0.0;
  std::size_t row = 0;
};

/// Anchor encoding plus head deltas; sin/cos renormalized.
inline Anchor apply_deltas(const Anchor& anchor, std::span<const double> delta) {
  Anchor out = anchor;
  for (std::size_t i = 0; i < kAnchorDim; ++i) out.v[i] += delta[i];
  const double n = std::hypot(out.v[6], out.v[7]);
  if (n < 1e-9) throw GeometryError("predicted yaw vector is degenerate");
  out.v[6] /= n;
  out.v[7] /= n;
  return out;
}

class InstanceAggregator {
 public:
  InstanceAggregator() = default;

  InstanceAggregator(ParamStore& store, const FusionConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const std::size_t C = cfg.channels, B = cfg.radii.size();
    q_ = Mlp(store, "fusion.q", {{2 * C, C}});
    k_ = Mlp(store, "fusion.k", {{2 * C, C}});
    v_ = Mlp(store, "fusion.v", {{2 * C, C}});
    mix_ = Mlp(store, "fusion.mix", {{B * C, B}});
    ffn_ = Mlp(store, "fusion.ffn", {{C, cfg.ffn_multiplier * C, C}});
    if (cfg.attention_residual) {
      skip_ = Mlp(store, "fusion.skip", {{2 * C, C}});
      ln1_gain_ = store.add_constant("fusion.ln1.g", {C}, 1.0);
      ln1_bias_ = store.add_constant("fusion.ln1.b", {C}, 0.0);
    }
    ln_gain_ = store.add_constant("fusion.ln.g", {C}, 1.0);
    ln_bias_ = store.add_constant("fusion.ln.b", {C}, 0.0);
    head_ = Mlp(store, "fusion.head", {{C, C, kAnchorDim + 1}});
    // Start from zero deltas and a low prior score.
    Tensor w = head_.weights().back(), b = head_.biases().back();
    std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
    std::fill(b.mutable_data().begin(), b.mutable_data().end(), 0.0);
    b.mutable_data()[kAnchorDim] = cfg.logit_prior;
  }

  const FusionConfig& config() const { return cfg_; }

  struct Projections {
    Tensor q, k, v;
  };

  Projections project(const Tensor& input) const { return {q_.forward(input), k_.forward(input), v_.forward(input)}; }

  /// Softmax(Q K^T / sqrt(C) + mask) V. Rows whose mask is entirely -inf
  /// (invalid instances) produce zeros.
  Tensor attend(const Projections& p, const Tensor& mask) const {
    const std::size_t m = p.q.dim(0);
    if (mask.dim(0) != m || mask.dim(1) != m) throw DimensionError("attention mask does not match instance count");
    std::vector<double> fixed(mask.data().begin(), mask.data().end());
    std::vector<double> keep(m, 1.0);
    bool any_dead = false;
    for (std::size_t i = 0; i < m; ++i) {
      const bool dead = std::all_of(fixed.begin() + static_cast<std::ptrdiff_t>(i * m),
                                    fixed.begin() + static_cast<std::ptrdiff_t>((i + 1) * m),
                                    [](double x) { return x == kNegInf; });
      if (dead) {
        fixed[i * m + i] = 0.0;
        keep[i] = 0.0;
        any_dead = true;
      }
    }
    const double inv = 1.0 / std::sqrt(static_cast<double>(cfg_.channels));
    const Tensor logits = add(scale(matmul(p.q, transpose(p.k)), inv), Tensor::from({m, m}, std::move(fixed)));
    Tensor out = matmul(softmax(logits, -1), p.v);
    if (any_dead) out = mul_rows(out, Tensor::from({m}, std::move(keep)));
    return out;
  }

  Tensor pwa_branch(const Tensor& input, const Tensor& mask) const { return attend(project(input), mask); }

  /// Per-row (or global) softmax weights over the branches, then the weighted sum.
  Tensor branch_mix(const std::vector<Tensor>& branches, Tensor* weights_out = nullptr) const {
    const std::size_t B = branches.size();
    if (B != cfg_.radii.size()) throw DimensionError("branch_mix: expected " + std::to_string(cfg_.radii.size()) + " branches");
    const std::size_t m = branches.front().dim(0);
    const Tensor stacked = B == 1 ? branches.front() : concat(branches);
    Tensor logits = mix_.forward(cfg_.global_branch_weights ? mean(stacked, 0) : stacked);
    if (cfg_.global_branch_weights) logits = add(Tensor::zeros({m, B}), logits);
    const Tensor w = softmax(logits, -1);
    if (weights_out) *weights_out = w;
    if (B == 1) return mul_rows(branches.front(), reshape(w, {m}));
    Tensor out;
    for (std::size_t b = 0; b < B; ++b) {
      const Tensor term = mul_rows(branches[b], reshape(slice_last(w, b, b + 1), {m}));
      out = b == 0 ? term : add(out, term);
    }
    return out;
  }

  Tensor ffn_block(const Tensor& x) const { return layernorm(add(x, ffn_.forward(x)), ln_gain_, ln_bias_); }

  /// I [m x 2C] -> I-tilde [m x C].
  Tensor forward(const Tensor& input, const std::vector<Vec3>& positions, const std::vector<bool>& validity) const {
    const Projections p = project(input);
    std::vector<Tensor> branches;
    for (double r : cfg_.radii) branches.push_back(attend(p, window_mask(positions, r, validity)));
    Tensor mixed = branch_mix(branches);
    if (cfg_.attention_residual) mixed = layernorm(add(mixed, skip_.forward(input)), ln1_gain_, ln1_bias_);
    return ffn_block(mixed);
  }

  /// Raw head output [m x 12]: 11 anchor deltas then the class logit.
  Tensor head(const Tensor& fused) const { return head_.forward(fused); }

  const Mlp& head_mlp() const { return head_; }

 private:
  FusionConfig cfg_;
  Mlp q_, k_, v_, mix_, ffn_, head_, skip_;
  Tensor ln_gain_, ln_bias_, ln1_gain_, ln1_bias_;
};

inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Decodes head rows [m x 12] against their anchors.
inline std::vector<ScoredBox> detection_head_decode(const Tensor& head_out, const std::vector<Anchor>& anchors) {
  const std::size_t m = head_out.dim(0), w = head_out.last();
  if (anchors.size() != m || w != kAnchorDim + 1) throw DimensionError("detection head rows do not match anchors");
  std::vector<ScoredBox> out;
  out.reserve(m);
  const auto d = head_out.data();
  for (std::size_t i = 0; i < m; ++i) {
    const Anchor a = apply_deltas(anchors[i], d.subspan(i * w, kAnchorDim));
    out.push_back({a.to_box(), sigmoid_scalar(d[i * w + kAnchorDim]), i});
  }
  return out;
}

/// Greedy suppression in descending score order (ties: lower row first).
inline std::vector<ScoredBox> deduplicate(const std::vector<ScoredBox>& dets, double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0)) throw std::invalid_argument("iou threshold must lie in (0,1)");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<ScoredBox> kept;
  for (std::size_t i : order) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (rotated_bev_iou(k.box, dets[i].box) > iou_thresh) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(dets[i]);
  }
  return kept;
}

}  // namespace rayfusion
