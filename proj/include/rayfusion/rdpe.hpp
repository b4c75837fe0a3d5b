#pragma once

// Ray-driven positional encoding: anchor encoder, high-frequency ray
// encoding, along-ray occupancy encoding, visibility-masked multi-camera
// fusion and the sinusoidal delay embedding.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "rayfusion/align.hpp"
#include "rayfusion/nn.hpp"
#include "rayfusion/tensor.hpp"

namespace rayfusion {

/// (a, sin(2^0 pi a), cos(2^0 pi a), ..., sin(2^{L-1} pi a), cos(2^{L-1} pi a))
inline std::vector<double> freq_encode(double a, int octaves) {
  if (octaves < 0) throw std::invalid_argument("octave count must be >= 0");
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(2 * octaves + 1));
  out.push_back(a);
  double f = std::numbers::pi;
  for (int i = 0; i < octaves; ++i, f *= 2.0) {
    out.push_back(std::sin(f * a));
    out.push_back(std::cos(f * a));
  }
  return out;
}

/// Bin centers stretched onto the ray: d_i / cos(alpha), with cos(alpha)
/// floored at `cos_floor`. `clamped` (if given) counts floored calls.
inline std::vector<double> project_depth_bins(const std::vector<double>& centers, double axis_angle, double cos_floor = 0.1,
                                              std::size_t* clamped = nullptr) {
  double c = std::cos(axis_angle);
  if (c < cos_floor) {
    c = cos_floor;
    if (clamped) ++*clamped;
  }
  std::vector<double> out(centers.size());
  for (std::size_t i = 0; i < centers.size(); ++i) out[i] = centers[i] / c;
  return out;
}

struct RdpeConfig {
  std::size_t channels = 64;  // C
  std::size_t cameras = 2;    // kappa
  DepthBins bins{32, 0.5, 60.5};
  int octaves_origin = 10;
  int octaves_direction = 4;
  double origin_scale = 0.01;       // applied to o before frequency encoding
  double delay_scale = 0.01;        // applied to the delay in milliseconds
  double anchor_position_scale = 0.02;
  double anchor_velocity_scale = 0.1;
  double depth_scale = 0.01;        // applied to projected bins before the chi MLP
  double cos_floor = 0.1;
  bool use_roe = true;
  bool use_ray_encoding = true;
  bool use_occupancy = true;
  bool high_frequency = true;

  std::size_t ray_input_width() const {
    if (!high_frequency) return 6;
    return static_cast<std::size_t>(3 * (2 * octaves_origin + 1) + 3 * (2 * octaves_direction + 1));
  }
};

/// Sinusoidal embedding of t - tau (seconds in, milliseconds scaled inside).
inline std::vector<double> delay_embedding(double delay_s, std::size_t channels, double delay_scale = 0.01) {
  std::vector<double> p(channels);
  const double x = delay_s * 1000.0 * delay_scale;
  for (std::size_t i = 0; i < channels; ++i) {
    const double k = static_cast<double>(i / 2 * 2) / static_cast<double>(channels);
    const double angle = x / std::pow(10000.0, k);
    p[i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
  }
  return p;
}

struct CameraFusion {
  Tensor fused;    // R-hat, [n x C]
  Tensor weights;  // [n x kappa]
  std::vector<bool> null_rows;  // rows that fell back to the null token
};

struct PositionalEncoding {
  Tensor pe;       // [n x C]
  Tensor anchor;   // Phi(A)
  Tensor roe;      // R-hat (zeros when ablated)
  Tensor delay;    // p_{t - tau}
  Tensor camera_weights;
  std::size_t cos_clamped = 0;
};

class RayDrivenEncoder {
 public:
  RayDrivenEncoder() = default;

  RayDrivenEncoder(ParamStore& store, const RdpeConfig& cfg) : cfg_(cfg) {
    const std::size_t C = cfg.channels, D = static_cast<std::size_t>(cfg.bins.count);
    anchor_encoder_ = Mlp(store, "rdpe.phi", {{kAnchorDim, C, C}});
    ray_mlp_ = Mlp(store, "rdpe.ray", {{cfg.ray_input_width(), C, C}});
    chi_mlp_ = Mlp(store, "rdpe.chi", {{D, D, D}});
    occ_mlp_ = Mlp(store, "rdpe.occ", {{2 * D, C, C}});
    query_ = Mlp(store, "rdpe.q", {{2 * C, C}});
    key_ = Mlp(store, "rdpe.k", {{2 * C, C}});
    out_mlp_ = Mlp(store, "rdpe.out", {{2 * C, C}});
    null_token_ = store.add_constant("rdpe.null", {C}, 0.0);
  }

  const RdpeConfig& config() const { return cfg_; }

  /// Phi over anchors [n x 11] (raw units; scaled inside).
  Tensor encode_anchor(const Tensor& anchors) const {
    std::vector<double> s(kAnchorDim, 1.0);
    for (int i = 0; i < 3; ++i) {
      s[static_cast<std::size_t>(i)] = cfg_.anchor_position_scale;
      s[static_cast<std::size_t>(8 + i)] = cfg_.anchor_velocity_scale;
    }
    return anchor_encoder_.forward(mul(anchors, Tensor::from({kAnchorDim}, s)));
  }

  /// Ray MLP input, [n x 90] (or [n x 6] without the frequency mapping).
  Tensor ray_features(const std::vector<const Ray*>& rays) const {
    const std::size_t w = cfg_.ray_input_width();
    std::vector<double> in;
    in.reserve(rays.size() * w);
    for (const Ray* r : rays) {
      if (!cfg_.high_frequency) {
        for (int i = 0; i < 3; ++i) in.push_back(r->origin[i] * cfg_.origin_scale);
        for (int i = 0; i < 3; ++i) in.push_back(r->direction[i]);
        continue;
      }
      for (int i = 0; i < 3; ++i) {
        const auto f = freq_encode(r->origin[i] * cfg_.origin_scale, cfg_.octaves_origin);
        in.insert(in.end(), f.begin(), f.end());
      }
      for (int i = 0; i < 3; ++i) {
        const auto f = freq_encode(r->direction[i], cfg_.octaves_direction);
        in.insert(in.end(), f.begin(), f.end());
      }
    }
    return Tensor::from({rays.size(), w}, std::move(in));
  }

  /// gamma = MLP(f_L(o) : f_L(u)), [n x C].
  Tensor encode_ray(const std::vector<const Ray*>& rays) const { return ray_mlp_.forward(ray_features(rays)); }

  /// gamma-hat = MLP(chi : rho) : gamma, [n x 2C]. `rho` is [n x D].
  Tensor encode_occupancy(const std::vector<const Ray*>& rays, const Tensor& rho, std::size_t* clamped = nullptr) const {
    const std::size_t n = rays.size(), C = cfg_.channels, D = static_cast<std::size_t>(cfg_.bins.count);
    const auto centers = cfg_.bins.centers();
    std::vector<double> stretched;
    stretched.reserve(n * D);
    for (const Ray* r : rays) {
      const auto p = project_depth_bins(centers, r->axis_angle, cfg_.cos_floor, clamped);
      for (double v : p) stretched.push_back(v * cfg_.depth_scale);
    }
    Tensor occ = Tensor::zeros({n, C});
    if (cfg_.use_occupancy) {
      const Tensor chi = chi_mlp_.forward(Tensor::from({n, D}, std::move(stretched)));
      occ = occ_mlp_.forward(concat({chi, rho}));
    }
    const Tensor gamma = cfg_.use_ray_encoding ? encode_ray(rays) : Tensor::zeros({n, C});
    return concat({occ, gamma});
  }

  /// Visibility-masked attention over the kappa per-camera encodings.
  /// `upsilon` is [n x kappa x 2C]; the key mean runs over visible cameras.
  CameraFusion fuse_cameras(const Tensor& upsilon, const std::vector<std::vector<bool>>& visible) const {
    const std::size_t n = upsilon.dim(0), kappa = upsilon.dim(1), C = cfg_.channels;
    if (visible.size() != n) throw DimensionError("fuse_cameras: visibility rows differ from instances");
    const Tensor q = query_.forward(upsilon);
    const Tensor k = key_.forward(upsilon);
    const Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(C)));

    std::vector<double> key_weights(n * kappa), mask(n * kappa), has_visible(n);
    CameraFusion out;
    out.null_rows.assign(n, false);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t count = 0;
      for (std::size_t c = 0; c < kappa; ++c) count += visible[i][c] ? 1 : 0;
      out.null_rows[i] = count == 0;
      has_visible[i] = count > 0 ? 1.0 : 0.0;
      for (std::size_t c = 0; c < kappa; ++c) {
        const bool v = count == 0 || visible[i][c];
        key_weights[i * kappa + c] = v ? 1.0 / static_cast<double>(count == 0 ? kappa : count) : 0.0;
        mask[i * kappa + c] = v ? 0.0 : kNegInf;
      }
    }
    const Tensor logits = reshape(matmul(scores, Tensor::from({n, kappa, 1}, std::move(key_weights))), {n, kappa});
    out.weights = softmax(add(logits, Tensor::from({n, kappa}, std::move(mask))), -1);
    const Tensor pooled = reshape(matmul(reshape(out.weights, {n, 1, kappa}), upsilon), {n, 2 * C});
    Tensor fused = out_mlp_.forward(pooled);
    bool any_null = false;
    for (bool b : out.null_rows) any_null = any_null || b;
    if (any_null) {
      std::vector<double> inv(n);
      for (std::size_t i = 0; i < n; ++i) inv[i] = 1.0 - has_visible[i];
      fused = add(mul_rows(fused, Tensor::from({n}, has_visible)),
                  mul_rows(add(Tensor::zeros({n, C}), null_token_), Tensor::from({n}, std::move(inv))));
    }
    out.fused = fused;
    return out;
  }

  Tensor delay_embeddings(const std::vector<double>& delays) const {
    std::vector<double> v;
    v.reserve(delays.size() * cfg_.channels);
    for (double d : delays) {
      const auto p = delay_embedding(d, cfg_.channels, cfg_.delay_scale);
      v.insert(v.end(), p.begin(), p.end());
    }
    return Tensor::from({delays.size(), cfg_.channels}, std::move(v));
  }

  /// PE = Phi(A) + R-hat + p for each instance. `anchors` may be supplied
  /// as a tensor (e.g. requiring grad); otherwise it is built from the
  /// instances.
  PositionalEncoding positional_encoding(const std::vector<const AlignedInstance*>& instances,
                                         const Tensor& anchors = {}) const {
    const std::size_t n = instances.size(), C = cfg_.channels, kappa = cfg_.cameras;
    const std::size_t D = static_cast<std::size_t>(cfg_.bins.count);
    if (n == 0) throw DimensionError("positional_encoding of zero instances");
    PositionalEncoding out;
    Tensor a = anchors;
    if (!a.defined()) {
      std::vector<double> av;
      av.reserve(n * kAnchorDim);
      for (const auto* inst : instances) av.insert(av.end(), inst->anchor.v.begin(), inst->anchor.v.end());
      a = Tensor::from({n, kAnchorDim}, std::move(av));
    }
    out.anchor = encode_anchor(a);
    std::vector<double> delays;
    for (const auto* inst : instances) delays.push_back(inst->delay);
    out.delay = delay_embeddings(delays);

    if (cfg_.use_roe) {
      std::vector<const Ray*> rays;
      std::vector<double> rho;
      std::vector<std::vector<bool>> vis(n, std::vector<bool>(kappa, false));
      rays.reserve(n * kappa);
      rho.reserve(n * kappa * D);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& obs = instances[i]->rays;
        if (obs.size() != kappa) throw DimensionError("instance carries " + std::to_string(obs.size()) + " camera slots");
        for (std::size_t c = 0; c < kappa; ++c) {
          rays.push_back(&obs[c].ray);
          vis[i][c] = obs[c].visible;
          if (obs[c].rho.size() != D) throw DimensionError("occupancy vector has wrong bin count");
          rho.insert(rho.end(), obs[c].rho.begin(), obs[c].rho.end());
        }
      }
      const Tensor gh = encode_occupancy(rays, Tensor::from({n * kappa, D}, std::move(rho)), &out.cos_clamped);
      const CameraFusion fused = fuse_cameras(reshape(gh, {n, kappa, 2 * C}), vis);
      out.roe = fused.fused;
      out.camera_weights = fused.weights;
      out.pe = add(add(out.anchor, out.roe), out.delay);
    } else {
      out.roe = Tensor::zeros({n, C});
      out.pe = add(out.anchor, out.delay);
    }
    return out;
  }

 private:
  RdpeConfig cfg_;
  Mlp anchor_encoder_, ray_mlp_, chi_mlp_, occ_mlp_, query_, key_, out_mlp_;
  Tensor null_token_;
};

}  // namespace rayfusion
