#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "rayfusion/fusion.hpp"
#include "test_support.hpp"

using namespace rayfusion;
using rftest::random_tensor;

namespace {

constexpr std::size_t C = 8;

FusionConfig small_config(std::vector<double> radii = {4, 8, 16}) {
  FusionConfig cfg;
  cfg.channels = C;
  cfg.radii = std::move(radii);
  return cfg;
}

std::vector<Vec3> random_positions(std::size_t m, Rng& rng, double extent = 10) {
  std::vector<Vec3> p;
  for (std::size_t i = 0; i < m; ++i) p.emplace_back(rng.uniform(-extent, extent), rng.uniform(-extent, extent), 0.8);
  return p;
}

void fill(ParamStore& store, const std::string& prefix, double v) {
  for (auto& p : store.params())
    if (p.name.rfind(prefix, 0) == 0) std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), v);
}

// Dense single-head attention with scalar loops.
std::vector<double> dense_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const std::size_t m = q.dim(0), c = q.dim(1);
  std::vector<double> out(m * c, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> s(m);
    double mx = -INFINITY, z = 0;
    for (std::size_t j = 0; j < m; ++j) {
      s[j] = 0;
      for (std::size_t t = 0; t < c; ++t) s[j] += q[i * c + t] * k[j * c + t];
      s[j] /= std::sqrt(static_cast<double>(c));
      mx = std::max(mx, s[j]);
    }
    for (auto& x : s) z += (x = std::exp(x - mx));
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t t = 0; t < c; ++t) out[i * c + t] += s[j] / z * v[j * c + t];
  }
  return out;
}

Box3D box(double x, double y, double yaw) {
  Box3D b;
  b.center = Vec3(x, y, 0.8);
  b.size = Vec3(1.9, 1.5, 4.5);
  b.yaw = yaw;
  return b;
}

// Greedy suppression written against plain arrays.
std::vector<std::size_t> suppression_oracle(const std::vector<ScoredBox>& d, double thr) {
  const std::size_t n = d.size();
  std::vector<bool> removed(n, false), done(n, false);
  std::vector<std::size_t> kept;
  for (std::size_t step = 0; step < n; ++step) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i)
      if (!done[i] && (best == n || d[i].score > d[best].score)) best = i;
    done[best] = true;
    if (removed[best]) continue;
    kept.push_back(best);
    for (std::size_t j = 0; j < n; ++j)
      if (!done[j] && rotated_bev_iou(d[best].box, d[j].box) > thr) removed[j] = true;
  }
  return kept;
}

}  // namespace

TEST(WindowMask, RadiusExamples) {
  const std::vector<Vec3> p{Vec3(0, 0, 0), Vec3(3, 4, 0)};
  const Tensor m4 = window_mask(p, 4, {true, true});
  EXPECT_EQ(m4[0], 0.0);
  EXPECT_EQ(m4[1], kNegInf);
  EXPECT_EQ(m4[2], kNegInf);
  const Tensor m8 = window_mask(p, 8, {true, true});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(m8[i], 0.0);
  const Tensor unb = window_mask(p, 1e6, {true, false});
  EXPECT_EQ(unb[0], 0.0);
  EXPECT_EQ(unb[1], kNegInf);
  EXPECT_EQ(unb[3], kNegInf);
  EXPECT_THROW(window_mask(p, 0.0, {true, true}), std::invalid_argument);
}

TEST(WindowMask, LargerWindowsNest) {
  Rng rng(1);
  const auto p = random_positions(40, rng);
  std::vector<bool> valid(40);
  for (std::size_t i = 0; i < 40; ++i) valid[i] = rng.uniform() < 0.8;
  const Tensor a = window_mask(p, 3, valid), b = window_mask(p, 7, valid);
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a[i] == 0.0) {
      EXPECT_EQ(b[i], 0.0);
    }
}

TEST(Attention, SingleValidRowReturnsItsValue) {
  ParamStore store(1);
  InstanceAggregator agg(store, small_config());
  Rng rng(2);
  const auto proj = agg.project(random_tensor({3, 2 * C}, rng));
  const Tensor out = agg.attend(proj, window_mask(random_positions(3, rng), 4, {false, true, false}));
  for (std::size_t c = 0; c < C; ++c) {
    EXPECT_NEAR(out[C + c], proj.v[C + c], 1e-15);
    EXPECT_EQ(out[c], 0.0);
    EXPECT_EQ(out[2 * C + c], 0.0);
  }
}

TEST(Attention, UnboundedWindowIsDenseAttention) {
  ParamStore store(2);
  InstanceAggregator agg(store, small_config());
  Rng rng(3);
  const std::size_t m = 12;
  const auto proj = agg.project(random_tensor({m, 2 * C}, rng));
  const Tensor out = agg.attend(proj, window_mask(random_positions(m, rng), 1e6, std::vector<bool>(m, true)));
  const auto want = dense_attention(proj.q, proj.k, proj.v);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(out[i], want[i], 1e-12);
}

TEST(BranchMix, SingleBranchIsIdentity) {
  ParamStore store(3);
  InstanceAggregator agg(store, small_config({1e6}));
  Rng rng(4);
  const Tensor b = random_tensor({5, C}, rng);
  Tensor w;
  const Tensor out = agg.branch_mix({b}, &w);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(w[i], 1.0);
  EXPECT_TRUE(std::equal(out.data().begin(), out.data().end(), b.data().begin()));
}

TEST(BranchMix, ZeroMixIsBranchMean) {
  ParamStore store(4);
  InstanceAggregator agg(store, small_config());
  fill(store, "fusion.mix", 0.0);
  Rng rng(5);
  const Tensor a = random_tensor({4, C}, rng), b = random_tensor({4, C}, rng), c = random_tensor({4, C}, rng);
  Tensor w;
  const Tensor out = agg.branch_mix({a, b, c}, &w);
  for (std::size_t i = 0; i < w.numel(); ++i) EXPECT_NEAR(w[i], 1.0 / 3.0, 1e-15);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], (a[i] + b[i] + c[i]) / 3.0, 1e-14);
}

TEST(BranchMix, WeightsAreRowSoftmax) {
  for (bool global : {false, true}) {
    ParamStore store(5);
    FusionConfig cfg = small_config();
    cfg.global_branch_weights = global;
    InstanceAggregator agg(store, cfg);
    Rng rng(6);
    std::vector<Tensor> br{random_tensor({6, C}, rng), random_tensor({6, C}, rng), random_tensor({6, C}, rng)};
    Tensor w;
    agg.branch_mix(br, &w);
    for (std::size_t r = 0; r < 6; ++r) {
      EXPECT_NEAR(w[r * 3] + w[r * 3 + 1] + w[r * 3 + 2], 1.0, 1e-12);
      if (global) {
        EXPECT_EQ(w[r * 3], w[0]);
      }
    }
  }
}

TEST(Ffn, ZeroFfnIsLayerNorm) {
  ParamStore store(6);
  InstanceAggregator agg(store, small_config());
  fill(store, "fusion.ffn", 0.0);
  Rng rng(7);
  const Tensor x = random_tensor({4, C}, rng);
  const Tensor y = agg.ffn_block(x);
  const Tensor want = layernorm(x, Tensor::full({C}, 1.0), Tensor::zeros({C}));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y[i], want[i]);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0;
    for (std::size_t c = 0; c < C; ++c) m += y[r * C + c];
    EXPECT_LT(std::fabs(m / C), 1e-12);
  }
}

TEST(Forward, SingleUnboundedBranchMatchesDenseReference) {
  ParamStore store(7);
  InstanceAggregator agg(store, small_config({1e6}));
  Rng rng(8);
  const std::size_t m = 9;
  const Tensor in = random_tensor({m, 2 * C}, rng);
  const Tensor out = agg.forward(in, random_positions(m, rng), std::vector<bool>(m, true));
  // Reference: dense attention, Add&Norm with the skip projection, then FFN Add&Norm.
  const auto lin = [&](const std::string& p, const Tensor& x) {
    return linear(x, store.get(p + ".w"), store.get(p + ".b"));
  };
  const auto proj = agg.project(in);
  const Tensor att = Tensor::from({m, C}, dense_attention(proj.q, proj.k, proj.v));
  const Tensor x1 = layernorm(add(att, lin("fusion.skip.l0", in)), store.get("fusion.ln1.g"), store.get("fusion.ln1.b"));
  const Tensor f = lin("fusion.ffn.l1", relu(lin("fusion.ffn.l0", x1)));
  const Tensor want = layernorm(add(x1, f), store.get("fusion.ln.g"), store.get("fusion.ln.b"));
  for (std::size_t i = 0; i < want.numel(); ++i) EXPECT_NEAR(out[i], want[i], 1e-10);
}

TEST(Forward, PermutationEquivariant) {
  ParamStore store(8);
  InstanceAggregator agg(store, small_config());
  Rng rng(9);
  const std::size_t m = 10;
  const Tensor in = random_tensor({m, 2 * C}, rng);
  const auto pos = random_positions(m, rng);
  const std::vector<bool> valid(m, true);
  const Tensor out = agg.forward(in, pos, valid);
  std::vector<std::size_t> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.begin() + 7);
  std::swap(perm[8], perm[2]);
  std::vector<Vec3> ppos;
  for (auto i : perm) ppos.push_back(pos[i]);
  const Tensor pout = agg.forward(gather_rows(in, perm), ppos, valid);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < C; ++c) EXPECT_NEAR(pout[r * C + c], out[perm[r] * C + c], 1e-12);
}

TEST(Forward, PaddedRowsDoNotLeak) {
  ParamStore store(9);
  InstanceAggregator agg(store, small_config());
  Rng rng(10);
  const std::size_t m = 8;
  const auto pos = random_positions(m, rng, 3);
  std::vector<bool> valid(m, true);
  valid[2] = valid[5] = false;
  const Tensor base = random_tensor({m, 2 * C}, rng);
  std::vector<double> changed(base.data().begin(), base.data().end());
  for (std::size_t r : {2u, 5u})
    for (std::size_t c = 0; c < 2 * C; ++c) changed[r * 2 * C + c] = rng.uniform(-50, 50);
  const Tensor o1 = agg.forward(base, pos, valid), o2 = agg.forward(Tensor::from({m, 2 * C}, changed), pos, valid);
  for (std::size_t r = 0; r < m; ++r) {
    if (!valid[r]) continue;
    for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(o1[r * C + c], o2[r * C + c]);
  }
}

TEST(Forward, GradientsMatchFiniteDifferences) {
  ParamStore store(10);
  InstanceAggregator agg(store, small_config());
  // Non-zero head so every upstream parameter receives gradient.
  Rng init(11);
  for (auto& p : store.params())
    if (p.name.rfind("fusion.head.l1", 0) == 0)
      for (auto& v : p.tensor.mutable_data()) v = init.uniform(-0.5, 0.5);
  Rng rng(12);
  const std::size_t m = 7;
  const Tensor in = random_tensor({m, 2 * C}, rng);
  const auto pos = random_positions(m, rng, 6);
  std::vector<bool> valid(m, true);
  valid[6] = false;
  const Tensor w = random_tensor({m, kAnchorDim + 1}, rng);
  const auto loss = [&] { return rftest::probe(agg.head(agg.forward(in, pos, valid)), w); };
  store.zero_grad();
  loss().backward();
  for (auto& p : store.params()) {
    ASSERT_TRUE(p.tensor.has_grad()) << p.name;
    const auto r = rftest::check_coordinates(p.tensor, [&] { return loss().item(); }, 20, rng);
    EXPECT_LT(r.max_rel, 1e-4) << p.name;
  }
}

TEST(Head, ZeroHeadReturnsAnchorsAtHalf) {
  ParamStore store(11);
  InstanceAggregator agg(store, small_config());
  fill(store, "fusion.head", 0.0);
  Rng rng(13);
  std::vector<Anchor> anchors;
  for (int i = 0; i < 4; ++i) anchors.push_back(Anchor::from_box(box(rng.uniform(-9, 9), rng.uniform(-9, 9), rng.uniform(-3, 3))));
  const auto dec = detection_head_decode(agg.head(random_tensor({4, C}, rng)), anchors);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(dec[i].score, 0.5);
    const Box3D want = anchors[i].to_box();
    EXPECT_LT((dec[i].box.center - want.center).norm(), 1e-12);
    EXPECT_NEAR(dec[i].box.yaw, want.yaw, 1e-12);
    EXPECT_LT((dec[i].box.size - want.size).norm(), 1e-12);
  }
}

TEST(Head, FreshHeadHasPriorScoreAndZeroDeltas) {
  ParamStore store(12);
  InstanceAggregator agg(store, small_config());
  Rng rng(14);
  const Tensor out = agg.head(random_tensor({3, C}, rng));
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t k = 0; k < kAnchorDim; ++k) EXPECT_EQ(out[r * 12 + k], 0.0);
    EXPECT_EQ(out[r * 12 + kAnchorDim], -2.0);
  }
  EXPECT_LT(sigmoid_scalar(-1.0), sigmoid_scalar(1.0));
}

TEST(Dedup, Examples) {
  const std::vector<ScoredBox> same{{box(0, 0, 0), 0.8, 0}, {box(0, 0, 0), 0.9, 1}};
  const auto k = deduplicate(same, 0.15);
  ASSERT_EQ(k.size(), 1u);
  EXPECT_EQ(k[0].score, 0.9);
  const std::vector<ScoredBox> apart{{box(0, 0, 0), 0.8, 0}, {box(20, 0, 0), 0.9, 1}};
  EXPECT_EQ(deduplicate(apart, 0.15).size(), 2u);
  EXPECT_THROW(deduplicate(apart, 1.0), std::invalid_argument);
}

TEST(Dedup, MatchesBruteForceOracle) {
  Rng rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<ScoredBox> d;
    for (std::size_t i = 0; i < 50; ++i) d.push_back({box(rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-3, 3)), rng.uniform(), i});
    const auto kept = deduplicate(d, 0.15);
    const auto want = suppression_oracle(d, 0.15);
    ASSERT_EQ(kept.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(kept[i].row, want[i]);
  }
}

TEST(Config, RadiiMustIncrease) {
  EXPECT_THROW(small_config({8, 4}).validate(), std::invalid_argument);
  EXPECT_THROW(small_config({}).validate(), std::invalid_argument);
}
