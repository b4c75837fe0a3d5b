#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "rayfusion/train.hpp"
#include "test_support.hpp"

using namespace rayfusion;

namespace {

Box3D car(double x, double y, double yaw = 0.0) {
  Box3D b;
  b.center = Vec3(x, y, 0.8);
  b.size = Vec3(1.9, 1.5, 4.5);
  b.yaw = yaw;
  return b;
}

SceneConfig tiny_scene(std::uint64_t seed) {
  SceneConfig s;
  s.seed = seed;
  s.num_vehicles = 6;
  s.image_width = 48;
  s.image_height = 16;
  s.bins = {8, 0.5, 60.5};
  s.features.channels = 24;
  s.features.appearance_dim = 8;
  return s;
}

ModelConfig tiny_model(std::uint64_t seed = 3) {
  ModelConfig m;
  m.seed = seed;
  m.rdpe.channels = 24;
  m.rdpe.bins = {8, 0.5, 60.5};
  m.fusion.channels = 24;
  return m;
}

std::vector<FusionSample> tiny_samples(std::size_t n, std::uint64_t base) {
  SampleConfig sc;
  sc.ego_instances = 12;
  sc.message_instances = 8;
  std::vector<FusionSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_sample(generate_scene(tiny_scene(base + i)), sc));
  return out;
}

TrainConfig tiny_train(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 2;
  t.seed = 9;
  t.validate_each_epoch = false;
  return t;
}

std::vector<std::vector<double>> snapshot(const ParamStore& store) {
  std::vector<std::vector<double>> out;
  for (const auto& p : store.params()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

}  // namespace

TEST(Hungarian, MatchesBruteForceOnRandomMatrices) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<double>> cost(5, std::vector<double>(5));
    for (auto& row : cost)
      for (auto& c : row) c = rng.uniform(0, 10);
    const auto a = hungarian(cost);
    double got = 0.0;
    for (std::size_t i = 0; i < 5; ++i) got += cost[i][static_cast<std::size_t>(a[i])];
    std::vector<int> perm{0, 1, 2, 3, 4};
    double best = std::numeric_limits<double>::infinity();
    do {
      double s = 0.0;
      for (std::size_t i = 0; i < 5; ++i) s += cost[i][static_cast<std::size_t>(perm[i])];
      best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    EXPECT_NEAR(got, best, 1e-9);
  }
}

TEST(Hungarian, RectangularLeavesExtraRowsUnassigned) {
  const std::vector<std::vector<double>> tall{{5, 1}, {1, 5}, {0.5, 0.4}};
  const auto a = hungarian(tall);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a, (std::vector<int>{-1, 0, 1}));  // 1 + 0.4 beats 1 + 1
  const std::vector<std::vector<double>> wide{{3, 1, 2}};
  EXPECT_EQ(hungarian(wide), std::vector<int>{1});
  EXPECT_TRUE(hungarian({}).empty());
  EXPECT_THROW(hungarian({{1.0, std::nan("")}}), std::invalid_argument);
}

TEST(Match, ExactDetectionCostsOnlyClassification) {
  MatchCandidate d{Anchor::from_box(car(5, 2, 0.3)), 0.8};
  const MatchResult m = match({d}, {car(5, 2, 0.3)});
  ASSERT_EQ(m.pairs.size(), 1u);
  EXPECT_NEAR(m.costs[0], 2.0 * (1.0 - 0.8), 1e-12);
  EXPECT_TRUE(m.unmatched_detections.empty());
  EXPECT_TRUE(m.unmatched_gt.empty());
}

TEST(Match, EmptySidesAndDistanceGate) {
  MatchCandidate d{Anchor::from_box(car(0, 0)), 0.5};
  const MatchResult no_gt = match({d, d}, {});
  EXPECT_TRUE(no_gt.pairs.empty());
  EXPECT_EQ(no_gt.unmatched_detections.size(), 2u);
  const MatchResult no_det = match({}, {car(1, 1), car(8, 8)});
  EXPECT_EQ(no_det.unmatched_gt.size(), 2u);
  const MatchResult far = match({d}, {car(30, 0)});
  EXPECT_TRUE(far.pairs.empty());
}

TEST(Match, CostIsClassPlusBoxTerms) {
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const Box3D g = car(rng.uniform(-9, 9), rng.uniform(-9, 9), rng.uniform(-3, 3));
    const Box3D p = car(g.center.x() + rng.uniform(-2, 2), g.center.y() + rng.uniform(-2, 2), rng.uniform(-3, 3));
    const double s = rng.uniform();
    const MatchResult m = match({{Anchor::from_box(p), s}}, {g});
    ASSERT_EQ(m.pairs.size(), 1u);
    double l1 = 0.0;
    const Anchor a = Anchor::from_box(p), b = Anchor::from_box(g);
    for (std::size_t k = 0; k < kAnchorDim; ++k) l1 += std::fabs(a.v[k] - b.v[k]);
    EXPECT_NEAR(m.costs[0], 2.0 * (1.0 - s) + l1 / 11.0, 1e-12);
  }
}

TEST(Focal, Examples) {
  EXPECT_NEAR(focal_loss(0.5, 1), 0.25 * 0.25 * std::log(2.0), 1e-12);
  EXPECT_NEAR(focal_loss(0.5, 1), 0.0433216988, 1e-9);
  EXPECT_NEAR(focal_loss(0.5, 0), 0.75 * 0.25 * std::log(2.0), 1e-12);
  EXPECT_LT(focal_loss(1.0, 1), 1e-13);
  EXPECT_LT(focal_loss(0.0, 0), 1e-13);
  FocalConfig ce{1.0, 0.0, 1e-7};
  for (double p : {0.1, 0.4, 0.9}) EXPECT_NEAR(focal_loss(p, 1, ce), -std::log(p), 1e-12);
  EXPECT_TRUE(std::isfinite(focal_loss(0.0, 1)));
}

TEST(Focal, SumGradientMatchesFiniteDifferences) {
  Rng rng(3);
  Tensor logits = rftest::random_tensor({9, 1}, rng, true, -4, 4);
  std::vector<int> labels;
  for (int i = 0; i < 9; ++i) labels.push_back(i % 3 == 0);
  focal_loss_sum(logits, labels).backward();
  double direct = 0.0;
  for (std::size_t i = 0; i < 9; ++i) direct += focal_loss(1.0 / (1.0 + std::exp(-logits[i])), labels[i]);
  EXPECT_NEAR(focal_loss_sum(logits, labels).item(), direct, 1e-12);
  const auto r = rftest::check_coordinates(logits, [&] { return focal_loss_sum(logits, labels).item(); }, 9, rng);
  EXPECT_LT(r.max_rel, 1e-6);
}

TEST(Regression, ExamplesAndLoopOracle) {
  const Box3D g = car(1, 2, 0.4);
  Anchor off = Anchor::from_box(g);
  off.v[0] += 0.5;
  const Tensor pred = Tensor::from({1, kAnchorDim}, std::vector<double>(off.v.begin(), off.v.end()));
  EXPECT_NEAR(regression_loss(pred, {{0, 0}}, {g}).item(), 0.5 / 11.0, 1e-12);
  EXPECT_EQ(regression_loss(pred, {}, {g}).item(), 0.0);

  Rng rng(4);
  const Tensor p = rftest::random_tensor({5, kAnchorDim}, rng, false, -3, 3);
  const std::vector<Box3D> gts{car(1, 1, 0.2), car(-4, 3, 2.0), car(7, -2, -1.0)};
  const std::vector<std::pair<std::size_t, std::size_t>> pairs{{4, 0}, {1, 2}, {2, 1}};
  double want = 0.0;
  for (const auto& [r, j] : pairs) {
    const Anchor a = Anchor::from_box(gts[j]);
    for (std::size_t k = 0; k < kAnchorDim; ++k) want += std::fabs(p[r * kAnchorDim + k] - a.v[k]);
  }
  EXPECT_NEAR(regression_loss(p, pairs, gts).item(), want / (3.0 * kAnchorDim), 1e-12);
}

TEST(Schedule, CosineEndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(cosine_lr(1e-3, 0.0, 0, 40), 1e-3);
  EXPECT_NEAR(cosine_lr(1e-3, 0.0, 20, 40), 5e-4, 1e-15);
  EXPECT_NEAR(cosine_lr(1e-3, 1e-5, 40, 40), 1e-5, 1e-15);
  for (std::size_t e = 1; e <= 40; ++e) EXPECT_LE(cosine_lr(1e-3, 0, e, 40), cosine_lr(1e-3, 0, e - 1, 40));
}

TEST(SceneLossTest, InvariantToReceivedInstanceOrder) {
  RayFusionModel model(tiny_model());
  const auto samples = tiny_samples(2, 500);
  for (const auto& s : samples) {
    FusionSample shuffled = s;
    Rng rng(s.seed);
    for (auto& msg : shuffled.received) std::shuffle(msg.instances.begin(), msg.instances.end(), rng.engine());
    std::shuffle(shuffled.ego.begin(), shuffled.ego.end(), rng.engine());
    const MatchConfig mc;
    const double a = scene_loss(model.forward(merge_sample(s, {})), s.gt, mc, {}, {}).report.total;
    const double b = scene_loss(model.forward(merge_sample(shuffled, {})), s.gt, mc, {}, {}).report.total;
    EXPECT_NEAR(a, b, 1e-9 * std::max(1.0, std::fabs(a)));
  }
}

TEST(SceneLossTest, FullModelGradientsMatchFiniteDifferences) {
  RayFusionModel model(tiny_model(5));
  ParamStore& store = model.params();
  // A non-zero head output layer lets gradient reach every upstream module.
  Rng init(6);
  for (auto& p : store.params())
    if (p.name.rfind("fusion.head.l1", 0) == 0)
      for (auto& v : p.tensor.mutable_data()) v = init.uniform(-0.3, 0.3);
  FusionSample s = tiny_samples(1, 600).front();
  for (auto& obs : s.ego.front().rays) obs.visible = false;  // exercises the null token
  const MergedSet merged = merge_sample(s, {});
  const auto loss = [&] { return scene_loss(model.forward(merged), s.gt, {}, {}, {}).total; };
  store.zero_grad();
  loss().backward();
  Rng rng(7);
  for (auto& p : store.params()) {
    ASSERT_TRUE(p.tensor.has_grad()) << p.name;
    const auto g = p.tensor.grad();
    EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; })) << p.name << " receives no gradient";
    // Best of several steps: large steps can straddle a ReLU kink, small
    // ones lose precision on tiny gradients.
    for (int k = 0; k < 12; ++k) {
      const std::size_t i = rng.index(p.tensor.numel());
      double& x = p.tensor.mutable_data()[i];
      const double x0 = x;
      double best = std::numeric_limits<double>::infinity();
      for (double h : {1e-5, 1e-6, 1e-7}) {
        NoGradGuard ng;
        x = x0 + h;
        const double fp = loss().item();
        x = x0 - h;
        const double fm = loss().item();
        best = std::min(best, rftest::rel_error(g[i], (fp - fm) / (2.0 * h)));
      }
      x = x0;
      EXPECT_LT(best, 1e-4) << p.name << "[" << i << "]";
    }
  }
}

TEST(TrainerTest, ZeroEpochsKeepInitialization) {
  RayFusionModel fresh(tiny_model()), model(tiny_model());
  Trainer t(model, tiny_train(0));
  EXPECT_TRUE(t.run(tiny_samples(2, 700), {}).empty());
  EXPECT_EQ(encode_checkpoint(param_records(model.params())), encode_checkpoint(param_records(fresh.params())));
}

TEST(TrainerTest, RayTermsUntouchedWithoutRoe) {
  ModelConfig mc = tiny_model();
  mc.rdpe.use_roe = false;
  RayFusionModel model(mc);
  const auto before = snapshot(model.params());
  Trainer t(model, tiny_train(1));
  t.run(tiny_samples(4, 800), {});
  const auto& params = model.params().params();
  std::size_t frozen = 0, moved = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& n = params[i].name;
    const bool ray_part = n.rfind("rdpe.", 0) == 0 && n.rfind("rdpe.phi", 0) != 0;
    const bool changed = snapshot(model.params())[i] != before[i];
    if (ray_part) {
      ++frozen;
      EXPECT_FALSE(changed) << n;
      EXPECT_EQ(t.optimizer().slots().count(n), 0u) << n;
    } else {
      moved += changed;
    }
  }
  EXPECT_GT(frozen, 0u);
  EXPECT_GT(moved, 0u);
}

TEST(TrainerTest, DeterministicAndResumable) {
  const auto train = tiny_samples(4, 900);
  RayFusionModel a(tiny_model()), b(tiny_model()), c(tiny_model());
  Trainer ta(a, tiny_train(3)), tb(b, tiny_train(3));
  const auto ra = ta.run(train, {});
  const auto rb = tb.run(train, {});
  ASSERT_EQ(ra.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_EQ(ra[e].total, rb[e].total);
  EXPECT_EQ(encode_checkpoint(ta.checkpoint()), encode_checkpoint(tb.checkpoint()));

  // Two epochs, a checkpoint round trip into a fresh trainer, then the last.
  RayFusionModel part(tiny_model());
  Trainer tp(part, tiny_train(3));
  tp.run_epoch(train, {});
  tp.run_epoch(train, {});
  const auto bytes = encode_checkpoint(tp.checkpoint());
  Trainer tc(c, tiny_train(3));
  tc.restore(decode_checkpoint(bytes));
  EXPECT_EQ(tc.epoch(), 2u);
  const auto rc = tc.run(train, {});
  ASSERT_EQ(rc.size(), 1u);
  EXPECT_EQ(rc[0].total, ra[2].total);
  EXPECT_EQ(encode_checkpoint(tc.checkpoint()), encode_checkpoint(ta.checkpoint()));
}

TEST(TrainerTest, LossDecreasesOnSmallSet) {
  const auto train = tiny_samples(6, 1000);
  RayFusionModel model(tiny_model());
  TrainConfig cfg = tiny_train(8);
  cfg.lr = 3e-3;
  Trainer t(model, cfg);
  const auto recs = t.run(train, {});
  EXPECT_LT(recs.back().total, recs.front().total);
}

TEST(TrainerTest, NonFiniteLossReportsScene) {
  RayFusionModel model(tiny_model());
  for (auto& p : model.params().params())
    if (p.name.rfind("fusion.head.l1.b", 0) == 0) p.tensor.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  Trainer t(model, tiny_train(1));
  const auto train = tiny_samples(2, 1100);
  try {
    t.run(train, {});
    FAIL() << "expected NonFiniteLossError";
  } catch (const NonFiniteLossError& e) {
    EXPECT_NE(std::string(e.what()).find("scene seed"), std::string::npos);
    EXPECT_NE(e.dump().find("\"scene_seed\""), std::string::npos);
  }
}
