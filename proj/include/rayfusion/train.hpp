#pragma once

// Ground-truth matching, the l1 + focal objective and the training loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rayfusion/eval.hpp"
#include "rayfusion/model.hpp"
#include "rayfusion/nn.hpp"

namespace rayfusion {

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(const std::string& what, std::string dump) : std::runtime_error(what), dump_(std::move(dump)) {}
  const std::string& dump() const { return dump_; }

 private:
  std::string dump_;
};

/// Minimum-cost assignment for a rows x cols matrix (either orientation).
/// Returns, per row, the assigned column or -1.
inline std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
  const std::size_t rows = cost.size();
  if (rows == 0) return {};
  const std::size_t cols = cost.front().size();
  if (cols == 0) return std::vector<int>(rows, -1);
  for (const auto& row : cost) {
    if (row.size() != cols) throw DimensionError("hungarian: ragged cost matrix");
    for (double c : row)
      if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost");
  }
  const bool flip = rows > cols;
  const std::size_t n = flip ? cols : rows, m = flip ? rows : cols;
  auto a = [&](std::size_t i, std::size_t j) { return flip ? cost[j - 1][i - 1] : cost[i - 1][j - 1]; };

  // Potentials / augmenting paths, 1-based with a virtual column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) minv[j] = cur, way[j] = j0;
        if (minv[j] < delta) delta = minv[j], j1 = j;
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(rows, -1);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    if (flip)
      out[j - 1] = static_cast<int>(p[j] - 1);
    else
      out[p[j] - 1] = static_cast<int>(j - 1);
  }
  return out;
}

struct MatchConfig {
  double lambda_cls = 2.0;
  double lambda_box = 1.0;
  double max_center_distance = 10.0;
};

struct MatchCandidate {
  Anchor encoding;
  double score = 0.0;
};

struct MatchResult {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (detection row, gt index)
  std::vector<double> costs;
  std::vector<std::size_t> unmatched_detections;
  std::vector<std::size_t> unmatched_gt;
};

inline double encoding_l1(const Anchor& a, const Anchor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < kAnchorDim; ++i) s += std::fabs(a.v[i] - b.v[i]);
  return s / static_cast<double>(kAnchorDim);
}

inline MatchResult match(const std::vector<MatchCandidate>& dets, const std::vector<Box3D>& gt, const MatchConfig& cfg = {}) {
  MatchResult res;
  std::vector<Anchor> gt_enc;
  for (const auto& b : gt) gt_enc.push_back(Anchor::from_box(b));
  constexpr double kExcluded = 1e9;
  std::vector<std::vector<double>> cost(dets.size(), std::vector<double>(gt.size()));
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const bool far = (dets[i].encoding.position() - gt[j].center).norm() > cfg.max_center_distance;
      const double c = cfg.lambda_cls * (1.0 - dets[i].score) + cfg.lambda_box * encoding_l1(dets[i].encoding, gt_enc[j]);
      // NaN distances fail the gate test too; they leave the detection unmatched.
      cost[i][j] = far || !std::isfinite(c) || !(c < kExcluded) ? kExcluded : c;
    }
  const auto assign = hungarian(cost);
  std::vector<bool> gt_used(gt.size(), false);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const int j = assign.empty() ? -1 : assign[i];
    if (j >= 0 && cost[i][static_cast<std::size_t>(j)] < kExcluded) {
      res.pairs.emplace_back(i, static_cast<std::size_t>(j));
      res.costs.push_back(cost[i][static_cast<std::size_t>(j)]);
      gt_used[static_cast<std::size_t>(j)] = true;
    } else {
      res.unmatched_detections.push_back(i);
    }
  }
  for (std::size_t j = 0; j < gt.size(); ++j)
    if (!gt_used[j]) res.unmatched_gt.push_back(j);
  return res;
}

struct FocalConfig {
  double alpha = 0.25;
  double gamma = 2.0;
  double eps = 1e-7;
};

inline double focal_loss(double score, int label, const FocalConfig& fc = {}) {
  const double p = std::clamp(score, fc.eps, 1.0 - fc.eps);
  const double pt = label ? p : 1.0 - p;
  const double at = label ? fc.alpha : 1.0 - fc.alpha;
  return -at * std::pow(1.0 - pt, fc.gamma) * std::log(pt);
}

/// Sum of focal losses over sigmoid(logits) with the given 0/1 labels.
inline Tensor focal_loss_sum(const Tensor& logits, const std::vector<int>& labels, const FocalConfig& fc = {}) {
  const std::size_t n = logits.numel();
  if (labels.size() != n) throw DimensionError("focal loss: label count differs from logits");
  double total = 0.0;
  std::vector<double> dldx(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double raw = 1.0 / (1.0 + std::exp(-logits[i]));
    const bool clamped = raw < fc.eps || raw > 1.0 - fc.eps;
    const double p = std::clamp(raw, fc.eps, 1.0 - fc.eps);
    total += focal_loss(p, labels[i], fc);
    double dp = 0.0;
    if (labels[i]) {
      dp = -fc.alpha * (-fc.gamma * std::pow(1.0 - p, fc.gamma - 1.0) * std::log(p) + std::pow(1.0 - p, fc.gamma) / p);
    } else {
      dp = -(1.0 - fc.alpha) * (fc.gamma * std::pow(p, fc.gamma - 1.0) * std::log(1.0 - p) - std::pow(p, fc.gamma) / (1.0 - p));
    }
    dldx[i] = clamped ? 0.0 : dp * p * (1.0 - p);
  }
  return detail::make_op({1}, {total}, {logits}, [dldx = std::move(dldx)](detail::Node& s) {
    auto& g = detail::pgrad(s, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[0] * dldx[i];
  });
}

/// Mean over matched pairs of the mean absolute encoding difference.
inline Tensor regression_loss(const Tensor& prediction, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                              const std::vector<Box3D>& gt) {
  if (pairs.empty()) return Tensor::scalar(0.0);
  std::vector<std::size_t> rows;
  std::vector<double> target;
  for (const auto& [r, j] : pairs) {
    rows.push_back(r);
    const Anchor a = Anchor::from_box(gt[j]);
    target.insert(target.end(), a.v.begin(), a.v.end());
  }
  const Tensor t = Tensor::from({pairs.size(), kAnchorDim}, std::move(target));
  return mean(abs(sub(gather_rows(prediction, rows), t)));
}

struct LossWeights {
  double regression = 1.0;
  double classification = 2.0;
};

struct LossReport {
  double regression = 0.0;
  double focal = 0.0;
  double total = 0.0;
  std::size_t matched = 0;
};

struct SceneLoss {
  Tensor total;
  LossReport report;
};

/// Focal term is summed over rows and divided by max(1, matched).
inline SceneLoss scene_loss(const ModelOutput& out, const std::vector<Box3D>& gt, const MatchConfig& mc,
                            const FocalConfig& fc, const LossWeights& lw) {
  SceneLoss sl;
  const std::size_t n = out.rows.size();
  if (n == 0) {
    sl.total = Tensor::scalar(0.0);
    return sl;
  }
  std::vector<MatchCandidate> cands(n);
  const auto pred = out.prediction.data();
  const auto finite = [](std::span<const double> v) { return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); }); };
  if (!finite(pred) || !finite(out.logits.data())) {
    // Matching would silently drop such rows; surface them as a non-finite loss.
    const double nan = std::numeric_limits<double>::quiet_NaN();
    sl.total = Tensor::scalar(nan);
    sl.report = {nan, nan, nan, 0};
    return sl;
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < kAnchorDim; ++k) cands[i].encoding.v[k] = pred[i * kAnchorDim + k];
    cands[i].score = sigmoid_scalar(out.logits[i]);
  }
  const MatchResult m = match(cands, gt, mc);
  std::vector<int> labels(n, 0);
  for (const auto& pr : m.pairs) labels[pr.first] = 1;
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, m.pairs.size()));
  const Tensor focal = scale(focal_loss_sum(out.logits, labels, fc), norm);
  const Tensor reg = regression_loss(out.prediction, m.pairs, gt);
  sl.total = add(scale(reg, lw.regression), scale(focal, lw.classification));
  sl.report = {reg.item(), focal.item(), sl.total.item(), m.pairs.size()};
  return sl;
}

inline double cosine_lr(double lr0, double lr_min, std::size_t epoch, std::size_t epochs) {
  if (epochs == 0) return lr0;
  return lr_min + (lr0 - lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(epochs)));
}

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  double lr_min = 0.0;
  double grad_clip = 0.0;  // global norm; 0 disables
  AdamWConfig adam;
  MatchConfig match;
  FocalConfig focal;
  LossWeights loss;
  AlignConfig align;
  std::uint64_t seed = 0;
  bool validate_each_epoch = true;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double regression = 0.0;
  double focal = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double val_ap50 = 0.0;
  double val_ap70 = 0.0;
  double wall_s = 0.0;
};

inline double grad_norm(const ParamStore& store) {
  double s = 0.0;
  for (const auto& p : store.params())
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) s += g * g;
  return std::sqrt(s);
}

class Trainer {
 public:
  Trainer(RayFusionModel& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)), opt_(cfg_.adam) {}

  std::size_t epoch() const { return epoch_; }
  AdamW& optimizer() { return opt_; }
  const TrainConfig& config() const { return cfg_; }

  /// Runs one epoch over `train` in a seed-determined order.
  EpochRecord run_epoch(const std::vector<FusionSample>& train, const std::vector<FusionSample>& val) {
    const auto start = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch_;
    rec.lr = cosine_lr(cfg_.lr, cfg_.lr_min, epoch_, cfg_.epochs);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(named_seed(cfg_.seed, "shuffle/" + std::to_string(epoch_)));
    std::shuffle(order.begin(), order.end(), rng.engine());

    ParamStore& store = model_.params();
    std::size_t scenes = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg_.batch_size);
      store.zero_grad();
      Tensor batch_total;
      std::vector<LossReport> reports;
      for (std::size_t i = b; i < end; ++i) {
        const FusionSample& s = train[order[i]];
        const SceneLoss sl = scene_loss(model_.forward(merge_sample(s, cfg_.align)), s.gt, cfg_.match, cfg_.focal, cfg_.loss);
        if (!std::isfinite(sl.report.total)) throw non_finite(s, sl.report, b);
        batch_total = batch_total.defined() ? add(batch_total, sl.total) : sl.total;
        reports.push_back(sl.report);
        rec.regression += sl.report.regression;
        rec.focal += sl.report.focal;
        rec.total += sl.report.total;
        ++scenes;
      }
      scale(batch_total, 1.0 / static_cast<double>(end - b)).backward();
      if (cfg_.grad_clip > 0.0) {
        const double gn = grad_norm(store);
        if (!std::isfinite(gn)) throw non_finite(train[order[b]], reports.front(), b);
        if (gn > cfg_.grad_clip)
          for (auto& p : store.params())
            if (p.tensor.has_grad())
              for (auto& g : p.tensor.mutable_grad()) g *= cfg_.grad_clip / gn;
      }
      opt_.step(store, rec.lr);
    }
    store.zero_grad();
    if (scenes) {
      rec.regression /= static_cast<double>(scenes);
      rec.focal /= static_cast<double>(scenes);
      rec.total /= static_cast<double>(scenes);
    }
    if (cfg_.validate_each_epoch && !val.empty()) {
      const ApPair ap = ap_pair(run_frames(model_, val, cfg_.align));
      rec.val_ap50 = ap.ap50;
      rec.val_ap70 = ap.ap70;
    }
    rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    ++epoch_;
    return rec;
  }

  /// Continues from the current epoch up to cfg.epochs.
  std::vector<EpochRecord> run(const std::vector<FusionSample>& train, const std::vector<FusionSample>& val,
                               const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    std::vector<EpochRecord> out;
    while (epoch_ < cfg_.epochs) {
      out.push_back(run_epoch(train, val));
      if (on_epoch) on_epoch(out.back());
    }
    return out;
  }

  /// Parameters plus optimizer state and the epoch counter.
  std::vector<CheckpointRecord> checkpoint() const {
    auto recs = param_records(model_.params());
    std::vector<std::string> names;
    for (const auto& [name, slot] : opt_.slots()) names.push_back(name);
    std::sort(names.begin(), names.end());
    for (const auto& name : names) {
      const auto& slot = opt_.slots().at(name);
      recs.push_back({"adam.m/" + name, {slot.m.size()}, slot.m});
      recs.push_back({"adam.v/" + name, {slot.v.size()}, slot.v});
      recs.push_back({"adam.t/" + name, {1}, {static_cast<double>(slot.t)}});
    }
    recs.push_back({"meta/epoch", {1}, {static_cast<double>(epoch_)}});
    return recs;
  }

  void restore(const std::vector<CheckpointRecord>& recs) {
    load_params(model_.params(), recs);
    opt_.slots().clear();
    epoch_ = 0;
    for (const auto& r : recs) {
      auto take = [&](std::string_view prefix) -> std::string {
        return r.name.rfind(prefix, 0) == 0 ? r.name.substr(prefix.size()) : std::string();
      };
      if (r.name == "meta/epoch") {
        epoch_ = static_cast<std::size_t>(r.values.at(0));
      } else if (auto n = take("adam.m/"); !n.empty()) {
        opt_.slots()[n].m = r.values;
      } else if (auto n2 = take("adam.v/"); !n2.empty()) {
        opt_.slots()[n2].v = r.values;
      } else if (auto n3 = take("adam.t/"); !n3.empty()) {
        opt_.slots()[n3].t = static_cast<std::uint64_t>(r.values.at(0));
      }
    }
  }

 private:
  NonFiniteLossError non_finite(const FusionSample& s, const LossReport& r, std::size_t batch) const {
    std::ostringstream os;
    os << "{\"epoch\":" << epoch_ << ",\"batch_start\":" << batch << ",\"scene_seed\":" << s.seed
       << ",\"regression\":\"" << r.regression << "\",\"focal\":\"" << r.focal << "\",\"matched\":" << r.matched
       << ",\"grad_norm\":\"" << grad_norm(model_.params()) << "\"}";
    return NonFiniteLossError("non-finite loss at epoch " + std::to_string(epoch_) + " (scene seed " + std::to_string(s.seed) + ")",
                              os.str());
  }

  RayFusionModel& model_;
  TrainConfig cfg_;
  AdamW opt_;
  std::size_t epoch_ = 0;
};

}  // namespace rayfusion
