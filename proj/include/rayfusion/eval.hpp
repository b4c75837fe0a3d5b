#pragma once

// Average precision over rotated BEV IoU, precision-recall curves,
// robustness sweeps and communication-cost accounting.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "rayfusion/fusion.hpp"
#include "rayfusion/geometry.hpp"
#include "rayfusion/message.hpp"
#include "rayfusion/model.hpp"
#include "rayfusion/parallel.hpp"

namespace rayfusion {

class UndefinedApError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct PRPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct PRCurve {
  std::vector<PRPoint> points;  // one per detection in score order
  double ap = 0.0;
};

/// Per-scene scored detections and ground truth.
struct EvalFrame {
  std::vector<ScoredBox> detections;
  std::vector<Box3D> gt;
};

/// Greedy score-descending matching per scene, pooled over scenes; AP is
/// the area under the monotone precision envelope (all points).
inline PRCurve average_precision(const std::vector<EvalFrame>& frames, double iou_thresh) {
  struct Entry {
    double score;
    std::size_t frame, det;
  };
  std::vector<Entry> all;
  std::size_t total_gt = 0;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    total_gt += frames[f].gt.size();
    for (std::size_t d = 0; d < frames[f].detections.size(); ++d) all.push_back({frames[f].detections[d].score, f, d});
  }
  if (total_gt == 0) throw UndefinedApError("average precision is undefined without ground truth");
  std::stable_sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.frame != b.frame) return a.frame < b.frame;
    return a.det < b.det;
  });

  std::vector<std::vector<bool>> used(frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f) used[f].assign(frames[f].gt.size(), false);
  PRCurve curve;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const EvalFrame& fr = frames[all[i].frame];
    const Box3D& box = fr.detections[all[i].det].box;
    double best = 0.0;
    std::size_t best_j = fr.gt.size();
    for (std::size_t j = 0; j < fr.gt.size(); ++j) {
      if (used[all[i].frame][j]) continue;
      const double iou = rotated_bev_iou(box, fr.gt[j]);
      if (iou > best) best = iou, best_j = j;
    }
    if (best_j < fr.gt.size() && best >= iou_thresh) {
      used[all[i].frame][best_j] = true;
      ++tp;
    }
    curve.points.push_back({static_cast<double>(tp) / static_cast<double>(total_gt),
                            static_cast<double>(tp) / static_cast<double>(i + 1)});
  }

  // Envelope from the right, then sum precision over recall increments.
  std::vector<double> env(curve.points.size());
  double run = 0.0;
  for (std::size_t i = curve.points.size(); i-- > 0;) env[i] = run = std::max(run, curve.points[i].precision);
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < curve.points.size(); ++i) {
    curve.ap += (curve.points[i].recall - prev_recall) * env[i];
    prev_recall = curve.points[i].recall;
  }
  return curve;
}

/// Precision envelope evaluated at `recall` (max precision at recall >= r);
/// negative when the curve never reaches that recall.
inline double envelope_at(const PRCurve& c, double recall) {
  double best = -1.0;
  for (const auto& p : c.points)
    if (p.recall >= recall) best = std::max(best, p.precision);
  return best;
}

struct ApPair {
  double ap50 = 0.0;
  double ap70 = 0.0;
};

inline ApPair ap_pair(const std::vector<EvalFrame>& frames) {
  return {average_precision(frames, 0.5).ap, average_precision(frames, 0.7).ap};
}

inline std::vector<EvalFrame> run_frames(const RayFusionModel& model, const std::vector<FusionSample>& samples,
                                         const AlignConfig& align, double noise_sigma = 0.0, std::uint64_t noise_seed = 0,
                                         std::size_t workers = 1) {
  std::vector<EvalFrame> frames(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    const FusionSample& s = samples[i];
    EvalFrame& f = frames[i];
    f.gt = s.gt;
    if (noise_sigma > 0.0) {
      Rng rng(named_seed(noise_seed, "pose-noise/" + std::to_string(s.seed)));
      const auto noisy = perturb_poses(s.received, noise_sigma, rng);
      f.detections = model.predict(merge_sample(s, align, &noisy));
    } else {
      f.detections = model.predict(merge_sample(s, align));
    }
  });
  return frames;
}

struct SweepRow {
  double x = 0.0;  // sigma in meters or delay in milliseconds
  double ap50_mean = 0.0, ap50_sd = 0.0;
  double ap70_mean = 0.0, ap70_sd = 0.0;
};

inline void mean_sd(const std::vector<double>& v, double& mean, double& sd) {
  mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
}

inline std::vector<SweepRow> noise_sweep(const RayFusionModel& model, const std::vector<FusionSample>& samples,
                                         const AlignConfig& align, const std::vector<double>& sigmas,
                                         const std::vector<std::uint64_t>& seeds, std::size_t workers = 1) {
  std::vector<SweepRow> rows;
  for (double sigma : sigmas) {
    std::vector<double> a50, a70;
    for (auto seed : seeds) {
      const ApPair ap = ap_pair(run_frames(model, samples, align, sigma, seed, workers));
      a50.push_back(ap.ap50);
      a70.push_back(ap.ap70);
    }
    SweepRow r;
    r.x = sigma;
    mean_sd(a50, r.ap50_mean, r.ap50_sd);
    mean_sd(a70, r.ap70_mean, r.ap70_sd);
    rows.push_back(r);
  }
  return rows;
}

struct DelayRow {
  double delay_ms = 0.0;
  ApPair with_sta, without_sta;
};

/// `make_samples(delay_s)` must regenerate the benchmark with collaborators
/// observing at t - delay.
template <class MakeSamples>
std::vector<DelayRow> delay_sweep(const RayFusionModel& model, MakeSamples&& make_samples, const AlignConfig& align,
                                  const std::vector<double>& delays_ms, std::size_t workers = 1) {
  std::vector<DelayRow> rows;
  for (double ms : delays_ms) {
    const std::vector<FusionSample> samples = make_samples(ms / 1000.0);
    AlignConfig on = align, off = align;
    on.motion_compensation = true;
    off.motion_compensation = false;
    rows.push_back({ms, ap_pair(run_frames(model, samples, on, 0.0, 0, workers)),
                    ap_pair(run_frames(model, samples, off, 0.0, 0, workers))});
  }
  return rows;
}

struct CommRow {
  std::size_t m = 0;
  std::size_t bytes = 0;
};

struct CommReport {
  std::vector<CommRow> rows;
  double slope = 0.0;      // bytes per instance
  double intercept = 0.0;  // header bytes
  double max_residual = 0.0;
};

/// A synthetic message of `m` instances with the given widths.
inline CollabMessage synthetic_message(std::size_t m, std::size_t channels, std::size_t bins, std::size_t cameras) {
  CollabMessage msg;
  msg.agent_id = 1;
  msg.timestamp = 1.0;
  for (std::size_t i = 0; i < m; ++i) {
    InstanceMessage inst;
    inst.feature.assign(channels, 0.25);
    inst.anchor.v[7] = 1.0;
    inst.confidence = 0.5;
    for (std::size_t k = 0; k < cameras; ++k) {
      RayObservation obs;
      obs.camera = static_cast<int>(k);
      obs.visible = k == 0;
      obs.ray.direction = Vec3::UnitX();
      obs.rho.assign(bins, obs.visible ? 1.0 / static_cast<double>(bins) : 0.0);
      inst.rays.push_back(std::move(obs));
    }
    msg.instances.push_back(std::move(inst));
  }
  return msg;
}

/// Serialized sizes for each M with a least-squares affine fit.
inline CommReport comm_report(const std::vector<std::size_t>& ms, std::size_t channels, std::size_t bins, std::size_t cameras) {
  CommReport rep;
  for (auto m : ms) rep.rows.push_back({m, serialize(synthetic_message(m, channels, bins, cameras)).size()});
  const double n = static_cast<double>(rep.rows.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& r : rep.rows) {
    const double x = static_cast<double>(r.m), y = static_cast<double>(r.bytes);
    sx += x, sy += y, sxx += x * x, sxy += x * y;
  }
  const double den = n * sxx - sx * sx;
  rep.slope = den != 0.0 ? (n * sxy - sx * sy) / den : 0.0;
  rep.intercept = (sy - rep.slope * sx) / n;
  for (const auto& r : rep.rows)
    rep.max_residual = std::max(rep.max_residual,
                                std::fabs(static_cast<double>(r.bytes) - (rep.intercept + rep.slope * static_cast<double>(r.m))));
  return rep;
}

/// Instance payload ratio between two message sizes (header excluded).
inline double payload_ratio(std::size_t m_large, std::size_t m_small, std::size_t channels, std::size_t bins,
                            std::size_t cameras) {
  const auto payload = [&](std::size_t m) {
    return static_cast<double>(serialize(synthetic_message(m, channels, bins, cameras)).size() - kMessageHeaderBytes);
  };
  return payload(m_large) / payload(m_small);
}

}  // namespace rayfusion
