#pragma once

// HPatches viewpoint benchmark: scene synthesis with a patch pair, feature
// extraction, matching, RANSAC and the per-pair attack metrics.

#include <advpatch/classical.hpp>
#include <advpatch/error.hpp>
#include <advpatch/features.hpp>
#include <advpatch/geometry.hpp>
#include <advpatch/image.hpp>
#include <advpatch/maskgen.hpp>
#include <advpatch/matching.hpp>
#include <advpatch/spnet.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace advpatch::bench {

namespace fs = std::filesystem;
using maskgen::MaskPair;

inline constexpr int kComparedViews = 5;

/// One reference view (index 0) and five compared views; homographies[i]
/// maps the reference onto view i + 1. Images are either held in memory or
/// decoded from `dir` on demand.
struct Sequence {
  std::string name;
  fs::path dir;
  std::vector<ImageBuffer> images;
  std::array<Homography, kComparedViews> homographies;

  ImageBuffer image(int view) const {
    if (!images.empty()) return images.at(static_cast<std::size_t>(view));
    return load_ppm((dir / (std::to_string(view + 1) + ".ppm")).string());
  }
};

/// Loads every `v_*` sequence under root, sorted by name. Non-viewpoint
/// directories are ignored; entries that are not directories are skipped
/// with a warning.
inline std::vector<Sequence> load_hpatches(const fs::path& root, std::ostream* warn = &std::cerr) {
  if (!fs::is_directory(root)) throw Error(ErrorCode::MissingFile, root.string() + " is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    const auto name = e.path().filename().string();
    if (name.rfind("v_", 0) != 0) continue;
    if (!e.is_directory()) {
      if (warn) *warn << "warning: skipping non-directory " << e.path() << '\n';
      continue;
    }
    dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<Sequence> out;
  for (const auto& d : dirs) {
    Sequence s;
    s.name = d.filename().string();
    s.dir = d;
    for (int i = 1; i <= 6; ++i) {
      const auto p = d / (std::to_string(i) + ".ppm");
      if (!fs::exists(p)) throw Error(ErrorCode::MissingFile, s.name + "/" + p.filename().string());
    }
    for (int i = 0; i < kComparedViews; ++i) {
      const auto p = d / ("H_1_" + std::to_string(i + 2));
      if (!fs::exists(p)) throw Error(ErrorCode::MissingFile, s.name + "/" + p.filename().string());
      std::ifstream in(p);
      try {
        s.homographies[i] = read_homography(in);
      } catch (const Error& e) {
        throw Error(ErrorCode::UnreadableHomography, s.name + "/" + p.filename().string() + ": " + e.what());
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Seeds

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Child seed for work item `index` of a parent seed.
inline std::uint64_t split_seed(std::uint64_t parent, std::uint64_t index) {
  return splitmix64(parent ^ splitmix64(index + 1));
}

// ---------------------------------------------------------------------------
// Scene synthesis

enum class Protocol { Targeted, Untargeted };

inline const char* to_string(Protocol p) { return p == Protocol::Targeted ? "targeted" : "untargeted"; }

/// Pair whose homography defines the masks under the untargeted protocol.
inline int untargeted_anchor_pair(std::uint64_t sequence_seed) {
  return static_cast<int>(splitmix64(sequence_seed) % kComparedViews) + 1;
}

/// Masks in the reference view for compared view `pair_idx` (1..5).
inline MaskPair masks_for_pair(const Sequence& seq, int pair_idx, Protocol protocol, int mask_size,
                               std::uint64_t sequence_seed, int ref_w, int ref_h) {
  const int anchor = protocol == Protocol::Targeted ? pair_idx : untargeted_anchor_pair(sequence_seed);
  const Quad source = maskgen::place_source_mask(ref_w, ref_h, mask_size);
  return maskgen::derive_target_mask(seq.homographies.at(anchor - 1), source, ref_w, ref_h);
}

struct AttackedPair {
  ImageBuffer source;
  ImageBuffer target;
};

/// Places the patch in both mask regions of the source view and in their
/// images under `h` in the target view.
inline AttackedPair synthesize_pair(const ImageBuffer& source_view, const ImageBuffer& target_view, const Homography& h,
                                    const GrayImage& patch, const MaskPair& masks) {
  AttackedPair out;
  out.source = warp_into_quad(warp_into_quad(source_view, patch, masks.source), patch, masks.target);
  const Quad ts = maskgen::transfer_quad(h, masks.source);
  const Quad tt = maskgen::transfer_quad(h, masks.target);
  out.target = warp_into_quad(warp_into_quad(target_view, patch, ts), patch, tt);
  return out;
}

inline AttackedPair synthesize_pair(const Sequence& seq, int pair_idx, const GrayImage& patch, const MaskPair& masks) {
  if (pair_idx < 1 || pair_idx > kComparedViews) throw Error(ErrorCode::InvalidConfig, "pair index must be 1..5");
  return synthesize_pair(seq.image(0), seq.image(pair_idx), seq.homographies[pair_idx - 1], patch, masks);
}

// ---------------------------------------------------------------------------
// Metrics

struct EvalThresholds {
  double repeatability_eps = 3.0;
  std::array<double, 3> homography_eps{1.0, 3.0, 5.0};
  int top_n = 1000;
};

struct FrameSize {
  int width = 0;
  int height = 0;
};

struct EvalRecord {
  std::string extractor;
  std::string patch;
  std::string protocol;
  int mask_size = 0;
  int patch_size = 0;
  std::string sequence;
  int pair = 0;

  std::optional<double> spr;
  std::optional<double> tp;
  std::optional<double> fp;
  std::optional<double> repeatability;
  std::array<bool, 3> he_correct{};
  std::array<double, 3> he_corner_fraction{};
  std::optional<double> mean_corner_error;

  int n_matches = 0;
  int n_source_in_mask = 0;
  int n_tp = 0;
  int n_fp = 0;
  int n_rep_projected = 0;
  int n_rep_hit = 0;
  int n_source_keypoints = 0;
  int n_target_keypoints = 0;

  std::string error;  // non-empty when the pair could not be evaluated
};

inline std::optional<double> ratio(int num, int den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / den;
}

/// Ratios count matched points. `ransac` may be null when estimation
/// failed, which counts as incorrect at every threshold.
inline EvalRecord compute_metrics(const std::vector<Keypoint>& src_kps, const std::vector<Keypoint>& tgt_kps,
                                  const matching::MatchSet& matches, const MaskPair& masks, const Homography& h_gt,
                                  const EvalThresholds& th, const matching::RansacResult* ransac, FrameSize source_frame,
                                  FrameSize target_frame) {
  EvalRecord r;
  r.n_matches = static_cast<int>(matches.size());
  r.n_source_keypoints = static_cast<int>(src_kps.size());
  r.n_target_keypoints = static_cast<int>(tgt_kps.size());
  const Quad src_in_target = maskgen::transfer_quad(h_gt, masks.source);
  const Quad tgt_in_target = maskgen::transfer_quad(h_gt, masks.target);
  for (const auto& m : matches) {
    if (!point_in_quad(masks.source, src_kps.at(m.source).position)) continue;
    ++r.n_source_in_mask;
    const Point2 t = tgt_kps.at(m.target).position;
    if (point_in_quad(src_in_target, t)) ++r.n_tp;
    if (point_in_quad(tgt_in_target, t)) ++r.n_fp;
  }
  r.spr = ratio(r.n_source_in_mask, r.n_matches);
  r.tp = ratio(r.n_tp, r.n_source_in_mask);
  r.fp = ratio(r.n_fp, r.n_source_in_mask);

  const double eps2 = th.repeatability_eps * th.repeatability_eps;
  for (const auto& k : src_kps) {
    Point2 p;
    try {
      p = apply_point(h_gt, k.position);
    } catch (const Error&) {
      continue;
    }
    if (p.x < 0 || p.y < 0 || p.x > target_frame.width - 1 || p.y > target_frame.height - 1) continue;
    ++r.n_rep_projected;
    for (const auto& t : tgt_kps) {
      const double dx = t.position.x - p.x, dy = t.position.y - p.y;
      if (dx * dx + dy * dy <= eps2) {
        ++r.n_rep_hit;
        break;
      }
    }
  }
  r.repeatability = ratio(r.n_rep_hit, r.n_rep_projected);

  if (ransac) {
    try {
      const auto ce = corner_error(ransac->h_est, h_gt, source_frame.width, source_frame.height);
      const double mean = (ce[0] + ce[1] + ce[2] + ce[3]) / 4.0;
      r.mean_corner_error = mean;
      for (int i = 0; i < 3; ++i) {
        r.he_correct[i] = mean < th.homography_eps[i];
        r.he_corner_fraction[i] =
            static_cast<double>(std::count_if(ce.begin(), ce.end(), [&](double e) { return e < th.homography_eps[i]; })) / 4.0;
      }
    } catch (const Error&) {
      // A corner mapping to infinity is simply a wrong estimate.
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Protocol runner

enum class ExtractorKind { SuperPoint, Classical };

inline const char* to_string(ExtractorKind k) { return k == ExtractorKind::SuperPoint ? "spnet" : "classical"; }

struct RunConfig {
  ExtractorKind extractor = ExtractorKind::SuperPoint;
  const spnet::WeightSet* weights = nullptr;
  spnet::DecodeParams decode;
  classical::ClassicalConfig classical;
  /// No patch means the benign scene (images untouched).
  std::optional<GrayImage> patch;
  std::string patch_label = "benign";
  Protocol protocol = Protocol::Targeted;
  int mask_size = 128;
  /// Resample the patch to this side length before compositing; 0 keeps it.
  int patch_size = 0;
  EvalThresholds thresholds;
  int ransac_iterations = 2000;
  double ransac_inlier_px = 3.0;
  double knn_ratio = 0.0;
  std::uint64_t seed = 0;
  bool verbose = false;
};

inline Features extract(const RunConfig& cfg, const ImageBuffer& img) {
  const GrayImage g = to_grayscale(img);
  if (cfg.extractor == ExtractorKind::SuperPoint) {
    if (!cfg.weights) throw Error(ErrorCode::InvalidConfig, "spnet extractor needs weights");
    auto d = cfg.decode;
    d.max_points = std::min(d.max_points, cfg.thresholds.top_n);
    return spnet::extract_features(*cfg.weights, g, d);
  }
  return truncate(classical::extract(g, cfg.classical), static_cast<std::size_t>(cfg.thresholds.top_n));
}

/// Matches, estimates and scores one (possibly attacked) view pair.
inline EvalRecord evaluate_views(const RunConfig& cfg, const Features& fs_src, const Features& fs_tgt,
                                 const MaskPair& masks, const Homography& h_gt, FrameSize src_frame,
                                 FrameSize tgt_frame, std::uint64_t ransac_seed) {
  const auto matches = matching::knn_match(fs_src.descriptors, fs_tgt.descriptors,
                                           {.top_n = cfg.thresholds.top_n, .ratio = cfg.knn_ratio});
  std::optional<matching::RansacResult> rr;
  try {
    rr = matching::ransac_homography(fs_src.keypoints, fs_tgt.keypoints, matches,
                                     {.iterations = cfg.ransac_iterations, .inlier_px = cfg.ransac_inlier_px,
                                      .seed = ransac_seed});
  } catch (const Error& e) {
    if (e.code() != ErrorCode::TooFewMatches && e.code() != ErrorCode::NoModel) throw;
  }
  return compute_metrics(fs_src.keypoints, fs_tgt.keypoints, matches, masks, h_gt, cfg.thresholds,
                         rr ? &*rr : nullptr, src_frame, tgt_frame);
}

inline std::vector<EvalRecord> run_protocol(const std::vector<Sequence>& sequences, const RunConfig& cfg,
                                            std::ostream* log = nullptr) {
  std::optional<GrayImage> patch = cfg.patch;
  if (patch) {
    *patch = to_grayscale(*patch);
    if (cfg.patch_size > 0 && (patch->width() != cfg.patch_size || patch->height() != cfg.patch_size)) {
      patch = resize(*patch, cfg.patch_size, cfg.patch_size);
    }
  }
  const int patch_size = patch ? patch->width() : 0;
  std::vector<EvalRecord> out;
  for (std::size_t si = 0; si < sequences.size(); ++si) {
    const Sequence& seq = sequences[si];
    const std::uint64_t seq_seed = split_seed(cfg.seed, si);
    auto label = [&](EvalRecord& r, int pair) {
      r.extractor = to_string(cfg.extractor);
      r.patch = cfg.patch_label;
      r.protocol = to_string(cfg.protocol);
      r.mask_size = cfg.mask_size;
      r.patch_size = patch_size;
      r.sequence = seq.name;
      r.pair = pair;
    };
    ImageBuffer ref;
    try {
      ref = seq.image(0);
    } catch (const Error& e) {
      for (int p = 1; p <= kComparedViews; ++p) {
        EvalRecord r;
        label(r, p);
        r.error = e.what();
        out.push_back(std::move(r));
      }
      continue;
    }
    // The reference view is identical across pairs unless masks vary per pair.
    const bool shared_source = !patch || cfg.protocol == Protocol::Untargeted;
    std::optional<Features> cached_source;
    for (int p = 1; p <= kComparedViews; ++p) {
      EvalRecord r;
      try {
        const ImageBuffer tgt = seq.image(p);
        const Homography& h = seq.homographies[p - 1];
        const MaskPair masks =
            masks_for_pair(seq, p, cfg.protocol, cfg.mask_size, seq_seed, ref.width(), ref.height());
        Features fs_src, fs_tgt;
        if (patch) {
          const auto attacked = synthesize_pair(ref, tgt, h, *patch, masks);
          if (shared_source && cached_source) {
            fs_src = *cached_source;
          } else {
            fs_src = extract(cfg, attacked.source);
            if (shared_source) cached_source = fs_src;
          }
          fs_tgt = extract(cfg, attacked.target);
        } else {
          if (!cached_source) cached_source = extract(cfg, ref);
          fs_src = *cached_source;
          fs_tgt = extract(cfg, tgt);
        }
        r = evaluate_views(cfg, fs_src, fs_tgt, masks, h, {ref.width(), ref.height()}, {tgt.width(), tgt.height()},
                           split_seed(seq_seed, static_cast<std::uint64_t>(p)));
      } catch (const Error& e) {
        r = EvalRecord{};
        r.error = e.what();
      }
      label(r, p);
      if (log && cfg.verbose) {
        *log << seq.name << " pair " << p << (r.error.empty() ? "" : " error: " + r.error) << '\n';
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

enum class ReportFormat { Csv, Markdown };
/// Homography-estimation score: per-pair mean corner error under epsilon,
/// or the fraction of individual corners under epsilon.
enum class HeMode { MeanCorner, PerCorner };

namespace detail {

inline std::string fmt(std::optional<double> v, int precision = 6) {
  if (!v) return "";
  std::ostringstream s;
  s << std::setprecision(precision) << *v;
  return s.str();
}

struct Mean {
  double sum = 0.0;
  int n = 0;
  void add(std::optional<double> v) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  std::optional<double> value() const { return n ? std::optional<double>(sum / n) : std::nullopt; }
};

inline std::string fixed(std::optional<double> v, int digits) {
  if (!v) return "-";
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << *v;
  return s.str();
}

}  // namespace detail

inline double he_score(const EvalRecord& r, int eps_index, HeMode mode) {
  return mode == HeMode::MeanCorner ? (r.he_correct[eps_index] ? 1.0 : 0.0) : r.he_corner_fraction[eps_index];
}

struct Aggregate {
  std::string extractor, protocol, patch;
  int mask_size = 0, patch_size = 0;
  int pairs = 0;
  int failed = 0;
  std::optional<double> spr, tp, fp, repeatability;
  std::array<std::optional<double>, 3> he{};
};

/// Means per (extractor, protocol, patch, mask size, patch size), sorted by
/// that key. Null ratios are skipped; failed pairs are excluded entirely.
inline std::vector<Aggregate> aggregate(const std::vector<EvalRecord>& records, HeMode mode = HeMode::MeanCorner) {
  using Key = std::tuple<std::string, std::string, std::string, int, int>;
  struct Acc {
    detail::Mean spr, tp, fp, rep;
    std::array<detail::Mean, 3> he;
    int pairs = 0, failed = 0;
  };
  std::map<Key, Acc> groups;
  for (const auto& r : records) {
    auto& a = groups[Key{r.extractor, r.protocol, r.patch, r.mask_size, r.patch_size}];
    ++a.pairs;
    if (!r.error.empty()) {
      ++a.failed;
      continue;
    }
    a.spr.add(r.spr);
    a.tp.add(r.tp);
    a.fp.add(r.fp);
    a.rep.add(r.repeatability);
    for (int i = 0; i < 3; ++i) a.he[i].add(he_score(r, i, mode));
  }
  std::vector<Aggregate> out;
  for (const auto& [k, a] : groups) {
    Aggregate g;
    std::tie(g.extractor, g.protocol, g.patch, g.mask_size, g.patch_size) = k;
    g.pairs = a.pairs;
    g.failed = a.failed;
    g.spr = a.spr.value();
    g.tp = a.tp.value();
    g.fp = a.fp.value();
    g.repeatability = a.rep.value();
    for (int i = 0; i < 3; ++i) g.he[i] = a.he[i].value();
    out.push_back(std::move(g));
  }
  return out;
}

inline std::string emit_report(const std::vector<EvalRecord>& records, ReportFormat format,
                               HeMode mode = HeMode::MeanCorner) {
  if (records.empty()) throw Error(ErrorCode::InvalidConfig, "no records to report");
  std::ostringstream out;
  if (format == ReportFormat::Csv) {
    out << "extractor,patch,protocol,mask_size,patch_size,sequence,pair,spr,tp,fp,repeatability,"
           "he_eps1,he_eps3,he_eps5,mean_corner_error,n_matches,n_source_in_mask,n_tp,n_fp,"
           "n_rep_projected,n_rep_hit,n_source_keypoints,n_target_keypoints,error\n";
    for (const auto& r : records) {
      const bool ok = r.error.empty();
      out << r.extractor << ',' << r.patch << ',' << r.protocol << ',' << r.mask_size << ',' << r.patch_size << ','
          << r.sequence << ',' << r.pair << ',' << detail::fmt(r.spr) << ',' << detail::fmt(r.tp) << ','
          << detail::fmt(r.fp) << ',' << detail::fmt(r.repeatability);
      for (int i = 0; i < 3; ++i) out << ',' << (ok ? detail::fmt(he_score(r, i, mode)) : "");
      out << ',' << detail::fmt(r.mean_corner_error) << ',' << r.n_matches << ',' << r.n_source_in_mask << ','
          << r.n_tp << ',' << r.n_fp << ',' << r.n_rep_projected << ',' << r.n_rep_hit << ','
          << r.n_source_keypoints << ',' << r.n_target_keypoints << ',';
      std::string e = r.error;
      std::replace(e.begin(), e.end(), ',', ';');
      out << e << '\n';
    }
    return out.str();
  }
  out << "| Extractor | Viewpoint | Patch | Mask | Patch size | SPR | TP | FP | Rep. | HE e=1 | HE e=3 | HE e=5 | Pairs |\n"
      << "|---|---|---|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& g : aggregate(records, mode)) {
    out << "| " << g.extractor << " | " << g.protocol << " | " << g.patch << " | " << g.mask_size << " | "
        << g.patch_size << " | " << detail::fixed(g.spr, 4) << " | " << detail::fixed(g.tp, 4) << " | "
        << detail::fixed(g.fp, 4) << " | " << detail::fixed(g.repeatability, 4) << " | "
        << detail::fixed(g.he[0], 2) << " | " << detail::fixed(g.he[1], 2) << " | " << detail::fixed(g.he[2], 2)
        << " | " << (g.pairs - g.failed) << "/" << g.pairs << " |\n";
  }
  return out.str();
}

}  // namespace advpatch::bench
