// advpatch: patch generation, benchmark evaluation and inspection tools.
// Exit codes: 0 ok, 1 usage, 2 data error, 3 internal.

#include <advpatch/bench.hpp>
#include <advpatch/patchgen.hpp>

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <string>

using namespace advpatch;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitInternal = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename E>
E parse_enum(const std::string& value, std::initializer_list<std::pair<const char*, E>> table, const char* what) {
  for (const auto& [name, e] : table)
    if (value == name) return e;
  throw UsageError(std::string("unknown ") + what + " '" + value + "'");
}

void write_text(const std::string& path, const std::string& text) {
  if (path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  out << text;
}

std::optional<GrayImage> load_patch(const std::string& path) {
  if (path.empty() || path == "none" || path == "benign") return std::nullopt;
  return to_grayscale(load_ppm(path));
}

// ---------------------------------------------------------------------------

struct GenPatchArgs {
  std::string preset = "untargeted";
  int size = 128;
  std::optional<int> steps;
  std::optional<double> alpha;
  std::string weights;
  std::uint64_t seed = 0;
  std::string out;
  std::string meta;
  bool quiet = false;
};

void add_gen_patch(CLI::App& app, GenPatchArgs& a) {
  auto* c = app.add_subcommand("gen-patch", "Generate a patch and write it as PGM plus a metadata sidecar");
  c->add_option("--preset", a.preset, "chessboard | targeted | untargeted | aug | chess-init")->capture_default_str();
  c->add_option("--size", a.size, "Patch side length in pixels")->capture_default_str();
  c->add_option("--steps", a.steps, "PGD steps (preset default when omitted)");
  c->add_option("--alpha", a.alpha, "PGD step size (preset default when omitted)");
  c->add_option("--weights", a.weights, "SPWF weight file (needed unless steps is 0)");
  c->add_option("--seed", a.seed)->capture_default_str();
  c->add_option("--out", a.out, "Output image")->required();
  c->add_option("--meta", a.meta, "Metadata file (default: <out>.txt)");
  c->add_flag("--quiet", a.quiet);
}

int run_gen_patch(const GenPatchArgs& a) {
  auto cfg = patchgen::preset(a.preset, a.size);
  if (a.steps) cfg.steps = *a.steps;
  if (a.alpha) cfg.alpha = *a.alpha;
  cfg.seed = a.seed;
  cfg.validate();
  patchgen::PatchState st;
  if (cfg.steps == 0) {
    std::mt19937_64 rng(cfg.seed);
    st.pixels = patchgen::initial_pattern(cfg, rng);
  } else {
    if (a.weights.empty()) throw UsageError("--weights is required when steps > 0");
    const auto w = spnet::load_weights_file(a.weights);
    st = patchgen::pgd_generate(w, cfg);
  }
  save_ppm(a.out, st.pixels);
  write_text(a.meta.empty() ? a.out + ".txt" : a.meta, patchgen::metadata_text(cfg, st, a.preset));
  if (!a.quiet) {
    std::cout << "wrote " << a.out << " (" << cfg.size << "x" << cfg.size << ", " << cfg.steps << " steps";
    if (!st.loss_history.empty()) std::cout << ", loss " << st.loss_history.front() << " -> " << st.final_loss;
    std::cout << ")\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string dataset;
  std::string weights;
  std::string patch;
  std::string patch_label;
  std::string extractor = "spnet";
  std::string protocol = "targeted";
  int mask_size = 128;
  int patch_size = 0;
  std::uint64_t seed = 0;
  std::string report = "-";
  std::string format = "markdown";
  std::string he_mode = "mean";
  int ransac_iterations = 2000;
  double knn_ratio = 0.0;
  bool verbose = false;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  auto* c = app.add_subcommand("eval", "Run the viewpoint benchmark and write a report");
  c->add_option("--dataset", a.dataset, "HPatches root")->required();
  c->add_option("--weights", a.weights, "SPWF weight file (spnet extractor)");
  c->add_option("--patch", a.patch, "Patch image; omit or 'none' for the benign scene");
  c->add_option("--patch-label", a.patch_label, "Name used in the report (default: file stem)");
  c->add_option("--extractor", a.extractor, "spnet | classical")->capture_default_str();
  c->add_option("--protocol", a.protocol, "targeted | untargeted")->capture_default_str();
  c->add_option("--mask-size", a.mask_size)->capture_default_str();
  c->add_option("--patch-size", a.patch_size, "Resample the patch first; 0 keeps it")->capture_default_str();
  c->add_option("--seed", a.seed)->capture_default_str();
  c->add_option("--report", a.report, "Output file, '-' for stdout")->capture_default_str();
  c->add_option("--format", a.format, "csv | markdown")->capture_default_str();
  c->add_option("--he-mode", a.he_mode, "mean | per-corner")->capture_default_str();
  c->add_option("--ransac-iterations", a.ransac_iterations)->capture_default_str();
  c->add_option("--knn-ratio", a.knn_ratio, "Lowe ratio, 0 disables")->capture_default_str();
  c->add_flag("--verbose", a.verbose);
}

int run_eval(const EvalArgs& a) {
  bench::RunConfig cfg;
  cfg.extractor = parse_enum<bench::ExtractorKind>(a.extractor, {{"spnet", bench::ExtractorKind::SuperPoint},
                                           {"classical", bench::ExtractorKind::Classical}}, "extractor");
  cfg.protocol = parse_enum<bench::Protocol>(a.protocol, {{"targeted", bench::Protocol::Targeted},
                                         {"untargeted", bench::Protocol::Untargeted}}, "protocol");
  const auto format = parse_enum<bench::ReportFormat>(a.format, {{"csv", bench::ReportFormat::Csv},
                                            {"markdown", bench::ReportFormat::Markdown}}, "format");
  const auto he = parse_enum<bench::HeMode>(a.he_mode, {{"mean", bench::HeMode::MeanCorner},
                                         {"per-corner", bench::HeMode::PerCorner}}, "he-mode");
  std::optional<spnet::WeightSet> weights;
  if (cfg.extractor == bench::ExtractorKind::SuperPoint) {
    if (a.weights.empty()) throw UsageError("--weights is required for the spnet extractor");
    weights = spnet::load_weights_file(a.weights);
    cfg.weights = &*weights;
  }
  cfg.patch = load_patch(a.patch);
  cfg.patch_label = !a.patch_label.empty() ? a.patch_label
                    : cfg.patch           ? fs::path(a.patch).stem().string()
                                          : "benign";
  cfg.mask_size = a.mask_size;
  cfg.patch_size = a.patch_size;
  cfg.seed = a.seed;
  cfg.ransac_iterations = a.ransac_iterations;
  cfg.knn_ratio = a.knn_ratio;
  cfg.verbose = a.verbose;
  const auto sequences = bench::load_hpatches(a.dataset);
  if (sequences.empty()) throw Error(ErrorCode::MissingFile, "no v_* sequences under " + a.dataset);
  const auto records = bench::run_protocol(sequences, cfg, &std::cerr);
  int failed = 0;
  for (const auto& r : records) failed += !r.error.empty();
  if (failed) std::cerr << failed << " of " << records.size() << " pairs failed; see the error column\n";
  write_text(a.report, bench::emit_report(records, format, he));
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ExportMasksArgs {
  std::string dataset;
  std::string protocol = "targeted";
  int mask_size = 128;
  std::uint64_t seed = 0;
  std::string out;
};

void add_export_masks(CLI::App& app, ExportMasksArgs& a) {
  auto* c = app.add_subcommand("export-masks", "Write the source/target mask quads of every pair");
  c->add_option("--dataset", a.dataset, "HPatches root")->required();
  c->add_option("--protocol", a.protocol, "targeted | untargeted")->capture_default_str();
  c->add_option("--mask-size", a.mask_size)->capture_default_str();
  c->add_option("--seed", a.seed)->capture_default_str();
  c->add_option("--out", a.out, "Output directory")->required();
}

int run_export_masks(const ExportMasksArgs& a) {
  const auto protocol = parse_enum<bench::Protocol>(a.protocol, {{"targeted", bench::Protocol::Targeted},
                                                {"untargeted", bench::Protocol::Untargeted}}, "protocol");
  const auto sequences = bench::load_hpatches(a.dataset);
  fs::create_directories(a.out);
  int written = 0, failed = 0;
  for (std::size_t si = 0; si < sequences.size(); ++si) {
    const auto& seq = sequences[si];
    const auto ref = seq.image(0);
    for (int p = 1; p <= bench::kComparedViews; ++p) {
      const auto path = fs::path(a.out) / (seq.name + "_" + std::to_string(p) + ".masks");
      try {
        const auto m = bench::masks_for_pair(seq, p, protocol, a.mask_size, bench::split_seed(a.seed, si),
                                             ref.width(), ref.height());
        std::ofstream out(path);
        if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
        maskgen::write_masks(out, m);
        ++written;
      } catch (const Error& e) {
        if (e.code() == ErrorCode::Io) throw;
        std::cerr << seq.name << " pair " << p << ": " << e.what() << '\n';
        ++failed;
      }
    }
  }
  std::cout << "wrote " << written << " mask files to " << a.out;
  if (failed) std::cout << " (" << failed << " pairs without a valid placement)";
  std::cout << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct MatchPairArgs {
  std::string image_a, image_b;
  std::string homography;
  std::string patch;
  int mask_size = 128;
  std::string weights;
  std::string extractor = "spnet";
  int top_n = 1000;
  std::uint64_t seed = 0;
  std::string visualize;
};

void add_match_pair(CLI::App& app, MatchPairArgs& a) {
  auto* c = app.add_subcommand("match-pair", "Match one image pair, optionally with a patch pasted into both");
  c->add_option("--image-a", a.image_a, "Reference view")->required();
  c->add_option("--image-b", a.image_b, "Compared view")->required();
  c->add_option("--homography", a.homography, "Ground-truth homography A->B (needed with --patch)");
  c->add_option("--patch", a.patch, "Patch to paste into both mask regions");
  c->add_option("--mask-size", a.mask_size)->capture_default_str();
  c->add_option("--weights", a.weights, "SPWF weight file (spnet extractor)");
  c->add_option("--extractor", a.extractor, "spnet | classical")->capture_default_str();
  c->add_option("--top-n", a.top_n)->capture_default_str();
  c->add_option("--seed", a.seed)->capture_default_str();
  c->add_option("--visualize", a.visualize, "Write a side-by-side PPM with match lines");
}

void draw_line(ImageBuffer& img, Point2 a, Point2 b, const double (&rgb)[3]) {
  const int n = static_cast<int>(std::ceil(std::max(std::abs(b.x - a.x), std::abs(b.y - a.y)))) + 1;
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    const int x = static_cast<int>(std::lround(a.x + t * (b.x - a.x)));
    const int y = static_cast<int>(std::lround(a.y + t * (b.y - a.y)));
    if (x < 0 || y < 0 || x >= img.width() || y >= img.height()) continue;
    for (int c = 0; c < 3; ++c) img.at(x, y, c) = rgb[c];
  }
}

void draw_quad(ImageBuffer& img, const Quad& q, Point2 offset, const double (&rgb)[3]) {
  for (int i = 0; i < 4; ++i) draw_line(img, q.corners[i] + offset, q.corners[(i + 1) % 4] + offset, rgb);
}

int run_match_pair(const MatchPairArgs& a) {
  const auto kind = parse_enum<bench::ExtractorKind>(a.extractor, {{"spnet", bench::ExtractorKind::SuperPoint},
                                             {"classical", bench::ExtractorKind::Classical}}, "extractor");
  bench::RunConfig cfg;
  cfg.extractor = kind;
  cfg.thresholds.top_n = a.top_n;
  std::optional<spnet::WeightSet> weights;
  if (kind == bench::ExtractorKind::SuperPoint) {
    if (a.weights.empty()) throw UsageError("--weights is required for the spnet extractor");
    weights = spnet::load_weights_file(a.weights);
    cfg.weights = &*weights;
  }
  ImageBuffer img_a = load_ppm(a.image_a), img_b = load_ppm(a.image_b);
  Homography h = Homography::identity();
  const bool have_h = !a.homography.empty();
  if (have_h) {
    std::ifstream in(a.homography);
    if (!in) throw Error(ErrorCode::MissingFile, a.homography);
    h = read_homography(in);
  }
  std::optional<maskgen::MaskPair> masks;
  if (const auto patch = load_patch(a.patch)) {
    if (!have_h) throw UsageError("--patch needs --homography to place the masks in view B");
    masks = maskgen::derive_target_mask(h, maskgen::place_source_mask(img_a.width(), img_a.height(), a.mask_size),
                                        img_a.width(), img_a.height());
    auto attacked = bench::synthesize_pair(img_a, img_b, h, *patch, *masks);
    img_a = std::move(attacked.source);
    img_b = std::move(attacked.target);
  }
  const auto fa = bench::extract(cfg, img_a), fb = bench::extract(cfg, img_b);
  const auto matches = matching::knn_match(fa.descriptors, fb.descriptors, {.top_n = a.top_n});
  std::optional<matching::RansacResult> rr;
  try {
    rr = matching::ransac_homography(fa.keypoints, fb.keypoints, matches, {.seed = a.seed});
  } catch (const Error& e) {
    if (e.code() != ErrorCode::TooFewMatches && e.code() != ErrorCode::NoModel) throw;
  }
  std::cout << "keypoints " << fa.keypoints.size() << " / " << fb.keypoints.size() << ", matches " << matches.size();
  if (rr) std::cout << ", inliers " << rr->inlier_count();
  if (rr && have_h) {
    const auto ce = corner_error(rr->h_est, h, img_a.width(), img_a.height());
    std::cout << ", mean corner error " << (ce[0] + ce[1] + ce[2] + ce[3]) / 4.0;
  }
  if (masks && have_h) {
    const auto rec = bench::compute_metrics(fa.keypoints, fb.keypoints, matches, *masks, h, cfg.thresholds,
                                            rr ? &*rr : nullptr, {img_a.width(), img_a.height()},
                                            {img_b.width(), img_b.height()});
    auto show = [](std::optional<double> v) { return v ? std::to_string(*v) : std::string("-"); };
    std::cout << ", SPR " << show(rec.spr) << ", TP " << show(rec.tp) << ", FP " << show(rec.fp);
  }
  std::cout << '\n';

  if (!a.visualize.empty()) {
    const GrayImage ga = to_grayscale(img_a), gb = to_grayscale(img_b);
    ImageBuffer canvas(ga.width() + gb.width(), std::max(ga.height(), gb.height()), 3);
    for (const auto* g : {&ga, &gb}) {
      const int ox = g == &ga ? 0 : ga.width();
      for (int y = 0; y < g->height(); ++y)
        for (int x = 0; x < g->width(); ++x)
          for (int c = 0; c < 3; ++c) canvas.at(ox + x, y, c) = g->at(x, y);
    }
    const Point2 shift{static_cast<double>(ga.width()), 0.0};
    static constexpr double kInlier[3] = {0.1, 0.9, 0.2}, kOutlier[3] = {0.9, 0.15, 0.1};
    static constexpr double kSource[3] = {0.2, 0.5, 1.0}, kTarget[3] = {1.0, 0.8, 0.0};
    for (std::size_t i = 0; i < matches.size(); ++i) {
      const bool inlier = rr && rr->inliers[i];
      draw_line(canvas, fa.keypoints[matches[i].source].position,
                fb.keypoints[matches[i].target].position + shift, inlier ? kInlier : kOutlier);
    }
    if (masks) {
      draw_quad(canvas, masks->source, {0, 0}, kSource);
      draw_quad(canvas, masks->target, {0, 0}, kTarget);
      draw_quad(canvas, maskgen::transfer_quad(h, masks->source), shift, kSource);
      draw_quad(canvas, maskgen::transfer_quad(h, masks->target), shift, kTarget);
    }
    save_ppm(a.visualize, canvas);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ActivationArgs {
  std::string weights;
  std::string activations;
  std::string image;
  double tolerance = 1e-4;
};

void add_verify_activations(CLI::App& app, ActivationArgs& a) {
  auto* c = app.add_subcommand("verify-activations", "Compare a reference activation file with this forward pass");
  c->add_option("--weights", a.weights, "SPWF weight file")->required();
  c->add_option("--activations", a.activations, "Reference activation file")->required();
  c->add_option("--image", a.image, "Input image when the file has no 'input' tensor (default: 64x64 zeros)");
  c->add_option("--tolerance", a.tolerance, "Largest accepted absolute difference")->capture_default_str();
}

int run_verify_activations(const ActivationArgs& a) {
  const auto w = spnet::load_weights_file(a.weights);
  const auto ref = spnet::parse_activations(spnet::read_spwf(read_file_bytes(a.activations)));
  GrayImage input = ref.input ? *ref.input : !a.image.empty() ? to_grayscale(load_ppm(a.image)) : GrayImage(64, 64, 1);
  const auto out = spnet::forward<float>(w, input, {.descriptors = true});
  const double diff = spnet::max_activation_difference(out, ref);
  const bool ok = diff <= a.tolerance;
  std::cout << (ok ? "match" : "MISMATCH") << ": max abs difference " << diff << " (tolerance " << a.tolerance << ")\n";
  return ok ? kExitOk : kExitData;
}

struct DumpActivationArgs {
  std::string weights;
  std::string image;
  std::string out;
};

void add_dump_activations(CLI::App& app, DumpActivationArgs& a) {
  auto* c = app.add_subcommand("dump-activations", "Write this forward pass in the activation file layout");
  c->add_option("--weights", a.weights, "SPWF weight file")->required();
  c->add_option("--image", a.image, "Input image (default: 64x64 zeros)");
  c->add_option("--out", a.out)->required();
}

int run_dump_activations(const DumpActivationArgs& a) {
  const auto w = spnet::load_weights_file(a.weights);
  const GrayImage input = a.image.empty() ? GrayImage(64, 64, 1) : to_grayscale(load_ppm(a.image));
  const auto out = spnet::forward<float>(w, input, {.descriptors = true});
  write_file_bytes(a.out, spnet::write_spwf(spnet::activation_tensors(out, &input)));
  return kExitOk;
}

struct RandomWeightArgs {
  std::uint64_t seed = 0;
  double gain = 1.0;
  double dustbin_bias = 0.0;
  std::string out;
};

void add_random_weights(CLI::App& app, RandomWeightArgs& a) {
  auto* c = app.add_subcommand("random-weights", "Write a seeded random network in SPWF");
  c->add_option("--seed", a.seed)->capture_default_str();
  c->add_option("--gain", a.gain)->capture_default_str();
  c->add_option("--dustbin-bias", a.dustbin_bias)->capture_default_str();
  c->add_option("--out", a.out)->required();
}

int run_random_weights(const RandomWeightArgs& a) {
  const auto w = spnet::make_random_weights(a.seed, {.gain = a.gain, .bias_std = 0.01, .dustbin_bias = a.dustbin_bias});
  write_file_bytes(a.out, spnet::save_weights(w));
  return kExitOk;
}

/// Config keys carry no section: they belong to whichever subcommand ran.
class FlatConfig : public CLI::ConfigBase {
 public:
  explicit FlatConfig(const CLI::App* app) : app_(app) {}
  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    auto items = CLI::ConfigBase::from_config(in);
    const auto subs = app_->get_subcommands();
    if (!subs.empty())
      for (auto& it : items)
        if (it.parents.empty()) it.parents = {subs.front()->get_name()};
    return items;
  }

 private:
  const CLI::App* app_;
};

// The config option lives on the top-level app, so it has to precede the
// subcommand name.
std::vector<std::string> hoist_config(int argc, char** argv) {
  std::vector<std::string> front, rest;
  for (int i = 1; i < argc; ++i) {
    const std::string s = argv[i];
    if (s == "--config" && i + 1 < argc) {
      front.push_back(s);
      front.push_back(argv[++i]);
    } else if (s.rfind("--config=", 0) == 0) {
      front.push_back(s);
    } else {
      rest.push_back(s);
    }
  }
  front.insert(front.end(), rest.begin(), rest.end());
  std::reverse(front.begin(), front.end());
  return front;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidConfig:
    case ErrorCode::IncompatibleDims:
    case ErrorCode::BadCellSize:
    case ErrorCode::MaskTooLarge:
      return kExitUsage;
    default:
      return kExitData;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial patches against local feature extractors", "advpatch"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value config file; command-line flags override it");
  app.config_formatter(std::make_shared<FlatConfig>(&app));
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.failure_message(CLI::FailureMessage::help);
  GenPatchArgs gen;
  EvalArgs eval;
  ExportMasksArgs masks;
  MatchPairArgs pair;
  ActivationArgs verify;
  DumpActivationArgs dump;
  RandomWeightArgs random;
  add_gen_patch(app, gen);
  add_eval(app, eval);
  add_export_masks(app, masks);
  add_match_pair(app, pair);
  add_verify_activations(app, verify);
  add_dump_activations(app, dump);
  add_random_weights(app, random);

  try {
    app.parse(hoist_config(argc, argv));
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (app.got_subcommand("gen-patch")) return run_gen_patch(gen);
    if (app.got_subcommand("eval")) return run_eval(eval);
    if (app.got_subcommand("export-masks")) return run_export_masks(masks);
    if (app.got_subcommand("match-pair")) return run_match_pair(pair);
    if (app.got_subcommand("verify-activations")) return run_verify_activations(verify);
    if (app.got_subcommand("dump-activations")) return run_dump_activations(dump);
    if (app.got_subcommand("random-weights")) return run_random_weights(random);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}
