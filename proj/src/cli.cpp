#include "groupreg/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "groupreg/evaluation.hpp"
#include "groupreg/keypoints.hpp"
#include "groupreg/matching.hpp"
#include "groupreg/optimizer.hpp"
#include "groupreg/parallel.hpp"
#include "groupreg/synthetic.hpp"
#include "groupreg/transforms.hpp"
#include "groupreg/volume.hpp"

namespace groupreg {

namespace {

namespace fs = std::filesystem;

std::string numbered(const std::string& dir, const char* stem, std::size_t i,
                     const char* ext) {
  char name[64];
  std::snprintf(name, sizeof(name), "%s_%03zu%s", stem, i, ext);
  return (fs::path(dir) / name).string();
}

std::vector<std::vector<Keypoint>> load_keypoint_sets(
    const std::vector<std::string>& paths) {
  std::vector<std::vector<Keypoint>> sets;
  sets.reserve(paths.size());
  for (std::size_t i = 0; i < paths.size(); ++i) {
    sets.push_back(load_keypoints(paths[i]));
    for (Keypoint& kp : sets.back()) kp.image_id = static_cast<int>(i);
  }
  return sets;
}

// Transform files carry their image_id; the loaded set must cover 0..n-1.
std::vector<HalfTransform> load_transform_set(
    const std::vector<std::string>& paths) {
  std::vector<HalfTransform> transforms(paths.size());
  std::vector<char> seen(paths.size(), 0);
  for (const std::string& path : paths) {
    int id = -1;
    HalfTransform t = load_transform(path, &id);
    if (id < 0 || id >= static_cast<int>(paths.size()))
      throw std::runtime_error(path + ": image_id " + std::to_string(id) +
                               " does not fit a set of " +
                               std::to_string(paths.size()) + " transforms");
    if (seen[id])
      throw std::runtime_error(path + ": duplicate image_id " +
                               std::to_string(id));
    seen[id] = 1;
    transforms[id] = std::move(t);
  }
  return transforms;
}

struct ThreadsOption {
  int threads = 0;
  void install(CLI::App* cmd) {
    cmd->add_option("--threads", threads,
                    "Worker threads (0 = hardware concurrency)");
  }
  void apply() const {
    if (threads > 0) parallel::set_thread_count(threads);
  }
};

struct DetectorOptions {
  DetectorParams params;
  void install(CLI::App* cmd) {
    cmd->add_option("--octaves", params.octaves, "Detection octaves");
    cmd->add_option("--scales-per-octave", params.scales_per_octave,
                    "Filter sizes per octave");
    cmd->add_option("--response-threshold", params.response_threshold,
                    "Minimum detector response");
    cmd->add_option("--max-keypoints", params.max_keypoints,
                    "Keep at most this many keypoints");
  }
};

struct MatchOptions {
  MatchCriteria criteria;
  bool allow_sign_mismatch = false;
  void install(CLI::App* cmd) {
    cmd->add_option("--max-distance", criteria.max_descriptor_distance,
                    "Maximum accepted descriptor distance");
    cmd->add_option("--nn-ratio", criteria.nn_ratio,
                    "Nearest/second-nearest distance ratio bound");
    cmd->add_option("--max-scale-log-ratio", criteria.max_scale_log_ratio,
                    "Maximum |log| keypoint scale ratio");
    cmd->add_flag("--allow-sign-mismatch", allow_sign_mismatch,
                  "Match across Laplacian signs");
  }
  MatchCriteria resolved() const {
    MatchCriteria c = criteria;
    c.require_same_sign = !allow_sign_mismatch;
    return c;
  }
};

struct OptimizerOptions {
  OptimizerConfig cfg;
  std::string theta_history_path;
  void install(CLI::App* cmd) {
    cmd->add_option("--levels", cfg.level_spacings,
                    "Grid spacings in mm, coarse to fine");
    cmd->add_option("--iterations", cfg.iterations_per_level,
                    "Gradient iterations per level");
    cmd->add_option("--alpha", cfg.alpha, "Gradient step coefficient");
    cmd->add_option("--init-iterations", cfg.init_iterations,
                    "Linear initialization rounds");
    cmd->add_option("--gamma", cfg.gamma, "Linear initialization damping");
    cmd->add_option("--refresh-period", cfg.theta_refresh_period,
                    "Iterations between weight refreshes");
    cmd->add_option("--theta-history", theta_history_path,
                    "Also write the mixture parameter history CSV here");
  }
  OptimizerConfig resolved() const {
    OptimizerConfig c = cfg;
    c.record_theta_history = !theta_history_path.empty();
    return c;
  }
};

struct SynthOptions {
  SyntheticSpec spec;
  double domain_size = 400.0;
  void install(CLI::App* cmd) {
    cmd->add_option("--seed", spec.seed, "Random seed");
    cmd->add_option("--images", spec.n_images, "Number of images");
    cmd->add_option("--points", spec.n_points, "Keypoints per image");
    cmd->add_option("--noise", spec.noise_sigma,
                    "Keypoint position noise sigma in mm");
    cmd->add_option("--outlier-rate", spec.outlier_rate,
                    "Fraction of planted matches that are outliers");
    cmd->add_option("--warp-spacing", spec.warp_spacing,
                    "Ground-truth warp grid spacing in mm");
    cmd->add_option("--max-displacement", spec.warp_max_displacement,
                    "Ground-truth warp coefficient bound in mm");
    cmd->add_option("--domain-size", domain_size,
                    "Edge length of the cubic point domain in mm");
    cmd->add_option("--landmarks", spec.n_landmarks,
                    "Landmark categories to plant");
    cmd->add_option("--descriptor-noise", spec.descriptor_noise,
                    "Descriptor noise sigma per component");
  }
  SyntheticSpec resolved() const {
    SyntheticSpec s = spec;
    s.domain_lo = {0.0, 0.0, 0.0};
    s.domain_hi = {domain_size, domain_size, domain_size};
    return s;
  }
};

void save_registration(const std::string& out_dir,
                       const RegistrationResult& result,
                       const std::string& trace_path,
                       const std::string& theta_path) {
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < result.transforms.size(); ++i)
    save_transform(numbered(out_dir, "transform", i, ".json"),
                   result.transforms[i], static_cast<int>(i));
  save_trace(trace_path.empty()
                 ? (fs::path(out_dir) / "trace.csv").string()
                 : trace_path,
             result.trace);
  if (!theta_path.empty()) save_theta_history(theta_path, result.theta_history);
}

void print_registration_summary(const RegistrationResult& result) {
  if (!result.trace.empty()) {
    const TraceRow& last = result.trace.back();
    std::printf("final energy %.6g, mean weighted distance %.4g mm\n",
                last.energy, last.mean_weighted_distance);
  }
  std::printf("grid compositions per level:");
  for (int g : result.grids_per_level) std::printf(" %d", g);
  std::printf("\nmax constraint residual %.3g\n",
              result.max_constraint_residual);
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{
      "Keypoint-based groupwise 3D deformable registration without a "
      "reference image"};
  app.require_subcommand(1);

  // ---- extract ----------------------------------------------------------
  auto* extract = app.add_subcommand(
      "extract", "Detect and describe keypoints in a volume");
  auto ex_threads = std::make_shared<ThreadsOption>();
  auto ex_detector = std::make_shared<DetectorOptions>();
  auto ex_volume = std::make_shared<std::string>();
  auto ex_output = std::make_shared<std::string>();
  extract->add_option("--volume", *ex_volume, "Input volume (.nii or raw)")
      ->required()
      ->check(CLI::ExistingFile);
  extract->add_option("--output", *ex_output, "Output keypoint file")
      ->required();
  ex_detector->install(extract);
  ex_threads->install(extract);
  extract->callback([=]() {
    ex_threads->apply();
    Volume v = load_volume(*ex_volume);
    std::vector<Keypoint> kps = detect(v, ex_detector->params);
    std::size_t detected = kps.size();
    IntegralVolume iv = build_integral(v);
    kps = describe(iv, std::move(kps));
    save_keypoints(*ex_output, kps);
    std::printf("wrote %zu keypoints (%zu detected) to %s\n", kps.size(),
                detected, ex_output->c_str());
  });

  // ---- match ------------------------------------------------------------
  auto* match = app.add_subcommand(
      "match", "Match keypoint files across every image pair");
  auto ma_threads = std::make_shared<ThreadsOption>();
  auto ma_criteria = std::make_shared<MatchOptions>();
  auto ma_inputs = std::make_shared<std::vector<std::string>>();
  auto ma_output = std::make_shared<std::string>();
  match->add_option("--keypoints", *ma_inputs, "Keypoint files, one per image")
      ->required()
      ->check(CLI::ExistingFile);
  match->add_option("--output", *ma_output, "Output match file")->required();
  ma_criteria->install(match);
  ma_threads->install(match);
  match->callback([=]() {
    ma_threads->apply();
    if (ma_inputs->size() < 2)
      throw std::runtime_error("need at least 2 images");
    auto sets = load_keypoint_sets(*ma_inputs);
    MatchGraph graph = build_graph(sets, ma_criteria->resolved());
    save_matches(*ma_output, graph);
    std::printf("wrote %zu matches over %d images to %s\n",
                graph.matches.size(), graph.image_count(),
                ma_output->c_str());
  });

  // ---- register ---------------------------------------------------------
  auto* reg = app.add_subcommand(
      "register", "Jointly register keypoint sets into a common space");
  auto rg_threads = std::make_shared<ThreadsOption>();
  auto rg_optimizer = std::make_shared<OptimizerOptions>();
  auto rg_inputs = std::make_shared<std::vector<std::string>>();
  auto rg_matches = std::make_shared<std::string>();
  auto rg_out_dir = std::make_shared<std::string>();
  auto rg_trace = std::make_shared<std::string>();
  reg->add_option("--keypoints", *rg_inputs, "Keypoint files, one per image")
      ->required()
      ->check(CLI::ExistingFile);
  reg->add_option("--matches", *rg_matches, "Match file")
      ->required()
      ->check(CLI::ExistingFile);
  reg->add_option("--out-dir", *rg_out_dir,
                  "Directory for transform files and the trace")
      ->required();
  reg->add_option("--trace", *rg_trace,
                  "Energy trace CSV path (default <out-dir>/trace.csv)");
  rg_optimizer->install(reg);
  rg_threads->install(reg);
  reg->callback([=]() {
    rg_threads->apply();
    if (rg_inputs->size() < 2)
      throw std::runtime_error("need at least 2 images");
    auto sets = load_keypoint_sets(*rg_inputs);
    MatchGraph graph = load_matches(*rg_matches);
    if (graph.image_count() != static_cast<int>(sets.size()))
      throw std::runtime_error(
          "match file covers " + std::to_string(graph.image_count()) +
          " images but " + std::to_string(sets.size()) +
          " keypoint files were given");
    for (std::size_t i = 0; i < sets.size(); ++i) {
      if (graph.image_point_counts[i] != sets[i].size())
        throw std::runtime_error(
            "match file expects " +
            std::to_string(graph.image_point_counts[i]) +
            " keypoints for image " + std::to_string(i) + " but " +
            std::to_string(sets[i].size()) + " were loaded");
    }
    RegistrationResult result =
        register_group(sets, std::move(graph), rg_optimizer->resolved());
    save_registration(*rg_out_dir, result, *rg_trace,
                      rg_optimizer->theta_history_path);
    print_registration_summary(result);
  });

  // ---- apply ------------------------------------------------------------
  auto* apply = app.add_subcommand(
      "apply", "Map keypoints or volumes through transforms");
  auto ap_threads = std::make_shared<ThreadsOption>();
  auto ap_transforms = std::make_shared<std::vector<std::string>>();
  auto ap_keypoints = std::make_shared<std::string>();
  auto ap_volumes = std::make_shared<std::vector<std::string>>();
  auto ap_output = std::make_shared<std::string>();
  auto ap_average = std::make_shared<bool>(false);
  auto ap_spacing = std::make_shared<double>(2.0);
  apply->add_option("--transform", *ap_transforms, "Transform file(s)")
      ->required()
      ->check(CLI::ExistingFile);
  apply->add_option("--keypoints", *ap_keypoints,
                    "Keypoint file to map into the common space")
      ->check(CLI::ExistingFile);
  apply->add_option("--volume", *ap_volumes,
                    "Volume(s) to resample into the common space")
      ->check(CLI::ExistingFile);
  apply->add_option("--output", *ap_output, "Output file")->required();
  apply->add_flag("--average", *ap_average,
                  "Average all resampled volumes into one output");
  apply->add_option("--grid-spacing", *ap_spacing,
                    "Output grid spacing in mm for volume resampling");
  ap_threads->install(apply);
  apply->callback([=]() {
    ap_threads->apply();
    bool have_kp = !ap_keypoints->empty();
    bool have_vol = !ap_volumes->empty();
    if (have_kp == have_vol)
      throw std::runtime_error(
          "apply needs either --keypoints or --volume input");
    if (have_kp) {
      if (ap_transforms->size() != 1)
        throw std::runtime_error(
            "keypoint mapping takes exactly one --transform");
      HalfTransform t = load_transform(ap_transforms->front());
      std::vector<Keypoint> kps = load_keypoints(*ap_keypoints);
      for (Keypoint& kp : kps) kp.position = t.apply(kp.position);
      save_keypoints(*ap_output, kps);
      std::printf("wrote %zu mapped keypoints to %s\n", kps.size(),
                  ap_output->c_str());
      return;
    }
    if (ap_volumes->size() != ap_transforms->size())
      throw std::runtime_error(
          "got " + std::to_string(ap_volumes->size()) + " volumes but " +
          std::to_string(ap_transforms->size()) + " transforms");
    if (!*ap_average && ap_volumes->size() != 1)
      throw std::runtime_error(
          "multiple volumes require --average (or pass one volume)");
    std::vector<Volume> volumes;
    volumes.reserve(ap_volumes->size());
    for (const std::string& path : *ap_volumes)
      volumes.push_back(load_volume(path));
    std::vector<HalfTransform> transforms = load_transform_set(*ap_transforms);
    OutputGrid grid = default_render_grid(volumes, transforms, *ap_spacing);
    RenderStats stats;
    Volume avg = render_average(volumes, transforms, grid, &stats);
    write_volume(*ap_output, avg);
    std::printf("wrote %dx%dx%d common-space volume to %s (%zu/%zu voxels "
                "masked)\n",
                avg.dims[0], avg.dims[1], avg.dims[2], ap_output->c_str(),
                stats.failed_inversions, stats.total_voxels);
  });

  // ---- evaluate ---------------------------------------------------------
  auto* evaluate = app.add_subcommand(
      "evaluate", "Score landmark agreement in the common space");
  auto ev_landmarks = std::make_shared<std::string>();
  auto ev_transforms = std::make_shared<std::vector<std::string>>();
  auto ev_csv = std::make_shared<std::string>();
  evaluate->add_option("--landmarks", *ev_landmarks, "Landmark CSV")
      ->required()
      ->check(CLI::ExistingFile);
  evaluate->add_option("--transforms", *ev_transforms, "Transform files")
      ->required()
      ->check(CLI::ExistingFile);
  evaluate->add_option("--output-csv", *ev_csv, "Also write the report CSV");
  evaluate->callback([=]() {
    LandmarkTable table = load_landmarks(*ev_landmarks);
    std::vector<HalfTransform> transforms = load_transform_set(*ev_transforms);
    LandmarkReport report = evaluate_landmarks(table, transforms);
    std::fputs(format_report(report).c_str(), stdout);
    if (!ev_csv->empty()) save_report_csv(*ev_csv, report);
  });

  // ---- synth ------------------------------------------------------------
  auto* synth = app.add_subcommand(
      "synth", "Generate a synthetic dataset with planted ground truth");
  auto sy_options = std::make_shared<SynthOptions>();
  auto sy_out_dir = std::make_shared<std::string>();
  synth->add_option("--out-dir", *sy_out_dir, "Output directory")->required();
  sy_options->install(synth);
  synth->callback([=]() {
    SyntheticDataset data = generate_synthetic(sy_options->resolved());
    save_synthetic(*sy_out_dir, data);
    std::size_t outliers = 0;
    for (std::uint8_t f : data.outlier_flags) outliers += f;
    std::printf("wrote %zu images x %zu keypoints, %zu matches (%zu planted "
                "outliers) to %s\n",
                data.keypoints.size(), data.keypoints.front().size(),
                data.graph.matches.size(), outliers, sy_out_dir->c_str());
  });

  // ---- pipeline ---------------------------------------------------------
  auto* pipeline = app.add_subcommand(
      "pipeline", "synth + match + register + evaluate in one run");
  auto pl_threads = std::make_shared<ThreadsOption>();
  auto pl_synth = std::make_shared<SynthOptions>();
  auto pl_criteria = std::make_shared<MatchOptions>();
  auto pl_optimizer = std::make_shared<OptimizerOptions>();
  auto pl_out_dir = std::make_shared<std::string>();
  pipeline->add_option("--out-dir", *pl_out_dir, "Output directory")
      ->required();
  pl_synth->install(pipeline);
  pl_criteria->install(pipeline);
  pl_optimizer->install(pipeline);
  pl_threads->install(pipeline);
  pipeline->callback([=]() {
    pl_threads->apply();
    const std::string& dir = *pl_out_dir;
    SyntheticDataset data = generate_synthetic(pl_synth->resolved());
    save_synthetic((fs::path(dir) / "data").string(), data);

    MatchGraph graph = build_graph(data.keypoints, pl_criteria->resolved());
    fs::create_directories(dir);
    save_matches((fs::path(dir) / "matches.txt").string(), graph);
    std::printf("matched: %zu pairs\n", graph.matches.size());

    RegistrationResult result = register_group(
        data.keypoints, std::move(graph), pl_optimizer->resolved());
    save_registration(dir, result, "", pl_optimizer->theta_history_path);
    print_registration_summary(result);

    LandmarkReport report =
        evaluate_landmarks(data.landmarks, result.transforms);
    save_report_csv((fs::path(dir) / "report.csv").string(), report);
    std::string text = format_report(report);
    std::FILE* f =
        std::fopen((fs::path(dir) / "report.txt").string().c_str(), "w");
    if (!f) throw std::runtime_error(dir + "/report.txt: cannot open");
    std::fputs(text.c_str(), f);
    std::fclose(f);
    std::fputs(text.c_str(), stdout);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<std::string> storage;
  storage.reserve(args.size() + 1);
  storage.push_back("groupreg");
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  argv.reserve(storage.size());
  for (std::string& s : storage) argv.push_back(s.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace groupreg
