// dreamphys command-line tool: simulate, optimize, gradcheck, recover and
// helpers for scenes, fields and protocol fixtures.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "dreamphys/dreamphys.hpp"

namespace fs = std::filesystem;
using namespace dreamphys;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitTransport = 4;
constexpr int kExitNotConverged = 5;

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::Schema:
    case ErrorKind::Range:
    case ErrorKind::NotDivisible:
    case ErrorKind::OutOfGrid:
    case ErrorKind::OutOfBounds:
      return kExitConfig;
    case ErrorKind::Io:
    case ErrorKind::MalformedPly:
    case ErrorKind::EmptyScene:
      return kExitIo;
    case ErrorKind::Transport:
    case ErrorKind::Protocol:
      return kExitTransport;
    default:
      return kExitFailure;
  }
}

int thread_count(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("DREAMPHYS_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return default_thread_count();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) raise(ErrorKind::Io, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json iteration_json(const optimize::IterationLog& l) {
  return {{"k", l.k},
          {"mean_log10_E", l.mean_log10_E},
          {"log10_mean_E", l.log10_mean_E},
          {"score_norm", l.score_norm},
          {"wall_ms", l.wall_ms},
          {"timestep", l.timestep},
          {"nonfinite_gradient", l.nonfinite_gradient}};
}

optimize::GroupSchedule parse_schedule(const std::string& s) {
  if (s == "averaged") return optimize::GroupSchedule::Averaged;
  if (s == "alternating") return optimize::GroupSchedule::Alternating;
  raise(ErrorKind::Schema, "schedule must be averaged or alternating");
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string scene, config, out, params;
  double young = 1e6;
  int threads = 0;
  bool deterministic = false;
};

int cmd_simulate(const SimulateArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const SimConfig cfg = load_config(a.config);
  const Scene scene = load_ply(a.scene);
  const auto mode = a.deterministic ? mpm::ReductionMode::Deterministic : mpm::ReductionMode::Fast;
  optimize::Pipeline<float> pipe(scene, cfg, thread_count(a.threads), mode);
  std::vector<float> young(scene.kernels.size(), static_cast<float>(a.young));
  if (!a.params.empty()) {
    const auto field = field::load_checkpoint<float>(a.params);
    young = field.eval_young(pipe.rest_positions());
  } else if (!(a.young > 0.0)) {
    raise(ErrorKind::Range, "--young must be > 0");
  }
  const auto t_sim = std::chrono::steady_clock::now();
  const auto rollout = pipe.simulate(young, false);
  const double sim_s = seconds_since(t_sim);
  const render::Video<float> video = pipe.render_all(rollout);
  image_io::write_frames(fs::path(a.out) / "frames", video);

  json manifest = {{"command", "simulate"},
                   {"scene", a.scene},
                   {"config", config_to_json(cfg)},
                   {"params", a.params.empty() ? json(nullptr) : json(a.params)},
                   {"young", a.params.empty() ? json(a.young) : json(nullptr)},
                   {"mean_log10_E", optimize::mean_log10<float>(young)},
                   {"frames", video.frames},
                   {"deterministic", a.deterministic},
                   {"engine_stats",
                    {{"substeps", pipe.engine().stats().substeps},
                     {"degenerate_f", pipe.engine().stats().degenerate_f},
                     {"clamped_positions", pipe.engine().stats().clamped_positions},
                     {"nonfinite", pipe.engine().stats().nonfinite}}},
                   {"timings", {{"simulate_s", sim_s}, {"total_s", seconds_since(t0)}}}};
  write_json(fs::path(a.out) / "manifest.json", manifest);
  std::printf("wrote %d frames to %s\n", video.frames, (fs::path(a.out) / "frames").string().c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct OptimizeArgs {
  std::string scene, config, out, oracle = "analytic", reference, endpoint, text, image, init;
  double cfg_scale = 100.0;
  double init_log10 = 0.0;
  std::uint64_t seed = 0;
  bool deterministic = false;
  int threads = 0;
  int groups = 5;
  int max_iterations = 60;
  double lr = 1e-2;
  std::string schedule = "averaged";
};

int cmd_optimize(const OptimizeArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const SimConfig cfg = load_config(a.config);
  const Scene scene = load_ply(a.scene);
  optimize::OptimizerConfig oc;
  oc.groups = a.groups;
  oc.max_iterations = a.max_iterations;
  oc.adam.lr = a.lr;
  oc.seed = a.seed;
  oc.deterministic = a.deterministic;
  oc.threads = thread_count(a.threads);
  oc.schedule = parse_schedule(a.schedule);
  optimize::split_groups(cfg.frame_count, oc.groups);

  const auto mode = a.deterministic ? mpm::ReductionMode::Deterministic : mpm::ReductionMode::Fast;
  optimize::Pipeline<float> pipe(scene, cfg, oc.threads, mode);

  std::unique_ptr<guidance::Denoiser<float>> backend;
  guidance::Condition cond;
  if (a.oracle == "analytic") {
    if (a.reference.empty()) raise(ErrorKind::Schema, "--oracle analytic requires --reference");
    const auto ref = image_io::read_frames(a.reference);
    if (ref.frames != cfg.frame_count && ref.frames != cfg.frame_count + 1) {
      raise(ErrorKind::ShapeMismatch, "reference has " + std::to_string(ref.frames) + " frames, config needs " +
                                          std::to_string(cfg.frame_count));
    }
    if (ref.height != cfg.image_height || ref.width != cfg.image_width) {
      raise(ErrorKind::ShapeMismatch, "reference frame size differs from the config");
    }
    // An extra leading frame is taken as the rest-state anchor.
    render::Video<float> motion(cfg.frame_count, ref.height, ref.width);
    const int skip = ref.frames - cfg.frame_count;
    for (int t = 0; t < cfg.frame_count; ++t) motion.set_frame(t, ref.image(t + skip));
    render::Image<float> anchor = skip ? ref.image(0) : pipe.render_anchor();
    for (auto& x : anchor.data) x = image_io::quantize(x);
    backend = std::make_unique<guidance::AnalyticDenoiser<float>>(
        optimize::analytic_backend(motion, anchor, oc.groups));
    oc.quantize_render = true;
  } else if (a.oracle == "remote") {
    if (a.endpoint.empty()) raise(ErrorKind::Schema, "--oracle remote requires --endpoint");
    if (a.text.empty() == a.image.empty()) raise(ErrorKind::Schema, "--oracle remote requires one of --text or --image");
    cond = a.text.empty() ? guidance::Condition::from_image(image_io::read_png(a.image))
                          : guidance::Condition::from_text(a.text);
    backend = std::make_unique<protocol::RemoteDenoiser<float>>(a.endpoint, a.cfg_scale);
  } else {
    raise(ErrorKind::Schema, "--oracle must be analytic or remote");
  }

  field::MaterialField<float> field(field::FieldShape{}, scene.padded_bounds());
  if (!a.init.empty()) {
    field = field::load_checkpoint<float>(a.init);
  } else {
    field.initialize(a.seed);
    field.update_normalization(pipe.rest_positions(), 1.0);
    if (a.init_log10 != 0.0) field.bias_output(pipe.rest_positions(), 0, a.init_log10);
  }

  const fs::path out(a.out);
  fs::create_directories(out);
  std::ofstream log(out / "log.jsonl");
  if (!log) raise(ErrorKind::Io, "cannot write " + (out / "log.jsonl").string());
  optimize::Trainer<float> trainer(pipe, field, *backend, cond, oc);
  const auto res = trainer.run([&](const optimize::IterationLog& l) {
    log << iteration_json(l).dump() << "\n" << std::flush;
    std::printf("iter %3d  mean log10 E %.4f  score %.4g  %.1f s\n", l.k, l.mean_log10_E, l.score_norm,
                l.wall_ms / 1000.0);
  });

  field::save_checkpoint(out / "field.dpmf", field);
  const auto final_rollout = pipe.simulate(field.eval_young(pipe.rest_positions()), false);
  image_io::write_frames(out / "frames", pipe.render_all(final_rollout), 1);

  json manifest = {{"command", "optimize"},
                   {"scene", a.scene},
                   {"config", config_to_json(cfg)},
                   {"oracle", a.oracle},
                   {"cfg", a.cfg_scale},
                   {"seed", a.seed},
                   {"deterministic", a.deterministic},
                   {"groups", oc.groups},
                   {"schedule", a.schedule},
                   {"lr", oc.adam.lr},
                   {"max_iterations", oc.max_iterations},
                   {"converged", res.converged},
                   {"iterations", res.iterations},
                   {"history_log10_mean_E", res.history},
                   {"final_mean_log10_E", optimize::mean_log10<double>(res.final_young)},
                   {"events", res.events},
                   {"timings", {{"optimize_s", res.total_ms / 1000.0}, {"total_s", seconds_since(t0)}}}};
  write_json(out / "manifest.json", manifest);
  std::printf("%s after %d iterations, mean log10 E %.4f\n", res.converged ? "converged" : "not converged",
              res.iterations, optimize::mean_log10<double>(res.final_young));
  return res.converged ? kExitOk : kExitNotConverged;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::uint64_t seed = 7;
  bool fp64 = false;
  bool sign_flip = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  gradcheck::Options o;
  o.seed = a.seed;
  o.fp64 = a.fp64;
  o.sign_flip_fault = a.sign_flip;
  const auto results = gradcheck::run(o);
  std::printf("%-16s %12s %10s %7s %9s  %s\n", "suite", "max_rel_err", "tolerance", "probes", "seconds", "result");
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-16s %12.3e %10.0e %7d %9.3f  %s\n", r.name.c_str(), r.max_rel_error, r.tolerance, r.probes,
                r.seconds, r.pass ? "PASS" : "FAIL");
    ok = ok && r.pass;
  }
  return ok ? kExitOk : kExitFailure;
}

// ---------------------------------------------------------------------------

struct RecoverArgs {
  std::string scene = "cantilever", bias = "low", out, schedule = "averaged";
  double true_young = 1e6;
  std::uint64_t seed = 0;
  int groups = 5;
  int frames_per_group = 16;
  int max_iterations = 60;
  double lr = scenarios::RecoveryOptions{}.optimizer.adam.lr;
  int threads = 0;
  bool deterministic = false;
};

int cmd_recover(const RecoverArgs& a) {
  scenarios::RecoveryOptions o;
  o.scene = a.scene;
  o.true_young = a.true_young;
  if (a.bias != "low" && a.bias != "high") raise(ErrorKind::Schema, "--init-bias must be low or high");
  o.bias = a.bias == "low" ? scenarios::InitBias::Low : scenarios::InitBias::High;
  o.frames_per_group = a.frames_per_group;
  o.optimizer.groups = a.groups;
  o.optimizer.max_iterations = a.max_iterations;
  o.optimizer.adam.lr = a.lr;
  o.optimizer.seed = a.seed;
  o.optimizer.deterministic = a.deterministic;
  o.optimizer.threads = thread_count(a.threads);
  o.optimizer.schedule = parse_schedule(a.schedule);

  std::unique_ptr<std::ofstream> log;
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    log = std::make_unique<std::ofstream>(fs::path(a.out) / "log.jsonl");
  }
  field::MaterialField<float> field(o.field_shape, Aabb<double>{Vec3d::Zero(), Vec3d::Ones()});
  const auto r = scenarios::run_recovery(
      o,
      [&](const optimize::IterationLog& l) {
        if (log) *log << iteration_json(l).dump() << "\n" << std::flush;
        std::printf("iter %3d  mean log10 E %.4f  score %.4g  %.1f s\n", l.k, l.mean_log10_E, l.score_norm,
                    l.wall_ms / 1000.0);
        std::fflush(stdout);
      },
      &field);
  std::printf("recovered mean log10 E %.4f (true %.4f), |error| %.4f\n", r.recovered_log10, std::log10(a.true_young),
              r.abs_error);
  std::printf("PSNR mean %.2f dB, min %.2f dB; %d iterations, %s; %.1f s\n", r.psnr_mean, r.psnr_min,
              r.opt.iterations, r.opt.converged ? "converged" : "not converged", r.opt.total_ms / 1000.0);
  if (!a.out.empty()) {
    field::save_checkpoint(fs::path(a.out) / "field.dpmf", field);
    json manifest = {{"command", "recover"},
                     {"scene", a.scene},
                     {"true_young", a.true_young},
                     {"init_bias", a.bias},
                     {"seed", a.seed},
                     {"groups", a.groups},
                     {"frames_per_group", a.frames_per_group},
                     {"schedule", a.schedule},
                     {"lr", a.lr},
                     {"deterministic", a.deterministic},
                     {"recovered_mean_log10_E", r.recovered_log10},
                     {"abs_error", r.abs_error},
                     {"psnr_mean", r.psnr_mean},
                     {"psnr_min", r.psnr_min},
                     {"iterations", r.opt.iterations},
                     {"converged", r.opt.converged},
                     {"history_log10_mean_E", r.opt.history},
                     {"total_s", r.opt.total_ms / 1000.0}};
    write_json(fs::path(a.out) / "manifest.json", manifest);
  }
  return r.recovered && r.opt.converged ? kExitOk : kExitNotConverged;
}

// ---------------------------------------------------------------------------

int cmd_scene(const std::string& name, int frames, const std::string& out) {
  const auto setup = scenarios::by_name(name, frames);
  fs::create_directories(out);
  save_ply(fs::path(out) / "scene.ply", setup.scene);
  write_json(fs::path(out) / "config.json", config_to_json(setup.config));
  std::printf("wrote %s/scene.ply (%zu kernels) and config.json\n", out.c_str(), setup.scene.kernels.size());
  return kExitOk;
}

int cmd_init_field(const std::string& scene_path, const std::string& out, std::uint64_t seed, double log10) {
  const Scene scene = load_ply(scene_path);
  field::MaterialField<float> field(field::FieldShape{}, scene.padded_bounds());
  field.initialize(seed);
  std::vector<Vec3d> pts;
  for (const auto& k : scene.kernels) pts.push_back(k.center);
  field.update_normalization(pts, 1.0);
  field.bias_output(pts, 0, log10);
  field::save_checkpoint(out, field);
  std::printf("wrote %s, mean log10 E %.4f\n", out.c_str(), optimize::mean_log10<float>(field.eval_young(pts)));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Physical parameter estimation for Gaussian-splat scenes"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "Simulate a scene and write PNG frames");
  s->add_option("--scene", sim.scene, "Gaussian splat PLY")->required()->check(CLI::ExistingFile);
  s->add_option("--config", sim.config, "Simulation config JSON")->required()->check(CLI::ExistingFile);
  s->add_option("--out", sim.out, "Output directory")->required();
  s->add_option("--params", sim.params, "Material field checkpoint");
  s->add_option("--young", sim.young, "Constant Young's modulus in Pa when no checkpoint is given");
  s->add_option("--threads", sim.threads, "Worker threads (default: DREAMPHYS_THREADS or hardware)");
  s->add_flag("--deterministic", sim.deterministic, "Deterministic reductions");

  OptimizeArgs opt;
  auto* o = app.add_subcommand("optimize", "Estimate Young's modulus from video guidance");
  o->add_option("--scene", opt.scene, "Gaussian splat PLY")->required()->check(CLI::ExistingFile);
  o->add_option("--config", opt.config, "Simulation config JSON")->required()->check(CLI::ExistingFile);
  o->add_option("--out", opt.out, "Output directory")->required();
  o->add_option("--oracle", opt.oracle, "analytic or remote")->check(CLI::IsMember({"analytic", "remote"}));
  o->add_option("--reference", opt.reference, "Directory of reference PNG frames (analytic oracle)");
  o->add_option("--endpoint", opt.endpoint, "Denoiser server URL (remote oracle)");
  o->add_option("--text", opt.text, "Text condition");
  o->add_option("--image", opt.image, "Image condition PNG");
  o->add_option("--cfg", opt.cfg_scale, "Classifier-free guidance scale");
  o->add_option("--seed", opt.seed, "Random seed");
  o->add_flag("--deterministic", opt.deterministic, "Deterministic reductions");
  o->add_option("--threads", opt.threads, "Worker threads");
  o->add_option("--groups", opt.groups, "Frame-boosting group count M");
  o->add_option("--max-iterations", opt.max_iterations, "Iteration cap");
  o->add_option("--lr", opt.lr, "Adam learning rate");
  o->add_option("--schedule", opt.schedule, "averaged or alternating");
  o->add_option("--init", opt.init, "Initial material field checkpoint");
  o->add_option("--init-log10", opt.init_log10, "Bias a fresh field to this mean log10 E");

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
  g->add_option("--seed", gc.seed, "Random seed");
  g->add_flag("--fp64", gc.fp64, "Analytic gradients in double precision");
  g->add_flag("--inject-sign-flip", gc.sign_flip)->group("");

  RecoverArgs rec;
  auto* r = app.add_subcommand("recover", "Closed-loop Young's modulus recovery on a synthetic scene");
  r->add_option("--scene", rec.scene, "cantilever or dropball")->check(CLI::IsMember({"cantilever", "dropball"}));
  r->add_option("--true-young", rec.true_young, "Ground-truth Young's modulus in Pa");
  r->add_option("--init-bias", rec.bias, "low or high")->check(CLI::IsMember({"low", "high"}));
  r->add_option("--seed", rec.seed, "Random seed");
  r->add_option("--groups", rec.groups, "Frame-boosting group count M");
  r->add_option("--frames-per-group", rec.frames_per_group, "Frames per group T");
  r->add_option("--max-iterations", rec.max_iterations, "Iteration cap");
  r->add_option("--lr", rec.lr, "Adam learning rate");
  r->add_option("--schedule", rec.schedule, "averaged or alternating");
  r->add_option("--threads", rec.threads, "Worker threads");
  r->add_flag("--deterministic", rec.deterministic, "Deterministic reductions");
  r->add_option("--out", rec.out, "Optional output directory for log, checkpoint and manifest");

  std::string scene_name, scene_out;
  int scene_frames = 80;
  auto* sc = app.add_subcommand("scene", "Write a built-in scene as PLY plus config");
  sc->add_option("--name", scene_name, "cantilever or dropball")->required();
  sc->add_option("--frames", scene_frames, "Frame count");
  sc->add_option("--out", scene_out, "Output directory")->required();

  std::string init_scene, init_out;
  std::uint64_t init_seed = 0;
  double init_log10 = 6.0;
  auto* fi = app.add_subcommand("init-field", "Write a freshly initialized material field checkpoint");
  fi->add_option("--scene", init_scene, "Gaussian splat PLY")->required()->check(CLI::ExistingFile);
  fi->add_option("--out", init_out, "Checkpoint path")->required();
  fi->add_option("--seed", init_seed, "Random seed");
  fi->add_option("--log10", init_log10, "Target mean log10 E");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*s) return cmd_simulate(sim);
    if (*o) return cmd_optimize(opt);
    if (*g) return cmd_gradcheck(gc);
    if (*r) return cmd_recover(rec);
    if (*sc) return cmd_scene(scene_name, scene_frames, scene_out);
    if (*fi) return cmd_init_field(init_scene, init_out, init_seed, init_log10);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
