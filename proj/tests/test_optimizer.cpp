#include "support.hpp"

namespace dreamphys::optimize {
namespace {

using guidance::Condition;
using guidance::Query;
using testing::Gen;

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorKind::Io;
}

// ---------------------------------------------------------------------------
// Groups and convergence

TEST(SplitGroups, EqualStrideExamples) {
  const auto g = split_groups(80, 5);
  ASSERT_EQ(g.size(), 5u);
  EXPECT_EQ(g[0], (std::vector<int>{1, 6, 11, 16, 21, 26, 31, 36, 41, 46, 51, 56, 61, 66, 71, 76}));
  EXPECT_EQ(g[4].back(), 80);
  EXPECT_EQ(split_groups(16, 1)[0].size(), 16u);
  EXPECT_EQ(split_groups(6, 3), (std::vector<std::vector<int>>{{1, 4}, {2, 5}, {3, 6}}));
  EXPECT_EQ(kind_of([] { split_groups(16, 5); }), ErrorKind::NotDivisible);
  EXPECT_EQ(kind_of([] { split_groups(10, 0); }), ErrorKind::Range);
}

TEST(SplitGroups, PartitionProperty) {
  Gen gen(401);
  for (int trial = 0; trial < 100; ++trial) {
    const int M = gen.integer(1, 8), T = gen.integer(1, 20), N = M * T;
    const auto g = split_groups(N, M);
    std::vector<int> seen(N + 1, 0);
    for (int i = 0; i < M; ++i) {
      ASSERT_EQ(static_cast<int>(g[i].size()), T);
      EXPECT_EQ(g[i][0], i + 1);
      for (int t = 0; t < T; ++t) {
        ++seen[g[i][t]];
        if (t > 0) EXPECT_EQ(g[i][t] - g[i][t - 1], M);
      }
    }
    for (int f = 1; f <= N; ++f) EXPECT_EQ(seen[f], 1);
  }
}

std::vector<double> log10_of_means(std::initializer_list<double> means) {
  std::vector<double> out;
  for (double m : means) out.push_back(std::log10(m));
  return out;
}

TEST(Convergence, OrderOfMagnitudeExamples) {
  EXPECT_TRUE(check_convergence(log10_of_means({5.2e5, 6.1e5, 4.8e5}), 3));
  EXPECT_FALSE(check_convergence(log10_of_means({9.9e5, 1.01e6, 1.02e6}), 3));
  EXPECT_TRUE(check_convergence(log10_of_means({3e3, 9.9e5, 1.01e6, 1.02e6, 2e6}), 3));
  EXPECT_FALSE(check_convergence(log10_of_means({5.2e5, 6.1e5}), 3));
  EXPECT_TRUE(check_convergence(log10_of_means({5.2e5, 6.1e5}), 2));
  EXPECT_FALSE(check_convergence(std::vector<double>{5.1, NAN, 5.2}, 3));
  EXPECT_FALSE(check_convergence(std::vector<double>{}, 3));
}

TEST(Convergence, WindowProperty) {
  Gen gen(402);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> h(gen.integer(0, 8));
    for (double& v : h) v = gen.uniform(3.5, 6.5);
    bool expect = h.size() >= 3;
    for (std::size_t i = h.size() >= 3 ? h.size() - 3 : 0; expect && i < h.size(); ++i) {
      expect = std::floor(h[i]) == std::floor(h.back());
    }
    EXPECT_EQ(check_convergence(h, 3), expect);
  }
}

TEST(Statistics, MeanLog10AndLog10Mean) {
  const std::vector<double> E{1e4, 1e6};
  EXPECT_NEAR(mean_log10<double>(E), 5.0, 1e-15);
  EXPECT_NEAR(log10_mean<double>(E), std::log10(505000.0), 1e-15);
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, FirstStepIsSignedLearningRate) {
  std::vector<double> p{1.0, -2.0, 0.5};
  const std::vector<double> g{0.3, -4.0, 0.0};
  Adam adam(3);
  AdamConfig c;
  c.lr = 0.1;
  adam.step(p, std::span<const double>(g), c);
  EXPECT_NEAR(p[0], 0.9, 1e-7);
  EXPECT_NEAR(p[1], -1.9, 1e-7);
  EXPECT_EQ(p[2], 0.5);
  EXPECT_EQ(adam.steps(), 1);
  std::vector<double> wrong(2);
  EXPECT_EQ(kind_of([&] { adam.step(wrong, std::span<const double>(g), c); }), ErrorKind::ShapeMismatch);
}

TEST(Adam, MatchesReferenceRecurrence) {
  Gen gen(403);
  std::vector<double> p(5), q;
  for (double& v : p) v = gen.normal();
  q = p;
  std::vector<double> m(5, 0.0), v(5, 0.0);
  Adam adam(5);
  const AdamConfig c;
  for (int t = 1; t <= 20; ++t) {
    std::vector<double> g(5);
    for (double& x : g) x = gen.normal();
    adam.step(p, std::span<const double>(g), c);
    for (int i = 0; i < 5; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      q[i] -= c.lr * (m[i] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + 1e-8);
    }
  }
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
}

// ---------------------------------------------------------------------------
// Trainer on a small pinned bar

struct Bench {
  Scene scene;
  SimConfig config;
  field::FieldShape shape;

  Bench() {
    std::mt19937_64 rng(404);
    config.grid_resolution = 16;
    config.dt = 2e-4;
    config.substeps_per_frame = 10;
    config.frame_count = 10;
    config.image_height = config.image_width = 16;
    config.camera_path = {CameraPose{Vec3d(0.5, 0.5, -0.4), Vec3d(0.5, 0.5, 0.5), Vec3d::UnitY(), 30.0}};
    scene = gradcheck::detail::lattice_scene(8, 3, 3, config.dx() / 2.0, Vec3d(0.5, 0.5, 0.5), rng);
    config.fixed_region = Aabb<double>{Vec3d(0.0, 0.0, 0.0), Vec3d(0.43, 1.0, 1.0)};
    shape.resolution = 8;
    shape.features = 4;
    shape.layer_dims = {4, 4, 1};
  }

  field::MaterialField<double> make_field(double target_log10) const {
    field::MaterialField<double> f(shape, scene.padded_bounds());
    f.initialize(9);
    std::vector<Vec3d> pts;
    for (const auto& k : scene.kernels) pts.push_back(k.center);
    f.update_normalization(pts, 1.0);
    f.bias_output(pts, 0, target_log10);
    return f;
  }

  /// Reference video and anchor rendered with a uniform modulus.
  std::pair<Video<double>, Image<double>> reference(Pipeline<double>& pipe, double young) const {
    const std::vector<double> E(scene.kernels.size(), young);
    return {pipe.render_all(pipe.simulate(E, false)), pipe.render_anchor()};
  }
};

OptimizerConfig small_config(int iterations) {
  OptimizerConfig c;
  c.max_iterations = iterations;
  c.seed = 11;
  c.adam.lr = 0.05;
  return c;
}

class RecordingDenoiser : public guidance::Denoiser<double> {
 public:
  explicit RecordingDenoiser(guidance::Denoiser<double>& inner) : inner_(inner) {}
  Video<double> denoise(const Video<double>& Vt, const Query& q, const Condition& c) override {
    return inner_.denoise(Vt, q, c);
  }
  Video<double> denoise_clean(const Video<double>& V, const Video<double>& eps, const Query& q,
                              const Condition& c) override {
    if (!q.anchor) groups.push_back(q.group);
    return inner_.denoise_clean(V, eps, q, c);
  }
  std::vector<int> groups;

 private:
  guidance::Denoiser<double>& inner_;
};

class NanDenoiser : public guidance::Denoiser<double> {
 public:
  Video<double> denoise(const Video<double>& Vt, const Query&, const Condition&) override {
    Video<double> out = Vt;
    for (auto& x : out.data) x = NAN;
    return out;
  }
};

TEST(AnalyticBackend, GroupsFollowTheSplit) {
  Video<double> ref(10, 2, 2);
  for (int t = 0; t < 10; ++t) {
    for (auto& x : ref.frame(t)) x = t + 1;
  }
  Image<double> anchor(2, 2);
  const auto backend = analytic_backend(ref, anchor, 5);
  ASSERT_EQ(backend.references().size(), 5u);
  EXPECT_EQ(backend.references()[2].frames, 2);
  EXPECT_EQ(backend.references()[2].frame(0)[0], 3.0);
  EXPECT_EQ(backend.references()[2].frame(1)[0], 8.0);
}

TEST(Pipeline, ModulusChangesTheRollout) {
  Bench b;
  Pipeline<double> pipe(b.scene, b.config);
  const auto soft = b.reference(pipe, 1e4).first;
  const auto stiff = b.reference(pipe, 1e7).first;
  EXPECT_GT(*std::max_element(soft.data.begin(), soft.data.end()), 0.1);
  double diff = 0.0;
  for (std::size_t i = 0; i < soft.data.size(); ++i) diff = std::max(diff, std::abs(soft.data[i] - stiff.data[i]));
  EXPECT_GT(diff, 1e-3);
}

TEST(Trainer, AveragedGradientIsMeanOfGroupGradients) {
  Bench b;
  Pipeline<double> pipe(b.scene, b.config);
  const auto [ref, anchor] = b.reference(pipe, 1e6);
  auto backend = analytic_backend(ref, anchor, 5);
  auto field = b.make_field(4.8);
  Trainer<double> trainer(pipe, field, backend, Condition::none(), small_config(1));
  std::mt19937_64 rng(3);
  const auto eps = guidance::gaussian_noise<double>(2, 16, 16, rng);
  const std::vector<int> all{0, 1, 2, 3, 4};
  const auto avg = trainer.gradient(all, 300, eps);
  std::vector<double> mean(avg.size(), 0.0);
  for (int g = 0; g < 5; ++g) {
    const std::vector<int> one{g};
    const auto gg = trainer.gradient(one, 300, eps);
    for (std::size_t i = 0; i < gg.size(); ++i) mean[i] += gg[i] / 5.0;
  }
  double scale = 0.0, err = 0.0;
  for (std::size_t i = 0; i < avg.size(); ++i) {
    scale = std::max(scale, std::abs(avg[i]));
    err = std::max(err, std::abs(avg[i] - mean[i]));
  }
  EXPECT_GT(scale, 0.0);
  EXPECT_LT(err, 1e-7 * scale);
}

TEST(Trainer, FixedPointConvergesAtThirdIteration) {
  Bench b;
  Pipeline<double> pipe(b.scene, b.config);
  auto field = b.make_field(5.5);
  std::vector<Vec3d> pts(pipe.rest_positions());
  const auto young = field.eval_young(pts);
  const auto ref = pipe.render_all(pipe.simulate(young, false));
  auto backend = analytic_backend(ref, pipe.render_anchor(), 5);
  Trainer<double> trainer(pipe, field, backend, Condition::none(), small_config(10));
  const auto res = trainer.run();
  EXPECT_TRUE(res.converged);
  EXPECT_EQ(res.iterations, 3);
  for (const auto& log : res.log) EXPECT_EQ(log.score_norm, 0.0);
  const double start = log10_mean<double>(young);
  for (double h : res.history) EXPECT_LT(std::abs(h - start), 1e-6);
}

TEST(Trainer, MovesTowardTheReference) {
  Bench b;
  Pipeline<double> pipe(b.scene, b.config);
  const auto [ref, anchor] = b.reference(pipe, 1e6);
  auto backend = analytic_backend(ref, anchor, 5);
  auto field = b.make_field(4.8);
  auto cfg = small_config(12);
  cfg.convergence_window = 20;
  Trainer<double> trainer(pipe, field, backend, Condition::none(), cfg);
  const auto res = trainer.run();
  ASSERT_EQ(res.iterations, 12);
  EXPECT_GT(res.log.back().mean_log10_E, res.log.front().mean_log10_E + 0.1);
}

TEST(Trainer, RunsAreDeterministic) {
  Bench b;
  auto run_once = [&] {
    Pipeline<double> pipe(b.scene, b.config);
    const auto [ref, anchor] = b.reference(pipe, 1e6);
    auto backend = analytic_backend(ref, anchor, 5);
    auto field = b.make_field(4.8);
    Trainer<double> trainer(pipe, field, backend, Condition::none(), small_config(2));
    auto res = trainer.run();
    return std::make_pair(res.history, field.params());
  };
  const auto a = run_once(), c = run_once();
  EXPECT_EQ(a.first, c.first);
  EXPECT_EQ(a.second, c.second);
}

TEST(Trainer, GroupSchedules) {
  Bench b;
  Pipeline<double> pipe(b.scene, b.config);
  const auto [ref, anchor] = b.reference(pipe, 1e6);
  auto inner = analytic_backend(ref, anchor, 5);
  {
    RecordingDenoiser backend(inner);
    auto field = b.make_field(4.8);
    Trainer<double> trainer(pipe, field, backend, Condition::none(), small_config(1));
    trainer.iterate();
    EXPECT_EQ(backend.groups, (std::vector<int>{0, 1, 2, 3, 4}));
  }
  {
    RecordingDenoiser backend(inner);
    auto field = b.make_field(4.8);
    auto cfg = small_config(7);
    cfg.schedule = GroupSchedule::Alternating;
    cfg.convergence_window = 10;
    Trainer<double> trainer(pipe, field, backend, Condition::none(), cfg);
    trainer.run();
    EXPECT_EQ(backend.groups, (std::vector<int>{0, 1, 2, 3, 4, 0, 1}));
  }
}

TEST(Trainer, NonFiniteGradientIsSkipped) {
  Bench b;
  Pipeline<double> pipe(b.scene, b.config);
  NanDenoiser backend;
  auto field = b.make_field(5.0);
  const auto before = field.params();
  auto cfg = small_config(1);
  cfg.normalization_blend = 0.0;
  Trainer<double> trainer(pipe, field, backend, Condition::none(), cfg);
  const auto log = trainer.iterate();
  EXPECT_TRUE(log.nonfinite_gradient);
  EXPECT_EQ(field.params(), before);
  ASSERT_EQ(trainer.events().size(), 1u);
}

TEST(Trainer, FrameCountMustSplitIntoGroups) {
  Bench b;
  b.config.frame_count = 12;
  Pipeline<double> pipe(b.scene, b.config);
  NanDenoiser backend;
  auto field = b.make_field(5.0);
  EXPECT_EQ(kind_of([&] { Trainer<double>(pipe, field, backend, Condition::none(), small_config(1)); }),
            ErrorKind::NotDivisible);
}

TEST(QuantizeVideo, EightBitLevels) {
  Video<double> v(1, 2, 2);
  Gen gen(405);
  for (auto& x : v.data) x = gen.uniform(-0.2, 1.2);
  quantize_video(v);
  for (double x : v.data) {
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 1.0);
    EXPECT_NEAR(x * 255.0, std::round(x * 255.0), 1e-9);
  }
}

}  // namespace
}  // namespace dreamphys::optimize
