#include <fstream>

#include "oracles.hpp"
#include "support.hpp"

namespace dreamphys::field {
namespace {

using testing::Gen;
using testing::ScratchDir;

using oracles::de_boor;

std::vector<double> dense_basis(double u, int G) {
  std::vector<double> out(G + 3, 0.0);
  const auto b = spline_basis(u, G);
  for (int q = 0; q < 4; ++q) out[b.first + q] = b.value[q];
  return out;
}

FieldShape small_shape() {
  FieldShape s;
  s.resolution = 6;
  s.features = 3;
  s.layer_dims = {3, 4, 1};
  return s;
}

const Aabb<double> kUnit{Vec3d::Zero(), Vec3d::Ones()};

MaterialField<double> random_field(std::uint64_t seed, const FieldShape& shape = small_shape()) {
  MaterialField<double> f(shape, kUnit);
  f.initialize(seed);
  Gen gen(seed);
  auto& p = f.mutable_params();
  for (std::size_t l = 0; l < shape.layers().size(); ++l) {
    const auto ls = shape.layers()[l];
    for (std::size_t i = 0; i < static_cast<std::size_t>(ls.in) * ls.out * shape.bases(); ++i) {
      p[f.coef_offset(static_cast<int>(l)) + i] = gen.uniform(-0.3, 0.3);
    }
  }
  return f;
}

std::vector<Vec3d> random_points(Gen& gen, int n, double lo = 0.0, double hi = 1.0) {
  std::vector<Vec3d> pts(n);
  for (auto& x : pts) x = gen.vec3(lo, hi);
  return pts;
}

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
// Spline basis

TEST(SplineBasis, MatchesDeBoorRecursionProperty) {
  Gen gen(201);
  for (int G : {1, 3, 5, 8}) {
    for (int trial = 0; trial < 200; ++trial) {
      const double u = trial == 0 ? -1.0 : trial == 1 ? 1.0 : gen.uniform(-1.0, 1.0);
      const auto dense = dense_basis(u, G);
      for (int m = 0; m < G + 3; ++m) EXPECT_NEAR(dense[m], de_boor(m, 3, u, G), 1e-10) << "G " << G << " u " << u;
    }
  }
}

TEST(SplineBasis, PartitionOfUnityAndSlopes) {
  Gen gen(202);
  for (int trial = 0; trial < 100; ++trial) {
    const double u = gen.uniform(-0.999, 0.999);
    const auto b = spline_basis(u, 5);
    EXPECT_NEAR(b.value[0] + b.value[1] + b.value[2] + b.value[3], 1.0, 1e-14);
    for (int q = 0; q < 4; ++q) {
      EXPECT_GE(b.value[q], 0.0);
      const int m = b.first + q;
      const double fd = (de_boor(m, 3, u + 1e-6, 5) - de_boor(m, 3, u - 1e-6, 5)) / 2e-6;
      EXPECT_NEAR(b.slope[q], fd, 1e-5);
    }
  }
}

TEST(SplineBasis, KnotGrid) {
  EXPECT_DOUBLE_EQ(knot(0, 5), -2.2);
  EXPECT_DOUBLE_EQ(knot(3, 5), -1.0);
  EXPECT_DOUBLE_EQ(knot(8, 5), 1.0);
  EXPECT_DOUBLE_EQ(knot(11, 5), 2.2);
}

TEST(Silu, ValuesAndSlope) {
  EXPECT_EQ(silu(0.0), 0.0);
  EXPECT_NEAR(silu(2.0), 2.0 / (1.0 + std::exp(-2.0)), 1e-15);
  for (double x : {-3.0, -0.5, 0.0, 0.7, 4.0}) {
    EXPECT_NEAR(silu_slope(x), (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6, 1e-8);
  }
}

// ---------------------------------------------------------------------------
// Layout and tri-plane

TEST(FieldShape, DefaultsAndValidation) {
  const FieldShape s;
  EXPECT_EQ(s.resolution, 32);
  EXPECT_EQ(s.features, 16);
  EXPECT_EQ(s.grid_size, 5);
  EXPECT_EQ(s.layer_dims, (std::vector<int>{16, 16, 1}));
  const MaterialField<double> f(s, kUnit);
  EXPECT_EQ(f.param_count(), 3u * 32 * 32 * 16 + (16u * 16 * 8 + 16 * 16) + (16u * 8 + 16));
  FieldShape bad = s;
  bad.layer_dims = {8, 1};
  EXPECT_EQ(kind_of([&] { MaterialField<double>(bad, kUnit); }), ErrorKind::ShapeMismatch);
  bad = s;
  bad.ranges.push_back({});
  EXPECT_EQ(kind_of([&] { MaterialField<double>(bad, kUnit); }), ErrorKind::ShapeMismatch);
}

TEST(Triplane, NodeValuesSumOverPlanes) {
  auto f = random_field(203);
  const int R = f.shape().resolution;
  Gen gen(204);
  for (int trial = 0; trial < 20; ++trial) {
    const int a = gen.integer(0, R - 1), b = gen.integer(0, R - 1), c = gen.integer(0, R - 1);
    const Vec3d x(a / double(R - 1), b / double(R - 1), c / double(R - 1));
    const auto feat = f.triplane_sample(x);
    for (int k = 0; k < f.shape().features; ++k) {
      const double expect = f.params()[f.plane_offset(0, a, b) + k] + f.params()[f.plane_offset(1, b, c) + k] +
                            f.params()[f.plane_offset(2, a, c) + k];
      EXPECT_NEAR(feat[k], expect, 1e-14);
    }
  }
}

TEST(Triplane, CellCenterAveragesFourCorners) {
  FieldShape s = small_shape();
  s.features = 1;
  s.layer_dims = {1, 1};
  MaterialField<double> f(s, kUnit);
  f.initialize(205);
  auto& p = f.mutable_params();
  std::fill(p.begin(), p.begin() + s.plane_params(), 0.0);
  const int R = s.resolution;
  p[f.plane_offset(0, 2, 3)] = 1.0;
  p[f.plane_offset(0, 3, 3)] = 2.0;
  p[f.plane_offset(0, 2, 4)] = 3.0;
  p[f.plane_offset(0, 3, 4)] = 6.0;
  const Vec3d x(2.5 / (R - 1), 3.5 / (R - 1), 0.0);
  EXPECT_NEAR(f.triplane_sample(x)[0], 3.0, 1e-14);
}

TEST(Triplane, ReproducesAffinePlanesProperty) {
  // Bilinear interpolation is exact for affine node values.
  FieldShape s = small_shape();
  MaterialField<double> f(s, kUnit);
  auto& p = f.mutable_params();
  const int R = s.resolution;
  static constexpr int axes[3][2] = {{0, 1}, {1, 2}, {0, 2}};
  Gen gen(206);
  double coef[3][3];
  for (auto& c : coef) {
    for (double& v : c) v = gen.uniform(-1, 1);
  }
  for (int pl = 0; pl < 3; ++pl) {
    for (int i = 0; i < R; ++i) {
      for (int j = 0; j < R; ++j) {
        for (int k = 0; k < s.features; ++k) {
          p[f.plane_offset(pl, i, j) + k] =
              (k + 1) * (coef[pl][0] + coef[pl][1] * i / (R - 1.0) + coef[pl][2] * j / (R - 1.0));
        }
      }
    }
  }
  for (int trial = 0; trial < 50; ++trial) {
    const Vec3d x = gen.vec3(0, 1);
    const auto feat = f.triplane_sample(x);
    double expect = 0.0;
    for (int pl = 0; pl < 3; ++pl) expect += coef[pl][0] + coef[pl][1] * x[axes[pl][0]] + coef[pl][2] * x[axes[pl][1]];
    for (int k = 0; k < s.features; ++k) EXPECT_NEAR(feat[k], (k + 1) * expect, 1e-12);
  }
}

TEST(Triplane, BoundsAreEnforced) {
  const auto f = random_field(207);
  EXPECT_EQ(kind_of([&] { f.triplane_sample(Vec3d(0.5, 1.2, 0.5)); }), ErrorKind::OutOfBounds);
  EXPECT_NO_THROW(f.triplane_sample(Vec3d(0.0, 1.0, 1.0)));
}

// ---------------------------------------------------------------------------
// KAN

TEST(Kan, LayerMatchesDirectFormula) {
  auto f = random_field(208);
  Gen gen(209);
  const auto ls = f.shape().layers()[0];
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> u(ls.in);
    for (double& v : u) v = gen.uniform(-1, 1);
    const auto v = f.kan_eval(0, u);
    const auto expect = oracles::kan_layer(f, 0, u);
    for (int j = 0; j < ls.out; ++j) EXPECT_NEAR(v[j], expect[j], 1e-12);
  }
}

TEST(Kan, SquashIsMonotoneWithinRange) {
  const auto f = random_field(210);
  double prev = -1.0;
  for (double raw = -40.0; raw <= 40.0; raw += 0.25) {
    const double y = f.squash(0, raw);
    EXPECT_GT(y, 4.0 - 1e-12);
    EXPECT_LT(y, 8.0 + 1e-12);
    EXPECT_GE(y, prev);
    prev = y;
  }
  EXPECT_NEAR(f.squash(0, 0.0), 6.0, 1e-15);
}

TEST(Kan, YoungIsPowerOfTenOfLog10) {
  const auto f = random_field(211);
  Gen gen(212);
  const auto pts = random_points(gen, 20);
  const auto lg = f.eval_log10(pts);
  const auto E = f.eval_young(pts);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    EXPECT_NEAR(E[i] / std::pow(10.0, lg[i]), 1.0, 1e-12);
    EXPECT_GT(lg[i], 4.0);
    EXPECT_LT(lg[i], 8.0);
  }
}

// ---------------------------------------------------------------------------
// Gradients

TEST(FieldBackward, SuitePassesInBothPrecisions) {
  gradcheck::Options opt;
  EXPECT_LT(gradcheck::field_suite<double>(opt).max_rel_error(), 1e-4);
  opt.fp64 = false;
  EXPECT_LT(gradcheck::field_suite<float>(opt).max_rel_error(), 1e-2);
}

TEST(FieldBackward, YoungGradientMatchesFiniteDifference) {
  auto f = random_field(213);
  Gen gen(214);
  const auto pts = random_points(gen, 12, 0.1, 0.9);
  f.update_normalization(pts, 1.0);
  for (int l = 0; l < 2; ++l) {
    for (auto& s : f.norm_scale(l)) s *= 0.9;
    for (auto& s : f.norm_shift(l)) s *= 0.9;
  }
  std::vector<double> w(pts.size());
  for (double& v : w) v = gen.uniform(-1, 1) * 1e-6;
  MaterialField<double>::Record rec;
  const auto E = f.eval_young(pts, &rec);
  std::vector<double> grad(f.param_count(), 0.0);
  f.backward_young(rec, E, w, grad);
  gradcheck::Tally tally;
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t idx = trial < 20 ? static_cast<std::size_t>(gen.integer(0, int(f.param_count()) - 1))
                                       : f.coef_offset(trial % 2) + static_cast<std::size_t>(gen.integer(0, 40));
    auto L = [&](double h) {
      auto g = f;
      g.mutable_params()[idx] += h;
      const auto e = g.eval_young(pts);
      double s = 0.0;
      for (std::size_t i = 0; i < pts.size(); ++i) s += w[i] * e[i];
      return s;
    };
    tally.add(grad[idx], gradcheck::central_difference(L, 1e-6));
  }
  EXPECT_LT(tally.max_rel_error(), 1e-4);
}

TEST(FieldBackward, PlaneGradientIsLocal) {
  auto f = random_field(215);
  const Vec3d x(0.31, 0.52, 0.77);
  MaterialField<double>::Record rec;
  std::vector<Vec3d> pts{x};
  f.eval_log10(pts, &rec);
  std::vector<double> one{1.0}, grad(f.param_count(), 0.0);
  f.backward_log10(rec, one, grad);
  std::array<int, 6> cells;
  std::vector<double> feat(f.shape().features);
  f.triplane_sample(x, feat.data(), &cells);
  std::vector<bool> touched(f.shape().plane_params(), false);
  for (int pl = 0; pl < 3; ++pl) {
    for (int di = 0; di < 2; ++di) {
      for (int dj = 0; dj < 2; ++dj) {
        const std::size_t off = f.plane_offset(pl, cells[2 * pl] + di, cells[2 * pl + 1] + dj);
        for (int k = 0; k < f.shape().features; ++k) touched[off + k] = true;
      }
    }
  }
  int nonzero = 0;
  for (std::size_t i = 0; i < f.shape().plane_params(); ++i) {
    if (!touched[i]) EXPECT_EQ(grad[i], 0.0) << i;
    nonzero += grad[i] != 0.0;
  }
  EXPECT_GT(nonzero, 0);
}

TEST(FieldBackward, StaleRecordIsDetected) {
  auto f = random_field(216);
  Gen gen(217);
  const auto pts = random_points(gen, 4);
  MaterialField<double>::Record rec;
  f.eval_log10(pts, &rec);
  std::vector<double> g(pts.size(), 1.0), grad(f.param_count(), 0.0);
  f.mutable_params()[0] += 0.1;
  EXPECT_EQ(kind_of([&] { f.backward_log10(rec, g, grad); }), ErrorKind::StaleRecord);
  f.eval_log10(pts, &rec);
  f.update_normalization(pts, 0.5);
  EXPECT_EQ(kind_of([&] { f.backward_log10(rec, g, grad); }), ErrorKind::StaleRecord);
  f.eval_log10(pts, &rec);
  std::vector<double> short_grad(3, 0.0);
  EXPECT_EQ(kind_of([&] { f.backward_log10(rec, g, short_grad); }), ErrorKind::ShapeMismatch);
}

// ---------------------------------------------------------------------------
// Normalization, bias, precision, checkpoint

TEST(Normalization, FullBlendMapsInputsOntoUnitInterval) {
  auto f = random_field(218);
  Gen gen(219);
  const auto pts = random_points(gen, 50);
  f.update_normalization(pts, 1.0);
  MaterialField<double>::Record rec;
  f.raw_outputs(pts, &rec);
  for (std::size_t l = 0; l < 2; ++l) {
    const int in = f.shape().layers()[l].in;
    for (int i = 0; i < in; ++i) {
      double lo = 1e9, hi = -1e9;
      for (std::size_t p = 0; p < pts.size(); ++p) {
        const double u = f.norm_scale(int(l))[i] * rec.inputs[l][p * in + i] + f.norm_shift(int(l))[i];
        lo = std::min(lo, u);
        hi = std::max(hi, u);
      }
      // Layer 1 inputs move when layer 0 normalization changes within the same call.
      if (l == 0) {
        EXPECT_NEAR(lo, -1.0, 1e-9);
        EXPECT_NEAR(hi, 1.0, 1e-9);
      } else {
        EXPECT_GE(lo, -1.0 - 1e-9);
        EXPECT_LE(hi, 1.0 + 1e-9);
      }
    }
  }
}

TEST(Normalization, PartialBlendInterpolates) {
  auto a = random_field(220), b = random_field(220);
  Gen gen(221);
  const auto pts = random_points(gen, 30);
  a.update_normalization(pts, 1.0);
  b.update_normalization(pts, 0.25);
  for (std::size_t i = 0; i < a.norm_scale(0).size(); ++i) {
    EXPECT_NEAR(b.norm_scale(0)[i], 0.25 * a.norm_scale(0)[i] + 0.75, 1e-12);
    EXPECT_NEAR(b.norm_shift(0)[i], 0.25 * a.norm_shift(0)[i], 1e-12);
  }
}

TEST(Bias, MeanRawLandsOnTarget) {
  Gen gen(222);
  for (double target : {4.5, 6.0, 7.5}) {
    auto f = random_field(223);
    const auto pts = random_points(gen, 40);
    f.update_normalization(pts, 1.0);
    f.bias_output(pts, 0, target);
    const auto raw = f.raw_outputs(pts);
    double mean = 0.0;
    for (double r : raw) mean += r;
    mean /= raw.size();
    EXPECT_NEAR(f.squash(0, mean), target, 1e-9);
  }
  auto f = random_field(224);
  const auto pts = random_points(gen, 5);
  EXPECT_EQ(kind_of([&] { f.bias_output(pts, 0, 8.5); }), ErrorKind::Range);
}

TEST(Precision, CastPreservesEvaluation) {
  auto f = random_field(225);
  Gen gen(226);
  const auto pts = random_points(gen, 20);
  f.update_normalization(pts, 1.0);
  const auto g = f.cast<float>().cast<double>();
  const auto a = f.eval_log10(pts), b = g.eval_log10(pts);
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-4);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ScratchDir dir("ckpt");
  Gen gen(227);
  const auto pts = random_points(gen, 25);
  auto f = random_field(228).cast<float>();
  f.update_normalization(pts, 1.0);
  save_checkpoint(dir / "f.dpmf", f);
  const auto g = load_checkpoint<float>(dir / "f.dpmf");
  EXPECT_EQ(g.params(), f.params());
  EXPECT_EQ(g.shape().layer_dims, f.shape().layer_dims);
  EXPECT_EQ(g.bounds().min, f.bounds().min);
  EXPECT_EQ(g.bounds().max, f.bounds().max);
  for (int l = 0; l < 2; ++l) {
    EXPECT_EQ(g.norm_scale(l), f.norm_scale(l));
    EXPECT_EQ(g.norm_shift(l), f.norm_shift(l));
  }
  EXPECT_EQ(g.eval_log10(pts), f.eval_log10(pts));

  std::ifstream in(dir / "f.dpmf", std::ios::binary);
  char magic[5]{};
  in.read(magic, 4);
  EXPECT_STREQ(magic, "DPMF");
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  ScratchDir dir("ckpt_bad");
  EXPECT_EQ(kind_of([&] { load_checkpoint<double>(dir / "missing"); }), ErrorKind::Io);
  {
    std::ofstream out(dir / "magic", std::ios::binary);
    out << "XXXX0000";
  }
  EXPECT_EQ(kind_of([&] { load_checkpoint<double>(dir / "magic"); }), ErrorKind::Io);
  save_checkpoint(dir / "ok", random_field(229));
  std::filesystem::resize_file(dir / "ok", std::filesystem::file_size(dir / "ok") - 7);
  EXPECT_EQ(kind_of([&] { load_checkpoint<double>(dir / "ok"); }), ErrorKind::Io);
}

}  // namespace
}  // namespace dreamphys::field
