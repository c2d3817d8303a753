#pragma once

// Material field: tri-plane features summed across the XY, YZ and XZ planes,
// fed through KAN layers (cubic B-spline edges plus an x*sigmoid(x) base),
// squashed into a log10 range per output.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dreamphys/error.hpp"
#include "dreamphys/math.hpp"

namespace dreamphys::field {

inline constexpr int kSplineOrder = 3;

// ---------------------------------------------------------------------------
// Cubic B-spline basis on a uniform extended knot grid over [-1, 1]

/// The four nonzero bases at u: indices first..first+3 of the G+3 bases.
template <typename Real>
struct SplineBasis {
  int first = 0;
  Real value[4]{};
  Real slope[4]{};  // d/du
};

/// Knot m of the extended grid: -1 + (m - 3) * 2/G, m = 0..G+6.
inline double knot(int m, int grid_size) { return -1.0 + (m - kSplineOrder) * 2.0 / grid_size; }

template <typename Real>
SplineBasis<Real> spline_basis(Real u, int grid_size) {
  const Real h = Real(2) / Real(grid_size);
  int cell = static_cast<int>(std::floor((u + Real(1)) / h));
  cell = std::clamp(cell, 0, grid_size - 1);
  const Real t = (u + Real(1)) / h - Real(cell);
  const Real s = Real(1) - t;
  SplineBasis<Real> b;
  b.first = cell;
  b.value[0] = s * s * s / Real(6);
  b.value[1] = (Real(3) * t * t * t - Real(6) * t * t + Real(4)) / Real(6);
  b.value[2] = (Real(-3) * t * t * t + Real(3) * t * t + Real(3) * t + Real(1)) / Real(6);
  b.value[3] = t * t * t / Real(6);
  b.slope[0] = -s * s / (Real(2) * h);
  b.slope[1] = (Real(3) * t * t - Real(4) * t) / (Real(2) * h);
  b.slope[2] = (Real(-3) * t * t + Real(2) * t + Real(1)) / (Real(2) * h);
  b.slope[3] = t * t / (Real(2) * h);
  return b;
}

/// Base activation b(x) = x * sigmoid(x) and its derivative.
template <typename Real>
Real silu(Real x) {
  return x * sigmoid(x);
}
template <typename Real>
Real silu_slope(Real x) {
  const Real s = sigmoid(x);
  return s * (Real(1) + x * (Real(1) - s));
}

// ---------------------------------------------------------------------------
// Layout

struct LayerShape {
  int in = 0;
  int out = 0;
};

struct OutputRange {
  double lo = 4.0;  // log10 units
  double hi = 8.0;
};

struct FieldShape {
  int resolution = 32;
  int features = 16;
  int grid_size = 5;
  std::vector<int> layer_dims{16, 16, 1};
  std::vector<OutputRange> ranges{OutputRange{}};

  int bases() const { return grid_size + kSplineOrder; }
  std::size_t plane_params() const {
    return 3 * static_cast<std::size_t>(resolution) * resolution * features;
  }
  std::vector<LayerShape> layers() const {
    std::vector<LayerShape> out;
    for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) out.push_back({layer_dims[l], layer_dims[l + 1]});
    return out;
  }
  void validate() const {
    if (resolution < 2) raise(ErrorKind::Range, "tri-plane resolution must be >= 2");
    if (features < 1 || grid_size < 1) raise(ErrorKind::Range, "feature width and grid size must be >= 1");
    if (layer_dims.size() < 2 || layer_dims.front() != features) {
      raise(ErrorKind::ShapeMismatch, "first KAN layer width must equal the feature width");
    }
    for (int d : layer_dims) {
      if (d < 1) raise(ErrorKind::Range, "layer widths must be >= 1");
    }
    if (static_cast<int>(ranges.size()) != layer_dims.back()) {
      raise(ErrorKind::ShapeMismatch, "one output range per field output required");
    }
  }
};

// ---------------------------------------------------------------------------
// Field

/// Trainable parameters live in one flat vector: the three planes (XY, YZ,
/// XZ; cell (i, j) of a plane at ((i*R)+j)*Fdim, i indexing the plane's first
/// axis), then per layer the spline coefficients [out][in][G+3] and the base
/// weights [out][in]. Per-layer input normalization is not trained.
template <typename Real>
class MaterialField {
 public:
  MaterialField(const FieldShape& shape, const Aabb<double>& bounds) : shape_(shape), bounds_(bounds) {
    shape_.validate();
    std::size_t offset = shape_.plane_params();
    for (const auto& ls : shape_.layers()) {
      LayerOffsets lo;
      lo.coef = offset;
      offset += static_cast<std::size_t>(ls.out) * ls.in * shape_.bases();
      lo.base = offset;
      offset += static_cast<std::size_t>(ls.out) * ls.in;
      offsets_.push_back(lo);
      norm_scale_.emplace_back(ls.in, Real(1));
      norm_shift_.emplace_back(ls.in, Real(0));
    }
    params_.assign(offset, Real(0));
  }

  const FieldShape& shape() const { return shape_; }
  const Aabb<double>& bounds() const { return bounds_; }
  std::size_t param_count() const { return params_.size(); }
  const std::vector<Real>& params() const { return params_; }
  /// Mutable access invalidates outstanding forward records.
  std::vector<Real>& mutable_params() {
    ++version_;
    return params_;
  }
  std::uint64_t version() const { return version_; }
  std::size_t coef_offset(int layer) const { return offsets_[layer].coef; }
  std::size_t base_offset(int layer) const { return offsets_[layer].base; }
  std::size_t plane_offset(int plane, int i, int j) const {
    const std::size_t R = shape_.resolution;
    return ((static_cast<std::size_t>(plane) * R + i) * R + j) * shape_.features;
  }
  std::vector<Real>& norm_scale(int layer) { return norm_scale_[layer]; }
  std::vector<Real>& norm_shift(int layer) { return norm_shift_[layer]; }
  const std::vector<Real>& norm_scale(int layer) const { return norm_scale_[layer]; }
  const std::vector<Real>& norm_shift(int layer) const { return norm_shift_[layer]; }

  /// Planes uniform in [-0.1, 0.1], spline coefficients zero, base weights
  /// uniform in [-0.5, 0.5].
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> plane(-0.1, 0.1), base(-0.5, 0.5);
    auto& p = mutable_params();
    for (std::size_t i = 0; i < shape_.plane_params(); ++i) p[i] = static_cast<Real>(plane(rng));
    const auto layers = shape_.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::size_t nb = static_cast<std::size_t>(layers[l].out) * layers[l].in;
      std::fill_n(p.begin() + offsets_[l].coef, nb * shape_.bases(), Real(0));
      for (std::size_t e = 0; e < nb; ++e) p[offsets_[l].base + e] = static_cast<Real>(base(rng));
    }
  }

  // -------------------------------------------------------------------------
  // Evaluation

  /// Intermediates of one batch evaluation.
  struct Record {
    std::uint64_t version = 0;
    std::size_t points = 0;
    std::vector<std::array<int, 6>> cells;     // per point: (i, j) lower corner per plane
    std::vector<std::array<Real, 6>> fracs;    // per point: bilinear fractions per plane
    std::vector<std::vector<Real>> inputs;     // per layer: points x in, before normalization
    std::vector<Real> raw;                     // points x outputs
  };

  /// Bilinear tri-plane feature at x, summed over planes.
  void triplane_sample(const Vec3d& x, Real* feature, std::array<int, 6>* cell_out = nullptr,
                       std::array<Real, 6>* frac_out = nullptr) const {
    const Vec3d u = normalized(x);
    const int R = shape_.resolution;
    const int F = shape_.features;
    std::fill_n(feature, F, Real(0));
    static constexpr int axes[3][2] = {{0, 1}, {1, 2}, {0, 2}};
    for (int p = 0; p < 3; ++p) {
      int ij[2];
      Real fr[2];
      for (int a = 0; a < 2; ++a) {
        const double g = u[axes[p][a]] * (R - 1);
        int i0 = std::clamp(static_cast<int>(std::floor(g)), 0, R - 2);
        ij[a] = i0;
        fr[a] = static_cast<Real>(g - i0);
      }
      const Real w00 = (Real(1) - fr[0]) * (Real(1) - fr[1]), w01 = (Real(1) - fr[0]) * fr[1];
      const Real w10 = fr[0] * (Real(1) - fr[1]), w11 = fr[0] * fr[1];
      const Real* c00 = params_.data() + plane_offset(p, ij[0], ij[1]);
      const Real* c01 = params_.data() + plane_offset(p, ij[0], ij[1] + 1);
      const Real* c10 = params_.data() + plane_offset(p, ij[0] + 1, ij[1]);
      const Real* c11 = params_.data() + plane_offset(p, ij[0] + 1, ij[1] + 1);
      for (int f = 0; f < F; ++f) feature[f] += w00 * c00[f] + w01 * c01[f] + w10 * c10[f] + w11 * c11[f];
      if (cell_out) {
        (*cell_out)[2 * p] = ij[0];
        (*cell_out)[2 * p + 1] = ij[1];
      }
      if (frac_out) {
        (*frac_out)[2 * p] = fr[0];
        (*frac_out)[2 * p + 1] = fr[1];
      }
    }
  }

  std::vector<Real> triplane_sample(const Vec3d& x) const {
    std::vector<Real> f(shape_.features);
    triplane_sample(x, f.data());
    return f;
  }

  /// One KAN layer on a single input vector.
  void kan_eval(int layer, const Real* u, Real* v) const {
    const LayerShape ls = shape_.layers()[layer];
    const int nb = shape_.bases();
    const Real* coef = params_.data() + offsets_[layer].coef;
    const Real* base = params_.data() + offsets_[layer].base;
    std::fill_n(v, ls.out, Real(0));
    for (int i = 0; i < ls.in; ++i) {
      const Real un = normalize_input(layer, i, u[i]);
      const auto b = spline_basis(un, shape_.grid_size);
      const Real act = silu(un);
      for (int j = 0; j < ls.out; ++j) {
        const Real* c = coef + (static_cast<std::size_t>(j) * ls.in + i) * nb + b.first;
        v[j] += base[static_cast<std::size_t>(j) * ls.in + i] * act + c[0] * b.value[0] + c[1] * b.value[1] +
                c[2] * b.value[2] + c[3] * b.value[3];
      }
    }
  }

  std::vector<Real> kan_eval(int layer, std::span<const Real> u) const {
    std::vector<Real> v(shape_.layers()[layer].out);
    kan_eval(layer, u.data(), v.data());
    return v;
  }

  /// Raw (pre-squash) outputs for a batch of rest positions.
  std::vector<Real> raw_outputs(std::span<const Vec3d> points, Record* record = nullptr) const {
    const auto layers = shape_.layers();
    const std::size_t n = points.size();
    const int outs = layers.back().out;
    Record local;
    Record& rec = record ? *record : local;
    rec.version = version_;
    rec.points = n;
    rec.cells.assign(n, {});
    rec.fracs.assign(n, {});
    rec.inputs.assign(layers.size(), {});
    for (std::size_t l = 0; l < layers.size(); ++l) rec.inputs[l].assign(n * layers[l].in, Real(0));
    std::vector<Real> out(n * outs);
    std::vector<Real> next;
    for (std::size_t p = 0; p < n; ++p) {
      triplane_sample(points[p], rec.inputs[0].data() + p * layers[0].in, &rec.cells[p], &rec.fracs[p]);
      for (std::size_t l = 0; l < layers.size(); ++l) {
        Real* dst = l + 1 < layers.size() ? rec.inputs[l + 1].data() + p * layers[l + 1].in : out.data() + p * outs;
        kan_eval(static_cast<int>(l), rec.inputs[l].data() + p * layers[l].in, dst);
      }
    }
    rec.raw = out;
    return out;
  }

  /// log10 of each output: lo + (hi - lo) * sigmoid(raw). Points x outputs.
  std::vector<Real> eval_log10(std::span<const Vec3d> points, Record* record = nullptr) const {
    std::vector<Real> v = raw_outputs(points, record);
    const int outs = shape_.layer_dims.back();
    for (std::size_t p = 0; p < points.size(); ++p) {
      for (int o = 0; o < outs; ++o) v[p * outs + o] = squash(o, v[p * outs + o]);
    }
    return v;
  }

  /// Young's modulus (output 0) in Pa per point.
  std::vector<Real> eval_young(std::span<const Vec3d> points, Record* record = nullptr) const {
    const std::vector<Real> lg = eval_log10(points, record);
    const int outs = shape_.layer_dims.back();
    std::vector<Real> E(points.size());
    for (std::size_t p = 0; p < points.size(); ++p) E[p] = std::pow(Real(10), lg[p * outs]);
    return E;
  }

  Real squash(int output, Real raw) const {
    const auto& r = shape_.ranges[output];
    return static_cast<Real>(r.lo) + static_cast<Real>(r.hi - r.lo) * sigmoid(raw);
  }

  // -------------------------------------------------------------------------
  // Reverse mode

  /// Gradient of L w.r.t. every parameter given dL/d(log10 output), points x
  /// outputs. Accumulates into `grad` (size param_count()).
  void backward_log10(const Record& rec, std::span<const Real> grad_log10, std::span<Real> grad) const {
    if (rec.version != version_) raise(ErrorKind::StaleRecord, "field parameters changed since the forward pass");
    const auto layers = shape_.layers();
    const int outs = layers.back().out;
    if (grad_log10.size() != rec.points * outs || grad.size() != params_.size()) {
      raise(ErrorKind::ShapeMismatch, "gradient sizes do not match the field record");
    }
    const int nb = shape_.bases();
    std::vector<Real> g_out, g_in;
    for (std::size_t p = 0; p < rec.points; ++p) {
      g_out.assign(outs, Real(0));
      bool any = false;
      for (int o = 0; o < outs; ++o) {
        const auto& r = shape_.ranges[o];
        const Real s = sigmoid(rec.raw[p * outs + o]);
        g_out[o] = grad_log10[p * outs + o] * static_cast<Real>(r.hi - r.lo) * s * (Real(1) - s);
        any = any || g_out[o] != Real(0);
      }
      if (!any) continue;
      for (std::size_t l = layers.size(); l-- > 0;) {
        const LayerShape ls = layers[l];
        const Real* u = rec.inputs[l].data() + p * ls.in;
        const Real* coef = params_.data() + offsets_[l].coef;
        const Real* base = params_.data() + offsets_[l].base;
        Real* gcoef = grad.data() + offsets_[l].coef;
        Real* gbase = grad.data() + offsets_[l].base;
        g_in.assign(ls.in, Real(0));
        for (int i = 0; i < ls.in; ++i) {
          const Real scaled = norm_scale_[l][i] * u[i] + norm_shift_[l][i];
          const Real un = std::clamp(scaled, Real(-1), Real(1));
          const auto b = spline_basis(un, shape_.grid_size);
          const Real act = silu(un), act_slope = silu_slope(un);
          Real g_un = Real(0);
          for (int j = 0; j < ls.out; ++j) {
            const Real go = g_out[j];
            if (go == Real(0)) continue;
            const std::size_t edge = static_cast<std::size_t>(j) * ls.in + i;
            const Real* c = coef + edge * nb + b.first;
            Real* gc = gcoef + edge * nb + b.first;
            for (int q = 0; q < 4; ++q) gc[q] += go * b.value[q];
            gbase[edge] += go * act;
            g_un += go * (base[edge] * act_slope + c[0] * b.slope[0] + c[1] * b.slope[1] + c[2] * b.slope[2] +
                          c[3] * b.slope[3]);
          }
          // Clamping stops the gradient outside [-1, 1].
          g_in[i] = (scaled > Real(-1) && scaled < Real(1)) ? g_un * norm_scale_[l][i] : Real(0);
        }
        g_out.swap(g_in);
      }
      // g_out now holds dL/dfeature.
      scatter_plane_grad(rec.cells[p], rec.fracs[p], g_out.data(), grad);
    }
  }

  /// As backward_log10 but from dL/dE for output 0 (E = 10^log10E).
  void backward_young(const Record& rec, std::span<const Real> young, std::span<const Real> grad_young,
                      std::span<Real> grad) const {
    const int outs = shape_.layer_dims.back();
    std::vector<Real> g(rec.points * outs, Real(0));
    for (std::size_t p = 0; p < rec.points; ++p) {
      g[p * outs] = grad_young[p] * young[p] * static_cast<Real>(std::log(10.0));
    }
    backward_log10(rec, g, grad);
  }

  // -------------------------------------------------------------------------
  // Normalization and bias

  /// Sets (blend = 1) or blends toward the batch min/max of every layer's
  /// inputs so they map onto [-1, 1].
  void update_normalization(std::span<const Vec3d> points, double blend) {
    const auto layers = shape_.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      Record rec;
      raw_outputs(points, &rec);
      const int in = layers[l].in;
      for (int i = 0; i < in; ++i) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (std::size_t p = 0; p < points.size(); ++p) {
          lo = std::min(lo, static_cast<double>(rec.inputs[l][p * in + i]));
          hi = std::max(hi, static_cast<double>(rec.inputs[l][p * in + i]));
        }
        if (!(hi >= lo)) continue;
        const double span = std::max(hi - lo, 1e-3);
        const double mid = 0.5 * (hi + lo);
        const double scale = 2.0 / span, shift = -mid * scale;
        norm_scale_[l][i] = static_cast<Real>(blend * scale + (1.0 - blend) * norm_scale_[l][i]);
        norm_shift_[l][i] = static_cast<Real>(blend * shift + (1.0 - blend) * norm_shift_[l][i]);
      }
    }
    ++version_;
  }

  /// Shifts output `o` by a constant raw offset so its mean over `points`
  /// lands on `target_log10`. Uses the partition of unity of the last layer's
  /// spline bases: adding c to all of an output's coefficients adds c * in.
  void bias_output(std::span<const Vec3d> points, int o, double target_log10) {
    const auto& r = shape_.ranges[o];
    if (!(target_log10 > r.lo && target_log10 < r.hi)) raise(ErrorKind::Range, "bias target outside output range");
    const std::vector<Real> lg = eval_log10(points);
    const int outs = shape_.layer_dims.back();
    // Match in raw space: mean raw -> logit of target.
    double mean_raw = 0.0;
    for (std::size_t p = 0; p < points.size(); ++p) {
      const double y = (static_cast<double>(lg[p * outs + o]) - r.lo) / (r.hi - r.lo);
      mean_raw += logit(std::clamp(y, 1e-9, 1.0 - 1e-9));
    }
    mean_raw /= static_cast<double>(points.size());
    const double want = logit((target_log10 - r.lo) / (r.hi - r.lo));
    const int last = static_cast<int>(shape_.layers().size()) - 1;
    const LayerShape ls = shape_.layers()[last];
    const double per_edge = (want - mean_raw) / ls.in;
    auto& p = mutable_params();
    for (int i = 0; i < ls.in; ++i) {
      Real* c = p.data() + offsets_[last].coef + (static_cast<std::size_t>(o) * ls.in + i) * shape_.bases();
      for (int q = 0; q < shape_.bases(); ++q) c[q] += static_cast<Real>(per_edge);
    }
  }

  Vec3d normalized(const Vec3d& x) const {
    const Vec3d ext = bounds_.extent();
    Vec3d u;
    for (int a = 0; a < 3; ++a) {
      u[a] = ext[a] > 0 ? (x[a] - bounds_.min[a]) / ext[a] : 0.5;
      if (!(u[a] >= -1e-9 && u[a] <= 1.0 + 1e-9)) raise(ErrorKind::OutOfBounds, "point outside the field bounds");
      u[a] = std::clamp(u[a], 0.0, 1.0);
    }
    return u;
  }

  /// Field with identical shape, bounds, normalization and parameters in
  /// another precision.
  template <typename Other>
  MaterialField<Other> cast() const {
    MaterialField<Other> o(shape_, bounds_);
    auto& p = o.mutable_params();
    for (std::size_t i = 0; i < params_.size(); ++i) p[i] = static_cast<Other>(params_[i]);
    for (std::size_t l = 0; l < norm_scale_.size(); ++l) {
      for (std::size_t i = 0; i < norm_scale_[l].size(); ++i) {
        o.norm_scale(static_cast<int>(l))[i] = static_cast<Other>(norm_scale_[l][i]);
        o.norm_shift(static_cast<int>(l))[i] = static_cast<Other>(norm_shift_[l][i]);
      }
    }
    return o;
  }

 private:
  struct LayerOffsets {
    std::size_t coef = 0;
    std::size_t base = 0;
  };

  Real normalize_input(int layer, int i, Real u) const {
    return std::clamp(norm_scale_[layer][i] * u + norm_shift_[layer][i], Real(-1), Real(1));
  }

  void scatter_plane_grad(const std::array<int, 6>& cells, const std::array<Real, 6>& fracs, const Real* gfeat,
                          std::span<Real> grad) const {
    const int F = shape_.features;
    for (int p = 0; p < 3; ++p) {
      const int i = cells[2 * p], j = cells[2 * p + 1];
      const Real a = fracs[2 * p], b = fracs[2 * p + 1];
      const Real w[4] = {(Real(1) - a) * (Real(1) - b), (Real(1) - a) * b, a * (Real(1) - b), a * b};
      const std::size_t off[4] = {plane_offset(p, i, j), plane_offset(p, i, j + 1), plane_offset(p, i + 1, j),
                                  plane_offset(p, i + 1, j + 1)};
      for (int c = 0; c < 4; ++c) {
        if (w[c] == Real(0)) continue;
        for (int f = 0; f < F; ++f) grad[off[c] + f] += w[c] * gfeat[f];
      }
    }
  }

  FieldShape shape_;
  Aabb<double> bounds_;
  std::vector<LayerOffsets> offsets_;
  std::vector<Real> params_;
  std::vector<std::vector<Real>> norm_scale_;
  std::vector<std::vector<Real>> norm_shift_;
  std::uint64_t version_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) raise(ErrorKind::Io, "truncated checkpoint");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

template <typename Real>
void write_f32(std::ostream& out, std::span<const Real> v) {
  for (Real x : v) {
    const float f = static_cast<float>(x);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    write_u32(out, bits);
  }
}

template <typename Real>
void read_f32(std::istream& in, std::span<Real> v) {
  for (Real& x : v) {
    const std::uint32_t bits = read_u32(in);
    float f;
    std::memcpy(&f, &bits, 4);
    x = static_cast<Real>(f);
  }
}

}  // namespace detail

/// Layout: "DPMF", u32 version 1, u32 header length, JSON header, then f32 LE
/// planes (XY, YZ, XZ), then per layer spline coefficients, base weights,
/// normalization scales and shifts.
template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const MaterialField<Real>& f) {
  using nlohmann::json;
  const auto& s = f.shape();
  json ranges = json::array();
  for (const auto& r : s.ranges) ranges.push_back({r.lo, r.hi});
  const json header = {{"R", s.resolution},
                       {"Fdim", s.features},
                       {"layer_dims", s.layer_dims},
                       {"G", s.grid_size},
                       {"ranges", ranges},
                       {"bounds", {{"min", {f.bounds().min.x(), f.bounds().min.y(), f.bounds().min.z()}},
                                   {"max", {f.bounds().max.x(), f.bounds().max.y(), f.bounds().max.z()}}}}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorKind::Io, "cannot write " + path.string());
  out.write("DPMF", 4);
  detail::write_u32(out, 1);
  detail::write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::write_f32<Real>(out, f.params());
  for (std::size_t l = 0; l < s.layers().size(); ++l) {
    detail::write_f32<Real>(out, f.norm_scale(static_cast<int>(l)));
    detail::write_f32<Real>(out, f.norm_shift(static_cast<int>(l)));
  }
  if (!out) raise(ErrorKind::Io, "write failed for " + path.string());
}

template <typename Real>
MaterialField<Real> load_checkpoint(const std::filesystem::path& path) {
  using nlohmann::json;
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorKind::Io, "cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "DPMF", 4) != 0) raise(ErrorKind::Io, "bad checkpoint magic");
  if (detail::read_u32(in) != 1) raise(ErrorKind::Io, "unsupported checkpoint version");
  const std::uint32_t len = detail::read_u32(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) raise(ErrorKind::Io, "truncated checkpoint header");
  json h;
  try {
    h = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorKind::Io, std::string("bad checkpoint header: ") + e.what());
  }
  FieldShape s;
  s.resolution = h.at("R").get<int>();
  s.features = h.at("Fdim").get<int>();
  s.layer_dims = h.at("layer_dims").get<std::vector<int>>();
  s.grid_size = h.at("G").get<int>();
  s.ranges.clear();
  for (const auto& r : h.at("ranges")) s.ranges.push_back({r.at(0).get<double>(), r.at(1).get<double>()});
  Aabb<double> b;
  for (int a = 0; a < 3; ++a) {
    b.min[a] = h.at("bounds").at("min").at(a).get<double>();
    b.max[a] = h.at("bounds").at("max").at(a).get<double>();
  }
  MaterialField<Real> f(s, b);
  detail::read_f32<Real>(in, f.mutable_params());
  for (std::size_t l = 0; l < s.layers().size(); ++l) {
    detail::read_f32<Real>(in, f.norm_scale(static_cast<int>(l)));
    detail::read_f32<Real>(in, f.norm_shift(static_cast<int>(l)));
  }
  return f;
}

}  // namespace dreamphys::field
