#pragma once

// Gaussian splat scenes and the 3DGS PLY layout.

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dreamphys/error.hpp"
#include "dreamphys/math.hpp"

namespace dreamphys {

struct GaussianKernel {
  Vec3d center = Vec3d::Zero();
  double opacity = 1.0;               // post-sigmoid
  Vec3d scale = Vec3d::Ones();        // post-exp, > 0
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  std::vector<Vec3d> sh{Vec3d::Zero()};  // (deg+1)^2 RGB coefficients, sh[0] is DC

  /// Sigma = R diag(scale^2) R^T.
  Mat3d covariance() const {
    const Mat3d R = rotation.normalized().toRotationMatrix();
    return R * scale.array().square().matrix().asDiagonal() * R.transpose();
  }
};

struct Scene {
  std::vector<GaussianKernel> kernels;
  int sh_degree = 0;
  Aabb<double> bounds;

  /// Bounds padded by 10% per side; the material field normalizes against this.
  Aabb<double> padded_bounds() const { return bounds.padded(0.1); }

  void recompute_bounds() {
    if (kernels.empty()) raise(ErrorKind::EmptyScene, "scene has no kernels");
    bounds.min = bounds.max = kernels.front().center;
    for (const auto& k : kernels) {
      bounds.min = bounds.min.cwiseMin(k.center);
      bounds.max = bounds.max.cwiseMax(k.center);
    }
  }
};

inline int sh_coefficient_count(int degree) { return (degree + 1) * (degree + 1); }

namespace detail {

enum class PlyType { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

inline PlyType parse_ply_type(const std::string& t) {
  if (t == "char" || t == "int8") return PlyType::Int8;
  if (t == "uchar" || t == "uint8") return PlyType::UInt8;
  if (t == "short" || t == "int16") return PlyType::Int16;
  if (t == "ushort" || t == "uint16") return PlyType::UInt16;
  if (t == "int" || t == "int32") return PlyType::Int32;
  if (t == "uint" || t == "uint32") return PlyType::UInt32;
  if (t == "float" || t == "float32") return PlyType::Float32;
  if (t == "double" || t == "float64") return PlyType::Float64;
  raise(ErrorKind::MalformedPly, "unsupported property type '" + t + "'");
}

inline std::size_t ply_type_size(PlyType t) {
  switch (t) {
    case PlyType::Int8:
    case PlyType::UInt8: return 1;
    case PlyType::Int16:
    case PlyType::UInt16: return 2;
    case PlyType::Int32:
    case PlyType::UInt32:
    case PlyType::Float32: return 4;
    case PlyType::Float64: return 8;
  }
  return 0;
}

template <typename T>
T read_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

inline double decode_ply_value(PlyType t, const char* p) {
  switch (t) {
    case PlyType::Int8: return read_le<std::int8_t>(p);
    case PlyType::UInt8: return read_le<std::uint8_t>(p);
    case PlyType::Int16: return read_le<std::int16_t>(p);
    case PlyType::UInt16: return read_le<std::uint16_t>(p);
    case PlyType::Int32: return read_le<std::int32_t>(p);
    case PlyType::UInt32: return read_le<std::uint32_t>(p);
    case PlyType::Float32: return read_le<float>(p);
    case PlyType::Float64: return read_le<double>(p);
  }
  return 0.0;
}

struct PlyProperty {
  std::string name;
  PlyType type;
};

}  // namespace detail

/// Reads a 3DGS PLY (binary little-endian or ascii). Opacity is stored as a
/// logit and scale as a log; both are activated here.
inline Scene load_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorKind::Io, "cannot open " + path.string());

  std::string line;
  std::getline(in, line);
  if (line.rfind("ply", 0) != 0) raise(ErrorKind::MalformedPly, "missing 'ply' magic");

  bool binary = false;
  bool have_format = false;
  std::size_t vertex_count = 0;
  bool in_vertex = false;
  bool seen_element = false;
  std::vector<detail::PlyProperty> props;

  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "binary_little_endian") {
        binary = true;
      } else if (fmt == "ascii") {
        binary = false;
      } else {
        raise(ErrorKind::MalformedPly, "unsupported format '" + fmt + "'");
      }
      have_format = true;
    } else if (tok == "element") {
      std::string name;
      std::size_t count = 0;
      ls >> name >> count;
      if (!seen_element) {
        if (name != "vertex") raise(ErrorKind::MalformedPly, "first element is '" + name + "', expected 'vertex'");
        vertex_count = count;
        in_vertex = true;
      } else {
        in_vertex = false;
      }
      seen_element = true;
    } else if (tok == "property") {
      std::string type, name;
      ls >> type;
      if (type == "list") {
        if (in_vertex) raise(ErrorKind::MalformedPly, "list properties are not supported on vertices");
        continue;
      }
      ls >> name;
      if (in_vertex) props.push_back({name, detail::parse_ply_type(type)});
    } else if (tok == "end_header") {
      break;
    }
  }
  if (!have_format) raise(ErrorKind::MalformedPly, "missing format line");
  if (!seen_element) raise(ErrorKind::MalformedPly, "missing vertex element");
  if (vertex_count == 0) raise(ErrorKind::EmptyScene, "PLY has 0 vertices");

  auto index_of = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < props.size(); ++i) {
      if (props[i].name == name) return static_cast<int>(i);
    }
    return -1;
  };
  auto require = [&](const std::string& name) {
    const int idx = index_of(name);
    if (idx < 0) raise(ErrorKind::MalformedPly, "missing vertex property '" + name + "'");
    return idx;
  };

  const std::array<int, 3> ix{require("x"), require("y"), require("z")};
  const std::array<int, 3> idc{require("f_dc_0"), require("f_dc_1"), require("f_dc_2")};
  const int iop = require("opacity");
  const std::array<int, 3> isc{require("scale_0"), require("scale_1"), require("scale_2")};
  const std::array<int, 4> irot{require("rot_0"), require("rot_1"), require("rot_2"), require("rot_3")};

  int rest_count = 0;
  while (index_of("f_rest_" + std::to_string(rest_count)) >= 0) ++rest_count;
  int degree = 0;
  for (int d = 0; d <= 3; ++d) {
    if (3 * (sh_coefficient_count(d) - 1) == rest_count) {
      degree = d;
      break;
    }
    if (d == 3) raise(ErrorKind::MalformedPly, "f_rest count " + std::to_string(rest_count) + " is not 0, 9, 24 or 45");
  }
  std::vector<int> irest(rest_count);
  for (int i = 0; i < rest_count; ++i) irest[i] = index_of("f_rest_" + std::to_string(i));

  std::vector<std::size_t> offsets(props.size());
  std::size_t stride = 0;
  for (std::size_t i = 0; i < props.size(); ++i) {
    offsets[i] = stride;
    stride += detail::ply_type_size(props[i].type);
  }

  Scene scene;
  scene.sh_degree = degree;
  scene.kernels.resize(vertex_count);
  std::vector<double> values(props.size());
  std::vector<char> row(stride);
  const int per_channel = sh_coefficient_count(degree) - 1;

  for (std::size_t v = 0; v < vertex_count; ++v) {
    if (binary) {
      if (!in.read(row.data(), static_cast<std::streamsize>(stride))) {
        raise(ErrorKind::MalformedPly, "truncated binary payload at vertex " + std::to_string(v));
      }
      for (std::size_t i = 0; i < props.size(); ++i) {
        values[i] = detail::decode_ply_value(props[i].type, row.data() + offsets[i]);
      }
    } else {
      for (std::size_t i = 0; i < props.size(); ++i) {
        if (!(in >> values[i])) raise(ErrorKind::MalformedPly, "truncated ascii payload at vertex " + std::to_string(v));
      }
    }
    GaussianKernel& k = scene.kernels[v];
    k.center = Vec3d(values[ix[0]], values[ix[1]], values[ix[2]]);
    k.opacity = sigmoid(values[iop]);
    k.scale = Vec3d(std::exp(values[isc[0]]), std::exp(values[isc[1]]), std::exp(values[isc[2]]));
    Eigen::Quaterniond q(values[irot[0]], values[irot[1]], values[irot[2]], values[irot[3]]);
    if (q.norm() == 0.0) q = Eigen::Quaterniond::Identity();
    k.rotation = q.normalized();
    k.sh.assign(sh_coefficient_count(degree), Vec3d::Zero());
    k.sh[0] = Vec3d(values[idc[0]], values[idc[1]], values[idc[2]]);
    for (int c = 0; c < 3; ++c) {
      for (int j = 0; j < per_channel; ++j) {
        k.sh[j + 1][c] = values[irest[c * per_channel + j]];
      }
    }
  }
  scene.recompute_bounds();
  return scene;
}

enum class PlyFormat { BinaryLittleEndian, Ascii };

/// Debug writer; inverse of load_ply on every stored field.
inline void save_ply(const std::filesystem::path& path, const Scene& scene,
                     PlyFormat format = PlyFormat::BinaryLittleEndian) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorKind::Io, "cannot write " + path.string());
  const int per_channel = sh_coefficient_count(scene.sh_degree) - 1;

  out << "ply\n";
  out << (format == PlyFormat::Ascii ? "format ascii 1.0\n" : "format binary_little_endian 1.0\n");
  out << "element vertex " << scene.kernels.size() << "\n";
  std::vector<std::string> names{"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"};
  for (int i = 0; i < 3 * per_channel; ++i) names.push_back("f_rest_" + std::to_string(i));
  for (const char* n : {"opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"}) {
    names.emplace_back(n);
  }
  for (const auto& n : names) out << "property float " << n << "\n";
  out << "end_header\n";
  if (format == PlyFormat::Ascii) out.precision(9);

  std::vector<float> row(names.size());
  for (const auto& k : scene.kernels) {
    std::size_t i = 0;
    for (int a = 0; a < 3; ++a) row[i++] = static_cast<float>(k.center[a]);
    for (int a = 0; a < 3; ++a) row[i++] = 0.0f;
    for (int a = 0; a < 3; ++a) row[i++] = static_cast<float>(k.sh[0][a]);
    for (int c = 0; c < 3; ++c) {
      for (int j = 0; j < per_channel; ++j) row[i++] = static_cast<float>(k.sh[j + 1][c]);
    }
    const double op = std::clamp(k.opacity, 1e-7, 1.0 - 1e-7);
    row[i++] = static_cast<float>(logit(op));
    for (int a = 0; a < 3; ++a) row[i++] = static_cast<float>(std::log(k.scale[a]));
    const Eigen::Quaterniond q = k.rotation.normalized();
    row[i++] = static_cast<float>(q.w());
    row[i++] = static_cast<float>(q.x());
    row[i++] = static_cast<float>(q.y());
    row[i++] = static_cast<float>(q.z());

    if (format == PlyFormat::Ascii) {
      for (std::size_t j = 0; j < row.size(); ++j) out << (j ? " " : "") << row[j];
      out << "\n";
    } else {
      out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
  }
  if (!out) raise(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace dreamphys
