#pragma once

// Simulation configuration: JSON schema, defaults and validation.

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dreamphys/error.hpp"
#include "dreamphys/math.hpp"

namespace dreamphys {

using json = nlohmann::json;

enum class BoundaryType { None, StickyGround, SlipGround };

struct Boundary {
  BoundaryType type = BoundaryType::None;
  double ground_height = 0.0;
};

struct InitialVelocity {
  enum class Kind { None, Spin, Translate };
  Kind kind = Kind::None;
  Vec3d axis = Vec3d::UnitY();            // spin
  double rate = 0.0;                      // spin, rad/s
  std::optional<Vec3d> center;            // spin pivot; scene bounds center when absent
  Vec3d velocity = Vec3d::Zero();         // translate
};

/// Look-at camera pose; world-to-camera uses x right, y down, z forward.
struct CameraPose {
  Vec3d eye = Vec3d(0, 0, -2);
  Vec3d target = Vec3d::Zero();
  Vec3d up = Vec3d::UnitY();
  double fov_y_deg = 40.0;
};

struct SimConfig {
  int grid_resolution = 64;
  Vec3d domain_origin = Vec3d::Zero();
  double domain_size = 1.0;
  double dt = 5e-5;
  int substeps_per_frame = 800;
  int frame_count = 16;
  Vec3d gravity = Vec3d(0, -9.8, 0);
  Boundary boundary;
  std::optional<Aabb<double>> fixed_region;
  InitialVelocity initial_velocity;
  double density = 1000.0;
  double poisson = 0.3;
  std::optional<double> particle_volume;
  std::vector<CameraPose> camera_path{CameraPose{}};  // one pose = static camera
  int image_height = 64;
  int image_width = 64;

  double dx() const { return domain_size / grid_resolution; }

  const CameraPose& camera_for_frame(int frame) const {
    return camera_path.size() == 1 ? camera_path.front() : camera_path.at(static_cast<std::size_t>(frame));
  }

  /// Throws RangeError / SchemaError on invariant violations.
  void validate() const {
    if (!(dt > 0.0)) raise(ErrorKind::Range, "dt must be > 0");
    if (substeps_per_frame < 1) raise(ErrorKind::Range, "substeps_per_frame must be >= 1");
    if (grid_resolution < 8) raise(ErrorKind::Range, "grid_resolution must be >= 8");
    if (frame_count < 1) raise(ErrorKind::Range, "frame_count must be >= 1");
    if (!(domain_size > 0.0)) raise(ErrorKind::Range, "domain.size must be > 0");
    if (!(poisson >= 0.0) || poisson >= 0.5) raise(ErrorKind::Range, "poisson must be in [0, 0.5)");
    if (poisson > 0.45) raise(ErrorKind::Range, "poisson must be <= 0.45");
    if (!(density > 0.0)) raise(ErrorKind::Range, "density must be > 0");
    if (particle_volume && !(*particle_volume > 0.0)) raise(ErrorKind::Range, "particle_volume must be > 0");
    if (image_height < 1 || image_width < 1) raise(ErrorKind::Range, "image_size must be positive");
    if (camera_path.empty()) raise(ErrorKind::Schema, "camera must hold at least one pose");
    if (camera_path.size() != 1 && static_cast<int>(camera_path.size()) != frame_count) {
      raise(ErrorKind::Schema, "camera path length must be 1 or frame_count");
    }
    for (const auto& c : camera_path) {
      if (!(c.fov_y_deg > 0.0 && c.fov_y_deg < 180.0)) raise(ErrorKind::Range, "fov_y_deg must be in (0, 180)");
      if ((c.target - c.eye).norm() == 0.0) raise(ErrorKind::Range, "camera eye and target coincide");
    }
  }
};

namespace detail {

inline void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) raise(ErrorKind::Schema, where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) raise(ErrorKind::Schema, "unknown key '" + key + "' in " + where);
  }
}

inline Vec3d vec3_from(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) raise(ErrorKind::Schema, what + " must be an array of 3 numbers");
  Vec3d v;
  for (int i = 0; i < 3; ++i) {
    if (!j[i].is_number()) raise(ErrorKind::Schema, what + " must be an array of 3 numbers");
    v[i] = j[i].get<double>();
  }
  return v;
}

inline json vec3_to(const Vec3d& v) { return json::array({v.x(), v.y(), v.z()}); }

inline double number_from(const json& j, const std::string& what) {
  if (!j.is_number()) raise(ErrorKind::Schema, what + " must be a number");
  return j.get<double>();
}

inline int integer_from(const json& j, const std::string& what) {
  if (!j.is_number_integer()) raise(ErrorKind::Schema, what + " must be an integer");
  return j.get<int>();
}

inline CameraPose camera_from(const json& j) {
  check_keys(j, {"eye", "target", "up", "fov_y_deg"}, "camera pose");
  CameraPose c;
  if (!j.contains("eye") || !j.contains("target")) raise(ErrorKind::Schema, "camera pose requires eye and target");
  c.eye = vec3_from(j["eye"], "camera.eye");
  c.target = vec3_from(j["target"], "camera.target");
  if (j.contains("up")) c.up = vec3_from(j["up"], "camera.up");
  if (j.contains("fov_y_deg")) c.fov_y_deg = number_from(j["fov_y_deg"], "camera.fov_y_deg");
  return c;
}

inline json camera_to(const CameraPose& c) {
  return {{"eye", vec3_to(c.eye)}, {"target", vec3_to(c.target)}, {"up", vec3_to(c.up)}, {"fov_y_deg", c.fov_y_deg}};
}

}  // namespace detail

/// Parses a config document. `frame_count`, `image_size` and `camera` are
/// required; every other key has a default.
inline SimConfig config_from_json(const json& j) {
  using namespace detail;
  check_keys(j,
             {"grid_resolution", "domain", "dt", "substeps_per_frame", "frame_count", "gravity", "boundary",
              "fixed_region", "initial_velocity", "density", "poisson", "particle_volume", "image_size", "camera"},
             "config");
  for (const char* required : {"frame_count", "image_size", "camera"}) {
    if (!j.contains(required)) raise(ErrorKind::Schema, std::string("missing required key '") + required + "'");
  }
  SimConfig c;
  if (j.contains("grid_resolution")) c.grid_resolution = integer_from(j["grid_resolution"], "grid_resolution");
  if (j.contains("domain")) {
    const auto& d = j["domain"];
    check_keys(d, {"origin", "size"}, "domain");
    if (d.contains("origin")) c.domain_origin = vec3_from(d["origin"], "domain.origin");
    if (d.contains("size")) c.domain_size = number_from(d["size"], "domain.size");
  }
  if (j.contains("dt")) c.dt = number_from(j["dt"], "dt");
  if (j.contains("substeps_per_frame")) c.substeps_per_frame = integer_from(j["substeps_per_frame"], "substeps_per_frame");
  c.frame_count = integer_from(j["frame_count"], "frame_count");
  if (j.contains("gravity")) c.gravity = vec3_from(j["gravity"], "gravity");
  if (j.contains("boundary")) {
    const auto& b = j["boundary"];
    check_keys(b, {"type", "ground_height"}, "boundary");
    if (!b.contains("type") || !b["type"].is_string()) raise(ErrorKind::Schema, "boundary.type must be a string");
    const auto t = b["type"].get<std::string>();
    if (t == "none") {
      c.boundary.type = BoundaryType::None;
    } else if (t == "sticky_ground") {
      c.boundary.type = BoundaryType::StickyGround;
    } else if (t == "slip_ground") {
      c.boundary.type = BoundaryType::SlipGround;
    } else {
      raise(ErrorKind::Schema, "boundary.type must be none, sticky_ground or slip_ground");
    }
    if (b.contains("ground_height")) c.boundary.ground_height = number_from(b["ground_height"], "boundary.ground_height");
  }
  if (j.contains("fixed_region") && !j["fixed_region"].is_null()) {
    const auto& f = j["fixed_region"];
    check_keys(f, {"min", "max"}, "fixed_region");
    if (!f.contains("min") || !f.contains("max")) raise(ErrorKind::Schema, "fixed_region requires min and max");
    c.fixed_region = Aabb<double>{vec3_from(f["min"], "fixed_region.min"), vec3_from(f["max"], "fixed_region.max")};
  }
  if (j.contains("initial_velocity")) {
    const auto& iv = j["initial_velocity"];
    check_keys(iv, {"type", "axis", "rate", "center", "velocity"}, "initial_velocity");
    if (!iv.contains("type") || !iv["type"].is_string()) raise(ErrorKind::Schema, "initial_velocity.type must be a string");
    const auto t = iv["type"].get<std::string>();
    if (t == "none") {
      c.initial_velocity.kind = InitialVelocity::Kind::None;
    } else if (t == "spin") {
      c.initial_velocity.kind = InitialVelocity::Kind::Spin;
      if (!iv.contains("axis") || !iv.contains("rate")) raise(ErrorKind::Schema, "spin requires axis and rate");
      c.initial_velocity.axis = vec3_from(iv["axis"], "initial_velocity.axis");
      if (c.initial_velocity.axis.norm() == 0.0) raise(ErrorKind::Range, "spin axis must be nonzero");
      c.initial_velocity.axis.normalize();
      c.initial_velocity.rate = number_from(iv["rate"], "initial_velocity.rate");
      if (iv.contains("center")) c.initial_velocity.center = vec3_from(iv["center"], "initial_velocity.center");
    } else if (t == "translate") {
      c.initial_velocity.kind = InitialVelocity::Kind::Translate;
      if (!iv.contains("velocity")) raise(ErrorKind::Schema, "translate requires velocity");
      c.initial_velocity.velocity = vec3_from(iv["velocity"], "initial_velocity.velocity");
    } else {
      raise(ErrorKind::Schema, "initial_velocity.type must be none, spin or translate");
    }
  }
  if (j.contains("density")) c.density = number_from(j["density"], "density");
  if (j.contains("poisson")) c.poisson = number_from(j["poisson"], "poisson");
  if (j.contains("particle_volume") && !j["particle_volume"].is_null()) {
    c.particle_volume = number_from(j["particle_volume"], "particle_volume");
  }
  const auto& is = j["image_size"];
  if (!is.is_array() || is.size() != 2) raise(ErrorKind::Schema, "image_size must be [H, W]");
  c.image_height = integer_from(is[0], "image_size[0]");
  c.image_width = integer_from(is[1], "image_size[1]");
  const auto& cam = j["camera"];
  c.camera_path.clear();
  if (cam.is_array()) {
    for (const auto& p : cam) c.camera_path.push_back(camera_from(p));
  } else {
    c.camera_path.push_back(camera_from(cam));
  }
  c.validate();
  return c;
}

/// Fully-resolved echo of a config; config_from_json(config_to_json(c)) == c.
inline json config_to_json(const SimConfig& c) {
  using namespace detail;
  json j;
  j["grid_resolution"] = c.grid_resolution;
  j["domain"] = {{"origin", vec3_to(c.domain_origin)}, {"size", c.domain_size}};
  j["dt"] = c.dt;
  j["substeps_per_frame"] = c.substeps_per_frame;
  j["frame_count"] = c.frame_count;
  j["gravity"] = vec3_to(c.gravity);
  const char* btype = c.boundary.type == BoundaryType::StickyGround ? "sticky_ground"
                      : c.boundary.type == BoundaryType::SlipGround ? "slip_ground"
                                                                     : "none";
  j["boundary"] = {{"type", btype}, {"ground_height", c.boundary.ground_height}};
  j["fixed_region"] = c.fixed_region ? json{{"min", vec3_to(c.fixed_region->min)}, {"max", vec3_to(c.fixed_region->max)}}
                                     : json(nullptr);
  switch (c.initial_velocity.kind) {
    case InitialVelocity::Kind::None: j["initial_velocity"] = {{"type", "none"}}; break;
    case InitialVelocity::Kind::Spin:
      j["initial_velocity"] = {{"type", "spin"}, {"axis", vec3_to(c.initial_velocity.axis)}, {"rate", c.initial_velocity.rate}};
      if (c.initial_velocity.center) j["initial_velocity"]["center"] = vec3_to(*c.initial_velocity.center);
      break;
    case InitialVelocity::Kind::Translate:
      j["initial_velocity"] = {{"type", "translate"}, {"velocity", vec3_to(c.initial_velocity.velocity)}};
      break;
  }
  j["density"] = c.density;
  j["poisson"] = c.poisson;
  j["particle_volume"] = c.particle_volume ? json(*c.particle_volume) : json(nullptr);
  j["image_size"] = {c.image_height, c.image_width};
  if (c.camera_path.size() == 1) {
    j["camera"] = camera_to(c.camera_path.front());
  } else {
    j["camera"] = json::array();
    for (const auto& p : c.camera_path) j["camera"].push_back(camera_to(p));
  }
  return j;
}

inline SimConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorKind::Io, "cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    raise(ErrorKind::Schema, std::string("invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

}  // namespace dreamphys
