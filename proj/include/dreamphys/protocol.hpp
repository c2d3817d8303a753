#pragma once

// Binary denoiser wire protocol over HTTP POST /v1/denoise.
//
// Request:  "DPGD" | u32 version=1 | u32 header_len | JSON header | f32 LE
//           video (T*H*W*3) | optional f32 LE condition image (H*W*3).
// Response: "DPGR" | u32 version=1 | u32 header_len | {"shape":[T,H,W,3]} |
//           f32 LE predicted noise.
// HTTP 400 malformed frame, 422 shape/condition mismatch, 503 model not
// loaded.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "dreamphys/error.hpp"
#include "dreamphys/guidance.hpp"

namespace dreamphys::protocol {

using guidance::Condition;
using render::Image;
using render::Video;

inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kMaxPayload = std::size_t(256) << 20;
inline constexpr const char* kPath = "/v1/denoise";

struct Request {
  std::array<int, 4> shape{0, 0, 0, 3};
  int timestep = 0;
  double cfg_scale = 100.0;
  Condition condition;
  std::vector<float> video;  // T*H*W*3
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, const float* data, std::size_t n) {
  const std::size_t at = out.size();
  out.resize(at + 4 * n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, data + i, 4);
    for (int b = 0; b < 4; ++b) out[at + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
}

inline void get_f32(const std::string& in, std::size_t at, float* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = get_u32(in, at + 4 * i);
    std::memcpy(data + i, &bits, 4);
  }
}

/// Splits magic, version and JSON header; returns payload offset.
inline std::size_t parse_frame(const std::string& bytes, const char* magic, nlohmann::json& header) {
  if (bytes.size() < 12) raise(ErrorKind::Protocol, "frame shorter than its fixed prefix");
  if (bytes.compare(0, 4, magic) != 0) raise(ErrorKind::Protocol, std::string("bad magic, expected ") + magic);
  if (get_u32(bytes, 4) != kVersion) raise(ErrorKind::Protocol, "unsupported protocol version");
  const std::uint32_t len = get_u32(bytes, 8);
  if (bytes.size() < 12 + std::size_t(len)) raise(ErrorKind::Protocol, "truncated header");
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorKind::Protocol, std::string("header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) raise(ErrorKind::Protocol, "header must be a JSON object");
  return 12 + len;
}

inline std::array<int, 4> parse_shape(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) raise(ErrorKind::Protocol, "shape must have 4 entries");
  std::array<int, 4> s{};
  for (int i = 0; i < 4; ++i) {
    if (!j[i].is_number_integer() || j[i].get<long long>() < 0) raise(ErrorKind::Protocol, "bad shape entry");
    s[i] = j[i].get<int>();
  }
  return s;
}

inline std::size_t element_count(const std::array<int, 4>& s) {
  return static_cast<std::size_t>(s[0]) * s[1] * s[2] * s[3];
}

inline std::string frame(const char* magic, const nlohmann::json& header) {
  std::string out(magic, 4);
  put_u32(out, kVersion);
  const std::string text = header.dump();
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  return out;
}

}  // namespace detail

inline std::string encode_request(const Request& r) {
  nlohmann::json cond = {{"kind", guidance::to_string(r.condition.kind)}};
  if (r.condition.kind == Condition::Kind::Text) cond["text"] = r.condition.text;
  if (r.condition.kind == Condition::Kind::Image) {
    cond["image_shape"] = {r.condition.image.height, r.condition.image.width, 3};
  }
  const nlohmann::json header = {{"shape", r.shape}, {"timestep", r.timestep}, {"cfg_scale", r.cfg_scale},
                                 {"condition", cond}};
  if (r.video.size() != detail::element_count(r.shape)) raise(ErrorKind::ShapeMismatch, "video size vs shape");
  std::string out = detail::frame("DPGD", header);
  detail::put_f32(out, r.video.data(), r.video.size());
  if (r.condition.kind == Condition::Kind::Image) {
    detail::put_f32(out, r.condition.image.data.data(), r.condition.image.data.size());
  }
  return out;
}

/// Protocol errors map to HTTP 400, ShapeMismatch to 422.
inline Request decode_request(const std::string& bytes) {
  nlohmann::json h;
  std::size_t at = detail::parse_frame(bytes, "DPGD", h);
  Request r;
  try {
    r.shape = detail::parse_shape(h.at("shape"));
    r.timestep = h.at("timestep").get<int>();
    r.cfg_scale = h.at("cfg_scale").get<double>();
    const auto& c = h.at("condition");
    const std::string kind = c.at("kind").get<std::string>();
    if (kind == "text") {
      r.condition = Condition::from_text(c.at("text").get<std::string>());
    } else if (kind == "image") {
      const auto s = c.at("image_shape");
      if (!s.is_array() || s.size() != 3) raise(ErrorKind::Protocol, "image_shape must have 3 entries");
      r.condition.kind = Condition::Kind::Image;
      r.condition.image = Image<float>(s[0].get<int>(), s[1].get<int>());
      if (s[2].get<int>() != 3) raise(ErrorKind::ShapeMismatch, "condition image must be RGB");
    } else if (kind != "none") {
      raise(ErrorKind::Protocol, "unknown condition kind '" + kind + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorKind::Protocol, std::string("bad request header: ") + e.what());
  }
  if (r.shape[3] != 3) raise(ErrorKind::ShapeMismatch, "last shape entry must be 3");
  const std::size_t n = detail::element_count(r.shape);
  const std::size_t image_n = r.condition.image.data.size();
  if (bytes.size() != at + 4 * (n + image_n)) raise(ErrorKind::Protocol, "payload length does not match header");
  r.video.resize(n);
  detail::get_f32(bytes, at, r.video.data(), n);
  at += 4 * n;
  detail::get_f32(bytes, at, r.condition.image.data.data(), image_n);
  if (r.condition.kind == Condition::Kind::Image &&
      (r.condition.image.height != r.shape[1] || r.condition.image.width != r.shape[2])) {
    raise(ErrorKind::ShapeMismatch, "condition image size differs from the video frames");
  }
  return r;
}

inline std::string encode_response(const std::array<int, 4>& shape, const std::vector<float>& eps) {
  if (eps.size() != detail::element_count(shape)) raise(ErrorKind::ShapeMismatch, "payload size vs shape");
  std::string out = detail::frame("DPGR", {{"shape", shape}});
  detail::put_f32(out, eps.data(), eps.size());
  return out;
}

inline std::pair<std::array<int, 4>, std::vector<float>> decode_response(const std::string& bytes) {
  nlohmann::json h;
  const std::size_t at = detail::parse_frame(bytes, "DPGR", h);
  std::array<int, 4> shape;
  try {
    shape = detail::parse_shape(h.at("shape"));
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorKind::Protocol, std::string("bad response header: ") + e.what());
  }
  const std::size_t n = detail::element_count(shape);
  if (bytes.size() != at + 4 * n) raise(ErrorKind::Protocol, "response payload length does not match header");
  std::vector<float> eps(n);
  detail::get_f32(bytes, at, eps.data(), n);
  return {shape, std::move(eps)};
}

// ---------------------------------------------------------------------------
// In-process mock server

enum class MockMode { Echo, Zero };

/// Answers one request body the way the mock server does: status and body.
inline std::pair<int, std::string> mock_respond(const std::string& body, MockMode mode) {
  try {
    if (body.size() > kMaxPayload) return {400, "payload too large"};
    Request r = decode_request(body);
    if (mode == MockMode::Zero) std::fill(r.video.begin(), r.video.end(), 0.0f);
    return {200, encode_response(r.shape, r.video)};
  } catch (const Error& e) {
    return {e.kind() == ErrorKind::ShapeMismatch ? 422 : 400, e.what()};
  }
}

class MockServer {
 public:
  explicit MockServer(MockMode mode = MockMode::Echo) : mode_(mode) {
    server_.set_payload_max_length(kMaxPayload + 1);
    server_.Post(kPath, [this](const httplib::Request& req, httplib::Response& res) {
      ++requests_;
      const auto [status, body] = mock_respond(req.body, mode_);
      res.status = status;
      res.set_content(body, status == 200 ? "application/octet-stream" : "text/plain");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    if (port_ < 0) raise(ErrorKind::Transport, "mock server could not bind");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockServer() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  int port() const { return port_; }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int requests() const { return requests_; }

 private:
  MockMode mode_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
  std::atomic<int> requests_{0};
};

// ---------------------------------------------------------------------------
// Client

/// POSTs a raw body; returns (status, body). Connection failures and
/// timeouts raise Transport.
inline std::pair<int, std::string> post(const std::string& endpoint, const std::string& body,
                                        std::chrono::seconds timeout = std::chrono::seconds(120)) {
  httplib::Client client(endpoint);
  if (!client.is_valid()) raise(ErrorKind::Transport, "invalid endpoint '" + endpoint + "'");
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  auto res = client.Post(kPath, body, "application/octet-stream");
  if (!res) raise(ErrorKind::Transport, "request to " + endpoint + " failed: " + httplib::to_string(res.error()));
  return {res->status, res->body};
}

template <typename Real>
class RemoteDenoiser : public guidance::Denoiser<Real> {
 public:
  RemoteDenoiser(std::string endpoint, double cfg_scale = 100.0,
                 std::chrono::seconds timeout = std::chrono::seconds(120))
      : endpoint_(std::move(endpoint)), cfg_(cfg_scale), timeout_(timeout) {}

  Video<Real> denoise(const Video<Real>& Vt, const guidance::Query& q, const Condition& cond) override {
    Request r;
    r.shape = Vt.shape();
    r.timestep = q.timestep;
    r.cfg_scale = cfg_;
    r.condition = cond;
    r.video.assign(Vt.data.begin(), Vt.data.end());
    const std::string body = encode_request(r);
    if (body.size() > kMaxPayload) raise(ErrorKind::Transport, "request exceeds the 256 MB payload limit");
    const auto [status, reply] = post(endpoint_, body, timeout_);
    if (status == 400) raise(ErrorKind::Protocol, "server rejected the request frame: " + reply);
    if (status == 422) raise(ErrorKind::ShapeMismatch, "server reported a shape mismatch: " + reply);
    if (status != 200) raise(ErrorKind::Transport, "server returned HTTP " + std::to_string(status));
    auto [shape, eps] = decode_response(reply);
    if (shape != Vt.shape()) raise(ErrorKind::ShapeMismatch, "response shape differs from the request");
    Video<Real> out(Vt.frames, Vt.height, Vt.width);
    for (std::size_t i = 0; i < eps.size(); ++i) out.data[i] = static_cast<Real>(eps[i]);
    return out;
  }

  double cfg_scale() const { return cfg_; }

 private:
  std::string endpoint_;
  double cfg_;
  std::chrono::seconds timeout_;
};

}  // namespace dreamphys::protocol
