#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "abrl/net.hpp"

namespace abrl::wire {

using json = nlohmann::json;

/// Protocol version carried in the HELLO handshake; both sides must match.
inline constexpr std::uint32_t kProtocolVersion = 1;

/// Upper bound on a frame body; anything larger is treated as malformed.
inline constexpr std::uint32_t kMaxFrameBytes = 1u << 20;

struct WireError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Thrown by the learner when the peer answers with an ERROR message.
struct RemoteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Message vocabulary.  Every frame is a 4-byte big-endian length prefix
// followed by a UTF-8 JSON object with a "type" field:
//   HELLO     {version}                 -> HELLO {version, n_muscles, dt}
//   RESET     {seed, initial_phi}       -> RESET_OK {phi, phi_dot, omega_caps}
//   STEP      {omega: [percent...]}     -> STEP_OK {phi, phi_dot} | CRASHED {}
//   SHUTDOWN  {}                        -> SHUTDOWN {} and the server exits
//   ERROR     {message}  (either direction; see server notes on recovery)
// Numbers are serialized as the shortest decimal that round-trips the exact
// 64-bit value, so states and actions survive the wire bit-identically.
inline constexpr const char* kHello = "HELLO";
inline constexpr const char* kReset = "RESET";
inline constexpr const char* kResetOk = "RESET_OK";
inline constexpr const char* kStep = "STEP";
inline constexpr const char* kStepOk = "STEP_OK";
inline constexpr const char* kCrashed = "CRASHED";
inline constexpr const char* kShutdown = "SHUTDOWN";
inline constexpr const char* kError = "ERROR";

inline void send_message(TcpConn& conn, const json& body) {
  const std::string text = body.dump();
  if (text.size() > kMaxFrameBytes) throw WireError("frame too large to send");
  const auto n = static_cast<std::uint32_t>(text.size());
  unsigned char prefix[4] = {static_cast<unsigned char>((n >> 24) & 0xff),
                             static_cast<unsigned char>((n >> 16) & 0xff),
                             static_cast<unsigned char>((n >> 8) & 0xff),
                             static_cast<unsigned char>(n & 0xff)};
  conn.send_all(prefix, 4);
  conn.send_all(text.data(), text.size());
}

/// Receives one frame.  Returns false on clean EOF.  Throws WireError on a
/// malformed frame (bad length, bad JSON, missing type).
inline bool recv_message(TcpConn& conn, json& out) {
  unsigned char prefix[4];
  if (!conn.recv_exact(prefix, 4)) return false;
  const std::uint32_t n = (static_cast<std::uint32_t>(prefix[0]) << 24) |
                          (static_cast<std::uint32_t>(prefix[1]) << 16) |
                          (static_cast<std::uint32_t>(prefix[2]) << 8) |
                          static_cast<std::uint32_t>(prefix[3]);
  if (n == 0 || n > kMaxFrameBytes)
    throw WireError("bad frame length: " + std::to_string(n));
  std::string body(n, '\0');
  if (!conn.recv_exact(body.data(), n))
    throw WireError("connection closed mid-frame");
  json parsed = json::parse(body, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded() || !parsed.is_object() || !parsed.contains("type") ||
      !parsed["type"].is_string())
    throw WireError("malformed message body");
  out = std::move(parsed);
  return true;
}

inline json make_hello() {
  return {{"type", kHello}, {"version", kProtocolVersion}};
}

inline json make_hello_reply(std::size_t n_muscles, double dt) {
  return {{"type", kHello},
          {"version", kProtocolVersion},
          {"n_muscles", n_muscles},
          {"dt", dt}};
}

inline json make_reset(std::uint64_t seed, double initial_phi) {
  return {{"type", kReset}, {"seed", seed}, {"initial_phi", initial_phi}};
}

inline json make_reset_ok(double phi, double phi_dot,
                          const std::vector<double>& omega_caps) {
  return {{"type", kResetOk},
          {"phi", phi},
          {"phi_dot", phi_dot},
          {"omega_caps", omega_caps}};
}

inline json make_step(const std::vector<double>& omega) {
  return {{"type", kStep}, {"omega", omega}};
}

inline json make_step_ok(double phi, double phi_dot) {
  return {{"type", kStepOk}, {"phi", phi}, {"phi_dot", phi_dot}};
}

inline json make_crashed() { return {{"type", kCrashed}}; }

inline json make_shutdown() { return {{"type", kShutdown}}; }

inline json make_error(const std::string& message) {
  return {{"type", kError}, {"message", message}};
}

inline std::string type_of(const json& msg) {
  return msg.at("type").get<std::string>();
}

}  // namespace abrl::wire
