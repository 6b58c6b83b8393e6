#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "abrl/mdp.hpp"
#include "abrl/net.hpp"
#include "abrl/plant.hpp"
#include "abrl/wire.hpp"

namespace abrl {

/// One environment-server process: hosts a single plant behind the wire
/// protocol and serves connections sequentially (the learner opens exactly
/// one).  Returns once a SHUTDOWN message arrives.
///
/// Error handling per the protocol contract:
///  - version mismatch at HELLO: ERROR reply, connection closed;
///  - unknown message type: ERROR reply, connection stays usable;
///  - malformed frame (bad length/JSON): ERROR reply, then the connection is
///    closed to resynchronize framing;
///  - a dropped connection just returns the server to accept().
class EnvServer {
 public:
  EnvServer(PlantConfig plant, EnvOptions opts)
      : plant_(std::move(plant)), opts_(opts) {
    plant_.validate();
  }

  /// Binds and serves until SHUTDOWN.  `on_ready` fires once with the bound
  /// port (after which connections are accepted) — the spawner handshake.
  void serve(const std::string& host, std::uint16_t port,
             const std::function<void(std::uint16_t)>& on_ready = {}) {
    TcpListener listener = TcpListener::bind(host, port);
    if (on_ready) on_ready(listener.port());
    bool shutdown = false;
    while (!shutdown) {
      TcpConn conn = listener.accept();
      shutdown = serve_connection(conn);
    }
  }

  /// Protocol loop over one established connection; returns true when a
  /// SHUTDOWN was processed.
  bool serve_connection(TcpConn& conn) {
    LocalEnv env(plant_, opts_);
    bool have_episode = false;
    json_t msg;
    while (true) {
      try {
        if (!wire::recv_message(conn, msg)) return false;  // peer went away
      } catch (const wire::WireError& e) {
        try_send_error(conn, e.what());
        return false;  // close to resync framing
      } catch (const NetError&) {
        return false;
      }

      const std::string type = wire::type_of(msg);
      try {
        if (type == wire::kHello) {
          const auto version = msg.at("version").get<std::uint64_t>();
          if (version != wire::kProtocolVersion) {
            try_send_error(conn, "protocol version mismatch: server speaks " +
                                     std::to_string(wire::kProtocolVersion));
            return false;
          }
          wire::send_message(
              conn, wire::make_hello_reply(plant_.n_muscles(), plant_.dt));
        } else if (type == wire::kReset) {
          const auto seed = msg.at("seed").get<std::uint64_t>();
          const auto initial_phi = msg.at("initial_phi").get<double>();
          const EnvReset r = env.reset(seed, initial_phi);
          have_episode = true;
          wire::send_message(
              conn, wire::make_reset_ok(r.state.phi, r.state.phi_dot, r.omega_caps));
        } else if (type == wire::kStep) {
          if (!have_episode) {
            wire::send_message(conn, wire::make_error("STEP before RESET"));
            continue;
          }
          const auto omega = msg.at("omega").get<std::vector<double>>();
          if (omega.size() != plant_.n_muscles()) {
            wire::send_message(
                conn, wire::make_error("omega size does not match muscle count"));
            continue;
          }
          bool in_range = true;
          for (double w : omega)
            if (!(w >= -1.0 && w <= 1.0)) in_range = false;
          if (!in_range) {
            wire::send_message(
                conn, wire::make_error("omega component outside [-1, 1] percent"));
            continue;
          }
          const EnvStep out = env.step(ActionDelta{omega});
          if (out.crashed) {
            have_episode = false;  // episode over; a new RESET is required
            wire::send_message(conn, wire::make_crashed());
          } else {
            wire::send_message(
                conn, wire::make_step_ok(out.state.phi, out.state.phi_dot));
          }
        } else if (type == wire::kShutdown) {
          wire::send_message(conn, wire::make_shutdown());
          return true;
        } else {
          wire::send_message(conn,
                             wire::make_error("unknown message type: " + type));
        }
      } catch (const wire::json::exception& e) {
        // Well-framed JSON with missing/mistyped fields: report, stay usable.
        try {
          wire::send_message(conn, wire::make_error(std::string("bad payload: ") +
                                                    e.what()));
        } catch (const NetError&) {
          return false;
        }
      } catch (const NetError&) {
        return false;
      }
    }
  }

  const PlantConfig& plant() const { return plant_; }

 private:
  using json_t = wire::json;

  static void try_send_error(TcpConn& conn, const std::string& message) {
    try {
      wire::send_message(conn, wire::make_error(message));
    } catch (const NetError&) {
    }
  }

  PlantConfig plant_;
  EnvOptions opts_;
};

}  // namespace abrl
