#pragma once

#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "abrl/mdp.hpp"
#include "abrl/net.hpp"
#include "abrl/plant.hpp"
#include "abrl/rollout.hpp"
#include "abrl/wire.hpp"

extern "C" char** environ;

namespace abrl {

/// Client-side environment endpoint speaking the wire protocol.  Strict
/// request-reply: every call sends one message and blocks for its answer.
class RemoteEnv : public EnvHandle {
 public:
  explicit RemoteEnv(TcpConn conn) : conn_(std::move(conn)) {}

  /// Connect, handshake, and validate that the server's plant matches what
  /// the learner mirrors locally (muscle count and dt must agree exactly).
  static std::unique_ptr<RemoteEnv> open(const std::string& host,
                                         std::uint16_t port,
                                         std::size_t expect_muscles,
                                         double expect_dt,
                                         long recv_timeout_ms = 30000) {
    TcpConn conn = TcpConn::connect(host, port);
    conn.set_recv_timeout_ms(recv_timeout_ms);
    wire::send_message(conn, wire::make_hello());
    wire::json reply;
    if (!wire::recv_message(conn, reply))
      throw NetError("worker closed connection during handshake");
    const std::string type = wire::type_of(reply);
    if (type == wire::kError)
      throw wire::RemoteError(reply.value("message", "handshake rejected"));
    if (type != wire::kHello) throw wire::WireError("expected HELLO reply");
    if (reply.at("version").get<std::uint64_t>() != wire::kProtocolVersion)
      throw wire::WireError("protocol version mismatch");
    if (reply.at("n_muscles").get<std::size_t>() != expect_muscles)
      throw wire::WireError("worker plant has a different muscle count");
    if (reply.at("dt").get<double>() != expect_dt)
      throw wire::WireError("worker plant has a different dt");
    return std::make_unique<RemoteEnv>(std::move(conn));
  }

  EnvReset reset(std::uint64_t seed, double initial_phi) override {
    wire::send_message(conn_, wire::make_reset(seed, initial_phi));
    const wire::json reply = expect_reply();
    if (wire::type_of(reply) != wire::kResetOk)
      throw wire::WireError("expected RESET_OK, got " + wire::type_of(reply));
    EnvReset r;
    r.state.phi = reply.at("phi").get<double>();
    r.state.phi_dot = reply.at("phi_dot").get<double>();
    r.omega_caps = reply.at("omega_caps").get<std::vector<double>>();
    return r;
  }

  EnvStep step(const ActionDelta& delta) override {
    wire::send_message(conn_, wire::make_step(delta.omega));
    const wire::json reply = expect_reply();
    const std::string type = wire::type_of(reply);
    if (type == wire::kCrashed) return {true, {}};
    if (type != wire::kStepOk)
      throw wire::WireError("expected STEP_OK or CRASHED, got " + type);
    return {false,
            {reply.at("phi").get<double>(), reply.at("phi_dot").get<double>()}};
  }

  /// Polite end-of-service; best effort.
  void shutdown() {
    wire::send_message(conn_, wire::make_shutdown());
    wire::json reply;
    wire::recv_message(conn_, reply);
  }

 private:
  wire::json expect_reply() {
    wire::json reply;
    if (!wire::recv_message(conn_, reply))
      throw NetError("worker closed connection");
    if (wire::type_of(reply) == wire::kError)
      throw wire::RemoteError(reply.value("message", "remote error"));
    return reply;
  }

  TcpConn conn_;
};

/// How to start a local environment-server process.  The command must print
/// "LISTENING <port>" on its stdout once it accepts connections (serve-env
/// with port 0 does).
struct SpawnCommand {
  std::string exe;
  std::vector<std::string> args;  // arguments after argv[0]
};

/// A set of environment endpoints the learner rolls episodes on: either
/// externally managed addresses or locally spawned server processes.  The
/// pool never grows beyond the endpoints it was given.
class WorkerPool {
 public:
  struct Worker {
    std::string host;
    std::uint16_t port = 0;
    std::optional<SpawnCommand> spawn;  // set for locally spawned workers
    pid_t pid = -1;
    int stdout_fd = -1;
    std::unique_ptr<RemoteEnv> env;  // null when dead
    bool alive() const { return env != nullptr; }
  };

  WorkerPool(std::size_t expect_muscles, double expect_dt,
             long recv_timeout_ms = 30000)
      : expect_muscles_(expect_muscles),
        expect_dt_(expect_dt),
        recv_timeout_ms_(recv_timeout_ms) {}

  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  ~WorkerPool() {
    try {
      shutdown_all();
    } catch (...) {
    }
  }

  std::size_t size() const { return workers_.size(); }
  Worker& worker(std::size_t i) { return workers_.at(i); }

  std::size_t alive_count() const {
    std::size_t n = 0;
    for (const auto& w : workers_)
      if (w.alive()) ++n;
    return n;
  }

  /// Add and connect an externally managed endpoint.
  void add_remote(const std::string& host, std::uint16_t port) {
    Worker w;
    w.host = host;
    w.port = port;
    w.env = RemoteEnv::open(host, port, expect_muscles_, expect_dt_,
                            recv_timeout_ms_);
    workers_.push_back(std::move(w));
  }

  /// Spawn a local server process and connect to it.
  void add_spawned(const SpawnCommand& cmd) {
    Worker w;
    w.spawn = cmd;
    spawn_into(w);
    workers_.push_back(std::move(w));
  }

  /// Reconnect dead endpoints with bounded retry and backoff; locally
  /// spawned workers that exited are restarted.  Best effort: failures are
  /// logged and the worker stays dead until the next heal.
  void heal(int attempts = 3, int backoff_ms = 50) {
    for (std::size_t i = 0; i < workers_.size(); ++i) {
      Worker& w = workers_[i];
      if (w.alive()) continue;
      int delay = backoff_ms;
      for (int a = 0; a < attempts && !w.alive(); ++a) {
        if (a > 0) {
          std::this_thread::sleep_for(std::chrono::milliseconds(delay));
          delay *= 2;
        }
        try {
          if (w.spawn.has_value()) {
            reap(w);
            spawn_into(w);
          } else {
            w.env = RemoteEnv::open(w.host, w.port, expect_muscles_, expect_dt_,
                                    recv_timeout_ms_);
          }
        } catch (const std::exception& e) {
          std::cerr << "heal: worker " << i << " attempt " << (a + 1)
                    << " failed: " << e.what() << "\n";
        }
      }
    }
  }

  std::vector<EnvHandle*> alive_handles() {
    std::vector<EnvHandle*> out;
    for (auto& w : workers_)
      if (w.alive()) out.push_back(w.env.get());
    return out;
  }

  /// Run one collection over the currently alive endpoints, translating
  /// endpoint failures into dead workers (heal() can then revive them).
  CollectOutput collect(const PlantConfig& cfg, const CollectSpec& spec,
                        const PolicyFactory& factory) {
    std::vector<EnvHandle*> handles;
    std::vector<std::size_t> slots;
    for (std::size_t i = 0; i < workers_.size(); ++i) {
      if (workers_[i].alive()) {
        handles.push_back(workers_[i].env.get());
        slots.push_back(i);
      }
    }
    CollectOutput out = collect_episodes(handles, cfg, spec, factory);
    for (std::size_t pos : out.dead_envs) mark_dead(slots[pos]);
    return out;
  }

  void mark_dead(std::size_t i) { workers_.at(i).env.reset(); }

  /// Hard-kill a locally spawned worker (failure-injection in tests).
  void kill_worker(std::size_t i) {
    Worker& w = workers_.at(i);
    if (w.pid > 0) {
      ::kill(w.pid, SIGKILL);
      ::waitpid(w.pid, nullptr, 0);
      w.pid = -1;
    }
  }

  /// Stop using every endpoint.  Spawned workers get a polite SHUTDOWN and
  /// are reaped; externally managed ones just see their connection close
  /// (their server keeps running for other learners).
  void shutdown_all() {
    for (auto& w : workers_) {
      if (w.alive()) {
        if (w.spawn.has_value()) {
          try {
            w.env->shutdown();
          } catch (const std::exception&) {
          }
        }
        w.env.reset();
      }
      reap(w);
      if (w.stdout_fd >= 0) {
        ::close(w.stdout_fd);
        w.stdout_fd = -1;
      }
    }
  }

 private:
  void spawn_into(Worker& w) {
    const SpawnCommand& cmd = *w.spawn;
    int pipe_fds[2];
    if (::pipe(pipe_fds) != 0) throw NetError("pipe failed");

    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, pipe_fds[1], STDOUT_FILENO);
    posix_spawn_file_actions_addclose(&actions, pipe_fds[0]);
    posix_spawn_file_actions_addclose(&actions, pipe_fds[1]);

    std::vector<std::string> argv_store;
    argv_store.push_back(cmd.exe);
    for (const auto& a : cmd.args) argv_store.push_back(a);
    std::vector<char*> argv;
    for (auto& s : argv_store) argv.push_back(s.data());
    argv.push_back(nullptr);

    pid_t pid = -1;
    const int rc =
        ::posix_spawn(&pid, cmd.exe.c_str(), &actions, nullptr, argv.data(), environ);
    posix_spawn_file_actions_destroy(&actions);
    ::close(pipe_fds[1]);
    if (rc != 0) {
      ::close(pipe_fds[0]);
      throw NetError("posix_spawn failed for " + cmd.exe);
    }

    // The server prints "LISTENING <port>" once it is accepting.
    std::string line;
    char ch;
    while (true) {
      const ssize_t r = ::read(pipe_fds[0], &ch, 1);
      if (r <= 0) {
        ::close(pipe_fds[0]);
        ::waitpid(pid, nullptr, 0);
        throw NetError("spawned worker exited before announcing its port");
      }
      if (ch == '\n') break;
      line.push_back(ch);
      if (line.size() > 256) {
        ::close(pipe_fds[0]);
        ::kill(pid, SIGKILL);
        ::waitpid(pid, nullptr, 0);
        throw NetError("spawned worker wrote garbage instead of its port");
      }
    }
    const std::string prefix = "LISTENING ";
    if (line.rfind(prefix, 0) != 0) {
      ::close(pipe_fds[0]);
      ::kill(pid, SIGKILL);
      ::waitpid(pid, nullptr, 0);
      throw NetError("unexpected worker announcement: " + line);
    }

    w.host = "127.0.0.1";
    w.port = static_cast<std::uint16_t>(std::stoi(line.substr(prefix.size())));
    w.pid = pid;
    w.stdout_fd = pipe_fds[0];
    try {
      w.env = RemoteEnv::open(w.host, w.port, expect_muscles_, expect_dt_,
                              recv_timeout_ms_);
    } catch (...) {
      ::kill(pid, SIGKILL);
      reap(w);
      ::close(w.stdout_fd);
      w.stdout_fd = -1;
      throw;
    }
  }

  void reap(Worker& w) {
    if (w.pid > 0) {
      // Give the child a moment to exit on its own, then force it.
      for (int i = 0; i < 100; ++i) {
        if (::waitpid(w.pid, nullptr, WNOHANG) != 0) {
          w.pid = -1;
          return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
      }
      ::kill(w.pid, SIGKILL);
      ::waitpid(w.pid, nullptr, 0);
      w.pid = -1;
    }
  }

  std::size_t expect_muscles_;
  double expect_dt_;
  long recv_timeout_ms_;
  std::vector<Worker> workers_;
};

}  // namespace abrl
