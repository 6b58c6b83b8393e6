#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <utility>

namespace abrl {

struct NetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline std::string errno_text(const char* what) {
  return std::string(what) + ": " + std::strerror(errno);
}
}  // namespace detail

/// Move-only RAII wrapper around a connected stream socket.
class TcpConn {
 public:
  TcpConn() = default;
  explicit TcpConn(int fd) : fd_(fd) {}
  TcpConn(const TcpConn&) = delete;
  TcpConn& operator=(const TcpConn&) = delete;
  TcpConn(TcpConn&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
  TcpConn& operator=(TcpConn&& other) noexcept {
    if (this != &other) {
      close();
      fd_ = std::exchange(other.fd_, -1);
    }
    return *this;
  }
  ~TcpConn() { close(); }

  static TcpConn connect(const std::string& host, std::uint16_t port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(),
                                 &hints, &res);
    if (rc != 0)
      throw NetError("resolve " + host + ": " + gai_strerror(rc));
    int fd = -1;
    int saved_errno = 0;
    for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
      fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
      if (fd < 0) {
        saved_errno = errno;
        continue;
      }
      if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
      saved_errno = errno;
      ::close(fd);
      fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) {
      errno = saved_errno;
      throw NetError(detail::errno_text(("connect " + host).c_str()));
    }
    TcpConn conn(fd);
    conn.set_nodelay();
    return conn;
  }

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }

  /// Per-step request-reply latency matters far more than throughput here.
  void set_nodelay() {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }

  void set_recv_timeout_ms(long ms) {
    timeval tv{};
    tv.tv_sec = ms / 1000;
    tv.tv_usec = (ms % 1000) * 1000;
    ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  }

  void send_all(const void* data, std::size_t n) {
    const char* p = static_cast<const char*>(data);
    while (n > 0) {
      const ssize_t sent = ::send(fd_, p, n, MSG_NOSIGNAL);
      if (sent < 0) {
        if (errno == EINTR) continue;
        throw NetError(detail::errno_text("send"));
      }
      p += sent;
      n -= static_cast<std::size_t>(sent);
    }
  }

  /// Reads exactly n bytes.  Returns false on a clean EOF before the first
  /// byte; throws on errors or EOF mid-buffer.
  bool recv_exact(void* data, std::size_t n) {
    char* p = static_cast<char*>(data);
    std::size_t got = 0;
    while (got < n) {
      const ssize_t r = ::recv(fd_, p + got, n - got, 0);
      if (r == 0) {
        if (got == 0) return false;
        throw NetError("connection closed mid-frame");
      }
      if (r < 0) {
        if (errno == EINTR) continue;
        throw NetError(detail::errno_text("recv"));
      }
      got += static_cast<std::size_t>(r);
    }
    return true;
  }

  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
};

/// Listening socket bound to a host/port; port 0 picks an ephemeral port.
class TcpListener {
 public:
  TcpListener() = default;
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;
  TcpListener(TcpListener&& other) noexcept
      : fd_(std::exchange(other.fd_, -1)), port_(other.port_) {}
  TcpListener& operator=(TcpListener&& other) noexcept {
    if (this != &other) {
      close();
      fd_ = std::exchange(other.fd_, -1);
      port_ = other.port_;
    }
    return *this;
  }
  ~TcpListener() { close(); }

  static TcpListener bind(const std::string& host, std::uint16_t port) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw NetError(detail::errno_text("socket"));
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (host.empty() || host == "0.0.0.0") {
      addr.sin_addr.s_addr = htonl(INADDR_ANY);
    } else if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd);
      throw NetError("bad listen address: " + host);
    }
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      const std::string msg = detail::errno_text("bind");
      ::close(fd);
      throw NetError(msg);
    }
    if (::listen(fd, 16) != 0) {
      const std::string msg = detail::errno_text("listen");
      ::close(fd);
      throw NetError(msg);
    }
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&bound), &len);

    TcpListener l;
    l.fd_ = fd;
    l.port_ = ntohs(bound.sin_port);
    return l;
  }

  std::uint16_t port() const { return port_; }
  int fd() const { return fd_; }

  TcpConn accept() {
    while (true) {
      const int cfd = ::accept(fd_, nullptr, nullptr);
      if (cfd >= 0) {
        TcpConn conn(cfd);
        conn.set_nodelay();
        return conn;
      }
      if (errno == EINTR) continue;
      throw NetError(detail::errno_text("accept"));
    }
  }

  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

}  // namespace abrl
