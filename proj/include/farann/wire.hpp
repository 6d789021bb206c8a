#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <bit>
#include <cerrno>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "farann/common.hpp"
#include "farann/fabric.hpp"

namespace farann {

// ---------------------------------------------------------------------------
// TCP transport for the memory fabric, so clients in other processes can hit
// the same simulated region store. One request per frame, one response back.
//
//   request   opcode u8 | region u32 | offset u64 | len u64 | payload
//   response  status u8 | len u64 | payload     (status 0 ok, 1 error text)
//
// Opcode payloads (all integers little-endian):
//   1 REGISTER  len = region size, no payload     -> payload: region id u32
//   2 READ      region/offset/len, no payload     -> payload: len bytes
//   3 WRITE     len = payload size, payload bytes -> empty
//   4 DOORBELL  payload: count u32, then per op
//               kind u8 (0 read, 1 write) | region u32 | offset u64 | len u64
//               | payload bytes when kind is write
//               -> payload: count u32, then per read result: len u64 | bytes
//   5 RELEASE   region, no payload                -> empty
//   6 STATS     no payload                        -> reads u64 | writes u64 |
//               doorbell_batches u64 | bytes_moved u64 | time f64 bits u64

namespace wire {

inline constexpr u8 kRegister = 1;
inline constexpr u8 kRead = 2;
inline constexpr u8 kWrite = 3;
inline constexpr u8 kDoorbell = 4;
inline constexpr u8 kRelease = 5;
inline constexpr u8 kStats = 6;

inline constexpr std::size_t kRequestHeaderBytes = 21;
inline constexpr std::size_t kResponseHeaderBytes = 9;

struct RequestHeader {
  u8 op = 0;
  u32 region = 0;
  u64 offset = 0;
  u64 len = 0;
};

inline void encode_request(std::byte* dst, const RequestHeader& h) {
  dst[0] = std::byte(h.op);
  store_u32(dst + 1, h.region);
  store_u64(dst + 5, h.offset);
  store_u64(dst + 13, h.len);
}

inline RequestHeader decode_request(const std::byte* src) {
  RequestHeader h;
  h.op = std::to_integer<u8>(src[0]);
  h.region = load_u32(src + 1);
  h.offset = load_u64(src + 5);
  h.len = load_u64(src + 13);
  return h;
}

inline void send_exact(int fd, const void* buf, std::size_t n) {
  const char* p = static_cast<const char*>(buf);
  while (n > 0) {
    ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw FabricError("wire: send failed: " + std::string(std::strerror(errno)));
    }
    p += w;
    n -= std::size_t(w);
  }
}

// Returns false on a clean end-of-stream before the first byte.
inline bool recv_exact(int fd, void* buf, std::size_t n) {
  char* p = static_cast<char*>(buf);
  std::size_t got = 0;
  while (got < n) {
    ssize_t r = ::recv(fd, p + got, n - got, 0);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw FabricError("wire: recv failed: " + std::string(std::strerror(errno)));
    }
    if (r == 0) {
      if (got == 0) return false;
      throw FabricError("wire: peer closed mid-frame");
    }
    got += std::size_t(r);
  }
  return true;
}

inline std::vector<std::byte> encode_doorbell(std::span<const FabricOp> ops) {
  std::vector<std::byte> out;
  append_u32(out, u32(ops.size()));
  for (const FabricOp& op : ops) {
    out.push_back(std::byte(op.kind == FabricOp::Kind::Write ? 1 : 0));
    append_u32(out, op.region.id);
    append_u64(out, op.offset);
    append_u64(out, op.len);
    if (op.kind == FabricOp::Kind::Write) append_bytes(out, op.payload);
  }
  return out;
}

inline std::vector<FabricOp> decode_doorbell(std::span<const std::byte> payload) {
  if (payload.size() < 4) throw ParseError("doorbell payload shorter than count", payload.size());
  u32 count = load_u32(payload.data());
  std::vector<FabricOp> ops;
  ops.reserve(count);
  std::size_t at = 4;
  for (u32 i = 0; i < count; ++i) {
    if (at + 21 > payload.size()) throw ParseError("doorbell op descriptor truncated", at);
    u8 kind = std::to_integer<u8>(payload[at]);
    if (kind > 1) throw ParseError("doorbell op kind unknown", at);
    FabricOp op;
    op.kind = kind == 1 ? FabricOp::Kind::Write : FabricOp::Kind::Read;
    op.region = {load_u32(payload.data() + at + 1), 0};
    op.offset = load_u64(payload.data() + at + 5);
    op.len = load_u64(payload.data() + at + 13);
    at += 21;
    if (kind == 1) {
      if (at + op.len > payload.size()) throw ParseError("doorbell write payload truncated", at);
      op.payload.assign(payload.begin() + at, payload.begin() + at + op.len);
      at += op.len;
    }
    ops.push_back(std::move(op));
  }
  if (at != payload.size()) throw ParseError("doorbell payload has trailing bytes", at);
  return ops;
}

}  // namespace wire

// Serves one MemoryFabric over loopback TCP. Each accepted connection gets a
// handler thread; the fabric's own lock serializes the actual memory ops.
class FabricDaemon {
 public:
  explicit FabricDaemon(MemoryFabric& fabric) : fabric_(&fabric) {}
  ~FabricDaemon() { stop(); }

  FabricDaemon(const FabricDaemon&) = delete;
  FabricDaemon& operator=(const FabricDaemon&) = delete;

  // Binds an ephemeral loopback port and starts accepting. Returns the port.
  u16 start() {
    require(listen_fd_ < 0, "FabricDaemon: already started");
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw FabricError("wire: socket failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(listen_fd_, 16) != 0) {
      ::close(listen_fd_);
      listen_fd_ = -1;
      throw FabricError("wire: bind/listen failed");
    }
    socklen_t alen = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &alen);
    port_ = ntohs(addr.sin_port);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
    return port_;
  }

  u16 port() const { return port_; }

  void stop() {
    if (listen_fd_ < 0) return;
    running_ = false;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (acceptor_.joinable()) acceptor_.join();
    {
      std::lock_guard lock(conn_mu_);
      for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
    }
    for (auto& t : handlers_) t.join();
    handlers_.clear();
    listen_fd_ = -1;
  }

 private:
  void accept_loop() {
    while (running_) {
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR) continue;
        break;  // listener closed
      }
      std::lock_guard lock(conn_mu_);
      conn_fds_.push_back(fd);
      handlers_.emplace_back([this, fd] { serve(fd); });
    }
  }

  void serve(int fd) {
    try {
      std::byte head[wire::kRequestHeaderBytes];
      while (wire::recv_exact(fd, head, sizeof(head))) {
        wire::RequestHeader req = wire::decode_request(head);
        std::vector<std::byte> in;
        if (req.op == wire::kWrite || req.op == wire::kDoorbell) {
          in.resize(req.len);
          if (req.len > 0 && !wire::recv_exact(fd, in.data(), in.size()))
            throw FabricError("wire: peer closed mid-frame");
        }
        std::vector<std::byte> out;
        u8 status = 0;
        try {
          out = handle(req, in);
        } catch (const std::exception& e) {
          status = 1;
          const char* what = e.what();
          out.assign(reinterpret_cast<const std::byte*>(what),
                     reinterpret_cast<const std::byte*>(what) + std::strlen(what));
        }
        std::byte rhead[wire::kResponseHeaderBytes];
        rhead[0] = std::byte(status);
        store_u64(rhead + 1, out.size());
        wire::send_exact(fd, rhead, sizeof(rhead));
        if (!out.empty()) wire::send_exact(fd, out.data(), out.size());
      }
    } catch (const FabricError&) {
      // connection torn down mid-frame; drop it
    }
    ::close(fd);
  }

  std::vector<std::byte> handle(const wire::RequestHeader& req, std::span<const std::byte> in) {
    std::vector<std::byte> out;
    switch (req.op) {
      case wire::kRegister: {
        RegionHandle h = fabric_->register_region(req.len);
        append_u32(out, h.id);
        return out;
      }
      case wire::kRead:
        return fabric_->read({req.region, 0}, req.offset, req.len);
      case wire::kWrite:
        fabric_->write({req.region, 0}, req.offset, in);
        return out;
      case wire::kDoorbell: {
        auto ops = wire::decode_doorbell(in);
        auto results = fabric_->doorbell(ops);
        append_u32(out, u32(results.size()));
        for (const auto& r : results) {
          append_u64(out, r.size());
          append_bytes(out, r);
        }
        return out;
      }
      case wire::kRelease:
        fabric_->release_region({req.region, 0});
        return out;
      case wire::kStats: {
        FabricStats s = fabric_->stats();
        append_u64(out, s.reads);
        append_u64(out, s.writes);
        append_u64(out, s.doorbell_batches);
        append_u64(out, s.bytes_moved);
        append_u64(out, std::bit_cast<u64>(s.simulated_time_charged));
        return out;
      }
      default:
        throw FabricError("wire: unknown opcode " + std::to_string(req.op));
    }
  }

  MemoryFabric* fabric_;
  int listen_fd_ = -1;
  u16 port_ = 0;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex conn_mu_;
  std::vector<int> conn_fds_;
  std::vector<std::thread> handlers_;
};

// Client side: the same operation set as MemoryFabric, transported over one
// connection. A mutex keeps request/response pairs framed; server-side errors
// come back as FabricError with the original message.
class RemoteFabric {
 public:
  RemoteFabric(const std::string& host, u16 port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw FabricError("wire: socket failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd_);
      throw FabricError("wire: bad host address " + host);
    }
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd_);
      throw FabricError("wire: connect failed");
    }
  }

  ~RemoteFabric() {
    if (fd_ >= 0) ::close(fd_);
  }

  RemoteFabric(const RemoteFabric&) = delete;
  RemoteFabric& operator=(const RemoteFabric&) = delete;

  RegionHandle register_region(u64 size) {
    auto out = roundtrip({wire::kRegister, 0, 0, size}, {});
    if (out.size() != 4) throw FabricError("wire: bad register response");
    return {load_u32(out.data()), size};
  }

  void release_region(RegionHandle h) { roundtrip({wire::kRelease, h.id, 0, 0}, {}); }

  std::vector<std::byte> read(RegionHandle h, u64 offset, u64 len) {
    auto out = roundtrip({wire::kRead, h.id, offset, len}, {});
    if (out.size() != len) throw FabricError("wire: short read response");
    return out;
  }

  void write(RegionHandle h, u64 offset, std::span<const std::byte> data) {
    roundtrip({wire::kWrite, h.id, offset, data.size()}, data);
  }

  std::vector<std::vector<std::byte>> doorbell(std::span<const FabricOp> ops) {
    auto payload = wire::encode_doorbell(ops);
    auto out = roundtrip({wire::kDoorbell, 0, 0, payload.size()}, payload);
    if (out.size() < 4) throw FabricError("wire: bad doorbell response");
    u32 count = load_u32(out.data());
    std::vector<std::vector<std::byte>> results;
    results.reserve(count);
    std::size_t at = 4;
    for (u32 i = 0; i < count; ++i) {
      if (at + 8 > out.size()) throw FabricError("wire: doorbell response truncated");
      u64 len = load_u64(out.data() + at);
      at += 8;
      if (at + len > out.size()) throw FabricError("wire: doorbell response truncated");
      results.emplace_back(out.begin() + at, out.begin() + at + len);
      at += len;
    }
    return results;
  }

  FabricStats stats() {
    auto out = roundtrip({wire::kStats, 0, 0, 0}, {});
    if (out.size() != 40) throw FabricError("wire: bad stats response");
    FabricStats s;
    s.reads = load_u64(out.data());
    s.writes = load_u64(out.data() + 8);
    s.doorbell_batches = load_u64(out.data() + 16);
    s.bytes_moved = load_u64(out.data() + 24);
    s.simulated_time_charged = std::bit_cast<double>(load_u64(out.data() + 32));
    return s;
  }

 private:
  std::vector<std::byte> roundtrip(const wire::RequestHeader& req,
                                   std::span<const std::byte> payload) {
    std::lock_guard lock(mu_);
    std::byte head[wire::kRequestHeaderBytes];
    wire::encode_request(head, req);
    wire::send_exact(fd_, head, sizeof(head));
    if (!payload.empty()) wire::send_exact(fd_, payload.data(), payload.size());

    std::byte rhead[wire::kResponseHeaderBytes];
    if (!wire::recv_exact(fd_, rhead, sizeof(rhead)))
      throw FabricError("wire: server closed connection");
    u8 status = std::to_integer<u8>(rhead[0]);
    u64 len = load_u64(rhead + 1);
    std::vector<std::byte> out(len);
    if (len > 0 && !wire::recv_exact(fd_, out.data(), out.size()))
      throw FabricError("wire: server closed mid-frame");
    if (status != 0)
      throw FabricError("wire: remote error: " +
                        std::string(reinterpret_cast<const char*>(out.data()), out.size()));
    return out;
  }

  int fd_ = -1;
  std::mutex mu_;
};

}  // namespace farann
