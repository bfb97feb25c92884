#pragma once

// TCP transport for the wire protocol: one reader and one worker thread per
// connection, a bounded input queue between them, and a scripted client.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <list>
#include <mutex>
#include <thread>

#include "arig/bench.hpp"
#include "arig/formats.hpp"
#include "arig/protocol.hpp"

namespace arig {

inline constexpr std::size_t kDefaultQueueDepth = 8;

namespace net {

inline void send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n <= 0) throw std::runtime_error("send failed");
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

// Buffered line reader over a socket.
class LineReader {
 public:
  explicit LineReader(int fd) : fd_(fd) {}

  // false on EOF or error.
  bool next(std::string& line) {
    for (;;) {
      const auto pos = buf_.find('\n');
      if (pos != std::string::npos) {
        line = buf_.substr(0, pos);
        buf_.erase(0, pos + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return true;
      }
      char tmp[65536];
      const ssize_t n = ::recv(fd_, tmp, sizeof tmp, 0);
      if (n <= 0) return false;
      buf_.append(tmp, static_cast<std::size_t>(n));
    }
  }

 private:
  int fd_;
  std::string buf_;
};

inline int connect_to(const std::string& host, int port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res) {
    throw std::runtime_error("cannot resolve " + host);
  }
  const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd < 0 || ::connect(fd, res->ai_addr, res->ai_addrlen) != 0) {
    ::freeaddrinfo(res);
    if (fd >= 0) ::close(fd);
    throw std::runtime_error("cannot connect to " + host + ":" + std::to_string(port));
  }
  ::freeaddrinfo(res);
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return fd;
}

}  // namespace net

struct ServerOptions {
  std::size_t queue_depth = kDefaultQueueDepth;
};

class GatewayServer {
 public:
  GatewayServer(const EngineConfig& cfg, std::shared_ptr<const EngineWeights> w, ServerOptions opt = {})
      : cfg_(cfg), w_(std::move(w)), opt_(opt) {
    cfg_.validate();
    Session probe(cfg_, w_);  // rejects a weight/config mismatch before listening
  }

  ~GatewayServer() { stop(); }

  // Binds 127.0.0.1:port (0 picks a free port) and returns the bound port.
  int start(int port, const std::string& bind_host = "127.0.0.1") {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw std::runtime_error("socket failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, bind_host.c_str(), &addr.sin_addr) != 1) {
      throw ConfigError("serve: bad bind address " + bind_host);
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
        ::listen(listen_fd_, 16) != 0) {
      ::close(listen_fd_);
      listen_fd_ = -1;
      throw std::runtime_error("cannot listen on port " + std::to_string(port));
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
    return port_;
  }

  void stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (accept_thread_.joinable()) accept_thread_.join();
    std::list<std::shared_ptr<Connection>> conns;
    {
      std::lock_guard lk(mu_);
      conns.swap(conns_);
    }
    for (auto& c : conns) c->shutdown();
    for (auto& c : conns) c->join();
  }

  // Blocks until stop() is called from elsewhere.
  void wait() {
    if (accept_thread_.joinable()) accept_thread_.join();
  }

  int port() const { return port_; }
  std::uint64_t connections_served() const { return served_; }

 private:
  struct Connection {
    int fd;
    ProtocolSession proto;
    std::size_t depth;
    std::mutex mu, write_mu;
    std::condition_variable cv;
    std::deque<std::string> queue;
    bool eof = false, closed = false;
    std::thread reader, worker;

    Connection(int f, const EngineConfig& cfg, std::shared_ptr<const EngineWeights> w, std::size_t d)
        : fd(f), proto(cfg, std::move(w)), depth(d) {}

    void write_line(const std::string& s) {
      std::lock_guard lk(write_mu);
      if (closed) return;
      try {
        net::send_all(fd, s + "\n");
      } catch (const std::exception&) {
        closed = true;
      }
    }

    void shutdown() { ::shutdown(fd, SHUT_RDWR); }

    void join() {
      if (reader.joinable()) reader.join();
      if (worker.joinable()) worker.join();
      ::close(fd);
    }

    void read_loop() {
      net::LineReader lr(fd);
      std::string line;
      while (lr.next(line)) {
        if (line.empty()) continue;
        std::unique_lock lk(mu);
        if (queue.size() >= depth) {
          queue.clear();
          lk.unlock();
          write_line(error_json("overflow", "input queue exceeded depth " + std::to_string(depth) +
                                                "; closing connection")
                         .dump());
          break;
        }
        queue.push_back(std::move(line));
        cv.notify_one();
      }
      std::lock_guard lk(mu);
      eof = true;
      cv.notify_one();
    }

    void work_loop() {
      for (;;) {
        std::string line;
        {
          std::unique_lock lk(mu);
          cv.wait(lk, [&] { return !queue.empty() || eof; });
          if (queue.empty()) break;
          line = std::move(queue.front());
          queue.pop_front();
        }
        Reply r = proto.handle(line);
        for (const auto& out : r.lines) write_line(out);
        if (r.close) break;
      }
      {
        std::lock_guard lk(write_mu);
        closed = true;
      }
      ::shutdown(fd, SHUT_RDWR);
    }
  };

  void accept_loop() {
    while (running_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (!running_) break;
        continue;
      }
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      auto c = std::make_shared<Connection>(fd, cfg_, w_, opt_.queue_depth);
      c->reader = std::thread([c] { c->read_loop(); });
      c->worker = std::thread([c] { c->work_loop(); });
      ++served_;
      std::lock_guard lk(mu_);
      reap();
      conns_.push_back(std::move(c));
    }
  }

  // Joins connections whose threads have finished.
  void reap() {
    for (auto it = conns_.begin(); it != conns_.end();) {
      auto& c = *it;
      bool done;
      {
        std::lock_guard lk(c->write_mu);
        done = c->closed;
      }
      if (done) {
        c->shutdown();
        c->join();
        it = conns_.erase(it);
      } else {
        ++it;
      }
    }
  }

  EngineConfig cfg_;
  std::shared_ptr<const EngineWeights> w_;
  ServerOptions opt_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> running_{false};
  std::atomic<std::uint64_t> served_{0};
  std::thread accept_thread_;
  std::mutex mu_;
  std::list<std::shared_ptr<Connection>> conns_;
};

struct DriveOptions {
  bool firehose = false;           // otherwise one frame every 1/fps seconds
  std::size_t max_in_flight = 4;   // firehose window, kept below the server queue depth
  std::size_t motion_display = 0;  // 0 requests full motion vectors
  bool base64 = false;
  bool teacher_forcing = false;
  bool send_reference = true;
};

struct Transcript {
  std::vector<std::string> sent;
  std::vector<std::string> received;
  std::vector<double> e2e_micros;  // per frame_out, send to receive
  std::vector<double> arrival_micros;  // per frame_out, since connect
  std::size_t frame_outs = 0;
  std::size_t errors = 0;
  bool complete = false;           // every frame answered and bye acknowledged
  std::string failure;
  double wall_seconds = 0;

  double fps() const { return wall_seconds > 0 ? frame_outs / wall_seconds : 0.0; }
  // Output rate after the first `warmup` frames, handshake and bye excluded.
  double steady_fps(std::size_t warmup) const {
    if (warmup == 0 || arrival_micros.size() <= warmup) return fps();
    const double span = arrival_micros.back() - arrival_micros[warmup - 1];
    return span > 0 ? 1e6 * static_cast<double>(arrival_micros.size() - warmup) / span : 0.0;
  }
};

// Streams a feature file to a gateway and records both directions.
inline Transcript client_drive(const StreamFile& stream, const EngineConfig& cfg,
                               const std::string& host, int port, const DriveOptions& opt = {}) {
  using clock = std::chrono::steady_clock;
  Transcript tr;
  const StreamSession ss = stream_to_inputs(stream, cfg, opt.teacher_forcing);
  int fd = -1;
  try {
    fd = net::connect_to(host, port);
  } catch (const std::exception& e) {
    tr.failure = e.what();
    return tr;
  }
  net::LineReader lr(fd);
  auto send = [&](const Json& j) {
    std::string s = j.dump();
    net::send_all(fd, s + "\n");
    tr.sent.push_back(std::move(s));
  };
  auto recv = [&](std::string& line) {
    if (!lr.next(line)) throw std::runtime_error("connection closed by server");
    tr.received.push_back(line);
    return Json::parse(line);
  };
  const auto start = clock::now();
  std::vector<clock::time_point> sent_at(ss.inputs.size());
  try {
    Json hello = {{"type", "hello"},
                  {"version", kProtocolVersion},
                  {"encoding", opt.base64 ? "base64" : "json"},
                  {"motion_display", opt.motion_display}};
    if (opt.send_reference && !ss.reference_motion.empty()) {
      hello["reference_motion"] = wire::vector_json(ss.reference_motion, opt.base64);
    }
    send(hello);
    std::string line;
    Json ack = recv(line);
    if (ack.value("type", "") != "hello") throw std::runtime_error("handshake failed: " + line);
    recv(line);  // config

    std::size_t next_send = 0, answered = 0;
    const auto period = std::chrono::duration<double>(1.0 / static_cast<double>(cfg.fps));
    while (answered < ss.inputs.size()) {
      const std::size_t window = opt.firehose ? opt.max_in_flight : 1;
      while (next_send < ss.inputs.size() && next_send - answered < window) {
        if (!opt.firehose) {
          std::this_thread::sleep_until(start + std::chrono::duration_cast<clock::duration>(period * next_send));
        }
        sent_at[next_send] = clock::now();
        send(frame_input_json(ss.inputs[next_send], opt.base64));
        ++next_send;
      }
      Json m = recv(line);
      const std::string type = m.value("type", "");
      if (type == "frame_out") {
        const auto idx = m.at("frame_index").get<std::uint64_t>();
        if (idx != answered) throw std::runtime_error("out-of-order frame_out " + std::to_string(idx));
        const auto now = clock::now();
        tr.e2e_micros.push_back(std::chrono::duration<double, std::micro>(now - sent_at[idx]).count());
        tr.arrival_micros.push_back(std::chrono::duration<double, std::micro>(now - start).count());
        ++tr.frame_outs;
        ++answered;
      } else if (type == "error") {
        ++tr.errors;
        throw std::runtime_error("server error: " + m.value("message", std::string()));
      }
    }
    send(Json{{"type", "bye"}});
    // A state line for the last frame may still precede the ack.
    for (;;) {
      const std::string type = recv(line).value("type", "");
      if (type == "bye") break;
      if (type == "error") throw std::runtime_error("server error at bye: " + line);
    }
    tr.complete = true;
  } catch (const std::exception& e) {
    tr.failure = e.what();
  }
  tr.wall_seconds = std::chrono::duration<double>(clock::now() - start).count();
  ::close(fd);
  return tr;
}

// Received lines with latency fields masked, one per line.
inline std::string masked_transcript(const Transcript& tr) {
  std::string out;
  for (const auto& l : tr.received) out += mask_latency(l) + "\n";
  return out;
}

}  // namespace arig
