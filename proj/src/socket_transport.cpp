#include "loomnet/socket_transport.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <thread>

#include <json.hpp>

namespace loomnet {

namespace {

double raw_now_us() {
  timespec ts;
  clock_gettime(CLOCK_MONOTONIC, &ts);
  return double(ts.tv_sec) * 1e6 + double(ts.tv_nsec) / 1e3;
}

void sleep_us(double us) {
  if (us <= 0) return;
  // Short waits busy-spin for accuracy; real sleeps handle the rest.
  if (us < 50) {
    double until = raw_now_us() + us;
    while (raw_now_us() < until) {
    }
  } else {
    std::this_thread::sleep_for(std::chrono::microseconds(int64_t(us)));
  }
}

std::pair<std::string, uint16_t> split_addr(const std::string& addr) {
  auto pos = addr.rfind(':');
  if (pos == std::string::npos)
    throw TransportError("address needs host:port, got '" + addr + "'");
  int port = std::stoi(addr.substr(pos + 1));
  if (port <= 0 || port > 65535) throw TransportError("bad port in '" + addr + "'");
  return {addr.substr(0, pos), uint16_t(port)};
}

sockaddr_in make_sockaddr(const std::string& host, uint16_t port) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(port);
  std::string h = host.empty() || host == "localhost" ? "127.0.0.1" : host;
  if (inet_pton(AF_INET, h.c_str(), &sa.sin_addr) != 1)
    throw TransportError("cannot parse host address '" + host + "'");
  return sa;
}

int listen_on(uint16_t port, uint16_t* bound_port) {
  int fd = socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw TransportError("socket: " + std::string(strerror(errno)));
  int one = 1;
  setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_addr.s_addr = htonl(INADDR_ANY);
  sa.sin_port = htons(port);
  if (bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) < 0 || listen(fd, 64) < 0) {
    int err = errno;
    close(fd);
    throw TransportError("bind/listen: " + std::string(strerror(err)));
  }
  if (bound_port) {
    socklen_t len = sizeof sa;
    getsockname(fd, reinterpret_cast<sockaddr*>(&sa), &len);
    *bound_port = ntohs(sa.sin_port);
  }
  return fd;
}

// Connects with retry: the listener may come up slightly later.
int connect_retry(const std::string& host, uint16_t port, double timeout_s) {
  auto sa = make_sockaddr(host, port);
  double deadline = raw_now_us() + timeout_s * 1e6;
  for (;;) {
    int fd = socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw TransportError("socket: " + std::string(strerror(errno)));
    if (connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) == 0) return fd;
    close(fd);
    if (raw_now_us() > deadline)
      throw TransportError("connect to " + host + ":" + std::to_string(port) + " timed out");
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

void write_all(int fd, const uint8_t* data, size_t len) {
  while (len > 0) {
    ssize_t n = ::send(fd, data, len, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError("send: " + std::string(strerror(errno)));
    }
    data += n;
    len -= size_t(n);
  }
}

void send_frame(int fd, const WireFrame& f) {
  auto bytes = f.encode();
  write_all(fd, bytes.data(), bytes.size());
}

// Blocking read of exactly one frame; false on orderly EOF at a boundary.
bool read_frame(int fd, WireFrame* out) {
  std::vector<uint8_t> buf;
  uint8_t tmp[65536];
  for (;;) {
    ssize_t n = ::recv(fd, tmp, sizeof tmp, 0);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    if (n == 0) return false;
    buf.insert(buf.end(), tmp, tmp + n);
    size_t used = WireFrame::decode(buf.data(), buf.size(), out);
    if (used == buf.size()) return true;
    if (used != 0) throw TransportError("trailing bytes after rendezvous frame");
  }
}

// Reads exactly n bytes; used for the fixed-size mesh handshake so any data
// frames already queued behind it stay in the kernel buffer for the receiver.
bool read_exact(int fd, uint8_t* buf, size_t n) {
  while (n > 0) {
    ssize_t r = ::recv(fd, buf, n, 0);
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) return false;
    buf += r;
    n -= size_t(r);
  }
  return true;
}

std::string peer_ip(int fd) {
  sockaddr_in sa{};
  socklen_t len = sizeof sa;
  if (getpeername(fd, reinterpret_cast<sockaddr*>(&sa), &len) < 0) return "127.0.0.1";
  char ip[INET_ADDRSTRLEN] = {0};
  inet_ntop(AF_INET, &sa.sin_addr, ip, sizeof ip);
  return ip;
}

struct PeerAddr {
  std::string host;
  uint16_t port;
};

}  // namespace

SocketEndpoint::SocketEndpoint(SocketOptions opts) : opts_(std::move(opts)) {
  if (opts_.rank < 0 || opts_.rank >= opts_.num_ranks)
    throw TransportError("rank out of range");
  peer_fd_.assign(opts_.num_ranks, -1);
  rendezvous();
  for (int peer = 0; peer < opts_.num_ranks; peer++) {
    if (peer == opts_.rank) continue;
    int one = 1;
    setsockopt(peer_fd_[peer], IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    receivers_.emplace_back([this, peer] { receiver_loop(peer); });
  }
  sender_ = std::thread([this] { sender_loop(); });
}

void SocketEndpoint::rendezvous() {
  uint16_t data_port = 0;
  listen_fd_ = listen_on(0, &data_port);

  std::vector<PeerAddr> peers(opts_.num_ranks);
  if (opts_.rank == 0) {
    auto [chost, cport] = split_addr(opts_.coordinator);
    (void)chost;  // rank 0 binds locally on the coordinator port
    int rv_fd = listen_on(cport, nullptr);
    std::vector<int> regs(opts_.num_ranks, -1);
    peers[0] = {"127.0.0.1", data_port};
    int registered = 1;
    std::string failure;
    while (registered < opts_.num_ranks) {
      int fd = accept(rv_fd, nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR) continue;
        throw TransportError("rendezvous accept: " + std::string(strerror(errno)));
      }
      WireFrame reg;
      if (!read_frame(fd, &reg)) {
        close(fd);
        continue;
      }
      auto j = nlohmann::json::parse(reg.payload.begin(), reg.payload.end());
      int r = j.at("rank").get<int>();
      if (r < 0 || r >= opts_.num_ranks || regs[r] != -1) {
        failure = "duplicate or out-of-range rank " + std::to_string(r) + " at rendezvous";
        nlohmann::json err{{"error", failure}};
        std::string etext = err.dump();
        WireFrame ef;
        ef.payload.assign(etext.begin(), etext.end());
        send_frame(fd, ef);
        close(fd);
        for (int ofd : regs)
          if (ofd >= 0) close(ofd);
        close(rv_fd);
        throw TransportError(failure);
      }
      regs[r] = fd;
      peers[r] = {peer_ip(fd), uint16_t(j.at("port").get<int>())};
      registered++;
    }
    epoch_us_ = raw_now_us();
    nlohmann::json reply;
    reply["epoch_us"] = epoch_us_;
    for (int r = 0; r < opts_.num_ranks; r++)
      reply["peers"].push_back({{"rank", r}, {"host", peers[r].host}, {"port", peers[r].port}});
    std::string text = reply.dump();
    WireFrame rf;
    rf.payload.assign(text.begin(), text.end());
    for (int r = 1; r < opts_.num_ranks; r++) {
      send_frame(regs[r], rf);
      close(regs[r]);
    }
    close(rv_fd);
  } else {
    auto [chost, cport] = split_addr(opts_.coordinator);
    int fd = connect_retry(chost, cport, opts_.connect_timeout_s);
    nlohmann::json reg{{"rank", opts_.rank}, {"port", data_port}};
    WireFrame regf;
    std::string text = reg.dump();
    regf.tag = uint64_t(opts_.rank);
    regf.payload.assign(text.begin(), text.end());
    send_frame(fd, regf);
    WireFrame reply;
    if (!read_frame(fd, &reply)) {
      close(fd);
      throw TransportError("rendezvous closed before the host map arrived");
    }
    close(fd);
    auto j = nlohmann::json::parse(reply.payload.begin(), reply.payload.end());
    if (j.contains("error")) throw TransportError(j.at("error").get<std::string>());
    epoch_us_ = j.at("epoch_us").get<double>();
    for (const auto& p : j.at("peers"))
      peers[p.at("rank").get<int>()] = {p.at("host").get<std::string>(),
                                        uint16_t(p.at("port").get<int>())};
  }

  // Mesh: connect to lower ranks, accept the higher ones. The handshake frame
  // carries the connecting rank in its tag.
  for (int peer = 0; peer < opts_.rank; peer++) {
    int fd = connect_retry(peers[peer].host, peers[peer].port, opts_.connect_timeout_s);
    WireFrame hs;
    hs.tag = uint64_t(opts_.rank);
    send_frame(fd, hs);
    peer_fd_[peer] = fd;
  }
  for (int need = opts_.num_ranks - 1 - opts_.rank; need > 0;) {
    int fd = accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      throw TransportError("mesh accept: " + std::string(strerror(errno)));
    }
    uint8_t header[WireFrame::kHeaderBytes];
    if (!read_exact(fd, header, sizeof header)) {
      close(fd);
      continue;
    }
    WireFrame hs;
    if (WireFrame::decode(header, sizeof header, &hs) != sizeof header) {
      close(fd);
      throw TransportError("short mesh handshake");
    }
    int r = int(hs.tag);
    if (r <= opts_.rank || r >= opts_.num_ranks || peer_fd_[r] != -1) {
      close(fd);
      throw TransportError("bad mesh handshake from rank " + std::to_string(r));
    }
    peer_fd_[r] = fd;
    need--;
  }
}

SocketEndpoint::~SocketEndpoint() {
  {
    std::lock_guard lk(mu_);
    stopping_ = true;
  }
  send_cv_.notify_all();
  if (sender_.joinable()) sender_.join();
  for (int fd : peer_fd_)
    if (fd >= 0) shutdown(fd, SHUT_RDWR);
  if (listen_fd_ >= 0) close(listen_fd_);
  for (auto& t : receivers_)
    if (t.joinable()) t.join();
  for (int fd : peer_fd_)
    if (fd >= 0) close(fd);
}

double SocketEndpoint::now_us() const { return raw_now_us() - epoch_us_; }

bool SocketEndpoint::link_down(double t) const {
  for (const auto& e : opts_.timeline) {
    if (e.effect != AnomalyEffect::LinkDown) continue;
    if (e.target.kind != AnomalyTarget::Nic || e.target.host != opts_.host_id) continue;
    if (t >= e.at_us && (e.duration_us == 0 || t < e.at_us + e.duration_us)) return true;
  }
  return false;
}

double SocketEndpoint::added_latency(double t) const {
  double total = 0;
  for (const auto& e : opts_.timeline) {
    if (e.effect != AnomalyEffect::AddedLatency) continue;
    if (e.target.kind != AnomalyTarget::Nic || e.target.host != opts_.host_id) continue;
    if (t >= e.at_us && (e.duration_us == 0 || t < e.at_us + e.duration_us))
      total += e.latency_us;
  }
  return total;
}

std::optional<double> SocketEndpoint::egress_rate(double t) const {
  if (link_down(t)) return std::nullopt;
  double scale = 1.0;
  for (const auto& e : opts_.timeline) {
    if (e.effect != AnomalyEffect::BandwidthScale) continue;
    if (e.target.kind != AnomalyTarget::Nic || e.target.host != opts_.host_id) continue;
    if (t >= e.at_us && (e.duration_us == 0 || t < e.at_us + e.duration_us))
      scale *= e.scale;
  }
  return gbps_to_bytes_per_us(opts_.nic_gbps) * scale;
}

uint64_t SocketEndpoint::post_send(int peer, uint64_t bytes, uint64_t tag,
                                   const uint8_t* payload) {
  if (peer < 0 || peer >= opts_.num_ranks || peer == opts_.rank)
    throw TransportError("send to unconnected rank " + std::to_string(peer));
  WireFrame f;
  f.tag = tag;
  if (payload && bytes > 0) {
    f.payload.assign(payload, payload + bytes);
  } else {
    f.payload.assign(bytes, 0xA5);
  }
  double t = now_us();
  std::lock_guard lk(mu_);
  if (!outstanding_send_tags_.insert({peer, tag}).second)
    throw TransportError("tag " + std::to_string(tag) + " already in flight to rank " +
                         std::to_string(peer));
  uint64_t handle = next_handle_++;
  if (!opts_.timeline.empty() && link_down(t)) {
    outstanding_send_tags_.erase({peer, tag});
    completions_.push_back({handle, t, false, "link down", true, peer, tag, bytes});
    cv_.notify_all();
    return handle;
  }
  sendq_.push_back({handle, peer, tag, bytes, f.encode(), t + added_latency(t)});
  send_cv_.notify_all();
  return handle;
}

uint64_t SocketEndpoint::post_recv(int peer, uint64_t bytes, uint64_t tag,
                                   std::vector<uint8_t>* out) {
  if (peer < 0 || peer >= opts_.num_ranks || peer == opts_.rank)
    throw TransportError("recv from unconnected rank " + std::to_string(peer));
  std::lock_guard lk(mu_);
  uint64_t handle = next_handle_++;
  auto key = std::make_pair(peer, tag);
  auto& uq = unexpected_[key];
  if (!uq.empty()) {
    ArrivedFrame f = std::move(uq.front());
    uq.pop_front();
    unexpected_bytes_ -= f.payload.size();
    Completion c{handle, now_us(), true, "", false, peer, tag, f.bytes};
    if (f.bytes != bytes) {
      c.ok = false;
      c.error = "length mismatch tag " + std::to_string(tag) + ": posted " +
                std::to_string(bytes) + " got " + std::to_string(f.bytes);
    } else if (out) {
      *out = std::move(f.payload);
    }
    completions_.push_back(std::move(c));
    cv_.notify_all();
  } else {
    recvs_[key].push_back({handle, peer, tag, bytes, out});
  }
  return handle;
}

void SocketEndpoint::on_frame(int peer, WireFrame&& f, double t) {
  std::lock_guard lk(mu_);
  auto key = std::make_pair(peer, f.tag);
  auto& rq = recvs_[key];
  if (!rq.empty()) {
    PostedRecv r = rq.front();
    rq.pop_front();
    Completion c{r.handle, t, true, "", false, peer, f.tag, f.payload.size()};
    if (f.payload.size() != r.bytes) {
      c.ok = false;
      c.error = "length mismatch tag " + std::to_string(f.tag) + ": posted " +
                std::to_string(r.bytes) + " got " + std::to_string(f.payload.size());
    } else if (r.out) {
      *r.out = std::move(f.payload);
    }
    completions_.push_back(std::move(c));
  } else {
    unexpected_bytes_ += f.payload.size();
    if (unexpected_bytes_ > kUnexpectedLimit) {
      completions_.push_back({0, t, false,
                              "unexpected-message buffer overflow from rank " +
                                  std::to_string(peer),
                              false, peer, f.tag, f.payload.size()});
    } else {
      unexpected_[key].push_back({t, f.payload.size(), std::move(f.payload)});
    }
  }
  cv_.notify_all();
}

void SocketEndpoint::receiver_loop(int peer) {
  int fd = peer_fd_[peer];
  std::vector<uint8_t> buf;
  uint8_t tmp[1 << 16];
  for (;;) {
    ssize_t n = ::recv(fd, tmp, sizeof tmp, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return;  // peer closed or we are shutting down
    buf.insert(buf.end(), tmp, tmp + n);
    size_t off = 0;
    for (;;) {
      WireFrame f;
      size_t used;
      try {
        used = WireFrame::decode(buf.data() + off, buf.size() - off, &f);
      } catch (const std::exception& e) {
        push_completion({0, now_us(), false, e.what(), false, peer, 0, 0});
        return;
      }
      if (used == 0) break;
      off += used;
      on_frame(peer, std::move(f), now_us());
    }
    if (off > 0) buf.erase(buf.begin(), buf.begin() + off);
  }
}

void SocketEndpoint::push_completion(Completion c) {
  std::lock_guard lk(mu_);
  completions_.push_back(std::move(c));
  cv_.notify_all();
}

void SocketEndpoint::sender_loop() {
  for (;;) {
    SendJob job;
    {
      std::unique_lock lk(mu_);
      send_cv_.wait(lk, [&] { return stopping_ || !sendq_.empty(); });
      if (stopping_ && sendq_.empty()) return;
      job = std::move(sendq_.front());
      sendq_.pop_front();
    }
    sleep_us(job.admit_us - now_us());
    bool ok = true;
    std::string err;
    try {
      if (opts_.timeline.empty() || opts_.nic_gbps <= 0) {
        write_all(peer_fd_[job.peer], job.frame.data(), job.frame.size());
      } else {
        // Token bucket in 1 ms slices against the currently effective rate.
        size_t off = 0;
        while (off < job.frame.size()) {
          double t = now_us();
          auto rate = egress_rate(t);
          if (!rate) {  // link down mid-transfer: stall
            sleep_us(1000);
            continue;
          }
          size_t quota = size_t(*rate * 1000.0);
          if (quota == 0) quota = 1;
          size_t n = std::min(quota, job.frame.size() - off);
          write_all(peer_fd_[job.peer], job.frame.data() + off, n);
          off += n;
          if (off < job.frame.size()) sleep_us(1000.0 - (now_us() - t));
        }
      }
    } catch (const TransportError& e) {
      ok = false;
      err = e.what();
    }
    {
      std::lock_guard lk(mu_);
      outstanding_send_tags_.erase({job.peer, job.tag});
      completions_.push_back(
          {job.handle, now_us(), ok, err, true, job.peer, job.tag, job.bytes});
    }
    cv_.notify_all();
  }
}

std::vector<Completion> SocketEndpoint::poll() {
  std::lock_guard lk(mu_);
  std::vector<Completion> out;
  out.swap(completions_);
  return out;
}

bool SocketEndpoint::wait(double timeout_s) {
  std::unique_lock lk(mu_);
  return cv_.wait_for(lk, std::chrono::duration<double>(timeout_s),
                      [&] { return !completions_.empty(); });
}

}  // namespace loomnet
