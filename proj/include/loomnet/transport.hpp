#pragma once

#include <cstdint>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace loomnet {

struct TransportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr uint32_t kWireMagic = 0x474E4945;  // "GENI"

// On-the-wire frame header: magic, tag, payload length, all little-endian.
struct WireFrame {
  uint64_t tag = 0;
  std::vector<uint8_t> payload;

  std::vector<uint8_t> encode() const;
  // Decodes one frame from buf; returns bytes consumed, or 0 if incomplete.
  // Throws on magic mismatch.
  static size_t decode(const uint8_t* buf, size_t len, WireFrame* out);
  static constexpr size_t kHeaderBytes = 4 + 8 + 8;
};

struct Completion {
  uint64_t handle = 0;
  double time_us = 0;
  bool ok = true;
  std::string error;
  bool is_send = false;
  int peer = -1;
  uint64_t tag = 0;
  uint64_t bytes = 0;
};

// Point-to-point endpoint contract shared by the simulated and the socket
// backends. Operations post immediately and complete exactly once through
// poll(). Payload pointers are optional: without them the frame carries a
// fixed filler pattern.
class TransportEndpoint {
 public:
  virtual ~TransportEndpoint() = default;

  virtual int rank() const = 0;
  virtual uint64_t post_send(int peer, uint64_t bytes, uint64_t tag,
                             const uint8_t* payload = nullptr) = 0;
  virtual uint64_t post_recv(int peer, uint64_t bytes, uint64_t tag,
                             std::vector<uint8_t>* out = nullptr) = 0;
  // Non-blocking drain of available completions.
  virtual std::vector<Completion> poll() = 0;
};

}  // namespace loomnet
