#include "loomnet/transport.hpp"

namespace loomnet {

namespace {
void put_u32(std::vector<uint8_t>& v, uint32_t x) {
  for (int i = 0; i < 4; i++) v.push_back(static_cast<uint8_t>(x >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& v, uint64_t x) {
  for (int i = 0; i < 8; i++) v.push_back(static_cast<uint8_t>(x >> (8 * i)));
}
uint32_t get_u32(const uint8_t* p) {
  uint32_t x = 0;
  for (int i = 0; i < 4; i++) x |= static_cast<uint32_t>(p[i]) << (8 * i);
  return x;
}
uint64_t get_u64(const uint8_t* p) {
  uint64_t x = 0;
  for (int i = 0; i < 8; i++) x |= static_cast<uint64_t>(p[i]) << (8 * i);
  return x;
}
}  // namespace

std::vector<uint8_t> WireFrame::encode() const {
  std::vector<uint8_t> out;
  out.reserve(kHeaderBytes + payload.size());
  put_u32(out, kWireMagic);
  put_u64(out, tag);
  put_u64(out, payload.size());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

size_t WireFrame::decode(const uint8_t* buf, size_t len, WireFrame* out) {
  if (len < kHeaderBytes) return 0;
  uint32_t magic = get_u32(buf);
  if (magic != kWireMagic)
    throw TransportError("wire magic mismatch: got 0x" + [&] {
      char b[16];
      snprintf(b, sizeof b, "%08x", magic);
      return std::string(b);
    }());
  uint64_t tag = get_u64(buf + 4);
  uint64_t length = get_u64(buf + 12);
  if (len < kHeaderBytes + length) return 0;
  out->tag = tag;
  out->payload.assign(buf + kHeaderBytes, buf + kHeaderBytes + length);
  return kHeaderBytes + static_cast<size_t>(length);
}

}  // namespace loomnet
