#include "merlot/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace merlot::harness {

std::uint32_t crc32(const unsigned char* data, std::size_t size) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int bit = 0; bit < 8; ++bit) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < size; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return &t;
  return nullptr;
}

const Tensor& Checkpoint::require(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw IoError("checkpoint: missing array '" + name + "'");
  return *t;
}

namespace {

void append_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void append_u64(std::vector<unsigned char>& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void append_string(std::vector<unsigned char>& buf, const std::string& s) {
  append_u32(buf, static_cast<std::uint32_t>(s.size()));
  buf.insert(buf.end(), s.begin(), s.end());
}

struct Reader {
  const unsigned char* data;
  std::size_t size;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > size) throw TruncationError("checkpoint: truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::string str() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(data + pos), len);
    pos += len;
    return s;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::vector<unsigned char> body;
  append_u32(body, ckpt.version);
  append_string(body, ckpt.config_echo);
  append_u32(body, static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& [name, tensor] : ckpt.arrays) {
    append_string(body, name);
    append_u32(body, static_cast<std::uint32_t>(tensor.rank()));
    for (auto d : tensor.shape()) append_u64(body, d);
    const auto& values = tensor.values();
    const std::size_t offset = body.size();
    body.resize(offset + values.size() * 8);
    std::memcpy(body.data() + offset, values.data(), values.size() * 8);
  }
  const std::uint32_t crc = crc32(body.data(), body.size());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write("MRLT", 4);
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  unsigned char tail[4];
  for (int i = 0; i < 4; ++i) tail[i] = static_cast<unsigned char>(crc >> (8 * i));
  out.write(reinterpret_cast<const char*>(tail), 4);
  if (!out) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw TruncationError("checkpoint: truncated file");
  if (std::memcmp(bytes.data(), "MRLT", 4) != 0)
    throw MagicMismatchError("checkpoint: bad magic");
  const std::size_t body_size = bytes.size() - 8;
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i)
    stored_crc |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + static_cast<std::size_t>(i)])
                  << (8 * i);
  if (crc32(bytes.data() + 4, body_size) != stored_crc)
    throw CrcMismatchError("checkpoint: CRC mismatch");

  Reader r{bytes.data() + 4, body_size};
  Checkpoint ckpt;
  ckpt.version = r.u32();
  if (ckpt.version != 1)
    throw VersionMismatchError("checkpoint: unsupported version " + std::to_string(ckpt.version));
  ckpt.config_echo = r.str();
  const std::uint32_t count = r.u32();
  ckpt.arrays.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    const std::size_t n = shape_size(shape);
    r.need(n * 8);
    std::vector<double> values(n);
    std::memcpy(values.data(), r.data + r.pos, n * 8);
    r.pos += n * 8;
    ckpt.add(name, Tensor(std::move(shape), std::move(values)));
  }
  return ckpt;
}

}  // namespace merlot::harness
