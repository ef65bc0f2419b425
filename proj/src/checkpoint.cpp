#include "ror/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>

#include "ror/data.hpp"

namespace ror {

namespace {

constexpr std::array<char, 8> kMagic = {'R', 'O', 'R', 'C', 'K', 'P', 'T', '\0'};

std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
  }
  void string(const std::string& s) {
    le<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw IoError("checkpoint truncated reading " + std::string(what) + " at byte offset " + std::to_string(pos_));
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T le(const char* what) {
    auto s = take(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
    return static_cast<T>(v);
  }
  std::string string(const char* what) {
    const auto n = le<std::uint32_t>(what);
    auto s = take(n, what);
    return std::string(s.begin(), s.end());
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::uint64_t TensorRecord::numel() const {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

const TensorRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<const TensorRecord*> sorted;
  for (const auto& r : ckpt.records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) { return a->name < b->name; });

  Writer w;
  w.raw(kMagic.data(), kMagic.size());
  w.le<std::uint32_t>(Checkpoint::kVersion);
  w.string(ckpt.arch_config);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(sorted.size()));
  for (const TensorRecord* r : sorted) {
    if (r->bytes.size() != r->numel() * dtype_size(r->dtype)) {
      throw IoError("checkpoint record " + r->name + " has " + std::to_string(r->bytes.size()) +
                    " bytes for its shape");
    }
    w.string(r->name);
    w.le<std::uint8_t>(static_cast<std::uint8_t>(r->dtype));
    w.le<std::uint8_t>(static_cast<std::uint8_t>(r->shape.size()));
    for (auto d : r->shape) w.le<std::uint64_t>(d);
    w.raw(r->bytes.data(), r->bytes.size());
  }
  w.le<std::uint32_t>(crc_of(w.out));
  return std::move(w.out);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size() + 4 + 4) throw IoError("checkpoint too short (" + std::to_string(bytes.size()) + " bytes)");
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw IoError("not a checkpoint file (bad magic)");
  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  const auto stored = tail.le<std::uint32_t>("checksum");
  const auto actual = crc_of(body);
  if (stored != actual) {
    throw ChecksumError("checkpoint checksum mismatch: stored " + std::to_string(stored) + ", computed " +
                        std::to_string(actual));
  }

  Reader r(body);
  r.take(kMagic.size(), "magic");
  const auto version = r.le<std::uint32_t>("version");
  if (version != Checkpoint::kVersion) {
    throw VersionError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                       std::to_string(Checkpoint::kVersion) + ")");
  }
  Checkpoint c;
  c.arch_config = r.string("architecture");
  const auto count = r.le<std::uint32_t>("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord rec;
    rec.name = r.string("tensor name");
    const auto dtype = r.le<std::uint8_t>("dtype");
    if (dtype != 1 && dtype != 2) {
      throw IoError("checkpoint tensor " + rec.name + " has unknown dtype " + std::to_string(dtype));
    }
    rec.dtype = static_cast<DType>(dtype);
    const auto rank = r.le<std::uint8_t>("rank");
    for (int k = 0; k < rank; ++k) rec.shape.push_back(r.le<std::uint64_t>("dims"));
    auto data = r.take(rec.numel() * dtype_size(rec.dtype), "tensor data");
    rec.bytes.assign(data.begin(), data.end());
    c.records.push_back(std::move(rec));
  }
  if (r.pos() != body.size()) {
    throw IoError("checkpoint has " + std::to_string(body.size() - r.pos()) + " trailing bytes");
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace ror
