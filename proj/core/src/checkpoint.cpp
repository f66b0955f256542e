#include "corl/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "corl/errors.hpp"
#include "corl/fsio.hpp"
#include "corl/hashing.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written as little-endian raw doubles");

namespace corl {

namespace {

constexpr char kMagic[8] = {'C', 'O', 'R', 'L', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& out, uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

struct Cursor {
  const char* p;
  size_t left;

  void take(void* dst, size_t n) {
    if (n > left) fail(Errc::checksum_mismatch, "checkpoint: truncated record");
    std::memcpy(dst, p, n);
    p += n;
    left -= n;
  }
  uint32_t u32() {
    uint32_t v;
    take(&v, 4);
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    take(&v, 8);
    return v;
  }
  std::string str(size_t n) {
    if (n > left) fail(Errc::checksum_mismatch, "checkpoint: truncated string");
    std::string s(p, n);
    p += n;
    left -= n;
    return s;
  }
};

} // namespace

void save_checkpoint(const PolicyParams& params, uint64_t world_hash, const std::string& meta,
                     const std::filesystem::path& path) {
  std::string out;
  out.reserve(64 + meta.size() + params.values.size() * 8);
  out.append(kMagic, sizeof kMagic);
  put_u32(out, kVersion);
  put_u64(out, world_hash);
  put_u32(out, static_cast<uint32_t>(meta.size()));
  out.append(meta);
  put_u32(out, static_cast<uint32_t>(params.blocks.size()));
  for (const auto& b : params.blocks) {
    put_u32(out, static_cast<uint32_t>(b.name.size()));
    out.append(b.name);
    put_u64(out, b.offset);
    put_u64(out, b.len);
  }
  put_u64(out, params.values.size());
  out.append(reinterpret_cast<const char*>(params.values.data()), params.values.size() * 8);
  put_u64(out, fnv1a64(out.data(), out.size()));
  atomic_write_file(path, out);
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  const std::string raw = read_file(path);
  if (raw.size() < sizeof kMagic || std::memcmp(raw.data(), kMagic, sizeof kMagic) != 0)
    fail(Errc::bad_magic, "not a checkpoint file: " + path.string());
  if (raw.size() < sizeof kMagic + 4 + 8)
    fail(Errc::checksum_mismatch, "checkpoint: truncated header");

  uint32_t version;
  std::memcpy(&version, raw.data() + sizeof kMagic, 4);
  if (version != kVersion)
    fail(Errc::version_mismatch,
         "checkpoint format version " + std::to_string(version) + ", expected " +
             std::to_string(kVersion));

  uint64_t stored;
  std::memcpy(&stored, raw.data() + raw.size() - 8, 8);
  if (fnv1a64(raw.data(), raw.size() - 8) != stored)
    fail(Errc::checksum_mismatch, "checkpoint checksum mismatch: " + path.string());

  Cursor c{raw.data() + sizeof kMagic + 4, raw.size() - sizeof kMagic - 4 - 8};
  CheckpointData data;
  data.world_hash = c.u64();
  data.meta = c.str(c.u32());
  const uint32_t n_blocks = c.u32();
  data.params.blocks.resize(n_blocks);
  for (auto& b : data.params.blocks) {
    b.name = c.str(c.u32());
    b.offset = c.u64();
    b.len = c.u64();
  }
  const uint64_t n_values = c.u64();
  if (n_values * 8 != c.left)
    fail(Errc::checksum_mismatch, "checkpoint: payload size mismatch");
  data.params.values.resize(n_values);
  c.take(data.params.values.data(), n_values * 8);

  size_t covered = 0;
  for (const auto& b : data.params.blocks) {
    if (b.offset != covered) fail(Errc::checksum_mismatch, "checkpoint: block index has gaps");
    covered += b.len;
  }
  if (covered != data.params.values.size())
    fail(Errc::checksum_mismatch, "checkpoint: block index does not cover payload");
  return data;
}

PolicyParams load_checkpoint(const std::filesystem::path& path, uint64_t expected_world_hash) {
  CheckpointData data = load_checkpoint(path);
  if (data.world_hash != expected_world_hash)
    fail(Errc::world_hash_mismatch,
         "checkpoint was built against a different world: " + path.string());
  return std::move(data.params);
}

} // namespace corl
