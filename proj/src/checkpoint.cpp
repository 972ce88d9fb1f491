#include "srlkit/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace srlkit {

namespace {

constexpr char kMagic[4] = {'S', 'R', 'L', 'D'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Cursor {
 public:
  Cursor(const std::string& buf, const std::string& path)
      : buf_(buf), path_(path) {}

  const char* take(std::size_t n) {
    if (pos_ + n > buf_.size())
      throw IoError("checkpoint " + path_ + ": truncated file");
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint32_t u32() {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(take(4));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(take(8));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }

  std::size_t pos() const { return pos_; }

 private:
  const std::string& buf_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
  std::uint64_t h = seed;
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

void save_checkpoint_file(const std::string& path, const CheckpointData& data) {
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, data.version);
  put_u64(buf, data.config_text.size());
  buf.append(data.config_text);
  put_u32(buf, static_cast<std::uint32_t>(data.tensors.size()));
  for (const auto& t : data.tensors) {
    put_u32(buf, static_cast<std::uint32_t>(t.name.size()));
    buf.append(t.name);
    buf.push_back(static_cast<char>(t.dtype));
    put_u32(buf, static_cast<std::uint32_t>(t.shape.size()));
    for (Index d : t.shape) put_u64(buf, static_cast<std::uint64_t>(d));
    put_u64(buf, t.bytes.size());
    buf.append(t.bytes.data(), t.bytes.size());
  }
  put_u64(buf, fnv1a64(buf.data(), buf.size()));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("checkpoint " + path + ": short write");
}

CheckpointData load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());

  if (buf.size() < 8 + 4 + 4)
    throw IoError("checkpoint " + path + ": digest mismatch (truncated file)");
  const std::uint64_t stored = [&] {
    std::uint64_t v = 0;
    const unsigned char* p =
        reinterpret_cast<const unsigned char*>(buf.data() + buf.size() - 8);
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }();
  if (fnv1a64(buf.data(), buf.size() - 8) != stored)
    throw IoError("checkpoint " + path + ": digest mismatch");

  Cursor cur(buf, path);
  if (std::memcmp(cur.take(4), kMagic, 4) != 0)
    throw IoError("checkpoint " + path + ": bad magic");
  CheckpointData data;
  data.version = cur.u32();
  if (data.version != 1)
    throw IoError("checkpoint " + path + ": unsupported version " +
                  std::to_string(data.version));
  const std::uint64_t cfg_len = cur.u64();
  data.config_text.assign(cur.take(cfg_len), cfg_len);
  const std::uint32_t count = cur.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    RawTensor t;
    const std::uint32_t name_len = cur.u32();
    t.name.assign(cur.take(name_len), name_len);
    t.dtype = static_cast<DType>(*cur.take(1));
    if (t.dtype != DType::f32 && t.dtype != DType::f64)
      throw IoError("checkpoint " + path + ": bad dtype for " + t.name);
    const std::uint32_t rank = cur.u32();
    for (std::uint32_t d = 0; d < rank; ++d)
      t.shape.push_back(static_cast<Index>(cur.u64()));
    const std::uint64_t nbytes = cur.u64();
    t.bytes.resize(nbytes);
    std::memcpy(t.bytes.data(), cur.take(nbytes), nbytes);
    data.tensors.push_back(std::move(t));
  }
  if (cur.pos() != buf.size() - 8)
    throw IoError("checkpoint " + path + ": trailing bytes before digest");
  return data;
}

std::uint64_t file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  return fnv1a64(buf.data(), buf.size());
}

}  // namespace srlkit
