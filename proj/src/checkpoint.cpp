// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "atss/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace atss {

namespace {

void put_u16(std::string& out, uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  put_u32(out, std::bit_cast<uint32_t>(v));
}

class Reader {
 public:
  Reader(std::string bytes, std::string path)
      : bytes_(std::move(bytes)), path_(std::move(path)) {}

  uint8_t u8() { return static_cast<uint8_t>(take(1)[0]); }
  uint16_t u16() {
    const char* p = take(2);
    return uint16_t(uint8_t(p[0])) | uint16_t(uint8_t(p[1])) << 8;
  }
  uint32_t u32() {
    const char* p = take(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(p[i])) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(size_t n) { return std::string(take(n), n); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const char* take(size_t n) {
    if (pos_ + n > bytes_.size())
      throw DataError("truncated checkpoint: " + path_);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::string bytes_;
  std::string path_;
  size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(
    const std::string& path, const std::string& config_text,
    const std::vector<std::pair<std::string, Tensor<float>>>& named) {
  std::string out = "ATSS";
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<uint32_t>(config_text.size()));
  out += config_text;
  put_u32(out, static_cast<uint32_t>(named.size()));
  for (const auto& [name, tensor] : named) {
    ATSS_CHECK(name.size() <= 0xffff, "checkpoint: tensor name too long");
    put_u16(out, static_cast<uint16_t>(name.size()));
    out += name;
    ATSS_CHECK(tensor.ndim() <= 255, "checkpoint: tensor rank too large");
    out.push_back(char(tensor.ndim()));
    for (int i = 0; i < tensor.ndim(); ++i)
      put_u32(out, static_cast<uint32_t>(tensor.dim(i)));
    for (float v : tensor.data()) put_f32(out, v);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("short write to checkpoint: " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path);

  if (r.str(4) != "ATSS")
    throw DataError("bad checkpoint magic (not an ATSS file): " + path);
  CheckpointData ckpt;
  ckpt.version = r.u32();
  if (ckpt.version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " +
                    std::to_string(ckpt.version) + ": " + path);
  ckpt.config_text = r.str(r.u32());
  const uint32_t count = r.u32();
  ckpt.tensors.resize(count);
  for (uint32_t i = 0; i < count; ++i) {
    TensorEntry& t = ckpt.tensors[i];
    t.name = r.str(r.u16());
    const int ndim = r.u8();
    t.shape.resize(ndim);
    int64_t numel = 1;
    for (int d = 0; d < ndim; ++d) {
      t.shape[d] = r.u32();
      numel *= t.shape[d];
    }
    t.data.resize(numel);
    for (int64_t k = 0; k < numel; ++k) t.data[k] = r.f32();
  }
  if (!r.done()) throw DataError("trailing bytes in checkpoint: " + path);
  return ckpt;
}

void load_into(const CheckpointData& ckpt,
               std::vector<std::pair<std::string, Tensor<float>>> named) {
  for (auto& [name, tensor] : named) {
    const TensorEntry* entry = ckpt.find(name);
    if (!entry) throw DataError("checkpoint is missing tensor '" + name + "'");
    if (entry->shape != tensor.shape())
      throw DataError("checkpoint tensor '" + name + "' has shape " +
                      shape_str(entry->shape) + ", expected " +
                      shape_str(tensor.shape()));
    std::copy(entry->data.begin(), entry->data.end(),
              tensor.mutable_data().begin());
  }
  if (ckpt.tensors.size() != named.size())
    throw DataError("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                    " tensors, model expects " + std::to_string(named.size()));
}

}  // namespace atss
