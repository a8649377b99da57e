#include "dtn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>

#include <zlib.h>

#include "dtn/atomic_file.hpp"
#include "dtn/errors.hpp"

namespace dtn {

namespace {

constexpr char kMagic[8] = {'D', 'T', 'N', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void floats(const std::vector<float>& v) {
    for (float x : v) f32(x);
  }
  std::string& buffer() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw CheckpointError("checkpoint is truncated");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(in_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(in_[pos_++])) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::vector<float> floats(std::uint64_t n) {
    if (n > (in_.size() - pos_) / 4) throw CheckpointError("checkpoint is truncated");
    std::vector<float> v(n);
    for (auto& x : v) x = f32();
    return v;
  }
  std::size_t position() const { return pos_; }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void write_optimizer(Writer& w, std::uint64_t step, const std::vector<Adam<float>::Slot>& slots) {
  w.u64(step);
  w.u32(static_cast<std::uint32_t>(slots.size()));
  for (const auto& s : slots) {
    w.str(s.name);
    w.u64(s.m.size());
    w.floats(s.m);
    w.floats(s.v);
  }
}

void read_optimizer(Reader& r, std::uint64_t& step, std::vector<Adam<float>::Slot>& slots) {
  step = r.u64();
  const auto n = r.u32();
  slots.clear();
  for (std::uint32_t i = 0; i < n; ++i) {
    Adam<float>::Slot s;
    s.name = r.str();
    const auto len = r.u64();
    s.m = r.floats(len);
    s.v = r.floats(len);
    slots.push_back(std::move(s));
  }
}

}  // namespace

Checkpoint make_checkpoint(const RunConfig& config, const DetTransNet<float>& model, const TrainerState& state) {
  Checkpoint c;
  c.config_yaml = config.to_yaml();
  for (const auto& p : model.parameters()) {
    const auto d = p.tensor.data();
    c.parameters.push_back({p.name, p.tensor.shape(), std::vector<float>(d.begin(), d.end())});
  }
  c.state = state;
  return c;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(ckpt.version);
  w.str(ckpt.config_yaml);
  w.u64(ckpt.state.iteration);
  w.u32(static_cast<std::uint32_t>(ckpt.parameters.size()));
  for (const auto& p : ckpt.parameters) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.shape.size()));
    for (auto d : p.shape) w.u64(d);
    w.floats(p.data);
  }
  write_optimizer(w, ckpt.state.rpn_step, ckpt.state.rpn_slots);
  write_optimizer(w, ckpt.state.head_step, ckpt.state.head_slots);
  w.u64(ckpt.state.trace.size());
  for (const auto& rec : ckpt.state.trace) {
    w.u64(rec.iteration);
    w.u8(static_cast<std::uint8_t>(rec.phase));
    w.f64(rec.loss);
    w.f64(rec.classification);
    w.f64(rec.regression);
  }
  w.u32(crc32_of(w.buffer()));
  return std::move(w.buffer());
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  const auto body = bytes.substr(0, bytes.size() - 4);
  Reader tail(bytes.substr(bytes.size() - 4));
  if (tail.u32() != crc32_of(body)) throw CheckpointError("checkpoint checksum mismatch");

  Reader r(body);
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) r.u8();
  Checkpoint c;
  c.version = r.u32();
  if (c.version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(c.version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  c.config_yaml = r.str();
  c.state.iteration = r.u64();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    ParameterBlob p;
    p.name = r.str();
    const auto rank = r.u32();
    std::uint64_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      p.shape.push_back(r.u64());
      numel *= p.shape.back();
    }
    p.data = r.floats(numel);
    c.parameters.push_back(std::move(p));
  }
  read_optimizer(r, c.state.rpn_step, c.state.rpn_slots);
  read_optimizer(r, c.state.head_step, c.state.head_slots);
  const auto n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    LossRecord rec;
    rec.iteration = r.u64();
    rec.phase = r.u8();
    rec.loss = r.f64();
    rec.classification = r.f64();
    rec.regression = r.f64();
    c.state.trace.push_back(rec);
  }
  if (r.position() != body.size()) throw CheckpointError("checkpoint has trailing bytes");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::runtime_error& e) {
    throw CheckpointError(e.what());
  }
  return deserialize_checkpoint(bytes);
}

void load_parameters(DetTransNet<float>& model, const Checkpoint& ckpt) {
  std::map<std::string, const ParameterBlob*> blobs;
  for (const auto& b : ckpt.parameters) blobs[b.name] = &b;
  const auto params = model.parameters();
  for (const auto& p : params) {
    auto it = blobs.find(p.name);
    if (it == blobs.end()) throw CheckpointError("checkpoint lacks parameter " + p.name);
    if (it->second->shape != p.tensor.shape()) {
      throw CheckpointError("parameter " + p.name + " has shape " + shape_str(it->second->shape) +
                            " in the checkpoint but " + shape_str(p.tensor.shape()) + " in the model");
    }
  }
  if (blobs.size() != params.size()) {
    for (const auto& [name, blob] : blobs) {
      bool found = false;
      for (const auto& p : params) found = found || p.name == name;
      if (!found) throw CheckpointError("checkpoint has unknown parameter " + name);
    }
  }
  for (auto p : params) {
    const auto& src = blobs[p.name]->data;
    auto dst = p.tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

DetTransNet<float> model_from_checkpoint(const Checkpoint& ckpt) {
  const RunConfig cfg = ckpt.config();
  auto model = DetTransNet<float>::create(cfg.model, cfg.seed());
  load_parameters(model, ckpt);
  return model;
}

}  // namespace dtn
