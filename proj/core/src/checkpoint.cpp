#include "perp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace perp {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[5] = {'P', 'E', 'R', 'P', '1'};
constexpr const char* kConfigName = "__config__";

std::size_t dtype_size(RecordDtype d) {
  switch (d) {
    case RecordDtype::f32: return 4;
    case RecordDtype::f64: return 8;
    case RecordDtype::u8: return 1;
    case RecordDtype::u64: return 8;
  }
  throw IoError("unknown dtype");
}

template <class U>
void put(std::vector<std::uint8_t>& out, U v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& d) : d_(d) {}
  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, d_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::vector<std::uint8_t> bytes(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> out(d_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  d_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == d_.size(); }

 private:
  void need(std::size_t n) const {
    if (d_.size() - pos_ < n) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& d_;
  std::size_t pos_ = 0;
};

template <class U>
std::vector<U> reinterpret(const CheckpointRecord& r, RecordDtype want) {
  if (r.dtype != want) throw IoError("record '" + r.name + "' has unexpected dtype");
  std::vector<U> out(r.bytes.size() / sizeof(U));
  std::memcpy(out.data(), r.bytes.data(), out.size() * sizeof(U));
  return out;
}

template <class U>
CheckpointRecord make_record(std::string name, std::uint8_t tag, RecordDtype dtype, Shape shape,
                             const U* data, std::size_t n) {
  CheckpointRecord r{std::move(name), tag, dtype, std::move(shape), {}};
  r.bytes.resize(n * sizeof(U));
  std::memcpy(r.bytes.data(), data, r.bytes.size());
  return r;
}

CheckpointRecord f32_record(std::string name, std::uint8_t tag, const Tensor<float>& t) {
  return make_record(std::move(name), tag, RecordDtype::f32, t.shape(), t.data(), t.numel());
}

CheckpointRecord meta_record(std::string name, const std::vector<std::uint64_t>& v) {
  return make_record(std::move(name), kMetaTag, RecordDtype::u64, Shape{v.size()}, v.data(), v.size());
}

CheckpointRecord f64_meta_record(std::string name, const std::vector<double>& v) {
  return make_record(std::move(name), kMetaTag, RecordDtype::f64, Shape{v.size()}, v.data(), v.size());
}

Tensor<float> record_tensor(const CheckpointRecord& r) { return Tensor<float>(r.shape, r.as_f32()); }

}  // namespace

std::vector<float> CheckpointRecord::as_f32() const { return reinterpret<float>(*this, RecordDtype::f32); }
std::vector<double> CheckpointRecord::as_f64() const { return reinterpret<double>(*this, RecordDtype::f64); }
std::vector<std::uint64_t> CheckpointRecord::as_u64() const {
  return reinterpret<std::uint64_t>(*this, RecordDtype::u64);
}

std::vector<std::uint8_t> encode_records(const std::vector<CheckpointRecord>& records) {
  std::vector<std::uint8_t> out(kMagic, kMagic + sizeof(kMagic));
  put<std::uint64_t>(out, records.size());
  for (const auto& r : records) {
    if (r.bytes.size() != shape_numel(r.shape) * dtype_size(r.dtype)) {
      throw IoError("record '" + r.name + "' payload does not match its shape");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    put<std::uint8_t>(out, r.tag);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(r.dtype));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) put<std::uint64_t>(out, d);
    out.insert(out.end(), r.bytes.begin(), r.bytes.end());
  }
  return out;
}

std::vector<CheckpointRecord> decode_records(const std::vector<std::uint8_t>& data) {
  if (data.size() < sizeof(kMagic) || std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError("not a PERP1 checkpoint (bad magic)");
  }
  Reader rd(data);
  rd.bytes(sizeof(kMagic));
  const auto count = rd.get<std::uint64_t>();
  std::vector<CheckpointRecord> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    const auto len = rd.get<std::uint32_t>();
    const auto name = rd.bytes(len);
    r.name.assign(name.begin(), name.end());
    r.tag = rd.get<std::uint8_t>();
    const auto dt = rd.get<std::uint8_t>();
    if (dt > 3) throw IoError("record '" + r.name + "' has unknown dtype " + std::to_string(dt));
    r.dtype = static_cast<RecordDtype>(dt);
    const auto rank = rd.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) r.shape.push_back(rd.get<std::uint64_t>());
    r.bytes = rd.bytes(shape_numel(r.shape) * dtype_size(r.dtype));
    out.push_back(std::move(r));
  }
  if (!rd.done()) throw IoError("trailing bytes after the last checkpoint record");
  return out;
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

std::vector<CheckpointRecord> to_records(const Checkpoint& ckpt) {
  std::vector<CheckpointRecord> out;
  const auto& c = ckpt.model.config();
  out.push_back(meta_record(kConfigName, {c.vocab_size, c.context_length, c.d_model, c.n_heads, c.n_layers, c.d_ff,
                                          c.bias ? 1u : 0u, c.head_bias ? 1u : 0u, c.seed}));
  for (const auto& p : ckpt.model.parameters()) {
    out.push_back(f32_record(p.name, static_cast<std::uint8_t>(p.tag), p.var.value()));
  }
  for (const auto& [name, mask] : ckpt.masks) {
    std::vector<std::uint8_t> bits(mask.bits.numel());
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = mask.bits[i] != 0.0f;
    out.push_back(make_record(name + ".mask", kMaskTag, RecordDtype::u8, mask.bits.shape(), bits.data(), bits.size()));
    std::vector<double> pat;
    if (const auto* u = std::get_if<Unstructured>(&mask.pattern)) {
      pat = {0.0, u->sparsity, 0.0};
    } else {
      const auto& s = std::get<SemiStructured>(mask.pattern);
      pat = {1.0, static_cast<double>(s.n), static_cast<double>(s.m)};
    }
    out.push_back(f64_meta_record(name + ".mask.pattern", pat));
  }
  for (const auto& [name, a] : ckpt.adapters) {
    const auto tag = static_cast<std::uint8_t>(GroupTag::adapter);
    out.push_back(f32_record(name + ".lora.B", tag, a.B.value()));
    out.push_back(f32_record(name + ".lora.A", tag, a.A.value()));
    out.push_back(meta_record(name + ".lora.kind", {static_cast<std::uint64_t>(a.kind), a.rank, a.one_plus ? 1u : 0u}));
    out.push_back(f64_meta_record(name + ".lora.alpha", {a.alpha}));
  }
  return out;
}

Checkpoint from_records(const std::vector<CheckpointRecord>& records) {
  if (records.empty() || records.front().name != kConfigName) throw IoError("checkpoint lacks a config record");
  const auto cv = records.front().as_u64();
  if (cv.size() != 9) throw IoError("config record has " + std::to_string(cv.size()) + " fields, expected 9");
  MiniGPTConfig cfg{cv[0], cv[1], cv[2], cv[3], cv[4], cv[5], cv[6] != 0, cv[7] != 0, cv[8]};

  Checkpoint ck;
  ck.model = init_model(cfg, cfg.seed);
  std::map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  for (auto& p : ck.model.parameters()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw IoError("checkpoint is missing parameter '" + p.name + "'");
    Tensor<float> t = record_tensor(*it->second);
    require_same_shape(p.var.value(), t, "load " + p.name);
    if (it->second->tag != static_cast<std::uint8_t>(p.tag)) throw IoError("tag mismatch for '" + p.name + "'");
    p.var.mutable_value() = std::move(t);
  }
  auto need = [&](const std::string& name) -> const CheckpointRecord& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint is missing record '" + name + "'");
    return *it->second;
  };
  for (const auto& r : records) {
    if (r.tag == kMaskTag) {
      const std::string owner = r.name.substr(0, r.name.size() - 5);  // strip ".mask"
      if (r.dtype != RecordDtype::u8) throw IoError("mask '" + r.name + "' must be u8");
      Tensor<float> bits(r.shape);
      for (std::size_t i = 0; i < bits.numel(); ++i) bits[i] = r.bytes[i] ? 1.0f : 0.0f;
      const auto pat = need(r.name + ".pattern").as_f64();
      MaskPattern pattern = pat.at(0) == 0.0 ? MaskPattern{Unstructured{pat.at(1)}}
                                             : MaskPattern{SemiStructured{static_cast<std::size_t>(pat.at(1)),
                                                                          static_cast<std::size_t>(pat.at(2))}};
      ck.masks.emplace(owner, SparsityMask{std::move(bits), pattern, owner});
    }
  }
  const std::string b_suffix = ".lora.B";
  for (const auto& r : records) {
    if (r.tag != static_cast<std::uint8_t>(GroupTag::adapter) || !r.name.ends_with(b_suffix)) continue;
    const std::string owner = r.name.substr(0, r.name.size() - b_suffix.size());
    const auto kind = need(owner + ".lora.kind").as_u64();
    AdapterPair<float> a;
    a.kind = static_cast<AdapterKind>(kind.at(0));
    a.rank = kind.at(1);
    a.one_plus = kind.at(2) != 0;
    a.alpha = need(owner + ".lora.alpha").as_f64().at(0);
    a.weight = owner;
    a.B = Var<float>(record_tensor(r), true);
    a.A = Var<float>(record_tensor(need(owner + ".lora.A")), true);
    if (auto it = ck.masks.find(owner); it != ck.masks.end() && a.kind != AdapterKind::lora) a.mask = it->second.bits;
    ck.adapters.emplace(owner, std::move(a));
  }
  return ck;
}

std::vector<std::uint8_t> checkpoint_bytes(const Checkpoint& ckpt) { return encode_records(to_records(ckpt)); }

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file(path, checkpoint_bytes(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return from_records(decode_records(read_file(path))); }

}  // namespace perp
