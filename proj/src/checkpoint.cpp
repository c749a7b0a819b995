#include "far/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

#include "far/config.hpp"

namespace far {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'F', 'A', 'R', 'C', 'K', 'P', 'T', '1'};
constexpr char kTrailer[8] = {'F', 'A', 'R', 'E', 'N', 'D', '\0', '\0'};
constexpr std::uint64_t kMaxHeader = 1u << 20;
constexpr std::uint64_t kMaxRank = 8;

void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void get_bytes(std::istream& in, void* dst, std::size_t n, const char* what) {
  in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
}

std::uint64_t get_u64(std::istream& in, const char* what) {
  std::uint64_t v = 0;
  get_bytes(in, &v, sizeof v, what);
  return v;
}

std::string get_string(std::istream& in, const char* what) {
  const std::uint64_t n = get_u64(in, what);
  if (n > kMaxHeader) throw FormatError(std::string("checkpoint ") + what + " length " + std::to_string(n) + " is implausible");
  std::string s(n, '\0');
  get_bytes(in, s.data(), n, what);
  return s;
}

std::size_t dtype_size(Precision p) { return p == Precision::f32 ? 4 : 8; }

template <typename Real>
constexpr Precision precision_of() {
  return std::is_same_v<Real, float> ? Precision::f32 : Precision::f64;
}

template <typename Real>
CheckpointTensor tensor_entry(const std::string& name, const Tensor<Real>& t) {
  CheckpointTensor e;
  e.name = name;
  e.dtype = precision_of<Real>();
  e.shape = t.shape();
  e.bytes.resize(t.size() * sizeof(Real));
  if (t.size()) std::memcpy(e.bytes.data(), t.raw(), e.bytes.size());
  return e;
}

// "encoder.<e>.ffn.dense<i>.<block>.<field>" for partition blocks.
bool parse_block_name(const std::string& name, FfnSublayerAddress& addr, std::string& block, std::string& field) {
  std::size_t e = 0, i = 0;
  char rest[32] = {};
  if (std::sscanf(name.c_str(), "encoder.%zu.ffn.dense%zu.%31s", &e, &i, rest) != 3) return false;
  const std::string tail(rest);
  const std::size_t dot = tail.find('.');
  if (dot == std::string::npos) return false;
  block = tail.substr(0, dot);
  field = tail.substr(dot + 1);
  if (block != "learner" && block != "frozen") return false;
  addr = {e, i};
  return true;
}

}  // namespace

std::size_t Checkpoint::element_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += shape_size(t.shape);
  return n;
}

template <typename Real>
Checkpoint make_checkpoint(const EncoderModel<Real>& model) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  model.visit([&](const Parameter<Real>& p, ParameterKind) {
    FfnSublayerAddress addr;
    std::string block, field;
    if (!parse_block_name(p.name(), addr, block, field)) {
      ckpt.tensors.push_back(tensor_entry(p.name(), p.value()));
      return;
    }
    if (block != "learner") return;
    const std::string base = addr.label() + "." + field;
    ckpt.tensors.push_back(
        tensor_entry(base, field == "weight" ? model.ffn_weight(addr) : model.ffn_bias(addr)));
  });
  return ckpt;
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kMagic, sizeof kMagic);
  put_string(out, to_json(ckpt.config).dump());
  put_u64(out, ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    if (t.bytes.size() != shape_size(t.shape) * dtype_size(t.dtype)) {
      throw FormatError("tensor " + t.name + " has " + std::to_string(t.bytes.size()) + " bytes for shape " +
                        shape_string(t.shape));
    }
    put_string(out, t.name);
    const unsigned char dtype = t.dtype == Precision::f32 ? 0 : 1;
    out.put(static_cast<char>(dtype));
    put_u64(out, t.shape.size());
    for (std::size_t d : t.shape) put_u64(out, d);
    out.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
  }
  out.write(kTrailer, sizeof kTrailer);
}

void save_checkpoint_file(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  write_checkpoint(out, ckpt);
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[8];
  get_bytes(in, magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw FormatError("not a checkpoint (bad magic)");
  Checkpoint ckpt;
  const std::string header = get_string(in, "config");
  const Json doc = Json::parse(header, nullptr, false);
  if (doc.is_discarded()) throw FormatError("checkpoint config is not valid JSON");
  try {
    ckpt.config = model_config_from_json(doc);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  const std::uint64_t count = get_u64(in, "tensor count");
  if (count > kMaxHeader) throw FormatError("checkpoint tensor count is implausible");
  for (std::uint64_t k = 0; k < count; ++k) {
    CheckpointTensor t;
    t.name = get_string(in, "tensor name");
    unsigned char dtype = 0;
    get_bytes(in, &dtype, 1, "dtype");
    if (dtype > 1) throw FormatError("tensor " + t.name + " has unknown dtype " + std::to_string(dtype));
    t.dtype = dtype == 0 ? Precision::f32 : Precision::f64;
    const std::uint64_t rank = get_u64(in, "rank");
    if (rank == 0 || rank > kMaxRank) throw FormatError("tensor " + t.name + " has invalid rank " + std::to_string(rank));
    for (std::uint64_t r = 0; r < rank; ++r) {
      const std::uint64_t d = get_u64(in, "dims");
      if (d == 0 || d > (std::uint64_t(1) << 32)) throw FormatError("tensor " + t.name + " has invalid dimension");
      t.shape.push_back(d);
    }
    t.bytes.resize(shape_size(t.shape) * dtype_size(t.dtype));
    get_bytes(in, t.bytes.data(), t.bytes.size(), "tensor data");
    ckpt.tensors.push_back(std::move(t));
  }
  char trailer[8];
  get_bytes(in, trailer, sizeof trailer, "trailer");
  if (std::memcmp(trailer, kTrailer, sizeof trailer) != 0) throw FormatError("checkpoint trailer missing");
  return ckpt;
}

Checkpoint read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

template <typename Real>
void load_checkpoint_into(EncoderModel<Real>& model, const Checkpoint& ckpt) {
  if (model.is_reconfigured()) throw StateError("checkpoints load into unpartitioned models only");
  std::map<std::string, const CheckpointTensor*> by_name;
  for (const auto& t : ckpt.tensors) {
    if (!by_name.emplace(t.name, &t).second) throw FormatError("tensor " + t.name + " appears twice");
  }
  // Validate everything before touching the model.
  std::vector<std::pair<Parameter<Real>*, const CheckpointTensor*>> plan;
  for (Parameter<Real>* p : model.parameters()) {
    auto it = by_name.find(p->name());
    if (it == by_name.end()) throw FormatError("tensor " + p->name() + " missing from checkpoint");
    const CheckpointTensor& t = *it->second;
    if (t.shape != p->shape()) {
      throw FormatError("tensor " + t.name + " has shape " + shape_string(t.shape) + ", model expects " +
                        shape_string(p->shape()));
    }
    if (t.dtype != precision_of<Real>()) {
      throw FormatError("tensor " + t.name + " is " + precision_name(t.dtype) + ", model is " +
                        precision_name(precision_of<Real>()));
    }
    plan.emplace_back(p, &t);
    by_name.erase(it);
  }
  if (!by_name.empty()) throw FormatError("tensor " + by_name.begin()->first + " is not a model parameter");
  for (auto& [p, t] : plan) std::memcpy(p->mutable_value().raw(), t->bytes.data(), t->bytes.size());
}

template <typename Real>
EncoderModel<Real> load_checkpoint(const std::filesystem::path& path) {
  const Checkpoint ckpt = read_checkpoint_file(path);
  EncoderModel<Real> model(ckpt.config);
  load_checkpoint_into(model, ckpt);
  return model;
}

#define FAR_INSTANTIATE_CHECKPOINT(Real)                                            \
  template Checkpoint make_checkpoint(const EncoderModel<Real>&);                   \
  template void load_checkpoint_into(EncoderModel<Real>&, const Checkpoint&);       \
  template EncoderModel<Real> load_checkpoint(const std::filesystem::path&);

FAR_INSTANTIATE_CHECKPOINT(float)
FAR_INSTANTIATE_CHECKPOINT(double)

}  // namespace far
