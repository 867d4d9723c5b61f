#include "samplernn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "samplernn/errors.hpp"

namespace samplernn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void Checkpoint::set(const std::string& key, const std::string& value) {
  if (key.empty() || key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
    throw CheckpointError(CheckpointErrorKind::kMetadata, "invalid metadata entry '" + key + "'");
  }
  for (auto& kv : metadata) {
    if (kv.first == key) {
      kv.second = value;
      return;
    }
  }
  metadata.emplace_back(key, value);
}

bool Checkpoint::has(const std::string& key) const {
  for (const auto& kv : metadata) {
    if (kv.first == key) return true;
  }
  return false;
}

const std::string& Checkpoint::get(const std::string& key) const {
  for (const auto& kv : metadata) {
    if (kv.first == key) return kv.second;
  }
  throw CheckpointError(CheckpointErrorKind::kMetadata, "checkpoint metadata lacks '" + key + "'");
}

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const CheckpointTensor& Checkpoint::tensor(const std::string& name) const {
  if (const auto* t = find(name)) return *t;
  throw CheckpointError(CheckpointErrorKind::kMissingTensor, "checkpoint lacks tensor '" + name + "'");
}

template <typename T>
void Checkpoint::restore(const std::string& name, Tensor<T>& dst) const {
  const CheckpointTensor& src = tensor(name);
  if (src.shape != dst.shape()) {
    throw CheckpointError(CheckpointErrorKind::kShapeMismatch, "tensor '" + name + "' is " + shape_string(src.shape) +
                                                                   " in the checkpoint, model expects " +
                                                                   shape_string(dst.shape()));
  }
  auto out = dst.mutable_values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(src.values[i]);
}

template void Checkpoint::restore<float>(const std::string&, Tensor<float>&) const;
template void Checkpoint::restore<double>(const std::string&, Tensor<double>&) const;

namespace {

class Writer {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(V));
  }
  void put_bytes(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename V>
  V get(const char* what) {
    need(sizeof(V), what);
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(CheckpointErrorKind::kTruncated, std::string("checkpoint truncated while reading ") + what);
    }
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.put_bytes("SRNN");
  w.put<std::uint32_t>(ckpt.version);
  std::string meta;
  for (const auto& [k, v] : ckpt.metadata) meta += k + "=" + v + "\n";
  w.put<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  w.put_bytes(meta);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.name.size() > 0xFFFF || t.shape.size() > 0xFF) {
      throw CheckpointError(CheckpointErrorKind::kMetadata, "tensor '" + t.name + "' cannot be encoded");
    }
    if (shape_numel(t.shape) != t.values.size()) {
      throw CheckpointError(CheckpointErrorKind::kShapeMismatch, "tensor '" + t.name + "' value count mismatch");
    }
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (const auto d : t.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    if (t.dtype == DType::kFloat32) {
      for (const double v : t.values) w.put<float>(static_cast<float>(v));
    } else {
      for (const double v : t.values) w.put<double>(v);
    }
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.get_bytes(4, "magic") != "SRNN") throw CheckpointError(CheckpointErrorKind::kBadMagic, "not a checkpoint (bad magic)");
  Checkpoint ckpt;
  ckpt.version = r.get<std::uint32_t>("version");
  if (ckpt.version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorKind::kVersionMismatch, "checkpoint format version " +
                                                                     std::to_string(ckpt.version) + ", expected " +
                                                                     std::to_string(kCheckpointVersion));
  }
  const auto meta_len = r.get<std::uint32_t>("metadata length");
  const std::string meta = r.get_bytes(meta_len, "metadata");
  std::size_t start = 0;
  while (start < meta.size()) {
    const std::size_t end = meta.find('\n', start);
    if (end == std::string::npos) throw CheckpointError(CheckpointErrorKind::kMetadata, "unterminated metadata line");
    const std::string line = meta.substr(start, end - start);
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError(CheckpointErrorKind::kMetadata, "metadata line without '='");
    ckpt.metadata.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    start = end + 1;
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.get_bytes(r.get<std::uint16_t>("name length"), "name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 1) throw CheckpointError(CheckpointErrorKind::kMetadata, "tensor '" + t.name + "' has unknown dtype");
    t.dtype = static_cast<DType>(dtype);
    const auto ndim = r.get<std::uint8_t>("ndim");
    for (std::uint8_t d = 0; d < ndim; ++d) t.shape.push_back(r.get<std::uint32_t>("dims"));
    const std::size_t n = shape_numel(t.shape);
    const std::size_t width = t.dtype == DType::kFloat32 ? 4 : 8;
    if (r.remaining() / width < n) {
      throw CheckpointError(CheckpointErrorKind::kTruncated, "checkpoint truncated inside tensor '" + t.name + "'");
    }
    t.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      t.values[k] = t.dtype == DType::kFloat32 ? static_cast<double>(r.get<float>("values")) : r.get<double>("values");
    }
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointErrorKind::kIo, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointErrorKind::kIo, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointErrorKind::kIo, "cannot move checkpoint into " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace samplernn
