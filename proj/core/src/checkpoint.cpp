#include "ldnet/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

namespace ldnet {

namespace {

constexpr char kMagic[4] = {'L', 'D', 'N', '1'};

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void entry(const CheckpointEntry& e) {
    str(e.name);
    u32(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) u32(static_cast<std::uint32_t>(d));
    for (float v : e.values) u32(std::bit_cast<std::uint32_t>(v));
  }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  void need(std::size_t n, const char* what) const {
    if (size_ - pos_ < n) {
      throw CheckpointError(CheckpointError::Cause::kTruncated,
                            std::string("checkpoint truncated while reading ") + what);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return data_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(const char* what) {
    const auto n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  CheckpointEntry entry() {
    CheckpointEntry e;
    e.name = str("tensor name");
    const auto rank = u32("tensor rank");
    if (rank == 0 || rank > 8) {
      throw CheckpointError(CheckpointError::Cause::kTruncated,
                            "checkpoint tensor '" + e.name + "' has implausible rank " + std::to_string(rank));
    }
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      e.shape.push_back(u32("tensor shape"));
      count *= e.shape.back();
    }
    need(count * 4, "tensor values");
    e.values.resize(count);
    for (auto& v : e.values) v = std::bit_cast<float>(u32("tensor values"));
    return e;
  }
  std::size_t position() const { return pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const CheckpointFile& file) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u64(0);  // total file size, patched below
  w.str(file.header);
  w.u32(static_cast<std::uint32_t>(file.params.size()));
  for (const auto& e : file.params) w.entry(e);
  w.u8(file.optimizer ? 1 : 0);
  if (file.optimizer) {
    w.u64(file.optimizer->step);
    w.u32(static_cast<std::uint32_t>(file.optimizer->moments.size()));
    for (const auto& e : file.optimizer->moments) w.entry(e);
  }
  const std::uint64_t total = w.data().size() + 4;
  for (int i = 0; i < 8; ++i) w.data()[4 + i] = static_cast<std::uint8_t>(total >> (8 * i));
  const auto crc = crc_of(w.data().data(), w.data().size());
  w.u32(crc);
  return std::move(w.data());
}

CheckpointFile decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Cause::kBadMagic, "not an LDN1 checkpoint (bad magic bytes)");
  }
  if (bytes.size() < 16) throw CheckpointError(CheckpointError::Cause::kTruncated, "checkpoint truncated (no header)");
  // The declared size separates a short file from a damaged one; the
  // checksum is verified before any field is trusted.
  std::uint64_t declared = 0;
  for (int i = 0; i < 8; ++i) declared |= static_cast<std::uint64_t>(bytes[4 + i]) << (8 * i);
  if (bytes.size() < declared) {
    throw CheckpointError(CheckpointError::Cause::kTruncated,
                          "checkpoint truncated: " + std::to_string(bytes.size()) + " of " +
                              std::to_string(declared) + " bytes present");
  }
  if (bytes.size() != declared) {
    throw CheckpointError(CheckpointError::Cause::kChecksum, "checkpoint size field does not match the file");
  }
  const std::size_t payload = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[payload + i]) << (8 * i);
  if (crc_of(bytes.data(), payload) != stored) {
    throw CheckpointError(CheckpointError::Cause::kChecksum, "checkpoint checksum mismatch (file corrupted)");
  }

  Reader r(bytes.data() + 12, payload - 12);
  CheckpointFile file;
  file.header = r.str("header");
  const auto count = r.u32("parameter count");
  for (std::uint32_t i = 0; i < count; ++i) file.params.push_back(r.entry());
  if (r.u8("optimizer flag")) {
    OptimizerSection opt;
    opt.step = r.u64("optimizer step");
    const auto n = r.u32("optimizer entry count");
    for (std::uint32_t i = 0; i < n; ++i) opt.moments.push_back(r.entry());
    file.optimizer = std::move(opt);
  }
  if (12 + r.position() != payload) {
    throw CheckpointError(CheckpointError::Cause::kChecksum, "checkpoint has unparsed bytes before the checksum");
  }
  return file;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& file) {
  const auto bytes = encode_checkpoint(file);
  // Write-then-rename keeps the previous checkpoint valid if interrupted.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Cause::kIo, "cannot write checkpoint '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Cause::kIo, "short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointError::Cause::kIo, "cannot move checkpoint into '" + path.string() + "'");
}

CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Cause::kIo, "cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <typename T>
std::vector<CheckpointEntry> to_entries(const ParamList<T>& params, const std::string& prefix) {
  std::vector<CheckpointEntry> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    CheckpointEntry e{prefix + p.name, p.tensor.shape(), {}};
    e.values.assign(p.tensor.values().begin(), p.tensor.values().end());
    out.push_back(std::move(e));
  }
  return out;
}

template <typename T>
void assign_entries(const std::vector<CheckpointEntry>& entries, const ParamList<T>& params,
                    const std::string& prefix) {
  std::unordered_map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (const auto& p : params) {
    const auto it = by_name.find(prefix + p.name);
    if (it == by_name.end()) {
      throw CheckpointError(CheckpointError::Cause::kMismatch, "checkpoint lacks tensor '" + prefix + p.name + "'");
    }
    if (it->second->shape != p.tensor.shape()) {
      throw CheckpointError(CheckpointError::Cause::kMismatch,
                            "shape mismatch for '" + prefix + p.name + "': checkpoint " +
                                to_string(it->second->shape) + " vs model " + to_string(p.tensor.shape()));
    }
  }
  if (entries.size() != params.size()) {
    throw CheckpointError(CheckpointError::Cause::kMismatch,
                          "checkpoint holds " + std::to_string(entries.size()) + " tensors, model expects " +
                              std::to_string(params.size()));
  }
  for (const auto& p : params) {
    const auto* e = by_name.at(prefix + p.name);
    auto dst = Tensor<T>(p.tensor).mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e->values[i]);
  }
}

template <typename T>
void save_params(const Ldnet<T>& model, const std::filesystem::path& path, const std::string& extra_header,
                 std::optional<OptimizerSection> optimizer) {
  CheckpointFile file;
  file.header = model.config().to_text() + extra_header;
  file.params = to_entries(model.parameters());
  file.optimizer = std::move(optimizer);
  write_checkpoint(path, file);
}

template <typename T>
CheckpointFile load_params(Ldnet<T>& model, const std::filesystem::path& path) {
  auto file = read_checkpoint(path);
  assign_entries(file.params, model.parameters());
  return file;
}

LdnetConfig read_checkpoint_config(const CheckpointFile& file) {
  std::vector<std::string> errors;
  auto config = LdnetConfig::from_key_values(parse_key_values(file.header), errors);
  if (!errors.empty()) {
    throw CheckpointError(CheckpointError::Cause::kMismatch, "checkpoint header invalid: " + errors.front());
  }
  return config;
}

#define LDNET_INSTANTIATE_CHECKPOINT(T)                                                                   \
  template std::vector<CheckpointEntry> to_entries(const ParamList<T>&, const std::string&);             \
  template void assign_entries(const std::vector<CheckpointEntry>&, const ParamList<T>&, const std::string&); \
  template void save_params(const Ldnet<T>&, const std::filesystem::path&, const std::string&,           \
                            std::optional<OptimizerSection>);                                             \
  template CheckpointFile load_params(Ldnet<T>&, const std::filesystem::path&);

LDNET_INSTANTIATE_CHECKPOINT(float)
LDNET_INSTANTIATE_CHECKPOINT(double)

#undef LDNET_INSTANTIATE_CHECKPOINT

}  // namespace ldnet
