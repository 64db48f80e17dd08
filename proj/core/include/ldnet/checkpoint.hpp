#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ldnet/model.hpp"

namespace ldnet {

// Binary layout, all integers little-endian:
//   "LDN1"
//   u64 total file size in bytes
//   u32 header_len, header bytes        key=value text (model config + extras)
//   u32 count, count x entry            parameters
//   u8  has_optimizer
//     [u64 step, u32 count, count x entry]   optimizer moments
//   u32 crc32 of every preceding byte
// entry: u32 name_len, name, u32 rank, rank x u32 dim, prod(dims) x f32

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct OptimizerSection {
  std::uint64_t step = 0;
  std::vector<CheckpointEntry> moments;
};

struct CheckpointFile {
  std::string header;
  std::vector<CheckpointEntry> params;
  std::optional<OptimizerSection> optimizer;
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Cause { kIo, kBadMagic, kTruncated, kChecksum, kMismatch };

  CheckpointError(Cause cause, const std::string& what) : std::runtime_error(what), cause_(cause) {}
  Cause cause() const { return cause_; }

 private:
  Cause cause_;
};

std::vector<std::uint8_t> encode_checkpoint(const CheckpointFile& file);
CheckpointFile decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& file);
CheckpointFile read_checkpoint(const std::filesystem::path& path);

/// Model parameters (and buffers) as checkpoint entries, in collect() order.
template <typename T>
std::vector<CheckpointEntry> to_entries(const ParamList<T>& params, const std::string& prefix = "");

/// Copies entries into the matching named tensors. Every tensor must be
/// present with an identical shape; errors name the offending tensor.
template <typename T>
void assign_entries(const std::vector<CheckpointEntry>& entries, const ParamList<T>& params,
                    const std::string& prefix = "");

/// `extra_header` is appended after the model config lines.
template <typename T>
void save_params(const Ldnet<T>& model, const std::filesystem::path& path, const std::string& extra_header = "",
                 std::optional<OptimizerSection> optimizer = std::nullopt);

/// Loads into an existing model built from a compatible config. Returns the
/// decoded file so callers can read the header or optimizer section.
template <typename T>
CheckpointFile load_params(Ldnet<T>& model, const std::filesystem::path& path);

/// Model config stored in a checkpoint header.
LdnetConfig read_checkpoint_config(const CheckpointFile& file);

}  // namespace ldnet
