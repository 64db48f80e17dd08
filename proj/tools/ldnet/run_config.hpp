#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ldnet/config.hpp"
#include "ldnet/data.hpp"
#include "ldnet/model.hpp"
#include "ldnet/training.hpp"

namespace ldnet::cli {

/// Everything a train or eval run depends on. Defaults apply to any key the
/// config file and overrides leave unset.
struct RunConfig {
  LdnetConfig model;
  TrainConfig train;
  std::string data;
  std::string out;
  /// Samples are resized to image_size x image_size; 0 keeps them as stored.
  std::size_t image_size = 256;
  SplitSpec split;
  std::size_t eval_batch_size = 4;

  /// Every problem, one message per offending field.
  std::vector<std::string> validate() const;
  /// Resolved key=value echo; feeding it back through from_key_values
  /// reproduces this config exactly.
  std::string to_text() const;
  /// Unknown keys and unparsable values are reported through `errors`.
  static RunConfig from_key_values(const KeyValues& kv, std::vector<std::string>& errors);
  bool operator==(const RunConfig& o) const {
    return model == o.model && train == o.train && data == o.data && out == o.out && image_size == o.image_size &&
           split.train == o.split.train && split.val == o.split.val && split.seed == o.split.seed &&
           eval_batch_size == o.eval_batch_size;
  }
};

/// Keys of all sections, in echo order.
std::vector<std::string> run_config_keys();

}  // namespace ldnet::cli
