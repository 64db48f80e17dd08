#include "run_config.hpp"

#include <algorithm>
#include <sstream>

namespace ldnet::cli {

namespace {

// Keys owned by RunConfig itself; the model and training sections contribute
// the ones their own to_text() emits.
std::string own_text(const RunConfig& c) {
  std::ostringstream os;
  os << "data=" << c.data << '\n'
     << "out=" << c.out << '\n'
     << "image_size=" << c.image_size << '\n'
     << "split_train=" << format_double(c.split.train) << '\n'
     << "split_val=" << format_double(c.split.val) << '\n'
     << "split_seed=" << c.split.seed << '\n'
     << "eval_batch_size=" << c.eval_batch_size << '\n';
  return os.str();
}

}  // namespace

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, v] : parse_key_values(RunConfig{}.to_text())) keys.push_back(k);
  return keys;
}

std::vector<std::string> RunConfig::validate() const {
  auto errors = model.validate();
  for (auto& e : train.validate()) errors.push_back(std::move(e));
  if (image_size != 0 && image_size % 8 != 0) {
    errors.push_back("image_size: must be a multiple of 8 (or 0), got " + std::to_string(image_size));
  }
  if (!(split.train >= 0.0 && split.val >= 0.0 && split.train + split.val <= 1.0)) {
    errors.push_back("split_train/split_val: fractions must be >= 0 and sum to at most 1");
  }
  if (eval_batch_size < 1) errors.push_back("eval_batch_size: must be >= 1");
  return errors;
}

std::string RunConfig::to_text() const { return own_text(*this) + model.to_text() + train.to_text(); }

RunConfig RunConfig::from_key_values(const KeyValues& kv, std::vector<std::string>& errors) {
  RunConfig c;
  const auto known = run_config_keys();
  for (const auto& [k, v] : kv) {
    if (std::find(known.begin(), known.end(), k) == known.end()) errors.push_back(k + ": unknown key");
  }
  c.model = LdnetConfig::from_key_values(kv, errors);
  c.train = TrainConfig::from_key_values(kv, errors);
  FieldReader r(kv, errors);
  r.read("data", c.data);
  r.read("out", c.out);
  r.read("image_size", c.image_size);
  r.read("split_train", c.split.train);
  r.read("split_val", c.split.val);
  r.read("split_seed", c.split.seed);
  r.read("eval_batch_size", c.eval_batch_size);
  return c;
}

}  // namespace ldnet::cli
