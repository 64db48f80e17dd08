#include "ldnet/model.hpp"

#include <sstream>
#include <stdexcept>

#include "ldnet/random.hpp"

namespace ldnet {

std::string to_string(Regularizer r) {
  switch (r) {
    case Regularizer::kDropBlock: return "dropblock";
    case Regularizer::kSpatialDropout: return "dropout2d";
    case Regularizer::kNone: return "none";
  }
  return "none";
}

bool parse_regularizer(std::string_view text, Regularizer& out) {
  if (text == "dropblock") {
    out = Regularizer::kDropBlock;
  } else if (text == "dropout2d") {
    out = Regularizer::kSpatialDropout;
  } else if (text == "none") {
    out = Regularizer::kNone;
  } else {
    return false;
  }
  return true;
}

std::vector<std::string> LdnetConfig::validate() const {
  std::vector<std::string> errors;
  if (in_channels < 1) errors.emplace_back("in_channels: must be >= 1");
  if (base_width < 1) errors.emplace_back("base_width: must be >= 1");
  if (num_classes < 2) errors.emplace_back("num_classes: must be >= 2");
  if (num_classes > 255) errors.emplace_back("num_classes: must be <= 255");
  if (block_size < 1 || block_size % 2 == 0) errors.emplace_back("block_size: must be a positive odd integer");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) errors.emplace_back("dropout_p: must lie in [0,1)");
  return errors;
}

std::string LdnetConfig::to_text() const {
  std::ostringstream os;
  os << "in_channels=" << in_channels << '\n'
     << "base_width=" << base_width << '\n'
     << "num_classes=" << num_classes << '\n'
     << "regularizer=" << to_string(regularizer) << '\n'
     << "block_size=" << block_size << '\n'
     << "dropout_p=" << format_double(dropout_p) << '\n'
     << "attention=" << (attention ? "true" : "false") << '\n'
     << "attention_f_int=" << attention_f_int << '\n'
     << "init_seed=" << init_seed << '\n';
  return os.str();
}

LdnetConfig LdnetConfig::from_key_values(const KeyValues& kv, std::vector<std::string>& errors) {
  LdnetConfig c;
  FieldReader r(kv, errors);
  r.read("in_channels", c.in_channels);
  r.read("base_width", c.base_width);
  r.read("num_classes", c.num_classes);
  std::string reg = to_string(c.regularizer);
  r.read("regularizer", reg);
  if (!parse_regularizer(reg, c.regularizer)) {
    errors.push_back("regularizer: expected dropblock|dropout2d|none, got '" + reg + "'");
  }
  r.read("block_size", c.block_size);
  r.read("dropout_p", c.dropout_p);
  r.read("attention", c.attention);
  r.read("attention_f_int", c.attention_f_int);
  r.read("init_seed", c.init_seed);
  return c;
}

namespace {

struct Widths {
  std::array<std::size_t, 5> encoder;  // in, F, 2F, 4F, 8F
  std::array<std::size_t, 3> skip;     // decoder order: 4F, 2F, F
  std::array<std::size_t, 3> gating;   // decoder order: 8F, 4F, 2F
};

Widths widths(const LdnetConfig& c) {
  const std::size_t f = c.base_width;
  return {{c.in_channels, f, 2 * f, 4 * f, 8 * f}, {4 * f, 2 * f, f}, {8 * f, 4 * f, 2 * f}};
}

std::size_t f_int_for(const LdnetConfig& c, std::size_t f_l) {
  return c.attention_f_int ? c.attention_f_int : default_f_int(f_l);
}

}  // namespace

std::size_t param_count(const LdnetConfig& config) {
  const auto w = widths(config);
  std::size_t total = 0;
  for (std::size_t b = 0; b < 4; ++b) total += conv_stack_param_count(w.encoder[b], w.encoder[b + 1]);
  const std::size_t deep = w.encoder[4];
  total += kAsppRates.size() * (9 * deep * deep + deep);
  for (std::size_t d = 0; d < 3; ++d) {
    if (config.attention) total += attention_gate_param_count(w.skip[d], w.gating[d], f_int_for(config, w.skip[d]));
    total += conv_stack_param_count(w.skip[d] + w.gating[d], w.skip[d]);
  }
  total += config.base_width * config.num_classes + config.num_classes;
  return total;
}

template <typename T>
LdnetParams<T> LdnetParams<T>::make(const LdnetConfig& config) {
  InitRng rng(config.init_seed);
  const auto w = widths(config);
  LdnetParams p;
  for (std::size_t b = 0; b < 4; ++b) p.encoder[b] = ConvStackParams<T>::make(w.encoder[b], w.encoder[b + 1], rng);
  p.aspp = AsppParams<T>::make(w.encoder[4], rng);
  for (std::size_t d = 0; d < 3; ++d) {
    if (config.attention) {
      p.decoder[d].gate = AttentionGateParams<T>::make(w.skip[d], w.gating[d], f_int_for(config, w.skip[d]), rng);
    }
    p.decoder[d].stack = ConvStackParams<T>::make(w.skip[d] + w.gating[d], w.skip[d], rng);
  }
  p.classifier = Conv2dParams<T>::make(config.base_width, config.num_classes, 1, true, rng);
  return p;
}

template <typename T>
ParamList<T> LdnetParams<T>::collect() const {
  ParamList<T> out;
  for (std::size_t b = 0; b < encoder.size(); ++b) encoder[b].collect("encoder." + std::to_string(b), out);
  aspp.collect("aspp", out);
  for (std::size_t d = 0; d < decoder.size(); ++d) {
    const std::string prefix = "decoder." + std::to_string(d);
    if (decoder[d].gate.w_x.defined()) decoder[d].gate.collect(prefix + ".gate", out);
    decoder[d].stack.collect(prefix + ".stack", out);
  }
  classifier.collect("classifier", out);
  return out;
}

template <typename T>
Ldnet<T>::Ldnet(LdnetConfig config) : config_(std::move(config)) {
  const auto errors = config_.validate();
  if (!errors.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& e : errors) msg += " " + e + ";";
    throw std::invalid_argument(msg);
  }
  params_ = LdnetParams<T>::make(config_);
}

template <typename T>
ParamList<T> Ldnet<T>::trainable_parameters() const {
  ParamList<T> out;
  for (auto& p : parameters()) {
    if (p.trainable) out.push_back(std::move(p));
  }
  return out;
}

template <typename T>
Tensor<T> Ldnet<T>::regularize(const Tensor<T>& h, std::size_t block, const ForwardOptions& options) const {
  if (options.mode == Mode::kEval) return h;
  const std::uint64_t seed = derive_seed(options.seed, {block});
  switch (config_.regularizer) {
    case Regularizer::kDropBlock: {
      // Maps smaller than one block (the deepest stage of small inputs) pass through.
      if (h.dim(2) < static_cast<std::size_t>(config_.block_size)) return h;
      return dropblock_apply(DropBlockConfig{config_.block_size, keep_prob_, Mode::kTrain, seed}, h);
    }
    case Regularizer::kSpatialDropout:
      return spatial_dropout2d(h, config_.dropout_p, Mode::kTrain, seed);
    case Regularizer::kNone:
      return h;
  }
  return h;
}

template <typename T>
LdnetTrace<T> Ldnet<T>::trace(const Tensor<T>& input, const ForwardOptions& options) {
  if (input.rank() != 4) throw std::invalid_argument("ldnet expects NCHW input, got " + to_string(input.shape()));
  const auto& s = input.shape();
  if (s[1] != config_.in_channels) {
    throw std::invalid_argument("ldnet expects " + std::to_string(config_.in_channels) +
                                " input channels, got shape " + to_string(s));
  }
  if (s[2] != s[3] || s[2] % 8 != 0) {
    throw std::invalid_argument("ldnet input must be square with side divisible by 8, got " + to_string(s));
  }

  LdnetTrace<T> out;
  Tensor<T> h = input;
  for (std::size_t b = 0; b < 4; ++b) {
    h = conv_stack_forward(params_.encoder[b], h, options.mode);
    h = regularize(h, b, options);
    if (b < 3) {
      out.skips[b] = h;
      h = maxpool2d(h);
    }
  }
  out.deepest = h;
  out.aspp = aspp_forward(params_.aspp, h);

  Tensor<T> coarse = out.aspp;
  for (std::size_t d = 0; d < 3; ++d) {
    const auto& skip = out.skips[2 - d];
    auto up = upsample2x(coarse);
    Tensor<T> gated = skip;
    if (config_.attention) {
      auto gate = attention_gate(params_.decoder[d].gate, skip, up);
      gated = gate.gated;
      out.alphas[d] = gate.alpha;
    }
    coarse = conv_stack_forward(params_.decoder[d].stack, concat_channels(gated, up), options.mode);
  }
  out.logits = conv2d(coarse, params_.classifier.weight, params_.classifier.bias, {});
  return out;
}

template struct LdnetParams<float>;
template struct LdnetParams<double>;
template class Ldnet<float>;
template class Ldnet<double>;

}  // namespace ldnet
