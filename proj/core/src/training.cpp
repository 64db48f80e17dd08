#include "ldnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "ldnet/checkpoint.hpp"
#include "ldnet/random.hpp"

namespace ldnet {

std::vector<std::string> TrainConfig::validate() const {
  std::vector<std::string> errors;
  if (!(initial_lr > 0.0) || !std::isfinite(initial_lr)) {
    errors.push_back("initial_lr: must be positive, got " + format_double(initial_lr));
  }
  if (!(adam_eps > 0.0)) errors.push_back("adam_eps: must be positive, got " + format_double(adam_eps));
  if (!(beta1 >= 0.0 && beta1 < 1.0)) errors.push_back("beta1: must lie in [0,1), got " + format_double(beta1));
  if (!(beta2 >= 0.0 && beta2 < 1.0)) errors.push_back("beta2: must lie in [0,1), got " + format_double(beta2));
  if (!(weight_decay >= 0.0)) errors.push_back("weight_decay: must be >= 0, got " + format_double(weight_decay));
  if (!(power >= 0.0)) errors.push_back("power: must be >= 0, got " + format_double(power));
  if (max_epochs < 0) errors.push_back("max_epochs: must be >= 0, got " + std::to_string(max_epochs));
  if (batch_size < 1) errors.push_back("batch_size: must be >= 1");
  if (!(kp_start >= 0.0 && kp_start <= 1.0)) errors.push_back("kp_start: must lie in [0,1], got " + format_double(kp_start));
  if (!(kp_end >= 0.0 && kp_end <= 1.0)) errors.push_back("kp_end: must lie in [0,1], got " + format_double(kp_end));
  if (precision != "float" && precision != "double") {
    errors.push_back("precision: expected float|double, got '" + precision + "'");
  }
  return errors;
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "initial_lr=" << format_double(initial_lr) << '\n'
     << "adam_eps=" << format_double(adam_eps) << '\n'
     << "beta1=" << format_double(beta1) << '\n'
     << "beta2=" << format_double(beta2) << '\n'
     << "weight_decay=" << format_double(weight_decay) << '\n'
     << "power=" << format_double(power) << '\n'
     << "max_epochs=" << max_epochs << '\n'
     << "batch_size=" << batch_size << '\n'
     << "kp_start=" << format_double(kp_start) << '\n'
     << "kp_end=" << format_double(kp_end) << '\n'
     << "kp_inverted=" << (kp_inverted ? "true" : "false") << '\n'
     << "freeze_masks=" << (freeze_masks ? "true" : "false") << '\n'
     << "seed=" << seed << '\n'
     << "precision=" << precision << '\n';
  return os.str();
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv, std::vector<std::string>& errors) {
  TrainConfig c;
  FieldReader r(kv, errors);
  r.read("initial_lr", c.initial_lr);
  r.read("adam_eps", c.adam_eps);
  r.read("beta1", c.beta1);
  r.read("beta2", c.beta2);
  r.read("weight_decay", c.weight_decay);
  r.read("power", c.power);
  r.read("max_epochs", c.max_epochs);
  r.read("batch_size", c.batch_size);
  r.read("kp_start", c.kp_start);
  r.read("kp_end", c.kp_end);
  r.read("kp_inverted", c.kp_inverted);
  r.read("freeze_masks", c.freeze_masks);
  r.read("seed", c.seed);
  r.read("precision", c.precision);
  return c;
}

double poly_lr(int epoch, const TrainConfig& config) {
  if (epoch < 0 || epoch > config.max_epochs) {
    throw std::out_of_range("poly_lr: epoch " + std::to_string(epoch) + " outside [0," +
                            std::to_string(config.max_epochs) + "]");
  }
  if (config.max_epochs == 0) return config.initial_lr;
  const double base = 1.0 - static_cast<double>(epoch) / static_cast<double>(config.max_epochs);
  return config.initial_lr * std::pow(base, config.power);
}

double kp_schedule(int epoch, const TrainConfig& config) {
  const double t = config.max_epochs > 0 ? static_cast<double>(epoch) / static_cast<double>(config.max_epochs) : 0.0;
  const double value = config.kp_start + (config.kp_end - config.kp_start) * t;
  return config.kp_inverted ? 1.0 - value : value;
}

template <typename T>
void adam_step(const ParamList<T>& params, AdamState<T>& state, double lr, const TrainConfig& config) {
  std::vector<const NamedParam<T>*> trainable;
  for (const auto& p : params) {
    if (p.trainable) trainable.push_back(&p);
  }
  if (state.m.empty()) {
    for (const auto* p : trainable) {
      state.m.emplace_back(p->tensor.numel(), T{0});
      state.v.emplace_back(p->tensor.numel(), T{0});
    }
  }
  if (state.m.size() != trainable.size()) {
    throw std::invalid_argument("adam_step: optimizer state holds " + std::to_string(state.m.size()) +
                                " moments for " + std::to_string(trainable.size()) + " parameters");
  }
  for (const auto* p : trainable) {
    if (!p->tensor.has_grad()) continue;
    const auto g = p->tensor.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw NonFiniteGradientError("non-finite gradient in parameter '" + p->name + "' at index " +
                                     std::to_string(i) + "; step aborted");
      }
    }
  }

  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const auto wd = static_cast<T>(config.weight_decay);
  for (std::size_t k = 0; k < trainable.size(); ++k) {
    Tensor<T> tensor = trainable[k]->tensor;
    auto theta = tensor.mutable_values();
    const auto g = tensor.has_grad() ? tensor.grad() : std::span<const T>{};
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T grad = (g.empty() ? T{0} : g[i]) + wd * theta[i];
      m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * grad);
      v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * grad * grad);
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      theta[i] = static_cast<T>(theta[i] - lr * m_hat / (std::sqrt(v_hat) + config.adam_eps));
    }
  }
}

template <typename T>
Tensor<T> batch_frames(const std::vector<const SegmentationSample*>& batch) {
  if (batch.empty()) throw std::invalid_argument("batch_frames: empty batch");
  const auto& first = *batch.front();
  std::vector<T> values;
  values.reserve(batch.size() * first.frame.size());
  for (const auto* s : batch) {
    if (s->height != first.height || s->width != first.width || s->channels != first.channels) {
      throw std::invalid_argument("batch_frames: sample '" + s->id + "' differs in size from '" + first.id + "'");
    }
    values.insert(values.end(), s->frame.begin(), s->frame.end());
  }
  return Tensor<T>(Shape{batch.size(), first.channels, first.height, first.width}, std::move(values));
}

std::vector<std::int32_t> batch_labels(const std::vector<const SegmentationSample*>& batch) {
  std::vector<std::int32_t> labels;
  for (const auto* s : batch) labels.insert(labels.end(), s->label.begin(), s->label.end());
  return labels;
}

template <typename T>
Trainer<T>::Trainer(Ldnet<T>& model, TrainConfig config) : model_(model), config_(std::move(config)) {
  const auto errors = config_.validate();
  if (!errors.empty()) throw std::invalid_argument("invalid training config: " + errors.front());
}

template <typename T>
double Trainer<T>::train_epoch(const std::vector<SegmentationSample>& samples, int epoch) {
  if (samples.empty()) throw std::invalid_argument("train_epoch: empty training set");
  const double lr = poly_lr(epoch, config_);
  model_.set_keep_prob(kp_schedule(epoch, config_));

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(config_.seed, {0x5u, static_cast<std::uint64_t>(epoch)}));
  std::shuffle(order.begin(), order.end(), rng);

  const auto params = model_.parameters();
  double total = 0.0;
  std::size_t batch_index = 0;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size, ++batch_index) {
    std::vector<const SegmentationSample*> batch;
    for (std::size_t i = start; i < std::min(order.size(), start + config_.batch_size); ++i) {
      batch.push_back(&samples[order[i]]);
    }
    const auto input = batch_frames<T>(batch);
    const auto labels = batch_labels(batch);
    const std::uint64_t mask_epoch = config_.freeze_masks ? 0 : static_cast<std::uint64_t>(epoch);
    ForwardOptions options{Mode::kTrain, derive_seed(config_.seed, {0xdu, mask_epoch, batch_index})};
    for (const auto& p : params) Tensor<T>(p.tensor).zero_grad();
    const auto loss = softmax_cross_entropy(model_.forward(input, options), labels);
    loss.backward();
    adam_step(params, state_, lr, config_);
    total += static_cast<double>(loss.item()) * static_cast<double>(batch.size());
  }
  for (const auto& p : params) Tensor<T>(p.tensor).zero_grad();
  return total / static_cast<double>(samples.size());
}

template <typename T>
void Trainer<T>::save(const std::filesystem::path& path, int epochs_done) const {
  OptimizerSection opt;
  opt.step = state_.step;
  std::size_t k = 0;
  for (const auto& p : model_.parameters()) {
    if (!p.trainable) continue;
    if (k < state_.m.size()) {
      opt.moments.push_back({"m." + p.name, p.tensor.shape(), {state_.m[k].begin(), state_.m[k].end()}});
      opt.moments.push_back({"v." + p.name, p.tensor.shape(), {state_.v[k].begin(), state_.v[k].end()}});
    }
    ++k;
  }
  save_params(model_, path, "epochs_done=" + std::to_string(epochs_done) + "\n", std::move(opt));
}

template <typename T>
int Trainer<T>::resume(const std::filesystem::path& path) {
  const auto file = load_params(model_, path);
  state_ = {};
  if (file.optimizer) {
    state_.step = file.optimizer->step;
    if (!file.optimizer->moments.empty()) {
      ParamList<T> m_list, v_list;
      for (const auto& p : model_.parameters()) {
        if (!p.trainable) continue;
        state_.m.emplace_back(p.tensor.numel());
        state_.v.emplace_back(p.tensor.numel());
        m_list.push_back({"m." + p.name, Tensor<T>(p.tensor.shape()), true});
        v_list.push_back({"v." + p.name, Tensor<T>(p.tensor.shape()), true});
      }
      ParamList<T> all = m_list;
      all.insert(all.end(), v_list.begin(), v_list.end());
      assign_entries(file.optimizer->moments, all);
      for (std::size_t k = 0; k < m_list.size(); ++k) {
        std::copy(m_list[k].tensor.values().begin(), m_list[k].tensor.values().end(), state_.m[k].begin());
        std::copy(v_list[k].tensor.values().begin(), v_list[k].tensor.values().end(), state_.v[k].begin());
      }
    }
  }
  std::vector<std::string> errors;
  int epochs_done = 0;
  FieldReader(parse_key_values(file.header), errors).read("epochs_done", epochs_done);
  if (!errors.empty()) throw CheckpointError(CheckpointError::Cause::kMismatch, errors.front());
  return epochs_done;
}

ConfusionCounts evaluate(const Predictor& predict, const std::vector<SegmentationSample>& samples,
                         std::size_t num_classes) {
  ConfusionCounts counts(num_classes);
  for (const auto& s : samples) counts.accumulate(predict(s), s.label);
  return counts;
}

template <typename T>
ConfusionCounts evaluate(Ldnet<T>& model, const std::vector<SegmentationSample>& samples, std::size_t batch_size) {
  ConfusionCounts counts(model.config().num_classes);
  NoGradGuard no_grad;
  for (std::size_t start = 0; start < samples.size(); start += std::max<std::size_t>(batch_size, 1)) {
    std::vector<const SegmentationSample*> batch;
    std::vector<std::uint8_t> gt;
    for (std::size_t i = start; i < std::min(samples.size(), start + std::max<std::size_t>(batch_size, 1)); ++i) {
      batch.push_back(&samples[i]);
      gt.insert(gt.end(), samples[i].label.begin(), samples[i].label.end());
    }
    const auto pred = argmax_channels(model.forward(batch_frames<T>(batch), {Mode::kEval, 0}));
    counts.accumulate(pred, gt);
  }
  return counts;
}

template <typename T>
std::vector<std::uint8_t> predict_mask(Ldnet<T>& model, const SegmentationSample& sample) {
  NoGradGuard no_grad;
  return argmax_channels(model.forward(batch_frames<T>({&sample}), {Mode::kEval, 0}));
}

#define LDNET_INSTANTIATE_TRAINING(T)                                                                      \
  template void adam_step(const ParamList<T>&, AdamState<T>&, double, const TrainConfig&);                 \
  template Tensor<T> batch_frames(const std::vector<const SegmentationSample*>&);                         \
  template class Trainer<T>;                                                                               \
  template ConfusionCounts evaluate(Ldnet<T>&, const std::vector<SegmentationSample>&, std::size_t);      \
  template std::vector<std::uint8_t> predict_mask(Ldnet<T>&, const SegmentationSample&);

LDNET_INSTANTIATE_TRAINING(float)
LDNET_INSTANTIATE_TRAINING(double)

#undef LDNET_INSTANTIATE_TRAINING

}  // namespace ldnet
