#include "dtn/optimizer.hpp"

#include <cmath>

#include "dtn/errors.hpp"

namespace dtn {

void AdamConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("optimizer: lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optimizer: beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optimizer: beta2 must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("optimizer: eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be non-negative");
}

template <typename T>
Adam<T>::Adam(AdamConfig config, std::vector<NamedParameter<T>> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  slots_.reserve(params_.size());
  for (const auto& p : params_) {
    slots_.push_back({p.name, std::vector<T>(p.tensor.numel(), T(0)), std::vector<T>(p.tensor.numel(), T(0))});
  }
}

template <typename T>
double Adam<T>::learning_rate_at(std::uint64_t step) const {
  if (config_.warmup_iters == 0 || step >= config_.warmup_iters) return config_.lr;
  return config_.lr * static_cast<double>(step) / static_cast<double>(config_.warmup_iters);
}

template <typename T>
void Adam<T>::step() {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name);
    }
  }
  ++step_;
  const double lr = learning_rate_at(step_);
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto tensor = params_[i].tensor;
    auto data = tensor.data();
    const bool has_grad = tensor.has_grad();
    auto grad = tensor.grad();
    auto& slot = slots_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double w = static_cast<double>(data[j]);
      const double g = (has_grad ? static_cast<double>(grad[j]) : 0.0) + config_.weight_decay * w;
      const double m = b1 * static_cast<double>(slot.m[j]) + (1.0 - b1) * g;
      const double v = b2 * static_cast<double>(slot.v[j]) + (1.0 - b2) * g * g;
      slot.m[j] = static_cast<T>(m);
      slot.v[j] = static_cast<T>(v);
      const double m_hat = m / c1;
      const double v_hat = v / c2;
      data[j] = static_cast<T>(w - lr * m_hat / (std::sqrt(v_hat) + config_.eps));
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) {
    auto t = p.tensor;
    t.zero_grad();
  }
}

template <typename T>
void Adam<T>::restore(std::uint64_t step, const std::vector<Slot>& slots) {
  if (slots.size() != slots_.size()) {
    throw CheckpointError("optimizer state has " + std::to_string(slots.size()) + " slots, expected " +
                          std::to_string(slots_.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].name != slots_[i].name || slots[i].m.size() != slots_[i].m.size() ||
        slots[i].v.size() != slots_[i].v.size()) {
      throw CheckpointError("optimizer slot mismatch at " + slots_[i].name);
    }
  }
  slots_ = slots;
  step_ = step;
}

template class Adam<float>;
template class Adam<double>;

}  // namespace dtn
