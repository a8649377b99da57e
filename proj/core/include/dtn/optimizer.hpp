#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtn/model.hpp"

namespace dtn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// L2 form: added to the gradient before the moment updates.
  double weight_decay = 1e-4;
  /// Linear ramp lr * min(1, step / warmup_iters); 0 disables.
  std::uint64_t warmup_iters = 100;

  void validate() const;
};

/// Bias-corrected Adam over a fixed list of parameters.
template <typename T>
class Adam {
 public:
  struct Slot {
    std::string name;
    std::vector<T> m;
    std::vector<T> v;
  };

  Adam(AdamConfig config, std::vector<NamedParameter<T>> params);

  /// Applies one update from the parameters' current gradients. A parameter
  /// without a gradient buffer is treated as having a zero gradient. Throws
  /// NumericError naming the first parameter with a non-finite gradient.
  void step();
  void zero_grad();
  double learning_rate_at(std::uint64_t step) const;

  std::uint64_t step_count() const { return step_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<NamedParameter<T>>& params() const { return params_; }
  const std::vector<Slot>& slots() const { return slots_; }
  /// Restores moments and step count, matched by parameter name.
  void restore(std::uint64_t step, const std::vector<Slot>& slots);

 private:
  AdamConfig config_;
  std::vector<NamedParameter<T>> params_;
  std::vector<Slot> slots_;
  std::uint64_t step_ = 0;
};

}  // namespace dtn
