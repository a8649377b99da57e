#pragma once

// Central finite-difference checks of analytic gradients in double precision.
//
// A checked function's output is reduced to the scalar L = sum(out * R) with
// a fixed random R, so every output element contributes. For each input that
// requires a gradient, dL/dx from backward() is compared entry by entry with
// (L(x + h) - L(x - h)) / 2h.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dtn/random.hpp"
#include "dtn/tensor.hpp"

namespace dtn {

/// Denominator floor of the relative error; below it the comparison is
/// effectively absolute.
inline constexpr double kGradErrorFloor = 1e-6;
inline constexpr double kOpGradTolerance = 1e-4;
inline constexpr double kLossGradTolerance = 1e-3;

/// |a - n| / max(|a|, |n|, kGradErrorFloor)
double gradient_relative_error(double analytic, double numeric);

using GradFn = std::function<TensorD(const std::vector<TensorD>&)>;

struct GradcheckOptions {
  std::size_t instances = 20;
  double step = 1e-5;
  std::uint64_t seed = 1234;
  /// Entries perturbed per input tensor; larger tensors are subsampled.
  std::size_t max_entries_per_input = 48;
};

/// Largest relative error over the checked entries of every input with
/// requires_grad set. Input data is restored afterwards.
double max_gradient_error(const GradFn& fn, const std::vector<TensorD>& inputs, Rng& rng,
                          const GradcheckOptions& options = {}, std::size_t* entries_checked = nullptr);

struct GradcheckReport {
  std::string name;
  std::size_t instances = 0;
  std::size_t entries = 0;
  double max_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return max_error < tolerance; }
};

/// Names accepted by run_gradcheck, primitive ops first, then the two
/// end-to-end loss checks ("rpn_loss", "roi_loss").
std::vector<std::string> gradcheck_names();

/// Throws std::invalid_argument for an unknown name.
GradcheckReport run_gradcheck(const std::string& name, const GradcheckOptions& options = {});

std::vector<GradcheckReport> run_gradcheck_suite(const GradcheckOptions& options = {});

}  // namespace dtn
