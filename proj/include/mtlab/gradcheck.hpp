// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of reverse-mode gradients.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mtlab/params.hpp"

namespace mtlab {

struct GradcheckOptions {
  double step = 1e-5;
  double rtol = 1e-4;
  double atol = 1e-8;
  /// Entries probed per tensor; 0 probes every entry.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradcheckMismatch {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradcheckReport {
  std::size_t checked = 0;
  /// Largest |analytic - numeric| / (atol + rtol * max(|analytic|, |numeric|)).
  double worst_ratio = 0.0;
  std::vector<GradcheckMismatch> mismatches;

  bool ok() const { return mismatches.empty(); }
  std::string summary() const;
};

/// Compares the backward pass of `loss_fn` against central differences for
/// every entry (or a seeded sample) of `inputs`. `loss_fn` must rebuild its
/// graph on every call and be deterministic.
GradcheckReport gradcheck(const std::function<Tensor()>& loss_fn, std::span<const NamedTensor> inputs,
                          const GradcheckOptions& options = {});

}  // namespace mtlab
