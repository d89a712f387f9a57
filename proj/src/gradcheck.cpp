// SPDX-License-Identifier: Apache-2.0

#include "mtlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace mtlab {

std::string GradcheckReport::summary() const {
  std::ostringstream os;
  os << checked << " entries, worst ratio " << worst_ratio << ", " << mismatches.size() << " mismatches";
  for (std::size_t i = 0; i < std::min<std::size_t>(mismatches.size(), 5); ++i) {
    const auto& m = mismatches[i];
    os << "\n  " << m.tensor << "[" << m.index << "]: analytic " << m.analytic << " numeric " << m.numeric;
  }
  return os.str();
}

GradcheckReport gradcheck(const std::function<Tensor()>& loss_fn, std::span<const NamedTensor> inputs,
                          const GradcheckOptions& options) {
  for (auto in : inputs) in.tensor.clear_grad();
  loss_fn().backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tensor.has_grad()) {
      analytic.emplace_back(in.tensor.grad().begin(), in.tensor.grad().end());
    } else {
      analytic.emplace_back(in.tensor.numel(), 0.0);
    }
  }

  GradcheckReport report;
  std::mt19937_64 rng(options.seed);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor tensor = inputs[t].tensor;
    std::vector<std::size_t> entries(tensor.numel());
    std::iota(entries.begin(), entries.end(), 0);
    if (options.max_entries_per_tensor && entries.size() > options.max_entries_per_tensor) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries_per_tensor);
      std::sort(entries.begin(), entries.end());
    }
    auto data = tensor.mutable_data();
    for (std::size_t idx : entries) {
      const double saved = data[idx];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard no_grad;
        data[idx] = saved + options.step;
        plus = loss_fn().item();
        data[idx] = saved - options.step;
        minus = loss_fn().item();
      }
      data[idx] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[t][idx];
      const double bound = options.atol + options.rtol * std::max(std::abs(a), std::abs(numeric));
      const double ratio = std::abs(a - numeric) / bound;
      report.worst_ratio = std::max(report.worst_ratio, ratio);
      ++report.checked;
      if (!(ratio <= 1.0)) report.mismatches.push_back({inputs[t].name, idx, a, numeric});
    }
  }
  return report;
}

}  // namespace mtlab
