#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "flockpf/common.hpp"
#include "flockpf/diff.hpp"

namespace flockpf::testing {

/// Central-difference gradient check. `build` must construct the scalar
/// output from scratch on each call (using the current leaf values and a
/// tape when given). Returns the max relative error over all leaf entries.
/// The denominator is floored: central differences of an O(1) output carry
/// ~1e-10 absolute noise at h=1e-5, so gradients below the floor are held
/// to absolute agreement instead of a meaningless relative one.
inline double gradient_check(const std::function<diff::Tensor(diff::Tape*)>& build,
                             const std::vector<diff::Tensor>& leaves, double h = 1e-5,
                             double grad_floor = 1e-4) {
  diff::Tape tape;
  diff::Tensor out = build(&tape);
  for (const auto& l : leaves) l.zero_grad();
  tape.backward(out);
  std::vector<std::vector<double>> analytic;
  for (const auto& l : leaves) analytic.push_back(l.grad());

  double worst = 0.0;
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    const diff::Tensor& leaf = leaves[p];
    for (std::size_t i = 0; i < leaf.size(); ++i) {
      const double saved = leaf.values()[i];
      leaf.values()[i] = saved + h;
      const double fp = build(nullptr).at(0, 0);
      leaf.values()[i] = saved - h;
      const double fm = build(nullptr).at(0, 0);
      leaf.values()[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double g = analytic[p][i];
      const double denom = std::max({std::abs(fd), std::abs(g), grad_floor});
      worst = std::max(worst, std::abs(fd - g) / denom);
    }
  }
  return worst;
}

inline diff::Tensor random_tensor(int rows, int cols, Rng& rng, double scale = 1.0, bool leaf = true) {
  diff::Tensor t = leaf ? diff::Tensor::param(rows, cols) : diff::Tensor::zeros(rows, cols);
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

}  // namespace flockpf::testing
