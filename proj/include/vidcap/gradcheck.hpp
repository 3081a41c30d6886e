#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vidcap/autodiff.hpp"
#include "vidcap/error.hpp"

namespace vidcap {

struct GradBlockReport {
  std::string name;
  std::size_t entries_checked = 0;
  double max_abs_diff = 0.0;
  double scale = 0.0;  ///< max |gradient| over the checked entries, both routes
  double rel_error = 0.0;

};

struct GradCheckReport {
  std::vector<GradBlockReport> blocks;
  double max_rel_error = 0.0;
  double rel_tol = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// 0 checks every entry. Otherwise a block with more entries is sampled
  /// down to this many: a diagonal sweep first (so every row
  /// and column is hit when the cap allows), then seeded random fill.
  std::size_t max_entries_per_block = 0;
  std::uint64_t sample_seed = 1;
  /// Installed on the analytic graph only (negative-control tests).
  std::function<void(const std::string&, Tensor<double>&)> backward_hook;
};

namespace detail {

inline std::vector<std::size_t> sample_entries(std::size_t rows, std::size_t cols, std::size_t cap,
                                               std::mt19937_64& rng) {
  const std::size_t n = rows * cols;
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (cap == 0 || n <= cap) return all;
  std::vector<std::uint8_t> taken(n, 0);
  std::vector<std::size_t> out;
  out.reserve(cap);
  const std::size_t offset = std::size_t(uniform01(rng) * double(cols));
  for (std::size_t i = 0; i < std::max(rows, cols) && out.size() < cap; ++i) {
    const std::size_t k = (i % rows) * cols + (i + offset) % cols;
    if (taken[k]) continue;
    taken[k] = 1;
    out.push_back(k);
  }
  std::vector<std::size_t> rest;
  for (std::size_t k = 0; k < n; ++k)
    if (!taken[k]) rest.push_back(k);
  for (std::size_t i = 0; out.size() < cap; ++i) {
    const std::size_t j = i + std::size_t(uniform01(rng) * double(rest.size() - i));
    std::swap(rest[i], rest[j]);
    out.push_back(rest[i]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

using LossClosure = std::function<Graph<double>::Var(Graph<double>&)>;

/// Compares reverse-mode gradients against central finite differences.
///
/// Per block, the error is max_i |analytic_i - numeric_i| divided by the
/// largest gradient magnitude in the block (floored at 1e-8), so entries
/// whose gradient sits at the round-off floor do not dominate. The check
/// passes iff every block's error is <= rel_tol.
///
/// The closure must be deterministic; it is evaluated twice up front and a
/// mismatch is rejected.
inline GradCheckReport grad_check(const LossClosure& loss_fn,
                                  std::span<Parameter<double>* const> params, double rel_tol,
                                  const GradCheckOptions& opts = {}) {
  auto eval = [&]() {
    Graph<double> g(false);
    return g.value(loss_fn(g))[0];
  };
  const double first = eval();
  const double second = eval();
  if (first != second) {
    throw ValidationError("grad_check: closure is not deterministic (dropout or unseeded randomness?)");
  }

  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g(true);
    if (opts.backward_hook) g.set_backward_hook(opts.backward_hook);
    g.backward(loss_fn(g));
  }

  GradCheckReport report;
  report.rel_tol = rel_tol;
  std::mt19937_64 rng(opts.sample_seed);
  for (auto* p : params) {
    GradBlockReport block;
    block.name = p->name;
    const auto idx = detail::sample_entries(p->value.rows(), p->value.cols(), opts.max_entries_per_block, rng);
    for (std::size_t k : idx) {
      const double orig = p->value[k];
      p->value[k] = orig + opts.step;
      const double up = eval();
      p->value[k] = orig - opts.step;
      const double down = eval();
      p->value[k] = orig;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double analytic = p->grad[k];
      block.max_abs_diff = std::max(block.max_abs_diff, std::abs(analytic - numeric));
      block.scale = std::max({block.scale, std::abs(analytic), std::abs(numeric)});
    }
    block.entries_checked = idx.size();
    block.rel_error = block.max_abs_diff / std::max(block.scale, 1e-8);
    report.max_rel_error = std::max(report.max_rel_error, block.rel_error);
    report.blocks.push_back(std::move(block));
  }
  report.passed = report.max_rel_error <= rel_tol;
  return report;
}

}  // namespace vidcap
