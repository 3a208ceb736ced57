#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "prism_guard/prism_guard.hpp"

namespace testing_support {

/// Flattens every parameter block of `p` in visiting order.
template <class P>
std::vector<double> flatten(P& p) {
  std::vector<double> out;
  for (auto s : pguard::nn::param_spans(p)) out.insert(out.end(), s.begin(), s.end());
  return out;
}

template <class P>
void unflatten(P& p, std::span<const double> xs) {
  std::size_t k = 0;
  for (auto s : pguard::nn::param_spans(p))
    for (auto& x : s) x = xs[k++];
}

/// Max relative error between the analytic gradient written by
/// `loss(params, &grads)` and central differences of `loss(params, nullptr)`.
template <class P, class Loss>
double param_grad_error(const P& params, Loss&& loss, double eps = 1e-6) {
  P work = params;
  P grads = params;
  pguard::nn::zero_grads(grads);
  loss(work, &grads);
  const auto analytic = flatten(grads);
  const auto x0 = flatten(work);
  return pguard::grad_check(
      [&](std::span<const double> xs) {
        P q = params;
        unflatten(q, xs);
        return loss(q, static_cast<P*>(nullptr));
      },
      analytic, x0, eps);
}

inline std::vector<pguard::Vec> random_vecs(pguard::Rng& rng, std::size_t n, std::size_t d, double scale = 1.0) {
  std::vector<pguard::Vec> out;
  for (std::size_t i = 0; i < n; ++i) {
    pguard::Vec v(d);
    pguard::fill_normal(v.span(), rng, scale);
    out.push_back(std::move(v));
  }
  return out;
}

/// Fresh, empty scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("prism_guard_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace testing_support
