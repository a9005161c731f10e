// Test-only reference implementations. Nothing here calls into the code under
// test except to build the function being differentiated.
#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "xecg/tape.hpp"

namespace xecg::testing {

using ScalarFn = std::function<Var(Tape&, std::vector<Var>&)>;

/// Norm-wise relative error between tape gradients and central finite
/// differences, over all inputs jointly.
inline double gradcheck(const ScalarFn& f, std::vector<Tensor> inputs, double h = 1e-6) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (auto& t : inputs) leaves.push_back(tape.leaf(t, true));
    Var out = f(tape, leaves);
    tape.backward(out);
    for (auto& v : leaves) analytic.push_back(tape.grad(v));
  }
  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> leaves;
    for (auto& t : xs) leaves.push_back(tape.leaf(t, false));
    return f(tape, leaves).value().item();
  };
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + h;
      const double fp = eval(inputs);
      inputs[k][i] = orig - h;
      const double fm = eval(inputs);
      inputs[k][i] = orig;
      const double num = (fp - fm) / (2 * h);
      const double an = analytic[k][i];
      diff2 += (an - num) * (an - num);
      a2 += an * an;
      n2 += num * num;
    }
  }
  const double denom = std::max(std::sqrt(std::max(a2, n2)), 1e-12);
  return std::sqrt(diff2) / denom;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

inline Tensor random_spd(std::size_t n, std::mt19937_64& rng) {
  Tensor a = random_tensor({n, n}, rng);
  Tensor m({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += a.at(i, k) * a.at(j, k);
      m.at(i, j) = s + (i == j ? 0.5 : 0.0);
    }
  return m;
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
inline std::vector<double> jacobi_eigenvalues(Tensor a, int sweeps = 100) {
  const std::size_t n = a.dim(0);
  for (int s = 0; s < sweeps; ++s) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a.at(p, q)) < 1e-300) continue;
        const double theta = (a.at(q, q) - a.at(p, p)) / (2 * a.at(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - sn * akq;
          a.at(k, q) = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - sn * aqk;
          a.at(q, k) = sn * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a.at(i, i);
  return ev;
}

}  // namespace xecg::testing
