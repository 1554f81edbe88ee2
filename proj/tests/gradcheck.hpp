#pragma once

// Central finite-difference oracle used by the gradient tests. Analytic
// gradients come from the tape; numeric ones re-evaluate the forward closure
// with perturbed leaf data at fp64.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dentlab/tensor.hpp"

namespace gradcheck {

struct Result {
  bool ok = true;
  double worst_rel = 0.0;
  std::string detail;
};

// fn() must rebuild the scalar objective from the current leaf values.
inline Result check(const std::function<dentlab::Tensor<double>()>& fn,
                    std::vector<dentlab::Tensor<double>*> leaves, double h = 1e-5,
                    double rtol = 1e-4, double atol = 1e-7) {
  using dentlab::Tape;
  using dentlab::TapeScope;

  for (auto* l : leaves) l->zero_grad();
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto root = fn();
    tape.backward(root);
  }

  Result res;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto* leaf = leaves[li];
    const double* g = leaf->grad();
    for (int64_t i = 0; i < leaf->numel(); ++i) {
      double saved = leaf->data()[i];
      leaf->data()[i] = saved + h;
      double fp = fn().item();
      leaf->data()[i] = saved - h;
      double fm = fn().item();
      leaf->data()[i] = saved;
      double num = (fp - fm) / (2.0 * h);
      double ana = g ? g[i] : 0.0;
      double err = std::abs(ana - num);
      double tol = rtol * std::max(std::abs(ana), std::abs(num)) + atol;
      double rel = err / std::max({std::abs(ana), std::abs(num), 1e-8});
      if (rel > res.worst_rel && err > atol) res.worst_rel = rel;
      if (err > tol) {
        res.ok = false;
        res.detail = "leaf " + std::to_string(li) + " index " + std::to_string(i) + ": analytic " +
                     std::to_string(ana) + " vs numeric " + std::to_string(num);
        return res;
      }
    }
  }
  return res;
}

}  // namespace gradcheck
