// Copyright 2026 The Coherence Toolkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Central finite-difference gradient checking over a ParamSet.

#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "coherence/common.hpp"
#include "coherence/tape.hpp"

namespace coherence::testing_util {

// Relative error with an absolute floor, so that components whose true
// gradient is ~0 are compared on an absolute scale.
inline double grad_rel_error(double analytic, double numeric, double floor = 1e-7) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckResult {
  double max_rel = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "tensor[r,c] analytic=.. numeric=.."
};

// Compares `analytic` against the fourth-order central difference
// (8 (L(p+h) - L(p-h)) - (L(p+2h) - L(p-2h))) / 12h for every component of
// `params`, or at most `per_tensor` components per tensor drawn
// with `rng` when per_tensor > 0. `loss` must read the current values of
// `params`; they are restored after each probe.
template <typename Loss>
GradCheckResult check_gradients(ParamSet& params, const ParamSet& analytic, Loss&& loss,
                                double h = 1e-4, std::size_t per_tensor = 0,
                                Rng* rng = nullptr) {
  GradCheckResult res;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Matrix& m = params[t].value;
    const auto total = static_cast<std::size_t>(m.size());
    std::vector<std::size_t> idx;
    if (per_tensor == 0 || per_tensor >= total || !rng) {
      idx.resize(total);
      for (std::size_t i = 0; i < total; ++i) idx[i] = i;
    } else {
      idx = rng->sample_without_replacement(total, per_tensor);
    }
    for (auto flat : idx) {
      const auto r = static_cast<Eigen::Index>(flat) % m.rows();
      const auto c = static_cast<Eigen::Index>(flat) / m.rows();
      const double orig = m(r, c);
      auto at = [&](double offset) {
        m(r, c) = orig + offset;
        const double v = loss();
        m(r, c) = orig;
        return v;
      };
      const double near = at(h) - at(-h);
      const double far = at(2.0 * h) - at(-2.0 * h);
      const double numeric = (8.0 * near - far) / (12.0 * h);
      const double a = analytic[t].value(r, c);
      const double e = grad_rel_error(a, numeric);
      ++res.checked;
      if (e > res.max_rel) {
        res.max_rel = e;
        res.worst = params[t].name + "[" + std::to_string(r) + "," + std::to_string(c) +
                    "] analytic=" + std::to_string(a) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  return res;
}

}  // namespace coherence::testing_util
