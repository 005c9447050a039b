// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ------------------------------------------------------------------------

#pragma once

#include "covtwin/error.hpp"
#include "covtwin/nn/layers.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace covtwin::nn {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    AdamConfig config;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::uint64_t step = 0;
};

inline AdamState make_adam_state(const ParamList& params, AdamConfig cfg = {}) {
    AdamState s{cfg, {}, {}, 0};
    for (const auto* p : params) {
        s.m.emplace_back(p->value.shape);
        s.v.emplace_back(p->value.shape);
    }
    return s;
}

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient.
inline void adam_step(const ParamList& params, AdamState& s) {
    require_shape(params.size() == s.m.size(), "adam: parameter count changed");
    ++s.step;
    const auto& c = s.config;
    const double t = static_cast<double>(s.step);
    const double corr1 = 1.0 - std::pow(c.beta1, t);
    const double corr2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        Param& p = *params[k];
        require_shape(p.grad.shape == p.value.shape && s.m[k].shape == p.value.shape,
                      "adam: shape mismatch for " + p.name);
        auto& m = s.m[k].data;
        auto& v = s.v[k].data;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad.data[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            const double mhat = m[i] / corr1;
            const double vhat = v[i] / corr2;
            p.value.data[i] -= c.lr * mhat / (std::sqrt(vhat) + c.epsilon);
        }
    }
}

}  // namespace covtwin::nn
