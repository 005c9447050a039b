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
#include "covtwin/nn/tensor.hpp"

#include <cmath>
#include <string>

namespace covtwin::nn {

struct LossGrad {
    double value = 0.0;
    Tensor grad_a;  // d value / d first argument
    Tensor grad_b;  // d value / d second argument
};

/// Sum over i of 0.5 * ((mu_i - y_i)^2 / var_i + ln var_i). grad_a is the
/// gradient w.r.t. mu, grad_b w.r.t. var.
inline LossGrad gaussian_nll(const Tensor& mu, const Tensor& var, const Tensor& y) {
    require_shape(mu.size() == var.size() && mu.size() == y.size(), "gaussian_nll: length mismatch");
    LossGrad out{0.0, Tensor(mu.shape), Tensor(var.shape)};
    for (std::size_t i = 0; i < mu.size(); ++i) {
        const double v = var.data[i];
        if (!(v > 0.0)) throw ValidationError("gaussian_nll: variance must be positive at index " + std::to_string(i));
        const double r = mu.data[i] - y.data[i];
        out.value += 0.5 * (r * r / v + std::log(v));
        out.grad_a.data[i] = r / v;
        out.grad_b.data[i] = 0.5 * (1.0 / v - r * r / (v * v));
    }
    return out;
}

/// Closed-form KL(N(mu, diag exp(logvar)) || N(0, I)).
inline LossGrad kl_diag_gaussian(const Tensor& mu, const Tensor& logvar) {
    require_shape(mu.size() == logvar.size(), "kl_diag_gaussian: length mismatch");
    LossGrad out{0.0, Tensor(mu.shape), Tensor(logvar.shape)};
    for (std::size_t i = 0; i < mu.size(); ++i) {
        const double m = mu.data[i], lv = logvar.data[i], e = std::exp(lv);
        out.value += 0.5 * (m * m + e - 1.0 - lv);
        out.grad_a.data[i] = m;
        out.grad_b.data[i] = 0.5 * (e - 1.0);
    }
    return out;
}

/// Mean of squared elementwise differences.
inline LossGrad mse(const Tensor& a, const Tensor& b) {
    require_shape(a.shape == b.shape, "mse: shape " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    require_shape(a.size() > 0, "mse: empty tensors");
    LossGrad out{0.0, Tensor(a.shape), Tensor(b.shape)};
    const double inv_n = 1.0 / static_cast<double>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        out.value += d * d;
        out.grad_a.data[i] = 2.0 * d * inv_n;
        out.grad_b.data[i] = -2.0 * d * inv_n;
    }
    out.value *= inv_n;
    return out;
}

/// 0.5 * sum of squared differences: the negative log-likelihood of a
/// unit-variance Gaussian decoder up to a constant.
inline LossGrad half_sse(const Tensor& pred, const Tensor& target) {
    require_shape(pred.shape == target.shape, "half_sse: shape mismatch");
    LossGrad out{0.0, Tensor(pred.shape), Tensor(target.shape)};
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred.data[i] - target.data[i];
        out.value += 0.5 * d * d;
        out.grad_a.data[i] = d;
        out.grad_b.data[i] = -d;
    }
    return out;
}

}  // namespace covtwin::nn
