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

/**
 * Layers with explicit reverse-mode gradients.
 *
 * Every layer caches what its backward pass needs during forward(); calling
 * backward(dy) returns the gradient with respect to the layer input and
 * accumulates parameter gradients into Param::grad. One forward must precede
 * each backward, so a layer instance serves one sample at a time (or one
 * batch for Dense).
 */

#pragma once

#include "covtwin/error.hpp"
#include "covtwin/nn/tensor.hpp"
#include "covtwin/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace covtwin::nn {

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param() = default;
    Param(std::string n, Shape s) : name(std::move(n)), value(s), grad(s) {}

    void zero_grad() { grad.fill(0.0); }
};

/// Ordered, named view over a model's trainable tensors.
using ParamList = std::vector<Param*>;

inline void zero_grads(const ParamList& ps) {
    for (auto* p : ps) p->zero_grad();
}

/// He-uniform initialisation, bound sqrt(6 / fan_in).
inline void init_he_uniform(Param& p, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : p.value.data) v = uniform(rng, -bound, bound);
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

enum class Padding { Same, Valid };

/// 2-D cross-correlation (no kernel flip) over a C x H x W input, lowered to
/// a matrix product through im2col.
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t k,
           Padding pad = Padding::Same)
        : weight(name + ".weight", {out_ch, in_ch, k, k}),
          bias(name + ".bias", {out_ch}),
          in_ch_(in_ch), out_ch_(out_ch), k_(k), pad_(pad) {
        require_shape(k % 2 == 1, "conv2d: kernel size must be odd, got " + std::to_string(k));
    }

    void init(Rng& rng) {
        init_he_uniform(weight, in_ch_ * k_ * k_, rng);
        bias.value.fill(0.0);
    }

    ParamList params() { return {&weight, &bias}; }

    Tensor forward(const Tensor& x) {
        require_shape(x.rank() == 3 && x.dim(0) == in_ch_,
                      "conv2d: expected " + std::to_string(in_ch_) + " input channels, got shape " +
                          shape_str(x.shape));
        h_ = x.dim(1);
        w_ = x.dim(2);
        const std::size_t p = pad_ == Padding::Same ? k_ / 2 : 0;
        require_shape(h_ + 2 * p >= k_ && w_ + 2 * p >= k_, "conv2d: input smaller than kernel");
        ho_ = h_ + 2 * p - k_ + 1;
        wo_ = w_ + 2 * p - k_ + 1;
        hp_ = h_ + 2 * p;
        wp_ = w_ + 2 * p;
        xp_.assign(in_ch_ * hp_ * wp_, 0.0);
        for (std::size_t c = 0; c < in_ch_; ++c)
            for (std::size_t i = 0; i < h_; ++i)
                std::copy_n(&x.data[(c * h_ + i) * w_], w_, &xp_[(c * hp_ + i + p) * wp_ + p]);

        const std::size_t rows = in_ch_ * k_ * k_, plane = ho_ * wo_;
        Tensor y({out_ch_, ho_, wo_});
        const auto W = as_matrix(weight.value, out_ch_, rows);
        // Output rows are processed in bands so the unfolded patch block stays in cache.
        for (std::size_t y0 = 0; y0 < ho_; y0 += band_rows()) {
            const std::size_t nb = std::min(band_rows(), ho_ - y0), cols = nb * wo_;
            unfold_band(y0, nb);
            StridedMap Y(&y.data[y0 * wo_], static_cast<Eigen::Index>(out_ch_), static_cast<Eigen::Index>(cols),
                         Eigen::OuterStride<>(static_cast<Eigen::Index>(plane)));
            Y.noalias() = W * ConstMatrixMap(col_.data(), static_cast<Eigen::Index>(rows),
                                             static_cast<Eigen::Index>(cols));
        }
        for (std::size_t o = 0; o < out_ch_; ++o) {
            double* yo = &y.data[o * plane];
            const double b = bias.value[o];
            for (std::size_t i = 0; i < plane; ++i) yo[i] += b;
        }
        return y;
    }

    Tensor backward(const Tensor& dy) {
        require_shape(dy.shape == Shape({out_ch_, ho_, wo_}), "conv2d backward: gradient shape");
        const std::size_t rows = in_ch_ * k_ * k_, plane = ho_ * wo_;
        const auto W = as_matrix(weight.value, out_ch_, rows);
        auto dW = as_matrix(weight.grad, out_ch_, rows);
        dxp_.assign(in_ch_ * hp_ * wp_, 0.0);
        for (std::size_t y0 = 0; y0 < ho_; y0 += band_rows()) {
            const std::size_t nb = std::min(band_rows(), ho_ - y0), cols = nb * wo_;
            unfold_band(y0, nb);
            ConstStridedMap DY(&dy.data[y0 * wo_], static_cast<Eigen::Index>(out_ch_),
                               static_cast<Eigen::Index>(cols),
                               Eigen::OuterStride<>(static_cast<Eigen::Index>(plane)));
            dW.noalias() += DY * ConstMatrixMap(col_.data(), static_cast<Eigen::Index>(rows),
                                                static_cast<Eigen::Index>(cols))
                                     .transpose();
            dcol_.resize(rows * cols);
            MatrixMap(dcol_.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)).noalias() =
                W.transpose() * DY;
            for (std::size_t c = 0; c < in_ch_; ++c)
                for (std::size_t ki = 0; ki < k_; ++ki)
                    for (std::size_t kj = 0; kj < k_; ++kj) {
                        const double* src = &dcol_[((c * k_ + ki) * k_ + kj) * cols];
                        for (std::size_t r = 0; r < nb; ++r) {
                            double* dst = &dxp_[(c * hp_ + y0 + r + ki) * wp_ + kj];
                            const double* s = src + r * wo_;
                            for (std::size_t i = 0; i < wo_; ++i) dst[i] += s[i];
                        }
                    }
        }
        for (std::size_t o = 0; o < out_ch_; ++o) {
            const double* g = &dy.data[o * plane];
            double s = 0.0;
            for (std::size_t i = 0; i < plane; ++i) s += g[i];
            bias.grad[o] += s;
        }
        Tensor dx({in_ch_, h_, w_});
        for (std::size_t c = 0; c < in_ch_; ++c)
            for (std::size_t i = 0; i < h_; ++i)
                std::copy_n(&dxp_[(c * hp_ + i + pad_px()) * wp_ + pad_px()], w_, &dx.data[(c * h_ + i) * w_]);
        return dx;
    }

    Param weight;
    Param bias;

private:
    std::size_t in_ch_ = 0, out_ch_ = 0, k_ = 1;
    Padding pad_ = Padding::Same;
    std::size_t h_ = 0, w_ = 0, ho_ = 0, wo_ = 0, hp_ = 0, wp_ = 0;
    std::vector<double> xp_, dxp_, col_, dcol_;

    using StridedMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
    using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

    std::size_t pad_px() const { return (hp_ - h_) / 2; }

    std::size_t band_rows() const {
        constexpr std::size_t budget = 32768;  // doubles per unfolded band
        return std::clamp<std::size_t>(budget / (in_ch_ * k_ * k_ * wo_), 1, ho_);
    }

    void unfold_band(std::size_t y0, std::size_t nb) {
        const std::size_t cols = nb * wo_;
        col_.resize(in_ch_ * k_ * k_ * cols);
        for (std::size_t c = 0; c < in_ch_; ++c)
            for (std::size_t ki = 0; ki < k_; ++ki)
                for (std::size_t kj = 0; kj < k_; ++kj) {
                    double* dst = &col_[((c * k_ + ki) * k_ + kj) * cols];
                    for (std::size_t r = 0; r < nb; ++r)
                        std::copy_n(&xp_[(c * hp_ + y0 + r + ki) * wp_ + kj], wo_, dst + r * wo_);
                }
    }
};

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

/// 2x2 non-overlapping max pooling; ties route the gradient to the first
/// element in row-major order.
class MaxPool2 {
public:
    Tensor forward(const Tensor& x) {
        require_shape(x.rank() == 3, "maxpool2: expected C x H x W input");
        const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
        require_shape(h % 2 == 0 && w % 2 == 0, "maxpool2: spatial dims must be even, got " + shape_str(x.shape));
        in_shape_ = x.shape;
        Tensor y({c, h / 2, w / 2});
        argmax_.assign(y.size(), 0);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < h / 2; ++i)
                for (std::size_t j = 0; j < w / 2; ++j) {
                    std::size_t best = (ch * h + 2 * i) * w + 2 * j;
                    for (std::size_t di = 0; di < 2; ++di)
                        for (std::size_t dj = 0; dj < 2; ++dj) {
                            const std::size_t idx = (ch * h + 2 * i + di) * w + 2 * j + dj;
                            if (x.data[idx] > x.data[best]) best = idx;
                        }
                    const std::size_t o = (ch * (h / 2) + i) * (w / 2) + j;
                    y.data[o] = x.data[best];
                    argmax_[o] = best;
                }
        return y;
    }

    Tensor backward(const Tensor& dy) {
        Tensor dx(in_shape_);
        for (std::size_t o = 0; o < dy.size(); ++o) dx.data[argmax_[o]] += dy.data[o];
        return dx;
    }

private:
    Shape in_shape_;
    std::vector<std::size_t> argmax_;
};

/// Nearest-neighbour 2x upsampling.
class Upsample2 {
public:
    Tensor forward(const Tensor& x) {
        require_shape(x.rank() == 3, "upsample2: expected C x H x W input");
        in_shape_ = x.shape;
        const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
        Tensor y({c, 2 * h, 2 * w});
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < 2 * h; ++i)
                for (std::size_t j = 0; j < 2 * w; ++j) y.at(ch, i, j) = x.at(ch, i / 2, j / 2);
        return y;
    }

    Tensor backward(const Tensor& dy) {
        Tensor dx(in_shape_);
        const std::size_t c = in_shape_[0], h = in_shape_[1], w = in_shape_[2];
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < 2 * h; ++i)
                for (std::size_t j = 0; j < 2 * w; ++j) dx.at(ch, i / 2, j / 2) += dy.at(ch, i, j);
        return dx;
    }

private:
    Shape in_shape_;
};

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// y = W x + b on a batch: input N x in (or a plain in-vector), W is out x in.
class Dense {
public:
    Dense() = default;
    Dense(std::string name, std::size_t in, std::size_t out)
        : weight(name + ".weight", {out, in}), bias(name + ".bias", {out}), in_(in), out_(out) {}

    void init(Rng& rng) {
        init_he_uniform(weight, in_, rng);
        bias.value.fill(0.0);
    }

    ParamList params() { return {&weight, &bias}; }
    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }

    Tensor forward(const Tensor& x) {
        const bool vec = x.rank() == 1;
        const std::size_t n = vec ? 1 : x.dim(0);
        require_shape((vec && x.dim(0) == in_) || (x.rank() == 2 && x.dim(1) == in_),
                      "dense: expected " + std::to_string(in_) + " input features, got shape " +
                          shape_str(x.shape));
        x_ = x;
        n_ = n;
        Tensor y(vec ? Shape{out_} : Shape{n, out_});
        auto Y = as_matrix(y, n, out_);
        Y.noalias() = as_matrix(x, n, in_) * as_matrix(weight.value, out_, in_).transpose();
        Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value.data.data(),
                                                             static_cast<Eigen::Index>(out_));
        return y;
    }

    Tensor backward(const Tensor& dy) {
        require_shape(dy.size() == n_ * out_, "dense backward: gradient shape");
        const auto DY = as_matrix(dy, n_, out_);
        as_matrix(weight.grad, out_, in_).noalias() += DY.transpose() * as_matrix(x_, n_, in_);
        // Plain loop: Eigen's column reduction peels by pointer alignment, so
        // its rounding would depend on where the allocator put dy.
        for (std::size_t i = 0; i < n_; ++i)
            for (std::size_t j = 0; j < out_; ++j) bias.grad.data[j] += dy.data[i * out_ + j];
        Tensor dx(x_.shape);
        as_matrix(dx, n_, in_).noalias() = DY * as_matrix(weight.value, out_, in_);
        return dx;
    }

    Param weight;
    Param bias;

private:
    std::size_t in_ = 0, out_ = 0, n_ = 0;
    Tensor x_;
};

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

class ReLU {
public:
    Tensor forward(const Tensor& x) {
        Tensor y = x;
        mask_.assign(x.size(), 0);
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (x.data[i] > 0.0) mask_[i] = 1;
            else y.data[i] = 0.0;
        }
        return y;
    }
    Tensor backward(const Tensor& dy) {
        Tensor dx = dy;
        for (std::size_t i = 0; i < dx.size(); ++i)
            if (!mask_[i]) dx.data[i] = 0.0;
        return dx;
    }

private:
    std::vector<unsigned char> mask_;
};

class Tanh {
public:
    Tensor forward(const Tensor& x) {
        y_ = x;
        for (auto& v : y_.data) v = std::tanh(v);
        return y_;
    }
    Tensor backward(const Tensor& dy) {
        Tensor dx = dy;
        for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] *= 1.0 - y_.data[i] * y_.data[i];
        return dx;
    }

private:
    Tensor y_;
};

/// Hard clamp to [lo, hi]; zero gradient where the input was clipped.
class Clamp {
public:
    Clamp(double lo = -10.0, double hi = 10.0) : lo_(lo), hi_(hi) {}
    Tensor forward(const Tensor& x) {
        Tensor y = x;
        pass_.assign(x.size(), 1);
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (y.data[i] < lo_) { y.data[i] = lo_; pass_[i] = 0; }
            else if (y.data[i] > hi_) { y.data[i] = hi_; pass_[i] = 0; }
        }
        return y;
    }
    Tensor backward(const Tensor& dy) {
        Tensor dx = dy;
        for (std::size_t i = 0; i < dx.size(); ++i)
            if (!pass_[i]) dx.data[i] = 0.0;
        return dx;
    }

private:
    double lo_, hi_;
    std::vector<unsigned char> pass_;
};

enum class Mode { Train, Eval };

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by 1 / (1 - rate). Identity in eval mode.
class Dropout {
public:
    explicit Dropout(double rate = 0.25) : rate_(rate) {
        if (!(rate >= 0.0 && rate < 1.0))
            throw ValidationError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    }

    double rate() const { return rate_; }

    Tensor forward(const Tensor& x, Mode mode, Rng& rng) {
        scale_.assign(x.size(), 1.0);
        if (mode == Mode::Eval || rate_ == 0.0) return x;
        Tensor y = x;
        const double keep_scale = 1.0 / (1.0 - rate_);
        for (std::size_t i = 0; i < y.size(); ++i) {
            scale_[i] = uniform01(rng) < rate_ ? 0.0 : keep_scale;
            y.data[i] *= scale_[i];
        }
        return y;
    }

    Tensor backward(const Tensor& dy) const {
        Tensor dx = dy;
        for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] *= scale_[i];
        return dx;
    }

private:
    double rate_;
    std::vector<double> scale_;
};

/// Stacks C_i x H x W tensors along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
    require_shape(!parts.empty(), "concat: no inputs");
    const std::size_t h = parts[0].dim(1), w = parts[0].dim(2);
    std::size_t c = 0;
    for (const auto& p : parts) {
        require_shape(p.rank() == 3 && p.dim(1) == h && p.dim(2) == w, "concat: spatial mismatch");
        c += p.dim(0);
    }
    Tensor out({c, h, w});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data.begin(), p.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += p.size();
    }
    return out;
}

inline std::vector<Tensor> split_channels(const Tensor& x, const std::vector<std::size_t>& channels) {
    std::vector<Tensor> out;
    const std::size_t plane = x.dim(1) * x.dim(2);
    std::size_t off = 0;
    for (auto c : channels) {
        Tensor t({c, x.dim(1), x.dim(2)});
        std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(off * plane), c * plane, t.data.begin());
        out.push_back(std::move(t));
        off += c;
    }
    return out;
}

}  // namespace covtwin::nn
