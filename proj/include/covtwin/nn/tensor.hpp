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

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace covtwin::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + ")";
}

/// Dense row-major array of doubles.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {}
    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        require_shape(data.size() == shape_size(shape),
                      "tensor: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
    }

    std::size_t size() const { return data.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const { return shape.size(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // (c, h, w) accessor for rank-3 tensors.
    double& at(std::size_t c, std::size_t h, std::size_t w) {
        return data[(c * shape[1] + h) * shape[2] + w];
    }
    double at(std::size_t c, std::size_t h, std::size_t w) const {
        return data[(c * shape[1] + h) * shape[2] + w];
    }

    Tensor reshaped(Shape s) const {
        require_shape(shape_size(s) == size(), "reshape " + shape_str(shape) + " -> " + shape_str(s));
        return Tensor(std::move(s), data);
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline MatrixMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
    return MatrixMap(t.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline ConstMatrixMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
    return ConstMatrixMap(t.data.data(), static_cast<Eigen::Index>(rows),
                          static_cast<Eigen::Index>(cols));
}

inline void add_inplace(Tensor& dst, const Tensor& src) {
    require_shape(dst.shape == src.shape, "add: " + shape_str(dst.shape) + " vs " + shape_str(src.shape));
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace covtwin::nn
