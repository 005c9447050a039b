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

#include <stdexcept>
#include <string>

namespace covtwin {

// Malformed input file (JSON, CSV, checkpoint).
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Well-formed input that violates a domain invariant.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Generator parameters that cannot be satisfied.
struct InfeasibleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor or feature dimension mismatch.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A required upstream artifact is absent.
struct MissingArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ValidationError(what);
}

inline void require_shape(bool cond, const std::string& what) {
    if (!cond) throw ShapeError(what);
}

}  // namespace covtwin
