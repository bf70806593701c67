// Copyright 2026-present the irgen project
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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

namespace irgen {

enum class Precision { f32, f64 };

/// Central-difference step used for each precision mode.
inline double finite_difference_step(Precision p) { return p == Precision::f64 ? 1e-5 : 1e-3; }

/// Gradient entries with magnitude below this are compared on absolute error.
inline constexpr double kGradientFloor = 1e-4;

inline double gradient_relative_error(double analytic, double numeric) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), kGradientFloor});
    return std::abs(analytic - numeric) / scale;
}

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t parameters_checked = 0;
    std::size_t worst_index = 0;
    std::string worst_name;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;

    void record(double analytic, double numeric, std::size_t index, const std::string& name) {
        ++parameters_checked;
        const double err = gradient_relative_error(analytic, numeric);
        if (parameters_checked == 1 || err > max_relative_error) {
            max_relative_error = err;
            worst_index = index;
            worst_name = name;
            worst_analytic = analytic;
            worst_numeric = numeric;
        }
    }
};

}  // namespace irgen
