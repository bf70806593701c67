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

// Small generators shared by the unit tests.

#include <random>
#include <set>
#include <vector>

#include "irgen/irgen.hpp"

namespace irgen::test {

inline std::vector<float> gaussian(std::size_t count, std::uint64_t seed, double sd = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, sd);
    std::vector<float> out(count);
    for (auto& v : out) v = static_cast<float>(normal(rng));
    return out;
}

inline EmbeddingMatrix random_matrix(std::size_t n, std::size_t d, std::uint64_t seed, double sd = 1.0) {
    return {n, d, gaussian(n * d, seed, sd)};
}

inline std::vector<Identifier> random_ids(std::size_t n, std::size_t M, std::size_t L, std::mt19937_64& rng) {
    std::uniform_int_distribution<Token> tok(0, static_cast<Token>(L - 1));
    std::vector<Identifier> ids(n);
    for (auto& id : ids) {
        id.tokens.resize(M);
        for (auto& t : id.tokens) t = tok(rng);
    }
    return ids;
}

/// Random codebook stack with entries drawn from N(0, sd^2).
inline CodebookStack random_stack(std::size_t M, std::size_t L, std::size_t d, std::uint64_t seed, double sd = 1.0) {
    return {M, L, d, gaussian(M * L * d, seed, sd)};
}

/// Small labelled blob set: `classes` well-separated centres along the axes.
inline LabeledDataset axis_blobs(std::size_t classes, std::size_t per_class, std::size_t d, double spread,
                                 std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, spread);
    std::vector<float> data;
    std::vector<Label> labels;
    std::vector<Split> splits;
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t i = 0; i < per_class; ++i) {
            for (std::size_t j = 0; j < d; ++j)
                data.push_back(static_cast<float>((j == c % d ? 3.0 : 0.0) + normal(rng)));
            labels.push_back(static_cast<Label>(c));
            splits.push_back(i % 10 < 6 ? Split::train : i % 10 < 8 ? Split::gallery : Split::query);
        }
    return {EmbeddingMatrix(classes * per_class, d, std::move(data)), std::move(labels), std::move(splits), classes};
}

/// Gallery of +x / -x pairs on the 1/8 grid (|x_j| <= 2). The pairs cancel, so a
/// single coarse cell has mean exactly zero, and every distance computed from
/// these values (and from queries on the same grid) is exact in 64-bit.
inline EmbeddingMatrix dyadic_pair_gallery(std::size_t pairs, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> step(-16, 16);
    std::vector<float> data(2 * pairs * d);
    for (std::size_t p = 0; p < pairs; ++p)
        for (std::size_t j = 0; j < d; ++j) {
            const float v = static_cast<float>(step(rng)) / 8.0f;
            data[(2 * p) * d + j] = v;
            data[(2 * p + 1) * d + j] = -v;
        }
    return {2 * pairs, d, std::move(data)};
}

/// Query vectors on the same 1/8 grid.
inline EmbeddingMatrix dyadic_queries(std::size_t n, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> step(-16, 16);
    std::vector<float> data(n * d);
    for (auto& v : data) v = static_cast<float>(step(rng)) / 8.0f;
    return {n, d, std::move(data)};
}

}  // namespace irgen::test
