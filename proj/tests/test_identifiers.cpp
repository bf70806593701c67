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


#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace irgen;

TEST_CASE("random_identifiers: single id in range", "[identifiers]") {
    auto ids = random_identifiers(1, 4, 7, 3);
    REQUIRE(ids.size() == 1);
    REQUIRE(ids[0].size() == 4);
    for (auto t : ids[0].tokens) CHECK(t < 7);
}

TEST_CASE("random_identifiers is deterministic under a seed", "[identifiers]") {
    CHECK(random_identifiers(500, 4, 16, 9) == random_identifiers(500, 4, 16, 9));
    CHECK(random_identifiers(500, 4, 16, 9) != random_identifiers(500, 4, 16, 10));
}

TEST_CASE("random_identifiers per-position frequencies are uniform", "[identifiers]") {
    const std::size_t n = 10000, M = 4, L = 256;
    auto ids = random_identifiers(n, M, L, 1);
    // Each count is Binomial(n, 1/L); allow 4 standard deviations, and check the
    // per-position chi-square against its 255-dof mean plus 6 standard deviations.
    const double p = 1.0 / L, mean = n * p, sd = std::sqrt(n * p * (1 - p));
    for (std::size_t m = 0; m < M; ++m) {
        std::vector<double> counts(L, 0.0);
        for (const auto& id : ids) ++counts[id[m]];
        double chi2 = 0;
        for (double c : counts) {
            CHECK(std::abs(c - mean) <= 4 * sd);
            chi2 += (c - mean) * (c - mean) / mean;
        }
        CHECK(chi2 <= 255 + 6 * std::sqrt(2.0 * 255));
    }
}

TEST_CASE("hkm separates two distant blobs", "[identifiers][hkm]") {
    std::vector<float> data;
    auto noise = test::gaussian(40 * 2, 4, 0.1);
    for (std::size_t i = 0; i < 40; ++i) {
        data.push_back(noise[2 * i] + (i < 20 ? -5.0f : 5.0f));
        data.push_back(noise[2 * i + 1]);
    }
    auto ids = hkm_identifiers(EmbeddingMatrix(40, 2, data), {2, 1, 10, 1});
    for (std::size_t i = 1; i < 20; ++i) CHECK(ids[i] == ids[0]);
    for (std::size_t i = 21; i < 40; ++i) CHECK(ids[i] == ids[20]);
    CHECK(ids[0] != ids[20]);
}

TEST_CASE("hkm level-1 tokens are the nearest root centroid", "[identifiers][hkm]") {
    auto emb = test::random_matrix(400, 6, 5);
    HkmStats stats;
    auto ids = hkm_identifiers(emb, {8, 3, 15, 2}, &stats);
    REQUIRE(stats.root_centroids.size() == 8 * 6);
    for (std::size_t i = 0; i < emb.rows(); ++i) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < 8; ++c) {
            double s = 0;
            for (std::size_t j = 0; j < 6; ++j) {
                const double diff = double(emb.row(i)[j]) - double(stats.root_centroids[c * 6 + j]);
                s += diff * diff;
            }
            if (s < best_d) best_d = s, best = c;
        }
        CHECK(ids[i][0] == best);
    }
}

TEST_CASE("hkm tokens stay below the branching factor and pad short nodes", "[identifiers][hkm]") {
    auto emb = test::random_matrix(300, 4, 6);
    HkmStats stats;
    auto ids = hkm_identifiers(emb, {10, 4, 10, 3}, &stats);
    for (const auto& id : ids) {
        REQUIRE(id.size() == 4);
        for (auto t : id.tokens) CHECK(t < 10);
    }
    CHECK(stats.padded_nodes > 0);
    // Downstream consumers accept the ids unchanged.
    auto trie = build_trie(ids, TokenVocabulary{4, 10});
    CHECK(trie.row_count() == 300);
}

TEST_CASE("hkm on identical rows yields identical ids", "[identifiers][hkm]") {
    EmbeddingMatrix emb(12, 2, std::vector<float>(24, 1.5f));
    HkmStats stats;
    auto ids = hkm_identifiers(emb, {3, 2, 5, 0}, &stats);
    CHECK(stats.degenerate);
    for (const auto& id : ids) CHECK(id == ids[0]);
}

TEST_CASE("hkm supports the 100-way, depth-4 configuration shape", "[identifiers][hkm]") {
    auto emb = test::random_matrix(1000, 4, 7);
    auto ids = hkm_identifiers(emb, {100, 4, 3, 4});
    for (const auto& id : ids) {
        REQUIRE(id.size() == 4);
        for (auto t : id.tokens) CHECK(t < 100);
    }
}

TEST_CASE("hkm argument validation", "[identifiers][hkm]") {
    auto emb = test::random_matrix(5, 2, 8);
    CHECK_THROWS_AS(hkm_identifiers(emb, {1, 2, 5, 0}), std::invalid_argument);
    CHECK_THROWS_AS(hkm_identifiers(emb, {6, 2, 5, 0}), std::invalid_argument);
}
