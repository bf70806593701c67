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

// Baseline identifier assignments for the ablations. Both emit fixed-length
// in-range identifiers, so the trie and the scorer consume them unchanged.

#include <random>
#include <set>

#include "irgen/core.hpp"
#include "irgen/kmeans.hpp"

namespace irgen {

/// Uniform random identifiers over [0, L)^M.
inline std::vector<Identifier> random_identifiers(std::size_t n, std::size_t M, std::size_t L, std::uint64_t seed) {
    if (M < 1 || L < 1) throw std::invalid_argument("random_identifiers: M and L must be >= 1");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<Token> tok(0, static_cast<Token>(L - 1));
    std::vector<Identifier> ids(n);
    for (auto& id : ids) {
        id.tokens.resize(M);
        for (auto& t : id.tokens) t = tok(rng);
    }
    std::set<Identifier> distinct(ids.begin(), ids.end());
    if (distinct.size() < n)
        log(LogLevel::info, "random_identifiers: " + std::to_string(n - distinct.size()) + " collision(s) among " +
                                std::to_string(n) + " identifiers");
    return ids;
}

struct HkmConfig {
    std::size_t branching = 100;
    std::size_t depth = 4;
    std::size_t iters = 25;
    std::uint64_t seed = 0;
};

struct HkmStats {
    std::size_t padded_nodes = 0;  ///< nodes that stopped splitting with fewer than k rows
    bool degenerate = false;       ///< every input row identical
    std::vector<float> root_centroids;  ///< k x d level-1 centroids
};

namespace detail {

inline void hkm_split(const EmbeddingMatrix& emb, std::vector<std::size_t> rows, std::size_t level, const HkmConfig& cfg,
                      std::uint64_t seed, std::vector<Identifier>& ids, HkmStats& stats) {
    if (level == cfg.depth) return;
    if (rows.size() < cfg.branching) {
        ++stats.padded_nodes;
        return;  // tokens are pre-filled with 0
    }
    const std::size_t d = emb.dim();
    std::vector<float> pts;
    pts.reserve(rows.size() * d);
    for (auto r : rows) {
        auto x = emb.row(r);
        pts.insert(pts.end(), x.begin(), x.end());
    }
    auto km = kmeans(PointSet<float>{pts, rows.size(), d}, cfg.branching, cfg.iters, seed);
    if (level == 0) stats.root_centroids = km.centroids;
    std::vector<std::vector<std::size_t>> parts(cfg.branching);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        ids[rows[i]].tokens[level] = km.assignment[i];
        parts[km.assignment[i]].push_back(rows[i]);
    }
    for (std::size_t c = 0; c < cfg.branching; ++c) {
        if (parts[c].empty()) continue;
        // Child seeds derive from the parent seed and branch so sibling runs differ.
        const std::uint64_t child_seed = seed * 1000003ULL + c + 1;
        hkm_split(emb, std::move(parts[c]), level + 1, cfg, child_seed, ids, stats);
    }
}

}  // namespace detail

/// Hierarchical k-means identifiers: token t is the cluster index on the path at
/// depth t. Nodes holding fewer than k rows stop splitting and pad with token 0.
inline std::vector<Identifier> hkm_identifiers(const EmbeddingMatrix& emb, const HkmConfig& cfg,
                                               HkmStats* stats_out = nullptr) {
    if (cfg.branching < 2) throw std::invalid_argument("hkm_identifiers: branching must be >= 2");
    if (cfg.depth < 1) throw std::invalid_argument("hkm_identifiers: depth must be >= 1");
    if (emb.rows() < cfg.branching)
        throw std::invalid_argument("hkm_identifiers: need at least k=" + std::to_string(cfg.branching) + " rows");
    HkmStats stats;
    stats.degenerate = true;
    for (std::size_t i = 1; i < emb.rows() && stats.degenerate; ++i)
        stats.degenerate = std::equal(emb.row(i).begin(), emb.row(i).end(), emb.row(0).begin());
    if (stats.degenerate) log(LogLevel::warn, "hkm_identifiers: all rows identical; every identifier will match");

    std::vector<Identifier> ids(emb.rows(), Identifier(std::vector<Token>(cfg.depth, 0)));
    std::vector<std::size_t> rows(emb.rows());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    detail::hkm_split(emb, std::move(rows), 0, cfg, cfg.seed, ids, stats);
    if (stats.padded_nodes > 0)
        log(LogLevel::info, "hkm_identifiers: " + std::to_string(stats.padded_nodes) +
                                " node(s) had fewer than k rows and were padded with token 0");
    if (stats_out) *stats_out = stats;
    return ids;
}

}  // namespace irgen
