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

// k-means kernel shared by the tokenizer codebooks, hierarchical k-means
// identifiers and the IVF-PQ baseline, so all three cluster the same way:
// k-means++ seeding, Lloyd refinement, lowest-index tie-breaking, and empty
// clusters re-seeded from the point farthest from its centroid.

#include <limits>
#include <random>

#include "irgen/core.hpp"

namespace irgen {

/// Row-major view over n points of dimension d.
template <class T>
struct PointSet {
    std::span<const T> data;
    std::size_t n = 0;
    std::size_t d = 0;

    [[nodiscard]] std::span<const T> point(std::size_t i) const { return data.subspan(i * d, d); }
};

struct Nearest {
    std::uint32_t index = 0;
    double sq_dist = 0.0;
};

/// Exhaustive nearest centroid; ties resolve to the lowest index.
template <class T>
Nearest nearest_centroid(std::span<const T> x, std::span<const T> centroids, std::size_t k) {
    const std::size_t d = x.size();
    Nearest best{0, std::numeric_limits<double>::infinity()};
    for (std::size_t j = 0; j < k; ++j) {
        const double dist = squared_distance<T>(x, centroids.subspan(j * d, d));
        if (dist < best.sq_dist) best = {static_cast<std::uint32_t>(j), dist};
    }
    return best;
}

struct KMeansStats {
    std::size_t reseeded_empty = 0;   ///< empty clusters re-seeded from the farthest point
    std::size_t reseeded_random = 0;  ///< re-seeds drawn at random because every point sat on a centroid
    double inertia = 0.0;
};

/// k-means++ seeding. When fewer than k distinct points exist the remaining
/// centroids are drawn uniformly at random from the points.
template <class T>
std::vector<T> kmeans_plus_plus(const PointSet<T>& pts, std::size_t k, std::mt19937_64& rng, KMeansStats* stats = nullptr) {
    if (pts.n == 0) throw std::invalid_argument("kmeans: no points");
    std::vector<T> centroids(k * pts.d);
    std::uniform_int_distribution<std::size_t> pick(0, pts.n - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    auto place = [&](std::size_t j, std::size_t i) {
        auto p = pts.point(i);
        std::copy(p.begin(), p.end(), centroids.begin() + static_cast<std::ptrdiff_t>(j * pts.d));
    };

    place(0, pick(rng));
    std::vector<double> d2(pts.n);
    for (std::size_t i = 0; i < pts.n; ++i)
        d2[i] = squared_distance<T>(pts.point(i), std::span<const T>(centroids).subspan(0, pts.d));

    for (std::size_t j = 1; j < k; ++j) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        std::size_t chosen = 0;
        if (total <= 0.0) {
            chosen = pick(rng);
            if (stats) ++stats->reseeded_random;
        } else {
            double target = unit(rng) * total;
            chosen = pts.n - 1;
            for (std::size_t i = 0; i < pts.n; ++i) {
                target -= d2[i];
                if (target < 0.0 && d2[i] > 0.0) {
                    chosen = i;
                    break;
                }
            }
            while (d2[chosen] <= 0.0 && chosen > 0) --chosen;
        }
        place(j, chosen);
        auto c = std::span<const T>(centroids).subspan(j * pts.d, pts.d);
        for (std::size_t i = 0; i < pts.n; ++i) d2[i] = std::min(d2[i], squared_distance<T>(pts.point(i), c));
    }
    return centroids;
}

/// Runs `iters` Lloyd iterations in place and returns the final assignment.
template <class T>
std::vector<std::uint32_t> lloyd(const PointSet<T>& pts, std::vector<T>& centroids, std::size_t k, std::size_t iters,
                                 std::mt19937_64& rng, KMeansStats* stats = nullptr) {
    const std::size_t d = pts.d;
    std::vector<std::uint32_t> assign(pts.n);
    std::vector<double> dist(pts.n);
    std::vector<double> sums(k * d);
    std::vector<std::size_t> counts(k);
    std::uniform_int_distribution<std::size_t> pick(0, pts.n - 1);

    auto assign_all = [&] {
        double inertia = 0.0;
        for (std::size_t i = 0; i < pts.n; ++i) {
            auto nn = nearest_centroid<T>(pts.point(i), centroids, k);
            assign[i] = nn.index;
            dist[i] = nn.sq_dist;
            inertia += nn.sq_dist;
        }
        return inertia;
    };

    assign_all();
    for (std::size_t it = 0; it < iters; ++it) {
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < pts.n; ++i) {
            auto p = pts.point(i);
            double* s = sums.data() + assign[i] * d;
            for (std::size_t c = 0; c < d; ++c) s[c] += static_cast<double>(p[c]);
            ++counts[assign[i]];
        }
        for (std::size_t j = 0; j < k; ++j) {
            T* c = centroids.data() + j * d;
            if (counts[j] > 0) {
                for (std::size_t q = 0; q < d; ++q)
                    c[q] = static_cast<T>(sums[j * d + q] / static_cast<double>(counts[j]));
                continue;
            }
            // Empty cluster: take the point farthest from its centroid.
            auto far = std::max_element(dist.begin(), dist.end());
            std::size_t src = static_cast<std::size_t>(far - dist.begin());
            if (*far <= 0.0) {
                src = pick(rng);
                if (stats) ++stats->reseeded_random;
            } else if (stats) {
                ++stats->reseeded_empty;
            }
            auto p = pts.point(src);
            std::copy(p.begin(), p.end(), c);
            dist[src] = 0.0;
        }
        assign_all();
    }
    if (stats) {
        stats->inertia = 0.0;
        for (std::size_t i = 0; i < pts.n; ++i)
            stats->inertia += squared_distance<T>(pts.point(i), std::span<const T>(centroids).subspan(assign[i] * d, d));
    }
    return assign;
}

template <class T>
struct KMeansResult {
    std::vector<T> centroids;  ///< k x d
    std::vector<std::uint32_t> assignment;
    KMeansStats stats;
};

template <class T>
KMeansResult<T> kmeans(const PointSet<T>& pts, std::size_t k, std::size_t iters, std::uint64_t seed) {
    if (k == 0) throw std::invalid_argument("kmeans: k must be >= 1");
    std::mt19937_64 rng(seed);
    KMeansResult<T> r;
    r.centroids = kmeans_plus_plus(pts, k, rng, &r.stats);
    r.assignment = lloyd(pts, r.centroids, k, iters, rng, &r.stats);
    if (r.stats.reseeded_random > 0)
        log(LogLevel::debug, "kmeans: fewer distinct points than k=" + std::to_string(k) + "; " +
                                 std::to_string(r.stats.reseeded_random) + " random re-seed(s) across all iterations");
    return r;
}

}  // namespace irgen
