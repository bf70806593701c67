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

// Retrieval metrics. Relevance is exact label equality between the query and
// a gallery row. Every function is pure; aggregates are summed in query order
// so parallel evaluation gives identical totals.

#include <map>

#include "irgen/core.hpp"
#include "irgen/search.hpp"

namespace irgen {

namespace detail {

inline std::size_t relevant_in_top(std::span<const std::size_t> ranked, Label query, std::span<const Label> gallery,
                                   std::size_t K) {
    const std::size_t n = std::min(K, ranked.size());
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) hits += gallery[ranked[i]] == query;
    return hits;
}

}  // namespace detail

/// Fraction of the top-K rows sharing the query label. Shorter lists are scored
/// over the rows available; an empty list scores 0.
inline double precision_at_k(std::span<const std::size_t> ranked, Label query, std::span<const Label> gallery,
                             std::size_t K) {
    const std::size_t n = std::min(K, ranked.size());
    if (n == 0) return 0.0;
    return static_cast<double>(detail::relevant_in_top(ranked, query, gallery, K)) / static_cast<double>(n);
}

/// 1 when any of the top-K rows shares the query label.
inline double recall_at_k(std::span<const std::size_t> ranked, Label query, std::span<const Label> gallery,
                          std::size_t K) {
    return detail::relevant_in_top(ranked, query, gallery, K) > 0 ? 1.0 : 0.0;
}

/// Reciprocal rank of the first relevant row within the top K, else 0.
inline double mrr_at_k(std::span<const std::size_t> ranked, Label query, std::span<const Label> gallery,
                       std::size_t K) {
    const std::size_t n = std::min(K, ranked.size());
    for (std::size_t i = 0; i < n; ++i)
        if (gallery[ranked[i]] == query) return 1.0 / static_cast<double>(i + 1);
    return 0.0;
}

inline constexpr std::size_t kMapDepth = 100;

/// Average precision truncated at rank 100, normalised by min(100, relevant).
inline double average_precision_at_100(std::span<const std::size_t> ranked, Label query,
                                       std::span<const Label> gallery, std::size_t relevant) {
    if (relevant == 0) return 0.0;
    const std::size_t n = std::min(kMapDepth, ranked.size());
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (gallery[ranked[i]] != query) continue;
        ++hits;
        sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
    return sum / static_cast<double>(std::min(kMapDepth, relevant));
}

struct MapReport {
    double value = 0.0;
    std::size_t queries = 0;            ///< queries with at least one relevant gallery row
    std::size_t excluded_queries = 0;   ///< queries without relevant rows
};

inline std::map<Label, std::size_t> label_counts(std::span<const Label> gallery) {
    std::map<Label, std::size_t> counts;
    for (auto l : gallery) ++counts[l];
    return counts;
}

inline MapReport map_at_100(std::span<const std::vector<std::size_t>> ranked, std::span<const Label> query_labels,
                            std::span<const Label> gallery) {
    const auto counts = label_counts(gallery);
    MapReport r;
    double sum = 0.0;
    for (std::size_t q = 0; q < ranked.size(); ++q) {
        auto it = counts.find(query_labels[q]);
        if (it == counts.end()) {
            ++r.excluded_queries;
            continue;
        }
        sum += average_precision_at_100(ranked[q], query_labels[q], gallery, it->second);
        ++r.queries;
    }
    r.value = r.queries ? sum / static_cast<double>(r.queries) : 0.0;
    return r;
}

struct PrPoint {
    std::size_t cutoff = 0;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    double recall = 0.0;     ///< true positive rate, tp / (tp + fn)
    double precision = 0.0;  ///< tp / (tp + fp)
};

/// Sweeps the rank cutoff from 1 to the longest result, summing TP/FP/FN over
/// the queries that have relevant gallery rows.
inline std::vector<PrPoint> pr_curve(std::span<const std::vector<std::size_t>> ranked,
                                     std::span<const Label> query_labels, std::span<const Label> gallery) {
    const auto counts = label_counts(gallery);
    std::size_t max_len = 0;
    for (const auto& r : ranked) max_len = std::max(max_len, r.size());
    std::vector<PrPoint> out;
    for (std::size_t c = 1; c <= max_len; ++c) {
        PrPoint p;
        p.cutoff = c;
        for (std::size_t q = 0; q < ranked.size(); ++q) {
            auto it = counts.find(query_labels[q]);
            if (it == counts.end()) continue;
            const std::size_t n = std::min(c, ranked[q].size());
            const std::size_t tp = detail::relevant_in_top(ranked[q], query_labels[q], gallery, c);
            p.tp += tp;
            p.fp += n - tp;
            p.fn += it->second - tp;
        }
        p.recall = p.tp + p.fn ? static_cast<double>(p.tp) / static_cast<double>(p.tp + p.fn) : 0.0;
        p.precision = p.tp + p.fp ? static_cast<double>(p.tp) / static_cast<double>(p.tp + p.fp) : 0.0;
        out.push_back(p);
    }
    return out;
}

/// Dataset-level means over all queries for each K.
struct MetricReport {
    std::vector<std::size_t> ks;
    std::vector<double> precision;
    std::vector<double> recall;
    std::vector<std::size_t> mrr_ks;
    std::vector<double> mrr;
    MapReport map100;
    std::size_t queries = 0;
    std::size_t short_results = 0;  ///< results with fewer rows than the largest K
};

inline MetricReport evaluate(std::span<const std::vector<std::size_t>> ranked, std::span<const Label> query_labels,
                             std::span<const Label> gallery, std::span<const std::size_t> ks,
                             std::span<const std::size_t> mrr_ks) {
    if (ranked.size() != query_labels.size()) throw std::invalid_argument("evaluate: results and labels differ in length");
    MetricReport r;
    r.ks.assign(ks.begin(), ks.end());
    r.mrr_ks.assign(mrr_ks.begin(), mrr_ks.end());
    r.precision.assign(ks.size(), 0.0);
    r.recall.assign(ks.size(), 0.0);
    r.mrr.assign(mrr_ks.size(), 0.0);
    r.queries = ranked.size();
    const std::size_t kmax = ks.empty() ? 0 : *std::max_element(ks.begin(), ks.end());
    for (std::size_t q = 0; q < ranked.size(); ++q) {
        if (ranked[q].size() < kmax) ++r.short_results;
        for (std::size_t i = 0; i < ks.size(); ++i) {
            r.precision[i] += precision_at_k(ranked[q], query_labels[q], gallery, ks[i]);
            r.recall[i] += recall_at_k(ranked[q], query_labels[q], gallery, ks[i]);
        }
        for (std::size_t i = 0; i < mrr_ks.size(); ++i) r.mrr[i] += mrr_at_k(ranked[q], query_labels[q], gallery, mrr_ks[i]);
    }
    if (r.queries) {
        const double inv = 1.0 / static_cast<double>(r.queries);
        for (auto& v : r.precision) v *= inv;
        for (auto& v : r.recall) v *= inv;
        for (auto& v : r.mrr) v *= inv;
    }
    r.map100 = map_at_100(ranked, query_labels, gallery);
    return r;
}

inline std::vector<std::vector<std::size_t>> ranked_rows(std::span<const RetrievalResult> results) {
    std::vector<std::vector<std::size_t>> out;
    out.reserve(results.size());
    for (const auto& r : results) out.push_back(r.rows());
    return out;
}

}  // namespace irgen
