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

// Retrieval engines over frozen artifacts: trie-constrained beam search over
// the scorer, exact linear scan, and an IVF-PQ index. All are read-only and
// safe to call concurrently.

#include "irgen/core.hpp"
#include "irgen/kmeans.hpp"
#include "irgen/seqmodel.hpp"

namespace irgen {

struct RetrievalHit {
    std::size_t row = 0;
    double score = 0.0;  ///< sequence log-probability, or negative distance for the baselines
    Identifier id;       ///< generating identifier; empty for the baselines

    friend bool operator==(const RetrievalHit&, const RetrievalHit&) = default;
};

/// Ranked hits, descending score. Generative ties break by identifier then
/// ascending row; baseline ties break by ascending row.
struct RetrievalResult {
    std::vector<RetrievalHit> hits;
    bool truncated = false;  ///< fewer than K rows were reachable

    [[nodiscard]] std::size_t size() const noexcept { return hits.size(); }
    [[nodiscard]] std::vector<std::size_t> rows() const {
        std::vector<std::size_t> r;
        r.reserve(hits.size());
        for (const auto& h : hits) r.push_back(h.row);
        return r;
    }
};

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

/// Surviving hypotheses of one beam step, sorted by descending score then
/// lexicographic prefix. Every prefix is a trie path.
struct Beam {
    struct Entry {
        std::vector<Token> prefix;
        double score = 0.0;
    };
    std::vector<Entry> entries;
    std::size_t capacity = 0;
};

namespace detail {

inline bool beam_before(const Beam::Entry& a, const Beam::Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.prefix < b.prefix;
}

}  // namespace detail

/// Beam search over complete identifiers; returns the final beam (at most
/// `beam_width` identifiers, all stored in the trie).
template <class T>
Beam beam_search_ids(const ArScorer<T>& scorer, const Context<T>& ctx, const IdTrie& trie, std::size_t beam_width) {
    const auto& s = scorer.shape();
    if (beam_width < 1) throw std::invalid_argument("beam_search: beam_width must be >= 1");
    if (trie.empty()) throw std::invalid_argument("beam_search: empty trie");
    if (trie.vocabulary().M != s.M || trie.vocabulary().L != s.L)
        throw std::invalid_argument("beam_search: trie and scorer disagree on (M, L)");

    struct Live {
        Beam::Entry entry;
        IdTrie::NodeId node;
        DecodeState<T> state;
    };
    std::vector<Live> live;
    live.push_back({{{}, 0.0}, IdTrie::kRoot, decode_start(scorer, ctx)});

    for (std::size_t m = 0; m < s.M; ++m) {
        struct Cand {
            Beam::Entry entry;
            std::size_t parent;
            IdTrie::NodeId node;
        };
        std::vector<Cand> cands;
        for (std::size_t p = 0; p < live.size(); ++p) {
            const auto lsm = masked_log_softmax<T>(live[p].state.logits, m, s.L);
            for (const auto& e : trie.children(live[p].node)) {
                Cand c{live[p].entry, p, e.child};
                c.entry.prefix.push_back(e.token);
                c.entry.score += lsm[e.token];
                cands.push_back(std::move(c));
            }
        }
        const std::size_t keep = std::min(beam_width, cands.size());
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                          [](const Cand& a, const Cand& b) { return detail::beam_before(a.entry, b.entry); });
        cands.resize(keep);

        std::vector<Live> next;
        next.reserve(keep);
        for (auto& c : cands) {
            Live l{std::move(c.entry), c.node, {}};
            if (m + 1 < s.M) {
                l.state = live[c.parent].state;
                decode_advance(scorer, ctx, l.state, l.entry.prefix.back());
            }
            next.push_back(std::move(l));
        }
        live = std::move(next);
    }

    Beam beam;
    beam.capacity = beam_width;
    for (auto& l : live) beam.entries.push_back(std::move(l.entry));
    return beam;
}

/// Top-K rows by trie-constrained beam search. Leaves expand to their owner
/// rows in ascending order; every owner inherits its identifier's score.
template <class T>
RetrievalResult beam_search(const ArScorer<T>& scorer, const Context<T>& ctx, const IdTrie& trie,
                            std::size_t beam_width, std::size_t K) {
    if (K < 1) throw std::invalid_argument("beam_search: K must be >= 1");
    if (beam_width < K)
        throw std::invalid_argument("beam_search: beam_width " + std::to_string(beam_width) + " < K " +
                                    std::to_string(K));
    const Beam beam = beam_search_ids(scorer, ctx, trie, beam_width);
    RetrievalResult out;
    for (const auto& e : beam.entries) {
        const auto node = trie.find(e.prefix);
        for (auto row : trie.owners(*node)) {
            if (out.hits.size() == K) break;
            out.hits.push_back({row, e.score, Identifier(e.prefix)});
        }
        if (out.hits.size() == K) break;
    }
    out.truncated = out.hits.size() < K;
    return out;
}

/// Query-parallel beam search over `queries` (one conditioning vector each).
template <class T>
std::vector<RetrievalResult> beam_search_batch(const ArScorer<T>& scorer, const EmbeddingMatrix& queries,
                                               const IdTrie& trie, std::size_t beam_width, std::size_t K,
                                               std::size_t threads = search_threads()) {
    std::vector<RetrievalResult> out(queries.rows());
    parallel_for(queries.rows(), threads, [&](std::size_t q) {
        auto ctx = condition<T, float>(scorer, queries.row(q), 1);
        out[q] = beam_search(scorer, ctx, trie, beam_width, K);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Exact linear scan
// ---------------------------------------------------------------------------

enum class Metric { euclidean, cosine };

inline std::string_view to_string(Metric m) { return m == Metric::euclidean ? "euclidean" : "cosine"; }

inline std::optional<Metric> parse_metric(std::string_view s) {
    if (s == "euclidean") return Metric::euclidean;
    if (s == "cosine") return Metric::cosine;
    return std::nullopt;
}

/// Euclidean distance, or 1 - cosine similarity (1 when either vector has zero norm).
inline double metric_distance(std::span<const float> a, std::span<const float> b, Metric metric) {
    if (metric == Metric::euclidean) return std::sqrt(squared_distance<float>(a, b));
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return 1.0;
    return 1.0 - ab / (std::sqrt(aa) * std::sqrt(bb));
}

namespace detail {

/// Keeps the K best (row, distance) pairs: smaller distance first, then lower row.
inline RetrievalResult top_k_by_distance(std::vector<std::pair<double, std::size_t>> scored, std::size_t K) {
    const std::size_t keep = std::min(K, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end());
    RetrievalResult out;
    out.hits.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) out.hits.push_back({scored[i].second, -scored[i].first, {}});
    out.truncated = keep < K;
    return out;
}

}  // namespace detail

/// Exact top-K over the gallery; score = -distance.
inline RetrievalResult linear_scan(std::span<const float> query, const EmbeddingMatrix& gallery, Metric metric,
                                   std::size_t K) {
    if (query.size() != gallery.dim())
        throw std::invalid_argument("linear_scan: query dimension " + std::to_string(query.size()) +
                                    " != gallery dimension " + std::to_string(gallery.dim()));
    if (K < 1) throw std::invalid_argument("linear_scan: K must be >= 1");
    if (metric == Metric::cosine && std::all_of(query.begin(), query.end(), [](float v) { return v == 0.0f; }))
        log(LogLevel::info, "linear_scan: zero-norm query under cosine; all distances are 1");
    std::vector<std::pair<double, std::size_t>> scored(gallery.rows());
    for (std::size_t r = 0; r < gallery.rows(); ++r) scored[r] = {metric_distance(query, gallery.row(r), metric), r};
    return detail::top_k_by_distance(std::move(scored), K);
}

inline std::vector<RetrievalResult> linear_scan_batch(const EmbeddingMatrix& queries, const EmbeddingMatrix& gallery,
                                                      Metric metric, std::size_t K,
                                                      std::size_t threads = search_threads()) {
    std::vector<RetrievalResult> out(queries.rows());
    parallel_for(queries.rows(), threads,
                 [&](std::size_t q) { out[q] = linear_scan(queries.row(q), gallery, metric, K); });
    return out;
}

// ---------------------------------------------------------------------------
// IVF-PQ
// ---------------------------------------------------------------------------

/// Inverted file over k_c coarse cells; residuals to the cell centroid are
/// product-quantized into S sub-spaces of up to 256 centroids each.
struct IvfPqIndex {
    std::size_t n = 0;
    std::size_t d = 0;
    std::size_t k_c = 0;
    std::size_t S = 0;
    std::size_t ks = 0;                             ///< centroids per sub-space (256 unless the gallery is smaller)
    std::vector<float> coarse;                      ///< k_c x d
    std::vector<std::vector<std::uint32_t>> lists;  ///< rows per cell, ascending
    std::vector<float> codebooks;                   ///< S x ks x (d / S)
    std::vector<std::uint8_t> codes;                ///< n x S

    [[nodiscard]] std::size_t dsub() const noexcept { return S ? d / S : 0; }
    [[nodiscard]] const float* codeword(std::size_t s, std::size_t c) const {
        return codebooks.data() + (s * ks + c) * dsub();
    }
    friend bool operator==(const IvfPqIndex&, const IvfPqIndex&) = default;
};

inline constexpr std::size_t kPqCentroids = 256;

inline std::size_t default_n_probe(std::size_t k_c) { return std::max<std::size_t>(1, k_c / 10); }

inline IvfPqIndex build_ivfpq(const EmbeddingMatrix& gallery, std::size_t k_c, std::size_t S, std::size_t iters,
                              std::uint64_t seed) {
    const std::size_t n = gallery.rows(), d = gallery.dim();
    if (S < 1 || d % S != 0)
        throw std::invalid_argument("build_ivfpq: dimension " + std::to_string(d) + " not divisible by S=" +
                                    std::to_string(S));
    if (k_c < 1 || n < k_c)
        throw std::invalid_argument("build_ivfpq: need 1 <= k_c <= n (k_c=" + std::to_string(k_c) +
                                    ", n=" + std::to_string(n) + ")");
    IvfPqIndex idx;
    idx.n = n;
    idx.d = d;
    idx.k_c = k_c;
    idx.S = S;
    idx.ks = std::min(kPqCentroids, n);

    auto coarse = kmeans(PointSet<float>{gallery.data(), n, d}, k_c, iters, seed);
    idx.coarse = std::move(coarse.centroids);
    idx.lists.assign(k_c, {});
    for (std::size_t r = 0; r < n; ++r) idx.lists[coarse.assignment[r]].push_back(static_cast<std::uint32_t>(r));

    const std::size_t ds = idx.dsub();
    std::vector<float> residual(n * d);
    for (std::size_t r = 0; r < n; ++r) {
        const float* c = idx.coarse.data() + coarse.assignment[r] * d;
        auto x = gallery.row(r);
        for (std::size_t j = 0; j < d; ++j) residual[r * d + j] = x[j] - c[j];
    }
    idx.codebooks.resize(S * idx.ks * ds);
    idx.codes.resize(n * S);
    std::vector<float> sub(n * ds);
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t r = 0; r < n; ++r)
            std::copy_n(residual.data() + r * d + s * ds, ds, sub.data() + r * ds);
        auto km = kmeans(PointSet<float>{sub, n, ds}, idx.ks, iters, seed + 1 + s);
        std::copy(km.centroids.begin(), km.centroids.end(), idx.codebooks.begin() + static_cast<std::ptrdiff_t>(s * idx.ks * ds));
        for (std::size_t r = 0; r < n; ++r) idx.codes[r * S + s] = static_cast<std::uint8_t>(km.assignment[r]);
    }
    return idx;
}

/// Probes the n_probe nearest cells and ranks their rows by asymmetric
/// distance (exact query, quantized residual); score = -euclidean distance.
inline RetrievalResult search_ivfpq(const IvfPqIndex& idx, std::span<const float> query, std::size_t n_probe,
                                    std::size_t K) {
    if (query.size() != idx.d) throw std::invalid_argument("search_ivfpq: query dimension mismatch");
    if (n_probe < 1 || n_probe > idx.k_c)
        throw std::invalid_argument("search_ivfpq: n_probe must lie in [1, k_c]");
    if (K < 1) throw std::invalid_argument("search_ivfpq: K must be >= 1");
    const std::size_t d = idx.d, ds = idx.dsub();

    std::vector<std::pair<double, std::size_t>> cells(idx.k_c);
    for (std::size_t c = 0; c < idx.k_c; ++c)
        cells[c] = {squared_distance<float>(query, std::span<const float>(idx.coarse).subspan(c * d, d)), c};
    std::partial_sort(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(n_probe), cells.end());

    std::vector<std::pair<double, std::size_t>> scored;
    std::vector<double> table(idx.S * idx.ks);
    std::vector<double> qres(d);
    for (std::size_t p = 0; p < n_probe; ++p) {
        const std::size_t cell = cells[p].second;
        const float* c = idx.coarse.data() + cell * d;
        for (std::size_t j = 0; j < d; ++j) qres[j] = static_cast<double>(query[j]) - c[j];
        for (std::size_t s = 0; s < idx.S; ++s)
            for (std::size_t k = 0; k < idx.ks; ++k) {
                const float* w = idx.codeword(s, k);
                double acc = 0.0;
                for (std::size_t j = 0; j < ds; ++j) {
                    const double diff = qres[s * ds + j] - w[j];
                    acc += diff * diff;
                }
                table[s * idx.ks + k] = acc;
            }
        for (auto r : idx.lists[cell]) {
            double dist = 0.0;
            for (std::size_t s = 0; s < idx.S; ++s) dist += table[s * idx.ks + idx.codes[r * idx.S + s]];
            scored.emplace_back(std::sqrt(dist), r);
        }
    }
    return detail::top_k_by_distance(std::move(scored), K);
}

}  // namespace irgen
