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

// End-to-end engine assembly and the experiment protocols built on it.
//
// Trie owners are gallery-local indices: owner i is dataset row
// Engine::gallery_rows[i]. The scorer is conditioned on the raw query
// embedding as a single context vector.

#include <chrono>
#include <set>

#include "irgen/identifiers.hpp"
#include "irgen/metrics.hpp"
#include "irgen/search.hpp"
#include "irgen/seqmodel.hpp"
#include "irgen/tokenizer.hpp"

namespace irgen {

enum class IdScheme { semantic, random, hkm };

inline std::string_view to_string(IdScheme s) {
    switch (s) {
        case IdScheme::semantic: return "semantic";
        case IdScheme::random: return "random";
        case IdScheme::hkm: return "hkm";
    }
    return "?";
}

inline std::optional<IdScheme> parse_scheme(std::string_view s) {
    if (s == "semantic") return IdScheme::semantic;
    if (s == "random") return IdScheme::random;
    if (s == "hkm") return IdScheme::hkm;
    return std::nullopt;
}

struct EngineConfig {
    IdScheme scheme = IdScheme::semantic;
    TokenizerConfig tokenizer;  ///< M and L apply to every scheme
    std::size_t hkm_iters = 25;
    std::uint64_t id_seed = 0;
    ArShape ar_shape;           ///< width fields only; M, L and cond_dim are filled in
    ArTrainConfig ar;
};

struct Engine {
    IdScheme scheme = IdScheme::semantic;
    std::optional<TokenizerModel> tokenizer;
    std::vector<std::size_t> gallery_rows;
    std::vector<Identifier> ids;  ///< parallel to gallery_rows
    IdTrie trie;
    ArScorer<float> scorer;
    TokenizerTrainLog tokenizer_log;
    std::vector<double> ar_nll;
    double build_seconds = 0.0;

    [[nodiscard]] std::vector<Label> gallery_labels(const LabeledDataset& ds) const { return ds.labels_of(gallery_rows); }
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::vector<std::size_t> merge_rows(std::span<const std::size_t> a, std::span<const std::size_t> b) {
    std::set<std::size_t> s(a.begin(), a.end());
    s.insert(b.begin(), b.end());
    return {s.begin(), s.end()};
}

}  // namespace detail

/// Assigns identifiers to `gallery_rows`, builds the trie and trains the
/// scorer on pairs drawn from `source_rows` (train and gallery when empty).
inline Engine build_engine(const LabeledDataset& ds, const EngineConfig& cfg, std::span<const std::size_t> gallery_rows,
                           std::span<const std::size_t> source_rows = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    ds.validate();
    if (gallery_rows.empty()) throw DataError("build_engine: empty gallery");
    const std::size_t M = cfg.tokenizer.M, L = cfg.tokenizer.L;
    Engine e;
    e.scheme = cfg.scheme;
    e.gallery_rows.assign(gallery_rows.begin(), gallery_rows.end());

    switch (cfg.scheme) {
        case IdScheme::semantic: {
            auto trained = train_tokenizer(ds, cfg.tokenizer);
            e.tokenizer = std::move(trained.model);
            e.tokenizer_log = std::move(trained.log);
            e.ids = e.tokenizer->encode_rows(ds.embeddings, e.gallery_rows);
            break;
        }
        case IdScheme::random:
            e.ids = random_identifiers(e.gallery_rows.size(), M, L, cfg.id_seed);
            break;
        case IdScheme::hkm: {
            const auto gallery = ds.embeddings.select(e.gallery_rows);
            e.ids = hkm_identifiers(gallery, {L, M, cfg.hkm_iters, cfg.id_seed});
            break;
        }
    }
    e.trie = build_trie(e.ids, TokenVocabulary{M, L});

    ArTrainData data;
    data.embeddings = &ds.embeddings;
    data.labels = ds.labels;
    data.target_rows = e.gallery_rows;
    data.target_ids = e.ids;
    data.source_rows = source_rows.empty() ? detail::merge_rows(ds.rows_of(Split::train), e.gallery_rows)
                                           : std::vector<std::size_t>(source_rows.begin(), source_rows.end());
    ArShape shape = cfg.ar_shape;
    shape.M = M;
    shape.L = L;
    auto trained = train_ar(data, shape, cfg.ar);
    e.scorer = std::move(trained.scorer);
    e.ar_nll = std::move(trained.epoch_nll);
    e.build_seconds = detail::seconds_since(t0);
    return e;
}

inline Engine build_engine(const LabeledDataset& ds, const EngineConfig& cfg) {
    const auto gallery = ds.rows_of(Split::gallery);
    return build_engine(ds, cfg, gallery);
}

/// Adds rows to the index without touching the scorer: encodes them with the
/// frozen tokenizer and rebuilds the trie.
inline void insert_rows(Engine& e, const LabeledDataset& ds, std::span<const std::size_t> rows) {
    if (!e.tokenizer) throw std::invalid_argument("insert_rows: only the semantic scheme can encode new rows");
    auto ids = e.tokenizer->encode_rows(ds.embeddings, rows);
    e.gallery_rows.insert(e.gallery_rows.end(), rows.begin(), rows.end());
    e.ids.insert(e.ids.end(), ids.begin(), ids.end());
    e.trie = build_trie(e.ids, e.trie.vocabulary());
}

/// Ranked gallery-local rows for each query row of the dataset.
inline std::vector<RetrievalResult> retrieve(const Engine& e, const LabeledDataset& ds,
                                             std::span<const std::size_t> query_rows, std::size_t beam_width,
                                             std::size_t K, std::size_t threads = search_threads()) {
    const auto queries = ds.embeddings.select(query_rows);
    return beam_search_batch(e.scorer, queries, e.trie, beam_width, K, threads);
}

struct EngineEval {
    std::string name;
    MetricReport metrics;
    std::vector<PrPoint> pr;  ///< micro-averaged over queries, one point per rank cutoff
    double seconds = 0.0;
};

struct EvalSettings {
    std::vector<std::size_t> ks{1, 10, 20, 30};
    std::vector<std::size_t> mrr_ks{1, 2, 4, 8};
    std::size_t beam_width = 30;
    Metric metric = Metric::euclidean;
    std::size_t threads = 0;  ///< 0 uses search_threads()

    [[nodiscard]] std::size_t max_k() const { return ks.empty() ? 1 : *std::max_element(ks.begin(), ks.end()); }
    [[nodiscard]] std::size_t workers() const { return threads ? threads : search_threads(); }
};

inline EngineEval evaluate_engine(const Engine& e, const LabeledDataset& ds, const EvalSettings& s,
                                  std::string name = "") {
    const auto t0 = std::chrono::steady_clock::now();
    const auto query_rows = ds.rows_of(Split::query);
    const std::size_t K = std::min(s.max_k(), s.beam_width);
    auto results = retrieve(e, ds, query_rows, s.beam_width, K, s.workers());
    const auto labels = e.gallery_labels(ds);
    const auto qlabels = ds.labels_of(query_rows);
    EngineEval out;
    out.name = name.empty() ? std::string(to_string(e.scheme)) : std::move(name);
    const auto ranked = ranked_rows(results);
    out.metrics = evaluate(ranked, qlabels, labels, s.ks, s.mrr_ks);
    out.pr = pr_curve(ranked, qlabels, labels);
    out.seconds = detail::seconds_since(t0);
    return out;
}

inline EngineEval evaluate_linear_scan(const LabeledDataset& ds, std::span<const std::size_t> gallery_rows,
                                       const EvalSettings& s, std::string name = "linear_scan") {
    const auto t0 = std::chrono::steady_clock::now();
    const auto query_rows = ds.rows_of(Split::query);
    const auto gallery = ds.embeddings.select(gallery_rows);
    const auto queries = ds.embeddings.select(query_rows);
    auto results = linear_scan_batch(queries, gallery, s.metric, std::max(s.max_k(), kMapDepth), s.workers());
    EngineEval out;
    out.name = std::move(name);
    const auto ranked = ranked_rows(results);
    const auto qlabels = ds.labels_of(query_rows), glabels = ds.labels_of(gallery_rows);
    out.metrics = evaluate(ranked, qlabels, glabels, s.ks, s.mrr_ks);
    out.pr = pr_curve(ranked, qlabels, glabels);
    out.seconds = detail::seconds_since(t0);
    return out;
}

struct IvfPqSettings {
    std::size_t k_c = 20;
    std::size_t S = 4;
    std::size_t iters = 25;
    std::size_t n_probe = 0;  ///< 0 uses default_n_probe(k_c)
    std::uint64_t seed = 0;
};

inline EngineEval evaluate_ivfpq(const LabeledDataset& ds, std::span<const std::size_t> gallery_rows,
                                 const IvfPqSettings& ivf, const EvalSettings& s, std::string name = "ivfpq") {
    const auto t0 = std::chrono::steady_clock::now();
    const auto query_rows = ds.rows_of(Split::query);
    const auto gallery = ds.embeddings.select(gallery_rows);
    const auto index = build_ivfpq(gallery, ivf.k_c, ivf.S, ivf.iters, ivf.seed);
    const std::size_t n_probe = ivf.n_probe ? ivf.n_probe : default_n_probe(ivf.k_c);
    std::vector<RetrievalResult> results(query_rows.size());
    parallel_for(query_rows.size(), s.workers(), [&](std::size_t q) {
        results[q] = search_ivfpq(index, ds.embeddings.row(query_rows[q]), n_probe, std::max(s.max_k(), kMapDepth));
    });
    EngineEval out;
    out.name = std::move(name);
    const auto ranked = ranked_rows(results);
    const auto qlabels = ds.labels_of(query_rows), glabels = ds.labels_of(gallery_rows);
    out.metrics = evaluate(ranked, qlabels, glabels, s.ks, s.mrr_ks);
    out.pr = pr_curve(ranked, qlabels, glabels);
    out.seconds = detail::seconds_since(t0);
    return out;
}

// ---------------------------------------------------------------------------
// Ablation over identifier scheme and identifier length
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string table;  ///< "identifier" or "length"
    IdScheme scheme = IdScheme::semantic;
    std::size_t M = 0;
    EngineEval eval;
    double build_seconds = 0.0;
};

struct AblationReport {
    std::vector<AblationRow> rows;

    [[nodiscard]] const AblationRow* find(std::string_view table, IdScheme scheme, std::size_t M) const {
        for (const auto& r : rows)
            if (r.table == table && r.scheme == scheme && r.M == M) return &r;
        return nullptr;
    }
};

/// One row per scheme at the configured M, then one semantic row per length.
inline AblationReport run_ablation(const LabeledDataset& ds, const EngineConfig& base, const EvalSettings& settings,
                                   std::span<const IdScheme> schemes, std::span<const std::size_t> lengths) {
    AblationReport report;
    std::map<std::pair<IdScheme, std::size_t>, std::pair<EngineEval, double>> cache;
    auto run = [&](IdScheme scheme, std::size_t M) {
        auto key = std::make_pair(scheme, M);
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;
        EngineConfig cfg = base;
        cfg.scheme = scheme;
        cfg.tokenizer.M = M;
        auto engine = build_engine(ds, cfg);
        auto ev = evaluate_engine(engine, ds, settings);
        log(LogLevel::info, "ablation: " + std::string(to_string(scheme)) + " M=" + std::to_string(M) + " done");
        return cache[key] = {ev, engine.build_seconds};
    };
    for (auto scheme : schemes) {
        auto [ev, secs] = run(scheme, base.tokenizer.M);
        report.rows.push_back({"identifier", scheme, base.tokenizer.M, ev, secs});
    }
    for (auto M : lengths) {
        auto [ev, secs] = run(IdScheme::semantic, M);
        report.rows.push_back({"length", IdScheme::semantic, M, ev, secs});
    }
    return report;
}

// ---------------------------------------------------------------------------
// Fresh-data protocol
// ---------------------------------------------------------------------------

struct FreshDataReport {
    double holdout_fraction = 0.0;
    std::size_t kept_rows = 0;
    std::size_t held_out_rows = 0;
    std::size_t trie_ids_before = 0;  ///< distinct identifiers before insertion
    std::size_t trie_ids_after = 0;
    std::size_t new_distinct_ids = 0;  ///< held-out identifiers absent before insertion
    EngineEval full;           ///< trained on the whole gallery
    EngineEval fresh;          ///< trained on the kept half, held-out rows inserted afterwards
    EngineEval scan;           ///< exact scan over the whole gallery
};

/// Splits each class's gallery rows into kept and held-out parts (the last
/// floor(fraction * count) rows of a seeded shuffle are held out).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_gallery(const LabeledDataset& ds,
                                                                                   double fraction,
                                                                                   std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction < 1.0))
        throw std::invalid_argument("fresh_data_protocol: holdout_fraction must lie in [0, 1)");
    std::map<Label, std::vector<std::size_t>> by_class;
    for (auto r : ds.rows_of(Split::gallery)) by_class[ds.labels[r]].push_back(r);
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> kept, held;
    for (auto& [label, rows] : by_class) {
        std::shuffle(rows.begin(), rows.end(), rng);
        const auto n_held = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(rows.size())));
        kept.insert(kept.end(), rows.begin(), rows.end() - static_cast<std::ptrdiff_t>(n_held));
        held.insert(held.end(), rows.end() - static_cast<std::ptrdiff_t>(n_held), rows.end());
    }
    std::sort(kept.begin(), kept.end());
    std::sort(held.begin(), held.end());
    return {kept, held};
}

/// `full_engine`, when given, must have been built from `cfg` on the whole
/// gallery; it is evaluated instead of training a second identical engine.
inline FreshDataReport fresh_data_protocol(const LabeledDataset& ds, double holdout_fraction, const EngineConfig& cfg,
                                           const EvalSettings& settings, std::uint64_t split_seed = 0,
                                           const Engine* full_engine = nullptr) {
    if (cfg.scheme != IdScheme::semantic)
        throw ConfigError("fresh_data_protocol: requires identifiers.scheme = semantic");
    FreshDataReport r;
    r.holdout_fraction = holdout_fraction;
    const auto gallery = ds.rows_of(Split::gallery);
    if (full_engine) {
        if (full_engine->gallery_rows != gallery)
            throw std::invalid_argument("fresh_data_protocol: prebuilt engine does not cover the gallery split");
        r.full = evaluate_engine(*full_engine, ds, settings, "full");
    } else {
        r.full = evaluate_engine(build_engine(ds, cfg, gallery), ds, settings, "full");
    }

    auto [kept, held] = split_gallery(ds, holdout_fraction, split_seed);
    r.kept_rows = kept.size();
    r.held_out_rows = held.size();
    auto sources = detail::merge_rows(ds.rows_of(Split::train), kept);
    auto fresh = build_engine(ds, cfg, kept, sources);
    r.trie_ids_before = fresh.trie.leaf_count();
    if (!held.empty()) insert_rows(fresh, ds, held);
    r.trie_ids_after = fresh.trie.leaf_count();
    r.new_distinct_ids = r.trie_ids_after - r.trie_ids_before;
    r.fresh = evaluate_engine(fresh, ds, settings, "fresh");
    r.scan = evaluate_linear_scan(ds, gallery, settings);
    return r;
}

// ---------------------------------------------------------------------------
// Throughput sweep
// ---------------------------------------------------------------------------

struct BenchRow {
    std::size_t beam_width = 0;
    std::size_t queries = 0;
    std::size_t workers = 1;
    double per_query_ms = 0.0;  ///< median over repeats
    double queries_per_second = 0.0;
    double valid_fraction = 0.0;  ///< returned rows whose identifier is stored in the trie
};

/// Times beam search (K = beam width) over a fixed query set for each width.
inline std::vector<BenchRow> bench(const Engine& e, const EmbeddingMatrix& queries, std::span<const std::size_t> beams,
                                   std::size_t repeats = 3, std::size_t workers = 1) {
    if (queries.rows() == 0) throw DataError("bench: no queries");
    repeats = std::max<std::size_t>(1, repeats);
    std::vector<BenchRow> out;
    for (auto w : beams) {
        std::vector<double> per_query;
        std::size_t valid = 0, total = 0;
        for (std::size_t rep = 0; rep < repeats; ++rep) {
            const auto t0 = std::chrono::steady_clock::now();
            auto results = beam_search_batch(e.scorer, queries, e.trie, w, w, workers);
            per_query.push_back(detail::seconds_since(t0) * 1e3 / static_cast<double>(queries.rows()));
            if (rep == 0)
                for (const auto& r : results)
                    for (const auto& h : r.hits) {
                        ++total;
                        valid += e.trie.contains(h.id) && e.ids[h.row] == h.id;
                    }
        }
        std::sort(per_query.begin(), per_query.end());
        BenchRow row;
        row.beam_width = w;
        row.queries = queries.rows();
        row.workers = workers;
        row.per_query_ms = per_query[per_query.size() / 2];
        row.queries_per_second = row.per_query_ms > 0 ? 1e3 / row.per_query_ms : 0.0;
        row.valid_fraction = total ? static_cast<double>(valid) / static_cast<double>(total) : 1.0;
        out.push_back(row);
    }
    return out;
}

}  // namespace irgen
