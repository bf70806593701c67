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

// irgen command-line driver. Every subcommand reads a RunConfig (plus
// --set overrides), works inside data.work_dir and writes a manifest there.
// Exit codes: 0 success, 2 configuration error, 3 data error, 1 otherwise.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "irgen/irgen.hpp"

namespace fs = std::filesystem;
using namespace irgen;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

struct Paths {
    fs::path work;
    [[nodiscard]] fs::path emb() const { return work / "data" / "embeddings.emb"; }
    [[nodiscard]] fs::path labels() const { return work / "data" / "labels.txt"; }
    [[nodiscard]] fs::path splits() const { return work / "data" / "splits.txt"; }
    [[nodiscard]] fs::path tokenizer() const { return work / "tokenizer.irt"; }
    [[nodiscard]] fs::path ids() const { return work / "ids.irt"; }
    [[nodiscard]] fs::path scorer() const { return work / "scorer.irt"; }
    [[nodiscard]] fs::path ivfpq() const { return work / "ivfpq.irt"; }
    [[nodiscard]] fs::path manifest(const std::string& cmd) const { return work / ("manifest." + cmd + ".json"); }
};

/// Per-invocation state: configuration, timers and manifest entries.
class Run {
public:
    Run(std::string command, RunConfig cfg) : command_(std::move(command)), cfg_(std::move(cfg)) {
        paths_.work = cfg_.data.work_dir;
        fs::create_directories(paths_.work);
    }

    [[nodiscard]] const RunConfig& cfg() const { return cfg_; }
    [[nodiscard]] const Paths& paths() const { return paths_; }

    void artifact(const std::string& name, const fs::path& p) { artifacts_[name] = p.string(); }

    template <class F>
    auto timed(const std::string& stage, F&& f) {
        const auto t0 = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<std::invoke_result_t<F>>) {
            f();
            stages_[stage] = detail::seconds_since(t0);
        } else {
            auto out = f();
            stages_[stage] = detail::seconds_since(t0);
            return out;
        }
    }

    void write_text(const std::string& name, const fs::path& p, std::string_view text) {
        detail::write_file(p, text);
        artifact(name, p);
    }

    void write_manifest(int exit_code, const std::string& error = "") const {
        Json m;
        m["command"] = command_;
        m["config_hash"] = hex64(config_hash(cfg_));
        m["seeds"] = {{"data", cfg_.data.seed},          {"tokenizer", cfg_.tokenizer.seed},
                      {"identifiers", cfg_.identifiers.seed}, {"ar", cfg_.ar.train.seed},
                      {"search", cfg_.search.seed},      {"holdout", cfg_.eval.holdout_seed}};
        m["artifacts"] = artifacts_;
        m["wall_seconds"] = stages_;
        m["total_seconds"] = detail::seconds_since(start_);
        m["threads"] = cfg_.search.threads ? cfg_.search.threads : search_threads();
        m["exit_code"] = exit_code;
        if (!error.empty()) m["error"] = error;
        m["config"] = to_json(cfg_);
        detail::write_file(paths_.manifest(command_), m.dump(2) + "\n");
    }

private:
    std::string command_;
    RunConfig cfg_;
    Paths paths_;
    std::map<std::string, std::string> artifacts_;
    std::map<std::string, double> stages_;
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

LabeledDataset load_data(Run& run) {
    const auto& d = run.cfg().data;
    if (d.source == "files") {
        run.artifact("embeddings", d.emb_path);
        return load_dataset(d.emb_path, d.labels_path, d.split_path);
    }
    const auto& p = run.paths();
    if (fs::exists(p.emb())) {
        run.artifact("embeddings", p.emb());
        return load_dataset(p.emb(), p.labels(), p.splits());
    }
    log(LogLevel::info, "no synthesized data in work_dir; generating it in memory");
    return make_synthetic(d.classes, d.per_class, d.dim, d.spread, d.seed);
}

TensorBundle load_bundle(Run& run, const std::string& name, const fs::path& p, const std::string& producer) {
    if (!fs::exists(p)) throw DataError(p.string() + " not found; run `irgen " + producer + "` first");
    run.artifact(name, p);
    return TensorBundle::load(p);
}

/// Reassembles the retrieval engine from the identifier table and scorer.
Engine load_engine(Run& run, const LabeledDataset& ds) {
    const auto ids_bundle = load_bundle(run, "ids", run.paths().ids(), "assign-ids");
    const auto table = get_identifiers(ids_bundle);
    Engine e;
    e.scheme = static_cast<IdScheme>(ids_bundle.scalar("ids.scheme"));
    e.gallery_rows = table.rows;
    e.ids = table.ids;
    for (auto r : e.gallery_rows)
        if (r >= ds.size()) throw DataError("ids.rows: row " + std::to_string(r) + " outside the dataset");
    e.trie = build_trie(e.ids, table.vocab);
    e.scorer = get_scorer(load_bundle(run, "scorer", run.paths().scorer(), "train-ar"));
    const auto& s = e.scorer.shape();
    if (s.M != table.vocab.M || s.L != table.vocab.L)
        throw DataError("scorer vocabulary (M, L) does not match the identifier table");
    if (s.cond_dim != ds.embeddings.dim()) throw DataError("scorer cond_dim does not match the embedding dimension");
    if (fs::exists(run.paths().tokenizer()) && e.scheme == IdScheme::semantic)
        e.tokenizer = get_tokenizer(load_bundle(run, "tokenizer", run.paths().tokenizer(), "tokenize"));
    return e;
}

std::string metrics_tsv(std::span<const EngineEval> evals) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(6);
    out << "method\tmetric\tk\tvalue\n";
    for (const auto& e : evals) {
        const auto& m = e.metrics;
        for (std::size_t i = 0; i < m.ks.size(); ++i) out << e.name << "\tprecision\t" << m.ks[i] << '\t' << m.precision[i] << '\n';
        for (std::size_t i = 0; i < m.ks.size(); ++i) out << e.name << "\trecall\t" << m.ks[i] << '\t' << m.recall[i] << '\n';
        for (std::size_t i = 0; i < m.mrr_ks.size(); ++i) out << e.name << "\tmrr\t" << m.mrr_ks[i] << '\t' << m.mrr[i] << '\n';
        out << e.name << "\tmap\t" << kMapDepth << '\t' << m.map100.value << '\n';
    }
    return out.str();
}

std::string pr_csv(std::span<const EngineEval> evals) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(6);
    out << "method,cutoff,tp,fp,fn,recall,precision\n";
    for (const auto& e : evals)
        for (const auto& p : e.pr)
            out << e.name << ',' << p.cutoff << ',' << p.tp << ',' << p.fp << ',' << p.fn << ',' << p.recall << ','
                << p.precision << '\n';
    return out.str();
}

std::string mrr_csv(std::span<const EngineEval> evals) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(6);
    out << "method,k,mrr\n";
    for (const auto& e : evals)
        for (std::size_t i = 0; i < e.metrics.mrr_ks.size(); ++i)
            out << e.name << ',' << e.metrics.mrr_ks[i] << ',' << e.metrics.mrr[i] << '\n';
    return out.str();
}

Json metrics_json(std::span<const EngineEval> evals) {
    Json doc = Json::object();
    for (const auto& e : evals) {
        const auto& m = e.metrics;
        Json j = Json::object();
        for (std::size_t i = 0; i < m.ks.size(); ++i) {
            j["precision@" + std::to_string(m.ks[i])] = m.precision[i];
            j["recall@" + std::to_string(m.ks[i])] = m.recall[i];
        }
        for (std::size_t i = 0; i < m.mrr_ks.size(); ++i) j["mrr@" + std::to_string(m.mrr_ks[i])] = m.mrr[i];
        j["map@100"] = m.map100.value;
        j["map_queries"] = m.map100.queries;
        j["queries"] = m.queries;
        j["short_results"] = m.short_results;
        j["seconds"] = e.seconds;
        doc[e.name] = std::move(j);
    }
    return doc;
}

void print_summary(const EngineEval& e) {
    std::ostringstream line;
    line << std::fixed << std::setprecision(3) << e.name;
    for (std::size_t i = 0; i < e.metrics.ks.size(); ++i) line << "  P@" << e.metrics.ks[i] << ' ' << e.metrics.precision[i];
    for (std::size_t i = 0; i < e.metrics.ks.size(); ++i) line << "  R@" << e.metrics.ks[i] << ' ' << e.metrics.recall[i];
    line << "  mAP@100 " << e.metrics.map100.value;
    std::cout << line.str() << '\n';
}

std::vector<IdScheme> schemes_of(const RunConfig& c) {
    std::vector<IdScheme> out;
    for (const auto& s : c.eval.ablation_schemes) out.push_back(*parse_scheme(s));
    return out;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void cmd_synth(Run& run) {
    const auto& d = run.cfg().data;
    if (d.source != "synthetic") throw ConfigError("synth: data.source must be \"synthetic\"");
    auto ds = run.timed("generate", [&] { return make_synthetic(d.classes, d.per_class, d.dim, d.spread, d.seed); });
    const auto& p = run.paths();
    fs::create_directories(p.emb().parent_path());
    save_dataset(p.emb(), p.labels(), p.splits(), ds);
    run.artifact("embeddings", p.emb());
    run.artifact("labels", p.labels());
    run.artifact("splits", p.splits());
    std::cout << "synthesized " << ds.size() << " rows (d=" << ds.embeddings.dim() << ", " << ds.num_classes
              << " classes) into " << p.emb().parent_path().string() << '\n';
}

void cmd_tokenize(Run& run) {
    const auto ds = load_data(run);
    auto trained = run.timed("train_tokenizer", [&] { return train_tokenizer(ds, run.cfg().tokenizer); });
    TensorBundle b;
    put_tokenizer(b, trained.model);
    b.save(run.paths().tokenizer());
    run.artifact("tokenizer", run.paths().tokenizer());
    run.write_text("tokenizer_loss", run.paths().work / "tokenizer_loss.csv",
                   loss_csv(trained.log.epoch_loss, "objective"));
    std::cout << "tokenizer trained: final objective " << trained.log.epoch_loss.back() << '\n';
}

void cmd_assign_ids(Run& run) {
    const auto ds = load_data(run);
    const auto& c = run.cfg();
    const auto gallery = ds.rows_of(Split::gallery);
    if (gallery.empty()) throw DataError("assign-ids: gallery split is empty");
    const TokenVocabulary vocab{c.tokenizer.M, c.tokenizer.L};
    std::vector<Identifier> ids;
    run.timed("assign_ids", [&] {
        switch (c.identifiers.scheme) {
            case IdScheme::semantic: {
                auto model = get_tokenizer(load_bundle(run, "tokenizer", run.paths().tokenizer(), "tokenize"));
                if (model.codebooks.M != vocab.M || model.codebooks.L != vocab.L)
                    throw ConfigError("assign-ids: tokenizer.M/L differ from the trained tokenizer");
                ids = model.encode_rows(ds.embeddings, gallery);
                break;
            }
            case IdScheme::random: ids = random_identifiers(gallery.size(), vocab.M, vocab.L, c.identifiers.seed); break;
            case IdScheme::hkm:
                ids = hkm_identifiers(ds.embeddings.select(gallery), {vocab.L, vocab.M, c.identifiers.hkm_iters, c.identifiers.seed});
                break;
        }
    });
    TensorBundle b;
    put_identifiers(b, gallery, ids, vocab);
    b.put<std::uint64_t>("ids.scheme", {static_cast<std::uint64_t>(c.identifiers.scheme)});
    b.save(run.paths().ids());
    run.artifact("ids", run.paths().ids());
    const auto trie = build_trie(ids, vocab);
    std::cout << "assigned " << ids.size() << " identifiers (" << to_string(c.identifiers.scheme) << "), "
              << trie.leaf_count() << " distinct\n";
}

void cmd_train_ar(Run& run) {
    const auto ds = load_data(run);
    const auto& c = run.cfg();
    const auto ids_bundle = load_bundle(run, "ids", run.paths().ids(), "assign-ids");
    const auto table = get_identifiers(ids_bundle);
    ArTrainData data;
    data.embeddings = &ds.embeddings;
    data.labels = ds.labels;
    data.target_rows = table.rows;
    data.target_ids = table.ids;
    data.source_rows = detail::merge_rows(ds.rows_of(Split::train), table.rows);
    ArShape shape = c.engine().ar_shape;
    shape.M = table.vocab.M;
    shape.L = table.vocab.L;
    auto trained = run.timed("train_ar", [&] { return train_ar(data, shape, c.ar.train); });
    TensorBundle b;
    put_scorer(b, trained.scorer);
    b.save(run.paths().scorer());
    run.artifact("scorer", run.paths().scorer());
    run.write_text("ar_loss", run.paths().work / "ar_loss.csv", loss_csv(trained.epoch_nll));
    std::cout << "scorer trained: mean nll " << trained.epoch_nll.front() << " -> " << trained.epoch_nll.back() << '\n';
}

void cmd_build_index(Run& run) {
    const auto ds = load_data(run);
    const auto& s = run.cfg().search;
    const auto gallery = ds.embeddings.select(ds.rows_of(Split::gallery));
    auto index = run.timed("build_ivfpq", [&] { return build_ivfpq(gallery, s.ivf_k_c, s.ivf_S, s.ivf_iters, s.seed); });
    TensorBundle b;
    put_ivfpq(b, index);
    b.save(run.paths().ivfpq());
    run.artifact("ivfpq", run.paths().ivfpq());
    std::cout << "IVF-PQ index: " << index.n << " rows, k_c=" << index.k_c << ", S=" << index.S << ", ks=" << index.ks
              << '\n';
}

void cmd_search(Run& run, const std::string& method) {
    const auto ds = load_data(run);
    const auto& c = run.cfg();
    const auto query_rows = ds.rows_of(Split::query);
    const auto gallery_rows = ds.rows_of(Split::gallery);
    const auto queries = ds.embeddings.select(query_rows);
    const std::size_t workers = c.eval_settings().workers();
    std::vector<RetrievalResult> results;
    std::vector<std::size_t> row_map;
    if (method == "ar") {
        const auto engine = load_engine(run, ds);
        results = run.timed("beam_search", [&] {
            return beam_search_batch(engine.scorer, queries, engine.trie, c.search.beam_width, c.search.K, workers);
        });
        row_map = engine.gallery_rows;
    } else if (method == "scan") {
        const auto gallery = ds.embeddings.select(gallery_rows);
        results = run.timed("linear_scan", [&] { return linear_scan_batch(queries, gallery, c.search.metric, c.search.K, workers); });
        row_map = gallery_rows;
    } else if (method == "ivfpq") {
        const auto index = get_ivfpq(load_bundle(run, "ivfpq", run.paths().ivfpq(), "build-index"));
        if (index.n != gallery_rows.size() || index.d != ds.embeddings.dim())
            throw DataError("ivfpq index does not match the gallery split");
        const std::size_t n_probe = c.search.ivf_n_probe ? c.search.ivf_n_probe : default_n_probe(index.k_c);
        results.resize(queries.rows());
        run.timed("ivfpq_search", [&] {
            parallel_for(queries.rows(), workers,
                         [&](std::size_t q) { results[q] = search_ivfpq(index, queries.row(q), n_probe, c.search.K); });
        });
        row_map = gallery_rows;
    } else {
        throw ConfigError("search: --method must be ar, scan or ivfpq");
    }
    const auto out = run.paths().work / ("results." + method + ".tsv");
    run.write_text("results", out, results_tsv(results, query_rows, row_map));
    std::cout << "wrote " << results.size() << " ranked lists to " << out.string() << '\n';
}

void cmd_eval(Run& run) {
    const auto ds = load_data(run);
    const auto& c = run.cfg();
    const auto settings = c.eval_settings();
    const auto gallery_rows = ds.rows_of(Split::gallery);
    std::vector<EngineEval> evals;
    const auto engine = load_engine(run, ds);
    if (engine.gallery_rows != gallery_rows) log(LogLevel::warn, "identifier table rows differ from the gallery split");
    evals.push_back(run.timed("eval_ar", [&] { return evaluate_engine(engine, ds, settings, "ar_" + std::string(to_string(engine.scheme))); }));
    evals.push_back(run.timed("eval_scan", [&] { return evaluate_linear_scan(ds, gallery_rows, settings); }));
    evals.push_back(run.timed("eval_ivfpq", [&] { return evaluate_ivfpq(ds, gallery_rows, c.ivfpq(), settings); }));
    run.write_text("metrics", run.paths().work / "metrics.tsv", metrics_tsv(evals));
    run.write_text("pr_curve", run.paths().work / "pr_curve.csv", pr_csv(evals));
    run.write_text("mrr", run.paths().work / "mrr.csv", mrr_csv(evals));
    run.write_text("summary", run.paths().work / "summary.json", metrics_json(evals).dump(2) + "\n");
    for (const auto& e : evals) print_summary(e);
}

void cmd_ablate(Run& run) {
    const auto ds = load_data(run);
    const auto& c = run.cfg();
    const auto schemes = schemes_of(c);
    auto report = run.timed("ablation", [&] {
        return run_ablation(ds, c.engine(), c.eval_settings(), schemes, c.eval.ablation_lengths);
    });
    std::ostringstream out;
    out << std::fixed << std::setprecision(6) << "table\tscheme\tM";
    for (auto k : c.eval.ks) out << "\tP@" << k;
    for (auto k : c.eval.ks) out << "\tR@" << k;
    out << "\tmAP@100\n";
    for (const auto& r : report.rows) {
        out << r.table << '\t' << to_string(r.scheme) << '\t' << r.M;
        for (auto v : r.eval.metrics.precision) out << '\t' << v;
        for (auto v : r.eval.metrics.recall) out << '\t' << v;
        out << '\t' << r.eval.metrics.map100.value << '\n';
        print_summary({r.table + "/" + std::string(to_string(r.scheme)) + "/M=" + std::to_string(r.M), r.eval.metrics, {}, 0.0});
    }
    run.write_text("ablation", run.paths().work / "ablation.tsv", out.str());
}

void cmd_fresh_data(Run& run) {
    const auto ds = load_data(run);
    const auto& c = run.cfg();
    auto r = run.timed("fresh_data", [&] {
        return fresh_data_protocol(ds, c.eval.holdout_fraction, c.engine(), c.eval_settings(), c.eval.holdout_seed);
    });
    std::vector<EngineEval> evals{r.full, r.fresh, r.scan};
    run.write_text("fresh_metrics", run.paths().work / "fresh.tsv", metrics_tsv(evals));
    std::ostringstream s;
    s << "kept_rows\t" << r.kept_rows << "\nheld_out_rows\t" << r.held_out_rows << "\ntrie_ids_before\t"
      << r.trie_ids_before << "\ntrie_ids_after\t" << r.trie_ids_after << "\nnew_distinct_ids\t" << r.new_distinct_ids
      << '\n';
    run.write_text("fresh_summary", run.paths().work / "fresh_summary.tsv", s.str());
    for (const auto& e : evals) print_summary(e);
}

void cmd_bench(Run& run, std::vector<std::size_t> beams) {
    const auto ds = load_data(run);
    const auto& c = run.cfg();
    if (beams.empty()) beams = c.eval.bench_beams;
    for (auto b : beams)
        if (b < 1) throw ConfigError("bench: beam widths must be >= 1");
    const auto engine = load_engine(run, ds);
    const auto queries = ds.embeddings.select(ds.rows_of(Split::query));
    auto rows = run.timed("bench", [&] { return bench(engine, queries, beams, c.eval.bench_repeats, c.eval.bench_workers); });
    std::ostringstream out;
    out << std::setprecision(6) << "beam_width\tqueries\tworkers\tper_query_ms\tqueries_per_second\tvalid_fraction\n";
    for (const auto& r : rows)
        out << r.beam_width << '\t' << r.queries << '\t' << r.workers << '\t' << r.per_query_ms << '\t'
            << r.queries_per_second << '\t' << r.valid_fraction << '\n';
    run.write_text("bench", run.paths().work / "bench.tsv", out.str());
    std::cout << out.str();
}

std::vector<std::size_t> parse_beams(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        std::size_t pos = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos == 0 || pos != item.size() || v == 0) throw ConfigError("--beam: bad width '" + item + "'");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"irgen: generative image retrieval over precomputed embeddings"};
    app.require_subcommand(1);
    std::string config_path;
    std::vector<std::string> overrides;
    bool quiet = false;
    std::string method = "ar";
    std::string beams;

    const std::vector<std::pair<std::string, std::string>> commands{
        {"synth", "write the synthetic Gaussian-blob dataset into work_dir/data"},
        {"tokenize", "train the residual-quantization tokenizer"},
        {"assign-ids", "assign identifiers to the gallery split"},
        {"train-ar", "train the autoregressive scorer"},
        {"build-index", "build the IVF-PQ baseline index"},
        {"search", "retrieve ranked gallery rows for every query"},
        {"eval", "evaluate the engine, exact scan and IVF-PQ"},
        {"ablate", "identifier scheme and length ablation"},
        {"fresh-data", "insert held-out gallery rows without retraining"},
        {"bench", "latency sweep over beam widths"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("-c,--config", config_path, "RunConfig JSON path (defaults apply when omitted)");
        sub->add_option("--set", overrides, "override one key, section.key=value")->take_all();
        sub->add_flag("-q,--quiet", quiet, "only log warnings and errors");
        if (name == "search") sub->add_option("--method", method, "ar, scan or ivfpq")->capture_default_str();
        if (name == "bench") sub->add_option("--beam", beams, "comma-separated beam widths, e.g. 1,10,20,30");
    }

    app.add_subcommand("schema", "print the JSON Schema of the run configuration");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitConfig;
    }
    if (app.got_subcommand("schema")) {
        std::cout << config_schema().dump(2) << '\n';
        return 0;
    }
    set_log_level(quiet ? LogLevel::warn : LogLevel::info);
    const std::string command = app.get_subcommands().front()->get_name();

    std::optional<Run> run;
    auto fail = [&](int code, const std::exception& e) {
        std::cerr << "irgen " << command << ": " << e.what() << '\n';
        if (run) {
            try {
                run->write_manifest(code, e.what());
            } catch (const std::exception&) {
            }
        }
        return code;
    };
    try {
        run.emplace(command, load_config(config_path, overrides));
        if (command == "synth") cmd_synth(*run);
        else if (command == "tokenize") cmd_tokenize(*run);
        else if (command == "assign-ids") cmd_assign_ids(*run);
        else if (command == "train-ar") cmd_train_ar(*run);
        else if (command == "build-index") cmd_build_index(*run);
        else if (command == "search") cmd_search(*run, method);
        else if (command == "eval") cmd_eval(*run);
        else if (command == "ablate") cmd_ablate(*run);
        else if (command == "fresh-data") cmd_fresh_data(*run);
        else if (command == "bench") cmd_bench(*run, parse_beams(beams));
        run->write_manifest(0);
        return 0;
    } catch (const ConfigError& e) {
        return fail(kExitConfig, e);
    } catch (const DataError& e) {
        return fail(kExitData, e);
    } catch (const std::exception& e) {
        return fail(1, e);
    }
}
