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

// Run configuration: one JSON document with sections data, tokenizer,
// identifiers, ar, search and eval. Unknown keys and ill-typed values raise
// ConfigError naming the key path. Missing keys keep their defaults.

#include <filesystem>
#include <set>

#include <nlohmann/json.hpp>

#include "irgen/eval.hpp"
#include "irgen/io.hpp"

namespace irgen {

using Json = nlohmann::ordered_json;

struct DataConfig {
    std::string source = "synthetic";  ///< "synthetic" or "files"
    std::string emb_path;
    std::string labels_path;
    std::string split_path;
    std::size_t classes = 20;
    std::size_t per_class = 100;
    std::size_t dim = 32;
    double spread = 0.25;
    std::uint64_t seed = 0;
    std::string work_dir = "run";
};

struct IdentifiersConfig {
    IdScheme scheme = IdScheme::semantic;
    std::size_t hkm_iters = 25;
    std::uint64_t seed = 0;
};

struct ArConfig {
    std::size_t hidden = 64;
    std::size_t blocks = 2;
    std::size_t heads = 4;
    std::size_t ffn_mult = 4;
    ArTrainConfig train;
};

struct SearchConfig {
    std::size_t beam_width = 30;
    std::size_t K = 30;
    Metric metric = Metric::euclidean;
    std::size_t ivf_k_c = 20;
    std::size_t ivf_S = 4;
    std::size_t ivf_iters = 25;
    std::size_t ivf_n_probe = 0;  ///< 0 selects max(1, k_c / 10)
    std::uint64_t seed = 0;
    std::size_t threads = 0;      ///< 0 defers to IRGEN_THREADS / hardware
};

struct EvalConfig {
    std::vector<std::size_t> ks{1, 10, 20, 30};
    std::vector<std::size_t> mrr_ks{1, 2, 4, 8};
    std::vector<std::string> ablation_schemes{"semantic", "random", "hkm"};
    std::vector<std::size_t> ablation_lengths{2, 4, 6, 8};
    double holdout_fraction = 0.5;
    std::uint64_t holdout_seed = 0;
    std::vector<std::size_t> bench_beams{1, 10, 20, 30};
    std::size_t bench_repeats = 3;
    std::size_t bench_workers = 1;
};

struct RunConfig {
    DataConfig data;
    TokenizerConfig tokenizer{.M = 4, .L = 16};
    IdentifiersConfig identifiers;
    ArConfig ar;
    SearchConfig search;
    EvalConfig eval;

    [[nodiscard]] EngineConfig engine() const {
        EngineConfig e;
        e.scheme = identifiers.scheme;
        e.tokenizer = tokenizer;
        e.hkm_iters = identifiers.hkm_iters;
        e.id_seed = identifiers.seed;
        e.ar_shape.hidden = ar.hidden;
        e.ar_shape.blocks = ar.blocks;
        e.ar_shape.heads = ar.heads;
        e.ar_shape.ffn_mult = ar.ffn_mult;
        e.ar = ar.train;
        return e;
    }

    [[nodiscard]] EvalSettings eval_settings() const {
        EvalSettings s;
        s.ks = eval.ks;
        s.mrr_ks = eval.mrr_ks;
        s.beam_width = search.beam_width;
        s.metric = search.metric;
        s.threads = search.threads;
        return s;
    }

    [[nodiscard]] IvfPqSettings ivfpq() const {
        return {search.ivf_k_c, search.ivf_S, search.ivf_iters, search.ivf_n_probe, search.seed};
    }

    void validate() const;
};

namespace detail {

/// Reads the keys of one JSON object section, rejecting keys nobody consumed.
class SectionReader {
public:
    SectionReader(const Json& doc, std::string section) : section_(std::move(section)) {
        if (!doc.contains(section_)) return;
        obj_ = &doc.at(section_);
        if (!obj_->is_object()) throw ConfigError("config: '" + section_ + "' must be an object");
    }

    template <class U>
    void read(const std::string& key, U& out) {
        seen_.insert(key);
        if (!obj_ || !obj_->contains(key)) return;
        const auto& v = obj_->at(key);
        try {
            if constexpr (std::is_same_v<U, bool>) {
                if (!v.is_boolean()) throw ConfigError("");
            } else if constexpr (std::is_integral_v<U>) {
                if (!v.is_number_integer() || (std::is_unsigned_v<U> && v.get<long long>() < 0)) throw ConfigError("");
            } else if constexpr (std::is_floating_point_v<U>) {
                if (!v.is_number()) throw ConfigError("");
            } else if constexpr (std::is_same_v<U, std::string>) {
                if (!v.is_string()) throw ConfigError("");
            }
            out = v.get<U>();
        } catch (const std::exception&) {
            throw ConfigError("config: bad value for '" + path(key) + "': " + v.dump());
        }
    }

    template <class E, class Parse>
    void read_enum(const std::string& key, E& out, Parse parse) {
        std::string s;
        bool present = obj_ && obj_->contains(key);
        read(key, s);
        if (!present) return;
        auto e = parse(s);
        if (!e) throw ConfigError("config: bad value for '" + path(key) + "': \"" + s + "\"");
        out = *e;
    }

    void finish() const {
        if (!obj_) return;
        for (const auto& [k, v] : obj_->items())
            if (!seen_.count(k)) throw ConfigError("config: unknown key '" + path(k) + "'");
    }

    [[nodiscard]] std::string path(const std::string& key) const { return section_ + "." + key; }

private:
    std::string section_;
    const Json* obj_ = nullptr;
    std::set<std::string> seen_;
};

inline std::optional<PairRule> parse_pair_rule(std::string_view s) {
    if (s == "same_class") return PairRule::same_class;
    if (s == "identity") return PairRule::identity;
    return std::nullopt;
}

inline std::string_view to_string(PairRule r) { return r == PairRule::same_class ? "same_class" : "identity"; }

inline std::optional<EncoderKind> parse_encoder(std::string_view s) {
    if (s == "linear") return EncoderKind::linear;
    if (s == "identity") return EncoderKind::identity;
    return std::nullopt;
}

inline std::string_view to_string(EncoderKind e) { return e == EncoderKind::linear ? "linear" : "identity"; }

}  // namespace detail

inline const std::vector<std::string>& config_sections() {
    static const std::vector<std::string> s{"data", "tokenizer", "identifiers", "ar", "search", "eval"};
    return s;
}

inline RunConfig parse_config(const Json& doc) {
    if (!doc.is_object()) throw ConfigError("config: top level must be an object");
    for (const auto& [k, v] : doc.items())
        if (std::find(config_sections().begin(), config_sections().end(), k) == config_sections().end())
            throw ConfigError("config: unknown key '" + k + "'");
    RunConfig c;
    {
        detail::SectionReader r(doc, "data");
        r.read("source", c.data.source);
        r.read("emb_path", c.data.emb_path);
        r.read("labels_path", c.data.labels_path);
        r.read("split_path", c.data.split_path);
        r.read("classes", c.data.classes);
        r.read("per_class", c.data.per_class);
        r.read("dim", c.data.dim);
        r.read("spread", c.data.spread);
        r.read("seed", c.data.seed);
        r.read("work_dir", c.data.work_dir);
        r.finish();
    }
    {
        detail::SectionReader r(doc, "tokenizer");
        auto& t = c.tokenizer;
        r.read("M", t.M);
        r.read("L", t.L);
        r.read("lambda1", t.lambda1);
        r.read("lambda2", t.lambda2);
        r.read("epochs", t.epochs);
        r.read("learning_rate", t.learning_rate);
        r.read("weight_decay", t.weight_decay);
        r.read("batch", t.batch);
        r.read("init_iters", t.init_iters);
        r.read("refresh_iters", t.refresh_iters);
        r.read("refresh_codebooks", t.refresh_codebooks);
        r.read_enum("encoder", t.encoder, detail::parse_encoder);
        r.read("seed", t.seed);
        r.finish();
    }
    {
        detail::SectionReader r(doc, "identifiers");
        r.read_enum("scheme", c.identifiers.scheme, parse_scheme);
        r.read("hkm_iters", c.identifiers.hkm_iters);
        r.read("seed", c.identifiers.seed);
        r.finish();
    }
    {
        detail::SectionReader r(doc, "ar");
        auto& a = c.ar;
        r.read("hidden", a.hidden);
        r.read("blocks", a.blocks);
        r.read("heads", a.heads);
        r.read("ffn_mult", a.ffn_mult);
        r.read("epochs", a.train.epochs);
        r.read("learning_rate", a.train.learning_rate);
        r.read("weight_decay", a.train.weight_decay);
        r.read("batch", a.train.batch);
        r.read("seed", a.train.seed);
        r.read_enum("pair_rule", a.train.pair_rule, detail::parse_pair_rule);
        r.read("init_std", a.train.init_std);
        r.finish();
    }
    {
        detail::SectionReader r(doc, "search");
        auto& s = c.search;
        r.read("beam_width", s.beam_width);
        r.read("K", s.K);
        r.read_enum("metric", s.metric, parse_metric);
        r.read("ivf_k_c", s.ivf_k_c);
        r.read("ivf_S", s.ivf_S);
        r.read("ivf_iters", s.ivf_iters);
        r.read("ivf_n_probe", s.ivf_n_probe);
        r.read("seed", s.seed);
        r.read("threads", s.threads);
        r.finish();
    }
    {
        detail::SectionReader r(doc, "eval");
        auto& e = c.eval;
        r.read("ks", e.ks);
        r.read("mrr_ks", e.mrr_ks);
        r.read("ablation_schemes", e.ablation_schemes);
        r.read("ablation_lengths", e.ablation_lengths);
        r.read("holdout_fraction", e.holdout_fraction);
        r.read("holdout_seed", e.holdout_seed);
        r.read("bench_beams", e.bench_beams);
        r.read("bench_repeats", e.bench_repeats);
        r.read("bench_workers", e.bench_workers);
        r.finish();
    }
    c.validate();
    return c;
}

inline void RunConfig::validate() const {
    if (data.source != "synthetic" && data.source != "files")
        throw ConfigError("config: data.source must be \"synthetic\" or \"files\"");
    if (data.source == "files" && (data.emb_path.empty() || data.labels_path.empty() || data.split_path.empty()))
        throw ConfigError("config: data.emb_path, data.labels_path and data.split_path are required for files");
    if (data.source == "synthetic" && (data.classes < 1 || data.per_class < 10 || data.dim < 1 || data.spread < 0))
        throw ConfigError("config: synthetic data needs classes >= 1, per_class >= 10, dim >= 1, spread >= 0");
    tokenizer.validate();
    if (ar.heads < 1 || ar.hidden % ar.heads != 0) throw ConfigError("config: ar.hidden must be a multiple of ar.heads");
    if (ar.blocks < 1 || ar.ffn_mult < 1 || ar.train.batch < 1)
        throw ConfigError("config: ar.blocks, ar.ffn_mult and ar.batch must be >= 1");
    if (search.K < 1 || search.beam_width < search.K) throw ConfigError("config: need 1 <= search.K <= search.beam_width");
    if (search.ivf_S < 1 || search.ivf_k_c < 1) throw ConfigError("config: search.ivf_S and search.ivf_k_c must be >= 1");
    if (eval.ks.empty() || std::find(eval.ks.begin(), eval.ks.end(), 0) != eval.ks.end())
        throw ConfigError("config: eval.ks must be non-empty positive integers");
    if (*std::max_element(eval.ks.begin(), eval.ks.end()) > search.beam_width)
        throw ConfigError("config: every eval.ks entry must be <= search.beam_width");
    for (const auto& s : eval.ablation_schemes)
        if (!parse_scheme(s)) throw ConfigError("config: bad value in eval.ablation_schemes: \"" + s + "\"");
    if (!(eval.holdout_fraction >= 0.0 && eval.holdout_fraction < 1.0))
        throw ConfigError("config: eval.holdout_fraction must lie in [0, 1)");
    for (auto b : eval.bench_beams)
        if (b < 1) throw ConfigError("config: eval.bench_beams entries must be >= 1");
}

/// Canonical JSON form with every key present.
inline Json to_json(const RunConfig& c) {
    Json j;
    j["data"] = {{"source", c.data.source},       {"emb_path", c.data.emb_path},   {"labels_path", c.data.labels_path},
                 {"split_path", c.data.split_path}, {"classes", c.data.classes},     {"per_class", c.data.per_class},
                 {"dim", c.data.dim},             {"spread", c.data.spread},       {"seed", c.data.seed},
                 {"work_dir", c.data.work_dir}};
    const auto& t = c.tokenizer;
    j["tokenizer"] = {{"M", t.M},
                      {"L", t.L},
                      {"lambda1", t.lambda1},
                      {"lambda2", t.lambda2},
                      {"epochs", t.epochs},
                      {"learning_rate", t.learning_rate},
                      {"weight_decay", t.weight_decay},
                      {"batch", t.batch},
                      {"init_iters", t.init_iters},
                      {"refresh_iters", t.refresh_iters},
                      {"refresh_codebooks", t.refresh_codebooks},
                      {"encoder", detail::to_string(t.encoder)},
                      {"seed", t.seed}};
    j["identifiers"] = {{"scheme", to_string(c.identifiers.scheme)},
                        {"hkm_iters", c.identifiers.hkm_iters},
                        {"seed", c.identifiers.seed}};
    const auto& a = c.ar;
    j["ar"] = {{"hidden", a.hidden},
               {"blocks", a.blocks},
               {"heads", a.heads},
               {"ffn_mult", a.ffn_mult},
               {"epochs", a.train.epochs},
               {"learning_rate", a.train.learning_rate},
               {"weight_decay", a.train.weight_decay},
               {"batch", a.train.batch},
               {"seed", a.train.seed},
               {"pair_rule", detail::to_string(a.train.pair_rule)},
               {"init_std", a.train.init_std}};
    const auto& s = c.search;
    j["search"] = {{"beam_width", s.beam_width}, {"K", s.K},
                   {"metric", to_string(s.metric)}, {"ivf_k_c", s.ivf_k_c},
                   {"ivf_S", s.ivf_S},           {"ivf_iters", s.ivf_iters},
                   {"ivf_n_probe", s.ivf_n_probe}, {"seed", s.seed},
                   {"threads", s.threads}};
    const auto& e = c.eval;
    j["eval"] = {{"ks", e.ks},
                 {"mrr_ks", e.mrr_ks},
                 {"ablation_schemes", e.ablation_schemes},
                 {"ablation_lengths", e.ablation_lengths},
                 {"holdout_fraction", e.holdout_fraction},
                 {"holdout_seed", e.holdout_seed},
                 {"bench_beams", e.bench_beams},
                 {"bench_repeats", e.bench_repeats},
                 {"bench_workers", e.bench_workers}};
    return j;
}

/// Applies "section.key=value"; the value is parsed as JSON, else taken as a string.
inline void apply_override(Json& doc, std::string_view assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq)
        throw ConfigError("--set expects section.key=value, got '" + std::string(assignment) + "'");
    const std::string section(assignment.substr(0, dot));
    const std::string key(assignment.substr(dot + 1, eq - dot - 1));
    const std::string raw(assignment.substr(eq + 1));
    if (key.empty()) throw ConfigError("--set: empty key in '" + std::string(assignment) + "'");
    Json value = Json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    if (!doc.contains(section)) doc[section] = Json::object();
    doc[section][key] = std::move(value);
}

inline Json read_json_file(const std::filesystem::path& path) {
    std::string text;
    try {
        text = detail::read_file(path);
    } catch (const DataError& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    Json doc = Json::parse(text, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("config: " + path.string() + " is not valid JSON");
    return doc;
}

inline RunConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides = {}) {
    Json doc = path.empty() ? Json::object() : read_json_file(path);
    for (const auto& o : overrides) apply_override(doc, o);
    return parse_config(doc);
}

/// 64-bit FNV-1a over the canonical JSON dump.
inline std::uint64_t config_hash(const RunConfig& c) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : to_json(c).dump()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

/// JSON Schema for RunConfig, derived from the canonical defaults.
inline Json config_schema() {
    const Json defaults = to_json(RunConfig{});
    auto type_of = [](const Json& v) -> Json {
        if (v.is_boolean()) return "boolean";
        if (v.is_number_integer()) return {{"type", "integer"}, {"minimum", 0}};
        if (v.is_number()) return "number";
        if (v.is_string()) return "string";
        if (v.is_array()) {
            const bool strings = !v.empty() && v.front().is_string();
            return {{"type", "array"}, {"items", strings ? Json{{"type", "string"}} : Json{{"type", "integer"}, {"minimum", 0}}}};
        }
        return "null";
    };
    Json schema = {{"$schema", "https://json-schema.org/draft/2020-12/schema"},
                   {"title", "irgen run configuration"},
                   {"type", "object"},
                   {"additionalProperties", false}};
    Json props = Json::object();
    for (const auto& [section, keys] : defaults.items()) {
        Json sp = Json::object();
        for (const auto& [k, v] : keys.items()) {
            Json t = type_of(v);
            sp[k] = t.is_string() ? Json{{"type", t}} : t;
            sp[k]["default"] = v;
        }
        props[section] = {{"type", "object"}, {"additionalProperties", false}, {"properties", sp}};
    }
    props["data"]["properties"]["source"]["enum"] = {"synthetic", "files"};
    props["tokenizer"]["properties"]["encoder"]["enum"] = {"linear", "identity"};
    props["identifiers"]["properties"]["scheme"]["enum"] = {"semantic", "random", "hkm"};
    props["ar"]["properties"]["pair_rule"]["enum"] = {"same_class", "identity"};
    props["search"]["properties"]["metric"]["enum"] = {"euclidean", "cosine"};
    schema["properties"] = props;
    return schema;
}

}  // namespace irgen
