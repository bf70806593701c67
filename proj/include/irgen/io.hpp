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

// On-disk formats. Every multi-byte value is little-endian regardless of host.
//
//   EMB1: "EMB1" | u32 n | u32 d | n*d f32, row-major
//   IRT1: "IRT1" | u32 count | count x tensor
//         tensor = u32 name_len | name | u8 dtype | u32 rank | rank x u64 dim | payload

#include <bit>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <variant>

#include "irgen/core.hpp"
#include "irgen/search.hpp"
#include "irgen/seqmodel.hpp"
#include "irgen/tokenizer.hpp"

namespace irgen {

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
    using Raw = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                   std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                      std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
    auto raw = std::bit_cast<Raw>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((raw >> (8 * i)) & 0xff));
}

/// Sequential little-endian reader over a byte buffer; errors carry the byte offset.
class ByteReader {
public:
    ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    template <class U>
    U get() {
        using Raw = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                       std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                          std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
        need(sizeof(U));
        Raw raw = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            raw |= static_cast<Raw>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return std::bit_cast<U>(raw);
    }

    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n)
            throw DataError(what_ + ": truncated; expected " + std::to_string(pos_ + n) + " bytes, file has " +
                                std::to_string(bytes_.size()),
                            pos_);
    }

    [[nodiscard]] std::size_t offset() const noexcept { return pos_; }
    [[nodiscard]] std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

private:
    std::string_view bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// EMB1 embedding files
// ---------------------------------------------------------------------------

inline std::string encode_emb(const EmbeddingMatrix& m) {
    std::string out = "EMB1";
    out.reserve(12 + 4 * m.data().size());
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.dim()));
    for (float v : m.data()) detail::put_le<float>(out, v);
    return out;
}

inline EmbeddingMatrix decode_emb(std::string_view bytes, const std::string& what = "EMB1") {
    detail::ByteReader in(bytes, what);
    if (bytes.size() < 4 || bytes.substr(0, 4) != "EMB1") throw DataError(what + ": bad magic (expected EMB1)", 0);
    in.take(4);
    const std::uint32_t n = in.get<std::uint32_t>();
    const std::uint32_t d = in.get<std::uint32_t>();
    if (n == 0 || d == 0) throw DataError(what + ": n and d must be >= 1", 4);
    const std::uint64_t expected = 4ULL * n * d;
    if (in.remaining() != expected)
        throw DataError(what + ": payload length mismatch; expected " + std::to_string(expected) + " bytes, found " +
                            std::to_string(in.remaining()),
                        12);
    std::vector<float> data(static_cast<std::size_t>(n) * d);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const std::size_t at = in.offset();
        data[i] = in.get<float>();
        if (!std::isfinite(data[i]))
            throw DataError(what + ": non-finite value at row " + std::to_string(i / d) + ", column " +
                                std::to_string(i % d),
                            at);
    }
    return {n, d, std::move(data)};
}

inline void save_emb(const std::filesystem::path& path, const EmbeddingMatrix& m) {
    detail::write_file(path, encode_emb(m));
}

inline EmbeddingMatrix load_emb(const std::filesystem::path& path) {
    return decode_emb(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Labels and splits (one entry per line)
// ---------------------------------------------------------------------------

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::istringstream in(detail::read_file(path));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    return lines;
}

inline std::vector<Label> load_labels(const std::filesystem::path& path) {
    std::vector<Label> out;
    std::size_t lineno = 0;
    for (const auto& line : read_lines(path)) {
        ++lineno;
        std::size_t used = 0;
        long long v = -1;
        try {
            v = std::stoll(line, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != line.size() || v < 0 || v > std::numeric_limits<Label>::max())
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected a non-negative integer label, got '" +
                            line + "'");
        out.push_back(static_cast<Label>(v));
    }
    return out;
}

inline std::vector<Split> load_splits(const std::filesystem::path& path) {
    std::vector<Split> out;
    std::size_t lineno = 0;
    for (const auto& line : read_lines(path)) {
        ++lineno;
        auto s = parse_split(line);
        if (!s)
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected train, gallery or query, got '" +
                            line + "'");
        out.push_back(*s);
    }
    return out;
}

inline void save_labels(const std::filesystem::path& path, std::span<const Label> labels) {
    std::string s;
    for (auto l : labels) s += std::to_string(l) + "\n";
    detail::write_file(path, s);
}

inline void save_splits(const std::filesystem::path& path, std::span<const Split> splits) {
    std::string s;
    for (auto sp : splits) (s += to_string(sp)) += "\n";
    detail::write_file(path, s);
}

inline LabeledDataset load_dataset(const std::filesystem::path& emb_path, const std::filesystem::path& labels_path,
                                   const std::filesystem::path& split_path) {
    auto emb = load_emb(emb_path);
    auto labels = load_labels(labels_path);
    auto splits = load_splits(split_path);
    return {std::move(emb), std::move(labels), std::move(splits)};
}

inline void save_dataset(const std::filesystem::path& emb_path, const std::filesystem::path& labels_path,
                         const std::filesystem::path& split_path, const LabeledDataset& ds) {
    save_emb(emb_path, ds.embeddings);
    save_labels(labels_path, ds.labels);
    save_splits(split_path, ds.splits);
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian blobs
// ---------------------------------------------------------------------------

/// `classes` centres drawn uniformly on the unit sphere, `per_class` points
/// N(centre, spread^2 I) each, class-major rows. Every class is split by a
/// seeded shuffle into floor(70%) train, floor(20%) gallery and the rest query.
inline LabeledDataset make_synthetic(std::size_t classes, std::size_t per_class, std::size_t d, double spread,
                                     std::uint64_t seed) {
    if (classes < 1 || per_class < 1 || d < 1) throw std::invalid_argument("make_synthetic: sizes must be >= 1");
    if (!(spread >= 0.0)) throw std::invalid_argument("make_synthetic: spread must be >= 0");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> centres(classes * d);
    for (std::size_t c = 0; c < classes; ++c) {
        double norm = 0.0;
        do {
            norm = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                centres[c * d + j] = normal(rng);
                norm += centres[c * d + j] * centres[c * d + j];
            }
        } while (norm == 0.0);
        norm = std::sqrt(norm);
        for (std::size_t j = 0; j < d; ++j) centres[c * d + j] /= norm;
    }
    const std::size_t n = classes * per_class;
    std::vector<float> data(n * d);
    std::vector<Label> labels(n);
    std::vector<Split> splits(n);
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t i = 0; i < per_class; ++i) {
            const std::size_t r = c * per_class + i;
            labels[r] = static_cast<Label>(c);
            for (std::size_t j = 0; j < d; ++j)
                data[r * d + j] = static_cast<float>(centres[c * d + j] + spread * normal(rng));
        }
        std::vector<std::size_t> order(per_class);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        const std::size_t n_train = per_class * 7 / 10, n_gallery = per_class * 2 / 10;
        for (std::size_t k = 0; k < per_class; ++k) {
            const Split s = k < n_train ? Split::train : k < n_train + n_gallery ? Split::gallery : Split::query;
            splits[c * per_class + order[k]] = s;
        }
    }
    return {EmbeddingMatrix(n, d, std::move(data)), std::move(labels), std::move(splits), classes};
}

// ---------------------------------------------------------------------------
// IRT1 tensor bundles
// ---------------------------------------------------------------------------

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2, u32 = 3, u64 = 4 };

struct Tensor {
    std::vector<std::uint64_t> dims;
    std::variant<std::vector<float>, std::vector<double>, std::vector<std::uint8_t>, std::vector<std::uint32_t>,
                 std::vector<std::uint64_t>>
        data;

    [[nodiscard]] DType dtype() const { return static_cast<DType>(data.index()); }
    [[nodiscard]] std::size_t count() const {
        return std::visit([](const auto& v) { return v.size(); }, data);
    }

    template <class U>
    [[nodiscard]] const std::vector<U>& as(const std::string& name) const {
        if (auto* p = std::get_if<std::vector<U>>(&data)) return *p;
        throw DataError("tensor '" + name + "' has unexpected dtype");
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Named tensors, serialised in name order.
class TensorBundle {
public:
    template <class U>
    void put(const std::string& name, std::vector<U> values, std::vector<std::uint64_t> dims = {}) {
        if (dims.empty()) dims = {values.size()};
        std::uint64_t prod = 1;
        for (auto d : dims) prod *= d;
        if (prod != values.size()) throw std::invalid_argument("TensorBundle::put: dims do not match '" + name + "'");
        tensors_[name] = Tensor{std::move(dims), std::move(values)};
    }

    [[nodiscard]] bool has(const std::string& name) const { return tensors_.count(name) > 0; }

    [[nodiscard]] const Tensor& get(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw DataError("tensor bundle: missing '" + name + "'");
        return it->second;
    }

    template <class U>
    [[nodiscard]] const std::vector<U>& values(const std::string& name) const {
        return get(name).as<U>(name);
    }

    [[nodiscard]] std::uint64_t scalar(const std::string& name) const {
        const auto& v = values<std::uint64_t>(name);
        if (v.size() != 1) throw DataError("tensor '" + name + "' is not a scalar");
        return v[0];
    }

    [[nodiscard]] const std::map<std::string, Tensor>& tensors() const noexcept { return tensors_; }

    [[nodiscard]] std::string encode() const {
        std::string out = "IRT1";
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors_.size()));
        for (const auto& [name, t] : tensors_) {
            detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
            out += name;
            detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype()));
            detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
            for (auto d : t.dims) detail::put_le<std::uint64_t>(out, d);
            std::visit(
                [&](const auto& v) {
                    for (auto x : v) detail::put_le(out, x);
                },
                t.data);
        }
        return out;
    }

    static TensorBundle decode(std::string_view bytes, const std::string& what = "IRT1") {
        detail::ByteReader in(bytes, what);
        if (bytes.size() < 4 || bytes.substr(0, 4) != "IRT1") throw DataError(what + ": bad magic (expected IRT1)", 0);
        in.take(4);
        TensorBundle b;
        const auto count = in.get<std::uint32_t>();
        for (std::uint32_t i = 0; i < count; ++i) {
            const auto name_len = in.get<std::uint32_t>();
            std::string name(in.take(name_len));
            const std::size_t dtype_at = in.offset();
            const auto dtype = in.get<std::uint8_t>();
            const auto rank = in.get<std::uint32_t>();
            std::vector<std::uint64_t> dims(rank);
            std::uint64_t prod = 1;
            for (auto& d : dims) {
                d = in.get<std::uint64_t>();
                prod *= d;
            }
            auto read = [&]<class U>(U) {
                in.need(prod * sizeof(U));
                std::vector<U> v(prod);
                for (auto& x : v) x = in.get<U>();
                b.tensors_[name] = Tensor{dims, std::move(v)};
            };
            switch (static_cast<DType>(dtype)) {
                case DType::f32: read(float{}); break;
                case DType::f64: read(double{}); break;
                case DType::u8: read(std::uint8_t{}); break;
                case DType::u32: read(std::uint32_t{}); break;
                case DType::u64: read(std::uint64_t{}); break;
                default: throw DataError(what + ": unknown dtype " + std::to_string(dtype), dtype_at);
            }
        }
        if (in.remaining() != 0) throw DataError(what + ": trailing bytes after last tensor", in.offset());
        return b;
    }

    void save(const std::filesystem::path& path) const { detail::write_file(path, encode()); }
    static TensorBundle load(const std::filesystem::path& path) { return decode(detail::read_file(path), path.string()); }

    friend bool operator==(const TensorBundle&, const TensorBundle&) = default;

private:
    std::map<std::string, Tensor> tensors_;
};

// ---------------------------------------------------------------------------
// Artifact <-> bundle
// ---------------------------------------------------------------------------

inline void put_tokenizer(TensorBundle& b, const TokenizerModel& m) {
    const auto& cb = m.codebooks;
    b.put<float>("codebooks", cb.books, {cb.M, cb.L, cb.d});
    b.put<float>("head.weight", m.head.weight, {m.head.classes, m.head.d});
    b.put<float>("head.bias", m.head.bias, {m.head.classes});
    b.put<std::uint64_t>("encoder.enabled", {m.encoder.enabled ? 1u : 0u});
    b.put<float>("encoder.weight", m.encoder.weight, {m.encoder.d, m.encoder.d});
    b.put<float>("encoder.bias", m.encoder.bias, {m.encoder.d});
}

inline TokenizerModel get_tokenizer(const TensorBundle& b) {
    TokenizerModel m;
    const auto& cb = b.get("codebooks");
    if (cb.dims.size() != 3) throw DataError("codebooks: expected rank 3");
    m.codebooks = CodebookStack(cb.dims[0], cb.dims[1], cb.dims[2], cb.as<float>("codebooks"));
    const auto& hw = b.get("head.weight");
    if (hw.dims.size() != 2) throw DataError("head.weight: expected rank 2");
    m.head = SemanticHead(hw.dims[0], hw.dims[1]);
    m.head.weight = hw.as<float>("head.weight");
    m.head.bias = b.values<float>("head.bias");
    m.encoder.enabled = b.scalar("encoder.enabled") != 0;
    m.encoder.d = b.get("encoder.bias").count();
    m.encoder.weight = b.values<float>("encoder.weight");
    m.encoder.bias = b.values<float>("encoder.bias");
    if (m.head.bias.size() != m.head.classes || m.encoder.weight.size() != m.encoder.d * m.encoder.d)
        throw DataError("tokenizer bundle: inconsistent shapes");
    return m;
}

/// Identifier table: dataset rows and their M tokens.
inline void put_identifiers(TensorBundle& b, std::span<const std::size_t> rows, std::span<const Identifier> ids,
                            TokenVocabulary vocab) {
    if (rows.size() != ids.size()) throw std::invalid_argument("put_identifiers: rows and ids differ in length");
    std::vector<std::uint64_t> r(rows.begin(), rows.end());
    std::vector<std::uint32_t> t;
    t.reserve(ids.size() * vocab.M);
    for (const auto& id : ids) {
        vocab.check(id, "put_identifiers");
        t.insert(t.end(), id.tokens.begin(), id.tokens.end());
    }
    b.put<std::uint64_t>("ids.vocab", {vocab.M, vocab.L});
    b.put<std::uint64_t>("ids.rows", std::move(r));
    b.put<std::uint32_t>("ids.tokens", std::move(t), {ids.size(), vocab.M});
}

struct IdentifierTable {
    TokenVocabulary vocab;
    std::vector<std::size_t> rows;
    std::vector<Identifier> ids;
};

inline IdentifierTable get_identifiers(const TensorBundle& b) {
    IdentifierTable t;
    const auto& v = b.values<std::uint64_t>("ids.vocab");
    if (v.size() != 2) throw DataError("ids.vocab: expected (M, L)");
    t.vocab = {v[0], v[1]};
    const auto& rows = b.values<std::uint64_t>("ids.rows");
    const auto& toks = b.values<std::uint32_t>("ids.tokens");
    if (toks.size() != rows.size() * t.vocab.M) throw DataError("ids.tokens: shape mismatch");
    t.rows.assign(rows.begin(), rows.end());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        Identifier id(std::vector<Token>(toks.begin() + static_cast<std::ptrdiff_t>(i * t.vocab.M),
                                         toks.begin() + static_cast<std::ptrdiff_t>((i + 1) * t.vocab.M)));
        try {
            t.vocab.check(id, "ids.tokens");
        } catch (const std::exception& e) {
            throw DataError(e.what());
        }
        t.ids.push_back(std::move(id));
    }
    return t;
}

inline void put_scorer(TensorBundle& b, const ArScorer<float>& sc) {
    const auto& s = sc.shape();
    b.put<std::uint64_t>("scorer.shape", {s.M, s.L, s.cond_dim, s.hidden, s.blocks, s.heads, s.ffn_mult});
    b.put<float>("scorer.theta", std::vector<float>(sc.theta().begin(), sc.theta().end()));
}

inline ArScorer<float> get_scorer(const TensorBundle& b) {
    const auto& v = b.values<std::uint64_t>("scorer.shape");
    if (v.size() != 7) throw DataError("scorer.shape: expected 7 entries");
    ArShape s{v[0], v[1], v[2], v[3], v[4], v[5], v[6]};
    ArScorer<float> sc;
    try {
        sc = ArScorer<float>(s);
    } catch (const std::invalid_argument& e) {
        throw DataError(std::string("scorer.shape: ") + e.what());
    }
    const auto& theta = b.values<float>("scorer.theta");
    if (theta.size() != sc.parameter_count())
        throw DataError("scorer.theta: expected " + std::to_string(sc.parameter_count()) + " values, found " +
                        std::to_string(theta.size()));
    std::copy(theta.begin(), theta.end(), sc.theta().begin());
    return sc;
}

inline void put_ivfpq(TensorBundle& b, const IvfPqIndex& idx) {
    b.put<std::uint64_t>("ivf.shape", {idx.n, idx.d, idx.k_c, idx.S, idx.ks});
    b.put<float>("ivf.coarse", idx.coarse, {idx.k_c, idx.d});
    std::vector<std::uint64_t> offsets{0};
    std::vector<std::uint32_t> members;
    for (const auto& l : idx.lists) {
        members.insert(members.end(), l.begin(), l.end());
        offsets.push_back(members.size());
    }
    b.put<std::uint64_t>("ivf.list_offsets", std::move(offsets));
    b.put<std::uint32_t>("ivf.list_rows", std::move(members));
    b.put<float>("ivf.codebooks", idx.codebooks, {idx.S, idx.ks, idx.dsub()});
    b.put<std::uint8_t>("ivf.codes", idx.codes, {idx.n, idx.S});
}

inline IvfPqIndex get_ivfpq(const TensorBundle& b) {
    const auto& shape = b.values<std::uint64_t>("ivf.shape");
    if (shape.size() != 5) throw DataError("ivf.shape: expected 5 entries");
    IvfPqIndex idx;
    idx.n = shape[0];
    idx.d = shape[1];
    idx.k_c = shape[2];
    idx.S = shape[3];
    idx.ks = shape[4];
    if (idx.S == 0 || idx.d % idx.S != 0) throw DataError("ivf.shape: d not divisible by S");
    idx.coarse = b.values<float>("ivf.coarse");
    const auto& offsets = b.values<std::uint64_t>("ivf.list_offsets");
    const auto& members = b.values<std::uint32_t>("ivf.list_rows");
    if (offsets.size() != idx.k_c + 1 || offsets.back() != members.size()) throw DataError("ivf lists: shape mismatch");
    for (std::size_t c = 0; c < idx.k_c; ++c)
        idx.lists.emplace_back(members.begin() + static_cast<std::ptrdiff_t>(offsets[c]),
                               members.begin() + static_cast<std::ptrdiff_t>(offsets[c + 1]));
    idx.codebooks = b.values<float>("ivf.codebooks");
    idx.codes = b.values<std::uint8_t>("ivf.codes");
    if (idx.coarse.size() != idx.k_c * idx.d || idx.codebooks.size() != idx.S * idx.ks * idx.dsub() ||
        idx.codes.size() != idx.n * idx.S)
        throw DataError("ivf bundle: inconsistent shapes");
    return idx;
}

// ---------------------------------------------------------------------------
// Line-oriented reports
// ---------------------------------------------------------------------------

/// query_id, rank, row, score; ranks start at 1.
inline std::string results_tsv(std::span<const RetrievalResult> results, std::span<const std::size_t> query_ids,
                               std::span<const std::size_t> row_map = {}) {
    std::ostringstream out;
    out.precision(17);
    out << "query_id\trank\trow\tscore\n";
    for (std::size_t q = 0; q < results.size(); ++q)
        for (std::size_t k = 0; k < results[q].hits.size(); ++k) {
            const auto& h = results[q].hits[k];
            out << query_ids[q] << '\t' << (k + 1) << '\t' << (row_map.empty() ? h.row : row_map[h.row]) << '\t'
                << h.score << '\n';
        }
    return out.str();
}

inline std::string loss_csv(std::span<const double> losses, std::string_view column = "mean_nll") {
    std::ostringstream out;
    out.precision(17);
    out << "epoch," << column << "\n";
    for (std::size_t i = 0; i < losses.size(); ++i) out << i << ',' << losses[i] << '\n';
    return out.str();
}

}  // namespace irgen
