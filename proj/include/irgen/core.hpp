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

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace irgen {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid or unknown configuration. The CLI maps this to exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input data. The CLI maps this to exit code 3.
class DataError : public Error {
public:
    explicit DataError(const std::string& what, std::optional<std::uint64_t> byte_offset = std::nullopt)
        : Error(byte_offset ? what + " (at byte offset " + std::to_string(*byte_offset) + ")" : what),
          offset_(byte_offset) {}

    [[nodiscard]] std::optional<std::uint64_t> byte_offset() const noexcept { return offset_; }

private:
    std::optional<std::uint64_t> offset_;
};

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

enum class LogLevel { debug = 0, info = 1, warn = 2, silent = 3 };

namespace detail {
inline LogLevel& log_threshold() {
    static LogLevel level = [] {
        const char* env = std::getenv("IRGEN_LOG");
        if (env == nullptr) return LogLevel::warn;
        std::string_view v(env);
        if (v == "debug") return LogLevel::debug;
        if (v == "info") return LogLevel::info;
        if (v == "silent") return LogLevel::silent;
        return LogLevel::warn;
    }();
    return level;
}
}  // namespace detail

inline void set_log_level(LogLevel level) { detail::log_threshold() = level; }

inline void log(LogLevel level, std::string_view msg) {
    if (level < detail::log_threshold()) return;
    static constexpr const char* tags[] = {"debug", "info", "warn"};
    std::clog << "[irgen:" << tags[static_cast<int>(level)] << "] " << msg << '\n';
}

// ---------------------------------------------------------------------------
// Dense embeddings
// ---------------------------------------------------------------------------

/// Row-major n x d matrix of finite 32-bit floats.
class EmbeddingMatrix {
public:
    EmbeddingMatrix() = default;

    EmbeddingMatrix(std::size_t n, std::size_t d, std::vector<float> data)
        : n_(n), d_(d), data_(std::move(data)) {
        if (n_ == 0 || d_ == 0) throw std::invalid_argument("EmbeddingMatrix: n and d must be >= 1");
        if (data_.size() != n_ * d_)
            throw std::invalid_argument("EmbeddingMatrix: data size " + std::to_string(data_.size()) +
                                        " != n*d = " + std::to_string(n_ * d_));
        for (std::size_t i = 0; i < data_.size(); ++i) {
            if (!std::isfinite(data_[i]))
                throw std::invalid_argument("EmbeddingMatrix: non-finite value at row " + std::to_string(i / d_) +
                                            ", column " + std::to_string(i % d_));
        }
    }

    [[nodiscard]] std::size_t rows() const noexcept { return n_; }
    [[nodiscard]] std::size_t dim() const noexcept { return d_; }
    [[nodiscard]] bool empty() const noexcept { return n_ == 0; }
    [[nodiscard]] std::span<const float> row(std::size_t i) const { return {data_.data() + i * d_, d_}; }
    [[nodiscard]] std::span<const float> data() const noexcept { return data_; }

    /// Copies the given rows, in order, into a new matrix.
    [[nodiscard]] EmbeddingMatrix select(std::span<const std::size_t> rows) const {
        std::vector<float> out;
        out.reserve(rows.size() * d_);
        for (auto r : rows) {
            if (r >= n_) throw std::out_of_range("EmbeddingMatrix::select: row " + std::to_string(r));
            auto src = row(r);
            out.insert(out.end(), src.begin(), src.end());
        }
        return {rows.size(), d_, std::move(out)};
    }

    friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;

private:
    std::size_t n_ = 0;
    std::size_t d_ = 0;
    std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// Labeled dataset
// ---------------------------------------------------------------------------

enum class Split : std::uint8_t { train = 0, gallery = 1, query = 2 };

inline std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::gallery: return "gallery";
        case Split::query: return "query";
    }
    return "?";
}

inline std::optional<Split> parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "gallery") return Split::gallery;
    if (s == "query") return Split::query;
    return std::nullopt;
}

using Label = std::uint32_t;

struct LabeledDataset {
    EmbeddingMatrix embeddings;
    std::vector<Label> labels;
    std::vector<Split> splits;
    std::size_t num_classes = 0;

    LabeledDataset() = default;
    LabeledDataset(EmbeddingMatrix emb, std::vector<Label> lab, std::vector<Split> spl, std::size_t classes = 0)
        : embeddings(std::move(emb)), labels(std::move(lab)), splits(std::move(spl)), num_classes(classes) {
        if (num_classes == 0 && !labels.empty()) num_classes = *std::max_element(labels.begin(), labels.end()) + 1;
        validate();
    }

    void validate() const {
        if (labels.size() != embeddings.rows())
            throw DataError("labels length " + std::to_string(labels.size()) + " != embedding rows " +
                            std::to_string(embeddings.rows()));
        if (splits.size() != embeddings.rows())
            throw DataError("split length " + std::to_string(splits.size()) + " != embedding rows " +
                            std::to_string(embeddings.rows()));
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] >= num_classes)
                throw DataError("row " + std::to_string(i) + ": label " + std::to_string(labels[i]) +
                                " >= declared classes " + std::to_string(num_classes));
    }

    [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }

    [[nodiscard]] std::vector<std::size_t> rows_of(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < splits.size(); ++i)
            if (splits[i] == s) out.push_back(i);
        return out;
    }

    [[nodiscard]] std::vector<Label> labels_of(std::span<const std::size_t> rows) const {
        std::vector<Label> out;
        out.reserve(rows.size());
        for (auto r : rows) out.push_back(labels.at(r));
        return out;
    }
};

// ---------------------------------------------------------------------------
// Identifiers and the token vocabulary
// ---------------------------------------------------------------------------

using Token = std::uint32_t;

/// Discrete address of a database item: M tokens, token m drawn from level m's codebook.
struct Identifier {
    std::vector<Token> tokens;

    Identifier() = default;
    explicit Identifier(std::vector<Token> t) : tokens(std::move(t)) {}
    Identifier(std::initializer_list<Token> t) : tokens(t) {}

    [[nodiscard]] std::size_t size() const noexcept { return tokens.size(); }
    Token operator[](std::size_t i) const { return tokens[i]; }

    friend bool operator==(const Identifier&, const Identifier&) = default;
    friend auto operator<=>(const Identifier& a, const Identifier& b) { return a.tokens <=> b.tokens; }
};

inline std::string to_string(const Identifier& id) {
    std::string s = "[";
    for (std::size_t i = 0; i < id.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(id[i]);
    }
    return s + "]";
}

/// Union vocabulary: level m token l maps to global id m*L + l; id M*L is the begin token.
struct TokenVocabulary {
    std::size_t M = 0;
    std::size_t L = 0;

    [[nodiscard]] std::size_t size() const noexcept { return M * L; }
    [[nodiscard]] std::size_t bos() const noexcept { return M * L; }
    [[nodiscard]] std::size_t global(std::size_t level, Token token) const { return level * L + token; }
    [[nodiscard]] std::size_t level_of(std::size_t global_id) const { return global_id / L; }
    [[nodiscard]] Token token_of(std::size_t global_id) const { return static_cast<Token>(global_id % L); }

    void check(const Identifier& id, std::string_view what = "identifier") const {
        if (id.size() != M)
            throw std::invalid_argument(std::string(what) + ": length " + std::to_string(id.size()) +
                                        " != M = " + std::to_string(M));
        for (std::size_t m = 0; m < M; ++m)
            if (id[m] >= L)
                throw std::invalid_argument(std::string(what) + ": token " + std::to_string(id[m]) + " at level " +
                                            std::to_string(m) + " >= L = " + std::to_string(L));
    }
};

// ---------------------------------------------------------------------------
// Prefix tree over identifiers
// ---------------------------------------------------------------------------

/// Immutable prefix tree over all database identifiers. Leaves sit at depth M and
/// carry the (ascending) list of rows owning that identifier.
class IdTrie {
public:
    using NodeId = std::uint32_t;
    static constexpr NodeId kRoot = 0;

    struct Edge {
        Token token;
        NodeId child;
    };

    IdTrie() = default;

    IdTrie(std::span<const Identifier> ids, std::span<const std::size_t> owners, TokenVocabulary vocab)
        : vocab_(vocab) {
        if (ids.size() != owners.size())
            throw std::invalid_argument("build_trie: " + std::to_string(ids.size()) + " identifiers but " +
                                        std::to_string(owners.size()) + " owners");
        if (ids.empty()) throw std::invalid_argument("build_trie: no identifiers");
        std::vector<bool> seen(ids.size(), false);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            vocab.check(ids[i], "build_trie: row " + std::to_string(i));
            if (owners[i] >= ids.size() || seen[owners[i]])
                throw std::invalid_argument("build_trie: row " + std::to_string(i) + ": owner " +
                                            std::to_string(owners[i]) + " is out of range or repeated");
            seen[owners[i]] = true;
        }

        // Insert into a mutable map-based tree, then flatten.
        struct Tmp {
            std::map<Token, std::size_t> kids;
            std::vector<std::size_t> owners;
        };
        std::vector<Tmp> tmp(1);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            std::size_t node = 0;
            for (auto t : ids[i].tokens) {
                auto it = tmp[node].kids.find(t);
                if (it == tmp[node].kids.end()) {
                    tmp.emplace_back();
                    it = tmp[node].kids.emplace(t, tmp.size() - 1).first;
                }
                node = it->second;
            }
            tmp[node].owners.push_back(owners[i]);
        }

        edge_begin_.resize(tmp.size() + 1);
        owner_begin_.resize(tmp.size() + 1);
        for (std::size_t n = 0; n < tmp.size(); ++n) {
            edge_begin_[n] = static_cast<std::uint32_t>(edges_.size());
            for (auto [tok, child] : tmp[n].kids) edges_.push_back({tok, static_cast<NodeId>(child)});
            owner_begin_[n] = static_cast<std::uint32_t>(owners_.size());
            auto own = tmp[n].owners;
            std::sort(own.begin(), own.end());
            owners_.insert(owners_.end(), own.begin(), own.end());
            if (!own.empty()) ++leaf_count_;
        }
        edge_begin_[tmp.size()] = static_cast<std::uint32_t>(edges_.size());
        owner_begin_[tmp.size()] = static_cast<std::uint32_t>(owners_.size());
    }

    [[nodiscard]] const TokenVocabulary& vocabulary() const noexcept { return vocab_; }
    [[nodiscard]] std::size_t depth() const noexcept { return vocab_.M; }
    [[nodiscard]] std::size_t node_count() const noexcept { return edge_begin_.empty() ? 0 : edge_begin_.size() - 1; }
    /// Number of distinct identifiers stored.
    [[nodiscard]] std::size_t leaf_count() const noexcept { return leaf_count_; }
    /// Number of rows stored across all leaves.
    [[nodiscard]] std::size_t row_count() const noexcept { return owners_.size(); }
    [[nodiscard]] bool empty() const noexcept { return owners_.empty(); }

    [[nodiscard]] std::span<const Edge> children(NodeId n) const {
        return {edges_.data() + edge_begin_[n], edge_begin_[n + 1] - edge_begin_[n]};
    }

    [[nodiscard]] std::span<const std::size_t> owners(NodeId n) const {
        return {owners_.data() + owner_begin_[n], owner_begin_[n + 1] - owner_begin_[n]};
    }

    [[nodiscard]] std::optional<NodeId> child(NodeId n, Token t) const {
        auto kids = children(n);
        auto it = std::lower_bound(kids.begin(), kids.end(), t, [](const Edge& e, Token v) { return e.token < v; });
        if (it == kids.end() || it->token != t) return std::nullopt;
        return it->child;
    }

    [[nodiscard]] std::optional<NodeId> find(std::span<const Token> prefix) const {
        if (empty()) return std::nullopt;
        NodeId n = kRoot;
        for (auto t : prefix) {
            auto c = child(n, t);
            if (!c) return std::nullopt;
            n = *c;
        }
        return n;
    }

    [[nodiscard]] bool contains(const Identifier& id) const {
        if (id.size() != depth()) return false;
        auto n = find(id.tokens);
        return n && !owners(*n).empty();
    }

    /// All distinct identifiers in lexicographic order.
    [[nodiscard]] std::vector<Identifier> identifiers() const {
        std::vector<Identifier> out;
        if (empty()) return out;
        std::vector<Token> path;
        walk(kRoot, path, out);
        return out;
    }

private:
    void walk(NodeId n, std::vector<Token>& path, std::vector<Identifier>& out) const {
        if (path.size() == depth()) {
            out.emplace_back(path);
            return;
        }
        for (const auto& e : children(n)) {
            path.push_back(e.token);
            walk(e.child, path, out);
            path.pop_back();
        }
    }

    TokenVocabulary vocab_;
    std::vector<Edge> edges_;
    std::vector<std::uint32_t> edge_begin_;
    std::vector<std::size_t> owners_;
    std::vector<std::uint32_t> owner_begin_;
    std::size_t leaf_count_ = 0;
};

inline IdTrie build_trie(std::span<const Identifier> ids, std::span<const std::size_t> owners,
                         TokenVocabulary vocab) {
    return {ids, owners, vocab};
}

/// Owners default to 0..n-1 in input order.
inline IdTrie build_trie(std::span<const Identifier> ids, TokenVocabulary vocab) {
    std::vector<std::size_t> owners(ids.size());
    std::iota(owners.begin(), owners.end(), std::size_t{0});
    return {ids, owners, vocab};
}

/// Child tokens reachable from `prefix`. Throws if the prefix is not a stored path
/// or already has length M.
inline std::vector<Token> trie_allowed(const IdTrie& trie, std::span<const Token> prefix) {
    if (prefix.size() >= trie.depth())
        throw std::invalid_argument("trie_allowed: prefix length " + std::to_string(prefix.size()) +
                                    " must be < M = " + std::to_string(trie.depth()));
    auto node = trie.find(prefix);
    if (!node) throw std::invalid_argument("trie_allowed: prefix is not a path in the trie");
    std::vector<Token> out;
    for (const auto& e : trie.children(*node)) out.push_back(e.token);
    return out;
}

// ---------------------------------------------------------------------------
// Small numeric and threading helpers
// ---------------------------------------------------------------------------

template <class T>
inline double squared_distance(std::span<const T> a, std::span<const T> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += diff * diff;
    }
    return s;
}

/// Worker cap for query-parallel search: IRGEN_THREADS if set, else hardware concurrency.
inline std::size_t search_threads() {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("IRGEN_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end != env && v >= 1) return static_cast<std::size_t>(v);
    }
    return hw;
}

/// Runs fn(i) for i in [0, n) over up to `threads` workers, static contiguous chunks.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::jthread> pool;
    const std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
        const std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (std::size_t i = lo; i < hi; ++i) fn(i);
        });
    }
}

}  // namespace irgen
