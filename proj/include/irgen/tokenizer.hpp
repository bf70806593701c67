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

// Semantic residual-quantization tokenizer.
//
// An embedding f is mapped to M tokens by quantizing residuals level by level:
//   r_0 = f,  l_m = argmin_l ||r_{m-1} - c_{m,l}||^2,  r_m = r_{m-1} - c_{m,l_m}.
// Training minimizes
//   CE(head(f)) + lambda1 * sum_m CE(head(fhat_m)) + lambda2 * sum_m ||f - sg[fhat_m]||^2
// where fhat_m is the sum of the first m selected centroids. Gradients of the
// CE(head(fhat_m)) terms are copied straight through to f. Codebooks are
// refreshed by k-means between gradient passes.

#include <random>

#include "irgen/core.hpp"
#include "irgen/gradcheck.hpp"
#include "irgen/kmeans.hpp"
#include "irgen/optim.hpp"

namespace irgen {

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// M codebooks of L centroids in R^d, stored as one M x L x d array.
template <class T>
struct BasicCodebookStack {
    std::size_t M = 0;
    std::size_t L = 0;
    std::size_t d = 0;
    std::vector<T> books;

    BasicCodebookStack() = default;
    BasicCodebookStack(std::size_t m, std::size_t l, std::size_t dim) : M(m), L(l), d(dim), books(m * l * dim, T(0)) {}
    BasicCodebookStack(std::size_t m, std::size_t l, std::size_t dim, std::vector<T> data)
        : M(m), L(l), d(dim), books(std::move(data)) {
        if (books.size() != M * L * d)
            throw std::invalid_argument("CodebookStack: expected " + std::to_string(M * L * d) + " values, got " +
                                        std::to_string(books.size()));
        for (T v : books)
            if (!std::isfinite(static_cast<double>(v))) throw std::invalid_argument("CodebookStack: non-finite centroid");
    }

    [[nodiscard]] std::span<const T> level(std::size_t m) const { return {books.data() + m * L * d, L * d}; }
    [[nodiscard]] std::span<T> level(std::size_t m) { return {books.data() + m * L * d, L * d}; }
    [[nodiscard]] std::span<const T> centroid(std::size_t m, std::size_t l) const {
        return {books.data() + (m * L + l) * d, d};
    }
    [[nodiscard]] std::span<T> centroid(std::size_t m, std::size_t l) { return {books.data() + (m * L + l) * d, d}; }
    [[nodiscard]] TokenVocabulary vocabulary() const { return {M, L}; }

    template <class U>
    [[nodiscard]] BasicCodebookStack<U> cast() const {
        return {M, L, d, std::vector<U>(books.begin(), books.end())};
    }

    friend bool operator==(const BasicCodebookStack&, const BasicCodebookStack&) = default;
};
using CodebookStack = BasicCodebookStack<float>;

/// Linear classifier over d-dimensional features: logits = W f + b.
template <class T>
struct BasicSemanticHead {
    std::size_t classes = 0;
    std::size_t d = 0;
    std::vector<T> weight;  ///< classes x d
    std::vector<T> bias;    ///< classes

    BasicSemanticHead() = default;
    BasicSemanticHead(std::size_t c, std::size_t dim) : classes(c), d(dim), weight(c * dim, T(0)), bias(c, T(0)) {}

    [[nodiscard]] std::vector<T> logits(std::span<const T> f) const {
        std::vector<T> out(classes);
        for (std::size_t c = 0; c < classes; ++c) {
            double s = static_cast<double>(bias[c]);
            const T* w = weight.data() + c * d;
            for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(w[j]) * static_cast<double>(f[j]);
            out[c] = static_cast<T>(s);
        }
        return out;
    }

    template <class U>
    [[nodiscard]] BasicSemanticHead<U> cast() const {
        BasicSemanticHead<U> h;
        h.classes = classes;
        h.d = d;
        h.weight.assign(weight.begin(), weight.end());
        h.bias.assign(bias.begin(), bias.end());
        return h;
    }

    friend bool operator==(const BasicSemanticHead&, const BasicSemanticHead&) = default;
};
using SemanticHead = BasicSemanticHead<float>;

/// Stand-in image encoder: an affine map over the ingested embeddings,
/// initialised to the identity. Disabled encoders pass vectors through unchanged.
struct LinearEncoder {
    bool enabled = false;
    std::size_t d = 0;
    std::vector<float> weight;  ///< d x d
    std::vector<float> bias;    ///< d

    static LinearEncoder identity(std::size_t dim, bool trainable) {
        LinearEncoder e;
        e.enabled = trainable;
        e.d = dim;
        e.weight.assign(dim * dim, 0.0f);
        for (std::size_t i = 0; i < dim; ++i) e.weight[i * dim + i] = 1.0f;
        e.bias.assign(dim, 0.0f);
        return e;
    }

    [[nodiscard]] std::vector<float> apply(std::span<const float> x) const {
        if (!enabled) return {x.begin(), x.end()};
        std::vector<float> out(d);
        for (std::size_t i = 0; i < d; ++i) {
            double s = bias[i];
            for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(weight[i * d + j]) * x[j];
            out[i] = static_cast<float>(s);
        }
        return out;
    }

    friend bool operator==(const LinearEncoder&, const LinearEncoder&) = default;
};

enum class EncoderKind { identity, linear };

struct TokenizerConfig {
    std::size_t M = 4;
    std::size_t L = 256;
    double lambda1 = 1.0;
    double lambda2 = 0.25;
    std::size_t epochs = 20;
    double learning_rate = 5e-4;
    double weight_decay = 0.05;
    std::size_t batch = 128;
    std::size_t init_iters = 25;     ///< Lloyd iterations for the level-by-level initialisation
    std::size_t refresh_iters = 5;   ///< Lloyd iterations per epoch refresh
    bool refresh_codebooks = true;
    EncoderKind encoder = EncoderKind::linear;
    std::uint64_t seed = 0;

    void validate() const {
        if (M < 1) throw ConfigError("tokenizer.M must be >= 1");
        if (L < 2) throw ConfigError("tokenizer.L must be >= 2");
        if (lambda1 < 0 || lambda2 < 0) throw ConfigError("tokenizer.lambda1/lambda2 must be >= 0");
        if (batch < 1) throw ConfigError("tokenizer.batch must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Residual quantization
// ---------------------------------------------------------------------------

template <class T>
struct RqEncoding {
    Identifier id;
    std::size_t d = 0;
    std::vector<T> residuals;  ///< M x d; row m holds r_{m+1}

    [[nodiscard]] std::span<const T> residual(std::size_t m) const { return {residuals.data() + m * d, d}; }
};

template <class T>
RqEncoding<T> rq_encode(const BasicCodebookStack<T>& stack, std::span<const T> f) {
    if (f.size() != stack.d)
        throw std::invalid_argument("rq_encode: vector has dimension " + std::to_string(f.size()) + ", codebooks have " +
                                    std::to_string(stack.d));
    RqEncoding<T> enc;
    enc.d = stack.d;
    enc.id.tokens.resize(stack.M);
    enc.residuals.resize(stack.M * stack.d);
    std::vector<T> r(f.begin(), f.end());
    for (std::size_t m = 0; m < stack.M; ++m) {
        auto nn = nearest_centroid<T>(r, stack.level(m), stack.L);
        enc.id.tokens[m] = nn.index;
        auto c = stack.centroid(m, nn.index);
        for (std::size_t j = 0; j < stack.d; ++j) r[j] -= c[j];
        std::copy(r.begin(), r.end(), enc.residuals.begin() + static_cast<std::ptrdiff_t>(m * stack.d));
    }
    return enc;
}

/// Partial reconstruction: the sum of the centroids selected by `prefix`.
template <class T>
std::vector<T> rq_decode_prefix(const BasicCodebookStack<T>& stack, std::span<const Token> prefix) {
    if (prefix.empty() || prefix.size() > stack.M)
        throw std::invalid_argument("rq_decode_prefix: prefix length must be in [1, M]");
    std::vector<double> acc(stack.d, 0.0);
    for (std::size_t m = 0; m < prefix.size(); ++m) {
        if (prefix[m] >= stack.L)
            throw std::out_of_range("rq_decode_prefix: token " + std::to_string(prefix[m]) + " at level " +
                                    std::to_string(m) + " >= L");
        auto c = stack.centroid(m, prefix[m]);
        for (std::size_t j = 0; j < stack.d; ++j) acc[j] += static_cast<double>(c[j]);
    }
    return {acc.begin(), acc.end()};
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// Softmax cross-entropy in 64-bit. Writes softmax - onehot into `dlogits` when given.
template <class T>
double softmax_cross_entropy(std::span<const T> logits, std::size_t label, std::vector<T>* dlogits = nullptr) {
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : logits) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (T v : logits) z += std::exp(static_cast<double>(v) - mx);
    const double log_z = mx + std::log(z);
    if (dlogits) {
        dlogits->resize(logits.size());
        for (std::size_t c = 0; c < logits.size(); ++c)
            (*dlogits)[c] = static_cast<T>(std::exp(static_cast<double>(logits[c]) - log_z) - (c == label ? 1.0 : 0.0));
    }
    return log_z - static_cast<double>(logits[label]);
}

template <class T>
struct TokenizerGradients {
    std::vector<T> head_weight;
    std::vector<T> head_bias;
    std::vector<T> feature;               ///< straight-through gradient w.r.t. f
    std::vector<T> books;                 ///< w.r.t. the selected centroids (lambda1 terms only)
    std::vector<std::vector<T>> at_recon;  ///< dCE(head(z))/dz at z = fhat_m, m = 1..M
};

struct TokenizerLoss {
    double total = 0.0;
    double ce_feature = 0.0;
    std::vector<double> ce_recon;  ///< per level, unweighted
    std::vector<double> commit;    ///< per level ||f - fhat_m||^2, unweighted
};

namespace detail {

/// CE of the head at z; accumulates scale * dW, scale * db and returns dCE/dz.
template <class T>
double head_ce(const BasicSemanticHead<T>& head, std::span<const T> z, std::size_t label, std::vector<T>* dz,
               TokenizerGradients<T>* g, double scale) {
    auto logits = head.logits(z);
    std::vector<T> dlog;
    const double ce = softmax_cross_entropy<T>(logits, label, (dz || g) ? &dlog : nullptr);
    if (dz) {
        dz->assign(head.d, T(0));
        for (std::size_t c = 0; c < head.classes; ++c) {
            const T* w = head.weight.data() + c * head.d;
            for (std::size_t j = 0; j < head.d; ++j) (*dz)[j] += dlog[c] * w[j];
        }
    }
    if (g) {
        for (std::size_t c = 0; c < head.classes; ++c) {
            const T s = static_cast<T>(scale) * dlog[c];
            T* w = g->head_weight.data() + c * head.d;
            for (std::size_t j = 0; j < head.d; ++j) w[j] += s * z[j];
            g->head_bias[c] += s;
        }
    }
    return ce;
}

}  // namespace detail

/// Evaluates the tokenizer objective for one sample and, when `grads` is given,
/// its straight-through gradients (accumulated, so callers zero them first via
/// `make_tokenizer_gradients`).
template <class T>
TokenizerLoss tokenizer_loss(const BasicCodebookStack<T>& stack, const BasicSemanticHead<T>& head, std::span<const T> f,
                             std::size_t label, double lambda1, double lambda2, TokenizerGradients<T>* grads = nullptr) {
    if (label >= head.classes)
        throw std::invalid_argument("tokenizer_loss: label " + std::to_string(label) + " >= classes " +
                                    std::to_string(head.classes));
    if (f.size() != stack.d || head.d != stack.d) throw std::invalid_argument("tokenizer_loss: dimension mismatch");

    const std::size_t d = stack.d;
    auto enc = rq_encode(stack, f);
    TokenizerLoss loss;
    loss.ce_recon.resize(stack.M);
    loss.commit.resize(stack.M);

    std::vector<T> dz;
    loss.ce_feature = detail::head_ce(head, f, label, grads ? &dz : nullptr, grads, 1.0);
    if (grads)
        for (std::size_t j = 0; j < d; ++j) grads->feature[j] += dz[j];

    std::vector<double> recon(d, 0.0);
    std::vector<T> recon_t(d);
    for (std::size_t m = 0; m < stack.M; ++m) {
        auto c = stack.centroid(m, enc.id[m]);
        for (std::size_t j = 0; j < d; ++j) recon[j] += static_cast<double>(c[j]);
        for (std::size_t j = 0; j < d; ++j) recon_t[j] = static_cast<T>(recon[j]);

        loss.ce_recon[m] = detail::head_ce(head, std::span<const T>(recon_t), label, grads ? &dz : nullptr, grads, lambda1);
        double commit = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = static_cast<double>(f[j]) - recon[j];
            commit += diff * diff;
        }
        loss.commit[m] = commit;

        if (grads) {
            grads->at_recon[m] = dz;
            const T l1 = static_cast<T>(lambda1), l2 = static_cast<T>(2.0 * lambda2);
            for (std::size_t j = 0; j < d; ++j)
                grads->feature[j] += l1 * dz[j] + l2 * (f[j] - recon_t[j]);
            for (std::size_t i = 0; i <= m; ++i) {
                T* gb = grads->books.data() + (i * stack.L + enc.id[i]) * d;
                for (std::size_t j = 0; j < d; ++j) gb[j] += l1 * dz[j];
            }
        }
    }

    loss.total = loss.ce_feature;
    for (std::size_t m = 0; m < stack.M; ++m) loss.total += lambda1 * loss.ce_recon[m] + lambda2 * loss.commit[m];
    return loss;
}

template <class T>
TokenizerGradients<T> make_tokenizer_gradients(const BasicCodebookStack<T>& stack, const BasicSemanticHead<T>& head) {
    TokenizerGradients<T> g;
    g.head_weight.assign(head.weight.size(), T(0));
    g.head_bias.assign(head.bias.size(), T(0));
    g.feature.assign(stack.d, T(0));
    g.books.assign(stack.books.size(), T(0));
    g.at_recon.assign(stack.M, std::vector<T>(stack.d, T(0)));
    return g;
}

template <class T>
TokenizerLoss tokenizer_loss(const BasicCodebookStack<T>& stack, const BasicSemanticHead<T>& head, std::span<const T> f,
                             std::size_t label, const TokenizerConfig& cfg, TokenizerGradients<T>* grads = nullptr) {
    return tokenizer_loss(stack, head, f, label, cfg.lambda1, cfg.lambda2, grads);
}

/// The function whose exact gradient is the straight-through estimate: the token
/// path and the stop-gradient reconstructions are frozen at (f0, books0), the
/// lambda1 terms see fhat_m(books) + (f - f0), and the lambda2 terms see the
/// frozen reconstructions. At (f0, books0) it equals `tokenizer_loss`.
template <class T>
double straight_through_objective(const BasicCodebookStack<T>& stack, const BasicSemanticHead<T>& head,
                                  std::span<const T> f, std::size_t label, double lambda1, double lambda2,
                                  const Identifier& frozen_tokens, std::span<const T> frozen_feature,
                                  const std::vector<std::vector<double>>& frozen_recon) {
    const std::size_t d = stack.d;
    double total = detail::head_ce<T>(head, f, label, nullptr, nullptr, 0.0);
    std::vector<double> recon(d, 0.0);
    std::vector<T> z(d);
    for (std::size_t m = 0; m < stack.M; ++m) {
        auto c = stack.centroid(m, frozen_tokens[m]);
        for (std::size_t j = 0; j < d; ++j) recon[j] += static_cast<double>(c[j]);
        for (std::size_t j = 0; j < d; ++j)
            z[j] = static_cast<T>(recon[j] + (static_cast<double>(f[j]) - static_cast<double>(frozen_feature[j])));
        total += lambda1 * detail::head_ce<T>(head, std::span<const T>(z), label, nullptr, nullptr, 0.0);
        double commit = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = static_cast<double>(f[j]) - frozen_recon[m][j];
            commit += diff * diff;
        }
        total += lambda2 * commit;
    }
    return total;
}

/// Compares the analytic straight-through gradients of `tokenizer_loss` with
/// central differences of `straight_through_objective` over every head weight,
/// head bias, feature entry and centroid entry. In f32 mode the gradients come
/// from the 32-bit path and the differences are evaluated in 64-bit on the
/// perturbed 32-bit parameters.
inline GradCheckReport tokenizer_grad_check(const BasicCodebookStack<double>& stack,
                                            const BasicSemanticHead<double>& head, std::span<const double> f,
                                            std::size_t label, double lambda1, double lambda2, Precision mode) {
    const double h = finite_difference_step(mode);

    // Parameters under test, possibly rounded to 32-bit.
    auto round = [&](double v) { return mode == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v; };
    BasicCodebookStack<double> s64 = stack;
    BasicSemanticHead<double> h64 = head;
    std::vector<double> f64(f.begin(), f.end());
    for (auto& v : s64.books) v = round(v);
    for (auto& v : h64.weight) v = round(v);
    for (auto& v : h64.bias) v = round(v);
    for (auto& v : f64) v = round(v);

    TokenizerGradients<double> analytic;
    if (mode == Precision::f64) {
        analytic = make_tokenizer_gradients(s64, h64);
        tokenizer_loss<double>(s64, h64, f64, label, lambda1, lambda2, &analytic);
    } else {
        auto s32 = s64.cast<float>();
        auto h32 = h64.cast<float>();
        std::vector<float> f32(f64.begin(), f64.end());
        auto g32 = make_tokenizer_gradients(s32, h32);
        tokenizer_loss<float>(s32, h32, f32, label, lambda1, lambda2, &g32);
        analytic.head_weight.assign(g32.head_weight.begin(), g32.head_weight.end());
        analytic.head_bias.assign(g32.head_bias.begin(), g32.head_bias.end());
        analytic.feature.assign(g32.feature.begin(), g32.feature.end());
        analytic.books.assign(g32.books.begin(), g32.books.end());
    }

    const auto enc = rq_encode<double>(s64, f64);
    std::vector<std::vector<double>> frozen_recon(s64.M);
    for (std::size_t m = 0; m < s64.M; ++m)
        frozen_recon[m] = rq_decode_prefix<double>(s64, std::span<const Token>(enc.id.tokens).first(m + 1));
    const std::vector<double> f0 = f64;

    auto objective = [&] {
        return straight_through_objective<double>(s64, h64, f64, label, lambda1, lambda2, enc.id, f0, frozen_recon);
    };

    GradCheckReport report;
    auto probe = [&](std::vector<double>& params, const std::vector<double>& grad, const std::string& name) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double saved = params[i];
            const double up = round(saved + h), down = round(saved - h);
            params[i] = up;
            const double lp = objective();
            params[i] = down;
            const double lm = objective();
            params[i] = saved;
            report.record(grad[i], (lp - lm) / (up - down), i, name);
        }
    };
    probe(h64.weight, analytic.head_weight, "head.weight");
    probe(h64.bias, analytic.head_bias, "head.bias");
    probe(f64, analytic.feature, "feature");
    probe(s64.books, analytic.books, "codebooks");
    return report;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TokenizerModel {
    LinearEncoder encoder;
    CodebookStack codebooks;
    SemanticHead head;

    [[nodiscard]] std::vector<float> features(std::span<const float> x) const { return encoder.apply(x); }

    [[nodiscard]] Identifier encode(std::span<const float> x) const {
        auto f = features(x);
        return rq_encode<float>(codebooks, f).id;
    }

    [[nodiscard]] std::vector<Identifier> encode_rows(const EmbeddingMatrix& emb, std::span<const std::size_t> rows) const {
        std::vector<Identifier> out;
        out.reserve(rows.size());
        for (auto r : rows) out.push_back(encode(emb.row(r)));
        return out;
    }
};

struct TokenizerTrainLog {
    std::vector<double> epoch_loss;  ///< mean objective over the train split after each epoch
    std::size_t reseeded_empty = 0;
    std::size_t reseeded_random = 0;
};

struct TokenizerTrainResult {
    TokenizerModel model;
    TokenizerTrainLog log;
};

namespace detail {

inline void quantize_levels(std::vector<float>& residuals, std::size_t n, CodebookStack& stack, std::size_t iters,
                            bool initialise, std::mt19937_64& rng, TokenizerTrainLog& log) {
    const std::size_t d = stack.d;
    for (std::size_t m = 0; m < stack.M; ++m) {
        PointSet<float> pts{residuals, n, d};
        KMeansStats stats;
        std::vector<float> centroids;
        if (initialise) {
            centroids = kmeans_plus_plus(pts, stack.L, rng, &stats);
        } else {
            auto lvl = stack.level(m);
            centroids.assign(lvl.begin(), lvl.end());
        }
        auto assign = lloyd(pts, centroids, stack.L, iters, rng, &stats);
        std::copy(centroids.begin(), centroids.end(), stack.level(m).begin());
        log.reseeded_empty += stats.reseeded_empty;
        log.reseeded_random += stats.reseeded_random;
        if (stats.reseeded_random > 0)
            irgen::log(LogLevel::info, "tokenizer: level " + std::to_string(m) + " has fewer distinct residuals than L; " +
                                           std::to_string(stats.reseeded_random) + " centroid(s) re-seeded at random");
        for (std::size_t i = 0; i < n; ++i) {
            auto c = stack.centroid(m, assign[i]);
            for (std::size_t j = 0; j < d; ++j) residuals[i * d + j] -= c[j];
        }
    }
}

}  // namespace detail

/// Alternating optimisation over the train split: each epoch runs AdamW passes on
/// the head (and the linear stand-in encoder) with straight-through gradients,
/// then refreshes every codebook with Lloyd iterations on the current residuals.
inline TokenizerTrainResult train_tokenizer(const LabeledDataset& data, const TokenizerConfig& cfg) {
    cfg.validate();
    const auto rows = data.rows_of(Split::train);
    if (rows.empty()) throw DataError("train_tokenizer: train split is empty");
    if (data.num_classes < 2) throw DataError("train_tokenizer: need at least 2 classes");
    const std::size_t d = data.embeddings.dim();
    const std::size_t n = rows.size();
    std::mt19937_64 rng(cfg.seed);

    TokenizerTrainResult out;
    auto& model = out.model;
    model.encoder = LinearEncoder::identity(d, cfg.encoder == EncoderKind::linear);
    model.head = SemanticHead(data.num_classes, d);
    {
        std::normal_distribution<float> init(0.0f, 0.01f);
        for (auto& w : model.head.weight) w = init(rng);
    }
    model.codebooks = CodebookStack(cfg.M, cfg.L, d);

    std::vector<float> residuals(n * d);
    auto compute_features = [&] {
        for (std::size_t i = 0; i < n; ++i) {
            auto f = model.features(data.embeddings.row(rows[i]));
            std::copy(f.begin(), f.end(), residuals.begin() + static_cast<std::ptrdiff_t>(i * d));
        }
    };
    compute_features();
    detail::quantize_levels(residuals, n, model.codebooks, cfg.init_iters, true, rng, out.log);

    // Flat parameter vector: head weight, head bias, then encoder weight and bias.
    const std::size_t head_w = model.head.weight.size(), head_b = model.head.bias.size();
    const std::size_t enc_w = model.encoder.enabled ? d * d : 0, enc_b = model.encoder.enabled ? d : 0;
    std::vector<float> params(head_w + head_b + enc_w + enc_b), grads(params.size());
    std::vector<unsigned char> decay(params.size(), 1);
    std::fill(decay.begin() + static_cast<std::ptrdiff_t>(head_w), decay.begin() + static_cast<std::ptrdiff_t>(head_w + head_b), 0);
    std::fill(decay.end() - static_cast<std::ptrdiff_t>(enc_b), decay.end(), 0);
    // The encoder starts at the identity; decaying it toward zero would shrink the features.
    std::fill(decay.begin() + static_cast<std::ptrdiff_t>(head_w + head_b), decay.end(), 0);

    auto pack = [&] {
        auto it = std::copy(model.head.weight.begin(), model.head.weight.end(), params.begin());
        it = std::copy(model.head.bias.begin(), model.head.bias.end(), it);
        if (model.encoder.enabled) {
            it = std::copy(model.encoder.weight.begin(), model.encoder.weight.end(), it);
            std::copy(model.encoder.bias.begin(), model.encoder.bias.end(), it);
        }
    };
    auto unpack = [&] {
        auto it = params.begin();
        std::copy(it, it + static_cast<std::ptrdiff_t>(head_w), model.head.weight.begin());
        it += static_cast<std::ptrdiff_t>(head_w);
        std::copy(it, it + static_cast<std::ptrdiff_t>(head_b), model.head.bias.begin());
        it += static_cast<std::ptrdiff_t>(head_b);
        if (model.encoder.enabled) {
            std::copy(it, it + static_cast<std::ptrdiff_t>(enc_w), model.encoder.weight.begin());
            it += static_cast<std::ptrdiff_t>(enc_w);
            std::copy(it, it + static_cast<std::ptrdiff_t>(enc_b), model.encoder.bias.begin());
        }
    };

    AdamW<float> opt(params.size(), {cfg.learning_rate, 0.9, 0.96, 1e-8, cfg.weight_decay}, decay);
    const std::size_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    std::size_t step = 0;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    auto mean_loss = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            auto f = model.features(data.embeddings.row(rows[i]));
            s += tokenizer_loss<float>(model.codebooks, model.head, f, data.labels[rows[i]], cfg).total;
        }
        return s / static_cast<double>(n);
    };

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t b0 = 0; b0 < n; b0 += cfg.batch) {
            const std::size_t b1 = std::min(n, b0 + cfg.batch);
            auto g = make_tokenizer_gradients(model.codebooks, model.head);
            std::vector<double> enc_gw(enc_w, 0.0), enc_gb(enc_b, 0.0);
            for (std::size_t k = b0; k < b1; ++k) {
                const std::size_t row = rows[order[k]];
                auto x = data.embeddings.row(row);
                auto f = model.features(x);
                std::fill(g.feature.begin(), g.feature.end(), 0.0f);
                tokenizer_loss<float>(model.codebooks, model.head, f, data.labels[row], cfg, &g);
                if (model.encoder.enabled) {
                    for (std::size_t i = 0; i < d; ++i) {
                        enc_gb[i] += g.feature[i];
                        for (std::size_t j = 0; j < d; ++j) enc_gw[i * d + j] += static_cast<double>(g.feature[i]) * x[j];
                    }
                }
            }
            const float inv = 1.0f / static_cast<float>(b1 - b0);
            auto it = grads.begin();
            for (float v : g.head_weight) *it++ = v * inv;
            for (float v : g.head_bias) *it++ = v * inv;
            for (double v : enc_gw) *it++ = static_cast<float>(v) * inv;
            for (double v : enc_gb) *it++ = static_cast<float>(v) * inv;
            pack();
            opt.step(params, grads, cosine_lr(cfg.learning_rate, step++, total_steps));
            unpack();
        }
        if (cfg.refresh_codebooks) {
            compute_features();
            detail::quantize_levels(residuals, n, model.codebooks, cfg.refresh_iters, false, rng, out.log);
        }
        out.log.epoch_loss.push_back(mean_loss());
    }
    return out;
}

}  // namespace irgen
