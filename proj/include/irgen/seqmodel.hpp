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

// Autoregressive identifier scorer p(l_m | query, l_1..l_{m-1}).
//
// A pre-norm causal transformer decoder: token + position embeddings, then B
// blocks of {causal self-attention, cross-attention over the projected query
// context, GELU feed-forward}, a final norm and a projection to the M*L union
// vocabulary. Position m reads [BOS, l_1 .. l_{m-1}] and its logits are
// softmax-normalised over the level-m slice only, both in training and in
// decoding.
//
// Every position is computed by the same row routine whether it runs inside a
// teacher-forced pass or an incremental decode, so prefix logits are bitwise
// identical across the two paths.

#include <map>
#include <random>

#include "irgen/core.hpp"
#include "irgen/gradcheck.hpp"
#include "irgen/optim.hpp"

namespace irgen {

struct ArShape {
    std::size_t M = 4;
    std::size_t L = 256;
    std::size_t cond_dim = 0;
    std::size_t hidden = 64;
    std::size_t blocks = 2;
    std::size_t heads = 4;
    std::size_t ffn_mult = 4;

    [[nodiscard]] std::size_t vocab() const noexcept { return M * L; }
    [[nodiscard]] std::size_t input_vocab() const noexcept { return M * L + 1; }
    [[nodiscard]] std::size_t positions() const noexcept { return M + 1; }
    [[nodiscard]] std::size_t ffn() const noexcept { return hidden * ffn_mult; }
    [[nodiscard]] std::size_t head_dim() const noexcept { return hidden / heads; }
    [[nodiscard]] TokenVocabulary vocabulary() const noexcept { return {M, L}; }

    void validate() const {
        if (M < 1 || L < 1) throw std::invalid_argument("ArShape: M and L must be >= 1");
        if (cond_dim < 1) throw std::invalid_argument("ArShape: cond_dim must be >= 1");
        if (hidden < 1 || heads < 1 || hidden % heads != 0)
            throw std::invalid_argument("ArShape: hidden must be a positive multiple of heads");
        if (ffn_mult < 1) throw std::invalid_argument("ArShape: ffn_mult must be >= 1");
    }

    friend bool operator==(const ArShape&, const ArShape&) = default;
};

/// A contiguous rows x cols slice of the flat parameter vector.
struct ParamRef {
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    [[nodiscard]] std::size_t size() const noexcept { return rows * cols; }
};

struct BlockLayout {
    ParamRef ln1_g, ln1_b, q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
    ParamRef ln2_g, ln2_b, cq_w, cq_b, ck_w, ck_b, cv_w, cv_b, co_w, co_b;
    ParamRef ln3_g, ln3_b, f1_w, f1_b, f2_w, f2_b;
};

struct ArLayout {
    ParamRef tok_emb, pos_emb, cond_w, cond_b, ctx_ln_g, ctx_ln_b;
    std::vector<BlockLayout> blocks;
    ParamRef lnf_g, lnf_b, out_w, out_b;
    std::size_t total = 0;

    struct Named {
        std::string name;
        ParamRef ref;
        bool decay;
        enum class Init { normal, zeros, ones } init;
    };
    std::vector<Named> params;

    [[nodiscard]] std::string name_of(std::size_t index) const {
        for (const auto& p : params)
            if (index >= p.ref.offset && index < p.ref.offset + p.ref.size())
                return p.name + "[" + std::to_string(index - p.ref.offset) + "]";
        return "?";
    }
};

inline ArLayout make_layout(const ArShape& s) {
    ArLayout lay;
    using Init = ArLayout::Named::Init;
    auto add = [&](const std::string& name, std::size_t rows, std::size_t cols, bool decay, Init init) {
        ParamRef r{lay.total, rows, cols};
        lay.total += rows * cols;
        lay.params.push_back({name, r, decay, init});
        return r;
    };
    const std::size_t h = s.hidden, f = s.ffn();
    lay.tok_emb = add("tok_emb", s.input_vocab(), h, false, Init::normal);
    lay.pos_emb = add("pos_emb", s.positions(), h, false, Init::normal);
    lay.cond_w = add("cond.w", h, s.cond_dim, true, Init::normal);
    lay.cond_b = add("cond.b", 1, h, false, Init::zeros);
    lay.ctx_ln_g = add("ctx_ln.g", 1, h, false, Init::ones);
    lay.ctx_ln_b = add("ctx_ln.b", 1, h, false, Init::zeros);
    for (std::size_t b = 0; b < s.blocks; ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        BlockLayout bl;
        bl.ln1_g = add(p + "ln1.g", 1, h, false, Init::ones);
        bl.ln1_b = add(p + "ln1.b", 1, h, false, Init::zeros);
        bl.q_w = add(p + "self.q.w", h, h, true, Init::normal);
        bl.q_b = add(p + "self.q.b", 1, h, false, Init::zeros);
        bl.k_w = add(p + "self.k.w", h, h, true, Init::normal);
        bl.k_b = add(p + "self.k.b", 1, h, false, Init::zeros);
        bl.v_w = add(p + "self.v.w", h, h, true, Init::normal);
        bl.v_b = add(p + "self.v.b", 1, h, false, Init::zeros);
        bl.o_w = add(p + "self.o.w", h, h, true, Init::normal);
        bl.o_b = add(p + "self.o.b", 1, h, false, Init::zeros);
        bl.ln2_g = add(p + "ln2.g", 1, h, false, Init::ones);
        bl.ln2_b = add(p + "ln2.b", 1, h, false, Init::zeros);
        bl.cq_w = add(p + "cross.q.w", h, h, true, Init::normal);
        bl.cq_b = add(p + "cross.q.b", 1, h, false, Init::zeros);
        bl.ck_w = add(p + "cross.k.w", h, h, true, Init::normal);
        bl.ck_b = add(p + "cross.k.b", 1, h, false, Init::zeros);
        bl.cv_w = add(p + "cross.v.w", h, h, true, Init::normal);
        bl.cv_b = add(p + "cross.v.b", 1, h, false, Init::zeros);
        bl.co_w = add(p + "cross.o.w", h, h, true, Init::normal);
        bl.co_b = add(p + "cross.o.b", 1, h, false, Init::zeros);
        bl.ln3_g = add(p + "ln3.g", 1, h, false, Init::ones);
        bl.ln3_b = add(p + "ln3.b", 1, h, false, Init::zeros);
        bl.f1_w = add(p + "ffn.1.w", f, h, true, Init::normal);
        bl.f1_b = add(p + "ffn.1.b", 1, f, false, Init::zeros);
        bl.f2_w = add(p + "ffn.2.w", h, f, true, Init::normal);
        bl.f2_b = add(p + "ffn.2.b", 1, h, false, Init::zeros);
        lay.blocks.push_back(bl);
    }
    lay.lnf_g = add("lnf.g", 1, h, false, Init::ones);
    lay.lnf_b = add("lnf.b", 1, h, false, Init::zeros);
    lay.out_w = add("out.w", s.vocab(), h, true, Init::normal);
    lay.out_b = add("out.b", 1, s.vocab(), false, Init::zeros);
    return lay;
}

/// Trainable scorer: shape, layout and one flat parameter vector.
template <class T>
class ArScorer {
public:
    ArScorer() = default;

    explicit ArScorer(ArShape shape) : shape_(shape) {
        shape_.validate();
        layout_ = make_layout(shape_);
        theta_.assign(layout_.total, T(0));
    }

    /// Random initialisation: N(0, std) for matrices and embeddings, unit norm gains, zero biases.
    ArScorer(ArShape shape, std::uint64_t seed, double init_std = 0.02) : ArScorer(shape) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, init_std);
        for (const auto& p : layout_.params) {
            T* dst = theta_.data() + p.ref.offset;
            for (std::size_t i = 0; i < p.ref.size(); ++i) {
                switch (p.init) {
                    case ArLayout::Named::Init::normal: dst[i] = static_cast<T>(normal(rng)); break;
                    case ArLayout::Named::Init::zeros: dst[i] = T(0); break;
                    case ArLayout::Named::Init::ones: dst[i] = T(1); break;
                }
            }
        }
    }

    [[nodiscard]] const ArShape& shape() const noexcept { return shape_; }
    [[nodiscard]] const ArLayout& layout() const noexcept { return layout_; }
    [[nodiscard]] std::span<const T> theta() const noexcept { return theta_; }
    [[nodiscard]] std::span<T> theta() noexcept { return theta_; }
    [[nodiscard]] std::size_t parameter_count() const noexcept { return theta_.size(); }

    [[nodiscard]] const T* at(const ParamRef& r) const { return theta_.data() + r.offset; }
    [[nodiscard]] T* at(const ParamRef& r) { return theta_.data() + r.offset; }
    [[nodiscard]] std::span<T> param(const ParamRef& r) { return {theta_.data() + r.offset, r.size()}; }

    [[nodiscard]] std::vector<unsigned char> decay_mask() const {
        std::vector<unsigned char> mask(theta_.size(), 0);
        for (const auto& p : layout_.params)
            if (p.decay) std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(p.ref.offset), p.ref.size(), 1);
        return mask;
    }

    template <class U>
    [[nodiscard]] ArScorer<U> cast() const {
        ArScorer<U> out(shape_);
        std::copy(theta_.begin(), theta_.end(), out.theta().begin());
        return out;
    }

    friend bool operator==(const ArScorer& a, const ArScorer& b) { return a.shape_ == b.shape_ && a.theta_ == b.theta_; }

private:
    ArShape shape_;
    ArLayout layout_;
    std::vector<T> theta_;
};

namespace kernels {

template <class T>
inline T dot(const T* a, const T* b, std::size_t n) {
    T s = T(0);
#pragma omp simd reduction(+ : s)
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

/// y = W x + b with W stored rows x cols.
template <class T>
inline void affine(const T* w, const T* b, std::size_t rows, std::size_t cols, const T* x, T* y) {
    for (std::size_t r = 0; r < rows; ++r) y[r] = b[r] + dot(w + r * cols, x, cols);
}

/// Accumulates dx += W^T dy, dW += dy x^T, db += dy. Any output may be null.
template <class T>
inline void affine_backward(const T* w, std::size_t rows, std::size_t cols, const T* x, const T* dy, T* dx, T* dw,
                            T* db) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T g = dy[r];
        if (g == T(0)) continue;
        const T* wr = w + r * cols;
        if (dx) {
#pragma omp simd
            for (std::size_t c = 0; c < cols; ++c) dx[c] += g * wr[c];
        }
        if (dw) {
            T* dwr = dw + r * cols;
#pragma omp simd
            for (std::size_t c = 0; c < cols; ++c) dwr[c] += g * x[c];
        }
        if (db) db[r] += g;
    }
}

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
inline void layer_norm(const T* x, const T* g, const T* b, std::size_t n, T* y, T* xhat, T& rstd) {
    T mean = T(0);
    for (std::size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<T>(n);
    rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    for (std::size_t i = 0; i < n; ++i) {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = g[i] * xhat[i] + b[i];
    }
}

template <class T>
inline void layer_norm_backward(const T* dy, const T* xhat, T rstd, const T* g, std::size_t n, T* dx, T* dg, T* db) {
    T mean_d = T(0), mean_dx = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T dxh = dy[i] * g[i];
        mean_d += dxh;
        mean_dx += dxh * xhat[i];
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
    }
    mean_d /= static_cast<T>(n);
    mean_dx /= static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) dx[i] += rstd * (dy[i] * g[i] - mean_d - xhat[i] * mean_dx);
}

template <class T>
inline constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2 / pi)

template <class T>
inline T gelu(T u) {
    const T inner = kGeluC<T> * (u + static_cast<T>(0.044715) * u * u * u);
    return static_cast<T>(0.5) * u * (T(1) + std::tanh(inner));
}

template <class T>
inline T gelu_grad(T u) {
    const T inner = kGeluC<T> * (u + static_cast<T>(0.044715) * u * u * u);
    const T t = std::tanh(inner);
    return static_cast<T>(0.5) * (T(1) + t) +
           static_cast<T>(0.5) * u * (T(1) - t * t) * kGeluC<T> * (T(1) + static_cast<T>(3 * 0.044715) * u * u);
}

/// Multi-head attention of one query row over `count` key/value rows (each h wide).
/// Writes per-head probabilities (heads x count) and the concatenated output.
template <class T>
inline void attend(const T* q, const T* keys, const T* values, std::size_t count, std::size_t heads, std::size_t hd,
                   T* probs, T* out) {
    const std::size_t h = heads * hd;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    for (std::size_t a = 0; a < heads; ++a) {
        T* p = probs + a * count;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < count; ++j) {
            p[j] = dot(q + a * hd, keys + j * h + a * hd, hd) * scale;
            mx = std::max(mx, p[j]);
        }
        T z = T(0);
        for (std::size_t j = 0; j < count; ++j) {
            p[j] = std::exp(p[j] - mx);
            z += p[j];
        }
        for (std::size_t j = 0; j < count; ++j) p[j] /= z;
        T* o = out + a * hd;
        std::fill(o, o + hd, T(0));
        for (std::size_t j = 0; j < count; ++j) {
            const T* v = values + j * h + a * hd;
            for (std::size_t c = 0; c < hd; ++c) o[c] += p[j] * v[c];
        }
    }
}

/// Backward of `attend`: accumulates dq, and dkeys / dvalues for the `count` rows.
template <class T>
inline void attend_backward(const T* q, const T* keys, const T* values, std::size_t count, std::size_t heads,
                            std::size_t hd, const T* probs, const T* dout, T* dq, T* dkeys, T* dvalues) {
    const std::size_t h = heads * hd;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    std::vector<T> dp(count);
    for (std::size_t a = 0; a < heads; ++a) {
        const T* p = probs + a * count;
        const T* dout_a = dout + a * hd;
        T weighted = T(0);
        for (std::size_t j = 0; j < count; ++j) {
            dp[j] = dot(dout_a, values + j * h + a * hd, hd);
            weighted += p[j] * dp[j];
            T* dv = dvalues + j * h + a * hd;
            for (std::size_t c = 0; c < hd; ++c) dv[c] += p[j] * dout_a[c];
        }
        for (std::size_t j = 0; j < count; ++j) {
            const T ds = p[j] * (dp[j] - weighted) * scale;
            const T* k = keys + j * h + a * hd;
            T* dk = dkeys + j * h + a * hd;
            for (std::size_t c = 0; c < hd; ++c) {
                dq[a * hd + c] += ds * k[c];
                dk[c] += ds * q[a * hd + c];
            }
        }
    }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Conditioning
// ---------------------------------------------------------------------------

/// Projected query context plus the per-block cross-attention keys and values.
template <class T>
struct Context {
    std::size_t length = 0;
    std::vector<T> input;      ///< length x cond_dim, as given
    std::vector<T> xhat;       ///< length x hidden, normalised projection before gain and bias
    std::vector<T> rstd;       ///< length
    std::vector<T> projected;  ///< length x hidden, LayerNorm(W_cond x + b)
    std::vector<std::vector<T>> cross_keys;    ///< per block, length x hidden
    std::vector<std::vector<T>> cross_values;  ///< per block, length x hidden
};

/// Projects `count` conditioning vectors (row-major, cond_dim wide) to the
/// scorer width, layer-normalises them, and precomputes each block's
/// cross-attention keys and values.
template <class T, class In>
Context<T> condition(const ArScorer<T>& scorer, std::span<const In> vectors, std::size_t count = 1) {
    const auto& s = scorer.shape();
    const auto& lay = scorer.layout();
    if (count < 1) throw std::invalid_argument("condition: need at least one conditioning vector");
    if (vectors.size() != count * s.cond_dim)
        throw std::invalid_argument("condition: expected " + std::to_string(count) + " vectors of dimension " +
                                    std::to_string(s.cond_dim) + ", got " + std::to_string(vectors.size()) +
                                    " values");
    const std::size_t h = s.hidden;
    Context<T> ctx;
    ctx.length = count;
    ctx.input.assign(vectors.begin(), vectors.end());
    ctx.projected.resize(count * h);
    ctx.xhat.resize(count * h);
    ctx.rstd.resize(count);
    std::vector<T> z(h);
    for (std::size_t j = 0; j < count; ++j) {
        kernels::affine(scorer.at(lay.cond_w), scorer.at(lay.cond_b), h, s.cond_dim, ctx.input.data() + j * s.cond_dim,
                        z.data());
        kernels::layer_norm(z.data(), scorer.at(lay.ctx_ln_g), scorer.at(lay.ctx_ln_b), h, ctx.projected.data() + j * h,
                            ctx.xhat.data() + j * h, ctx.rstd[j]);
    }
    ctx.cross_keys.resize(s.blocks);
    ctx.cross_values.resize(s.blocks);
    for (std::size_t b = 0; b < s.blocks; ++b) {
        const auto& bl = lay.blocks[b];
        ctx.cross_keys[b].resize(count * h);
        ctx.cross_values[b].resize(count * h);
        for (std::size_t j = 0; j < count; ++j) {
            kernels::affine(scorer.at(bl.ck_w), scorer.at(bl.ck_b), h, h, ctx.projected.data() + j * h,
                            ctx.cross_keys[b].data() + j * h);
            kernels::affine(scorer.at(bl.cv_w), scorer.at(bl.cv_b), h, h, ctx.projected.data() + j * h,
                            ctx.cross_values[b].data() + j * h);
        }
    }
    return ctx;
}

// ---------------------------------------------------------------------------
// Row forward shared by teacher forcing and incremental decoding
// ---------------------------------------------------------------------------

/// Self-attention keys and values of the positions processed so far.
template <class T>
struct KvCache {
    std::size_t length = 0;
    std::vector<std::vector<T>> keys;    ///< per block, length x hidden
    std::vector<std::vector<T>> values;  ///< per block, length x hidden
};

/// Activations of one position kept for the backward pass.
template <class T>
struct RowCache {
    struct Block {
        std::vector<T> x_in, xhat1, a1, q, p_self, o1, x_mid1, xhat2, a2, q2, p_cross, o2, x_mid2, xhat3, a3, u, g;
        T rstd1{}, rstd2{}, rstd3{};
    };
    std::size_t token = 0;
    std::size_t position = 0;
    std::vector<Block> blocks;
    std::vector<T> x_out, xhatf, y;
    T rstdf{};
};

namespace detail {

/// Runs position `pos` (reading global token `token`) through the network,
/// appends its keys/values to `kv`, and writes the V logits.
template <class T>
void forward_row(const ArScorer<T>& sc, const Context<T>& ctx, KvCache<T>& kv, std::size_t token, std::size_t pos,
                 T* logits, std::type_identity_t<RowCache<T>>* cache) {
    const auto& s = sc.shape();
    const auto& lay = sc.layout();
    const std::size_t h = s.hidden, f = s.ffn(), heads = s.heads, hd = s.head_dim();
    if (kv.keys.size() != s.blocks) {
        kv.keys.assign(s.blocks, {});
        kv.values.assign(s.blocks, {});
    }
    std::vector<T> x(h), a(h), xhat(h), q(h), k(h), v(h), o(h), tmp(h), u(f), g(f);
    const T* te = sc.at(lay.tok_emb) + token * h;
    const T* pe = sc.at(lay.pos_emb) + pos * h;
    for (std::size_t i = 0; i < h; ++i) x[i] = te[i] + pe[i];
    std::vector<T> p_self(heads * (pos + 1)), p_cross(heads * ctx.length);

    if (cache) {
        cache->token = token;
        cache->position = pos;
        cache->blocks.resize(s.blocks);
    }
    for (std::size_t b = 0; b < s.blocks; ++b) {
        const auto& bl = lay.blocks[b];
        typename RowCache<T>::Block* bc = cache ? &cache->blocks[b] : nullptr;
        if (bc) bc->x_in = x;

        // Causal self-attention.
        T rstd{};
        kernels::layer_norm(x.data(), sc.at(bl.ln1_g), sc.at(bl.ln1_b), h, a.data(), xhat.data(), rstd);
        kernels::affine(sc.at(bl.q_w), sc.at(bl.q_b), h, h, a.data(), q.data());
        kernels::affine(sc.at(bl.k_w), sc.at(bl.k_b), h, h, a.data(), k.data());
        kernels::affine(sc.at(bl.v_w), sc.at(bl.v_b), h, h, a.data(), v.data());
        kv.keys[b].insert(kv.keys[b].end(), k.begin(), k.end());
        kv.values[b].insert(kv.values[b].end(), v.begin(), v.end());
        kernels::attend(q.data(), kv.keys[b].data(), kv.values[b].data(), pos + 1, heads, hd, p_self.data(), o.data());
        kernels::affine(sc.at(bl.o_w), sc.at(bl.o_b), h, h, o.data(), tmp.data());
        if (bc) {
            bc->xhat1 = xhat;
            bc->rstd1 = rstd;
            bc->a1 = a;
            bc->q = q;
            bc->p_self = p_self;
            bc->o1 = o;
        }
        for (std::size_t i = 0; i < h; ++i) x[i] += tmp[i];
        if (bc) bc->x_mid1 = x;

        // Cross-attention over the query context.
        kernels::layer_norm(x.data(), sc.at(bl.ln2_g), sc.at(bl.ln2_b), h, a.data(), xhat.data(), rstd);
        kernels::affine(sc.at(bl.cq_w), sc.at(bl.cq_b), h, h, a.data(), q.data());
        kernels::attend(q.data(), ctx.cross_keys[b].data(), ctx.cross_values[b].data(), ctx.length, heads, hd,
                        p_cross.data(), o.data());
        kernels::affine(sc.at(bl.co_w), sc.at(bl.co_b), h, h, o.data(), tmp.data());
        if (bc) {
            bc->xhat2 = xhat;
            bc->rstd2 = rstd;
            bc->a2 = a;
            bc->q2 = q;
            bc->p_cross = p_cross;
            bc->o2 = o;
        }
        for (std::size_t i = 0; i < h; ++i) x[i] += tmp[i];
        if (bc) bc->x_mid2 = x;

        // Feed-forward.
        kernels::layer_norm(x.data(), sc.at(bl.ln3_g), sc.at(bl.ln3_b), h, a.data(), xhat.data(), rstd);
        kernels::affine(sc.at(bl.f1_w), sc.at(bl.f1_b), f, h, a.data(), u.data());
        for (std::size_t i = 0; i < f; ++i) g[i] = kernels::gelu(u[i]);
        kernels::affine(sc.at(bl.f2_w), sc.at(bl.f2_b), h, f, g.data(), tmp.data());
        if (bc) {
            bc->xhat3 = xhat;
            bc->rstd3 = rstd;
            bc->a3 = a;
            bc->u = u;
            bc->g = g;
        }
        for (std::size_t i = 0; i < h; ++i) x[i] += tmp[i];
    }
    kv.length = pos + 1;

    T rstd{};
    kernels::layer_norm(x.data(), sc.at(lay.lnf_g), sc.at(lay.lnf_b), h, a.data(), xhat.data(), rstd);
    kernels::affine(sc.at(lay.out_w), sc.at(lay.out_b), s.vocab(), h, a.data(), logits);
    if (cache) {
        cache->x_out = x;
        cache->xhatf = xhat;
        cache->rstdf = rstd;
        cache->y = a;
    }
}

}  // namespace detail

/// Log-softmax of `logits` restricted to the level-m slice [m*L, (m+1)*L), in 64-bit.
template <class T>
std::vector<double> masked_log_softmax(std::span<const T> logits, std::size_t level, std::size_t L) {
    const T* z = logits.data() + level * L;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < L; ++i) mx = std::max(mx, static_cast<double>(z[i]));
    double sum = 0.0;
    for (std::size_t i = 0; i < L; ++i) sum += std::exp(static_cast<double>(z[i]) - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(L);
    for (std::size_t i = 0; i < L; ++i) out[i] = static_cast<double>(z[i]) - lse;
    return out;
}

// ---------------------------------------------------------------------------
// Incremental decoding
// ---------------------------------------------------------------------------

/// Decoder state after feeding BOS and a (possibly empty) prefix; `logits` score the next level.
template <class T>
struct DecodeState {
    KvCache<T> kv;
    std::vector<T> logits;
    std::size_t level = 0;  ///< level the current logits predict
};

template <class T>
DecodeState<T> decode_start(const ArScorer<T>& scorer, const Context<T>& ctx) {
    DecodeState<T> st;
    st.logits.resize(scorer.shape().vocab());
    detail::forward_row(scorer, ctx, st.kv, scorer.shape().vocabulary().bos(), 0, st.logits.data(), nullptr);
    st.level = 0;
    return st;
}

/// Feeds the token chosen at the current level and computes the next level's logits.
template <class T>
void decode_advance(const ArScorer<T>& scorer, const Context<T>& ctx, DecodeState<T>& st, Token token) {
    const auto& s = scorer.shape();
    if (st.level + 1 >= s.M) throw std::invalid_argument("decode_advance: identifier already complete");
    if (token >= s.L) throw std::out_of_range("decode_advance: token out of range");
    const std::size_t global = s.vocabulary().global(st.level, token);
    detail::forward_row(scorer, ctx, st.kv, global, st.level + 1, st.logits.data(), nullptr);
    ++st.level;
}

/// Raw logits (all M*L entries) for the level following `prefix`.
template <class T>
std::vector<T> step_logits(const ArScorer<T>& scorer, const Context<T>& ctx, std::span<const Token> prefix) {
    if (prefix.size() >= scorer.shape().M)
        throw std::invalid_argument("step_logits: prefix length " + std::to_string(prefix.size()) +
                                    " exceeds M-1 = " + std::to_string(scorer.shape().M - 1));
    auto st = decode_start(scorer, ctx);
    for (auto t : prefix) decode_advance(scorer, ctx, st, t);
    return st.logits;
}

// ---------------------------------------------------------------------------
// Teacher-forced likelihood and gradients
// ---------------------------------------------------------------------------

/// Logits for every position of a teacher-forced pass over `target`
/// (position m reads [BOS, l_1..l_m]), row-major M x V.
template <class T>
std::vector<T> teacher_forced_logits(const ArScorer<T>& scorer, const Context<T>& ctx, const Identifier& target,
                                     std::size_t positions) {
    const auto& s = scorer.shape();
    std::vector<T> out(positions * s.vocab());
    KvCache<T> kv;
    const auto vocab = s.vocabulary();
    for (std::size_t i = 0; i < positions; ++i) {
        const std::size_t token = i == 0 ? vocab.bos() : vocab.global(i - 1, target[i - 1]);
        detail::forward_row(scorer, ctx, kv, token, i, out.data() + i * s.vocab(), nullptr);
    }
    return out;
}

/// -log p(target | context) under per-level masked softmax.
template <class T>
double sequence_nll(const ArScorer<T>& scorer, const Context<T>& ctx, const Identifier& target) {
    const auto& s = scorer.shape();
    s.vocabulary().check(target, "sequence_nll");
    auto logits = teacher_forced_logits(scorer, ctx, target, s.M);
    double nll = 0.0;
    for (std::size_t m = 0; m < s.M; ++m) {
        auto lsm = masked_log_softmax<T>(std::span<const T>(logits).subspan(m * s.vocab(), s.vocab()), m, s.L);
        nll -= lsm[target[m]];
    }
    return nll;
}

/// sequence_nll plus its gradient: accumulates scale * d(nll)/d(theta) into `grad`
/// (same layout as the scorer parameters).
template <class T>
double sequence_nll_backward(const ArScorer<T>& sc, std::span<const T> cond, std::size_t cond_len,
                             const Identifier& target, std::span<T> grad, T scale) {
    const auto& s = sc.shape();
    const auto& lay = sc.layout();
    s.vocabulary().check(target, "sequence_nll_backward");
    if (grad.size() != sc.parameter_count()) throw std::invalid_argument("sequence_nll_backward: gradient size mismatch");
    const std::size_t h = s.hidden, f = s.ffn(), heads = s.heads, hd = s.head_dim(), V = s.vocab(), M = s.M;
    const auto vocab = s.vocabulary();

    auto ctx = condition<T, T>(sc, cond, cond_len);
    KvCache<T> kv;
    std::vector<RowCache<T>> rows(M);
    std::vector<T> logits(V);
    std::vector<T> dlogits(V);
    // Gradient flowing into the residual stream at each row.
    std::vector<std::vector<T>> dx(M, std::vector<T>(h, T(0)));

    auto G = [&](const ParamRef& r) { return grad.data() + r.offset; };

    double nll = 0.0;
    for (std::size_t i = 0; i < M; ++i) {
        const std::size_t token = i == 0 ? vocab.bos() : vocab.global(i - 1, target[i - 1]);
        detail::forward_row(sc, ctx, kv, token, i, logits.data(), &rows[i]);
        auto lsm = masked_log_softmax<T>(logits, i, s.L);
        nll -= lsm[target[i]];

        // d nll / d logits on the level-i slice; zero elsewhere.
        std::fill(dlogits.begin(), dlogits.end(), T(0));
        for (std::size_t t = 0; t < s.L; ++t)
            dlogits[i * s.L + t] = static_cast<T>(std::exp(lsm[t]) - (t == target[i] ? 1.0 : 0.0)) * scale;
        std::vector<T> dy(h, T(0));
        kernels::affine_backward(sc.at(lay.out_w), V, h, rows[i].y.data(), dlogits.data(), dy.data(), G(lay.out_w),
                                 G(lay.out_b));
        kernels::layer_norm_backward(dy.data(), rows[i].xhatf.data(), rows[i].rstdf, sc.at(lay.lnf_g), h, dx[i].data(),
                                     G(lay.lnf_g), G(lay.lnf_b));
    }

    std::vector<std::vector<T>> dctx_k(s.blocks, std::vector<T>(ctx.length * h, T(0)));
    std::vector<std::vector<T>> dctx_v(s.blocks, std::vector<T>(ctx.length * h, T(0)));

    for (std::size_t bi = s.blocks; bi-- > 0;) {
        const auto& bl = lay.blocks[bi];
        // Feed-forward and cross-attention are row-local.
        std::vector<std::vector<T>> dmid1(M, std::vector<T>(h, T(0)));
        for (std::size_t i = 0; i < M; ++i) {
            const auto& c = rows[i].blocks[bi];
            // x_out = x_mid2 + W2 gelu(W1 LN3(x_mid2))
            std::vector<T> dmid2 = dx[i];
            std::vector<T> dg(f, T(0)), du(f), da(h, T(0));
            kernels::affine_backward(sc.at(bl.f2_w), h, f, c.g.data(), dx[i].data(), dg.data(), G(bl.f2_w), G(bl.f2_b));
            for (std::size_t j = 0; j < f; ++j) du[j] = dg[j] * kernels::gelu_grad(c.u[j]);
            kernels::affine_backward(sc.at(bl.f1_w), f, h, c.a3.data(), du.data(), da.data(), G(bl.f1_w), G(bl.f1_b));
            kernels::layer_norm_backward(da.data(), c.xhat3.data(), c.rstd3, sc.at(bl.ln3_g), h, dmid2.data(),
                                         G(bl.ln3_g), G(bl.ln3_b));

            // x_mid2 = x_mid1 + Wco attend(Wcq LN2(x_mid1), ctx)
            dmid1[i] = dmid2;
            std::vector<T> do2(h, T(0)), dq2(h, T(0));
            std::fill(da.begin(), da.end(), T(0));
            kernels::affine_backward(sc.at(bl.co_w), h, h, c.o2.data(), dmid2.data(), do2.data(), G(bl.co_w),
                                     G(bl.co_b));
            kernels::attend_backward(c.q2.data(), ctx.cross_keys[bi].data(), ctx.cross_values[bi].data(), ctx.length,
                                     heads, hd, c.p_cross.data(), do2.data(), dq2.data(), dctx_k[bi].data(),
                                     dctx_v[bi].data());
            kernels::affine_backward(sc.at(bl.cq_w), h, h, c.a2.data(), dq2.data(), da.data(), G(bl.cq_w), G(bl.cq_b));
            kernels::layer_norm_backward(da.data(), c.xhat2.data(), c.rstd2, sc.at(bl.ln2_g), h, dmid1[i].data(),
                                         G(bl.ln2_g), G(bl.ln2_b));
        }

        // Causal self-attention couples rows through keys and values.
        std::vector<T> dq(M * h, T(0)), dk(M * h, T(0)), dv(M * h, T(0));
        for (std::size_t i = 0; i < M; ++i) {
            const auto& c = rows[i].blocks[bi];
            std::vector<T> do1(h, T(0));
            kernels::affine_backward(sc.at(bl.o_w), h, h, c.o1.data(), dmid1[i].data(), do1.data(), G(bl.o_w),
                                     G(bl.o_b));
            kernels::attend_backward(c.q.data(), kv.keys[bi].data(), kv.values[bi].data(), i + 1, heads, hd,
                                     c.p_self.data(), do1.data(), dq.data() + i * h, dk.data(), dv.data());
        }
        for (std::size_t i = 0; i < M; ++i) {
            const auto& c = rows[i].blocks[bi];
            std::vector<T> da(h, T(0));
            kernels::affine_backward(sc.at(bl.q_w), h, h, c.a1.data(), dq.data() + i * h, da.data(), G(bl.q_w),
                                     G(bl.q_b));
            kernels::affine_backward(sc.at(bl.k_w), h, h, c.a1.data(), dk.data() + i * h, da.data(), G(bl.k_w),
                                     G(bl.k_b));
            kernels::affine_backward(sc.at(bl.v_w), h, h, c.a1.data(), dv.data() + i * h, da.data(), G(bl.v_w),
                                     G(bl.v_b));
            dx[i] = dmid1[i];
            kernels::layer_norm_backward(da.data(), c.xhat1.data(), c.rstd1, sc.at(bl.ln1_g), h, dx[i].data(),
                                         G(bl.ln1_g), G(bl.ln1_b));
        }
    }

    for (std::size_t i = 0; i < M; ++i) {
        T* te = G(lay.tok_emb) + rows[i].token * h;
        T* pe = G(lay.pos_emb) + rows[i].position * h;
        for (std::size_t j = 0; j < h; ++j) {
            te[j] += dx[i][j];
            pe[j] += dx[i][j];
        }
    }

    // Context projections.
    std::vector<T> dproj(ctx.length * h, T(0));
    for (std::size_t bi = 0; bi < s.blocks; ++bi) {
        const auto& bl = lay.blocks[bi];
        for (std::size_t j = 0; j < ctx.length; ++j) {
            kernels::affine_backward(sc.at(bl.ck_w), h, h, ctx.projected.data() + j * h, dctx_k[bi].data() + j * h,
                                     dproj.data() + j * h, G(bl.ck_w), G(bl.ck_b));
            kernels::affine_backward(sc.at(bl.cv_w), h, h, ctx.projected.data() + j * h, dctx_v[bi].data() + j * h,
                                     dproj.data() + j * h, G(bl.cv_w), G(bl.cv_b));
        }
    }
    std::vector<T> dz(h);
    for (std::size_t j = 0; j < ctx.length; ++j) {
        std::fill(dz.begin(), dz.end(), T(0));
        kernels::layer_norm_backward(dproj.data() + j * h, ctx.xhat.data() + j * h, ctx.rstd[j], sc.at(lay.ctx_ln_g), h,
                                     dz.data(), G(lay.ctx_ln_g), G(lay.ctx_ln_b));
        kernels::affine_backward<T>(sc.at(lay.cond_w), h, s.cond_dim, ctx.input.data() + j * s.cond_dim, dz.data(),
                                    nullptr, G(lay.cond_w), G(lay.cond_b));
    }
    return nll;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// Central-difference check of sequence_nll_backward over every parameter.
/// f64 mode: analytic and numeric in 64-bit, step 1e-5. f32 mode: analytic
/// gradient from the 32-bit path, differences of the 64-bit loss evaluated on
/// the perturbed 32-bit parameters, step 1e-3.
template <class T>
GradCheckReport grad_check(const ArScorer<T>& scorer, std::span<const float> cond, std::size_t cond_len,
                           const Identifier& target, Precision mode) {
    const double h = finite_difference_step(mode);
    std::vector<double> analytic(scorer.parameter_count(), 0.0);
    ArScorer<double> work = scorer.template cast<double>();
    std::vector<double> cond64(cond.begin(), cond.end());
    if (mode == Precision::f64) {
        sequence_nll_backward<double>(work, cond64, cond_len, target, analytic, 1.0);
    } else {
        auto s32 = scorer.template cast<float>();
        for (std::size_t i = 0; i < work.theta().size(); ++i) work.theta()[i] = static_cast<double>(s32.theta()[i]);
        std::vector<float> cond32(cond.begin(), cond.end());
        std::vector<float> g32(s32.parameter_count(), 0.0f);
        sequence_nll_backward<float>(s32, cond32, cond_len, target, g32, 1.0f);
        analytic.assign(g32.begin(), g32.end());
    }
    auto round = [&](double v) { return mode == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v; };
    auto loss = [&] {
        auto ctx = condition<double, double>(work, cond64, cond_len);
        return sequence_nll(work, ctx, target);
    };
    GradCheckReport report;
    auto theta = work.theta();
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double saved = theta[i];
        const double up = round(saved + h), down = round(saved - h);
        theta[i] = up;
        const double lp = loss();
        theta[i] = down;
        const double lm = loss();
        theta[i] = saved;
        report.record(analytic[i], (lp - lm) / (up - down), i, scorer.layout().name_of(i));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class PairRule { same_class, identity };

struct ArTrainConfig {
    std::size_t epochs = 30;
    double learning_rate = 1e-3;
    double weight_decay = 0.05;
    std::size_t batch = 32;
    std::uint64_t seed = 0;
    PairRule pair_rule = PairRule::same_class;
    double init_std = 0.02;
};

/// Database rows whose identifiers are generation targets, and the rows used as queries.
struct ArTrainData {
    const EmbeddingMatrix* embeddings = nullptr;
    std::span<const Label> labels;            ///< per embedding row
    std::vector<std::size_t> target_rows;     ///< rows owning `target_ids`
    std::vector<Identifier> target_ids;
    std::vector<std::size_t> source_rows;     ///< query side x_1 of each pair
};

struct ArTrainResult {
    ArScorer<float> scorer;
    std::vector<double> epoch_nll;  ///< mean sequence NLL over each epoch's sampled pairs
    std::size_t self_fallbacks = 0;
    std::size_t skipped_sources = 0;
};

/// Teacher-forced training on (x_1, identifier of x_2) pairs. Same-class pairs
/// resample x_2 uniformly among same-label target rows every epoch.
inline ArTrainResult train_ar(const ArTrainData& data, ArShape shape, const ArTrainConfig& cfg) {
    if (data.embeddings == nullptr) throw std::invalid_argument("train_ar: no embeddings");
    if (data.source_rows.empty() || data.target_rows.empty()) throw DataError("train_ar: empty training split");
    if (data.target_rows.size() != data.target_ids.size())
        throw std::invalid_argument("train_ar: target rows and identifiers differ in length");
    shape.cond_dim = data.embeddings->dim();
    shape.validate();
    for (std::size_t i = 0; i < data.target_ids.size(); ++i)
        shape.vocabulary().check(data.target_ids[i], "train_ar: target " + std::to_string(i));

    ArTrainResult out{ArScorer<float>(shape, cfg.seed, cfg.init_std), {}, 0, 0};
    auto& sc = out.scorer;
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

    // Target indices by label, and each source's own target index (if it is one).
    std::map<Label, std::vector<std::size_t>> by_label;
    std::map<std::size_t, std::size_t> target_of_row;
    for (std::size_t t = 0; t < data.target_rows.size(); ++t) {
        by_label[data.labels[data.target_rows[t]]].push_back(t);
        target_of_row[data.target_rows[t]] = t;
    }

    AdamW<float> opt(sc.parameter_count(), {cfg.learning_rate, 0.9, 0.96, 1e-8, cfg.weight_decay}, sc.decay_mask());
    std::vector<float> grad(sc.parameter_count());
    const std::size_t steps_per_epoch = (data.source_rows.size() + cfg.batch - 1) / cfg.batch;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (source row, target index)
        pairs.reserve(data.source_rows.size());
        for (auto src : data.source_rows) {
            if (cfg.pair_rule == PairRule::identity) {
                auto it = target_of_row.find(src);
                if (it == target_of_row.end()) {
                    if (epoch == 0) ++out.skipped_sources;
                    continue;
                }
                pairs.emplace_back(src, it->second);
                continue;
            }
            auto it = by_label.find(data.labels[src]);
            if (it == by_label.end() || it->second.empty()) {
                auto self = target_of_row.find(src);
                if (self != target_of_row.end()) {
                    pairs.emplace_back(src, self->second);
                    if (epoch == 0) ++out.self_fallbacks;
                } else if (epoch == 0) {
                    ++out.skipped_sources;
                }
                continue;
            }
            std::uniform_int_distribution<std::size_t> pick(0, it->second.size() - 1);
            pairs.emplace_back(src, it->second[pick(rng)]);
        }
        if (epoch == 0 && (out.self_fallbacks > 0 || out.skipped_sources > 0))
            log(LogLevel::info, "train_ar: " + std::to_string(out.self_fallbacks) + " self-paired and " +
                                    std::to_string(out.skipped_sources) + " skipped source row(s)");
        if (pairs.empty()) throw DataError("train_ar: no training pairs");
        std::shuffle(pairs.begin(), pairs.end(), rng);

        double epoch_sum = 0.0;
        for (std::size_t b0 = 0; b0 < pairs.size(); b0 += cfg.batch) {
            const std::size_t b1 = std::min(pairs.size(), b0 + cfg.batch);
            std::fill(grad.begin(), grad.end(), 0.0f);
            const float scale = 1.0f / static_cast<float>(b1 - b0);
            for (std::size_t k = b0; k < b1; ++k) {
                auto cond = data.embeddings->row(pairs[k].first);
                epoch_sum += sequence_nll_backward<float>(sc, cond, 1, data.target_ids[pairs[k].second], grad, scale);
            }
            opt.step(sc.theta(), grad, cosine_lr(cfg.learning_rate, step++, total_steps));
        }
        out.epoch_nll.push_back(epoch_sum / static_cast<double>(pairs.size()));
        log(LogLevel::debug, "train_ar: epoch " + std::to_string(epoch) + " nll " + std::to_string(out.epoch_nll.back()));
    }
    return out;
}

}  // namespace irgen
