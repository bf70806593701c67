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


#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace irgen;

namespace {

// Naive per-level argmin written independently of nearest_centroid.
std::vector<Token> oracle_tokens(const CodebookStack& s, std::span<const float> f) {
    std::vector<double> r(f.begin(), f.end());
    std::vector<Token> out;
    for (std::size_t m = 0; m < s.M; ++m) {
        std::size_t best = 0;
        double best_d = 0;
        for (std::size_t l = 0; l < s.L; ++l) {
            double dist = 0;
            for (std::size_t j = 0; j < s.d; ++j) {
                const double diff = static_cast<double>(static_cast<float>(r[j])) - s.books[(m * s.L + l) * s.d + j];
                dist += diff * diff;
            }
            if (l == 0 || dist < best_d) best = l, best_d = dist;
        }
        out.push_back(static_cast<Token>(best));
        for (std::size_t j = 0; j < s.d; ++j)
            r[j] = static_cast<float>(static_cast<float>(r[j]) - s.books[(m * s.L + best) * s.d + j]);
    }
    return out;
}

BasicSemanticHead<double> random_head(std::size_t C, std::size_t d, std::uint64_t seed) {
    BasicSemanticHead<double> h(C, d);
    auto w = test::gaussian(C * d + C, seed, 0.5);
    for (std::size_t i = 0; i < C * d; ++i) h.weight[i] = w[i];
    for (std::size_t c = 0; c < C; ++c) h.bias[c] = w[C * d + c];
    return h;
}

}  // namespace

TEST_CASE("rq_encode recovers an exactly representable vector", "[tokenizer]") {
    const std::vector<float> f{0.5f, -1.25f, 2.0f};
    CodebookStack s(3, 2, 3);
    std::copy(f.begin(), f.end(), s.centroid(0, 1).begin());
    s.centroid(0, 0)[0] = 9.0f;
    for (std::size_t m = 1; m < 3; ++m) std::fill(s.centroid(m, 1).begin(), s.centroid(m, 1).end(), 4.0f);
    auto enc = rq_encode<float>(s, f);
    CHECK(enc.id == Identifier{1, 0, 0});
    for (std::size_t m = 0; m < 3; ++m)
        for (float v : enc.residual(m)) CHECK(v == 0.0f);
    CHECK(rq_decode_prefix<float>(s, enc.id.tokens) == f);
}

TEST_CASE("rq_encode picks the nearer of two centroids", "[tokenizer]") {
    CodebookStack s(1, 2, 2, {0, 0, 1, 0});
    const std::vector<float> f{0.9f, 0.0f};
    auto enc = rq_encode<float>(s, f);
    CHECK(enc.id == Identifier{1});
    CHECK(enc.residual(0)[0] == Catch::Approx(-0.1).epsilon(1e-6));
    CHECK(enc.residual(0)[1] == 0.0f);
}

TEST_CASE("rq_encode ties resolve to the lowest index", "[tokenizer]") {
    CodebookStack s(1, 3, 1, {1, -1, 1});
    const std::vector<float> f{0.0f};
    CHECK(rq_encode<float>(s, f).id == Identifier{0});
}

TEST_CASE("rq_encode matches a brute-force argmin per level", "[tokenizer]") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        auto s = test::random_stack(3, 8, 4, seed);
        auto f = test::gaussian(4, 1000 + seed);
        CHECK(rq_encode<float>(s, f).id.tokens == oracle_tokens(s, f));
    }
}

TEST_CASE("rq_encode rejects a dimension mismatch", "[tokenizer]") {
    auto s = test::random_stack(2, 4, 3, 1);
    std::vector<float> f(4, 0.0f);
    CHECK_THROWS_AS(rq_encode<float>(s, f), std::invalid_argument);
    CHECK_THROWS_AS(rq_decode_prefix<float>(s, std::vector<Token>{7}), std::out_of_range);
}

TEST_CASE("decode of a length-1 prefix is the first centroid", "[tokenizer]") {
    auto s = test::random_stack(3, 5, 4, 2);
    auto c = s.centroid(0, 3);
    CHECK(rq_decode_prefix<float>(s, std::vector<Token>{3}) == std::vector<float>(c.begin(), c.end()));
}

TEST_CASE("exact decomposition, argmin optimality and telescoping", "[tokenizer][property]") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t M = 1 + rng() % 4, L = 2 + rng() % 9, d = 1 + rng() % 6;
        auto s = test::random_stack(M, L, d, rng(), 0.5);
        // Level entries include the zero vector so telescoping applies.
        for (std::size_t m = 0; m < M; ++m) std::fill(s.centroid(m, 0).begin(), s.centroid(m, 0).end(), 0.0f);
        auto f = test::gaussian(d, rng());
        auto enc = rq_encode<float>(s, f);
        auto recon = rq_decode_prefix<float>(s, enc.id.tokens);
        double err = 0, norm = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = static_cast<double>(f[j]) - (static_cast<double>(recon[j]) + enc.residual(M - 1)[j]);
            err += diff * diff;
            norm += static_cast<double>(f[j]) * f[j];
        }
        CHECK(std::sqrt(err) <= 1e-5 * std::max(std::sqrt(norm), 1e-12));

        std::vector<float> prev(f.begin(), f.end());
        for (std::size_t m = 0; m < M; ++m) {
            const double chosen = squared_distance<float>(prev, s.centroid(m, enc.id[m]));
            for (std::size_t l = 0; l < L; ++l) CHECK(chosen <= squared_distance<float>(prev, s.centroid(m, l)));
            const std::vector<float> zero(d, 0.0f);
            CHECK(squared_distance<float>(enc.residual(m), zero) <= squared_distance<float>(prev, zero) + 1e-9);
            prev.assign(enc.residual(m).begin(), enc.residual(m).end());
        }
    }
}

TEST_CASE("tokenizer_loss with zero weights is plain cross-entropy", "[tokenizer][loss]") {
    auto s = test::random_stack(3, 4, 5, 4).cast<double>();
    auto h = random_head(3, 5, 5);
    auto f64 = test::gaussian(5, 6);
    std::vector<double> f(f64.begin(), f64.end());
    auto loss = tokenizer_loss<double>(s, h, f, 2, 0.0, 0.0);
    auto logits = h.logits(f);
    double mx = *std::max_element(logits.begin(), logits.end()), z = 0;
    for (double v : logits) z += std::exp(v - mx);
    CHECK(loss.total == Catch::Approx(mx + std::log(z) - logits[2]).epsilon(1e-12));
    CHECK_THROWS_AS(tokenizer_loss<double>(s, h, f, 3, 0.0, 0.0), std::invalid_argument);
}

TEST_CASE("zero head weights give ln 2 for every CE term", "[tokenizer][loss]") {
    auto s = test::random_stack(4, 3, 2, 7);
    SemanticHead h(2, 2);
    auto f = test::gaussian(2, 8);
    auto loss = tokenizer_loss<float>(s, h, f, 1, 1.0, 0.25);
    CHECK(loss.ce_feature == Catch::Approx(std::log(2.0)));
    for (double ce : loss.ce_recon) CHECK(ce == Catch::Approx(std::log(2.0)));
}

TEST_CASE("commitment term measures the distance to each partial reconstruction", "[tokenizer][loss]") {
    auto s = test::random_stack(3, 4, 3, 9).cast<double>();
    auto h = random_head(2, 3, 10);
    std::vector<double> f{0.3, -0.2, 0.9};
    auto loss = tokenizer_loss<double>(s, h, f, 0, 1.0, 0.25);
    auto enc = rq_encode<double>(s, f);
    for (std::size_t m = 0; m < 3; ++m) {
        auto recon = rq_decode_prefix<double>(s, std::span<const Token>(enc.id.tokens).first(m + 1));
        CHECK(loss.commit[m] == Catch::Approx(squared_distance<double>(f, recon)).epsilon(1e-12));
    }
}

TEST_CASE("straight-through gradient equals the head gradient at the reconstruction", "[tokenizer][loss]") {
    auto s = test::random_stack(3, 4, 5, 11).cast<double>();
    auto h = random_head(4, 5, 12);
    auto fv = test::gaussian(5, 13);
    std::vector<double> f(fv.begin(), fv.end());
    auto g = make_tokenizer_gradients(s, h);
    tokenizer_loss<double>(s, h, f, 1, 1.0, 0.25, &g);
    auto enc = rq_encode<double>(s, f);
    for (std::size_t m = 0; m < 3; ++m) {
        auto z = rq_decode_prefix<double>(s, std::span<const Token>(enc.id.tokens).first(m + 1));
        // dCE/dz = W^T (softmax(Wz + b) - onehot).
        auto logits = h.logits(z);
        double mx = *std::max_element(logits.begin(), logits.end()), sum = 0;
        for (double v : logits) sum += std::exp(v - mx);
        std::vector<double> oracle(5, 0.0);
        for (std::size_t c = 0; c < 4; ++c) {
            const double p = std::exp(logits[c] - mx) / sum - (c == 1 ? 1.0 : 0.0);
            for (std::size_t j = 0; j < 5; ++j) oracle[j] += h.weight[c * 5 + j] * p;
        }
        for (std::size_t j = 0; j < 5; ++j) CHECK(g.at_recon[m][j] == Catch::Approx(oracle[j]).margin(1e-14));
    }
}

TEST_CASE("tokenizer gradients match central differences", "[tokenizer][gradcheck]") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto s = test::random_stack(3, 4, 5, 20 + seed).cast<double>();
        auto h = random_head(4, 5, 30 + seed);
        auto fv = test::gaussian(5, 40 + seed);
        std::vector<double> f(fv.begin(), fv.end());
        auto r64 = tokenizer_grad_check(s, h, f, seed % 4, 1.0, 0.25, Precision::f64);
        auto r32 = tokenizer_grad_check(s, h, f, seed % 4, 1.0, 0.25, Precision::f32);
        INFO("worst f64 " << r64.worst_name << "[" << r64.worst_index << "] f32 " << r32.worst_name);
        CHECK(r64.max_relative_error <= 1e-5);
        CHECK(r32.max_relative_error <= 1e-3);
        CHECK(r64.parameters_checked == h.weight.size() + h.bias.size() + f.size() + s.books.size());
    }
}

TEST_CASE("training on L distinct repeated vectors leaves zero residual", "[tokenizer][train]") {
    const std::size_t L = 4, d = 3;
    auto centres = test::gaussian(L * d, 50, 2.0);
    std::vector<float> data;
    std::vector<Label> labels;
    std::vector<Split> splits;
    for (std::size_t i = 0; i < 40; ++i) {
        data.insert(data.end(), centres.begin() + static_cast<std::ptrdiff_t>((i % L) * d),
                    centres.begin() + static_cast<std::ptrdiff_t>((i % L + 1) * d));
        labels.push_back(static_cast<Label>(i % 2));
        splits.push_back(Split::train);
    }
    LabeledDataset ds(EmbeddingMatrix(40, d, data), labels, splits, 2);
    TokenizerConfig cfg{.M = 1, .L = L, .epochs = 3, .encoder = EncoderKind::identity, .seed = 1};
    auto trained = train_tokenizer(ds, cfg);
    for (std::size_t i = 0; i < 40; ++i) {
        auto enc = rq_encode<float>(trained.model.codebooks, ds.embeddings.row(i));
        const std::vector<float> zero(d, 0.0f);
        const double rel = std::sqrt(squared_distance<float>(enc.residual(0), zero) /
                                     squared_distance<float>(ds.embeddings.row(i), zero));
        CHECK(rel < 1e-4);
    }
}

TEST_CASE("frozen codebooks with zero weights reduce to logistic regression", "[tokenizer][train]") {
    auto ds = test::axis_blobs(3, 30, 3, 0.2, 51);
    for (auto& s : ds.splits) s = Split::train;
    TokenizerConfig cfg{.M = 2, .L = 4, .lambda1 = 0.0, .lambda2 = 0.0, .epochs = 15, .learning_rate = 1e-2,
                        .weight_decay = 0.0, .batch = 90, .refresh_codebooks = false,
                        .encoder = EncoderKind::identity, .seed = 2};
    auto trained = train_tokenizer(ds, cfg);
    const auto& loss = trained.log.epoch_loss;
    REQUIRE(loss.size() == 15);
    for (std::size_t e = 1; e < loss.size(); ++e) CHECK(loss[e] <= loss[e - 1]);
    CHECK(loss.back() < loss.front());
}

TEST_CASE("level-1 tokens on the blob set are purer than random assignment", "[tokenizer][train]") {
    auto ds = make_synthetic(20, 100, 32, 0.24, 0);
    TokenizerConfig cfg{.M = 4, .L = 16, .epochs = 5, .seed = 0};
    auto trained = train_tokenizer(ds, cfg);
    const auto rows = ds.rows_of(Split::train);
    // Majority-label purity from a per-token label histogram.
    auto purity = [&](const std::vector<Token>& tokens) {
        std::map<Token, std::map<Label, std::size_t>> hist;
        for (std::size_t i = 0; i < rows.size(); ++i) ++hist[tokens[i]][ds.labels[rows[i]]];
        std::size_t majority = 0;
        for (const auto& [t, h] : hist) {
            std::size_t best = 0;
            for (const auto& [l, c] : h) best = std::max(best, c);
            majority += best;
        }
        return static_cast<double>(majority) / static_cast<double>(rows.size());
    };
    std::vector<Token> semantic, random;
    std::mt19937_64 rng(9);
    for (auto r : rows) {
        semantic.push_back(trained.model.encode(ds.embeddings.row(r))[0]);
        random.push_back(static_cast<Token>(rng() % 16));
    }
    CHECK(purity(semantic) > purity(random));
    for (double v : trained.log.epoch_loss) CHECK(std::isfinite(v));
}

TEST_CASE("tokenizer training is deterministic under a seed", "[tokenizer][train]") {
    auto ds = test::axis_blobs(4, 25, 4, 0.3, 52);
    TokenizerConfig cfg{.M = 2, .L = 4, .epochs = 2, .seed = 17};
    auto a = train_tokenizer(ds, cfg);
    auto b = train_tokenizer(ds, cfg);
    CHECK(a.model.codebooks == b.model.codebooks);
    CHECK(a.model.head == b.model.head);
    CHECK(a.model.encoder == b.model.encoder);
}

TEST_CASE("TokenizerConfig validation", "[tokenizer]") {
    CHECK_THROWS_AS((TokenizerConfig{.M = 0}.validate()), ConfigError);
    CHECK_THROWS_AS((TokenizerConfig{.L = 1}.validate()), ConfigError);
    CHECK_THROWS_AS((TokenizerConfig{.lambda2 = -1}.validate()), ConfigError);
}
