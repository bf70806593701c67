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

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace irgen;
namespace fs = std::filesystem;
using Catch::Matchers::ContainsSubstring;

namespace {

/// Scratch directory removed on scope exit.
struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("irgen_test_io_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

/// Independent EMB1 reader: raw byte copies on a little-endian host.
std::vector<float> oracle_read(const std::string& bytes, std::uint32_t& n, std::uint32_t& d) {
    static_assert(std::endian::native == std::endian::little);
    std::memcpy(&n, bytes.data() + 4, 4);
    std::memcpy(&d, bytes.data() + 8, 4);
    std::vector<float> out(std::size_t{n} * d);
    std::memcpy(out.data(), bytes.data() + 12, out.size() * 4);
    return out;
}

/// Position-weighted byte checksum.
std::uint64_t checksum(std::string_view bytes) {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < bytes.size(); ++i) s += (i + 1) * static_cast<unsigned char>(bytes[i]);
    return s;
}

DataError decode_error(std::string_view bytes) {
    try {
        (void)decode_emb(bytes);
    } catch (const DataError& e) {
        return e;
    }
    FAIL("decode_emb accepted malformed input");
    return DataError("unreachable");
}

}  // namespace

TEST_CASE("EMB1 round-trips and matches an independent reader", "[io]") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto m = test::random_matrix(1 + seed % 9, 1 + seed % 5, seed);
        const auto bytes = encode_emb(m);
        CHECK(bytes.size() == 12 + 4 * m.data().size());
        CHECK(bytes.substr(0, 4) == "EMB1");
        std::uint32_t n = 0, d = 0;
        auto raw = oracle_read(bytes, n, d);
        CHECK(n == m.rows());
        CHECK(d == m.dim());
        CHECK(std::equal(raw.begin(), raw.end(), m.data().begin(), m.data().end()));
        auto back = decode_emb(bytes);
        CHECK(back == m);
        CHECK(checksum(encode_emb(back)) == checksum(bytes));
    }
}

TEST_CASE("EMB1 known bytes", "[io]") {
    EmbeddingMatrix m(1, 2, {1.0f, -2.0f});
    const std::string want("EMB1\x01\x00\x00\x00\x02\x00\x00\x00\x00\x00\x80\x3f\x00\x00\x00\xc0", 20);
    CHECK(encode_emb(m) == want);
}

TEST_CASE("EMB1 rejects malformed files with byte offsets", "[io]") {
    auto m = test::random_matrix(3, 4, 1);
    const auto good = encode_emb(m);

    auto truncated = decode_error(std::string_view(good).substr(0, good.size() - 3));
    CHECK_THAT(std::string(truncated.what()), ContainsSubstring("expected 48 bytes, found 45"));
    CHECK(truncated.byte_offset() == 12u);

    auto magic = decode_error("EMB2" + good.substr(4));
    CHECK_THAT(std::string(magic.what()), ContainsSubstring("bad magic"));
    CHECK(magic.byte_offset() == 0u);

    auto header = decode_error(good.substr(0, 7));
    CHECK_THAT(std::string(header.what()), ContainsSubstring("truncated"));

    std::string nan = good;
    const float q = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(nan.data() + 12 + 4 * 6, &q, 4);  // row 1, column 2
    auto bad = decode_error(nan);
    CHECK_THAT(std::string(bad.what()), ContainsSubstring("row 1, column 2"));
    CHECK(bad.byte_offset() == 36u);

    std::string zero = good;
    std::memset(zero.data() + 4, 0, 4);
    CHECK_THROWS_AS(decode_emb(zero), DataError);
}

TEST_CASE("dataset files round-trip and report bad lines", "[io]") {
    TempDir tmp;
    auto ds = test::axis_blobs(3, 10, 4, 0.2, 1);
    save_dataset(tmp.path / "e.emb", tmp.path / "l.txt", tmp.path / "s.txt", ds);
    auto back = load_dataset(tmp.path / "e.emb", tmp.path / "l.txt", tmp.path / "s.txt");
    CHECK(back.embeddings == ds.embeddings);
    CHECK(back.labels == ds.labels);
    CHECK(back.splits == ds.splits);

    std::ofstream(tmp.path / "bad_labels.txt") << "0\n1\nx\n";
    CHECK_THROWS_WITH(load_labels(tmp.path / "bad_labels.txt"), ContainsSubstring("bad_labels.txt:3"));
    std::ofstream(tmp.path / "bad_splits.txt") << "train\nvalid\n";
    CHECK_THROWS_WITH(load_splits(tmp.path / "bad_splits.txt"), ContainsSubstring("bad_splits.txt:2"));
    std::ofstream(tmp.path / "short.txt") << "0\n1\n";
    CHECK_THROWS_AS(load_dataset(tmp.path / "e.emb", tmp.path / "short.txt", tmp.path / "s.txt"), DataError);
    CHECK_THROWS_AS(load_emb(tmp.path / "missing.emb"), DataError);
}

TEST_CASE("tensor bundles round-trip every dtype", "[io]") {
    TensorBundle b;
    b.put<float>("a", {1.5f, -2.0f, 3.0f, 4.0f}, {2, 2});
    b.put<double>("b", {0.1, 1e300});
    b.put<std::uint8_t>("c", {0, 255});
    b.put<std::uint32_t>("d", {7});
    b.put<std::uint64_t>("e", {1ULL << 40});
    auto back = TensorBundle::decode(b.encode());
    CHECK(back == b);
    CHECK(back.scalar("e") == (1ULL << 40));
    CHECK(back.get("a").dims == std::vector<std::uint64_t>{2, 2});
    CHECK_THROWS_AS(back.values<float>("b"), DataError);
    CHECK_THROWS_AS(back.get("zz"), DataError);
    CHECK_THROWS_AS(b.put<float>("bad", {1, 2, 3}, {2, 2}), std::invalid_argument);

    const auto bytes = b.encode();
    CHECK_THROWS_AS(TensorBundle::decode(bytes.substr(0, bytes.size() - 1)), DataError);
    CHECK_THROWS_AS(TensorBundle::decode(bytes + "x"), DataError);
    CHECK_THROWS_AS(TensorBundle::decode("IRT0" + bytes.substr(4)), DataError);
}

TEST_CASE("model artifacts round-trip through bundles", "[io]") {
    TempDir tmp;
    auto ds = test::axis_blobs(3, 20, 8, 0.2, 2);
    TokenizerConfig tc;
    tc.M = 2;
    tc.L = 4;
    tc.epochs = 1;
    tc.batch = 16;
    auto tok = train_tokenizer(ds, tc).model;
    TensorBundle tb;
    put_tokenizer(tb, tok);
    tb.save(tmp.path / "tok.irt");
    auto tok2 = get_tokenizer(TensorBundle::load(tmp.path / "tok.irt"));
    CHECK(tok2.codebooks == tok.codebooks);
    for (std::size_t r = 0; r < ds.size(); ++r) CHECK(tok2.encode(ds.embeddings.row(r)) == tok.encode(ds.embeddings.row(r)));

    std::vector<std::size_t> rows{4, 9, 2};
    std::vector<Identifier> ids{Identifier{0, 3}, Identifier{1, 1}, Identifier{3, 0}};
    TensorBundle ib;
    put_identifiers(ib, rows, ids, {2, 4});
    auto table = get_identifiers(TensorBundle::decode(ib.encode()));
    CHECK(table.rows == rows);
    CHECK(table.ids == ids);
    CHECK((table.vocab.M == 2 && table.vocab.L == 4));
    CHECK_THROWS(put_identifiers(ib, rows, std::vector<Identifier>{Identifier{0, 4}, ids[1], ids[2]}, {2, 4}));

    ArScorer<float> sc({.M = 2, .L = 4, .cond_dim = 8, .hidden = 8, .blocks = 1, .heads = 2, .ffn_mult = 2}, 3);
    TensorBundle sb;
    put_scorer(sb, sc);
    CHECK(get_scorer(TensorBundle::decode(sb.encode())) == sc);

    auto idx = build_ivfpq(ds.embeddings, 3, 2, 5, 1);
    TensorBundle vb;
    put_ivfpq(vb, idx);
    CHECK(get_ivfpq(TensorBundle::decode(vb.encode())) == idx);
}

TEST_CASE("synthetic data with zero spread sits on the class centres", "[io][synthetic]") {
    auto ds = make_synthetic(5, 10, 6, 0.0, 3);
    CHECK(ds.size() == 50);
    CHECK(ds.num_classes == 5);
    for (std::size_t c = 0; c < 5; ++c) {
        auto first = ds.embeddings.row(c * 10);
        double norm = 0;
        for (float v : first) norm += double(v) * v;
        CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-6);
        for (std::size_t i = 1; i < 10; ++i) {
            auto row = ds.embeddings.row(c * 10 + i);
            CHECK(std::equal(row.begin(), row.end(), first.begin()));
        }
    }
    // Per class: 7 train, 2 gallery, 1 query.
    for (std::size_t c = 0; c < 5; ++c) {
        std::size_t counts[3] = {0, 0, 0};
        for (std::size_t i = 0; i < 10; ++i) ++counts[static_cast<int>(ds.splits[c * 10 + i])];
        CHECK(counts[static_cast<int>(Split::train)] == 7);
        CHECK(counts[static_cast<int>(Split::gallery)] == 2);
        CHECK(counts[static_cast<int>(Split::query)] == 1);
    }
}

TEST_CASE("zero-spread blobs give perfect exact-scan precision", "[io][synthetic]") {
    auto ds = make_synthetic(6, 50, 8, 0.0, 4);
    EvalSettings s;
    s.ks = {1, 5, 10};  // per_class * 0.2 = 10 gallery rows per class
    s.mrr_ks = {1};
    s.threads = 1;
    auto ev = evaluate_linear_scan(ds, ds.rows_of(Split::gallery), s);
    CHECK(ev.metrics.precision == std::vector<double>{1.0, 1.0, 1.0});
}

TEST_CASE("synthetic data is deterministic under a seed", "[io][synthetic]") {
    auto a = make_synthetic(4, 12, 5, 0.3, 9), b = make_synthetic(4, 12, 5, 0.3, 9);
    CHECK(a.embeddings == b.embeddings);
    CHECK(a.splits == b.splits);
    CHECK(!(make_synthetic(4, 12, 5, 0.3, 10).embeddings == a.embeddings));
    CHECK_THROWS_AS(make_synthetic(0, 12, 5, 0.3, 9), std::invalid_argument);
    CHECK_THROWS_AS(make_synthetic(2, 12, 5, -1.0, 9), std::invalid_argument);
}

TEST_CASE("tight synthetic clusters are separable by a linear scan", "[io][synthetic]") {
    auto ds = make_synthetic(20, 100, 32, 0.1, 0);
    EvalSettings s;
    s.ks = {1};
    s.mrr_ks = {1};
    s.threads = 1;
    auto ev = evaluate_linear_scan(ds, ds.rows_of(Split::gallery), s);
    CHECK(ev.metrics.precision[0] >= 0.95);
}

TEST_CASE("result and loss reports", "[io]") {
    std::vector<RetrievalResult> res(1);
    res[0].hits = {{1, -0.5, {}}, {0, -1.0, {}}};
    const std::vector<std::size_t> qids{42}, row_map{10, 11};
    CHECK(results_tsv(res, qids, row_map) == "query_id\trank\trow\tscore\n42\t1\t11\t-0.5\n42\t2\t10\t-1\n");
    CHECK(loss_csv(std::vector<double>{2.5, 1.25}) == "epoch,mean_nll\n0,2.5\n1,1.25\n");
}
