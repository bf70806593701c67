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

#include <filesystem>
#include <fstream>

#include "irgen/config.hpp"

using namespace irgen;
using Catch::Matchers::ContainsSubstring;

TEST_CASE("empty document yields the defaults", "[config]") {
    auto c = parse_config(Json::object());
    CHECK(c.tokenizer.M == 4);
    CHECK(c.tokenizer.L == 16);
    CHECK(c.search.beam_width == 30);
    CHECK(c.eval.ks == std::vector<std::size_t>{1, 10, 20, 30});
    CHECK(c.identifiers.scheme == IdScheme::semantic);
    CHECK(to_json(c) == to_json(RunConfig{}));
}

TEST_CASE("defaults survive a JSON round trip", "[config]") {
    RunConfig c;
    c.tokenizer.M = 6;
    c.search.metric = Metric::cosine;
    c.ar.train.pair_rule = PairRule::identity;
    c.eval.ablation_schemes = {"random"};
    auto back = parse_config(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK(config_hash(back) == config_hash(c));
}

TEST_CASE("unknown keys are rejected with their full path", "[config]") {
    CHECK_THROWS_WITH(parse_config(Json::parse(R"({"search": {"beam": 3}})")),
                      ContainsSubstring("unknown key 'search.beam'"));
    CHECK_THROWS_WITH(parse_config(Json::parse(R"({"serach": {}})")), ContainsSubstring("unknown key 'serach'"));
    CHECK_THROWS_AS(parse_config(Json::parse("[1]")), ConfigError);
}

TEST_CASE("values are type checked", "[config]") {
    CHECK_THROWS_WITH(parse_config(Json::parse(R"({"tokenizer": {"M": "four"}})")),
                      ContainsSubstring("bad value for 'tokenizer.M'"));
    CHECK_THROWS_WITH(parse_config(Json::parse(R"({"tokenizer": {"M": -1}})")),
                      ContainsSubstring("tokenizer.M"));
    CHECK_THROWS_AS(parse_config(Json::parse(R"({"search": {"metric": "manhattan"}})")), ConfigError);
    CHECK_THROWS_AS(parse_config(Json::parse(R"({"identifiers": {"scheme": "lsh"}})")), ConfigError);
    CHECK_THROWS_AS(parse_config(Json::parse(R"({"tokenizer": {"refresh_codebooks": 1}})")), ConfigError);
    CHECK_THROWS_AS(parse_config(Json::parse(R"({"eval": {"ks": [1, "x"]}})")), ConfigError);
}

TEST_CASE("cross-field constraints are validated", "[config]") {
    CHECK_THROWS_WITH(parse_config(Json::parse(R"({"search": {"beam_width": 5, "K": 10}})")),
                      ContainsSubstring("search.K"));
    CHECK_THROWS_AS(parse_config(Json::parse(R"({"eval": {"ks": [40]}})")), ConfigError);
    CHECK_THROWS_AS(parse_config(Json::parse(R"({"ar": {"hidden": 10, "heads": 4}})")), ConfigError);
    CHECK_THROWS_AS(parse_config(Json::parse(R"({"eval": {"holdout_fraction": 1.0}})")), ConfigError);
    CHECK_THROWS_AS(parse_config(Json::parse(R"({"data": {"source": "files"}})")), ConfigError);
    CHECK_THROWS_AS(parse_config(Json::parse(R"({"tokenizer": {"L": 1}})")), ConfigError);
}

TEST_CASE("--set overrides parse JSON values and fall back to strings", "[config]") {
    Json doc = Json::object();
    apply_override(doc, "tokenizer.M=2");
    apply_override(doc, "search.metric=cosine");
    apply_override(doc, "eval.ks=[1,5]");
    apply_override(doc, "search.beam_width=5");
    apply_override(doc, "search.K=5");
    auto c = parse_config(doc);
    CHECK(c.tokenizer.M == 2);
    CHECK(c.search.metric == Metric::cosine);
    CHECK(c.eval.ks == std::vector<std::size_t>{1, 5});
    CHECK_THROWS_AS(apply_override(doc, "nodot=1"), ConfigError);
    CHECK_THROWS_AS(apply_override(doc, "search.K"), ConfigError);
    CHECK_THROWS_AS(apply_override(doc, "search.=1"), ConfigError);
}

TEST_CASE("load_config applies overrides after the file", "[config]") {
    const auto path = std::filesystem::temp_directory_path() / "irgen_test_config.json";
    std::ofstream(path) << R"({"tokenizer": {"M": 3, "L": 8}})";
    const std::vector<std::string> overrides{"tokenizer.L=32"};
    auto c = load_config(path, overrides);
    CHECK(c.tokenizer.M == 3);
    CHECK(c.tokenizer.L == 32);
    std::ofstream(path) << "{ not json";
    CHECK_THROWS_AS(load_config(path), ConfigError);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_config(path), ConfigError);
}

TEST_CASE("config hash tracks content", "[config]") {
    RunConfig a, b;
    CHECK(config_hash(a) == config_hash(b));
    b.data.seed = 1;
    CHECK(config_hash(a) != config_hash(b));
    CHECK(hex64(0) == "0000000000000000");
    CHECK(hex64(0xdeadbeefULL) == "00000000deadbeef");
    CHECK(hex64(config_hash(a)).size() == 16);
}

TEST_CASE("schema lists every section and key with defaults", "[config]") {
    const auto schema = config_schema();
    const auto defaults = to_json(RunConfig{});
    CHECK(schema["additionalProperties"] == false);
    for (const auto& section : config_sections()) {
        REQUIRE(schema["properties"].contains(section));
        const auto& props = schema["properties"][section]["properties"];
        CHECK(props.size() == defaults[section].size());
        for (const auto& [k, v] : defaults[section].items()) CHECK(props[k]["default"] == v);
    }
    CHECK(schema["properties"]["identifiers"]["properties"]["scheme"]["enum"].size() == 3);
}
