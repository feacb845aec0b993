#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "json.hpp"
#include "upcycle/checkpoint.hpp"

using namespace upcycle;

namespace {

TransformerConfig toy_config() {
    TransformerConfig c;
    c.d_model = 32;
    c.n_layers = 4;
    c.n_q_heads = 4;
    c.n_kv_heads = 2;
    c.head_dim = 8;
    c.vocab = 64;
    c.mlp_hidden = 64;
    return c;
}

std::uint64_t header_length(const std::vector<std::uint8_t>& bytes) {
    std::uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= std::uint64_t(bytes[i]) << (8 * i);
    return n;
}

nlohmann::json header_of(const std::vector<std::uint8_t>& bytes) {
    const auto n = header_length(bytes);
    return nlohmann::json::parse(std::string(bytes.begin() + 8, bytes.begin() + 8 + long(n)));
}

std::vector<std::uint8_t> with_header(const std::vector<std::uint8_t>& bytes, const nlohmann::json& header) {
    const auto old = header_length(bytes);
    std::string text = header.dump();
    text.append((8 - text.size() % 8) % 8, ' ');
    std::vector<std::uint8_t> out;
    for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(text.size() >> (8 * i)));
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), bytes.begin() + 8 + long(old), bytes.end());
    return out;
}

}  // namespace

TEST_CASE("toy teacher generation is deterministic") {
    const auto a = gen_toy_teacher(toy_config(), 42);
    const auto b = gen_toy_teacher(toy_config(), 42);
    const auto c = gen_toy_teacher(toy_config(), 43);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    CHECK(a.layers.size() == 4);
    CHECK(a.layers[0].attn.wq.shape() == Shape{32, 32});
    CHECK(a.layers[0].attn.wk.shape() == Shape{16, 32});
    CHECK(a.layers[0].attn.wo.shape() == Shape{32, 32});
    CHECK(a.lm_head.shape() == Shape{64, 32});
    const double s = 1.0 / std::sqrt(32.0);
    for (double v : a.layers[2].mlp.up.values()) CHECK(std::abs(v) <= s);
    for (double v : a.final_norm.values()) CHECK(v == 1.0);
}

TEST_CASE("teacher round-trips bit-exactly") {
    const auto t = gen_toy_teacher(toy_config(), 1);
    const auto path = std::filesystem::temp_directory_path() / "upcycle_roundtrip.ckpt";
    save_teacher(t, path);
    LoadReport report;
    const auto back = load_teacher(path, &report);
    CHECK(back == t);
    CHECK(report.warnings.empty());
    std::filesystem::remove(path);
}

TEST_CASE("container layout") {
    const auto bytes = encode_container(teacher_to_container(gen_toy_teacher(toy_config(), 2)));
    const auto n = header_length(bytes);
    CHECK(n % 8 == 0);
    const auto h = header_of(bytes);
    CHECK(h.contains("__metadata__"));
    const auto& wq = h.at("layers.0.attn.wq");
    CHECK(wq.at("dtype") == "f32");
    CHECK(wq.at("shape") == nlohmann::json::array({32, 32}));
    CHECK(wq.at("byte_length").get<std::size_t>() == 4 * 32 * 32);
    for (auto it = h.begin(); it != h.end(); ++it) {
        if (it.key() == "__metadata__") continue;
        CHECK(it.value().at("byte_offset").get<std::size_t>() % 8 == 0);
    }
    // payload is little-endian binary32
    const auto& emb = h.at("embed");
    float first;
    std::memcpy(&first, bytes.data() + 8 + n + emb.at("byte_offset").get<std::size_t>(), 4);
    CHECK(double(first) == gen_toy_teacher(toy_config(), 2).embed[0]);
}

TEST_CASE("container corruption is reported") {
    const auto good = encode_container(teacher_to_container(gen_toy_teacher(toy_config(), 3)));

    SUBCASE("truncated payload") {
        auto bad = good;
        bad.resize(bad.size() - 100);
        CHECK_THROWS_WITH_AS(decode_container(bad), doctest::Contains("payload shorter than index"),
                             std::runtime_error);
    }
    SUBCASE("malformed header") {
        auto bad = good;
        bad[8] = '#';
        CHECK_THROWS_WITH_AS(decode_container(bad), doctest::Contains("malformed header"), std::runtime_error);
        std::vector<std::uint8_t> tiny(4, 0);
        CHECK_THROWS_WITH_AS(decode_container(tiny), doctest::Contains("malformed header"), std::runtime_error);
    }
    SUBCASE("shape disagrees with byte length") {
        auto h = header_of(good);
        h["embed"]["shape"] = {64, 31};
        CHECK_THROWS_WITH_AS(decode_container(with_header(good, h)), doctest::Contains("byte_length"),
                             std::runtime_error);
    }
    SUBCASE("non-finite payload") {
        auto bad = good;
        const auto h = header_of(good);
        const float nan = std::nanf("");
        std::memcpy(bad.data() + 8 + header_length(good) + h["final_norm"]["byte_offset"].get<std::size_t>(), &nan, 4);
        CHECK_THROWS_WITH_AS(decode_container(bad), doctest::Contains("non-finite"), std::runtime_error);
    }
    SUBCASE("missing tensor") {
        auto c = decode_container(good);
        c.tensors.erase("layers.1.mlp.up");
        CHECK_THROWS_WITH_AS(teacher_from_container(c), doctest::Contains("layers.1.mlp.up"), std::runtime_error);
    }
    SUBCASE("unknown tensor loads with a warning") {
        auto c = decode_container(good);
        c.tensors.emplace("extra.bias", Tensor({3}));
        LoadReport report;
        const auto t = teacher_from_container(decode_container(encode_container(c)), &report);
        CHECK(t == gen_toy_teacher(toy_config(), 3));
        REQUIRE(report.warnings.size() == 1);
        CHECK(report.warnings[0].find("extra.bias") != std::string::npos);
    }
}

TEST_CASE("config json") {
    auto c = toy_config();
    c.qk_norm = true;
    c.rope_theta = 500000.0;
    CHECK(transformer_config_from_json(transformer_config_to_json(c)) == c);
    CHECK_THROWS_AS(transformer_config_from_json("{\"d_model\": 4}"), std::invalid_argument);
    CHECK_THROWS_AS(transformer_config_from_json("not json"), std::invalid_argument);
    auto bad = c;
    bad.n_kv_heads = 3;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("qk-norm teachers carry per-head gains") {
    auto c = toy_config();
    c.qk_norm = true;
    const auto t = gen_toy_teacher(c, 4);
    CHECK(t.layers[0].attn.q_norm.shape() == Shape{8});
    const auto back = teacher_from_container(decode_container(encode_container(teacher_to_container(t))));
    CHECK(back == t);
}
