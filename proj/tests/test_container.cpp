#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <stdexcept>

#include "json.hpp"

#include "gradiend/container.hpp"
#include "gradiend/rng.hpp"

using namespace gradiend;

namespace {

NamedTensors sample_entries() {
    Rng rng(7);
    NamedTensors entries;
    std::vector<float> big(257);
    for (auto& v : big) v = static_cast<float>(rng.normal());
    big[0] = 0.0f;
    big[1] = -0.0f;
    big[2] = 1e-38f;
    entries.emplace_back("weights", Tensor({257}, std::move(big)));
    entries.emplace_back("matrix", Tensor({3, 4}, std::vector<float>(12, 1.5f)));
    entries.emplace_back("scalar", Tensor::scalar(-2.25f));
    return entries;
}

uint32_t read_u32_le(const std::vector<uint8_t>& b, size_t at) {
    return uint32_t(b[at]) | uint32_t(b[at + 1]) << 8 | uint32_t(b[at + 2]) << 16 |
           uint32_t(b[at + 3]) << 24;
}

} // namespace

TEST_CASE("round trip is bit exact") {
    NamedTensors entries = sample_entries();
    std::vector<uint8_t> bytes = save_container(entries);
    NamedTensors back = load_container(bytes);
    REQUIRE(back.size() == entries.size());
    for (size_t i = 0; i < entries.size(); ++i) {
        CHECK(back[i].first == entries[i].first);
        CHECK(back[i].second.shape == entries[i].second.shape);
        REQUIRE(back[i].second.data.size() == entries[i].second.data.size());
        // bit-level comparison, not value comparison: distinguishes -0.0f
        CHECK(std::memcmp(back[i].second.data.data(), entries[i].second.data.data(),
                          entries[i].second.data.size() * sizeof(float)) == 0);
    }
    // serialization itself is deterministic
    CHECK(save_container(back) == bytes);
}

TEST_CASE("empty entry list round trips") {
    std::vector<uint8_t> bytes = save_container({});
    CHECK(load_container(bytes).empty());
}

TEST_CASE("byte layout readable by an independent reader") {
    NamedTensors entries = sample_entries();
    std::vector<uint8_t> bytes = save_container(entries);

    REQUIRE(bytes.size() > 8);
    CHECK(bytes[0] == 'G');
    CHECK(bytes[1] == 'R');
    CHECK(bytes[2] == 'D');
    CHECK(bytes[3] == '1');
    uint32_t header_len = read_u32_le(bytes, 4);
    REQUIRE(8 + header_len <= bytes.size());

    // Decode with nlohmann::json directly, bypassing load_container.
    nlohmann::json header = nlohmann::json::parse(
        std::string(reinterpret_cast<const char*>(bytes.data()) + 8, header_len));
    CHECK(header.at("version").get<int>() == 1);
    const auto& listed = header.at("entries");
    REQUIRE(listed.size() == entries.size());
    size_t payload_base = 8 + header_len;
    for (size_t i = 0; i < entries.size(); ++i) {
        const auto& e = listed[i];
        CHECK(e.at("name").get<std::string>() == entries[i].first);
        CHECK(e.at("dtype").get<std::string>() == "f32");
        CHECK(e.at("shape").get<std::vector<int>>() == entries[i].second.shape);
        size_t offset = e.at("offset").get<size_t>(); // bytes into the payload
        size_t length = e.at("length").get<size_t>(); // bytes
        REQUIRE(length == entries[i].second.size() * sizeof(float));
        REQUIRE(payload_base + offset + length <= bytes.size());
        for (size_t k = 0; k < length / sizeof(float); ++k) {
            uint32_t word = read_u32_le(bytes, payload_base + offset + 4 * k);
            float value;
            std::memcpy(&value, &word, 4);
            uint32_t expect_bits;
            std::memcpy(&expect_bits, &entries[i].second.data[k], 4);
            CHECK(word == expect_bits);
            (void)value;
        }
    }
}

TEST_CASE("corruption is rejected with distinct causes") {
    std::vector<uint8_t> bytes = save_container(sample_entries());

    SUBCASE("bad magic") {
        bytes[0] = 'X';
        CHECK_THROWS_WITH_AS(load_container(bytes), doctest::Contains("magic"),
                             std::runtime_error);
    }
    SUBCASE("truncated payload") {
        bytes.resize(bytes.size() - 5);
        CHECK_THROWS_AS(load_container(bytes), std::runtime_error);
    }
    SUBCASE("truncated header") {
        bytes.resize(6);
        CHECK_THROWS_AS(load_container(bytes), std::runtime_error);
    }
    SUBCASE("unsupported version") {
        // patch the version field inside the JSON header
        uint32_t header_len = read_u32_le(bytes, 4);
        std::string header(reinterpret_cast<char*>(bytes.data()) + 8, header_len);
        auto pos = header.find("\"version\":1");
        REQUIRE(pos != std::string::npos);
        header[pos + 10] = '9';
        std::memcpy(bytes.data() + 8, header.data(), header_len);
        CHECK_THROWS_WITH_AS(load_container(bytes), doctest::Contains("version"),
                             std::runtime_error);
    }
}

TEST_CASE("duplicate names are rejected on save") {
    NamedTensors entries;
    entries.emplace_back("w", Tensor::scalar(1.0f));
    entries.emplace_back("w", Tensor::scalar(2.0f));
    CHECK_THROWS_AS(save_container(entries), std::invalid_argument);
}

TEST_CASE("file round trip") {
    namespace fs = std::filesystem;
    fs::path path = fs::temp_directory_path() / "grad1_roundtrip_test.grad1";
    NamedTensors entries = sample_entries();
    save_container_file(path.string(), entries);
    NamedTensors back = load_container_file(path.string());
    REQUIRE(back.size() == entries.size());
    CHECK(back[0].second.data == entries[0].second.data);
    fs::remove(path);
    CHECK_THROWS_AS(load_container_file(path.string()), std::runtime_error);
}
