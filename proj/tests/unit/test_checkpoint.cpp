#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "crash/checkpoint_io.hpp"
#include "crash/errors.hpp"
#include "crash/model.hpp"
#include "doctest.h"

using namespace crash;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.vocab_size = 11;
    c.d_model = 6;
    c.n_heads = 3;
    c.n_layers = 2;
    c.d_ff = 10;
    c.max_seq_len = 8;
    return c;
}

std::filesystem::path temp_path(const char* name) {
    return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("fnv1a matches the published test vectors") {
    CHECK(fnv1a_hex("") == "cbf29ce484222325");
    CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
    CHECK(fnv1a_hex("foobar") == "85944171f73967e8");
    const std::uint8_t raw[] = {'f', 'o', 'o', 'b', 'a', 'r'};
    CHECK(fnv1a_hex(raw, 6) == "85944171f73967e8");
}

TEST_CASE("tensor_hash is the hash of the little-endian payload") {
    Mat m(1, 2, {1.5, -3.25});
    std::vector<std::uint8_t> bytes(16);
    std::memcpy(bytes.data(), m.data.data(), 16);
    CHECK(tensor_hash(m) == fnv1a_hex(bytes.data(), bytes.size()));

    Mat other = m;
    other.data[1] = -3.2500001;
    CHECK(tensor_hash(other) != tensor_hash(m));
}

TEST_CASE("serialize/deserialize round trip is byte-identical") {
    Checkpoint ckpt = init_checkpoint(small_config(), 321);
    std::vector<std::uint8_t> bytes = serialize_checkpoint(ckpt);

    Checkpoint back = deserialize_checkpoint(bytes);
    CHECK(back.config == ckpt.config);
    REQUIRE(back.tensors.size() == ckpt.tensors.size());
    for (const auto& [name, mat] : ckpt.tensors) CHECK(back.tensors.at(name) == mat);

    // Re-serializing the loaded model reproduces the original bytes exactly.
    CHECK(serialize_checkpoint(back) == bytes);
}

TEST_CASE("checkpoint bytes start with magic and version") {
    Checkpoint ckpt = init_checkpoint(small_config(), 1);
    std::vector<std::uint8_t> bytes = serialize_checkpoint(ckpt);
    REQUIRE(bytes.size() > 16);
    CHECK(bytes[0] == 'C');
    CHECK(bytes[1] == 'R');
    CHECK(bytes[2] == 'S');
    CHECK(bytes[3] == 'H');
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    CHECK(version == 1);
}

TEST_CASE("deserialize rejects corrupted input") {
    Checkpoint ckpt = init_checkpoint(small_config(), 2);
    std::vector<std::uint8_t> bytes = serialize_checkpoint(ckpt);

    std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + 10);
    CHECK_THROWS_AS(deserialize_checkpoint(truncated), FormatError);

    std::vector<std::uint8_t> short_payload(bytes.begin(), bytes.end() - 8);
    CHECK_THROWS_AS(deserialize_checkpoint(short_payload), FormatError);

    std::vector<std::uint8_t> bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), FormatError);

    std::vector<std::uint8_t> bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_AS(deserialize_checkpoint(bad_version), FormatError);

    std::vector<std::uint8_t> bad_header = bytes;
    bad_header[16] = '!';  // first byte of the JSON header
    CHECK_THROWS_AS(deserialize_checkpoint(bad_header), FormatError);
}

TEST_CASE("save and load through a file") {
    const auto path = temp_path("crash_test_ckpt.bin");
    Checkpoint ckpt = init_checkpoint(small_config(), 17);
    save_checkpoint(ckpt, path.string());
    Checkpoint back = load_checkpoint(path.string());
    CHECK(back.config == ckpt.config);
    CHECK(back.tensors == ckpt.tensors);
    std::filesystem::remove(path);

    CHECK_THROWS_AS(load_checkpoint(path.string()), InputError);
    CHECK_THROWS_AS(save_checkpoint(ckpt, "/nonexistent-dir/x.bin"), InputError);
}

TEST_CASE("config JSON round trip preserves every field") {
    ModelConfig c = small_config();
    c.ln_eps = 3.0000000000000004e-5;  // not representable as a short decimal
    ModelConfig back = config_from_json(config_json(c));
    CHECK(back == c);
    CHECK(back.ln_eps == c.ln_eps);

    CHECK_THROWS_AS(config_from_json("{"), FormatError);
    CHECK_THROWS_AS(config_from_json("{\"vocab_size\": 4}"), FormatError);
}

TEST_CASE("config_hash commits to the canonical JSON") {
    ModelConfig c = small_config();
    CHECK(config_hash(c) == fnv1a_hex(config_json(c)));
    ModelConfig d = c;
    d.n_layers = 3;
    CHECK(config_hash(d) != config_hash(c));
}

}  // TEST_SUITE
