#include "crash/checkpoint_io.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include "json.hpp"

namespace crash {

namespace {

using nlohmann::json;

void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32_le(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64_le(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

void put_f64_le(std::vector<std::uint8_t>& out, double d) {
    put_u64_le(out, std::bit_cast<std::uint64_t>(d));
}

double get_f64_le(const std::uint8_t* p) { return std::bit_cast<double>(get_u64_le(p)); }

json config_to_obj(const ModelConfig& c) {
    json j;
    j["vocab_size"] = c.vocab_size;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["n_layers"] = c.n_layers;
    j["d_ff"] = c.d_ff;
    j["max_seq_len"] = c.max_seq_len;
    j["ln_eps"] = c.ln_eps;
    return j;
}

ModelConfig config_from_obj(const json& j) {
    ModelConfig c;
    try {
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.d_ff = j.at("d_ff").get<std::size_t>();
        c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
        c.ln_eps = j.at("ln_eps").get<double>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad model config: ") + e.what());
    }
    return c;
}

constexpr char kMagic[4] = {'C', 'R', 'S', 'H'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    check_census(ckpt);
    json header;
    header["config"] = config_to_obj(ckpt.config);
    header["dtype"] = "f64";
    json tensors = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, m] : ckpt.tensors) {  // std::map: lexicographic
        const std::uint64_t length = static_cast<std::uint64_t>(m.size()) * 8;
        tensors.push_back({{"name", name},
                           {"shape", {m.rows, m.cols}},
                           {"offset", offset},
                           {"length", length}});
        offset += length;
    }
    header["tensors"] = std::move(tensors);
    const std::string header_text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(16 + header_text.size() + offset);
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32_le(out, kVersion);
    put_u64_le(out, header_text.size());
    out.insert(out.end(), header_text.begin(), header_text.end());
    for (const auto& [name, m] : ckpt.tensors) {
        (void)name;
        for (double v : m.data) put_f64_le(out, v);
    }
    return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 16) throw FormatError("file truncated: shorter than the fixed header");
    if (!std::equal(kMagic, kMagic + 4, bytes.begin())) {
        throw FormatError("bad magic: not a checkpoint file");
    }
    const std::uint32_t version = get_u32_le(bytes.data() + 4);
    if (version != kVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint64_t header_len = get_u64_le(bytes.data() + 8);
    if (bytes.size() < 16 + header_len) throw FormatError("file truncated inside the header");

    json header;
    try {
        header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + header_len);
    } catch (const json::exception& e) {
        throw FormatError(std::string("unparseable header: ") + e.what());
    }

    Checkpoint ckpt;
    if (!header.contains("config") || !header.contains("tensors")) {
        throw FormatError("header is missing config or tensors");
    }
    if (header.value("dtype", "") != "f64") {
        throw FormatError("unsupported dtype '" + header.value("dtype", "") + "'");
    }
    ckpt.config = config_from_obj(header.at("config"));
    ckpt.config.validate();

    const auto expected = tensor_census(ckpt.config);
    const std::uint8_t* payload = bytes.data() + 16 + header_len;
    const std::uint64_t payload_len = bytes.size() - 16 - header_len;

    std::uint64_t cursor = 0;
    for (const json& t : header.at("tensors")) {
        std::string name;
        std::size_t rows = 0, cols = 0;
        std::uint64_t offset = 0, length = 0;
        try {
            name = t.at("name").get<std::string>();
            rows = t.at("shape").at(0).get<std::size_t>();
            cols = t.at("shape").at(1).get<std::size_t>();
            offset = t.at("offset").get<std::uint64_t>();
            length = t.at("length").get<std::uint64_t>();
        } catch (const json::exception& e) {
            throw FormatError(std::string("bad tensor entry: ") + e.what());
        }
        auto it = expected.find(name);
        if (it == expected.end()) throw FormatError("header declares unknown tensor " + name);
        if (rows != it->second.first || cols != it->second.second) {
            throw FormatError("tensor " + name + " header shape " + std::to_string(rows) + "x" +
                              std::to_string(cols) + " does not match config shape " +
                              std::to_string(it->second.first) + "x" +
                              std::to_string(it->second.second));
        }
        if (offset != cursor) {
            throw FormatError("tensor " + name + " offset " + std::to_string(offset) +
                              " is not contiguous (expected " + std::to_string(cursor) + ")");
        }
        if (length != static_cast<std::uint64_t>(rows) * cols * 8) {
            throw FormatError("tensor " + name + " length " + std::to_string(length) +
                              " does not match its shape");
        }
        if (offset + length > payload_len) throw FormatError("file truncated inside tensor " + name);
        Mat m(rows, cols);
        for (std::size_t i = 0; i < m.size(); ++i) {
            m.data[i] = get_f64_le(payload + offset + i * 8);
        }
        ckpt.tensors.emplace(name, std::move(m));
        cursor += length;
    }
    if (cursor != payload_len) {
        throw FormatError("payload has " + std::to_string(payload_len) +
                          " bytes but the header declares " + std::to_string(cursor));
    }
    if (ckpt.tensors.size() != expected.size()) {
        throw FormatError("header declares " + std::to_string(ckpt.tensors.size()) +
                          " tensors, config implies " + std::to_string(expected.size()));
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const std::vector<std::uint8_t> bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw InputError("cannot open " + path);
    const std::streamsize size = in.tellg();
    in.seekg(0);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
    in.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!in) throw InputError("read failed for " + path);
    return deserialize_checkpoint(bytes);
}

std::string config_json(const ModelConfig& config) { return config_to_obj(config).dump(); }

ModelConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("unparseable config: ") + e.what());
    }
    return config_from_obj(j);
}

std::string fnv1a_hex(const std::uint8_t* data, std::size_t len) {
    std::uint64_t h = 14695981039346656037ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= data[i];
        h *= 1099511628211ULL;
    }
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xF];
        h >>= 4;
    }
    return out;
}

std::string fnv1a_hex(const std::string& text) {
    return fnv1a_hex(reinterpret_cast<const std::uint8_t*>(text.data()), text.size());
}

std::string config_hash(const ModelConfig& config) { return fnv1a_hex(config_json(config)); }

std::string tensor_hash(const Mat& m) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(m.size() * 8);
    for (double v : m.data) put_f64_le(bytes, v);
    return fnv1a_hex(bytes.data(), bytes.size());
}

}  // namespace crash
