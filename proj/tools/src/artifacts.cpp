#include "artifacts.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>

#include "crash/checkpoint_io.hpp"
#include "crash/errors.hpp"

namespace crashcli {

namespace {

std::string utc_now() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string hash_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw crash::InputError("cannot open '" + path.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return crash::fnv1a_hex(bytes);
}

void write_file(const std::filesystem::path& path, const char* data, std::size_t len) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw crash::InputError("cannot write '" + path.string() + "'");
    out.write(data, static_cast<std::streamsize>(len));
    if (!out) throw crash::InputError("short write to '" + path.string() + "'");
}

}  // namespace

ArtifactWriter::ArtifactWriter(std::string command, const std::filesystem::path& dir) : dir_(dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw crash::InputError("cannot create output directory '" + dir_.string() +
                                    "': " + ec.message());
    manifest_["command"] = std::move(command);
    manifest_["inputs"] = nlohmann::json::object();
    manifest_["seeds"] = nlohmann::json::object();
    manifest_["params"] = nlohmann::json::object();
    manifest_["artifacts"] = nlohmann::json::object();
}

void ArtifactWriter::note_input(const std::string& key, const std::filesystem::path& path) {
    manifest_["inputs"][key] = {{"path", path.string()}, {"fnv1a", hash_file(path)}};
}

void ArtifactWriter::note_seed(const std::string& key, std::uint64_t value) {
    manifest_["seeds"][key] = value;
}

void ArtifactWriter::note_param(const std::string& key, nlohmann::json value) {
    manifest_["params"][key] = std::move(value);
}

std::filesystem::path ArtifactWriter::write_text(const std::string& name,
                                                 const std::string& text) {
    const std::filesystem::path path = dir_ / name;
    write_file(path, text.data(), text.size());
    manifest_["artifacts"][name] = crash::fnv1a_hex(text);
    return path;
}

std::filesystem::path ArtifactWriter::write_bytes(const std::string& name,
                                                  const std::vector<std::uint8_t>& bytes) {
    const std::filesystem::path path = dir_ / name;
    write_file(path, reinterpret_cast<const char*>(bytes.data()), bytes.size());
    manifest_["artifacts"][name] = crash::fnv1a_hex(bytes.data(), bytes.size());
    return path;
}

void ArtifactWriter::finish() {
    manifest_["created"] = utc_now();
    const std::string text = manifest_.dump(2) + "\n";
    write_file(dir_ / "manifest.json", text.data(), text.size());
}

}  // namespace crashcli
