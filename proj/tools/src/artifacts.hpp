#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace crashcli {

// Collects a run's outputs under one directory and finishes with a
// manifest.json recording inputs, seeds, parameters and content hashes.
// Reruns with identical inputs differ only in the "created" timestamp.
class ArtifactWriter {
public:
    ArtifactWriter(std::string command, const std::filesystem::path& dir);

    void note_input(const std::string& key, const std::filesystem::path& path);
    void note_seed(const std::string& key, std::uint64_t value);
    void note_param(const std::string& key, nlohmann::json value);

    std::filesystem::path write_text(const std::string& name, const std::string& text);
    std::filesystem::path write_bytes(const std::string& name,
                                      const std::vector<std::uint8_t>& bytes);

    const std::filesystem::path& dir() const { return dir_; }

    void finish();

private:
    std::filesystem::path dir_;
    nlohmann::json manifest_;
};

}  // namespace crashcli
