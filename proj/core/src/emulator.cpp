#include "crash/emulator.hpp"

#include <algorithm>
#include <cmath>

#include "crash/checkpoint_io.hpp"
#include "json.hpp"

namespace crash {

namespace {

using nlohmann::json;

// Position of an original block id inside retained, or retained.size().
std::size_t retained_index(const std::vector<std::size_t>& retained, std::size_t id) {
    const auto it = std::lower_bound(retained.begin(), retained.end(), id);
    if (it == retained.end() || *it != id) return retained.size();
    return static_cast<std::size_t>(it - retained.begin());
}

// Emulator checkpoint: retained blocks renumbered densely, everything else
// copied as-is.
Checkpoint reduce_checkpoint(const Checkpoint& full, const std::vector<std::size_t>& retained) {
    if (retained.size() < 2) {
        throw ParameterError("emulator would keep " + std::to_string(retained.size()) +
                             " blocks; a model needs at least 2");
    }
    Checkpoint em;
    em.config = full.config;
    em.config.n_layers = retained.size();
    em.tensors.emplace("token_embedding", full.tensors.at("token_embedding"));
    em.tensors.emplace("pos_embedding", full.tensors.at("pos_embedding"));
    em.tensors.emplace("final_ln_gain", full.tensors.at("final_ln_gain"));
    em.tensors.emplace("final_ln_bias", full.tensors.at("final_ln_bias"));
    for (std::size_t r = 0; r < retained.size(); ++r) {
        for (const std::string& f : block_fields()) {
            em.tensors.emplace(block_tensor_name(r, f),
                               full.tensors.at(block_tensor_name(retained[r], f)));
        }
    }
    return em;
}

}  // namespace

const char* emulator_strategy_name(EmulatorStrategy s) {
    switch (s) {
        case EmulatorStrategy::Crash: return "crash";
        case EmulatorStrategy::CrashNoShare: return "crash-noshare";
        case EmulatorStrategy::UniformLcr: return "uniform-lcr";
    }
    return "unknown";
}

EmulatorStrategy emulator_strategy_from_name(const std::string& name) {
    if (name == "crash") return EmulatorStrategy::Crash;
    if (name == "crash-noshare") return EmulatorStrategy::CrashNoShare;
    if (name == "uniform-lcr") return EmulatorStrategy::UniformLcr;
    throw InputError("unknown emulator strategy '" + name + "'");
}

std::vector<std::size_t> evenly_spaced_learnable(const std::vector<std::size_t>& retained,
                                                 std::size_t n_learnable) {
    const std::size_t R = retained.size();
    if (n_learnable > R) {
        throw ParameterError("n_learnable " + std::to_string(n_learnable) + " exceeds the " +
                             std::to_string(R) + " retained blocks");
    }
    std::vector<std::size_t> out;
    if (n_learnable == 0) return out;
    if (n_learnable == 1) {
        out.push_back(retained[(R - 1) / 2]);
        return out;
    }
    for (std::size_t i = 0; i < n_learnable; ++i) {
        const double rank = static_cast<double>(i) * static_cast<double>(R - 1) /
                            static_cast<double>(n_learnable - 1);
        out.push_back(retained[static_cast<std::size_t>(std::llround(rank))]);
    }
    return out;
}

std::vector<std::size_t> emulator_slots(const EmulatorSpec& spec) {
    if (spec.slot_map.empty()) return {};
    std::vector<std::size_t> program;
    program.reserve(spec.slot_map.size());
    for (std::size_t s = 0; s < spec.slot_map.size(); ++s) {
        const std::size_t r = retained_index(spec.retained, spec.slot_map[s]);
        if (r == spec.retained.size()) {
            throw InputError("slot " + std::to_string(s) + " maps to block " +
                             std::to_string(spec.slot_map[s]) + " which is not retained");
        }
        program.push_back(r);
    }
    return program;
}

FreezeMask emulator_freeze_mask(const EmulatorSpec& spec) {
    FreezeMask mask;
    for (std::size_t id : spec.learnable) {
        const std::size_t r = retained_index(spec.retained, id);
        if (r == spec.retained.size()) {
            throw InputError("learnable block " + std::to_string(id) + " is not retained");
        }
        mask.learnable_blocks.insert(r);
    }
    return mask;
}

Emulator build_crash_emulator(const Checkpoint& full, const SimilarityMatrix& sim, std::size_t k,
                              std::size_t n_learnable, bool share, std::size_t protect_bottom,
                              std::size_t protect_top) {
    full.config.validate();
    check_census(full);
    const std::size_t L = full.config.n_layers;
    if (k < 1 || k > L) {
        throw ParameterError("k = " + std::to_string(k) + " out of range for " +
                             std::to_string(L) + " blocks");
    }
    if (sim.values.rows != L + 1) {
        throw ShapeError("similarity matrix covers " + std::to_string(sim.values.rows) +
                         " layers, model implies " + std::to_string(L + 1));
    }
    const ClusterAssignment clusters = adjacent_cluster(sim, k, protect_bottom, protect_top);
    const std::vector<std::size_t> centers = select_centers(clusters, sim);

    Emulator em;
    em.spec.original_L = L;
    em.spec.retained = centers;
    em.spec.learnable = evenly_spaced_learnable(centers, n_learnable);
    em.spec.strategy = share ? EmulatorStrategy::Crash : EmulatorStrategy::CrashNoShare;
    em.spec.full_config_hash = config_hash(full.config);
    if (share) {
        em.spec.slot_map.assign(L, 0);
        for (std::size_t c = 0; c < clusters.segments.size(); ++c) {
            const Segment& seg = clusters.segments[c];
            for (std::size_t b = seg.begin; b < seg.end; ++b) em.spec.slot_map[b] = centers[c];
        }
    }
    em.model = reduce_checkpoint(full, centers);
    return em;
}

Emulator build_uniform_emulator(const Checkpoint& full, std::size_t l, std::size_t c,
                                std::size_t r) {
    full.config.validate();
    check_census(full);
    const std::size_t L = full.config.n_layers;
    if (l + r >= L) {
        throw ParameterError("l + r = " + std::to_string(l + r) +
                             " leaves no middle in a model of " + std::to_string(L) + " blocks");
    }
    const std::size_t middle = L - l - r;
    if (c > middle) {
        throw ParameterError("c = " + std::to_string(c) + " exceeds the " +
                             std::to_string(middle) + " middle blocks");
    }

    std::vector<std::size_t> retained;
    for (std::size_t b = 0; b < l; ++b) retained.push_back(b);
    if (c == 1) {
        retained.push_back(l + (middle - 1) / 2);
    } else if (c >= 2) {
        for (std::size_t i = 0; i < c; ++i) {
            const double rank = static_cast<double>(i) * static_cast<double>(middle - 1) /
                                static_cast<double>(c - 1);
            retained.push_back(l + static_cast<std::size_t>(std::llround(rank)));
        }
    }
    for (std::size_t b = L - r; b < L; ++b) retained.push_back(b);

    Emulator em;
    em.spec.original_L = L;
    em.spec.retained = retained;
    for (std::size_t b = 0; b < l; ++b) em.spec.learnable.push_back(b);
    for (std::size_t b = L - r; b < L; ++b) em.spec.learnable.push_back(b);
    em.spec.strategy = EmulatorStrategy::UniformLcr;
    em.spec.has_lcr = true;
    em.spec.lcr_l = l;
    em.spec.lcr_c = c;
    em.spec.lcr_r = r;
    em.spec.full_config_hash = config_hash(full.config);
    em.model = reduce_checkpoint(full, retained);
    return em;
}

std::pair<Checkpoint, PluginReport> plug_in(const Checkpoint& full,
                                            const Checkpoint& tuned_emulator,
                                            const EmulatorSpec& spec) {
    full.config.validate();
    check_census(full);
    tuned_emulator.config.validate();
    check_census(tuned_emulator);
    if (config_hash(full.config) != spec.full_config_hash) {
        throw ProvenanceError("spec was built for config hash " + spec.full_config_hash +
                              ", this checkpoint hashes to " + config_hash(full.config));
    }
    ModelConfig expected = full.config;
    expected.n_layers = tuned_emulator.config.n_layers;
    if (!(tuned_emulator.config == expected)) {
        throw InputError("tuned emulator config does not match the full model");
    }

    Checkpoint out = full;
    PluginReport report;
    for (std::size_t id : spec.learnable) {
        const std::size_t r = retained_index(spec.retained, id);
        if (r == spec.retained.size() || r >= tuned_emulator.config.n_layers) {
            throw InputError("learnable block " + std::to_string(id) +
                             " is missing from the tuned model");
        }
        for (const std::string& f : block_fields()) {
            const std::string full_name = block_tensor_name(id, f);
            const std::string em_name = block_tensor_name(r, f);
            const std::string before = tensor_hash(out.tensors.at(full_name));
            out.tensors.at(full_name) = tuned_emulator.tensors.at(em_name);
            const std::string after = tensor_hash(out.tensors.at(full_name));
            report.replaced.push_back(full_name);
            report.hashes.emplace(full_name, std::make_pair(before, after));
        }
    }
    std::sort(report.replaced.begin(), report.replaced.end());
    report.untouched_count = out.tensors.size() - report.replaced.size();
    return {std::move(out), std::move(report)};
}

std::string emulator_spec_to_json(const EmulatorSpec& spec) {
    json j;
    j["original_L"] = spec.original_L;
    j["retained"] = spec.retained;
    if (!spec.slot_map.empty()) j["slot_map"] = spec.slot_map;
    j["learnable"] = spec.learnable;
    j["strategy"] = emulator_strategy_name(spec.strategy);
    if (spec.has_lcr) j["lcr"] = {{"l", spec.lcr_l}, {"c", spec.lcr_c}, {"r", spec.lcr_r}};
    j["full_config_hash"] = spec.full_config_hash;
    return j.dump();
}

EmulatorSpec emulator_spec_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("unparseable emulator spec: ") + e.what());
    }
    EmulatorSpec spec;
    try {
        spec.original_L = j.at("original_L").get<std::size_t>();
        spec.retained = j.at("retained").get<std::vector<std::size_t>>();
        if (j.contains("slot_map")) {
            spec.slot_map = j.at("slot_map").get<std::vector<std::size_t>>();
        }
        spec.learnable = j.at("learnable").get<std::vector<std::size_t>>();
        spec.strategy = emulator_strategy_from_name(j.at("strategy").get<std::string>());
        if (j.contains("lcr")) {
            spec.has_lcr = true;
            spec.lcr_l = j.at("lcr").at("l").get<std::size_t>();
            spec.lcr_c = j.at("lcr").at("c").get<std::size_t>();
            spec.lcr_r = j.at("lcr").at("r").get<std::size_t>();
        }
        spec.full_config_hash = j.at("full_config_hash").get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad emulator spec: ") + e.what());
    }
    return spec;
}

std::string plugin_report_to_json(const PluginReport& report) {
    json hashes = json::object();
    for (const auto& [name, pair] : report.hashes) {
        hashes[name] = {{"before", pair.first}, {"after", pair.second}};
    }
    json j;
    j["replaced"] = report.replaced;
    j["hashes"] = std::move(hashes);
    j["untouched_count"] = report.untouched_count;
    return j.dump();
}

}  // namespace crash
