#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "crash/clustering.hpp"
#include "crash/model.hpp"

namespace crash {

enum class EmulatorStrategy { Crash, CrashNoShare, UniformLcr };

const char* emulator_strategy_name(EmulatorStrategy s);
EmulatorStrategy emulator_strategy_from_name(const std::string& name);

// The transferable artifact of an offsite run. Block ids are indices into
// the ORIGINAL model; the emulator checkpoint renumbers retained blocks
// densely (emulator block r holds original block retained[r]).
struct EmulatorSpec {
    std::size_t original_L = 0;
    std::vector<std::size_t> retained;   // ascending, one per cluster
    std::vector<std::size_t> slot_map;   // length original_L iff sharing, else empty
    std::vector<std::size_t> learnable;  // ascending subset of retained
    EmulatorStrategy strategy = EmulatorStrategy::Crash;
    bool has_lcr = false;
    std::size_t lcr_l = 0, lcr_c = 0, lcr_r = 0;
    std::string full_config_hash;
};

std::string emulator_spec_to_json(const EmulatorSpec& spec);
EmulatorSpec emulator_spec_from_json(const std::string& text);

struct Emulator {
    Checkpoint model;
    EmulatorSpec spec;
};

// Slot program for forward()/loss_and_grads() in emulator block indices.
// Sharing: length original_L, slot s runs the retained block of s's cluster.
// No sharing: empty (the emulator runs its own blocks in order).
std::vector<std::size_t> emulator_slots(const EmulatorSpec& spec);

// Learnable mask in emulator block indices; embeddings and final LN frozen.
FreezeMask emulator_freeze_mask(const EmulatorSpec& spec);

// n ids evenly spaced by rank among the R retained blocks, endpoints
// included for n >= 2; n = 1 picks the middle rank.
std::vector<std::size_t> evenly_spaced_learnable(const std::vector<std::size_t>& retained,
                                                 std::size_t n_learnable);

// Cluster on sim, keep medoid centers, optionally share them across all
// original_L slots, and mark n_learnable of the retained ids learnable.
Emulator build_crash_emulator(const Checkpoint& full, const SimilarityMatrix& sim, std::size_t k,
                              std::size_t n_learnable, bool share,
                              std::size_t protect_bottom = 0, std::size_t protect_top = 0);

// Bottom l + c evenly spaced middle + top r blocks; learnable = l and r
// bands; never shares.
Emulator build_uniform_emulator(const Checkpoint& full, std::size_t l, std::size_t c,
                                std::size_t r);

struct PluginReport {
    std::vector<std::string> replaced;  // tensor names, sorted
    std::map<std::string, std::pair<std::string, std::string>> hashes;  // before, after
    std::size_t untouched_count = 0;
};

std::string plugin_report_to_json(const PluginReport& report);

// Copies each learnable block's tensors from the tuned emulator back into
// the full model at its original index. Verifies spec provenance against
// the full config hash.
std::pair<Checkpoint, PluginReport> plug_in(const Checkpoint& full,
                                            const Checkpoint& tuned_emulator,
                                            const EmulatorSpec& spec);

}  // namespace crash
