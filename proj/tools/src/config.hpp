#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crash/landscape.hpp"
#include "crash/tasks.hpp"
#include "crash/tuning.hpp"

namespace crashcli {

// Every stochastic choice in a pipeline draws from one of these. A master
// seed m derives the rest as m * 1000 + slot; keys pinned in the config file
// win over the derivation.
struct SeedPlan {
    std::uint64_t master = 0;
    std::uint64_t init = 1;
    std::uint64_t pretrain_data = 2;
    std::uint64_t pretrain_train = 3;
    std::uint64_t target_data = 4;
    std::uint64_t support_data = 5;
    std::uint64_t train = 6;
};

struct TaskSpec {
    crash::TaskKind kind = crash::TaskKind::KeyValueRecall;
    crash::TaskSizes sizes;
};

// One JSON file drives every subcommand; all keys are optional and unknown
// keys are rejected. Flags override fields after loading.
struct PipelineConfig {
    crash::ModelConfig model;
    SeedPlan seeds;

    std::vector<crash::TaskKind> pretrain_tasks;
    crash::TaskSizes pretrain_sizes;
    crash::TrainConfig pretrain_train;

    TaskSpec target;
    TaskSpec support;

    crash::OffsiteSettings offsite;  // analysis, emulator and train knobs

    std::size_t n_points = 11;  // interpolation grid
    crash::GridSpec grid;
    std::size_t lens_sample = 0;
};

PipelineConfig default_config();
PipelineConfig load_config(const std::string& path);
std::string config_to_json(const PipelineConfig& cfg);

// Re-derives every seed slot from the given master, discarding pinned values.
void apply_master_seed(PipelineConfig& cfg, std::uint64_t master);

crash::TaskDataset build_target(const PipelineConfig& cfg);
crash::TaskDataset build_support(const PipelineConfig& cfg);
std::vector<crash::TaskDataset> build_pretrain_mixture(const PipelineConfig& cfg);

// The offsite settings with the train seed resolved from the seed plan.
crash::OffsiteSettings resolved_offsite(const PipelineConfig& cfg);

}  // namespace crashcli
