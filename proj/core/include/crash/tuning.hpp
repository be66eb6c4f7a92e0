#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crash/analysis.hpp"
#include "crash/emulator.hpp"
#include "crash/tasks.hpp"

namespace crash {

struct TrainConfig {
    double lr = 1e-3;
    std::size_t steps = 1;
    std::size_t batch = 8;
    double grad_clip = 1.0;  // global-norm clip; 0 disables
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const;
};

struct EvalEntry {
    std::optional<double> accuracy;  // choice tasks
    std::optional<double> lm_loss;   // char-lm
    std::size_t n_items = 0;
};

// The scalar a setting is judged by: accuracy when present, else -lm_loss.
double eval_metric(const EvalEntry& e);

// Harness-style scoring: each option is appended to the prompt and scored
// by summed log-probability of its tokens; argmax wins, ties to the lowest
// option index. LM datasets report mean cross-entropy instead.
EvalEntry evaluate(const Checkpoint& ckpt, const TaskDataset& data,
                   const std::vector<std::size_t>& slots = {}, bool length_norm = false);

// Mean cross-entropy of the eval split (gold-answer spans for choice
// tasks); the landscape diagnostics use this as their scalar.
double eval_loss(const Checkpoint& ckpt, const TaskDataset& data,
                 const std::vector<std::size_t>& slots = {});

struct FinetuneResult {
    Checkpoint model;
    std::vector<double> loss_curve;
};

// Adam over the mask's learnable tensors only; frozen tensors stay
// bit-identical. Deterministic in (model, data, cfg.seed). Throws
// TrainingError with the last finite step when the loss leaves the reals.
FinetuneResult finetune(const Checkpoint& model, const TaskDataset& data, const FreezeMask& mask,
                        const TrainConfig& cfg, const std::vector<std::size_t>& slots = {});

// Fresh model trained on a task mixture with everything learnable;
// produces the "pretrained" full checkpoints the offsite experiments need.
Checkpoint pretrain_model(const ModelConfig& config, std::uint64_t init_seed,
                          const std::vector<TaskDataset>& mixture, const TrainConfig& cfg);

struct OffsiteSettings {
    // Crash shares retained blocks across all slots; CrashNoShare keeps the
    // reduced depth; UniformLcr ignores k and n_learnable.
    EmulatorStrategy strategy = EmulatorStrategy::Crash;
    std::size_t k = 2;
    std::size_t n_learnable = 2;
    std::size_t protect_bottom = 0;
    std::size_t protect_top = 0;
    std::size_t lcr_l = 0, lcr_c = 0, lcr_r = 0;  // uniform-lcr strategy
    PoolStrategy pooling = PoolStrategy::WeightedMean;
    std::size_t n_samples = 512;
    bool center = true;
    TrainConfig train;  // steps == 0 skips fine-tuning (zero-step pipeline)
    bool run_full_ft = true;
};

struct OffsiteReport {
    EvalEntry full_zs, emulator_zs, emulator_ft, plugin;
    std::optional<EvalEntry> full_ft;
    // Plug-in beat both the full model's zero-shot and the emulator's
    // fine-tuned metric. Reported, never asserted.
    bool oft_condition = false;
    EmulatorSpec spec;
    SimilarityMatrix sim;
    std::vector<double> emulator_curve;
    std::vector<double> full_curve;
    std::string task_id;
    std::string support_id;
};

// Dispatches on settings.strategy; UniformLcr ignores sim, k and n_learnable.
Emulator build_emulator(const Checkpoint& full, const SimilarityMatrix& sim,
                        const OffsiteSettings& settings);

// The full pipeline: similarity on the SUPPORT data, cluster, build the
// emulator, evaluate full-ZS and emulator-ZS, fine-tune on the target train
// split, evaluate emulator-FT, plug in, evaluate plug-in, optionally
// fine-tune the full model for reference.
OffsiteReport run_offsite_experiment(const Checkpoint& full, const TaskDataset& target,
                                     const TaskDataset& support, const OffsiteSettings& settings);

std::string offsite_report_to_json(const OffsiteReport& report);
std::string offsite_report_table(const OffsiteReport& report);

struct SweepResult {
    std::vector<std::size_t> ks;
    std::vector<OffsiteReport> reports;
};

// Re-runs the offsite experiment for each k; n_learnable is clamped to k so
// k = L degenerates to the identity emulator and full fine-tuning.
SweepResult sweep_k(const Checkpoint& full, const TaskDataset& target, const TaskDataset& support,
                    const OffsiteSettings& base, const std::vector<std::size_t>& ks);

std::string sweep_to_csv(const SweepResult& sweep);

}  // namespace crash
