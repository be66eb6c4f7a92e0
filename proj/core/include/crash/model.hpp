#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "crash/numerics.hpp"

namespace crash {

using TokenSeq = std::vector<std::size_t>;

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t n_layers = 0;
    std::size_t d_ff = 0;
    std::size_t max_seq_len = 0;
    double ln_eps = 1e-5;

    // Throws ConfigError naming the violated constraint.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Named tensor store. The unembedding is the transpose of token_embedding
// (tied), so it never appears as a separate tensor.
struct Checkpoint {
    ModelConfig config;
    std::map<std::string, Mat> tensors;
};

// The twelve per-block tensor fields, in the order they appear in a block.
const std::vector<std::string>& block_fields();

// "block_007.wq" style; three digits keep lexicographic order = block order.
std::string block_tensor_name(std::size_t block, const std::string& field);

// Every expected tensor name with its shape, derived from the config alone.
std::map<std::string, std::pair<std::size_t, std::size_t>> tensor_census(const ModelConfig& config);

// Throws ShapeError on a missing, extra, or mis-shaped tensor.
void check_census(const Checkpoint& ckpt);

// Deterministic: same (config, seed) gives a bit-identical checkpoint.
// Projections and embeddings are normal(0, 0.02); layer-norm gains are ones,
// all biases zeros. Tensors are filled in lexicographic name order.
Checkpoint init_checkpoint(const ModelConfig& config, std::uint64_t seed);

struct FreezeMask {
    std::set<std::size_t> learnable_blocks;
    bool embeddings_learnable = false;
    bool final_ln_learnable = false;

    // Sorted tensor names the mask marks learnable under this config.
    std::vector<std::string> learnable_tensor_names(const ModelConfig& config) const;
};

// Hidden states h_0..h_S for one sample (S = number of executed slots),
// each T x d_model, plus per-position validity flags. Padding never occurs
// in forward() output, but pooling accepts traces with masked positions.
struct SampleTrace {
    std::vector<Mat> h;
    std::vector<std::uint8_t> valid;
};

struct ActivationTrace {
    std::vector<SampleTrace> samples;
};

struct ForwardResult {
    std::vector<Mat> logits;  // per sample: T x vocab_size
    ActivationTrace trace;    // filled iff capture
    // attention[sample][slot][head] is a T x T probability matrix (rows sum
    // to 1 over positions <= row index); filled iff capture.
    std::vector<std::vector<std::vector<Mat>>> attention;
};

// Runs the slot program (default: blocks 0..L-1 in order). slots lets an
// emulator re-execute retained blocks at removed depths, skip blocks, or
// swap one block for another.
ForwardResult forward(const Checkpoint& ckpt, const std::vector<TokenSeq>& tokens, bool capture,
                      const std::vector<std::size_t>& slots = {});

// One pre-norm block (causal attention + FFN, both residual) on a T x d
// hidden state. forward() is a fold of this over the slot program.
Mat apply_block(const Checkpoint& ckpt, std::size_t block, const Mat& h);

// Row-wise layer norm with biased variance; the exact kernel forward()
// uses, exposed so the logit lens reproduces model output bit-for-bit.
Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias, double eps);

struct LossBatch {
    std::vector<TokenSeq> inputs;
    std::vector<TokenSeq> targets;                  // aligned with inputs
    std::vector<std::vector<std::uint8_t>> loss_mask;  // 1 where target scored
};

struct LossGrads {
    double loss = 0.0;
    std::map<std::string, Mat> grads;  // learnable tensors only
    std::size_t n_positions = 0;
};

// Mean cross-entropy over unmasked positions. Gradients for a block shared
// across slots are the sum over every slot where it executes. Batch items
// may run in parallel; the reduction is in fixed sample order.
LossGrads loss_and_grads(const Checkpoint& ckpt, const LossBatch& batch, const FreezeMask& mask,
                         const std::vector<std::size_t>& slots = {});

}  // namespace crash
