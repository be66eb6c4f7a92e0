#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crash/model.hpp"

namespace crash {

enum class PoolStrategy { WeightedMean, Mean };

const char* pool_strategy_name(PoolStrategy s);
PoolStrategy pool_strategy_from_name(const std::string& name);

// Sentence vector per layer for one sample. Weighted mean uses w_k =
// k / sum(1..T') over the T' valid positions, k 1-based among valid tokens,
// so later tokens weigh more; mean uses uniform weights. Row b of the
// result is the pooled vector for layer b (L+1 rows, d cols).
Mat pool_sample(const SampleTrace& trace, PoolStrategy strategy);

// reps[b] stacks the pooled layer-b vectors of every sample: N x d.
std::vector<Mat> pool_trace(const ActivationTrace& trace, PoolStrategy strategy);

// Linear CKA between two feature matrices over the same N samples:
// |si' sj|_F^2 / (|sj' sj|_F |si' si|_F), columns centered first unless
// center is false. Zero-variance input raises DegenerateInputError.
double linear_cka(const Mat& si, const Mat& sj, bool center = true);

struct SimilarityMatrix {
    Mat values;  // (L+1) x (L+1), layer 0 = embedding output
    std::size_t n_samples = 0;
    PoolStrategy pooling = PoolStrategy::WeightedMean;
    std::string dataset_id;
};

// CKA between pooled reps of every layer pair, h_0 included. Uses the
// first n_samples sequences in dataset order.
SimilarityMatrix similarity_matrix(const Checkpoint& ckpt, const std::vector<TokenSeq>& dataset,
                                   PoolStrategy pooling, std::size_t n_samples,
                                   const std::string& dataset_id = "", bool center = true);

// Entry i = sim[i][i+1]; length L.
std::vector<double> adjacent_similarity(const SimilarityMatrix& sim);

// JSON {meta, matrix} and CSV (header row of layer ids) exports.
std::string similarity_to_json(const SimilarityMatrix& sim);
SimilarityMatrix similarity_from_json(const std::string& text);
std::string similarity_to_csv(const SimilarityMatrix& sim);

struct LensReport {
    std::vector<Mat> dist;                        // per layer: T x vocab
    std::vector<std::vector<std::size_t>> top1;   // per layer, per position
    std::vector<std::vector<double>> kl;          // KL(final || layer) per position
    std::vector<double> mean_kl;                  // per layer
};

// Decodes each layer of one sample's trace through the final layer norm
// and the tied unembedding.
LensReport logit_lens(const SampleTrace& trace, const Checkpoint& ckpt);

std::string lens_to_json(const LensReport& report);

}  // namespace crash
