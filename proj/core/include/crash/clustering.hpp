#pragma once

#include <cstddef>
#include <vector>

#include "crash/analysis.hpp"

namespace crash {

// Half-open block-index range [begin, end).
struct Segment {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool operator==(const Segment&) const = default;
};

// One greedy merge: the two clusters are identified by their first block.
struct MergeRecord {
    std::size_t left_begin = 0;
    std::size_t right_begin = 0;
    double linkage = 0.0;

    bool operator==(const MergeRecord&) const = default;
};

struct ClusterAssignment {
    std::vector<Segment> segments;      // ordered, contiguous, cover 0..L-1
    std::vector<MergeRecord> merge_log;
};

// Similarity between blocks i and j read from an (L+1)-sided layer matrix:
// block i's output is hidden state i+1.
double block_similarity(const SimilarityMatrix& sim, std::size_t i, std::size_t j);

// Greedy agglomerative clustering over adjacent clusters only. Starts from
// singletons and merges the adjacent pair with the highest linkage until k
// clusters remain; linkage(A, B) is the similarity between the deepest
// blocks of A and B; ties go to the lower-index pair. Blocks below
// protect_bottom or in the top protect_top stay singletons and never merge.
ClusterAssignment adjacent_cluster(const SimilarityMatrix& sim, std::size_t k,
                                   std::size_t protect_bottom = 0, std::size_t protect_top = 0);

// Medoid per segment: the member maximizing mean similarity to the other
// members; singleton maps to itself; ties go to the lowest block id.
std::vector<std::size_t> select_centers(const ClusterAssignment& clusters,
                                        const SimilarityMatrix& sim);

}  // namespace crash
