#include "crash/clustering.hpp"

#include <limits>

namespace crash {

namespace {

std::size_t layer_count(const SimilarityMatrix& sim) {
    const std::size_t rows = sim.values.rows;
    if (sim.values.cols != rows || rows < 2) {
        throw ShapeError("similarity matrix " + sim.values.shape_str() +
                         " is not a square layer matrix");
    }
    return rows - 1;  // row 0 is the embedding output, rows 1..L are blocks
}

}  // namespace

double block_similarity(const SimilarityMatrix& sim, std::size_t i, std::size_t j) {
    const std::size_t L = layer_count(sim);
    if (i >= L || j >= L) {
        throw InputError("block pair (" + std::to_string(i) + ", " + std::to_string(j) +
                         ") out of range for " + std::to_string(L) + " blocks");
    }
    return sim.values.at(i + 1, j + 1);
}

ClusterAssignment adjacent_cluster(const SimilarityMatrix& sim, std::size_t k,
                                   std::size_t protect_bottom, std::size_t protect_top) {
    const std::size_t L = layer_count(sim);
    if (k < 1 || k > L) {
        throw InputError("k = " + std::to_string(k) + " out of range for " + std::to_string(L) +
                         " blocks");
    }
    if (protect_bottom + protect_top > L) {
        throw InputError("protected bands cover " +
                         std::to_string(protect_bottom + protect_top) + " blocks, model has " +
                         std::to_string(L));
    }
    const std::size_t middle = L - protect_bottom - protect_top;
    const std::size_t min_k = protect_bottom + protect_top + (middle > 0 ? 1 : 0);
    if (k < min_k) {
        throw InputError("k = " + std::to_string(k) + " below the minimum " +
                         std::to_string(min_k) + " imposed by the protected bands");
    }

    ClusterAssignment out;
    out.segments.reserve(L);
    for (std::size_t b = 0; b < L; ++b) out.segments.push_back(Segment{b, b + 1});

    const std::size_t lo = protect_bottom;           // first mergeable block
    const std::size_t hi = L - protect_top;          // one past the last mergeable block
    while (out.segments.size() > k) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = out.segments.size();
        for (std::size_t s = 0; s + 1 < out.segments.size(); ++s) {
            const Segment& a = out.segments[s];
            const Segment& b = out.segments[s + 1];
            if (a.begin < lo || b.end > hi) continue;
            // Linkage: similarity between the deepest blocks of each side.
            const double link = block_similarity(sim, a.end - 1, b.end - 1);
            if (link > best) {  // strict: ties keep the lower-index pair
                best = link;
                best_idx = s;
            }
        }
        if (best_idx == out.segments.size()) {
            throw InputError("no mergeable adjacent pair left before reaching k = " +
                             std::to_string(k));
        }
        const Segment left = out.segments[best_idx];
        const Segment right = out.segments[best_idx + 1];
        out.merge_log.push_back(MergeRecord{left.begin, right.begin, best});
        out.segments[best_idx] = Segment{left.begin, right.end};
        out.segments.erase(out.segments.begin() + static_cast<std::ptrdiff_t>(best_idx) + 1);
    }
    return out;
}

std::vector<std::size_t> select_centers(const ClusterAssignment& clusters,
                                        const SimilarityMatrix& sim) {
    std::vector<std::size_t> centers;
    centers.reserve(clusters.segments.size());
    for (const Segment& seg : clusters.segments) {
        if (seg.size() == 0) throw InputError("empty cluster segment");
        if (seg.size() == 1) {
            centers.push_back(seg.begin);
            continue;
        }
        std::size_t best = seg.begin;
        double best_mean = -std::numeric_limits<double>::infinity();
        for (std::size_t m = seg.begin; m < seg.end; ++m) {
            double sum = 0.0;
            for (std::size_t o = seg.begin; o < seg.end; ++o) {
                if (o == m) continue;
                sum += block_similarity(sim, m, o);
            }
            const double mean = sum / static_cast<double>(seg.size() - 1);
            if (mean > best_mean) {  // strict: ties keep the lowest id
                best_mean = mean;
                best = m;
            }
        }
        centers.push_back(best);
    }
    return centers;
}

}  // namespace crash
