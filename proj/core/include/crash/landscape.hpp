#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "crash/tuning.hpp"

namespace crash {

// A checkpoint flattened to one vector: tensors in lexicographic name
// order, row-major within each tensor. Two ParamVectors are comparable only
// when their configs (and so their censuses) match.
struct ParamVector {
    ModelConfig config;
    std::vector<double> values;
};

ParamVector flatten(const Checkpoint& ckpt);
Checkpoint unflatten(const ParamVector& pv);

struct CurveReport {
    std::vector<double> alphas;  // strictly increasing, 0 and 1 included
    std::vector<double> losses;
    // Max over the grid of loss(a) minus the chord between the endpoint
    // losses; may be negative when the path dips below the chord.
    double barrier = 0.0;
};

// Straight-line interpolation theta(a) = (1-a) a0 + a a1, eval loss at
// n_points uniform grid values.
CurveReport interpolate(const ParamVector& a, const ParamVector& b, std::size_t n_points,
                        const TaskDataset& data);

std::string curve_to_json(const CurveReport& report);
std::string curve_to_csv(const CurveReport& report);

struct GridSpec {
    std::size_t nx = 25;
    std::size_t ny = 25;
    double margin = 0.2;  // fraction of anchor extent added on each side
};

struct SurfaceReport {
    std::vector<double> u, v;    // orthonormal basis from the three anchors
    std::vector<double> xs, ys;  // grid axes
    Mat losses;                  // ys.size() rows, xs.size() cols
    double ax = 0.0, ay = 0.0;   // anchor a in (x, y); origin sits at (0, 0)
    double bx = 0.0, by = 0.0;
    // Losses of the three anchors rebuilt through origin + x*u + y*v; they
    // should agree with direct evaluation of the anchor checkpoints.
    double origin_loss = 0.0, a_loss = 0.0, b_loss = 0.0;
};

// u spans origin->a; v is the origin->b direction with its u component
// removed (Gram-Schmidt). Collinear anchors raise DegenerateGeometryError.
SurfaceReport surface2d(const ParamVector& origin, const ParamVector& a, const ParamVector& b,
                        const GridSpec& grid, const TaskDataset& data);

std::string surface_to_json(const SurfaceReport& report);
std::string surface_to_csv(const SurfaceReport& report);

struct CrucialityReport {
    double base_loss = 0.0;
    // Per block: eval-loss change after rewinding that block to its
    // initialization, and after removing its slot outright.
    std::vector<double> rewind_delta;
    std::vector<double> remove_delta;
};

CrucialityReport layer_cruciality(const Checkpoint& ft, const Checkpoint& init,
                                  const TaskDataset& data);

std::string cruciality_to_json(const CrucialityReport& report);

struct SharingHeatmap {
    double base_loss = 0.0;
    Mat loss;            // (i, j): slot i executes block j
    Mat last_layer_cka;  // CKA of final-layer reps, modified vs original
};

SharingHeatmap sharing_heatmap(const Checkpoint& ckpt, const TaskDataset& data,
                               PoolStrategy pooling = PoolStrategy::WeightedMean);

std::string heatmap_to_json(const SharingHeatmap& report);
std::string heatmap_to_csv(const SharingHeatmap& report);

}  // namespace crash
