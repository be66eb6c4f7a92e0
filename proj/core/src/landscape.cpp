#include "crash/landscape.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace crash {

namespace {

using nlohmann::json;

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double row_logprob(const Mat& logits, std::size_t row, std::size_t target) {
    const double* r = logits.row(row);
    double mx = r[0];
    for (std::size_t j = 1; j < logits.cols; ++j) {
        if (r[j] > mx) mx = r[j];
    }
    double z = 0.0;
    for (std::size_t j = 0; j < logits.cols; ++j) z += std::exp(r[j] - mx);
    return r[target] - (mx + std::log(z));
}

// Same accumulation order as eval_loss, so a run through an identity slot
// program reproduces the base loss bit-for-bit.
double masked_loss(const std::vector<Mat>& logits, const LossBatch& batch) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
        for (std::size_t t = 0; t < batch.inputs[s].size(); ++t) {
            if (batch.loss_mask[s][t] == 0) continue;
            total -= row_logprob(logits[s], t, batch.targets[s][t]);
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

LossBatch eval_batch(const TaskDataset& data) {
    if (data.eval_size() == 0) throw InputError("empty eval split");
    std::vector<std::size_t> indices(data.eval_size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    return make_loss_batch(data, indices, true);
}

void check_same_config(const ParamVector& a, const ParamVector& b) {
    if (!(a.config == b.config)) throw ShapeError("parameter vectors come from different configs");
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

json mat_rows(const Mat& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows; ++r) {
        json row = json::array();
        for (std::size_t c = 0; c < m.cols; ++c) row.push_back(m.at(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace

ParamVector flatten(const Checkpoint& ckpt) {
    ckpt.config.validate();
    check_census(ckpt);
    ParamVector pv;
    pv.config = ckpt.config;
    std::size_t total = 0;
    for (const auto& [name, t] : ckpt.tensors) total += t.size();
    pv.values.reserve(total);
    for (const auto& [name, t] : ckpt.tensors) {
        pv.values.insert(pv.values.end(), t.data.begin(), t.data.end());
    }
    return pv;
}

Checkpoint unflatten(const ParamVector& pv) {
    pv.config.validate();
    const auto census = tensor_census(pv.config);
    std::size_t total = 0;
    for (const auto& [name, shape] : census) total += shape.first * shape.second;
    if (pv.values.size() != total) {
        throw ShapeError("parameter vector has " + std::to_string(pv.values.size()) +
                         " values, config needs " + std::to_string(total));
    }
    Checkpoint ckpt;
    ckpt.config = pv.config;
    std::size_t offset = 0;
    for (const auto& [name, shape] : census) {
        const std::size_t n = shape.first * shape.second;
        std::vector<double> d(pv.values.begin() + static_cast<std::ptrdiff_t>(offset),
                              pv.values.begin() + static_cast<std::ptrdiff_t>(offset + n));
        ckpt.tensors.emplace(name, Mat(shape.first, shape.second, std::move(d)));
        offset += n;
    }
    return ckpt;
}

CurveReport interpolate(const ParamVector& a, const ParamVector& b, std::size_t n_points,
                        const TaskDataset& data) {
    check_same_config(a, b);
    if (n_points < 2) throw InputError("interpolation needs at least 2 points");

    CurveReport report;
    report.alphas.reserve(n_points);
    report.losses.reserve(n_points);
    ParamVector theta;
    theta.config = a.config;
    theta.values.resize(a.values.size());
    for (std::size_t i = 0; i < n_points; ++i) {
        const double alpha =
            static_cast<double>(i) / static_cast<double>(n_points - 1);
        for (std::size_t p = 0; p < theta.values.size(); ++p) {
            theta.values[p] = (1.0 - alpha) * a.values[p] + alpha * b.values[p];
        }
        report.alphas.push_back(alpha);
        report.losses.push_back(eval_loss(unflatten(theta), data));
    }
    const double l0 = report.losses.front();
    const double l1 = report.losses.back();
    double barrier = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n_points; ++i) {
        const double chord = (1.0 - report.alphas[i]) * l0 + report.alphas[i] * l1;
        barrier = std::max(barrier, report.losses[i] - chord);
    }
    report.barrier = barrier;
    return report;
}

std::string curve_to_json(const CurveReport& report) {
    json j;
    j["alphas"] = report.alphas;
    j["losses"] = report.losses;
    j["barrier"] = report.barrier;
    return j.dump();
}

std::string curve_to_csv(const CurveReport& report) {
    std::string out = "alpha,loss\n";
    for (std::size_t i = 0; i < report.alphas.size(); ++i) {
        out += fmt_double(report.alphas[i]);
        out += ',';
        out += fmt_double(report.losses[i]);
        out += '\n';
    }
    return out;
}

SurfaceReport surface2d(const ParamVector& origin, const ParamVector& a, const ParamVector& b,
                        const GridSpec& grid, const TaskDataset& data) {
    check_same_config(origin, a);
    check_same_config(origin, b);
    if (grid.nx < 2 || grid.ny < 2) throw InputError("surface grid needs at least 2x2 points");
    if (grid.margin < 0.0) throw InputError("surface margin must be >= 0");

    const std::size_t dim = origin.values.size();
    std::vector<double> da(dim), db(dim);
    for (std::size_t i = 0; i < dim; ++i) {
        da[i] = a.values[i] - origin.values[i];
        db[i] = b.values[i] - origin.values[i];
    }
    const double nu = std::sqrt(dot(da, da));
    if (nu < 1e-10) throw DegenerateGeometryError("anchor a coincides with the origin");
    SurfaceReport report;
    report.u.resize(dim);
    for (std::size_t i = 0; i < dim; ++i) report.u[i] = da[i] / nu;

    const double proj = dot(db, report.u);
    std::vector<double> resid(dim);
    for (std::size_t i = 0; i < dim; ++i) resid[i] = db[i] - proj * report.u[i];
    const double nv = std::sqrt(dot(resid, resid));
    if (nv < 1e-10) throw DegenerateGeometryError("the three anchors are collinear");
    report.v.resize(dim);
    for (std::size_t i = 0; i < dim; ++i) report.v[i] = resid[i] / nv;

    report.ax = nu;
    report.ay = 0.0;
    report.bx = proj;
    report.by = nv;

    const double x_lo_raw = std::min({0.0, report.ax, report.bx});
    const double x_hi_raw = std::max({0.0, report.ax, report.bx});
    const double y_lo_raw = std::min({0.0, report.ay, report.by});
    const double y_hi_raw = std::max({0.0, report.ay, report.by});
    const double x_pad = grid.margin * (x_hi_raw - x_lo_raw);
    const double y_pad = grid.margin * (y_hi_raw - y_lo_raw);
    const double x_lo = x_lo_raw - x_pad, x_hi = x_hi_raw + x_pad;
    const double y_lo = y_lo_raw - y_pad, y_hi = y_hi_raw + y_pad;

    report.xs.resize(grid.nx);
    for (std::size_t i = 0; i < grid.nx; ++i) {
        report.xs[i] = x_lo + (x_hi - x_lo) * static_cast<double>(i) /
                                  static_cast<double>(grid.nx - 1);
    }
    report.ys.resize(grid.ny);
    for (std::size_t i = 0; i < grid.ny; ++i) {
        report.ys[i] = y_lo + (y_hi - y_lo) * static_cast<double>(i) /
                                  static_cast<double>(grid.ny - 1);
    }

    ParamVector theta;
    theta.config = origin.config;
    theta.values.resize(dim);
    auto loss_at = [&](double x, double y) {
        for (std::size_t i = 0; i < dim; ++i) {
            theta.values[i] = origin.values[i] + x * report.u[i] + y * report.v[i];
        }
        return eval_loss(unflatten(theta), data);
    };

    report.losses = Mat(grid.ny, grid.nx);
    for (std::size_t r = 0; r < grid.ny; ++r) {
        for (std::size_t c = 0; c < grid.nx; ++c) {
            report.losses.at(r, c) = loss_at(report.xs[c], report.ys[r]);
        }
    }
    report.origin_loss = loss_at(0.0, 0.0);
    report.a_loss = loss_at(report.ax, report.ay);
    report.b_loss = loss_at(report.bx, report.by);
    return report;
}

std::string surface_to_json(const SurfaceReport& report) {
    json j;
    j["xs"] = report.xs;
    j["ys"] = report.ys;
    j["losses"] = mat_rows(report.losses);
    j["a"] = {report.ax, report.ay};
    j["b"] = {report.bx, report.by};
    j["origin_loss"] = report.origin_loss;
    j["a_loss"] = report.a_loss;
    j["b_loss"] = report.b_loss;
    j["dim"] = report.u.size();
    return j.dump();
}

std::string surface_to_csv(const SurfaceReport& report) {
    std::string out = "x,y,loss\n";
    for (std::size_t r = 0; r < report.losses.rows; ++r) {
        for (std::size_t c = 0; c < report.losses.cols; ++c) {
            out += fmt_double(report.xs[c]);
            out += ',';
            out += fmt_double(report.ys[r]);
            out += ',';
            out += fmt_double(report.losses.at(r, c));
            out += '\n';
        }
    }
    return out;
}

CrucialityReport layer_cruciality(const Checkpoint& ft, const Checkpoint& init,
                                  const TaskDataset& data) {
    if (!(ft.config == init.config)) throw ShapeError("checkpoints differ in config");
    check_census(ft);
    check_census(init);

    CrucialityReport report;
    report.base_loss = eval_loss(ft, data);
    const std::size_t L = ft.config.n_layers;
    report.rewind_delta.reserve(L);
    report.remove_delta.reserve(L);
    for (std::size_t b = 0; b < L; ++b) {
        Checkpoint rewound = ft;
        for (const std::string& field : block_fields()) {
            const std::string name = block_tensor_name(b, field);
            rewound.tensors.at(name) = init.tensors.at(name);
        }
        report.rewind_delta.push_back(eval_loss(rewound, data) - report.base_loss);

        std::vector<std::size_t> slots;
        slots.reserve(L - 1);
        for (std::size_t s = 0; s < L; ++s) {
            if (s != b) slots.push_back(s);
        }
        report.remove_delta.push_back(eval_loss(ft, data, slots) - report.base_loss);
    }
    return report;
}

std::string cruciality_to_json(const CrucialityReport& report) {
    json j;
    j["base_loss"] = report.base_loss;
    j["rewind_delta"] = report.rewind_delta;
    j["remove_delta"] = report.remove_delta;
    return j.dump();
}

SharingHeatmap sharing_heatmap(const Checkpoint& ckpt, const TaskDataset& data,
                               PoolStrategy pooling) {
    ckpt.config.validate();
    check_census(ckpt);
    const LossBatch batch = eval_batch(data);
    const std::size_t L = ckpt.config.n_layers;

    SharingHeatmap report;
    const ForwardResult base = forward(ckpt, batch.inputs, true);
    report.base_loss = masked_loss(base.logits, batch);
    const Mat base_reps = pool_trace(base.trace, pooling)[L];

    report.loss = Mat(L, L);
    report.last_layer_cka = Mat(L, L);
    std::vector<std::size_t> slots(L);
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
            std::iota(slots.begin(), slots.end(), std::size_t{0});
            slots[i] = j;
            const ForwardResult mod = forward(ckpt, batch.inputs, true, slots);
            report.loss.at(i, j) = masked_loss(mod.logits, batch);
            const Mat mod_reps = pool_trace(mod.trace, pooling)[L];
            report.last_layer_cka.at(i, j) = linear_cka(mod_reps, base_reps);
        }
    }
    return report;
}

std::string heatmap_to_json(const SharingHeatmap& report) {
    json j;
    j["base_loss"] = report.base_loss;
    j["loss"] = mat_rows(report.loss);
    j["last_layer_cka"] = mat_rows(report.last_layer_cka);
    return j.dump();
}

std::string heatmap_to_csv(const SharingHeatmap& report) {
    std::string out = "slot,block,loss,last_layer_cka\n";
    for (std::size_t i = 0; i < report.loss.rows; ++i) {
        for (std::size_t j = 0; j < report.loss.cols; ++j) {
            out += std::to_string(i);
            out += ',';
            out += std::to_string(j);
            out += ',';
            out += fmt_double(report.loss.at(i, j));
            out += ',';
            out += fmt_double(report.last_layer_cka.at(i, j));
            out += '\n';
        }
    }
    return out;
}

}  // namespace crash
