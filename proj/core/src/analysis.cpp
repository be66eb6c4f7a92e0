#include "crash/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "crash/parallel.hpp"
#include "json.hpp"

namespace crash {

namespace {

using nlohmann::json;

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

const char* pool_strategy_name(PoolStrategy s) {
    return s == PoolStrategy::WeightedMean ? "weighted-mean" : "mean";
}

PoolStrategy pool_strategy_from_name(const std::string& name) {
    if (name == "weighted-mean") return PoolStrategy::WeightedMean;
    if (name == "mean") return PoolStrategy::Mean;
    throw InputError("unknown pooling strategy '" + name + "'");
}

Mat pool_sample(const SampleTrace& trace, PoolStrategy strategy) {
    if (trace.h.empty()) throw InputError("empty trace");
    const std::size_t T = trace.h.front().rows;
    const std::size_t d = trace.h.front().cols;
    if (trace.valid.size() != T) {
        throw ShapeError("trace has " + std::to_string(trace.valid.size()) +
                         " validity flags for " + std::to_string(T) + " positions");
    }
    std::size_t n_valid = 0;
    for (std::uint8_t f : trace.valid) n_valid += f != 0 ? 1 : 0;
    if (n_valid == 0) throw InputError("all positions are padding");

    // Weighted mean: w_k = k / sum(1..T') with k 1-based over valid tokens.
    const double denom = strategy == PoolStrategy::WeightedMean
                             ? static_cast<double>(n_valid) * (static_cast<double>(n_valid) + 1.0) / 2.0
                             : static_cast<double>(n_valid);
    Mat out(trace.h.size(), d);
    for (std::size_t layer = 0; layer < trace.h.size(); ++layer) {
        const Mat& h = trace.h[layer];
        if (h.rows != T || h.cols != d) {
            throw ShapeError("layer " + std::to_string(layer) + " has shape " + h.shape_str() +
                             ", expected " + std::to_string(T) + "x" + std::to_string(d));
        }
        double* orow = out.row(layer);
        std::size_t k = 0;
        for (std::size_t t = 0; t < T; ++t) {
            if (trace.valid[t] == 0) continue;
            ++k;
            const double w =
                (strategy == PoolStrategy::WeightedMean ? static_cast<double>(k) : 1.0) / denom;
            const double* hrow = h.row(t);
            for (std::size_t j = 0; j < d; ++j) orow[j] += w * hrow[j];
        }
    }
    check_finite(out, "pool_sample");
    return out;
}

std::vector<Mat> pool_trace(const ActivationTrace& trace, PoolStrategy strategy) {
    if (trace.samples.empty()) throw InputError("empty trace");
    const std::size_t n = trace.samples.size();
    const std::size_t layers = trace.samples.front().h.size();
    const std::size_t d = layers > 0 ? trace.samples.front().h.front().cols : 0;
    std::vector<Mat> reps(layers, Mat(n, d));
    std::vector<Mat> pooled(n);
    parallel_for(n, [&](std::size_t s) {
        if (trace.samples[s].h.size() != layers) {
            throw ShapeError("sample " + std::to_string(s) + " has " +
                             std::to_string(trace.samples[s].h.size()) + " layers, expected " +
                             std::to_string(layers));
        }
        pooled[s] = pool_sample(trace.samples[s], strategy);
    });
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t layer = 0; layer < layers; ++layer) {
            const double* src = pooled[s].row(layer);
            double* dst = reps[layer].row(s);
            std::copy(src, src + d, dst);
        }
    }
    return reps;
}

double linear_cka(const Mat& si, const Mat& sj, bool center) {
    if (si.rows != sj.rows) {
        throw ShapeError("CKA inputs have different sample counts: " + si.shape_str() + " vs " +
                         sj.shape_str());
    }
    if (si.rows < 2) throw InputError("CKA needs at least 2 samples");

    const Mat ci = center ? center_columns(si) : si;
    const Mat cj = center ? center_columns(sj) : sj;

    const double raw_i = frobenius_norm(si);
    const double raw_j = frobenius_norm(sj);
    const double norm_i = frobenius_norm(ci);
    const double norm_j = frobenius_norm(cj);
    // Zero variance after centering means all rows were identical; the
    // threshold is relative so isotropic scaling cannot change the verdict.
    if (norm_i * norm_i <= 1e-20 * raw_i * raw_i || raw_i == 0.0) {
        throw DegenerateInputError("first CKA input has no variance across samples");
    }
    if (norm_j * norm_j <= 1e-20 * raw_j * raw_j || raw_j == 0.0) {
        throw DegenerateInputError("second CKA input has no variance across samples");
    }

    const double cross = frobenius_norm(matmul(transpose(ci), cj));
    const double self_i = frobenius_norm(matmul(transpose(ci), ci));
    const double self_j = frobenius_norm(matmul(transpose(cj), cj));
    return (cross * cross) / (self_j * self_i);
}

SimilarityMatrix similarity_matrix(const Checkpoint& ckpt, const std::vector<TokenSeq>& dataset,
                                   PoolStrategy pooling, std::size_t n_samples,
                                   const std::string& dataset_id, bool center) {
    if (n_samples < 2) throw InputError("similarity needs n_samples >= 2");
    if (dataset.size() < n_samples) {
        throw InputError("dataset supplies " + std::to_string(dataset.size()) +
                         " sequences, need " + std::to_string(n_samples));
    }
    const std::vector<TokenSeq> used(dataset.begin(),
                                     dataset.begin() + static_cast<std::ptrdiff_t>(n_samples));
    const ForwardResult fwd = forward(ckpt, used, true);
    const std::vector<Mat> reps = pool_trace(fwd.trace, pooling);

    SimilarityMatrix sim;
    sim.n_samples = n_samples;
    sim.pooling = pooling;
    sim.dataset_id = dataset_id;
    const std::size_t layers = reps.size();
    sim.values = Mat(layers, layers);
    parallel_for(layers, [&](std::size_t i) {
        for (std::size_t j = 0; j < layers; ++j) {
            sim.values.at(i, j) = linear_cka(reps[i], reps[j], center);
        }
    });
    return sim;
}

std::vector<double> adjacent_similarity(const SimilarityMatrix& sim) {
    const std::size_t layers = sim.values.rows;
    if (sim.values.cols != layers || layers < 2) {
        throw ShapeError("similarity matrix " + sim.values.shape_str() + " is not square");
    }
    std::vector<double> out(layers - 1);
    for (std::size_t i = 0; i + 1 < layers; ++i) out[i] = sim.values.at(i, i + 1);
    return out;
}

std::string similarity_to_json(const SimilarityMatrix& sim) {
    json j;
    j["meta"] = {{"n_samples", sim.n_samples},
                 {"pooling", pool_strategy_name(sim.pooling)},
                 {"dataset_id", sim.dataset_id},
                 {"layers", sim.values.rows}};
    j["matrix"] = sim.values.data;
    return j.dump();
}

SimilarityMatrix similarity_from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        SimilarityMatrix sim;
        const json& meta = j.at("meta");
        sim.n_samples = meta.at("n_samples").get<std::size_t>();
        sim.pooling = pool_strategy_from_name(meta.at("pooling").get<std::string>());
        sim.dataset_id = meta.at("dataset_id").get<std::string>();
        const std::size_t layers = meta.at("layers").get<std::size_t>();
        std::vector<double> values = j.at("matrix").get<std::vector<double>>();
        if (values.size() != layers * layers) {
            throw FormatError("similarity matrix has " + std::to_string(values.size()) +
                              " entries for " + std::to_string(layers) + " layers");
        }
        sim.values = Mat(layers, layers, std::move(values));
        return sim;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad similarity JSON: ") + e.what());
    }
}

std::string similarity_to_csv(const SimilarityMatrix& sim) {
    std::string out;
    for (std::size_t j = 0; j < sim.values.cols; ++j) {
        if (j > 0) out += ',';
        out += std::to_string(j);
    }
    out += '\n';
    for (std::size_t i = 0; i < sim.values.rows; ++i) {
        for (std::size_t j = 0; j < sim.values.cols; ++j) {
            if (j > 0) out += ',';
            out += fmt_double(sim.values.at(i, j));
        }
        out += '\n';
    }
    return out;
}

LensReport logit_lens(const SampleTrace& trace, const Checkpoint& ckpt) {
    ckpt.config.validate();
    check_census(ckpt);
    if (trace.h.empty()) throw InputError("empty trace");
    for (const Mat& h : trace.h) {
        if (h.cols != ckpt.config.d_model) {
            throw InputError("trace width " + std::to_string(h.cols) +
                             " does not match model d_model " +
                             std::to_string(ckpt.config.d_model));
        }
    }

    const Mat unembed = transpose(ckpt.tensors.at("token_embedding"));
    const Mat& fg = ckpt.tensors.at("final_ln_gain");
    const Mat& fb = ckpt.tensors.at("final_ln_bias");

    LensReport report;
    const std::size_t layers = trace.h.size();
    report.dist.resize(layers);
    report.top1.resize(layers);
    report.kl.resize(layers);
    report.mean_kl.assign(layers, 0.0);
    for (std::size_t b = 0; b < layers; ++b) {
        const Mat logits = matmul(layer_norm(trace.h[b], fg, fb, ckpt.config.ln_eps), unembed);
        report.dist[b] = softmax_rows(logits);
    }
    const Mat& final_dist = report.dist.back();
    for (std::size_t b = 0; b < layers; ++b) {
        const Mat& dist = report.dist[b];
        report.top1[b].resize(dist.rows);
        report.kl[b].resize(dist.rows);
        double kl_sum = 0.0;
        for (std::size_t t = 0; t < dist.rows; ++t) {
            const double* row = dist.row(t);
            std::size_t best = 0;
            for (std::size_t v = 1; v < dist.cols; ++v) {
                if (row[v] > row[best]) best = v;
            }
            report.top1[b][t] = best;
            double kl = 0.0;
            const double* frow = final_dist.row(t);
            for (std::size_t v = 0; v < dist.cols; ++v) {
                if (frow[v] > 0.0) kl += frow[v] * std::log(frow[v] / row[v]);
            }
            report.kl[b][t] = kl;
            kl_sum += kl;
        }
        report.mean_kl[b] = kl_sum / static_cast<double>(dist.rows);
    }
    return report;
}

std::string lens_to_json(const LensReport& report) {
    json layers = json::array();
    for (std::size_t b = 0; b < report.top1.size(); ++b) {
        layers.push_back({{"layer", b},
                          {"top1", report.top1[b]},
                          {"kl_to_final", report.kl[b]},
                          {"mean_kl", report.mean_kl[b]}});
    }
    return json{{"layers", layers}}.dump();
}

}  // namespace crash
