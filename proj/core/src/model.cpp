#include "crash/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "crash/parallel.hpp"
#include "crash/rng.hpp"

namespace crash {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440084436210485;
constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

const Mat& tensor(const Checkpoint& ckpt, const std::string& name) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
        throw ShapeError("checkpoint is missing tensor " + name);
    }
    return it->second;
}

Mat mat_add(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
    Mat out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data[i];
    return out;
}

void add_row_bias(Mat& a, const Mat& bias) {
    for (std::size_t t = 0; t < a.rows; ++t) {
        double* row = a.row(t);
        for (std::size_t j = 0; j < a.cols; ++j) row[j] += bias.data[j];
    }
}

// Sum of rows as a 1 x cols matrix, accumulated into out.
void acc_col_sums(const Mat& a, Mat& out) {
    for (std::size_t t = 0; t < a.rows; ++t) {
        const double* row = a.row(t);
        for (std::size_t j = 0; j < a.cols; ++j) out.data[j] += row[j];
    }
}

void acc_mat(Mat& into, const Mat& from) {
    for (std::size_t i = 0; i < into.size(); ++i) into.data[i] += from.data[i];
}

struct LnStash {
    Mat xhat;
    std::vector<double> inv;
};

Mat ln_forward(const Mat& x, const Mat& gain, const Mat& bias, double eps, LnStash* stash) {
    const std::size_t d = x.cols;
    Mat out(x.rows, d);
    if (stash != nullptr) {
        stash->xhat = Mat(x.rows, d);
        stash->inv.assign(x.rows, 0.0);
    }
    for (std::size_t t = 0; t < x.rows; ++t) {
        const double* row = x.row(t);
        double sum = 0.0;
        for (std::size_t j = 0; j < d; ++j) sum += row[j];
        const double mean = sum / static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        double* orow = out.row(t);
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (row[j] - mean) * inv;
            orow[j] = gain.data[j] * xh + bias.data[j];
            if (stash != nullptr) stash->xhat.at(t, j) = xh;
        }
        if (stash != nullptr) stash->inv[t] = inv;
    }
    return out;
}

// dgain/dbias are accumulated; returns dx.
Mat ln_backward(const Mat& dy, const LnStash& st, const Mat& gain, Mat& dgain, Mat& dbias) {
    const std::size_t d = dy.cols;
    Mat dx(dy.rows, d);
    for (std::size_t t = 0; t < dy.rows; ++t) {
        const double* dyr = dy.row(t);
        const double* xh = st.xhat.row(t);
        double m1 = 0.0;
        double m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dgain.data[j] += dyr[j] * xh[j];
            dbias.data[j] += dyr[j];
            const double dxh = dyr[j] * gain.data[j];
            m1 += dxh;
            m2 += dxh * xh[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        double* dxr = dx.row(t);
        for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dyr[j] * gain.data[j];
            dxr[j] = st.inv[t] * (dxh - m1 - xh[j] * m2);
        }
    }
    return dx;
}

struct BlockStash {
    Mat x_in;
    LnStash ln1;
    Mat a, q, k, v;
    std::vector<Mat> p;  // per head, T x T, zero above the diagonal
    Mat o;
    Mat x_mid;
    LnStash ln2;
    Mat a2, z1, g1;
};

struct BlockTensors {
    const Mat *ln1_gain, *ln1_bias, *wq, *wk, *wv, *wo;
    const Mat *ln2_gain, *ln2_bias, *w_ff1, *b_ff1, *w_ff2, *b_ff2;
};

BlockTensors block_tensors(const Checkpoint& ckpt, std::size_t block) {
    return BlockTensors{
        &tensor(ckpt, block_tensor_name(block, "ln1_gain")),
        &tensor(ckpt, block_tensor_name(block, "ln1_bias")),
        &tensor(ckpt, block_tensor_name(block, "wq")),
        &tensor(ckpt, block_tensor_name(block, "wk")),
        &tensor(ckpt, block_tensor_name(block, "wv")),
        &tensor(ckpt, block_tensor_name(block, "wo")),
        &tensor(ckpt, block_tensor_name(block, "ln2_gain")),
        &tensor(ckpt, block_tensor_name(block, "ln2_bias")),
        &tensor(ckpt, block_tensor_name(block, "w_ff1")),
        &tensor(ckpt, block_tensor_name(block, "b_ff1")),
        &tensor(ckpt, block_tensor_name(block, "w_ff2")),
        &tensor(ckpt, block_tensor_name(block, "b_ff2")),
    };
}

Mat block_forward_impl(const Checkpoint& ckpt, std::size_t block, const Mat& h,
                       BlockStash* stash, std::vector<Mat>* attn_probs) {
    const ModelConfig& cfg = ckpt.config;
    const std::size_t T = h.rows;
    const std::size_t d = cfg.d_model;
    const std::size_t H = cfg.n_heads;
    const std::size_t dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const BlockTensors w = block_tensors(ckpt, block);

    LnStash ln1s;
    Mat a = ln_forward(h, *w.ln1_gain, *w.ln1_bias, cfg.ln_eps, stash != nullptr ? &ln1s : nullptr);
    Mat q = matmul(a, *w.wq);
    Mat k = matmul(a, *w.wk);
    Mat v = matmul(a, *w.wv);

    Mat o(T, d);
    std::vector<Mat> probs;
    const bool keep_probs = stash != nullptr || attn_probs != nullptr;
    if (keep_probs) probs.reserve(H);
    std::vector<double> scores;
    for (std::size_t hd = 0; hd < H; ++hd) {
        const std::size_t off = hd * dh;
        Mat p(T, T);
        for (std::size_t t = 0; t < T; ++t) {
            scores.assign(t + 1, 0.0);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t u = 0; u <= t; ++u) {
                double s = 0.0;
                for (std::size_t m = 0; m < dh; ++m) s += q.at(t, off + m) * k.at(u, off + m);
                s *= scale;
                scores[u] = s;
                if (s > mx) mx = s;
            }
            double z = 0.0;
            for (std::size_t u = 0; u <= t; ++u) {
                const double e = std::exp(scores[u] - mx);
                p.at(t, u) = e;
                z += e;
            }
            for (std::size_t u = 0; u <= t; ++u) p.at(t, u) /= z;
            for (std::size_t m = 0; m < dh; ++m) {
                double s = 0.0;
                for (std::size_t u = 0; u <= t; ++u) s += p.at(t, u) * v.at(u, off + m);
                o.at(t, off + m) = s;
            }
        }
        if (keep_probs) probs.push_back(std::move(p));
    }

    Mat attn = matmul(o, *w.wo);
    Mat x_mid = mat_add(h, attn);

    LnStash ln2s;
    Mat a2 =
        ln_forward(x_mid, *w.ln2_gain, *w.ln2_bias, cfg.ln_eps, stash != nullptr ? &ln2s : nullptr);
    Mat z1 = matmul(a2, *w.w_ff1);
    add_row_bias(z1, *w.b_ff1);
    Mat g1(T, cfg.d_ff);
    for (std::size_t i = 0; i < z1.size(); ++i) g1.data[i] = gelu(z1.data[i]);
    Mat f = matmul(g1, *w.w_ff2);
    add_row_bias(f, *w.b_ff2);
    Mat x_out = mat_add(x_mid, f);
    check_finite(x_out, "block output");

    if (attn_probs != nullptr) *attn_probs = probs;
    if (stash != nullptr) {
        stash->x_in = h;
        stash->ln1 = std::move(ln1s);
        stash->a = std::move(a);
        stash->q = std::move(q);
        stash->k = std::move(k);
        stash->v = std::move(v);
        stash->p = std::move(probs);
        stash->o = std::move(o);
        stash->x_mid = std::move(x_mid);
        stash->ln2 = std::move(ln2s);
        stash->a2 = std::move(a2);
        stash->z1 = std::move(z1);
        stash->g1 = std::move(g1);
    }
    return x_out;
}

// Accumulates the block's parameter grads into g and returns dx_in.
Mat block_backward(const Checkpoint& ckpt, std::size_t block, const BlockStash& st,
                   const Mat& dx_out, std::map<std::string, Mat>& g) {
    const ModelConfig& cfg = ckpt.config;
    const std::size_t T = dx_out.rows;
    const std::size_t d = cfg.d_model;
    const std::size_t H = cfg.n_heads;
    const std::size_t dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const BlockTensors w = block_tensors(ckpt, block);
    auto grad = [&g, block](const char* field) -> Mat& {
        return g.at(block_tensor_name(block, field));
    };

    // FFN: x_out = x_mid + gelu(ln2(x_mid) W1 + b1) W2 + b2
    const Mat& df = dx_out;
    acc_mat(grad("w_ff2"), matmul(transpose(st.g1), df));
    acc_col_sums(df, grad("b_ff2"));
    Mat dg1 = matmul(df, transpose(*w.w_ff2));
    Mat dz1(T, cfg.d_ff);
    for (std::size_t i = 0; i < dz1.size(); ++i) {
        dz1.data[i] = dg1.data[i] * gelu_grad(st.z1.data[i]);
    }
    acc_mat(grad("w_ff1"), matmul(transpose(st.a2), dz1));
    acc_col_sums(dz1, grad("b_ff1"));
    Mat da2 = matmul(dz1, transpose(*w.w_ff1));
    Mat dx_mid = ln_backward(da2, st.ln2, *w.ln2_gain, grad("ln2_gain"), grad("ln2_bias"));
    acc_mat(dx_mid, dx_out);  // residual

    // Attention: x_mid = x_in + (heads(ln1(x_in))) Wo
    acc_mat(grad("wo"), matmul(transpose(st.o), dx_mid));
    Mat d_o = matmul(dx_mid, transpose(*w.wo));
    Mat dq(T, d), dk(T, d), dv(T, d);
    for (std::size_t hd = 0; hd < H; ++hd) {
        const std::size_t off = hd * dh;
        const Mat& p = st.p[hd];
        for (std::size_t t = 0; t < T; ++t) {
            // dp over u <= t, then softmax backward on the row
            double ssum = 0.0;
            std::vector<double> dp(t + 1, 0.0);
            for (std::size_t u = 0; u <= t; ++u) {
                double s = 0.0;
                for (std::size_t m = 0; m < dh; ++m) s += d_o.at(t, off + m) * st.v.at(u, off + m);
                dp[u] = s;
                ssum += s * p.at(t, u);
            }
            for (std::size_t u = 0; u <= t; ++u) {
                const double ds = p.at(t, u) * (dp[u] - ssum) * scale;
                for (std::size_t m = 0; m < dh; ++m) {
                    dq.at(t, off + m) += ds * st.k.at(u, off + m);
                    dk.at(u, off + m) += ds * st.q.at(t, off + m);
                }
            }
            for (std::size_t u = 0; u <= t; ++u) {
                const double pu = p.at(t, u);
                for (std::size_t m = 0; m < dh; ++m) {
                    dv.at(u, off + m) += pu * d_o.at(t, off + m);
                }
            }
        }
    }
    acc_mat(grad("wq"), matmul(transpose(st.a), dq));
    acc_mat(grad("wk"), matmul(transpose(st.a), dk));
    acc_mat(grad("wv"), matmul(transpose(st.a), dv));
    Mat da = matmul(dq, transpose(*w.wq));
    acc_mat(da, matmul(dk, transpose(*w.wk)));
    acc_mat(da, matmul(dv, transpose(*w.wv)));
    Mat dx_in = ln_backward(da, st.ln1, *w.ln1_gain, grad("ln1_gain"), grad("ln1_bias"));
    acc_mat(dx_in, dx_mid);  // residual
    return dx_in;
}

Mat embed_sequence(const Checkpoint& ckpt, const TokenSeq& seq) {
    const Mat& tok = tensor(ckpt, "token_embedding");
    const Mat& pos = tensor(ckpt, "pos_embedding");
    const std::size_t d = ckpt.config.d_model;
    Mat h0(seq.size(), d);
    for (std::size_t t = 0; t < seq.size(); ++t) {
        const double* trow = tok.row(seq[t]);
        const double* prow = pos.row(t);
        double* out = h0.row(t);
        for (std::size_t j = 0; j < d; ++j) out[j] = trow[j] + prow[j];
    }
    return h0;
}

std::vector<std::size_t> resolve_slots(const ModelConfig& cfg,
                                       const std::vector<std::size_t>& slots) {
    if (slots.empty()) {
        std::vector<std::size_t> program(cfg.n_layers);
        std::iota(program.begin(), program.end(), std::size_t{0});
        return program;
    }
    for (std::size_t s = 0; s < slots.size(); ++s) {
        if (slots[s] >= cfg.n_layers) {
            throw InputError("slot " + std::to_string(s) + " names block " +
                             std::to_string(slots[s]) + " but the model has " +
                             std::to_string(cfg.n_layers) + " blocks");
        }
    }
    return slots;
}

void validate_sequence(const ModelConfig& cfg, const TokenSeq& seq, std::size_t sample) {
    if (seq.empty()) {
        throw InputError("sample " + std::to_string(sample) + " is an empty sequence");
    }
    if (seq.size() > cfg.max_seq_len) {
        throw InputError("sample " + std::to_string(sample) + " has length " +
                         std::to_string(seq.size()) + " > max_seq_len " +
                         std::to_string(cfg.max_seq_len));
    }
    for (std::size_t t = 0; t < seq.size(); ++t) {
        if (seq[t] >= cfg.vocab_size) {
            throw InputError("token " + std::to_string(seq[t]) + " at position " +
                             std::to_string(t) + " of sample " + std::to_string(sample) +
                             " is outside vocab of size " + std::to_string(cfg.vocab_size));
        }
    }
}

struct SampleStash {
    std::vector<BlockStash> blocks;
    LnStash lnf;
    Mat yf;
    Mat logits;
};

// Forward for one sample over an explicit program. Fills stash for
// training, trace/attention for capture.
Mat sample_forward(const Checkpoint& ckpt, const TokenSeq& seq,
                   const std::vector<std::size_t>& program, const Mat& unembed,
                   SampleStash* stash, SampleTrace* trace,
                   std::vector<std::vector<Mat>>* attention) {
    Mat h = embed_sequence(ckpt, seq);
    if (trace != nullptr) {
        trace->h.clear();
        trace->h.push_back(h);
        trace->valid.assign(seq.size(), 1);
    }
    if (attention != nullptr) attention->clear();
    if (stash != nullptr) stash->blocks.assign(program.size(), BlockStash{});
    for (std::size_t s = 0; s < program.size(); ++s) {
        std::vector<Mat> probs;
        h = block_forward_impl(ckpt, program[s], h,
                               stash != nullptr ? &stash->blocks[s] : nullptr,
                               attention != nullptr ? &probs : nullptr);
        if (trace != nullptr) trace->h.push_back(h);
        if (attention != nullptr) attention->push_back(std::move(probs));
    }
    const Mat& fg = tensor(ckpt, "final_ln_gain");
    const Mat& fb = tensor(ckpt, "final_ln_bias");
    Mat yf = ln_forward(h, fg, fb, ckpt.config.ln_eps, stash != nullptr ? &stash->lnf : nullptr);
    Mat logits = matmul(yf, unembed);
    if (stash != nullptr) {
        stash->yf = std::move(yf);
        stash->logits = logits;
    }
    return logits;
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
    if (d_model < 1) throw ConfigError("d_model must be >= 1");
    if (n_heads < 1) throw ConfigError("n_heads must be >= 1");
    if (d_ff < 1) throw ConfigError("d_ff must be >= 1");
    if (max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
    if (n_layers < 2) throw ConfigError("n_layers must be >= 2 (clustering needs two blocks)");
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                          std::to_string(n_heads));
    }
    if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
}

const std::vector<std::string>& block_fields() {
    static const std::vector<std::string> fields = {
        "ln1_gain", "ln1_bias", "wq",       "wk",       "wv",    "wo",
        "ln2_gain", "ln2_bias", "w_ff1",    "b_ff1",    "w_ff2", "b_ff2",
    };
    return fields;
}

std::string block_tensor_name(std::size_t block, const std::string& field) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "block_%03zu.", block);
    return std::string(buf) + field;
}

std::map<std::string, std::pair<std::size_t, std::size_t>> tensor_census(
    const ModelConfig& config) {
    const std::size_t d = config.d_model;
    std::map<std::string, std::pair<std::size_t, std::size_t>> census;
    census["token_embedding"] = {config.vocab_size, d};
    census["pos_embedding"] = {config.max_seq_len, d};
    census["final_ln_gain"] = {1, d};
    census["final_ln_bias"] = {1, d};
    for (std::size_t b = 0; b < config.n_layers; ++b) {
        census[block_tensor_name(b, "ln1_gain")] = {1, d};
        census[block_tensor_name(b, "ln1_bias")] = {1, d};
        census[block_tensor_name(b, "wq")] = {d, d};
        census[block_tensor_name(b, "wk")] = {d, d};
        census[block_tensor_name(b, "wv")] = {d, d};
        census[block_tensor_name(b, "wo")] = {d, d};
        census[block_tensor_name(b, "ln2_gain")] = {1, d};
        census[block_tensor_name(b, "ln2_bias")] = {1, d};
        census[block_tensor_name(b, "w_ff1")] = {d, config.d_ff};
        census[block_tensor_name(b, "b_ff1")] = {1, config.d_ff};
        census[block_tensor_name(b, "w_ff2")] = {config.d_ff, d};
        census[block_tensor_name(b, "b_ff2")] = {1, d};
    }
    return census;
}

void check_census(const Checkpoint& ckpt) {
    const auto expected = tensor_census(ckpt.config);
    for (const auto& [name, shape] : expected) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) {
            throw ShapeError("checkpoint is missing tensor " + name);
        }
        if (it->second.rows != shape.first || it->second.cols != shape.second) {
            throw ShapeError("tensor " + name + " has shape " + it->second.shape_str() +
                             ", expected " + std::to_string(shape.first) + "x" +
                             std::to_string(shape.second));
        }
    }
    for (const auto& [name, mat] : ckpt.tensors) {
        (void)mat;
        if (expected.find(name) == expected.end()) {
            throw ShapeError("checkpoint has unexpected tensor " + name);
        }
    }
}

Checkpoint init_checkpoint(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Checkpoint ckpt;
    ckpt.config = config;
    Rng rng(seed);
    for (const auto& [name, shape] : tensor_census(config)) {
        Mat m(shape.first, shape.second);
        const std::string field =
            name.find('.') == std::string::npos ? name : name.substr(name.find('.') + 1);
        const bool is_gain = field.size() >= 4 && field.substr(field.size() - 4) == "gain";
        const bool is_bias = (field.size() >= 4 && field.substr(field.size() - 4) == "bias") ||
                             field == "b_ff1" || field == "b_ff2";
        if (is_gain) {
            std::fill(m.data.begin(), m.data.end(), 1.0);
        } else if (!is_bias) {
            for (double& v : m.data) v = 0.02 * rng.gauss();
        }
        ckpt.tensors.emplace(name, std::move(m));
    }
    return ckpt;
}

std::vector<std::string> FreezeMask::learnable_tensor_names(const ModelConfig& config) const {
    std::vector<std::string> names;
    for (std::size_t b : learnable_blocks) {
        if (b >= config.n_layers) {
            throw InputError("freeze mask names block " + std::to_string(b) +
                             " but the model has " + std::to_string(config.n_layers) + " blocks");
        }
        for (const std::string& f : block_fields()) names.push_back(block_tensor_name(b, f));
    }
    if (embeddings_learnable) {
        names.push_back("token_embedding");
        names.push_back("pos_embedding");
    }
    if (final_ln_learnable) {
        names.push_back("final_ln_gain");
        names.push_back("final_ln_bias");
    }
    std::sort(names.begin(), names.end());
    return names;
}

ForwardResult forward(const Checkpoint& ckpt, const std::vector<TokenSeq>& tokens, bool capture,
                      const std::vector<std::size_t>& slots) {
    ckpt.config.validate();
    check_census(ckpt);
    const std::vector<std::size_t> program = resolve_slots(ckpt.config, slots);
    for (std::size_t s = 0; s < tokens.size(); ++s) validate_sequence(ckpt.config, tokens[s], s);

    ForwardResult result;
    result.logits.resize(tokens.size());
    if (capture) {
        result.trace.samples.resize(tokens.size());
        result.attention.resize(tokens.size());
    }
    const Mat unembed = transpose(tensor(ckpt, "token_embedding"));
    parallel_for(tokens.size(), [&](std::size_t s) {
        result.logits[s] = sample_forward(ckpt, tokens[s], program, unembed, nullptr,
                                          capture ? &result.trace.samples[s] : nullptr,
                                          capture ? &result.attention[s] : nullptr);
    });
    return result;
}

Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias, double eps) {
    if (gain.size() != x.cols || bias.size() != x.cols) {
        throw ShapeError("layer_norm: gain/bias do not match row width " +
                         std::to_string(x.cols));
    }
    return ln_forward(x, gain, bias, eps, nullptr);
}

Mat apply_block(const Checkpoint& ckpt, std::size_t block, const Mat& h) {
    ckpt.config.validate();
    check_census(ckpt);
    if (block >= ckpt.config.n_layers) {
        throw InputError("block " + std::to_string(block) + " out of range for " +
                         std::to_string(ckpt.config.n_layers) + " blocks");
    }
    if (h.cols != ckpt.config.d_model || h.rows == 0) {
        throw ShapeError("hidden state " + h.shape_str() + " does not match d_model " +
                         std::to_string(ckpt.config.d_model));
    }
    return block_forward_impl(ckpt, block, h, nullptr, nullptr);
}

LossGrads loss_and_grads(const Checkpoint& ckpt, const LossBatch& batch, const FreezeMask& mask,
                         const std::vector<std::size_t>& slots) {
    ckpt.config.validate();
    check_census(ckpt);
    const std::vector<std::size_t> program = resolve_slots(ckpt.config, slots);
    const std::size_t n = batch.inputs.size();
    if (n == 0) throw InputError("empty batch");
    if (batch.targets.size() != n || batch.loss_mask.size() != n) {
        throw InputError("batch arrays disagree: " + std::to_string(n) + " inputs, " +
                         std::to_string(batch.targets.size()) + " targets, " +
                         std::to_string(batch.loss_mask.size()) + " masks");
    }

    std::size_t total_positions = 0;
    for (std::size_t s = 0; s < n; ++s) {
        validate_sequence(ckpt.config, batch.inputs[s], s);
        const std::size_t len = batch.inputs[s].size();
        if (batch.targets[s].size() != len || batch.loss_mask[s].size() != len) {
            throw InputError("sample " + std::to_string(s) +
                             ": targets/mask length does not match input length " +
                             std::to_string(len));
        }
        for (std::size_t t = 0; t < len; ++t) {
            if (batch.loss_mask[s][t] == 0) continue;
            if (batch.targets[s][t] >= ckpt.config.vocab_size) {
                throw InputError("target " + std::to_string(batch.targets[s][t]) +
                                 " at position " + std::to_string(t) + " of sample " +
                                 std::to_string(s) + " is outside vocab");
            }
            ++total_positions;
        }
    }
    if (total_positions == 0) throw InputError("all loss positions masked");

    const Mat unembed = transpose(tensor(ckpt, "token_embedding"));
    const auto census = tensor_census(ckpt.config);
    std::map<std::string, Mat> zero_grads;
    for (const auto& [name, shape] : census) zero_grads.emplace(name, Mat(shape.first, shape.second));

    std::vector<double> sample_loss(n, 0.0);
    std::vector<std::map<std::string, Mat>> sample_grads(n);
    const double inv_count = 1.0 / static_cast<double>(total_positions);

    parallel_for(n, [&](std::size_t s) {
        SampleStash stash;
        sample_forward(ckpt, batch.inputs[s], program, unembed, &stash, nullptr, nullptr);
        const Mat& logits = stash.logits;
        const std::size_t len = batch.inputs[s].size();
        const std::size_t vocab = ckpt.config.vocab_size;

        Mat dlogits(len, vocab);
        double loss = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
            if (batch.loss_mask[s][t] == 0) continue;
            const double* row = logits.row(t);
            double mx = row[0];
            for (std::size_t j = 1; j < vocab; ++j) {
                if (row[j] > mx) mx = row[j];
            }
            double z = 0.0;
            for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
            const double lse = mx + std::log(z);
            const std::size_t y = batch.targets[s][t];
            loss += lse - row[y];
            double* drow = dlogits.row(t);
            for (std::size_t j = 0; j < vocab; ++j) {
                drow[j] = std::exp(row[j] - lse) * inv_count;
            }
            drow[y] -= inv_count;
        }
        sample_loss[s] = loss;

        std::map<std::string, Mat> g = zero_grads;
        // unembedding path of the tied embedding
        acc_mat(g.at("token_embedding"), matmul(transpose(dlogits), stash.yf));
        Mat dyf = matmul(dlogits, tensor(ckpt, "token_embedding"));
        Mat dh = ln_backward(dyf, stash.lnf, tensor(ckpt, "final_ln_gain"),
                             g.at("final_ln_gain"), g.at("final_ln_bias"));
        for (std::size_t i = program.size(); i-- > 0;) {
            dh = block_backward(ckpt, program[i], stash.blocks[i], dh, g);
        }
        // embedding path
        Mat& demb = g.at("token_embedding");
        Mat& dpos = g.at("pos_embedding");
        for (std::size_t t = 0; t < len; ++t) {
            const double* drow = dh.row(t);
            double* erow = demb.row(batch.inputs[s][t]);
            double* prow = dpos.row(t);
            for (std::size_t j = 0; j < ckpt.config.d_model; ++j) {
                erow[j] += drow[j];
                prow[j] += drow[j];
            }
        }
        sample_grads[s] = std::move(g);
    });

    LossGrads out;
    out.n_positions = total_positions;
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) loss_sum += sample_loss[s];
    out.loss = loss_sum * inv_count;

    const std::vector<std::string> learnable = mask.learnable_tensor_names(ckpt.config);
    for (const std::string& name : learnable) {
        const auto shape = census.at(name);
        Mat total(shape.first, shape.second);
        for (std::size_t s = 0; s < n; ++s) acc_mat(total, sample_grads[s].at(name));
        check_finite(total, name.c_str());
        out.grads.emplace(name, std::move(total));
    }
    return out;
}

}  // namespace crash
