#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "crash/errors.hpp"
#include "crash/model.hpp"
#include "crash/numerics.hpp"
#include "crash/rng.hpp"
#include "doctest.h"

using namespace crash;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 9;
    c.d_model = 4;
    c.n_heads = 2;
    c.n_layers = 2;
    c.d_ff = 8;
    c.max_seq_len = 12;
    return c;
}

LossBatch one_batch(const std::vector<TokenSeq>& inputs) {
    LossBatch b;
    for (const TokenSeq& in : inputs) {
        TokenSeq input(in.begin(), in.end() - 1);
        TokenSeq target(in.begin() + 1, in.end());
        b.inputs.push_back(input);
        b.targets.push_back(target);
        b.loss_mask.emplace_back(input.size(), 1);
    }
    return b;
}

FreezeMask all_learnable(const ModelConfig& cfg) {
    FreezeMask m;
    for (std::size_t b = 0; b < cfg.n_layers; ++b) m.learnable_blocks.insert(b);
    m.embeddings_learnable = true;
    m.final_ln_learnable = true;
    return m;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation names the violated constraint") {
    ModelConfig c = tiny_config();
    c.validate();

    auto broken = c;
    broken.vocab_size = 0;
    CHECK_THROWS_AS(broken.validate(), ConfigError);
    broken = c;
    broken.n_layers = 1;
    CHECK_THROWS_AS(broken.validate(), ConfigError);
    broken = c;
    broken.d_model = 5;  // not divisible by n_heads = 2
    CHECK_THROWS_AS(broken.validate(), ConfigError);
    broken = c;
    broken.ln_eps = 0.0;
    CHECK_THROWS_AS(broken.validate(), ConfigError);
}

TEST_CASE("block naming keeps lexicographic order") {
    CHECK(block_tensor_name(7, "wq") == "block_007.wq");
    CHECK(block_tensor_name(10, "wq") == "block_010.wq");
    CHECK(block_tensor_name(7, "wq") < block_tensor_name(10, "wq"));
    CHECK(block_fields().size() == 12);
}

TEST_CASE("census lists every tensor with its shape") {
    ModelConfig c = tiny_config();
    auto census = tensor_census(c);
    // 4 globals + 12 per block.
    CHECK(census.size() == 4 + 12 * c.n_layers);
    CHECK(census.at("token_embedding") == std::make_pair<std::size_t, std::size_t>(9, 4));
    CHECK(census.at("pos_embedding") == std::make_pair<std::size_t, std::size_t>(12, 4));
    CHECK(census.at("block_001.w_ff1") == std::make_pair<std::size_t, std::size_t>(4, 8));
    CHECK(census.at("block_001.b_ff1") == std::make_pair<std::size_t, std::size_t>(1, 8));
    CHECK(census.at("block_000.wo") == std::make_pair<std::size_t, std::size_t>(4, 4));
    CHECK(census.at("final_ln_gain") == std::make_pair<std::size_t, std::size_t>(1, 4));
}

TEST_CASE("init_checkpoint is deterministic and well formed") {
    ModelConfig c = tiny_config();
    Checkpoint a = init_checkpoint(c, 123);
    Checkpoint b = init_checkpoint(c, 123);
    Checkpoint other = init_checkpoint(c, 124);
    check_census(a);

    REQUIRE(a.tensors.size() == b.tensors.size());
    for (const auto& [name, mat] : a.tensors) CHECK(mat == b.tensors.at(name));
    CHECK(a.tensors.at("token_embedding") != other.tensors.at("token_embedding"));

    // Layer-norm gains start at one, every bias at zero.
    for (double v : a.tensors.at("block_000.ln1_gain").data) CHECK(v == 1.0);
    for (double v : a.tensors.at("final_ln_gain").data) CHECK(v == 1.0);
    for (double v : a.tensors.at("block_001.b_ff1").data) CHECK(v == 0.0);
    for (double v : a.tensors.at("final_ln_bias").data) CHECK(v == 0.0);
}

TEST_CASE("check_census rejects missing, extra and mis-shaped tensors") {
    Checkpoint ckpt = init_checkpoint(tiny_config(), 1);

    Checkpoint missing = ckpt;
    missing.tensors.erase("block_001.wv");
    CHECK_THROWS_AS(check_census(missing), ShapeError);

    Checkpoint extra = ckpt;
    extra.tensors.emplace("block_002.wq", Mat(4, 4));
    CHECK_THROWS_AS(check_census(extra), ShapeError);

    Checkpoint bent = ckpt;
    bent.tensors.at("block_000.wq") = Mat(4, 5);
    CHECK_THROWS_AS(check_census(bent), ShapeError);
}

TEST_CASE("forward produces one T x vocab logit matrix per sample") {
    Checkpoint ckpt = init_checkpoint(tiny_config(), 7);
    std::vector<TokenSeq> batch = {{0, 3, 5}, {1, 2, 4, 6, 8}};
    ForwardResult r = forward(ckpt, batch, false);
    REQUIRE(r.logits.size() == 2);
    CHECK(r.logits[0].rows == 3);
    CHECK(r.logits[0].cols == 9);
    CHECK(r.logits[1].rows == 5);
    CHECK(r.trace.samples.empty());
}

TEST_CASE("forward is causal") {
    Checkpoint ckpt = init_checkpoint(tiny_config(), 7);
    TokenSeq base = {0, 3, 5, 2, 7};
    TokenSeq bent = base;
    bent[3] = 8;
    ForwardResult r = forward(ckpt, {base, bent}, false);
    // Positions before the edit see identical context, so identical logits.
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t v = 0; v < 9; ++v)
            CHECK(r.logits[0].at(t, v) == r.logits[1].at(t, v));
    // The edited position itself must differ somewhere.
    bool differs = false;
    for (std::size_t v = 0; v < 9; ++v)
        if (r.logits[0].at(3, v) != r.logits[1].at(3, v)) differs = true;
    CHECK(differs);
}

TEST_CASE("captured trace decomposes the forward pass exactly") {
    Checkpoint ckpt = init_checkpoint(tiny_config(), 19);
    TokenSeq seq = {0, 4, 8, 1};
    ForwardResult r = forward(ckpt, {seq}, true);
    const SampleTrace& trace = r.trace.samples.at(0);
    REQUIRE(trace.h.size() == 3);  // h_0, h_1, h_2

    // h_0 is token embedding plus position embedding.
    const Mat& tok = ckpt.tensors.at("token_embedding");
    const Mat& pos = ckpt.tensors.at("pos_embedding");
    for (std::size_t t = 0; t < seq.size(); ++t)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(trace.h[0].at(t, j) == tok.at(seq[t], j) + pos.at(t, j));

    // Each trace step is one apply_block, and the logits are the final
    // layer norm pushed through the tied unembedding. All bit-exact.
    CHECK(apply_block(ckpt, 0, trace.h[0]) == trace.h[1]);
    CHECK(apply_block(ckpt, 1, trace.h[1]) == trace.h[2]);
    Mat yf = layer_norm(trace.h[2], ckpt.tensors.at("final_ln_gain"),
                        ckpt.tensors.at("final_ln_bias"), ckpt.config.ln_eps);
    CHECK(matmul(yf, transpose(tok)) == r.logits[0]);

    for (std::uint8_t v : trace.valid) CHECK(v == 1);
}

TEST_CASE("attention rows are causal probability distributions") {
    Checkpoint ckpt = init_checkpoint(tiny_config(), 23);
    TokenSeq seq = {0, 1, 2, 3, 4, 5};
    ForwardResult r = forward(ckpt, {seq}, true);
    REQUIRE(r.attention.size() == 1);
    REQUIRE(r.attention[0].size() == 2);        // slots
    REQUIRE(r.attention[0][0].size() == 2);     // heads
    for (const auto& head : r.attention[0][1]) {
        REQUIRE(head.rows == seq.size());
        REQUIRE(head.cols == seq.size());
        for (std::size_t t = 0; t < head.rows; ++t) {
            double sum = 0.0;
            for (std::size_t j = 0; j < head.cols; ++j) {
                if (j > t) {
                    CHECK(head.at(t, j) == 0.0);
                } else {
                    CHECK(head.at(t, j) >= 0.0);
                    sum += head.at(t, j);
                }
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("slot programs rearrange block execution") {
    Checkpoint ckpt = init_checkpoint(tiny_config(), 31);
    TokenSeq seq = {0, 5, 3};

    // Explicit identity program equals the default.
    ForwardResult def = forward(ckpt, {seq}, false);
    ForwardResult ident = forward(ckpt, {seq}, false, {0, 1});
    CHECK(def.logits[0] == ident.logits[0]);

    // A one-slot program runs exactly one block.
    ForwardResult single = forward(ckpt, {seq}, true, {1});
    CHECK(single.trace.samples[0].h.size() == 2);
    CHECK(apply_block(ckpt, 1, single.trace.samples[0].h[0]) == single.trace.samples[0].h[1]);

    // Repeats are allowed; out-of-range blocks are not.
    ForwardResult rep = forward(ckpt, {seq}, true, {0, 0, 1, 0});
    CHECK(rep.trace.samples[0].h.size() == 5);
    CHECK_THROWS_AS(forward(ckpt, {seq}, false, {2}), InputError);
}

TEST_CASE("sequence validation") {
    Checkpoint ckpt = init_checkpoint(tiny_config(), 1);
    CHECK_THROWS_AS(forward(ckpt, {TokenSeq{}}, false), InputError);
    CHECK_THROWS_AS(forward(ckpt, {TokenSeq{0, 9}}, false), InputError);  // token = vocab
    TokenSeq toolong(13, 0);
    CHECK_THROWS_AS(forward(ckpt, {toolong}, false), InputError);
}

TEST_CASE("layer_norm matches a scalar reimplementation") {
    Rng rng(3);
    Mat x(5, 4);
    for (double& v : x.data) v = rng.gauss() * 3.0 + 1.0;
    Mat gain(1, 4, {1.0, 0.5, 2.0, 1.5});
    Mat bias(1, 4, {0.1, -0.2, 0.0, 0.3});
    const double eps = 1e-5;
    Mat got = layer_norm(x, gain, bias, eps);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < 4; ++j) mean += x.at(i, j);
        mean /= 4.0;
        double var = 0.0;
        for (std::size_t j = 0; j < 4; ++j) var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
        var /= 4.0;  // biased
        for (std::size_t j = 0; j < 4; ++j) {
            double want = (x.at(i, j) - mean) / std::sqrt(var + eps) * gain.at(0, j) +
                          bias.at(0, j);
            CHECK(got.at(i, j) == doctest::Approx(want).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(layer_norm(x, Mat(1, 3), bias, eps), ShapeError);
}

TEST_CASE("freeze mask expands to sorted tensor names") {
    ModelConfig c = tiny_config();
    FreezeMask m;
    m.learnable_blocks = {1};
    auto names = m.learnable_tensor_names(c);
    CHECK(names.size() == 12);
    for (const std::string& n : names) CHECK(n.rfind("block_001.", 0) == 0);
    CHECK(std::is_sorted(names.begin(), names.end()));

    m.embeddings_learnable = true;
    m.final_ln_learnable = true;
    names = m.learnable_tensor_names(c);
    CHECK(names.size() == 16);
    CHECK(std::find(names.begin(), names.end(), "token_embedding") != names.end());
    CHECK(std::find(names.begin(), names.end(), "pos_embedding") != names.end());
    CHECK(std::find(names.begin(), names.end(), "final_ln_gain") != names.end());
    CHECK(std::is_sorted(names.begin(), names.end()));
}

TEST_CASE("loss_and_grads covers exactly the learnable tensors") {
    Checkpoint ckpt = init_checkpoint(tiny_config(), 77);
    LossBatch batch = one_batch({{0, 3, 5, 2}, {1, 8, 4}});

    FreezeMask partial;
    partial.learnable_blocks = {0};
    LossGrads lg = loss_and_grads(ckpt, batch, partial);
    CHECK(std::isfinite(lg.loss));
    CHECK(lg.n_positions == 3 + 2);
    CHECK(lg.grads.size() == 12);
    for (const auto& [name, g] : lg.grads) {
        CHECK(name.rfind("block_000.", 0) == 0);
        CHECK(g.same_shape(ckpt.tensors.at(name)));
    }

    // The loss itself must not depend on the mask.
    LossGrads full = loss_and_grads(ckpt, batch, all_learnable(ckpt.config));
    CHECK(full.loss == lg.loss);
    CHECK(full.grads.size() == 4 + 24);
}

TEST_CASE("masked positions do not contribute to the loss") {
    Checkpoint ckpt = init_checkpoint(tiny_config(), 78);
    LossBatch batch = one_batch({{0, 3, 5, 2, 7}});
    FreezeMask mask = all_learnable(ckpt.config);

    // Keep only position 2; compare against scoring that transition alone.
    batch.loss_mask[0] = {0, 0, 1, 0};
    LossGrads masked = loss_and_grads(ckpt, batch, mask);
    CHECK(masked.n_positions == 1);

    ForwardResult r = forward(ckpt, {batch.inputs[0]}, false);
    Mat p = softmax_rows(r.logits[0]);
    double want = -std::log(p.at(2, batch.targets[0][2]));
    CHECK(masked.loss == doctest::Approx(want).epsilon(1e-12));

    // All-zero mask is an error (mean over zero positions).
    batch.loss_mask[0] = {0, 0, 0, 0};
    CHECK_THROWS_AS(loss_and_grads(ckpt, batch, mask), InputError);
}

TEST_CASE("analytic gradients match central finite differences") {
    ModelConfig c = tiny_config();
    Checkpoint ckpt = init_checkpoint(c, 99);
    LossBatch batch = one_batch({{0, 3, 5, 2}, {1, 8, 4, 6}});
    FreezeMask mask = all_learnable(c);

    LossGrads lg = loss_and_grads(ckpt, batch, mask);
    const double eps = 1e-5;
    double worst = 0.0;
    for (auto& [name, grad] : lg.grads) {
        Mat& w = ckpt.tensors.at(name);
        for (std::size_t i = 0; i < w.data.size(); ++i) {
            const double keep = w.data[i];
            w.data[i] = keep + eps;
            const double up = loss_and_grads(ckpt, batch, mask).loss;
            w.data[i] = keep - eps;
            const double down = loss_and_grads(ckpt, batch, mask).loss;
            w.data[i] = keep;
            const double fd = (up - down) / (2.0 * eps);
            // Floor the denominator above the FD cancellation noise
            // (~|loss| * 1e-16 / eps), which swamps near-zero gradients.
            const double rel = std::abs(fd - grad.data[i]) /
                               std::max({std::abs(fd), std::abs(grad.data[i]), 1e-3});
            if (rel > worst) worst = rel;
        }
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("shared-slot gradients equal the unrolled duplicate-and-sum model") {
    ModelConfig c = tiny_config();
    Checkpoint shared = init_checkpoint(c, 55);
    const std::vector<std::size_t> slots = {0, 1, 0};

    // Unroll: 3 blocks, block 2 a copy of block 0.
    ModelConfig cu = c;
    cu.n_layers = 3;
    Checkpoint unrolled;
    unrolled.config = cu;
    unrolled.tensors = shared.tensors;
    for (const std::string& f : block_fields())
        unrolled.tensors.emplace(block_tensor_name(2, f),
                                 shared.tensors.at(block_tensor_name(0, f)));
    check_census(unrolled);

    LossBatch batch = one_batch({{0, 3, 5, 2, 7}, {1, 8, 4}});
    LossGrads g_shared = loss_and_grads(shared, batch, all_learnable(c), slots);
    LossGrads g_unrolled = loss_and_grads(unrolled, batch, all_learnable(cu));

    CHECK(g_shared.loss == g_unrolled.loss);
    for (const std::string& f : block_fields()) {
        const Mat& s0 = g_shared.grads.at(block_tensor_name(0, f));
        const Mat& u0 = g_unrolled.grads.at(block_tensor_name(0, f));
        const Mat& u2 = g_unrolled.grads.at(block_tensor_name(2, f));
        for (std::size_t i = 0; i < s0.data.size(); ++i)
            CHECK(s0.data[i] == doctest::Approx(u0.data[i] + u2.data[i]).epsilon(1e-10));
        const Mat& s1 = g_shared.grads.at(block_tensor_name(1, f));
        const Mat& u1 = g_unrolled.grads.at(block_tensor_name(1, f));
        for (std::size_t i = 0; i < s1.data.size(); ++i)
            CHECK(s1.data[i] == doctest::Approx(u1.data[i]).epsilon(1e-12));
    }
    for (std::size_t i = 0; i < g_shared.grads.at("token_embedding").data.size(); ++i)
        CHECK(g_shared.grads.at("token_embedding").data[i] ==
              doctest::Approx(g_unrolled.grads.at("token_embedding").data[i]).epsilon(1e-12));
}

}  // TEST_SUITE
