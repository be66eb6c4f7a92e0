#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "crash/analysis.hpp"
#include "crash/errors.hpp"
#include "crash/model.hpp"
#include "crash/rng.hpp"
#include "doctest.h"

using namespace crash;

namespace {

Mat random_mat(Rng& rng, std::size_t r, std::size_t c) {
    Mat m(r, c);
    for (double& v : m.data) v = rng.gauss();
    return m;
}

double trace_of(const Mat& m) {
    double t = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) t += m.at(i, i);
    return t;
}

// Independent CKA route through explicit Gram matrices and the centering
// matrix H = I - 11'/n: CKA = tr(KHLH) / sqrt(tr(KHKH) tr(LHLH)).
double cka_oracle(const Mat& x, const Mat& y) {
    const std::size_t n = x.rows;
    Mat h(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            h.at(i, j) = (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(n);
    const Mat k = matmul(x, transpose(x));
    const Mat l = matmul(y, transpose(y));
    const Mat kh = matmul(k, h);
    const Mat lh = matmul(l, h);
    const double cross = trace_of(matmul(kh, lh));
    const double self_k = trace_of(matmul(kh, kh));
    const double self_l = trace_of(matmul(lh, lh));
    return cross / std::sqrt(self_k * self_l);
}

// Gram-Schmidt on the columns of a random square matrix.
Mat random_orthogonal(Rng& rng, std::size_t p) {
    Mat q = random_mat(rng, p, p);
    for (std::size_t j = 0; j < p; ++j) {
        for (std::size_t prev = 0; prev < j; ++prev) {
            double dot = 0.0;
            for (std::size_t i = 0; i < p; ++i) dot += q.at(i, j) * q.at(i, prev);
            for (std::size_t i = 0; i < p; ++i) q.at(i, j) -= dot * q.at(i, prev);
        }
        double norm = 0.0;
        for (std::size_t i = 0; i < p; ++i) norm += q.at(i, j) * q.at(i, j);
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < p; ++i) q.at(i, j) /= norm;
    }
    return q;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 9;
    c.d_model = 4;
    c.n_heads = 2;
    c.n_layers = 2;
    c.d_ff = 8;
    c.max_seq_len = 10;
    return c;
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("weighted-mean pooling ramps weights over valid tokens") {
    // 4 positions, position 1 padded: valid count 3, denom 1+2+3 = 6.
    SampleTrace trace;
    trace.valid = {1, 0, 1, 1};
    trace.h.push_back(Mat(4, 2, {1, 10, 99, 99, 2, 20, 3, 30}));
    trace.h.push_back(Mat(4, 2, {4, 40, 99, 99, 5, 50, 6, 60}));

    Mat pooled = pool_sample(trace, PoolStrategy::WeightedMean);
    REQUIRE(pooled.rows == 2);
    REQUIRE(pooled.cols == 2);
    CHECK(pooled.at(0, 0) == doctest::Approx((1.0 * 1 + 2.0 * 2 + 3.0 * 3) / 6.0).epsilon(1e-15));
    CHECK(pooled.at(0, 1) == doctest::Approx((10.0 + 2 * 20.0 + 3 * 30.0) / 6.0).epsilon(1e-15));
    CHECK(pooled.at(1, 0) == doctest::Approx((4.0 + 2 * 5.0 + 3 * 6.0) / 6.0).epsilon(1e-15));

    Mat mean = pool_sample(trace, PoolStrategy::Mean);
    CHECK(mean.at(0, 0) == doctest::Approx((1.0 + 2.0 + 3.0) / 3.0).epsilon(1e-15));
    CHECK(mean.at(1, 1) == doctest::Approx((40.0 + 50.0 + 60.0) / 3.0).epsilon(1e-15));

    SampleTrace all_pad = trace;
    all_pad.valid = {0, 0, 0, 0};
    CHECK_THROWS_AS(pool_sample(all_pad, PoolStrategy::Mean), InputError);
}

TEST_CASE("pool_trace stacks one row per sample") {
    Rng rng(8);
    ActivationTrace trace;
    for (int s = 0; s < 3; ++s) {
        SampleTrace st;
        st.valid = {1, 1};
        st.h.push_back(random_mat(rng, 2, 5));
        st.h.push_back(random_mat(rng, 2, 5));
        trace.samples.push_back(std::move(st));
    }
    std::vector<Mat> reps = pool_trace(trace, PoolStrategy::WeightedMean);
    REQUIRE(reps.size() == 2);
    CHECK(reps[0].rows == 3);
    CHECK(reps[0].cols == 5);
    Mat direct = pool_sample(trace.samples[1], PoolStrategy::WeightedMean);
    for (std::size_t j = 0; j < 5; ++j) {
        CHECK(reps[0].at(1, j) == direct.at(0, j));
        CHECK(reps[1].at(1, j) == direct.at(1, j));
    }
}

TEST_CASE("CKA is exactly one against itself") {
    Rng rng(21);
    Mat x = random_mat(rng, 14, 6);
    CHECK(linear_cka(x, x) == 1.0);
}

TEST_CASE("CKA is symmetric and bounded") {
    Rng rng(22);
    for (int rep = 0; rep < 5; ++rep) {
        Mat x = random_mat(rng, 12, 5);
        Mat y = random_mat(rng, 12, 7);
        double ab = linear_cka(x, y);
        double ba = linear_cka(y, x);
        CHECK(std::abs(ab - ba) < 1e-9);
        CHECK(ab > 0.0);
        CHECK(ab < 1.0 + 1e-12);
    }
}

TEST_CASE("CKA ignores orthogonal rotation and isotropic scale") {
    Rng rng(23);
    Mat x = random_mat(rng, 20, 8);
    Mat y = random_mat(rng, 20, 8);
    const double base = linear_cka(x, y);

    Mat q = random_orthogonal(rng, 8);
    CHECK(std::abs(linear_cka(x, matmul(y, q)) - base) < 1e-9);

    Mat scaled = y;
    for (double& v : scaled.data) v *= 3.7;
    CHECK(std::abs(linear_cka(x, scaled) - base) < 1e-9);

    Mat shrunk = x;
    for (double& v : shrunk.data) v *= 1e-4;
    CHECK(std::abs(linear_cka(shrunk, y) - base) < 1e-9);
}

TEST_CASE("CKA agrees with the centered Gram-matrix oracle") {
    Rng rng(24);
    for (int rep = 0; rep < 10; ++rep) {
        const std::size_t n = 4 + rng.below(28);
        Mat x = random_mat(rng, n, 1 + rng.below(16));
        Mat y = random_mat(rng, n, 1 + rng.below(16));
        CHECK(std::abs(linear_cka(x, y) - cka_oracle(x, y)) < 1e-10);
    }
}

TEST_CASE("CKA rejects degenerate input") {
    Mat zero(6, 3);
    Rng rng(25);
    Mat ok = random_mat(rng, 6, 3);
    CHECK_THROWS_AS(linear_cka(zero, ok), DegenerateInputError);
    CHECK_THROWS_AS(linear_cka(ok, zero), DegenerateInputError);

    // Identical rows carry no variance once centered.
    Mat flat(6, 3);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 3; ++j) flat.at(i, j) = 1.0 + static_cast<double>(j);
    CHECK_THROWS_AS(linear_cka(flat, ok), DegenerateInputError);
    // ...but they are fine uncentered.
    CHECK(linear_cka(flat, flat, false) == 1.0);

    Mat tall = random_mat(rng, 7, 3);
    CHECK_THROWS_AS(linear_cka(tall, ok), ShapeError);
    CHECK_THROWS_AS(linear_cka(Mat(1, 3, {1, 2, 3}), Mat(1, 3, {1, 2, 3})), InputError);
}

TEST_CASE("similarity matrix over a live model") {
    Checkpoint ckpt = init_checkpoint(tiny_config(), 41);
    Rng rng(42);
    std::vector<TokenSeq> dataset;
    for (int s = 0; s < 12; ++s) {
        TokenSeq seq(4 + rng.below(4));
        for (std::size_t& t : seq) t = rng.below(9);
        dataset.push_back(seq);
    }
    SimilarityMatrix sim =
        similarity_matrix(ckpt, dataset, PoolStrategy::WeightedMean, 10, "toy");
    REQUIRE(sim.values.rows == 3);  // embedding + 2 blocks
    REQUIRE(sim.values.cols == 3);
    CHECK(sim.n_samples == 10);
    CHECK(sim.dataset_id == "toy");
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(sim.values.at(i, i) == 1.0);
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(sim.values.at(i, j) > 0.0);
            CHECK(sim.values.at(i, j) < 1.0 + 1e-12);
            CHECK(std::abs(sim.values.at(i, j) - sim.values.at(j, i)) < 1e-9);
        }
    }

    std::vector<double> adj = adjacent_similarity(sim);
    REQUIRE(adj.size() == 2);
    CHECK(adj[0] == sim.values.at(0, 1));
    CHECK(adj[1] == sim.values.at(1, 2));

    CHECK_THROWS_AS(similarity_matrix(ckpt, dataset, PoolStrategy::Mean, 1, ""), InputError);
    CHECK_THROWS_AS(similarity_matrix(ckpt, dataset, PoolStrategy::Mean, 13, ""), InputError);
}

TEST_CASE("similarity JSON and CSV round trips") {
    SimilarityMatrix sim;
    sim.values = Mat(2, 2, {1.0, 0.123456789012345678, 0.123456789012345678, 1.0});
    sim.n_samples = 7;
    sim.pooling = PoolStrategy::Mean;
    sim.dataset_id = "unit";

    SimilarityMatrix back = similarity_from_json(similarity_to_json(sim));
    CHECK(back.values == sim.values);
    CHECK(back.n_samples == 7);
    CHECK(back.pooling == PoolStrategy::Mean);
    CHECK(back.dataset_id == "unit");

    std::string csv = similarity_to_csv(sim);
    CHECK(csv.rfind("0,1\n1,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

    CHECK_THROWS_AS(similarity_from_json("nope"), FormatError);
    CHECK_THROWS_AS(similarity_from_json("{\"meta\":{\"n_samples\":2,\"pooling\":\"mean\","
                                         "\"dataset_id\":\"\",\"layers\":3},\"matrix\":[1,2]}"),
                    FormatError);
}

TEST_CASE("logit lens reproduces the final distribution exactly") {
    Checkpoint ckpt = init_checkpoint(tiny_config(), 51);
    TokenSeq seq = {0, 4, 7, 2, 5};
    ForwardResult fwd = forward(ckpt, {seq}, true);
    LensReport lens = logit_lens(fwd.trace.samples[0], ckpt);

    REQUIRE(lens.dist.size() == 3);
    Mat final_probs = softmax_rows(fwd.logits[0]);
    CHECK(lens.dist.back() == final_probs);

    // The last layer is its own reference: KL identically zero.
    for (double kl : lens.kl.back()) CHECK(kl == 0.0);
    CHECK(lens.mean_kl.back() == 0.0);

    for (std::size_t b = 0; b < 3; ++b) {
        // Distributions normalized, KL never negative, top1 is the argmax.
        for (std::size_t t = 0; t < seq.size(); ++t) {
            double sum = 0.0;
            for (std::size_t v = 0; v < 9; ++v) sum += lens.dist[b].at(t, v);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(lens.kl[b][t] >= -1e-12);
            const std::size_t top = lens.top1[b][t];
            for (std::size_t v = 0; v < 9; ++v) CHECK(lens.dist[b].at(t, v) <= lens.dist[b].at(t, top));
        }
        CHECK(lens.mean_kl[b] >= -1e-12);
    }

    // Early layers disagree with the final one on an untrained model.
    CHECK(lens.mean_kl[0] > 0.0);
}

}  // TEST_SUITE
