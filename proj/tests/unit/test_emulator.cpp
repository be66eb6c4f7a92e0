#include <cstdint>
#include <string>
#include <vector>

#include "crash/checkpoint_io.hpp"
#include "crash/emulator.hpp"
#include "crash/errors.hpp"
#include "crash/model.hpp"
#include "crash/rng.hpp"
#include "doctest.h"

using namespace crash;

namespace {

ModelConfig four_block_config() {
    ModelConfig c;
    c.vocab_size = 9;
    c.d_model = 4;
    c.n_heads = 2;
    c.n_layers = 4;
    c.d_ff = 8;
    c.max_seq_len = 12;
    return c;
}

// Symmetric layer matrix that makes blocks 1 and 2 near-duplicates.
SimilarityMatrix paired_sim() {
    SimilarityMatrix sim;
    sim.values = Mat(5, 5);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) sim.values.at(i, j) = i == j ? 1.0 : 0.1;
    sim.values.at(2, 3) = sim.values.at(3, 2) = 0.95;  // blocks 1,2
    return sim;
}

}  // namespace

TEST_SUITE("emulator") {

TEST_CASE("strategy names round trip") {
    for (EmulatorStrategy s :
         {EmulatorStrategy::Crash, EmulatorStrategy::CrashNoShare, EmulatorStrategy::UniformLcr}) {
        CHECK(emulator_strategy_from_name(emulator_strategy_name(s)) == s);
    }
    CHECK_THROWS_AS(emulator_strategy_from_name("magic"), InputError);
}

TEST_CASE("evenly spaced learnable ids") {
    const std::vector<std::size_t> retained = {2, 5, 7, 11, 13};
    CHECK(evenly_spaced_learnable(retained, 0).empty());
    CHECK(evenly_spaced_learnable(retained, 1) == std::vector<std::size_t>{7});
    CHECK(evenly_spaced_learnable(retained, 2) == std::vector<std::size_t>{2, 13});
    CHECK(evenly_spaced_learnable(retained, 3) == std::vector<std::size_t>{2, 7, 13});
    CHECK(evenly_spaced_learnable(retained, 4) == std::vector<std::size_t>{2, 5, 11, 13});
    CHECK(evenly_spaced_learnable(retained, 5) == retained);
    CHECK_THROWS_AS(evenly_spaced_learnable(retained, 6), ParameterError);

    CHECK(evenly_spaced_learnable({4, 9}, 1) == std::vector<std::size_t>{4});
}

TEST_CASE("crash emulator keeps medoids and maps slots through them") {
    Checkpoint full = init_checkpoint(four_block_config(), 7);
    SimilarityMatrix sim = paired_sim();

    Emulator em = build_crash_emulator(full, sim, 3, 2, true);
    CHECK(em.spec.original_L == 4);
    CHECK(em.spec.retained == std::vector<std::size_t>{0, 1, 3});
    CHECK(em.spec.slot_map == std::vector<std::size_t>{0, 1, 1, 3});
    CHECK(em.spec.learnable == std::vector<std::size_t>{0, 3});
    CHECK(em.spec.strategy == EmulatorStrategy::Crash);
    CHECK(em.spec.full_config_hash == config_hash(full.config));

    // Reduced checkpoint holds the retained blocks renumbered densely.
    CHECK(em.model.config.n_layers == 3);
    check_census(em.model);
    for (const std::string& f : block_fields()) {
        CHECK(em.model.tensors.at(block_tensor_name(0, f)) ==
              full.tensors.at(block_tensor_name(0, f)));
        CHECK(em.model.tensors.at(block_tensor_name(1, f)) ==
              full.tensors.at(block_tensor_name(1, f)));
        CHECK(em.model.tensors.at(block_tensor_name(2, f)) ==
              full.tensors.at(block_tensor_name(3, f)));
    }
    CHECK(em.model.tensors.at("token_embedding") == full.tensors.at("token_embedding"));

    // Slot program in emulator coordinates.
    CHECK(emulator_slots(em.spec) == std::vector<std::size_t>{0, 1, 1, 2});

    // Sharing makes the emulator equivalent to running the full model with
    // block 2 swapped for block 1.
    std::vector<TokenSeq> probe = {{0, 3, 5, 2}, {1, 8, 4, 6, 7}};
    ForwardResult via_em = forward(em.model, probe, false, emulator_slots(em.spec));
    ForwardResult via_full = forward(full, probe, false, {0, 1, 1, 3});
    for (std::size_t s = 0; s < probe.size(); ++s) CHECK(via_em.logits[s] == via_full.logits[s]);

    FreezeMask mask = emulator_freeze_mask(em.spec);
    CHECK(mask.learnable_blocks == std::set<std::size_t>{0, 2});
    CHECK_FALSE(mask.embeddings_learnable);
    CHECK_FALSE(mask.final_ln_learnable);

    Emulator noshare = build_crash_emulator(full, sim, 3, 2, false);
    CHECK(noshare.spec.strategy == EmulatorStrategy::CrashNoShare);
    CHECK(noshare.spec.slot_map.empty());
    CHECK(emulator_slots(noshare.spec).empty());
}

TEST_CASE("k = L sharing is the identity emulator") {
    Checkpoint full = init_checkpoint(four_block_config(), 8);
    SimilarityMatrix sim = paired_sim();
    Emulator em = build_crash_emulator(full, sim, 4, 4, true);
    CHECK(em.spec.retained == std::vector<std::size_t>{0, 1, 2, 3});
    CHECK(em.spec.slot_map == std::vector<std::size_t>{0, 1, 2, 3});

    std::vector<TokenSeq> probe = {{0, 2, 4, 8, 1}};
    ForwardResult a = forward(full, probe, false);
    ForwardResult b = forward(em.model, probe, false, emulator_slots(em.spec));
    CHECK(a.logits[0] == b.logits[0]);
}

TEST_CASE("crash emulator parameter validation") {
    Checkpoint full = init_checkpoint(four_block_config(), 9);
    SimilarityMatrix sim = paired_sim();
    CHECK_THROWS_AS(build_crash_emulator(full, sim, 0, 0, true), ParameterError);
    CHECK_THROWS_AS(build_crash_emulator(full, sim, 5, 1, true), ParameterError);
    CHECK_THROWS_AS(build_crash_emulator(full, sim, 1, 1, true), ParameterError);  // 1 block kept

    SimilarityMatrix bent = sim;
    bent.values = Mat(4, 4);
    CHECK_THROWS_AS(build_crash_emulator(full, bent, 2, 1, true), ShapeError);
}

TEST_CASE("uniform l-c-r emulator") {
    ModelConfig cfg = four_block_config();
    cfg.n_layers = 6;
    Checkpoint full = init_checkpoint(cfg, 10);

    Emulator em = build_uniform_emulator(full, 1, 2, 1);
    CHECK(em.spec.retained == std::vector<std::size_t>{0, 1, 4, 5});
    CHECK(em.spec.learnable == std::vector<std::size_t>{0, 5});
    CHECK(em.spec.strategy == EmulatorStrategy::UniformLcr);
    CHECK(em.spec.slot_map.empty());
    CHECK(em.spec.has_lcr);
    CHECK(em.spec.lcr_l == 1);
    CHECK(em.spec.lcr_c == 2);
    CHECK(em.spec.lcr_r == 1);
    CHECK(em.model.config.n_layers == 4);

    // c = 1 keeps the middle of the middle.
    Emulator mid = build_uniform_emulator(full, 1, 1, 1);
    CHECK(mid.spec.retained == std::vector<std::size_t>{0, 2, 5});

    CHECK_THROWS_AS(build_uniform_emulator(full, 3, 0, 3), ParameterError);
    CHECK_THROWS_AS(build_uniform_emulator(full, 1, 5, 1), ParameterError);
}

TEST_CASE("spec JSON round trips every field") {
    Checkpoint full = init_checkpoint(four_block_config(), 11);
    Emulator em = build_crash_emulator(full, paired_sim(), 3, 2, true);
    EmulatorSpec back = emulator_spec_from_json(emulator_spec_to_json(em.spec));
    CHECK(back.original_L == em.spec.original_L);
    CHECK(back.retained == em.spec.retained);
    CHECK(back.slot_map == em.spec.slot_map);
    CHECK(back.learnable == em.spec.learnable);
    CHECK(back.strategy == em.spec.strategy);
    CHECK(back.has_lcr == em.spec.has_lcr);
    CHECK(back.full_config_hash == em.spec.full_config_hash);

    ModelConfig six = four_block_config();
    six.n_layers = 6;
    Emulator lcr = build_uniform_emulator(init_checkpoint(six, 12), 1, 2, 1);
    EmulatorSpec lback = emulator_spec_from_json(emulator_spec_to_json(lcr.spec));
    CHECK(lback.has_lcr);
    CHECK(lback.lcr_l == 1);
    CHECK(lback.lcr_c == 2);
    CHECK(lback.lcr_r == 1);
    CHECK(lback.slot_map.empty());

    CHECK_THROWS_AS(emulator_spec_from_json("[]"), FormatError);
    CHECK_THROWS_AS(emulator_spec_from_json("{\"original_L\": 4}"), FormatError);
}

TEST_CASE("slot and mask lookups reject unretained blocks") {
    EmulatorSpec spec;
    spec.original_L = 4;
    spec.retained = {0, 2};
    spec.slot_map = {0, 0, 2, 1};  // block 1 was not retained
    CHECK_THROWS_AS(emulator_slots(spec), InputError);
    spec.slot_map = {0, 0, 2, 2};
    CHECK(emulator_slots(spec) == std::vector<std::size_t>{0, 0, 1, 1});

    spec.learnable = {1};
    CHECK_THROWS_AS(emulator_freeze_mask(spec), InputError);
    spec.learnable = {2};
    CHECK(emulator_freeze_mask(spec).learnable_blocks == std::set<std::size_t>{1});
}

TEST_CASE("plug_in transplants exactly the learnable blocks") {
    Checkpoint full = init_checkpoint(four_block_config(), 13);
    Emulator em = build_crash_emulator(full, paired_sim(), 3, 2, true);

    // Pretend fine-tuning nudged the learnable blocks and the frozen one.
    Checkpoint tuned = em.model;
    for (const std::string& f : block_fields()) {
        for (double& v : tuned.tensors.at(block_tensor_name(0, f)).data) v += 0.25;
        for (double& v : tuned.tensors.at(block_tensor_name(2, f)).data) v -= 0.5;
    }

    auto [plugged, report] = plug_in(full, tuned, em.spec);
    check_census(plugged);

    // Learnable ids 0 and 3 replaced from emulator blocks 0 and 2.
    CHECK(report.replaced.size() == 24);
    CHECK(report.untouched_count == plugged.tensors.size() - 24);
    for (const std::string& f : block_fields()) {
        CHECK(plugged.tensors.at(block_tensor_name(0, f)) ==
              tuned.tensors.at(block_tensor_name(0, f)));
        CHECK(plugged.tensors.at(block_tensor_name(3, f)) ==
              tuned.tensors.at(block_tensor_name(2, f)));
        // Frozen blocks keep the original weights.
        CHECK(plugged.tensors.at(block_tensor_name(1, f)) ==
              full.tensors.at(block_tensor_name(1, f)));
        CHECK(plugged.tensors.at(block_tensor_name(2, f)) ==
              full.tensors.at(block_tensor_name(2, f)));

        const auto& [before, after] = report.hashes.at(block_tensor_name(0, f));
        CHECK(before == tensor_hash(full.tensors.at(block_tensor_name(0, f))));
        CHECK(after == tensor_hash(tuned.tensors.at(block_tensor_name(0, f))));
        CHECK(before != after);
    }
    CHECK(plugged.tensors.at("token_embedding") == full.tensors.at("token_embedding"));

    // Zero-delta surgery returns the identical checkpoint, byte for byte.
    auto [unchanged, report0] = plug_in(full, em.model, em.spec);
    CHECK(serialize_checkpoint(unchanged) == serialize_checkpoint(full));
    for (const auto& [name, hashes] : report0.hashes) CHECK(hashes.first == hashes.second);
}

TEST_CASE("plug_in verifies provenance and config agreement") {
    Checkpoint full = init_checkpoint(four_block_config(), 14);
    Emulator em = build_crash_emulator(full, paired_sim(), 3, 2, true);

    ModelConfig other_cfg = four_block_config();
    other_cfg.d_ff = 16;
    Checkpoint other = init_checkpoint(other_cfg, 14);
    CHECK_THROWS_AS(plug_in(other, em.model, em.spec), ProvenanceError);

    // A tuned model too shallow for the spec's learnable ids.
    ModelConfig shallow = four_block_config();
    shallow.n_layers = 2;
    Checkpoint wrong_depth = init_checkpoint(shallow, 15);
    CHECK_THROWS_AS(plug_in(full, wrong_depth, em.spec), InputError);

    EmulatorSpec missing = em.spec;
    missing.retained = {0, 1};
    missing.learnable = {2};  // not retained
    missing.slot_map.clear();
    CHECK_THROWS_AS(plug_in(full, em.model, missing), InputError);
}

}  // TEST_SUITE
