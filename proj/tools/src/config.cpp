#include "config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>

#include "json.hpp"

namespace crashcli {

namespace {

using nlohmann::json;

void expect_keys(const json& obj, const char* where, std::initializer_list<const char*> keys) {
    if (!obj.is_object()) throw crash::FormatError(std::string(where) + " must be a JSON object");
    for (const auto& item : obj.items()) {
        bool known = false;
        for (const char* k : keys) {
            if (item.key() == k) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw crash::FormatError("unknown key '" + item.key() + "' in " + where);
        }
    }
}

template <typename T>
void maybe(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) obj.at(key).get_to(out);
}

void parse_sizes(const json& obj, const char* where, crash::TaskSizes& sizes) {
    expect_keys(obj, where,
                {"n_train", "n_eval", "n_symbols", "n_pairs", "modulus", "seq_len", "pattern_min",
                 "pattern_max"});
    maybe(obj, "n_train", sizes.n_train);
    maybe(obj, "n_eval", sizes.n_eval);
    maybe(obj, "n_symbols", sizes.n_symbols);
    maybe(obj, "n_pairs", sizes.n_pairs);
    maybe(obj, "modulus", sizes.modulus);
    maybe(obj, "seq_len", sizes.seq_len);
    maybe(obj, "pattern_min", sizes.pattern_min);
    maybe(obj, "pattern_max", sizes.pattern_max);
}

void train_fields(const json& obj, crash::TrainConfig& train) {
    maybe(obj, "lr", train.lr);
    maybe(obj, "steps", train.steps);
    maybe(obj, "batch", train.batch);
    maybe(obj, "grad_clip", train.grad_clip);
    maybe(obj, "beta1", train.beta1);
    maybe(obj, "beta2", train.beta2);
    maybe(obj, "eps", train.eps);
}

void parse_train(const json& obj, const char* where, crash::TrainConfig& train) {
    expect_keys(obj, where, {"lr", "steps", "batch", "grad_clip", "beta1", "beta2", "eps"});
    train_fields(obj, train);
}

void parse_task(const json& obj, const char* where, TaskSpec& spec) {
    expect_keys(obj, where, {"kind", "sizes"});
    if (obj.contains("kind")) {
        spec.kind = crash::task_kind_from_name(obj.at("kind").get<std::string>());
    }
    if (obj.contains("sizes")) parse_sizes(obj.at("sizes"), where, spec.sizes);
}

json sizes_to_json(const crash::TaskSizes& s) {
    return {{"n_train", s.n_train},   {"n_eval", s.n_eval},
            {"n_symbols", s.n_symbols}, {"n_pairs", s.n_pairs},
            {"modulus", s.modulus},   {"seq_len", s.seq_len},
            {"pattern_min", s.pattern_min}, {"pattern_max", s.pattern_max}};
}

json train_to_json(const crash::TrainConfig& t) {
    return {{"lr", t.lr},           {"steps", t.steps},   {"batch", t.batch},
            {"grad_clip", t.grad_clip}, {"beta1", t.beta1}, {"beta2", t.beta2},
            {"eps", t.eps}};
}

}  // namespace

PipelineConfig default_config() {
    PipelineConfig cfg;
    cfg.model.vocab_size = 32;
    cfg.model.d_model = 32;
    cfg.model.n_heads = 4;
    cfg.model.n_layers = 8;
    cfg.model.d_ff = 128;
    cfg.model.max_seq_len = 48;

    cfg.pretrain_tasks = {crash::TaskKind::KeyValueRecall, crash::TaskKind::CharLm};
    cfg.pretrain_train.steps = 400;
    cfg.pretrain_train.batch = 8;

    cfg.target.kind = crash::TaskKind::KeyValueRecall;
    cfg.support.kind = crash::TaskKind::CharLm;

    cfg.offsite.k = 4;
    cfg.offsite.n_learnable = 4;
    cfg.offsite.n_samples = 256;
    cfg.offsite.train.steps = 200;
    cfg.offsite.train.batch = 8;
    return cfg;
}

void apply_master_seed(PipelineConfig& cfg, std::uint64_t master) {
    cfg.seeds.master = master;
    cfg.seeds.init = master * 1000 + 1;
    cfg.seeds.pretrain_data = master * 1000 + 2;
    cfg.seeds.pretrain_train = master * 1000 + 3;
    cfg.seeds.target_data = master * 1000 + 4;
    cfg.seeds.support_data = master * 1000 + 5;
    cfg.seeds.train = master * 1000 + 6;
}

PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw crash::InputError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();

    PipelineConfig cfg = default_config();
    try {
        const json j = json::parse(buf.str());
        expect_keys(j, "config",
                    {"model", "seeds", "pretrain", "target", "support", "analysis", "emulator",
                     "train", "full_ft", "landscape", "lens_sample"});

        if (j.contains("model")) {
            const json& m = j.at("model");
            expect_keys(m, "model",
                        {"vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq_len",
                         "ln_eps"});
            maybe(m, "vocab_size", cfg.model.vocab_size);
            maybe(m, "d_model", cfg.model.d_model);
            maybe(m, "n_heads", cfg.model.n_heads);
            maybe(m, "n_layers", cfg.model.n_layers);
            maybe(m, "d_ff", cfg.model.d_ff);
            maybe(m, "max_seq_len", cfg.model.max_seq_len);
            maybe(m, "ln_eps", cfg.model.ln_eps);
        }
        if (j.contains("seeds")) {
            const json& s = j.at("seeds");
            expect_keys(s, "seeds",
                        {"master", "init", "pretrain_data", "pretrain_train", "target_data",
                         "support_data", "train"});
            std::uint64_t master = cfg.seeds.master;
            maybe(s, "master", master);
            apply_master_seed(cfg, master);
            maybe(s, "init", cfg.seeds.init);
            maybe(s, "pretrain_data", cfg.seeds.pretrain_data);
            maybe(s, "pretrain_train", cfg.seeds.pretrain_train);
            maybe(s, "target_data", cfg.seeds.target_data);
            maybe(s, "support_data", cfg.seeds.support_data);
            maybe(s, "train", cfg.seeds.train);
        }
        if (j.contains("pretrain")) {
            const json& p = j.at("pretrain");
            expect_keys(p, "pretrain",
                        {"tasks", "sizes", "lr", "steps", "batch", "grad_clip", "beta1", "beta2",
                         "eps"});
            if (p.contains("tasks")) {
                cfg.pretrain_tasks.clear();
                for (const json& name : p.at("tasks")) {
                    cfg.pretrain_tasks.push_back(
                        crash::task_kind_from_name(name.get<std::string>()));
                }
            }
            if (p.contains("sizes")) parse_sizes(p.at("sizes"), "pretrain.sizes", cfg.pretrain_sizes);
            train_fields(p, cfg.pretrain_train);  // keys already vetted above
        }
        if (j.contains("target")) parse_task(j.at("target"), "target", cfg.target);
        if (j.contains("support")) parse_task(j.at("support"), "support", cfg.support);
        if (j.contains("analysis")) {
            const json& a = j.at("analysis");
            expect_keys(a, "analysis", {"pooling", "n_samples", "center"});
            if (a.contains("pooling")) {
                cfg.offsite.pooling =
                    crash::pool_strategy_from_name(a.at("pooling").get<std::string>());
            }
            maybe(a, "n_samples", cfg.offsite.n_samples);
            maybe(a, "center", cfg.offsite.center);
        }
        if (j.contains("emulator")) {
            const json& e = j.at("emulator");
            expect_keys(e, "emulator",
                        {"strategy", "k", "n_learnable", "protect_bottom", "protect_top", "lcr"});
            if (e.contains("strategy")) {
                cfg.offsite.strategy =
                    crash::emulator_strategy_from_name(e.at("strategy").get<std::string>());
            }
            maybe(e, "k", cfg.offsite.k);
            maybe(e, "n_learnable", cfg.offsite.n_learnable);
            maybe(e, "protect_bottom", cfg.offsite.protect_bottom);
            maybe(e, "protect_top", cfg.offsite.protect_top);
            if (e.contains("lcr")) {
                const std::vector<std::size_t> lcr = e.at("lcr").get<std::vector<std::size_t>>();
                if (lcr.size() != 3) throw crash::FormatError("emulator.lcr must be [l, c, r]");
                cfg.offsite.lcr_l = lcr[0];
                cfg.offsite.lcr_c = lcr[1];
                cfg.offsite.lcr_r = lcr[2];
            }
        }
        if (j.contains("train")) parse_train(j.at("train"), "train", cfg.offsite.train);
        maybe(j, "full_ft", cfg.offsite.run_full_ft);
        if (j.contains("landscape")) {
            const json& l = j.at("landscape");
            expect_keys(l, "landscape", {"n_points", "nx", "ny", "margin"});
            maybe(l, "n_points", cfg.n_points);
            maybe(l, "nx", cfg.grid.nx);
            maybe(l, "ny", cfg.grid.ny);
            maybe(l, "margin", cfg.grid.margin);
        }
        maybe(j, "lens_sample", cfg.lens_sample);
    } catch (const json::exception& e) {
        throw crash::FormatError("bad config '" + path + "': " + e.what());
    }
    return cfg;
}

std::string config_to_json(const PipelineConfig& cfg) {
    json j;
    j["model"] = {{"vocab_size", cfg.model.vocab_size}, {"d_model", cfg.model.d_model},
                  {"n_heads", cfg.model.n_heads},       {"n_layers", cfg.model.n_layers},
                  {"d_ff", cfg.model.d_ff},             {"max_seq_len", cfg.model.max_seq_len},
                  {"ln_eps", cfg.model.ln_eps}};
    j["seeds"] = {{"master", cfg.seeds.master},
                  {"init", cfg.seeds.init},
                  {"pretrain_data", cfg.seeds.pretrain_data},
                  {"pretrain_train", cfg.seeds.pretrain_train},
                  {"target_data", cfg.seeds.target_data},
                  {"support_data", cfg.seeds.support_data},
                  {"train", cfg.seeds.train}};
    json kinds = json::array();
    for (crash::TaskKind k : cfg.pretrain_tasks) kinds.push_back(crash::task_kind_name(k));
    json pretrain = train_to_json(cfg.pretrain_train);
    pretrain["tasks"] = std::move(kinds);
    pretrain["sizes"] = sizes_to_json(cfg.pretrain_sizes);
    j["pretrain"] = std::move(pretrain);
    j["target"] = {{"kind", crash::task_kind_name(cfg.target.kind)},
                   {"sizes", sizes_to_json(cfg.target.sizes)}};
    j["support"] = {{"kind", crash::task_kind_name(cfg.support.kind)},
                    {"sizes", sizes_to_json(cfg.support.sizes)}};
    j["analysis"] = {{"pooling", crash::pool_strategy_name(cfg.offsite.pooling)},
                     {"n_samples", cfg.offsite.n_samples},
                     {"center", cfg.offsite.center}};
    j["emulator"] = {{"strategy", crash::emulator_strategy_name(cfg.offsite.strategy)},
                     {"k", cfg.offsite.k},
                     {"n_learnable", cfg.offsite.n_learnable},
                     {"protect_bottom", cfg.offsite.protect_bottom},
                     {"protect_top", cfg.offsite.protect_top},
                     {"lcr", {cfg.offsite.lcr_l, cfg.offsite.lcr_c, cfg.offsite.lcr_r}}};
    j["train"] = train_to_json(cfg.offsite.train);
    j["full_ft"] = cfg.offsite.run_full_ft;
    j["landscape"] = {{"n_points", cfg.n_points},
                      {"nx", cfg.grid.nx},
                      {"ny", cfg.grid.ny},
                      {"margin", cfg.grid.margin}};
    j["lens_sample"] = cfg.lens_sample;
    return j.dump(2) + "\n";
}

crash::TaskDataset build_target(const PipelineConfig& cfg) {
    return crash::make_task(cfg.target.kind, cfg.seeds.target_data, cfg.target.sizes);
}

crash::TaskDataset build_support(const PipelineConfig& cfg) {
    return crash::make_task(cfg.support.kind, cfg.seeds.support_data, cfg.support.sizes);
}

std::vector<crash::TaskDataset> build_pretrain_mixture(const PipelineConfig& cfg) {
    std::vector<crash::TaskDataset> mixture;
    mixture.reserve(cfg.pretrain_tasks.size());
    for (std::size_t i = 0; i < cfg.pretrain_tasks.size(); ++i) {
        mixture.push_back(
            crash::make_task(cfg.pretrain_tasks[i], cfg.seeds.pretrain_data + i, cfg.pretrain_sizes));
    }
    return mixture;
}

crash::OffsiteSettings resolved_offsite(const PipelineConfig& cfg) {
    crash::OffsiteSettings settings = cfg.offsite;
    settings.train.seed = cfg.seeds.train;
    return settings;
}

}  // namespace crashcli
