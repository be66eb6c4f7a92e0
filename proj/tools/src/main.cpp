#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "crash/checkpoint_io.hpp"
#include "crash/clustering.hpp"
#include "crash/emulator.hpp"
#include "crash/landscape.hpp"
#include "crash/tuning.hpp"

#include "artifacts.hpp"
#include "config.hpp"

namespace {

using crashcli::ArtifactWriter;
using crashcli::PipelineConfig;
using nlohmann::json;

struct CommonOpts {
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
    cmd->add_option("--config", c.config, "pipeline config JSON")->check(CLI::ExistingFile);
    cmd->add_option("--out", c.out, "output directory")->required();
    c.seed_opt = cmd->add_option("--seed", c.seed, "master seed (rederives all seed slots)");
}

PipelineConfig resolve_config(const CommonOpts& c) {
    PipelineConfig cfg =
        c.config.empty() ? crashcli::default_config() : crashcli::load_config(c.config);
    if (c.seed_opt != nullptr && c.seed_opt->count() > 0) {
        crashcli::apply_master_seed(cfg, c.seed);
    }
    return cfg;
}

void note_run_inputs(ArtifactWriter& w, const CommonOpts& c, const PipelineConfig& cfg) {
    if (!c.config.empty()) w.note_input("config", c.config);
    w.note_seed("master", cfg.seeds.master);
    w.note_seed("init", cfg.seeds.init);
    w.note_seed("pretrain_data", cfg.seeds.pretrain_data);
    w.note_seed("pretrain_train", cfg.seeds.pretrain_train);
    w.note_seed("target_data", cfg.seeds.target_data);
    w.note_seed("support_data", cfg.seeds.support_data);
    w.note_seed("train", cfg.seeds.train);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw crash::InputError("cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

crash::TaskDataset task_for(const PipelineConfig& cfg, const std::string& which) {
    return which == "support" ? crashcli::build_support(cfg) : crashcli::build_target(cfg);
}

json entry_json(const crash::EvalEntry& e) {
    json j;
    j["accuracy"] = e.accuracy.has_value() ? json(*e.accuracy) : json(nullptr);
    j["lm_loss"] = e.lm_loss.has_value() ? json(*e.lm_loss) : json(nullptr);
    j["n_items"] = e.n_items;
    j["metric"] = crash::eval_metric(e);
    return j;
}

// Slot programs in an EmulatorSpec index the EMULATOR's blocks; catch the
// obvious mistake of pairing a spec with the wrong checkpoint.
void check_spec_fits(const crash::EmulatorSpec& spec, const crash::Checkpoint& ckpt) {
    if (ckpt.config.n_layers != spec.retained.size()) {
        throw crash::InputError("spec retains " + std::to_string(spec.retained.size()) +
                                " blocks but the checkpoint has " +
                                std::to_string(ckpt.config.n_layers));
    }
}

int run_pretrain(const CommonOpts& c, const PipelineConfig& cfg) {
    ArtifactWriter w("pretrain", c.out);
    note_run_inputs(w, c, cfg);
    crash::TrainConfig train = cfg.pretrain_train;
    train.seed = cfg.seeds.pretrain_train;
    w.note_param("steps", train.steps);
    w.note_param("lr", train.lr);
    w.note_param("batch", train.batch);

    const std::vector<crash::TaskDataset> mixture = crashcli::build_pretrain_mixture(cfg);
    const crash::Checkpoint ckpt = crash::pretrain_model(cfg.model, cfg.seeds.init, mixture, train);
    w.write_bytes("model.ckpt", crash::serialize_checkpoint(ckpt));
    w.write_text("config.json", crashcli::config_to_json(cfg));
    w.finish();
    std::cout << "wrote " << (w.dir() / "model.ckpt").string() << "\n";
    return 0;
}

int run_analyze(const CommonOpts& c, const PipelineConfig& cfg, const std::string& ckpt_path,
                const std::string& which, std::size_t lens_sample) {
    ArtifactWriter w("analyze", c.out);
    note_run_inputs(w, c, cfg);
    w.note_input("ckpt", ckpt_path);
    w.note_param("which", which);
    w.note_param("pooling", crash::pool_strategy_name(cfg.offsite.pooling));
    w.note_param("n_samples", cfg.offsite.n_samples);
    w.note_param("lens_sample", lens_sample);

    const crash::Checkpoint ckpt = crash::load_checkpoint(ckpt_path);
    const crash::TaskDataset task = task_for(cfg, which);
    const std::vector<crash::TokenSeq> inputs = crash::similarity_inputs(task);
    const crash::SimilarityMatrix sim = crash::similarity_matrix(
        ckpt, inputs, cfg.offsite.pooling, cfg.offsite.n_samples, task.id, cfg.offsite.center);
    w.write_text("similarity.json", crash::similarity_to_json(sim));
    w.write_text("similarity.csv", crash::similarity_to_csv(sim));
    w.write_text("adjacent.json", json{{"adjacent", crash::adjacent_similarity(sim)}}.dump());

    if (lens_sample >= inputs.size()) {
        throw crash::InputError("lens sample " + std::to_string(lens_sample) +
                                " out of range, dataset has " + std::to_string(inputs.size()) +
                                " sequences");
    }
    const crash::ForwardResult fwd = crash::forward(ckpt, {inputs[lens_sample]}, true);
    w.write_text("lens.json", crash::lens_to_json(crash::logit_lens(fwd.trace.samples[0], ckpt)));
    w.finish();
    std::cout << "artifacts in " << w.dir().string() << "\n";
    return 0;
}

int run_cluster(const std::string& out, const std::string& sim_path, std::size_t k,
                std::size_t protect_bottom, std::size_t protect_top) {
    ArtifactWriter w("cluster", out);
    w.note_input("sim", sim_path);
    w.note_param("k", k);
    w.note_param("protect_bottom", protect_bottom);
    w.note_param("protect_top", protect_top);

    const crash::SimilarityMatrix sim = crash::similarity_from_json(read_file(sim_path));
    const crash::ClusterAssignment assignment =
        crash::adjacent_cluster(sim, k, protect_bottom, protect_top);
    const std::vector<std::size_t> centers = crash::select_centers(assignment, sim);

    json j;
    j["k"] = k;
    json segments = json::array();
    for (const crash::Segment& s : assignment.segments) segments.push_back({s.begin, s.end});
    j["segments"] = std::move(segments);
    j["centers"] = centers;
    json merges = json::array();
    for (const crash::MergeRecord& m : assignment.merge_log) {
        merges.push_back({{"left_begin", m.left_begin},
                          {"right_begin", m.right_begin},
                          {"linkage", m.linkage}});
    }
    j["merge_log"] = std::move(merges);
    w.write_text("clusters.json", j.dump());
    w.finish();
    std::cout << "wrote " << (w.dir() / "clusters.json").string() << "\n";
    return 0;
}

int run_build_emulator(const CommonOpts& c, const PipelineConfig& cfg, const std::string& ckpt_path,
                       const std::string& sim_path) {
    ArtifactWriter w("build-emulator", c.out);
    note_run_inputs(w, c, cfg);
    w.note_input("ckpt", ckpt_path);
    if (!sim_path.empty()) w.note_input("sim", sim_path);
    w.note_param("strategy", crash::emulator_strategy_name(cfg.offsite.strategy));
    w.note_param("k", cfg.offsite.k);
    w.note_param("n_learnable", cfg.offsite.n_learnable);

    const crash::Checkpoint full = crash::load_checkpoint(ckpt_path);
    crash::SimilarityMatrix sim;
    if (cfg.offsite.strategy != crash::EmulatorStrategy::UniformLcr) {
        if (sim_path.empty()) {
            throw crash::InputError("clustering strategies need --sim (see `analyze`)");
        }
        sim = crash::similarity_from_json(read_file(sim_path));
    }
    const crash::Emulator em = crash::build_emulator(full, sim, cfg.offsite);
    w.write_bytes("emulator.ckpt", crash::serialize_checkpoint(em.model));
    w.write_text("emulator_spec.json", crash::emulator_spec_to_json(em.spec));
    w.finish();
    std::cout << "wrote " << (w.dir() / "emulator.ckpt").string() << "\n";
    return 0;
}

int run_finetune(const CommonOpts& c, const PipelineConfig& cfg, const std::string& ckpt_path,
                 const std::string& spec_path, const std::string& which) {
    ArtifactWriter w("finetune", c.out);
    note_run_inputs(w, c, cfg);
    w.note_input("ckpt", ckpt_path);
    crash::TrainConfig train = cfg.offsite.train;
    train.seed = cfg.seeds.train;
    w.note_param("steps", train.steps);
    w.note_param("lr", train.lr);
    w.note_param("batch", train.batch);
    w.note_param("which", which);

    const crash::Checkpoint model = crash::load_checkpoint(ckpt_path);
    crash::FreezeMask mask;
    std::vector<std::size_t> slots;
    if (!spec_path.empty()) {
        w.note_input("spec", spec_path);
        const crash::EmulatorSpec spec = crash::emulator_spec_from_json(read_file(spec_path));
        check_spec_fits(spec, model);
        mask = crash::emulator_freeze_mask(spec);
        slots = crash::emulator_slots(spec);
    } else {
        for (std::size_t b = 0; b < model.config.n_layers; ++b) mask.learnable_blocks.insert(b);
    }

    const crash::TaskDataset task = task_for(cfg, which);
    const crash::FinetuneResult result = crash::finetune(model, task, mask, train, slots);
    w.write_bytes("tuned.ckpt", crash::serialize_checkpoint(result.model));
    w.write_text("curve.json", json{{"loss_curve", result.loss_curve}}.dump());
    w.finish();
    std::cout << "wrote " << (w.dir() / "tuned.ckpt").string() << "\n";
    return 0;
}

int run_plugin(const std::string& out, const std::string& full_path, const std::string& tuned_path,
               const std::string& spec_path) {
    ArtifactWriter w("plugin", out);
    w.note_input("full", full_path);
    w.note_input("tuned", tuned_path);
    w.note_input("spec", spec_path);

    const crash::Checkpoint full = crash::load_checkpoint(full_path);
    const crash::Checkpoint tuned = crash::load_checkpoint(tuned_path);
    const crash::EmulatorSpec spec = crash::emulator_spec_from_json(read_file(spec_path));
    const auto plugged = crash::plug_in(full, tuned, spec);
    w.write_bytes("plugged.ckpt", crash::serialize_checkpoint(plugged.first));
    w.write_text("plugin_report.json", crash::plugin_report_to_json(plugged.second));
    w.finish();
    std::cout << "wrote " << (w.dir() / "plugged.ckpt").string() << "\n";
    return 0;
}

int run_evaluate(const CommonOpts& c, const PipelineConfig& cfg, const std::string& ckpt_path,
                 const std::string& spec_path, const std::string& which, bool length_norm) {
    ArtifactWriter w("evaluate", c.out);
    note_run_inputs(w, c, cfg);
    w.note_input("ckpt", ckpt_path);
    w.note_param("which", which);
    w.note_param("length_norm", length_norm);

    const crash::Checkpoint ckpt = crash::load_checkpoint(ckpt_path);
    std::vector<std::size_t> slots;
    if (!spec_path.empty()) {
        w.note_input("spec", spec_path);
        const crash::EmulatorSpec spec = crash::emulator_spec_from_json(read_file(spec_path));
        check_spec_fits(spec, ckpt);
        slots = crash::emulator_slots(spec);
    }
    const crash::TaskDataset task = task_for(cfg, which);
    const crash::EvalEntry entry = crash::evaluate(ckpt, task, slots, length_norm);
    w.write_text("eval.json", entry_json(entry).dump());
    w.finish();
    if (entry.accuracy.has_value()) {
        std::cout << "accuracy " << *entry.accuracy << " over " << entry.n_items << " items\n";
    } else {
        std::cout << "lm_loss " << *entry.lm_loss << " over " << entry.n_items << " items\n";
    }
    return 0;
}

int run_offsite(const CommonOpts& c, const PipelineConfig& cfg, const std::string& ckpt_path) {
    ArtifactWriter w("offsite", c.out);
    note_run_inputs(w, c, cfg);
    w.note_input("ckpt", ckpt_path);
    w.note_param("strategy", crash::emulator_strategy_name(cfg.offsite.strategy));
    w.note_param("k", cfg.offsite.k);
    w.note_param("n_learnable", cfg.offsite.n_learnable);
    w.note_param("steps", cfg.offsite.train.steps);

    const crash::Checkpoint full = crash::load_checkpoint(ckpt_path);
    const crash::TaskDataset target = crashcli::build_target(cfg);
    const crash::TaskDataset support = crashcli::build_support(cfg);
    const crash::OffsiteReport rep =
        crash::run_offsite_experiment(full, target, support, crashcli::resolved_offsite(cfg));

    w.write_text("offsite_report.json", crash::offsite_report_to_json(rep));
    const std::string table = crash::offsite_report_table(rep);
    w.write_text("offsite_table.txt", table);
    w.write_text("similarity.json", crash::similarity_to_json(rep.sim));
    w.write_text("similarity.csv", crash::similarity_to_csv(rep.sim));
    w.write_text("emulator_spec.json", crash::emulator_spec_to_json(rep.spec));
    w.finish();
    std::cout << table;
    return 0;
}

int run_sweep(const CommonOpts& c, const PipelineConfig& cfg, const std::string& ckpt_path,
              std::vector<std::size_t> ks) {
    ArtifactWriter w("sweep-k", c.out);
    note_run_inputs(w, c, cfg);
    w.note_input("ckpt", ckpt_path);

    const crash::Checkpoint full = crash::load_checkpoint(ckpt_path);
    if (ks.empty()) {
        for (std::size_t k = 2; k <= full.config.n_layers; ++k) ks.push_back(k);
    }
    w.note_param("ks", ks);
    const crash::TaskDataset target = crashcli::build_target(cfg);
    const crash::TaskDataset support = crashcli::build_support(cfg);
    const crash::SweepResult sweep =
        crash::sweep_k(full, target, support, crashcli::resolved_offsite(cfg), ks);

    w.write_text("sweep.csv", crash::sweep_to_csv(sweep));
    for (std::size_t i = 0; i < sweep.ks.size(); ++i) {
        w.write_text("report_k" + std::to_string(sweep.ks[i]) + ".json",
                     crash::offsite_report_to_json(sweep.reports[i]));
    }
    w.finish();
    std::cout << "wrote " << (w.dir() / "sweep.csv").string() << "\n";
    return 0;
}

int run_interpolate(const CommonOpts& c, const PipelineConfig& cfg, const std::string& a_path,
                    const std::string& b_path, std::size_t n_points, const std::string& which) {
    ArtifactWriter w("interpolate", c.out);
    note_run_inputs(w, c, cfg);
    w.note_input("a", a_path);
    w.note_input("b", b_path);
    w.note_param("n_points", n_points);
    w.note_param("which", which);

    const crash::ParamVector a = crash::flatten(crash::load_checkpoint(a_path));
    const crash::ParamVector b = crash::flatten(crash::load_checkpoint(b_path));
    const crash::CurveReport curve = crash::interpolate(a, b, n_points, task_for(cfg, which));
    w.write_text("curve.json", crash::curve_to_json(curve));
    w.write_text("curve.csv", crash::curve_to_csv(curve));
    w.finish();
    std::cout << "barrier " << curve.barrier << "\n";
    return 0;
}

int run_surface(const CommonOpts& c, const PipelineConfig& cfg, const std::string& origin_path,
                const std::string& a_path, const std::string& b_path, const std::string& which) {
    ArtifactWriter w("surface", c.out);
    note_run_inputs(w, c, cfg);
    w.note_input("origin", origin_path);
    w.note_input("a", a_path);
    w.note_input("b", b_path);
    w.note_param("nx", cfg.grid.nx);
    w.note_param("ny", cfg.grid.ny);
    w.note_param("margin", cfg.grid.margin);
    w.note_param("which", which);

    const crash::ParamVector origin = crash::flatten(crash::load_checkpoint(origin_path));
    const crash::ParamVector a = crash::flatten(crash::load_checkpoint(a_path));
    const crash::ParamVector b = crash::flatten(crash::load_checkpoint(b_path));
    const crash::SurfaceReport rep = surface2d(origin, a, b, cfg.grid, task_for(cfg, which));
    w.write_text("surface.json", crash::surface_to_json(rep));
    w.write_text("surface.csv", crash::surface_to_csv(rep));
    w.finish();
    std::cout << "artifacts in " << w.dir().string() << "\n";
    return 0;
}

int run_cruciality(const CommonOpts& c, const PipelineConfig& cfg, const std::string& ft_path,
                   const std::string& init_path, const std::string& which) {
    ArtifactWriter w("cruciality", c.out);
    note_run_inputs(w, c, cfg);
    w.note_input("ft", ft_path);
    w.note_input("init", init_path);
    w.note_param("which", which);

    const crash::CrucialityReport rep = crash::layer_cruciality(
        crash::load_checkpoint(ft_path), crash::load_checkpoint(init_path), task_for(cfg, which));
    w.write_text("cruciality.json", crash::cruciality_to_json(rep));
    w.finish();
    std::cout << "wrote " << (w.dir() / "cruciality.json").string() << "\n";
    return 0;
}

int run_share_heatmap(const CommonOpts& c, const PipelineConfig& cfg, const std::string& ckpt_path,
                      const std::string& which) {
    ArtifactWriter w("share-heatmap", c.out);
    note_run_inputs(w, c, cfg);
    w.note_input("ckpt", ckpt_path);
    w.note_param("which", which);
    w.note_param("pooling", crash::pool_strategy_name(cfg.offsite.pooling));

    const crash::SharingHeatmap rep = crash::sharing_heatmap(
        crash::load_checkpoint(ckpt_path), task_for(cfg, which), cfg.offsite.pooling);
    w.write_text("heatmap.json", crash::heatmap_to_json(rep));
    w.write_text("heatmap.csv", crash::heatmap_to_csv(rep));
    w.finish();
    std::cout << "artifacts in " << w.dir().string() << "\n";
    return 0;
}

void print_error_json(const std::string& kind, const std::string& message,
                      json extra = json::object()) {
    json j;
    extra["kind"] = kind;
    extra["message"] = message;
    j["error"] = std::move(extra);
    std::cerr << j.dump() << "\n";
}

int exit_code_for(crash::ErrorKind kind) {
    switch (kind) {
        case crash::ErrorKind::Numeric:
        case crash::ErrorKind::Training:
            return 4;
        default:
            return 3;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"workbench for clustering, removing and sharing transformer blocks"};
    app.require_subcommand(1);

    const auto which_check = CLI::IsMember({"target", "support"});
    const auto strategy_check = CLI::IsMember({"crash", "crash-noshare", "uniform-lcr"});
    const CLI::Validator positive_int(
        [](std::string& s) {
            return s == "0" ? std::string("must be at least 1") : std::string();
        },
        "INT>=1");

    CommonOpts pre_c;
    auto* pre = app.add_subcommand("pretrain", "train a fresh full model on the task mixture");
    add_common(pre, pre_c);

    CommonOpts ana_c;
    std::string ana_ckpt, ana_which = "support";
    std::size_t ana_sample = 0;
    auto* ana = app.add_subcommand("analyze", "layer similarity matrix and logit-lens report");
    add_common(ana, ana_c);
    ana->add_option("--ckpt", ana_ckpt, "checkpoint to analyze")->required();
    ana->add_option("--which", ana_which, "task split to pool over")->check(which_check);
    auto* ana_sample_opt = ana->add_option("--sample", ana_sample, "sequence index for the logit lens");

    std::string clu_out, clu_sim;
    std::size_t clu_k = 0, clu_pb = 0, clu_pt = 0;
    auto* clu =
        app.add_subcommand("cluster", "adjacency-constrained clustering of a similarity matrix");
    clu->add_option("--out", clu_out, "output directory")->required();
    clu->add_option("--sim", clu_sim, "similarity.json from `analyze`")->required();
    clu->add_option("--k", clu_k, "number of clusters")->required()->check(positive_int);
    clu->add_option("--protect-bottom", clu_pb, "blocks pinned to singleton clusters at the bottom");
    clu->add_option("--protect-top", clu_pt, "blocks pinned at the top");

    CommonOpts bld_c;
    std::string bld_ckpt, bld_sim, bld_strategy;
    std::size_t bld_k = 0, bld_n = 0, bld_pb = 0, bld_pt = 0;
    std::vector<std::size_t> bld_lcr;
    auto* bld = app.add_subcommand("build-emulator", "drop and share blocks into an emulator");
    add_common(bld, bld_c);
    bld->add_option("--ckpt", bld_ckpt, "full checkpoint")->required();
    bld->add_option("--sim", bld_sim, "similarity.json (clustering strategies)");
    auto* bld_k_opt = bld->add_option("--k", bld_k, "number of clusters")->check(positive_int);
    auto* bld_n_opt = bld->add_option("--n-learnable", bld_n, "learnable retained blocks");
    auto* bld_strategy_opt =
        bld->add_option("--strategy", bld_strategy, "crash | crash-noshare | uniform-lcr")
            ->check(strategy_check);
    auto* bld_pb_opt = bld->add_option("--protect-bottom", bld_pb, "pinned bottom blocks");
    auto* bld_pt_opt = bld->add_option("--protect-top", bld_pt, "pinned top blocks");
    auto* bld_lcr_opt = bld->add_option("--lcr", bld_lcr, "l c r for uniform-lcr")->expected(3);

    CommonOpts ft_c;
    std::string ft_ckpt, ft_spec, ft_which = "target";
    std::size_t ft_steps = 0, ft_batch = 0;
    double ft_lr = 0.0;
    auto* ft = app.add_subcommand("finetune",
                                  "Adam fine-tune (an emulator spec freezes non-learnable blocks)");
    add_common(ft, ft_c);
    ft->add_option("--ckpt", ft_ckpt, "checkpoint to tune")->required();
    ft->add_option("--spec", ft_spec, "emulator_spec.json; omit to tune every block");
    ft->add_option("--which", ft_which, "task to tune on")->check(which_check);
    auto* ft_steps_opt = ft->add_option("--steps", ft_steps, "optimizer steps");
    auto* ft_lr_opt = ft->add_option("--lr", ft_lr, "learning rate");
    auto* ft_batch_opt = ft->add_option("--batch", ft_batch, "batch size");

    std::string plg_out, plg_full, plg_tuned, plg_spec;
    auto* plg = app.add_subcommand("plugin", "copy tuned learnable blocks back into the full model");
    plg->add_option("--out", plg_out, "output directory")->required();
    plg->add_option("--full", plg_full, "original full checkpoint")->required();
    plg->add_option("--tuned", plg_tuned, "tuned emulator checkpoint")->required();
    plg->add_option("--spec", plg_spec, "emulator_spec.json")->required();

    CommonOpts ev_c;
    std::string ev_ckpt, ev_spec, ev_which = "target";
    bool ev_lennorm = false;
    auto* ev = app.add_subcommand("evaluate", "score a checkpoint on a task");
    add_common(ev, ev_c);
    ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
    ev->add_option("--spec", ev_spec, "emulator_spec.json (runs the slot program)");
    ev->add_option("--which", ev_which, "task")->check(which_check);
    ev->add_flag("--length-norm", ev_lennorm, "divide option scores by token count");

    CommonOpts off_c;
    std::string off_ckpt, off_strategy;
    std::size_t off_k = 0, off_n = 0, off_steps = 0;
    auto* off = app.add_subcommand("offsite", "full five-setting experiment");
    add_common(off, off_c);
    off->add_option("--ckpt", off_ckpt, "pretrained full checkpoint")->required();
    auto* off_k_opt = off->add_option("--k", off_k, "number of clusters")->check(positive_int);
    auto* off_n_opt = off->add_option("--n-learnable", off_n, "learnable retained blocks");
    auto* off_steps_opt = off->add_option("--steps", off_steps, "fine-tune steps");
    auto* off_strategy_opt =
        off->add_option("--strategy", off_strategy, "crash | crash-noshare | uniform-lcr")
            ->check(strategy_check);

    CommonOpts swp_c;
    std::string swp_ckpt;
    std::vector<std::size_t> swp_ks;
    auto* swp = app.add_subcommand("sweep-k", "offsite experiment across cluster counts");
    add_common(swp, swp_c);
    swp->add_option("--ckpt", swp_ckpt, "pretrained full checkpoint")->required();
    swp->add_option("--ks", swp_ks, "cluster counts (default 2..L)")->delimiter(',');

    CommonOpts itp_c;
    std::string itp_a, itp_b, itp_which = "target";
    std::size_t itp_n = 0;
    auto* itp =
        app.add_subcommand("interpolate", "eval loss along the line between two checkpoints");
    add_common(itp, itp_c);
    itp->add_option("--a", itp_a, "endpoint checkpoint")->required();
    itp->add_option("--b", itp_b, "endpoint checkpoint")->required();
    auto* itp_n_opt = itp->add_option("--n-points", itp_n, "grid size");
    itp->add_option("--which", itp_which, "task")->check(which_check);

    CommonOpts srf_c;
    std::string srf_origin, srf_a, srf_b, srf_which = "target";
    std::size_t srf_nx = 0, srf_ny = 0;
    double srf_margin = 0.0;
    auto* srf = app.add_subcommand("surface", "eval loss on the plane through three checkpoints");
    add_common(srf, srf_c);
    srf->add_option("--origin", srf_origin, "origin checkpoint")->required();
    srf->add_option("--a", srf_a, "first anchor")->required();
    srf->add_option("--b", srf_b, "second anchor")->required();
    auto* srf_nx_opt = srf->add_option("--nx", srf_nx, "grid columns");
    auto* srf_ny_opt = srf->add_option("--ny", srf_ny, "grid rows");
    auto* srf_margin_opt =
        srf->add_option("--margin", srf_margin, "padding fraction")->check(CLI::NonNegativeNumber);
    srf->add_option("--which", srf_which, "task")->check(which_check);

    CommonOpts crc_c;
    std::string crc_ft, crc_init, crc_which = "target";
    auto* crc = app.add_subcommand("cruciality", "per-block rewind and removal deltas");
    add_common(crc, crc_c);
    crc->add_option("--ft", crc_ft, "fine-tuned checkpoint")->required();
    crc->add_option("--init", crc_init, "its initialization")->required();
    crc->add_option("--which", crc_which, "task")->check(which_check);

    CommonOpts shm_c;
    std::string shm_ckpt, shm_which = "target";
    auto* shm = app.add_subcommand("share-heatmap",
                                   "loss and last-layer CKA when slot i runs block j");
    add_common(shm, shm_c);
    shm->add_option("--ckpt", shm_ckpt, "checkpoint")->required();
    shm->add_option("--which", shm_which, "task")->check(which_check);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        print_error_json("usage", e.what());
        std::cerr << e.what() << "\nRun with --help for usage.\n";
        return 2;
    }

    try {
        if (pre->parsed()) return run_pretrain(pre_c, resolve_config(pre_c));
        if (ana->parsed()) {
            const PipelineConfig cfg = resolve_config(ana_c);
            const std::size_t lens = ana_sample_opt->count() > 0 ? ana_sample : cfg.lens_sample;
            return run_analyze(ana_c, cfg, ana_ckpt, ana_which, lens);
        }
        if (clu->parsed()) return run_cluster(clu_out, clu_sim, clu_k, clu_pb, clu_pt);
        if (bld->parsed()) {
            PipelineConfig cfg = resolve_config(bld_c);
            if (bld_k_opt->count() > 0) cfg.offsite.k = bld_k;
            if (bld_n_opt->count() > 0) cfg.offsite.n_learnable = bld_n;
            if (bld_strategy_opt->count() > 0) {
                cfg.offsite.strategy = crash::emulator_strategy_from_name(bld_strategy);
            }
            if (bld_pb_opt->count() > 0) cfg.offsite.protect_bottom = bld_pb;
            if (bld_pt_opt->count() > 0) cfg.offsite.protect_top = bld_pt;
            if (bld_lcr_opt->count() > 0) {
                cfg.offsite.lcr_l = bld_lcr[0];
                cfg.offsite.lcr_c = bld_lcr[1];
                cfg.offsite.lcr_r = bld_lcr[2];
            }
            return run_build_emulator(bld_c, cfg, bld_ckpt, bld_sim);
        }
        if (ft->parsed()) {
            PipelineConfig cfg = resolve_config(ft_c);
            if (ft_steps_opt->count() > 0) cfg.offsite.train.steps = ft_steps;
            if (ft_lr_opt->count() > 0) cfg.offsite.train.lr = ft_lr;
            if (ft_batch_opt->count() > 0) cfg.offsite.train.batch = ft_batch;
            return run_finetune(ft_c, cfg, ft_ckpt, ft_spec, ft_which);
        }
        if (plg->parsed()) return run_plugin(plg_out, plg_full, plg_tuned, plg_spec);
        if (ev->parsed()) {
            return run_evaluate(ev_c, resolve_config(ev_c), ev_ckpt, ev_spec, ev_which, ev_lennorm);
        }
        if (off->parsed()) {
            PipelineConfig cfg = resolve_config(off_c);
            if (off_k_opt->count() > 0) cfg.offsite.k = off_k;
            if (off_n_opt->count() > 0) cfg.offsite.n_learnable = off_n;
            if (off_steps_opt->count() > 0) cfg.offsite.train.steps = off_steps;
            if (off_strategy_opt->count() > 0) {
                cfg.offsite.strategy = crash::emulator_strategy_from_name(off_strategy);
            }
            return run_offsite(off_c, cfg, off_ckpt);
        }
        if (swp->parsed()) return run_sweep(swp_c, resolve_config(swp_c), swp_ckpt, swp_ks);
        if (itp->parsed()) {
            const PipelineConfig cfg = resolve_config(itp_c);
            const std::size_t n = itp_n_opt->count() > 0 ? itp_n : cfg.n_points;
            return run_interpolate(itp_c, cfg, itp_a, itp_b, n, itp_which);
        }
        if (srf->parsed()) {
            PipelineConfig cfg = resolve_config(srf_c);
            if (srf_nx_opt->count() > 0) cfg.grid.nx = srf_nx;
            if (srf_ny_opt->count() > 0) cfg.grid.ny = srf_ny;
            if (srf_margin_opt->count() > 0) cfg.grid.margin = srf_margin;
            return run_surface(srf_c, cfg, srf_origin, srf_a, srf_b, srf_which);
        }
        if (crc->parsed()) return run_cruciality(crc_c, resolve_config(crc_c), crc_ft, crc_init, crc_which);
        if (shm->parsed()) return run_share_heatmap(shm_c, resolve_config(shm_c), shm_ckpt, shm_which);
    } catch (const crash::TrainingError& e) {
        print_error_json(crash::error_kind_name(e.kind()), e.what(),
                         json{{"last_finite_step", e.last_finite_step}});
        return 4;
    } catch (const crash::Error& e) {
        print_error_json(crash::error_kind_name(e.kind()), e.what());
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        print_error_json("internal", e.what());
        return 4;
    }
    return 0;
}
