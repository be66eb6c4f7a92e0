#include "crash/tuning.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>

#include "crash/rng.hpp"
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

FinetuneResult adam_train(Checkpoint model, const FreezeMask& mask, const TrainConfig& cfg,
                          const std::function<LossBatch(Rng&)>& next_batch,
                          const std::vector<std::size_t>& slots) {
    cfg.validate();
    const std::vector<std::string> names = mask.learnable_tensor_names(model.config);
    std::map<std::string, Mat> m_state, v_state;
    for (const std::string& name : names) {
        const Mat& w = model.tensors.at(name);
        m_state.emplace(name, Mat(w.rows, w.cols));
        v_state.emplace(name, Mat(w.rows, w.cols));
    }

    std::vector<double> curve;
    curve.reserve(cfg.steps);
    Rng rng(cfg.seed);
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        const LossBatch batch = next_batch(rng);
        LossGrads lg;
        try {
            lg = loss_and_grads(model, batch, mask, slots);
        } catch (const NumericError& e) {
            throw TrainingError(std::string("training diverged at step ") +
                                    std::to_string(step) + ": " + e.what(),
                                curve.size(), curve);
        }
        if (!std::isfinite(lg.loss)) {
            throw TrainingError("loss left the reals at step " + std::to_string(step),
                                curve.size(), curve);
        }
        curve.push_back(lg.loss);

        double scale = 1.0;
        if (cfg.grad_clip > 0.0) {
            double sq = 0.0;
            for (const std::string& name : names) {
                for (double g : lg.grads.at(name).data) sq += g * g;
            }
            const double norm = std::sqrt(sq);
            if (norm > cfg.grad_clip) scale = cfg.grad_clip / norm;
        }
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        for (const std::string& name : names) {
            const Mat& g = lg.grads.at(name);
            Mat& m = m_state.at(name);
            Mat& v = v_state.at(name);
            Mat& w = model.tensors.at(name);
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g.data[i] * scale;
                m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
                v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                const double mhat = m.data[i] / bc1;
                const double vhat = v.data[i] / bc2;
                w.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
        }
    }
    return FinetuneResult{std::move(model), std::move(curve)};
}

json entry_to_json(const EvalEntry& e) {
    json j;
    j["accuracy"] = e.accuracy.has_value() ? json(*e.accuracy) : json(nullptr);
    j["lm_loss"] = e.lm_loss.has_value() ? json(*e.lm_loss) : json(nullptr);
    j["n_items"] = e.n_items;
    return j;
}

std::string entry_cell(const EvalEntry& e) {
    return fmt_double(e.accuracy.has_value() ? *e.accuracy : *e.lm_loss);
}

}  // namespace

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
}

double eval_metric(const EvalEntry& e) {
    if (e.accuracy.has_value()) return *e.accuracy;
    return -e.lm_loss.value();
}

EvalEntry evaluate(const Checkpoint& ckpt, const TaskDataset& data,
                   const std::vector<std::size_t>& slots, bool length_norm) {
    if (data.eval_size() == 0) throw InputError("empty eval split");
    EvalEntry entry;
    entry.n_items = data.eval_size();

    if (data.is_lm()) {
        const ForwardResult fwd = forward(ckpt, data.lm_eval, false, slots);
        double total = 0.0;
        std::size_t count = 0;
        for (std::size_t s = 0; s < data.lm_eval.size(); ++s) {
            const TokenSeq& seq = data.lm_eval[s];
            for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
                total -= row_logprob(fwd.logits[s], t, seq[t + 1]);
                ++count;
            }
        }
        entry.lm_loss = total / static_cast<double>(count);
        return entry;
    }

    std::vector<TokenSeq> seqs;
    for (const ChoiceItem& item : data.eval) {
        for (const TokenSeq& opt : item.options) {
            if (opt.empty()) throw InputError("empty option sequence");
            TokenSeq seq = item.prompt;
            seq.insert(seq.end(), opt.begin(), opt.end());
            seqs.push_back(std::move(seq));
        }
    }
    const ForwardResult fwd = forward(ckpt, seqs, false, slots);
    std::size_t cursor = 0;
    std::size_t correct = 0;
    for (const ChoiceItem& item : data.eval) {
        std::size_t best = 0;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t o = 0; o < item.options.size(); ++o) {
            const Mat& logits = fwd.logits[cursor];
            const TokenSeq& seq = seqs[cursor];
            ++cursor;
            double score = 0.0;
            for (std::size_t p = item.prompt.size(); p < seq.size(); ++p) {
                score += row_logprob(logits, p - 1, seq[p]);
            }
            if (length_norm) score /= static_cast<double>(item.options[o].size());
            if (score > best_score) {  // strict: ties keep the lowest option
                best_score = score;
                best = o;
            }
        }
        if (best == item.gold) ++correct;
    }
    entry.accuracy = static_cast<double>(correct) / static_cast<double>(data.eval.size());
    return entry;
}

double eval_loss(const Checkpoint& ckpt, const TaskDataset& data,
                 const std::vector<std::size_t>& slots) {
    if (data.eval_size() == 0) throw InputError("empty eval split");
    std::vector<std::size_t> indices(data.eval_size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    const LossBatch batch = make_loss_batch(data, indices, true);
    const ForwardResult fwd = forward(ckpt, batch.inputs, false, slots);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
        for (std::size_t t = 0; t < batch.inputs[s].size(); ++t) {
            if (batch.loss_mask[s][t] == 0) continue;
            total -= row_logprob(fwd.logits[s], t, batch.targets[s][t]);
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

FinetuneResult finetune(const Checkpoint& model, const TaskDataset& data, const FreezeMask& mask,
                        const TrainConfig& cfg, const std::vector<std::size_t>& slots) {
    if (data.train_size() == 0) throw InputError("empty train split");
    auto next_batch = [&data, &cfg](Rng& rng) {
        std::vector<std::size_t> indices(cfg.batch);
        for (std::size_t i = 0; i < cfg.batch; ++i) indices[i] = rng.below(data.train_size());
        return make_loss_batch(data, indices);
    };
    return adam_train(model, mask, cfg, next_batch, slots);
}

Checkpoint pretrain_model(const ModelConfig& config, std::uint64_t init_seed,
                          const std::vector<TaskDataset>& mixture, const TrainConfig& cfg) {
    if (mixture.empty()) throw InputError("pretraining mixture is empty");
    for (const TaskDataset& task : mixture) {
        if (task.train_size() == 0) throw InputError("task " + task.id + " has no train items");
        if (task.vocab_size > config.vocab_size) {
            throw InputError("task " + task.id + " needs vocab " +
                             std::to_string(task.vocab_size) + ", model has " +
                             std::to_string(config.vocab_size));
        }
        if (task.min_seq_len > config.max_seq_len) {
            throw InputError("task " + task.id + " needs sequences of " +
                             std::to_string(task.min_seq_len) + ", model caps at " +
                             std::to_string(config.max_seq_len));
        }
    }
    Checkpoint model = init_checkpoint(config, init_seed);
    FreezeMask mask;
    for (std::size_t b = 0; b < config.n_layers; ++b) mask.learnable_blocks.insert(b);
    mask.embeddings_learnable = true;
    mask.final_ln_learnable = true;

    auto next_batch = [&mixture, &cfg](Rng& rng) {
        LossBatch batch;
        for (std::size_t i = 0; i < cfg.batch; ++i) {
            const TaskDataset& task = mixture[rng.below(mixture.size())];
            const std::size_t idx = rng.below(task.train_size());
            LossBatch one = make_loss_batch(task, {idx});
            batch.inputs.push_back(std::move(one.inputs[0]));
            batch.targets.push_back(std::move(one.targets[0]));
            batch.loss_mask.push_back(std::move(one.loss_mask[0]));
        }
        return batch;
    };
    return adam_train(std::move(model), mask, cfg, next_batch, {}).model;
}

Emulator build_emulator(const Checkpoint& full, const SimilarityMatrix& sim,
                        const OffsiteSettings& settings) {
    switch (settings.strategy) {
        case EmulatorStrategy::Crash:
            return build_crash_emulator(full, sim, settings.k, settings.n_learnable, true,
                                        settings.protect_bottom, settings.protect_top);
        case EmulatorStrategy::CrashNoShare:
            return build_crash_emulator(full, sim, settings.k, settings.n_learnable, false,
                                        settings.protect_bottom, settings.protect_top);
        case EmulatorStrategy::UniformLcr:
            return build_uniform_emulator(full, settings.lcr_l, settings.lcr_c, settings.lcr_r);
    }
    throw ParameterError("unknown emulator strategy");
}

OffsiteReport run_offsite_experiment(const Checkpoint& full, const TaskDataset& target,
                                     const TaskDataset& support, const OffsiteSettings& settings) {
    full.config.validate();
    check_census(full);

    OffsiteReport rep;
    rep.task_id = target.id;
    rep.support_id = support.id;
    rep.sim = similarity_matrix(full, similarity_inputs(support), settings.pooling,
                                settings.n_samples, support.id, settings.center);

    const Emulator em = build_emulator(full, rep.sim, settings);
    rep.spec = em.spec;
    const std::vector<std::size_t> slots = emulator_slots(em.spec);

    rep.full_zs = evaluate(full, target);
    rep.emulator_zs = evaluate(em.model, target, slots);

    Checkpoint tuned = em.model;
    if (settings.train.steps > 0) {
        FinetuneResult ft =
            finetune(em.model, target, emulator_freeze_mask(em.spec), settings.train, slots);
        tuned = std::move(ft.model);
        rep.emulator_curve = std::move(ft.loss_curve);
    }
    rep.emulator_ft = evaluate(tuned, target, slots);

    const auto plugged = plug_in(full, tuned, em.spec);
    rep.plugin = evaluate(plugged.first, target);

    if (settings.run_full_ft) {
        if (settings.train.steps > 0) {
            FreezeMask mask;
            for (std::size_t b = 0; b < full.config.n_layers; ++b) mask.learnable_blocks.insert(b);
            FinetuneResult ft = finetune(full, target, mask, settings.train);
            rep.full_curve = std::move(ft.loss_curve);
            rep.full_ft = evaluate(ft.model, target);
        } else {
            rep.full_ft = rep.full_zs;
        }
    }

    rep.oft_condition = eval_metric(rep.plugin) > eval_metric(rep.full_zs) &&
                        eval_metric(rep.plugin) > eval_metric(rep.emulator_ft);
    return rep;
}

std::string offsite_report_to_json(const OffsiteReport& report) {
    json j;
    j["task"] = report.task_id;
    j["support"] = report.support_id;
    j["full_zs"] = entry_to_json(report.full_zs);
    j["emulator_zs"] = entry_to_json(report.emulator_zs);
    j["emulator_ft"] = entry_to_json(report.emulator_ft);
    j["plugin"] = entry_to_json(report.plugin);
    j["full_ft"] =
        report.full_ft.has_value() ? entry_to_json(*report.full_ft) : json(nullptr);
    j["oft_condition"] = report.oft_condition;
    j["spec"] = json::parse(emulator_spec_to_json(report.spec));
    j["similarity"] = json::parse(similarity_to_json(report.sim));
    j["emulator_curve"] = report.emulator_curve;
    j["full_curve"] = report.full_curve;
    return j.dump();
}

std::string offsite_report_table(const OffsiteReport& report) {
    const bool is_acc = report.full_zs.accuracy.has_value();
    std::string out = "setting        ";
    out += is_acc ? "accuracy" : "lm_loss";
    out += '\n';
    auto row = [&out](const char* name, const EvalEntry& e) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%-14s %.6f\n", name,
                      e.accuracy.has_value() ? *e.accuracy : *e.lm_loss);
        out += buf;
    };
    row("full-ZS", report.full_zs);
    if (report.full_ft.has_value()) row("full-FT", *report.full_ft);
    row("emulator-ZS", report.emulator_zs);
    row("emulator-FT", report.emulator_ft);
    row("plug-in", report.plugin);
    out += "OFT condition (plug-in beats full-ZS and emulator-FT): ";
    out += report.oft_condition ? "yes" : "no";
    out += '\n';
    return out;
}

SweepResult sweep_k(const Checkpoint& full, const TaskDataset& target, const TaskDataset& support,
                    const OffsiteSettings& base, const std::vector<std::size_t>& ks) {
    if (ks.empty()) throw InputError("empty k list");
    SweepResult result;
    for (std::size_t k : ks) {
        OffsiteSettings settings = base;
        settings.k = k;
        settings.n_learnable = std::min(base.n_learnable, k);
        result.ks.push_back(k);
        result.reports.push_back(run_offsite_experiment(full, target, support, settings));
    }
    return result;
}

std::string sweep_to_csv(const SweepResult& sweep) {
    std::string out = "k,retained,full_zs,full_ft,emulator_zs,emulator_ft,plugin,oft_condition\n";
    for (std::size_t i = 0; i < sweep.reports.size(); ++i) {
        const OffsiteReport& r = sweep.reports[i];
        out += std::to_string(sweep.ks[i]);
        out += ',';
        out += std::to_string(r.spec.retained.size());
        out += ',';
        out += entry_cell(r.full_zs);
        out += ',';
        out += r.full_ft.has_value() ? entry_cell(*r.full_ft) : std::string();
        out += ',';
        out += entry_cell(r.emulator_zs);
        out += ',';
        out += entry_cell(r.emulator_ft);
        out += ',';
        out += entry_cell(r.plugin);
        out += ',';
        out += r.oft_condition ? "1" : "0";
        out += '\n';
    }
    return out;
}

}  // namespace crash
