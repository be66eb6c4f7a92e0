#include "crash/tasks.hpp"

#include <algorithm>
#include <set>

#include "crash/rng.hpp"

namespace crash {

namespace {

std::vector<std::size_t> sample_distinct(Rng& rng, std::size_t n, std::size_t range) {
    std::vector<std::size_t> out;
    std::set<std::size_t> seen;
    while (out.size() < n) {
        const std::size_t v = rng.below(range);
        if (seen.insert(v).second) out.push_back(v);
    }
    return out;
}

ChoiceItem gen_keyvalue(Rng& rng, const TaskSizes& sz, std::size_t n_keys, std::size_t n_values) {
    const std::vector<std::size_t> keys = sample_distinct(rng, sz.n_pairs, n_keys);
    const std::vector<std::size_t> vals = sample_distinct(rng, sz.n_pairs, n_values);
    const std::size_t q = rng.below(sz.n_pairs);
    ChoiceItem item;
    item.prompt.push_back(TOK_BOS);
    for (std::size_t i = 0; i < sz.n_pairs; ++i) {
        item.prompt.push_back(SYM0 + keys[i]);
        item.prompt.push_back(SYM0 + n_keys + vals[i]);
        item.prompt.push_back(TOK_SEP);
    }
    item.prompt.push_back(TOK_QUERY);
    item.prompt.push_back(SYM0 + keys[q]);
    item.prompt.push_back(TOK_ANSWER);
    for (std::size_t i = 0; i < sz.n_pairs; ++i) {
        item.options.push_back(TokenSeq{SYM0 + n_keys + vals[i]});
    }
    item.gold = q;
    return item;
}

ChoiceItem gen_modular(Rng& rng, const TaskSizes& sz) {
    const std::size_t a = rng.below(sz.modulus);
    const std::size_t b = rng.below(sz.modulus);
    ChoiceItem item;
    item.prompt = {TOK_BOS, SYM0 + a, TOK_PLUS, SYM0 + b, TOK_EQUALS};
    for (std::size_t i = 0; i < sz.modulus; ++i) item.options.push_back(TokenSeq{SYM0 + i});
    item.gold = (a + b) % sz.modulus;
    return item;
}

TokenSeq gen_charlm(Rng& rng, const TaskSizes& sz) {
    const std::size_t plen = sz.pattern_min + rng.below(sz.pattern_max - sz.pattern_min + 1);
    TokenSeq pattern(plen);
    for (std::size_t i = 0; i < plen; ++i) pattern[i] = SYM0 + rng.below(sz.n_symbols);
    TokenSeq seq;
    seq.reserve(sz.seq_len);
    seq.push_back(TOK_BOS);
    while (seq.size() < sz.seq_len) seq.push_back(pattern[(seq.size() - 1) % plen]);
    return seq;
}

}  // namespace

const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::KeyValueRecall: return "keyvalue-recall";
        case TaskKind::ModularAdd: return "modular-add";
        case TaskKind::CharLm: return "char-lm";
    }
    return "unknown";
}

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "keyvalue-recall") return TaskKind::KeyValueRecall;
    if (name == "modular-add") return TaskKind::ModularAdd;
    if (name == "char-lm") return TaskKind::CharLm;
    throw InputError("unknown task kind '" + name + "'");
}

TaskDataset make_task(TaskKind kind, std::uint64_t seed, const TaskSizes& sizes) {
    if (sizes.n_symbols < 2) throw InputError("need at least 2 symbols");
    if (sizes.n_train == 0 || sizes.n_eval == 0) {
        throw InputError("train and eval splits must be non-empty");
    }
    const std::size_t n_keys = sizes.n_symbols / 2;
    const std::size_t n_values = sizes.n_symbols - n_keys;
    switch (kind) {
        case TaskKind::KeyValueRecall:
            if (sizes.n_pairs < 2) throw InputError("keyvalue-recall needs n_pairs >= 2");
            if (sizes.n_pairs > n_keys || sizes.n_pairs > n_values) {
                throw InputError("n_pairs " + std::to_string(sizes.n_pairs) +
                                 " exceeds the distinct keys or values available");
            }
            break;
        case TaskKind::ModularAdd:
            if (sizes.modulus < 2 || sizes.modulus > sizes.n_symbols) {
                throw InputError("modulus must be in [2, n_symbols]");
            }
            if (sizes.n_train + sizes.n_eval > sizes.modulus * sizes.modulus) {
                throw InputError("modular-add has only " +
                                 std::to_string(sizes.modulus * sizes.modulus) +
                                 " distinct prompts; asked for " +
                                 std::to_string(sizes.n_train + sizes.n_eval));
            }
            break;
        case TaskKind::CharLm:
            if (sizes.seq_len < 2) throw InputError("char-lm needs seq_len >= 2");
            if (sizes.pattern_min < 1 || sizes.pattern_max < sizes.pattern_min) {
                throw InputError("bad pattern length range");
            }
            break;
    }

    TaskDataset data;
    data.kind = kind;
    data.seed = seed;
    data.id = std::string(task_kind_name(kind)) + "-" + std::to_string(seed);
    data.vocab_size = SYM0 + sizes.n_symbols;

    Rng rng(seed);
    const std::size_t want = sizes.n_train + sizes.n_eval;
    const std::size_t max_attempts = want * 1000 + 1000;
    std::set<TokenSeq> seen;
    std::size_t attempts = 0;
    while (seen.size() < want) {
        if (++attempts > max_attempts) {
            throw InputError("could not generate " + std::to_string(want) +
                             " distinct items for " + data.id);
        }
        if (kind == TaskKind::CharLm) {
            TokenSeq seq = gen_charlm(rng, sizes);
            if (!seen.insert(seq).second) continue;
            if (data.lm_train.size() < sizes.n_train) {
                data.lm_train.push_back(std::move(seq));
            } else {
                data.lm_eval.push_back(std::move(seq));
            }
            data.min_seq_len = std::max(data.min_seq_len, sizes.seq_len);
        } else {
            ChoiceItem item = kind == TaskKind::KeyValueRecall
                                  ? gen_keyvalue(rng, sizes, n_keys, n_values)
                                  : gen_modular(rng, sizes);
            if (!seen.insert(item.prompt).second) continue;
            std::size_t longest = 0;
            for (const TokenSeq& opt : item.options) longest = std::max(longest, opt.size());
            data.min_seq_len = std::max(data.min_seq_len, item.prompt.size() + longest);
            if (data.train.size() < sizes.n_train) {
                data.train.push_back(std::move(item));
            } else {
                data.eval.push_back(std::move(item));
            }
        }
    }
    return data;
}

std::vector<TokenSeq> similarity_inputs(const TaskDataset& data) {
    std::vector<TokenSeq> out;
    if (data.is_lm()) {
        out.insert(out.end(), data.lm_train.begin(), data.lm_train.end());
        out.insert(out.end(), data.lm_eval.begin(), data.lm_eval.end());
        return out;
    }
    auto answered = [](const ChoiceItem& item) {
        TokenSeq seq = item.prompt;
        const TokenSeq& gold = item.options[item.gold];
        seq.insert(seq.end(), gold.begin(), gold.end());
        return seq;
    };
    for (const ChoiceItem& item : data.train) out.push_back(answered(item));
    for (const ChoiceItem& item : data.eval) out.push_back(answered(item));
    return out;
}

LossBatch make_loss_batch(const TaskDataset& data, const std::vector<std::size_t>& indices,
                          bool from_eval) {
    LossBatch batch;
    const std::size_t split_size = from_eval ? data.eval_size() : data.train_size();
    for (std::size_t idx : indices) {
        if (idx >= split_size) {
            throw InputError("item index " + std::to_string(idx) + " out of range for split of " +
                             std::to_string(split_size));
        }
        TokenSeq input;
        std::size_t answer_begin = 0;  // first input position whose NEXT token is scored
        if (data.is_lm()) {
            input = from_eval ? data.lm_eval[idx] : data.lm_train[idx];
            answer_begin = 0;
        } else {
            const ChoiceItem& item = from_eval ? data.eval[idx] : data.train[idx];
            input = item.prompt;
            const TokenSeq& gold = item.options[item.gold];
            answer_begin = input.size() - 1;
            input.insert(input.end(), gold.begin(), gold.end());
        }
        const std::size_t len = input.size();
        TokenSeq targets(len, 0);
        std::vector<std::uint8_t> mask(len, 0);
        for (std::size_t t = 0; t + 1 < len; ++t) {
            targets[t] = input[t + 1];
            if (t >= answer_begin) mask[t] = 1;
        }
        batch.inputs.push_back(std::move(input));
        batch.targets.push_back(std::move(targets));
        batch.loss_mask.push_back(std::move(mask));
    }
    return batch;
}

}  // namespace crash
