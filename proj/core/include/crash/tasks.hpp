#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crash/model.hpp"

namespace crash {

enum class TaskKind { KeyValueRecall, ModularAdd, CharLm };

const char* task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);

// Shared token layout so every task fits one model vocabulary. Symbol ids
// start at SYM0; vocab_size = SYM0 + n_symbols.
inline constexpr std::size_t TOK_BOS = 0;
inline constexpr std::size_t TOK_SEP = 1;
inline constexpr std::size_t TOK_QUERY = 2;
inline constexpr std::size_t TOK_ANSWER = 3;
inline constexpr std::size_t TOK_PLUS = 4;
inline constexpr std::size_t TOK_EQUALS = 5;
inline constexpr std::size_t SYM0 = 6;

struct TaskSizes {
    std::size_t n_train = 64;
    std::size_t n_eval = 256;
    std::size_t n_symbols = 26;
    std::size_t n_pairs = 4;    // keyvalue-recall pairs per prompt
    std::size_t modulus = 13;   // modular-add
    std::size_t seq_len = 32;   // char-lm sequence length
    std::size_t pattern_min = 3;
    std::size_t pattern_max = 6;
};

struct ChoiceItem {
    TokenSeq prompt;
    std::vector<TokenSeq> options;
    std::size_t gold = 0;
};

struct TaskDataset {
    TaskKind kind = TaskKind::KeyValueRecall;
    std::uint64_t seed = 0;
    std::string id;
    std::size_t vocab_size = 0;    // minimum model vocab this task needs
    std::size_t min_seq_len = 0;   // longest scored sequence

    std::vector<ChoiceItem> train;  // choice tasks
    std::vector<ChoiceItem> eval;
    std::vector<TokenSeq> lm_train;  // char-lm
    std::vector<TokenSeq> lm_eval;

    bool is_lm() const { return kind == TaskKind::CharLm; }
    std::size_t train_size() const { return is_lm() ? lm_train.size() : train.size(); }
    std::size_t eval_size() const { return is_lm() ? lm_eval.size() : eval.size(); }
};

// Deterministic in (kind, seed, sizes). Train and eval splits are disjoint
// by prompt signature. keyvalue-recall prompts list key-value pairs then
// query one key; options are the listed values. modular-add asks "a+b=" with
// every residue as an option. char-lm repeats a short random pattern.
TaskDataset make_task(TaskKind kind, std::uint64_t seed, const TaskSizes& sizes);

// Sequences for similarity analysis: answered prompts (choice) or raw text
// (char-lm), train split first then eval.
std::vector<TokenSeq> similarity_inputs(const TaskDataset& data);

// Next-token batch for the given item indices (train split by default).
// Choice items score only the gold-answer span; LM items score every
// transition.
LossBatch make_loss_batch(const TaskDataset& data, const std::vector<std::size_t>& indices,
                          bool from_eval = false);

}  // namespace crash
