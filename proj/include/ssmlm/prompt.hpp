#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "ssmlm/data.hpp"
#include "ssmlm/synth.hpp"
#include "ssmlm/train.hpp"

namespace ssmlm {

// A criterion question appended after the document, answered by generating a
// label token sequence that the verbalizer maps back to a binary label.
struct PromptTask {
    std::string task_id;
    std::string prompt_text;
    std::string yes_text = "Yes";
    std::string no_text = "No";
};

struct TokenizedTask {
    PromptTask def;
    std::vector<int32_t> prompt;
    std::vector<int32_t> yes_ids;
    std::vector<int32_t> no_ids;
};

TokenizedTask tokenize_task(const PromptTask& task, const Tokenizer& tok);

// Task file: one JSON record per line with task_id, template (an optional
// "{criterion}" slot), criterion, and verbalizer strings.
std::vector<PromptTask> read_tasks_jsonl(const std::string& path);
void write_tasks_jsonl(const std::string& path, const std::vector<PromptTask>& tasks);
std::vector<PromptTask> default_cohort_tasks();

struct BuildInputOptions {
    bool drop_start = true; // keep the most recent document text when truncating
    std::vector<int32_t> preamble; // optional tokens placed before the document
};

// [doc] ++ [prompt], document truncated so the prompt always fully fits.
// Errors when the prompt alone does not fit.
std::vector<int32_t> build_input(const std::vector<int32_t>& doc_tokens,
                                 const TokenizedTask& task, int64_t context_len,
                                 const BuildInputOptions& opts = {});

// p(positive) from a single next-token distribution, softmax restricted to
// the first tokens of the Yes/No verbalizations.
template <class T>
double verbalizer_score(const T* logits, int64_t vocab, const TokenizedTask& task);

// Multi-token verbalizer scoring: teacher-forced summed log-prob of each
// label sequence continuing the input, normalized across the two labels.
template <class T>
double verbalizer_score_full(const LmModel<T>& model, const std::vector<int32_t>& input,
                             const TokenizedTask& task);

struct FinetuneConfig {
    TrainConfig train;
    bool full_sequence_verbalizer = false; // score with summed log-prob at predict time
    double threshold = 0.5;
};

// Cross-entropy on the appended label-token positions only; all weights
// train. Deterministic given the seed. Errors on an empty shot set.
template <class T>
TrainResult finetune(LmModel<T>& model, const std::vector<TokenizedTask>& tasks,
                     const std::vector<std::pair<std::string, std::vector<int32_t>>>& docs,
                     const std::unordered_map<std::string, std::vector<uint8_t>>& gold,
                     const std::vector<std::string>& train_ids, const FinetuneConfig& cfg);

struct Prediction {
    std::string doc_id;
    std::string task_id;
    double score = 0;
    int label = 0;
};

// Independent per-task scores for one document; label = score >= threshold.
// The document prefix state is computed once and shared across tasks.
template <class T>
std::vector<Prediction> predict_multilabel(const LmModel<T>& model,
                                           const std::string& doc_id,
                                           const std::vector<int32_t>& doc_tokens,
                                           const std::vector<TokenizedTask>& tasks,
                                           double threshold = 0.5,
                                           bool full_sequence = false);

void write_predictions_csv(const std::string& path, const std::vector<Prediction>& preds);
std::vector<Prediction> read_predictions_csv(const std::string& path);

} // namespace ssmlm
