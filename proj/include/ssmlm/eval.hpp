#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ssmlm/model.hpp"
#include "ssmlm/train.hpp"

namespace ssmlm {

// ---------------------------------------------------------------------------
// Perplexity at a context length: each document is split into non-overlapping
// windows of ctx_len; NLL is summed over every predicted position (window
// positions 1..n-1); perplexity = exp(total NLL / total predictions).
// ---------------------------------------------------------------------------
struct PplOptions {
    // emulate a window-limited model: recurrent state is dropped every
    // reset_every tokens inside each window (0 = off)
    int64_t reset_every = 0;
    // score only the final tail_span predictions of each window (0 = all)
    int64_t tail_span = 0;
    // evaluate only the first max_docs documents (0 = all)
    int64_t max_docs = 0;
};

struct PplPoint {
    int64_t ctx_len = 0;
    double perplexity = 0;
    int64_t tokens_scored = 0;
};

template <class T>
PplPoint perplexity_at(const LmModel<T>& model, const PackedCorpus& corpus, int64_t ctx_len,
                       const PplOptions& opts = {});

void write_ppl_csv(const std::string& path, const std::vector<PplPoint>& points);
// perplexity vs context length, x on a log scale
void write_ppl_svg(const std::string& path, const std::vector<PplPoint>& points);

// ---------------------------------------------------------------------------
// Inference throughput (teacher-forced forward by default; decode_mode times
// token-by-token stepping instead). Warmup run excluded, median of reps.
// ---------------------------------------------------------------------------
struct ThroughputPoint {
    int64_t ctx_len = 0;
    int64_t batch = 0;
    int64_t reps = 0;
    double tokens_per_s = 0;
    double wall_s = 0; // median wall-clock of one rep
    bool decode_mode = false;
    int threads = 1;
};

template <class T>
ThroughputPoint throughput(const LmModel<T>& model, int64_t ctx_len, int64_t batch, int64_t reps,
                           bool decode_mode = false, uint64_t seed = 0);

void write_throughput_csv(const std::string& path, const std::vector<ThroughputPoint>& points);

// ---------------------------------------------------------------------------
// Classification metrics over pooled (doc, label) pairs.
// ---------------------------------------------------------------------------
struct Prf {
    double precision = 0, recall = 0, f1 = 0;
    int64_t tp = 0, fp = 0, fn = 0;
};

// pred/gold: [doc][label] in {0,1}
Prf micro_prf(const std::vector<std::vector<uint8_t>>& pred,
              const std::vector<std::vector<uint8_t>>& gold);

// Mann-Whitney AUC with ties counted 1/2; absent when either class is empty.
std::optional<double> rocauc_micro(const std::vector<double>& scores,
                                   const std::vector<uint8_t>& gold);

struct MetricReport {
    Prf micro;
    std::optional<double> rocauc;
    std::vector<std::pair<std::string, Prf>> per_task;
};

void write_metrics_csv(const std::string& path, const MetricReport& report);

} // namespace ssmlm
