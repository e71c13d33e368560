#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ssmlm/model.hpp"

namespace ssmlm {

struct TrainConfig {
    double peak_lr = 6e-4;
    double min_lr = 1e-5;
    int64_t warmup_steps = 0; // 0 -> 1% of total_steps
    int64_t total_steps = 7000;
    int64_t batch_size = 32;
    int64_t seq_len = 0; // 0 -> model context_len
    double beta1 = 0.9;
    double beta2 = 0.95;
    double epsilon = 1e-5;
    double weight_decay = 0.1;
    double grad_clip_norm = 1.0;
    uint64_t seed = 0;
    bool reset_at_doc_boundary = true;
    int64_t checkpoint_every = 0; // 0 -> final only
    int64_t log_every = 1;

    int64_t effective_warmup() const;
    void validate() const;
};

// Linear ramp 0 -> peak over warmup, then cosine from peak to min_lr at
// total_steps. Steps past the end clamp to min_lr.
double lr_at(int64_t step, const TrainConfig& cfg);

// Joint L2 norm over all parameter gradients; scales them down in place when
// the norm exceeds max_norm. Returns the pre-clip norm.
template <class T>
double clip_gradients(std::vector<Param<T>*>& params, double max_norm);

template <class T>
struct AdamState {
    std::vector<Tensor<T>> m, v;
    int64_t t = 0;

    void init_for(std::vector<Param<T>*>& params);
};

// Decoupled weight decay (applied as p -= lr*wd*p before the update, skipping
// params with wd=false), then standard bias-corrected Adam with epsilon
// outside the sqrt.
template <class T>
void adam_step(std::vector<Param<T>*>& params, AdamState<T>& state, const TrainConfig& cfg,
               double lr);

// Token stream packed into fixed-length training chunks.
struct PackedCorpus {
    std::vector<uint32_t> tokens;     // docs joined by a trailing EOD each
    std::vector<int64_t> doc_offsets; // start of each doc
    std::vector<std::string> doc_ids;

    int64_t num_docs() const { return int64_t(doc_offsets.size()); }
    std::vector<uint32_t> doc(int64_t i) const;

    void save(const std::string& path) const;
    static PackedCorpus load(const std::string& path);
};

struct StepRecord {
    int64_t step;
    double loss;
    double lr;
    double grad_norm;
};

struct TrainResult {
    std::vector<StepRecord> curve;
    double final_loss = 0;
};

// One training step on explicit token chunks (each seq_len+1 long:
// inputs + shifted targets). Exposed for fine-tuning reuse.
template <class T>
double train_step_chunks(LmModel<T>& model, const std::vector<std::vector<int32_t>>& chunks,
                         const std::vector<std::vector<uint8_t>>& segs,
                         const std::vector<std::vector<int32_t>>& target_overrides,
                         AdamState<T>& state, const TrainConfig& cfg, int64_t step,
                         double* grad_norm_out);

// Full pretraining loop: deterministic given (seed, config, corpus). Emits
// step,loss,lr,grad_norm records; writes periodic checkpoints when
// checkpoint_dir is non-empty. heldout_ids must never appear in a batch
// (checked every step).
template <class T>
TrainResult train_loop(LmModel<T>& model, const PackedCorpus& corpus, const TrainConfig& cfg,
                       const std::vector<std::string>& heldout_ids = {},
                       const std::string& checkpoint_dir = "",
                       const std::function<void(const StepRecord&)>& on_step = nullptr);

void write_loss_curve_csv(const std::string& path, const std::vector<StepRecord>& curve);

} // namespace ssmlm
