#pragma once

#include <string>
#include <vector>

#include "ssmlm/block.hpp"

namespace ssmlm {

struct ModelConfig {
    int64_t num_layer = 2;
    int64_t d_model = 64;
    int64_t vocab_size = 258;
    int64_t context_len = 1024;
    BlockConfig block;
    bool tie_embeddings = true;
    // Learned absolute position table, off by default (the stock model has no
    // positional parameters). Used to build window-limited baselines whose
    // rows past the trained length stay at their random init.
    bool use_pos_emb = false;

    void validate() const;
    static ModelConfig make(int64_t layers, int64_t d_model, int64_t vocab, int64_t ctx,
                            int64_t d_state = 16, int64_t d_conv = 4, int64_t expand = 2);
};

template <class T>
struct LmCache {
    struct LayerCache {
        Tensor<T> x_in;     // [L, d_model] residual stream entering the layer
        Tensor<T> norm_out; // [L, d_model]
        Tensor<T> rstd;     // [L]
        BlockCache<T> block;
    };
    std::vector<LayerCache> layers;
    Tensor<T> x_final;   // residual stream before the final norm
    Tensor<T> final_out; // [L, d_model]
    Tensor<T> final_rstd;
};

// Carried state for token-by-token decoding.
template <class T>
struct LmState {
    std::vector<BlockState<T>> blocks;
    int64_t position = 0;
};

template <class T>
struct LmModel {
    ModelConfig cfg;
    Param<T> embed; // [vocab, d_model]
    Param<T> pos_emb;
    struct Layer {
        Param<T> norm;
        BlockWeights<T> block;
    };
    std::vector<Layer> layers;
    Param<T> final_norm;
    Param<T> head; // [vocab, d_model] when embeddings are not tied

    void init(const ModelConfig& c, uint64_t seed);
    std::vector<Param<T>*> params();
    int64_t num_params();
    void zero_grads();

    // logits[t] depends only on tokens[0..t]. Errors on L < 1, L > context_len
    // or out-of-range ids.
    void forward(const int32_t* tokens, int64_t L, T* logits,
                 LmCache<T>* cache = nullptr, ScanMode mode = ScanMode::parallel,
                 const uint8_t* seg_start = nullptr) const;
    void backward(const int32_t* tokens, int64_t L, const T* dlogits,
                  const LmCache<T>& cache, const uint8_t* seg_start = nullptr);

    Tensor<T> next_token_logits(const std::vector<int32_t>& tokens, ScanMode mode = ScanMode::parallel) const;

    LmState<T> make_state() const;
    void step(int32_t token, LmState<T>& st, T* logits_row) const;

    // Forward without logits: fills `state` by consuming tokens in chunks.
    // Used for long-context evaluation at bounded memory.
    void prefill(const int32_t* tokens, int64_t L, LmState<T>& st) const;
};

// mean NLL over unmasked rows (targets < 0 are masked), natural log
template <class T>
double cross_entropy_loss(const Tensor<T>& logits, const std::vector<int32_t>& targets);

// checkpoint.cpp — single-file format: magic line, JSON header (config +
// tensor table), raw little-endian payload.
template <class T>
void save_checkpoint(const LmModel<T>& model, const std::string& path);
template <class T>
void load_checkpoint(LmModel<T>& model, const std::string& path);
std::string checkpoint_dtype(const std::string& path);

} // namespace ssmlm
