#pragma once

#include <vector>

#include "ssmlm/scan.hpp"
#include "ssmlm/tensor.hpp"

namespace ssmlm {

// Gated state space block:
//   x -> in_proj -> (u, gate), each d_inner wide
//   u -> causal conv -> SiLU -> selective scan -> y
//   y * SiLU(gate) -> out_proj
// Normalization and the residual live at the model level.
template <class T>
struct BlockWeights {
    BlockConfig cfg;
    Param<T> in_proj;  // [2*d_inner, d_model]
    Param<T> conv_w;   // [d_conv, d_inner]
    Param<T> conv_b;   // [d_inner]
    Param<T> x_proj;   // [dt_rank + 2*d_state, d_inner]
    Param<T> dt_w;     // [d_inner, dt_rank]
    Param<T> dt_b;     // [d_inner]
    Param<T> a_log;    // [d_inner, d_state]
    Param<T> d_skip;   // [d_inner]
    Param<T> out_proj; // [d_model, d_inner]

    void init(const BlockConfig& bc, const std::string& prefix, Rng& rng);
    SsmParams<T> ssm() const;
    SsmParamGrads<T> ssm_grads();
    std::vector<Param<T>*> params();
};

template <class T>
struct BlockCache {
    Tensor<T> xz;       // [L, 2*d_inner] pre-activation branches
    Tensor<T> conv_out; // [L, d_inner]
    Tensor<T> u_act;    // [L, d_inner] post-SiLU scan input
    Tensor<T> y_scan;   // [L, d_inner]
    SelScanCache<T> scan;
};

// Carried state for incremental decoding.
template <class T>
struct BlockState {
    Tensor<T> conv_tail; // [d_conv-1, d_inner]
    Tensor<T> ssm;       // [d_inner * d_state]
    Tensor<T> a_table;   // lazily cached -exp(a_log) for the stepping path

    explicit BlockState(const BlockConfig& bc)
        : conv_tail({bc.d_conv - 1, bc.d_inner}), ssm({bc.d_inner * bc.d_state}) {}
};

template <class T>
void block_forward(const T* x, int64_t L, const BlockWeights<T>& w, T* y, ScanMode mode,
                   BlockCache<T>* cache = nullptr, const uint8_t* seg_start = nullptr,
                   BlockState<T>* state = nullptr);

// Writes dx (overwrite), accumulates into weight grads.
template <class T>
void block_backward(const T* x, const T* dy, int64_t L, BlockWeights<T>& w,
                    const BlockCache<T>& cache, T* dx, const uint8_t* seg_start = nullptr);

template <class T>
void block_step(const T* x_row, const BlockWeights<T>& w, BlockState<T>& st, T* y_row);

} // namespace ssmlm
