#pragma once

#include <cstdint>

#include "ssmlm/tensor.hpp"

namespace ssmlm {

// ---------------------------------------------------------------------------
// Diagonal selective state space core.
//
// Per channel c and state index n the recurrence is
//     h_t = decay_t * h_{t-1} + shift_t,        h_{-1} = 0 (or a carried state)
// with decay_t = exp(delta_t * A[c,n]) and shift_t = delta_t * B_t[n] * u_t[c],
// and the readout y_t[c] = sum_n C_t[n] * h_t[c,n] + D[c] * u_t[c].
// delta, B and C are functions of the input: x_proj maps u_t to
// (dt_low, B_t, C_t) and dt_up lifts dt_low to a per-channel delta
// pre-activation which goes through softplus.
// ---------------------------------------------------------------------------

struct BlockConfig {
    int64_t d_model = 0;
    int64_t d_inner = 0; // expand * d_model
    int64_t d_state = 0;
    int64_t d_conv = 0;
    int64_t dt_rank = 0;

    void validate() const;
};

// One step of the recurrence as a composable element. Composition
// (apply e1 then e2) is associative, which is what makes the parallel
// prefix evaluation legal.
template <class T>
struct ScanElement {
    T decay;
    T shift;
};

template <class T>
inline ScanElement<T> scan_combine(const ScanElement<T>& e1, const ScanElement<T>& e2) {
    return {e2.decay * e1.decay, e2.decay * e1.shift + e2.shift};
}

// Zero-order-hold step for the diagonal system: a_bar = exp(delta*a),
// b_bar = delta*b. Requires delta > 0 and is the contract the vectorized
// builders inline.
template <class T>
void discretize(T delta, T a, T b, T* a_bar, T* b_bar);

// ---------------------------------------------------------------------------
// Raw first-order linear recurrences over n independent lanes, time-major
// layout: decay[t*n + j]. The sequential form is the serial reference; the
// parallel form is a work-efficient blocked prefix scan over ScanElements
// (per-block inclusive prefixes, serial carry across blocks, OpenMP over
// lane chunks x time blocks).
// ---------------------------------------------------------------------------
template <class T>
void linear_scan_sequential(const T* decay, const T* shift, T* h,
                            int64_t L, int64_t n, const T* h0 = nullptr);

// Destructive: decay/shift are overwritten with block-local prefixes and the
// result lands in shift. block_len <= 0 picks a default.
template <class T>
void linear_scan_parallel(T* decay, T* shift,
                          int64_t L, int64_t n, const T* h0 = nullptr,
                          int64_t block_len = 0);

enum class ScanMode { sequential, parallel };

// ---------------------------------------------------------------------------
// Selective scan over input-dependent parameters.
// ---------------------------------------------------------------------------

// Non-owning view of the per-layer state space parameters.
// x_proj rows are laid out [dt_rank | d_state (B) | d_state (C)].
template <class T>
struct SsmParams {
    const T* a_log;  // [d_inner, d_state], A = -exp(a_log)
    const T* d_skip; // [d_inner]
    const T* x_proj; // [dt_rank + 2*d_state, d_inner]
    const T* dt_w;   // [d_inner, dt_rank]
    const T* dt_b;   // [d_inner]
};

// Gradients for the same parameters (accumulated into).
template <class T>
struct SsmParamGrads {
    T* a_log;
    T* d_skip;
    T* x_proj;
    T* dt_w;
    T* dt_b;
};

// Activations cached by the forward pass for the backward pass.
template <class T>
struct SelScanCache {
    Tensor<T> xdbc;   // [L, dt_rank + 2*d_state]
    Tensor<T> dt_pre; // [L, d_inner] pre-softplus
    Tensor<T> delta;  // [L, d_inner]
    Tensor<T> decay;  // [L, d_inner * d_state]
    Tensor<T> h;      // [L, d_inner * d_state]
};

// y[t,c] = sum_n C_t[n] h_t[c,n] + D[c] u[t,c]. When cache is null the scan
// runs in constant memory (chunked), which is the inference path; state
// (optional, [d_inner*d_state]) is the carried recurrence state, updated in
// place. seg_start marks positions where the carried state is dropped
// (document boundaries in packed training sequences).
// Errors: L == 0, or any non-finite input value (reported with its index).
template <class T>
void selective_scan_fwd(const T* u, int64_t L, const BlockConfig& bc,
                        const SsmParams<T>& p, T* y, ScanMode mode,
                        SelScanCache<T>* cache = nullptr,
                        const uint8_t* seg_start = nullptr,
                        T* state = nullptr,
                        int64_t block_len = 0);

// Backward through the full selective scan (assumes h_{-1} = 0, the training
// configuration). du is accumulated into.
template <class T>
void selective_scan_bwd(const T* u, const T* dy, int64_t L, const BlockConfig& bc,
                        const SsmParams<T>& p, const SelScanCache<T>& cache,
                        const SsmParamGrads<T>& g, T* du,
                        const uint8_t* seg_start = nullptr);

// Spec-level convenience wrappers with owned outputs.
template <class T>
Tensor<T> selective_scan_sequential(const Tensor<T>& u, const BlockConfig& bc, const SsmParams<T>& p);
template <class T>
Tensor<T> selective_scan_parallel(const Tensor<T>& u, const BlockConfig& bc, const SsmParams<T>& p,
                                  int64_t block_len = 0);

// Single recurrence step for incremental decoding: consumes one post-conv
// input row u_t [d_inner], updates state [d_inner*d_state] in place and
// writes y_t [d_inner].
template <class T>
void selective_scan_step(const T* u_t, const BlockConfig& bc, const SsmParams<T>& p,
                         T* state, T* y_t, const T* a_table = nullptr);

} // namespace ssmlm
