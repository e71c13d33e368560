#pragma once

#include <cmath>
#include <cstdint>

namespace ssmlm {

// ---------------------------------------------------------------------------
// GEMM. Weight matrices are stored [out, in]; activations are [rows, in]
// time-major. The production path goes through BLAS; the *_ref variants are
// plain serial loops kept as the test oracle.
//
//   matmul_nt: Y[m,n] (+)= X[m,k] * W[n,k]^T      (forward projection)
//   matmul_nn: Y[m,k] (+)= G[m,n] * W[n,k]        (input gradient)
//   matmul_tn: Y[n,k] (+)= G[m,n]^T * X[m,k]      (weight gradient)
// ---------------------------------------------------------------------------
template <class T>
void matmul_nt(const T* x, const T* w, T* y, int64_t m, int64_t k, int64_t n, bool accum = false);
template <class T>
void matmul_nn(const T* g, const T* w, T* y, int64_t m, int64_t n, int64_t k, bool accum = false);
template <class T>
void matmul_tn(const T* g, const T* x, T* y, int64_t m, int64_t n, int64_t k, bool accum = false);

template <class T>
void matmul_nt_ref(const T* x, const T* w, T* y, int64_t m, int64_t k, int64_t n, bool accum = false);

// ---------------------------------------------------------------------------
// Scalar activations
// ---------------------------------------------------------------------------

// Polynomial exp for the f32 hot paths (~1e-7 relative, below f32 epsilon);
// f64 stays on libm.
inline float fast_exp(float x) {
    if (x < -87.0f) return 0.0f;
    if (x > 88.0f) return std::exp(x);
    float t = x * 1.442695040888963f;
    float fi = std::floor(t);
    float f = t - fi;
    float p = 1.0f + f * (0.6931471805599453f +
                          f * (0.2402265069591007f +
                               f * (0.0555041086648216f +
                                    f * (0.0096181291076285f + f * 0.0013333558146428f))));
    union {
        uint32_t u;
        float fl;
    } bits;
    bits.u = uint32_t(int32_t(fi) + 127) << 23;
    return p * bits.fl;
}
inline double fast_exp(double x) { return std::exp(x); }

template <class T>
inline T sigmoid(T x) {
    return x >= T(0) ? T(1) / (T(1) + fast_exp(-x)) : fast_exp(x) / (T(1) + fast_exp(x));
}

// log(1 + exp(x)), stable at both tails.
template <class T>
inline T softplus(T x) {
    if (x > T(30)) return x;
    if (x < T(-30)) return std::exp(x);
    return std::log1p(fast_exp(x));
}

template <class T>
inline T silu(T x) { return x * sigmoid(x); }

template <class T>
inline T silu_grad(T x) {
    T s = sigmoid(x);
    return s * (T(1) + x * (T(1) - s));
}

template <class T>
void silu_fwd(const T* x, T* y, int64_t n);
// dx += dy * silu'(x)
template <class T>
void silu_bwd(const T* x, const T* dy, T* dx, int64_t n);

// ---------------------------------------------------------------------------
// RMS norm over the last dim: y = x * g / sqrt(mean(x^2) + eps).
// rstd (one value per row) is cached for the backward pass.
// ---------------------------------------------------------------------------
template <class T>
void rmsnorm_fwd(const T* x, const T* gain, T* y, T* rstd, int64_t rows, int64_t d, T eps);
template <class T>
void rmsnorm_bwd(const T* x, const T* gain, const T* rstd, const T* dy,
                 T* dx, T* dgain, int64_t rows, int64_t d);

// ---------------------------------------------------------------------------
// Depthwise causal conv1d. w is [width, channels]; w[width-1] is the tap on
// the current timestep, so a unit impulse reproduces the kernel reversed.
// Positions flagged in seg_start (optional) behave as sequence starts: taps
// never reach across a segment boundary. state (optional, [width-1, channels])
// carries the trailing inputs of the previous chunk in streaming mode and is
// updated in place.
// ---------------------------------------------------------------------------
template <class T>
void causal_conv1d_fwd(const T* u, const T* w, const T* bias, T* y,
                       int64_t L, int64_t channels, int64_t width,
                       const uint8_t* seg_start = nullptr, T* state = nullptr);
template <class T>
void causal_conv1d_bwd(const T* u, const T* w, const T* dy,
                       T* du, T* dw, T* dbias,
                       int64_t L, int64_t channels, int64_t width,
                       const uint8_t* seg_start = nullptr);

template <class T>
void causal_conv1d_ref(const T* u, const T* w, const T* bias, T* y,
                       int64_t L, int64_t channels, int64_t width);

// ---------------------------------------------------------------------------
// Softmax cross entropy. targets[i] < 0 marks a masked position. Returns the
// summed NLL (natural log) and writes the number of scored positions; the
// caller divides. dlogits = (softmax - onehot) / denom for scored rows, 0 for
// masked rows.
// ---------------------------------------------------------------------------
template <class T>
double cross_entropy_fwd(const T* logits, const int32_t* targets,
                         int64_t rows, int64_t vocab, int64_t* scored);
template <class T>
void cross_entropy_bwd(const T* logits, const int32_t* targets,
                       T* dlogits, int64_t rows, int64_t vocab, double denom);

// Row-wise log-softmax of a single row, returning log p[target].
template <class T>
double log_softmax_at(const T* logits, int64_t vocab, int64_t target);

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------
template <class T>
void embedding_fwd(const int32_t* tokens, const T* table, T* y, int64_t L, int64_t d);
template <class T>
void embedding_bwd(const int32_t* tokens, const T* dy, T* dtable, int64_t L, int64_t d);

// ---------------------------------------------------------------------------
// Misc
// ---------------------------------------------------------------------------
template <class T>
void add_inplace(T* y, const T* x, int64_t n);
template <class T>
double sum_squares(const T* x, int64_t n); // deterministic (fixed order)
template <class T>
void scale_inplace(T* x, T s, int64_t n);

template <class T>
bool find_nonfinite(const T* x, int64_t n, int64_t* index);

} // namespace ssmlm
