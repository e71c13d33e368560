#include "ssmlm/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#include <cblas.h>
#include <malloc.h>
#include <omp.h>

#include "ssmlm/util.hpp"

extern "C" void openblas_set_num_threads(int);

namespace ssmlm {

// Large per-step activation buffers would otherwise bounce through mmap;
// keeping them on the heap saves ~15% of a training step.
[[maybe_unused]] static const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();

static int g_threads = 0;

void set_num_threads(int n) {
    if (n <= 0) return;
    g_threads = n;
    omp_set_num_threads(n);
    openblas_set_num_threads(n);
}

int max_threads() { return g_threads > 0 ? g_threads : omp_get_max_threads(); }

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------
static void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k,
                 const float* a, int64_t lda, const float* b, int64_t ldb,
                 float* c, int64_t ldc, float beta) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                int(m), int(n), int(k), 1.0f, a, int(lda), b, int(ldb), beta, c, int(ldc));
}
static void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k,
                 const double* a, int64_t lda, const double* b, int64_t ldb,
                 double* c, int64_t ldc, double beta) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                int(m), int(n), int(k), 1.0, a, int(lda), b, int(ldb), beta, c, int(ldc));
}

template <class T>
void matmul_nt(const T* x, const T* w, T* y, int64_t m, int64_t k, int64_t n, bool accum) {
    gemm(false, true, m, n, k, x, k, w, k, y, n, accum ? T(1) : T(0));
}
template <class T>
void matmul_nn(const T* g, const T* w, T* y, int64_t m, int64_t n, int64_t k, bool accum) {
    gemm(false, false, m, k, n, g, n, w, k, y, k, accum ? T(1) : T(0));
}
template <class T>
void matmul_tn(const T* g, const T* x, T* y, int64_t m, int64_t n, int64_t k, bool accum) {
    gemm(true, false, n, k, m, g, n, x, k, y, k, accum ? T(1) : T(0));
}

template <class T>
void matmul_nt_ref(const T* x, const T* w, T* y, int64_t m, int64_t k, int64_t n, bool accum) {
    for (int64_t i = 0; i < m; i++) {
        for (int64_t j = 0; j < n; j++) {
            T acc = accum ? y[i * n + j] : T(0);
            for (int64_t p = 0; p < k; p++) acc += x[i * k + p] * w[j * k + p];
            y[i * n + j] = acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------
template <class T>
void silu_fwd(const T* x, T* y, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; i++) y[i] = silu(x[i]);
}

template <class T>
void silu_bwd(const T* x, const T* dy, T* dx, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; i++) dx[i] += dy[i] * silu_grad(x[i]);
}

template <class T>
void add_inplace(T* y, const T* x, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; i++) y[i] += x[i];
}

template <class T>
void scale_inplace(T* x, T s, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; i++) x[i] *= s;
}

template <class T>
double sum_squares(const T* x, int64_t n) {
    // Chunked so the combine order is fixed regardless of thread count.
    constexpr int64_t chunk = 4096;
    int64_t nchunks = (n + chunk - 1) / chunk;
    std::vector<double> partial(size_t(nchunks), 0.0);
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < nchunks; c++) {
        double acc = 0.0;
        int64_t hi = std::min(n, (c + 1) * chunk);
        for (int64_t i = c * chunk; i < hi; i++) acc += double(x[i]) * double(x[i]);
        partial[size_t(c)] = acc;
    }
    double total = 0.0;
    for (double p : partial) total += p;
    return total;
}

template <class T>
bool find_nonfinite(const T* x, int64_t n, int64_t* index) {
    for (int64_t i = 0; i < n; i++) {
        if (!std::isfinite(double(x[i]))) {
            if (index) *index = i;
            return true;
        }
    }
    return false;
}

// ---------------------------------------------------------------------------
// RMS norm
// ---------------------------------------------------------------------------
template <class T>
void rmsnorm_fwd(const T* x, const T* gain, T* y, T* rstd, int64_t rows, int64_t d, T eps) {
#pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < rows; t++) {
        const T* xt = x + t * d;
        double ss = 0.0;
        for (int64_t i = 0; i < d; i++) ss += double(xt[i]) * double(xt[i]);
        T r = T(1.0 / std::sqrt(ss / double(d) + double(eps)));
        rstd[t] = r;
        T* yt = y + t * d;
        for (int64_t i = 0; i < d; i++) yt[i] = xt[i] * r * gain[i];
    }
}

template <class T>
void rmsnorm_bwd(const T* x, const T* gain, const T* rstd, const T* dy,
                 T* dx, T* dgain, int64_t rows, int64_t d) {
    // dgain accumulated serially over rows to keep the sum order fixed.
    for (int64_t t = 0; t < rows; t++) {
        const T* xt = x + t * d;
        const T* dyt = dy + t * d;
        T r = rstd[t];
        for (int64_t i = 0; i < d; i++) dgain[i] += dyt[i] * xt[i] * r;
    }
#pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < rows; t++) {
        const T* xt = x + t * d;
        const T* dyt = dy + t * d;
        T* dxt = dx + t * d;
        T r = rstd[t];
        double s = 0.0;
        for (int64_t i = 0; i < d; i++) s += double(dyt[i]) * double(gain[i]) * double(xt[i]);
        T corr = T(s) * r * r * r / T(d);
        for (int64_t i = 0; i < d; i++) dxt[i] += dyt[i] * gain[i] * r - xt[i] * corr;
    }
}

// ---------------------------------------------------------------------------
// Depthwise causal conv1d
// ---------------------------------------------------------------------------
template <class T>
void causal_conv1d_fwd(const T* u, const T* w, const T* bias, T* y,
                       int64_t L, int64_t channels, int64_t width,
                       const uint8_t* seg_start, T* state) {
    check(width >= 1, "causal_conv1d: width must be >= 1");
    check(!(seg_start && state), "causal_conv1d: carried state and segment resets are exclusive");
    std::vector<int64_t> seg;
    if (seg_start) {
        seg.assign(size_t(L), 0);
        int64_t cur = 0;
        for (int64_t t = 0; t < L; t++) {
            if (seg_start[t]) cur = t;
            seg[size_t(t)] = cur;
        }
    }
#pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < L; t++) {
        int64_t lo = seg_start ? seg[size_t(t)] : (state ? -(width - 1) : 0);
        T* yt = y + t * channels;
        for (int64_t c = 0; c < channels; c++) yt[c] = bias ? bias[c] : T(0);
        for (int64_t j = 0; j < width; j++) {
            int64_t src = t - (width - 1) + j;
            if (src < lo) continue;
            const T* row = src >= 0 ? u + src * channels : state + (src + width - 1) * channels;
            const T* wj = w + j * channels;
            for (int64_t c = 0; c < channels; c++) yt[c] += wj[c] * row[c];
        }
    }
    if (state && width > 1) {
        // carried tail <- last width-1 rows of [old tail ++ u]
        int64_t tail = width - 1;
        std::vector<T> merged(size_t((tail + L) * channels));
        std::memcpy(merged.data(), state, size_t(tail * channels) * sizeof(T));
        std::memcpy(merged.data() + tail * channels, u, size_t(L * channels) * sizeof(T));
        std::memcpy(state, merged.data() + L * channels, size_t(tail * channels) * sizeof(T));
    }
}

template <class T>
void causal_conv1d_bwd(const T* u, const T* w, const T* dy,
                       T* du, T* dw, T* dbias,
                       int64_t L, int64_t channels, int64_t width,
                       const uint8_t* seg_start) {
    // Segment start for every position, resolved once.
    std::vector<int64_t> seg(size_t(L), 0);
    if (seg_start) {
        int64_t cur = 0;
        for (int64_t t = 0; t < L; t++) {
            if (seg_start[t]) cur = t;
            seg[size_t(t)] = cur;
        }
    }
    for (int64_t t = 0; t < L; t++) {
        const T* dyt = dy + t * channels;
        if (dbias) {
            for (int64_t c = 0; c < channels; c++) dbias[c] += dyt[c];
        }
        for (int64_t j = 0; j < width; j++) {
            int64_t src = t - (width - 1) + j;
            if (src < seg[size_t(t)] || src < 0) continue;
            const T* ut = u + src * channels;
            T* dwj = dw + j * channels;
            for (int64_t c = 0; c < channels; c++) dwj[c] += dyt[c] * ut[c];
        }
    }
#pragma omp parallel for schedule(static)
    for (int64_t src = 0; src < L; src++) {
        T* dut = du + src * channels;
        for (int64_t j = 0; j < width; j++) {
            int64_t t = src + (width - 1) - j;
            if (t >= L) continue;
            if (src < seg[size_t(t)]) continue;
            const T* dyt = dy + t * channels;
            const T* wj = w + j * channels;
            for (int64_t c = 0; c < channels; c++) dut[c] += wj[c] * dyt[c];
        }
    }
}

template <class T>
void causal_conv1d_ref(const T* u, const T* w, const T* bias, T* y,
                       int64_t L, int64_t channels, int64_t width) {
    for (int64_t t = 0; t < L; t++) {
        for (int64_t c = 0; c < channels; c++) {
            T acc = bias ? bias[c] : T(0);
            for (int64_t j = 0; j < width; j++) {
                int64_t src = t - (width - 1) + j;
                if (src < 0) continue;
                acc += w[j * channels + c] * u[src * channels + c];
            }
            y[t * channels + c] = acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Cross entropy
// ---------------------------------------------------------------------------
template <class T>
double log_softmax_at(const T* logits, int64_t vocab, int64_t target) {
    double mx = double(logits[0]);
    for (int64_t j = 1; j < vocab; j++) mx = std::max(mx, double(logits[j]));
    double sum = 0.0;
    for (int64_t j = 0; j < vocab; j++) sum += std::exp(double(logits[j]) - mx);
    return double(logits[target]) - mx - std::log(sum);
}

template <class T>
double cross_entropy_fwd(const T* logits, const int32_t* targets,
                         int64_t rows, int64_t vocab, int64_t* scored) {
    for (int64_t t = 0; t < rows; t++) {
        check(targets[t] < vocab, "cross_entropy: target id ", targets[t], " out of range at row ", t);
    }
    std::vector<double> row_nll(size_t(rows), 0.0);
#pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < rows; t++) {
        int32_t tgt = targets[t];
        if (tgt < 0) continue;
        row_nll[size_t(t)] = -log_softmax_at(logits + t * vocab, vocab, tgt);
    }
    double total = 0.0;
    int64_t n = 0;
    for (int64_t t = 0; t < rows; t++) {
        if (targets[t] >= 0) { total += row_nll[size_t(t)]; n++; }
    }
    check(n > 0, "cross_entropy: all positions masked");
    if (scored) *scored = n;
    return total;
}

template <class T>
void cross_entropy_bwd(const T* logits, const int32_t* targets,
                       T* dlogits, int64_t rows, int64_t vocab, double denom) {
#pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < rows; t++) {
        const T* lt = logits + t * vocab;
        T* dt = dlogits + t * vocab;
        int32_t tgt = targets[t];
        if (tgt < 0) {
            std::fill(dt, dt + vocab, T(0));
            continue;
        }
        double mx = double(lt[0]);
        for (int64_t j = 1; j < vocab; j++) mx = std::max(mx, double(lt[j]));
        double sum = 0.0;
        for (int64_t j = 0; j < vocab; j++) sum += std::exp(double(lt[j]) - mx);
        for (int64_t j = 0; j < vocab; j++) {
            double p = std::exp(double(lt[j]) - mx) / sum;
            dt[j] = T((p - (j == tgt ? 1.0 : 0.0)) / denom);
        }
    }
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------
template <class T>
void embedding_fwd(const int32_t* tokens, const T* table, T* y, int64_t L, int64_t d) {
#pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < L; t++) {
        std::memcpy(y + t * d, table + int64_t(tokens[t]) * d, size_t(d) * sizeof(T));
    }
}

template <class T>
void embedding_bwd(const int32_t* tokens, const T* dy, T* dtable, int64_t L, int64_t d) {
    for (int64_t t = 0; t < L; t++) {
        const T* dyt = dy + t * d;
        T* row = dtable + int64_t(tokens[t]) * d;
        for (int64_t i = 0; i < d; i++) row[i] += dyt[i];
    }
}

// ---------------------------------------------------------------------------
// Instantiations
// ---------------------------------------------------------------------------
#define SSMLM_INSTANTIATE(T)                                                                        \
    template void matmul_nt<T>(const T*, const T*, T*, int64_t, int64_t, int64_t, bool);           \
    template void matmul_nn<T>(const T*, const T*, T*, int64_t, int64_t, int64_t, bool);           \
    template void matmul_tn<T>(const T*, const T*, T*, int64_t, int64_t, int64_t, bool);           \
    template void matmul_nt_ref<T>(const T*, const T*, T*, int64_t, int64_t, int64_t, bool);       \
    template void silu_fwd<T>(const T*, T*, int64_t);                                              \
    template void silu_bwd<T>(const T*, const T*, T*, int64_t);                                    \
    template void add_inplace<T>(T*, const T*, int64_t);                                           \
    template void scale_inplace<T>(T*, T, int64_t);                                                \
    template double sum_squares<T>(const T*, int64_t);                                             \
    template bool find_nonfinite<T>(const T*, int64_t, int64_t*);                                  \
    template void rmsnorm_fwd<T>(const T*, const T*, T*, T*, int64_t, int64_t, T);                 \
    template void rmsnorm_bwd<T>(const T*, const T*, const T*, const T*, T*, T*, int64_t, int64_t); \
    template void causal_conv1d_fwd<T>(const T*, const T*, const T*, T*, int64_t, int64_t, int64_t, const uint8_t*, T*); \
    template void causal_conv1d_bwd<T>(const T*, const T*, const T*, T*, T*, T*, int64_t, int64_t, int64_t, const uint8_t*); \
    template void causal_conv1d_ref<T>(const T*, const T*, const T*, T*, int64_t, int64_t, int64_t); \
    template double cross_entropy_fwd<T>(const T*, const int32_t*, int64_t, int64_t, int64_t*);    \
    template void cross_entropy_bwd<T>(const T*, const int32_t*, T*, int64_t, int64_t, double);    \
    template double log_softmax_at<T>(const T*, int64_t, int64_t);                                 \
    template void embedding_fwd<T>(const int32_t*, const T*, T*, int64_t, int64_t);                \
    template void embedding_bwd<T>(const int32_t*, const T*, T*, int64_t, int64_t);

SSMLM_INSTANTIATE(float)
SSMLM_INSTANTIATE(double)

} // namespace ssmlm
