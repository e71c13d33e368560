#include "ssmlm/scan.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include <omp.h>

#include "ssmlm/kernels.hpp"
#include "ssmlm/util.hpp"

namespace ssmlm {

void BlockConfig::validate() const {
    check(d_model > 0 && d_inner > 0 && d_state > 0 && d_conv > 0 && dt_rank > 0,
          "BlockConfig: all dimensions must be strictly positive (d_model=", d_model,
          " d_inner=", d_inner, " d_state=", d_state, " d_conv=", d_conv, " dt_rank=", dt_rank, ")");
}

template <class T>
void discretize(T delta, T a, T b, T* a_bar, T* b_bar) {
    check(delta > T(0), "discretize: delta must be > 0, got ", double(delta));
    *a_bar = std::exp(delta * a);
    *b_bar = delta * b;
}

// ---------------------------------------------------------------------------
// Raw linear scans
// ---------------------------------------------------------------------------
template <class T>
void linear_scan_sequential(const T* decay, const T* shift, T* h,
                            int64_t L, int64_t n, const T* h0) {
    std::vector<T> carry(size_t(n), T(0));
    if (h0) std::copy(h0, h0 + n, carry.begin());
    for (int64_t t = 0; t < L; t++) {
        const T* dt = decay + t * n;
        const T* st = shift + t * n;
        T* ht = h + t * n;
        for (int64_t j = 0; j < n; j++) {
            carry[size_t(j)] = dt[j] * carry[size_t(j)] + st[j];
            ht[j] = carry[size_t(j)];
        }
    }
}

template <class T>
void linear_scan_parallel(T* decay, T* shift, int64_t L, int64_t n,
                          const T* h0, int64_t block_len) {
    if (block_len <= 0) {
        int64_t want = std::max<int64_t>(1, 4 * max_threads());
        block_len = std::clamp<int64_t>((L + want - 1) / want, 64, 16384);
        // a single worker gains nothing from the two-pass structure
        if (max_threads() == 1) block_len = L;
    }
    int64_t nblocks = (L + block_len - 1) / block_len;
    if (nblocks == 1) {
        // degenerate blocked scan: one fused pass, result in shift
        std::vector<T> carry(size_t(n), T(0));
        if (h0) std::copy(h0, h0 + n, carry.begin());
        for (int64_t t = 0; t < L; t++) {
            const T* dt = decay + t * n;
            T* st = shift + t * n;
            for (int64_t j = 0; j < n; j++) {
                carry[size_t(j)] = dt[j] * carry[size_t(j)] + st[j];
                st[j] = carry[size_t(j)];
            }
        }
        return;
    }

    // Phase 1: in-place inclusive prefix (as ScanElements) within each block.
    #pragma omp parallel for schedule(static)
    for (int64_t b = 0; b < nblocks; b++) {
        int64_t t0 = b * block_len;
        int64_t t1 = std::min(L, t0 + block_len);
        for (int64_t t = t0 + 1; t < t1; t++) {
            const T* pd = decay + (t - 1) * n;
            const T* ps = shift + (t - 1) * n;
            T* cd = decay + t * n;
            T* cs = shift + t * n;
            for (int64_t j = 0; j < n; j++) {
                cs[j] = cd[j] * ps[j] + cs[j];
                cd[j] = cd[j] * pd[j];
            }
        }
    }

    // Phase 2: serial carry of the recurrence state across blocks.
    std::vector<T> carries(size_t(nblocks * n), T(0));
    {
        std::vector<T> s(size_t(n), T(0));
        if (h0) std::copy(h0, h0 + n, s.begin());
        for (int64_t b = 0; b < nblocks; b++) {
            std::copy(s.begin(), s.end(), carries.begin() + b * n);
            int64_t last = std::min(L, (b + 1) * block_len) - 1;
            const T* ad = decay + last * n;
            const T* as = shift + last * n;
            for (int64_t j = 0; j < n; j++) s[size_t(j)] = ad[j] * s[size_t(j)] + as[j];
        }
    }

    // Phase 3: apply each block's incoming state; the result lands in shift.
    #pragma omp parallel for schedule(static)
    for (int64_t b = 0; b < nblocks; b++) {
        int64_t t0 = b * block_len;
        int64_t t1 = std::min(L, t0 + block_len);
        const T* s = carries.data() + b * n;
        for (int64_t t = t0; t < t1; t++) {
            const T* cd = decay + t * n;
            T* cs = shift + t * n;
            for (int64_t j = 0; j < n; j++) cs[j] = cd[j] * s[j] + cs[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Selective scan
// ---------------------------------------------------------------------------
namespace {

template <class T>
void project_inputs(const T* u, int64_t rows, const BlockConfig& bc, const SsmParams<T>& p,
                    T* xdbc, T* dt_pre, T* delta) {
    int64_t R = bc.dt_rank, N = bc.d_state, D = bc.d_inner;
    int64_t W = R + 2 * N;
    matmul_nt(u, p.x_proj, xdbc, rows, D, W);
    // dt_pre = xdbc[:, :R] * dt_w^T + dt_b; strided A needs a packed copy
    std::vector<T> dt_low(size_t(rows * R));
    #pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < rows; t++) {
        std::memcpy(dt_low.data() + t * R, xdbc + t * W, size_t(R) * sizeof(T));
    }
    matmul_nt(dt_low.data(), p.dt_w, dt_pre, rows, R, D);
    #pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < rows; t++) {
        T* pre = dt_pre + t * D;
        T* del = delta + t * D;
        for (int64_t c = 0; c < D; c++) {
            pre[c] += p.dt_b[c];
            del[c] = softplus(pre[c]);
        }
    }
}

// A = -exp(a_log), materialized once per call ([d_inner, d_state]).
template <class T>
std::vector<T> neg_exp_table(const SsmParams<T>& p, const BlockConfig& bc) {
    std::vector<T> a(size_t(bc.d_inner * bc.d_state));
    for (size_t i = 0; i < a.size(); i++) a[i] = -std::exp(p.a_log[i]);
    return a;
}

// decay[t,c,n] = exp(delta[t,c] * A[c,n]); shift[t,c,n] = delta[t,c]*B[t,n]*u[t,c].
// Positions flagged in seg_start get decay forced to 0 (state reset).
template <class T>
void build_elements(const T* u, const T* delta, const T* xdbc, int64_t rows,
                    const BlockConfig& bc, const T* a_table, const uint8_t* seg_start,
                    T* decay, T* shift) {
    int64_t R = bc.dt_rank, N = bc.d_state, D = bc.d_inner;
    int64_t W = R + 2 * N;
    #pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < rows; t++) {
        const T* b_row = xdbc + t * W + R;
        const T* del = delta + t * D;
        const T* ut = u + t * D;
        bool reset = seg_start && seg_start[t];
        T* dec_t = decay + t * D * N;
        T* shf_t = shift + t * D * N;
        for (int64_t c = 0; c < D; c++) {
            T dl = del[c], uc = ut[c];
            const T* al = a_table + c * N;
            T* dec = dec_t + c * N;
            T* shf = shf_t + c * N;
            for (int64_t n = 0; n < N; n++) {
                dec[n] = reset ? T(0) : fast_exp(dl * al[n]);
                shf[n] = dl * b_row[n] * uc;
            }
        }
    }
}

// y[t,c] = sum_n C[t,n]*h[t,c,n] + D[c]*u[t,c]
template <class T>
void readout(const T* h, const T* xdbc, const T* u, int64_t rows,
             const BlockConfig& bc, const SsmParams<T>& p, T* y) {
    int64_t R = bc.dt_rank, N = bc.d_state, D = bc.d_inner;
    int64_t W = R + 2 * N;
    #pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < rows; t++) {
        const T* c_row = xdbc + t * W + R + N;
        const T* ht = h + t * D * N;
        const T* ut = u + t * D;
        T* yt = y + t * D;
        for (int64_t c = 0; c < D; c++) {
            T acc = p.d_skip[c] * ut[c];
            const T* hc = ht + c * N;
            for (int64_t n = 0; n < N; n++) acc += c_row[n] * hc[n];
            yt[c] = acc;
        }
    }
}

} // namespace

template <class T>
void selective_scan_fwd(const T* u, int64_t L, const BlockConfig& bc,
                        const SsmParams<T>& p, T* y, ScanMode mode,
                        SelScanCache<T>* cache, const uint8_t* seg_start,
                        T* state, int64_t block_len) {
    bc.validate();
    check(L >= 1, "selective_scan: empty sequence (L=0) rejected");
    int64_t idx = 0;
    if (find_nonfinite(u, L * bc.d_inner, &idx)) {
        fail("selective_scan: non-finite input at flat index ", idx,
             " (t=", idx / bc.d_inner, ", channel=", idx % bc.d_inner, ")");
    }
    int64_t D = bc.d_inner, N = bc.d_state, DN = D * N;

    if (cache) {
        cache->xdbc = Tensor<T>({L, bc.dt_rank + 2 * N});
        cache->dt_pre = Tensor<T>({L, D});
        cache->delta = Tensor<T>({L, D});
        cache->decay = Tensor<T>({L, DN});
        cache->h = Tensor<T>({L, DN});
        project_inputs(u, L, bc, p, cache->xdbc.data(), cache->dt_pre.data(), cache->delta.data());
        auto a_table = neg_exp_table(p, bc);
        build_elements(u, cache->delta.data(), cache->xdbc.data(), L, bc, a_table.data(),
                       seg_start, cache->decay.data(), cache->h.data());
        if (mode == ScanMode::sequential) {
            // in-place: shift rows are consumed before they are overwritten
            linear_scan_sequential(cache->decay.data(), cache->h.data(), cache->h.data(), L, DN, state);
        } else {
            std::vector<T> dec_scratch(cache->decay.v); // parallel scan is destructive
            linear_scan_parallel(dec_scratch.data(), cache->h.data(), L, DN, state, block_len);
        }
        if (state) std::memcpy(state, cache->h.data() + (L - 1) * DN, size_t(DN) * sizeof(T));
        readout(cache->h.data(), cache->xdbc.data(), u, L, bc, p, y);
        return;
    }

    // Inference path: bounded memory, chunked over time.
    int64_t chunk = block_len > 0 ? block_len : 1024;
    std::vector<T> carry(size_t(DN), T(0));
    if (state) std::copy(state, state + DN, carry.begin());
    Tensor<T> xdbc({chunk, bc.dt_rank + 2 * N}), dt_pre({chunk, D}), delta({chunk, D});
    Tensor<T> decay({chunk, DN}), shift({chunk, DN});
    auto a_table = neg_exp_table(p, bc);
    for (int64_t t0 = 0; t0 < L; t0 += chunk) {
        int64_t rows = std::min(chunk, L - t0);
        const T* uc = u + t0 * D;
        project_inputs(uc, rows, bc, p, xdbc.data(), dt_pre.data(), delta.data());
        build_elements(uc, delta.data(), xdbc.data(), rows, bc, a_table.data(),
                       seg_start ? seg_start + t0 : nullptr, decay.data(), shift.data());
        if (mode == ScanMode::sequential) {
            linear_scan_sequential(decay.data(), shift.data(), shift.data(), rows, DN, carry.data());
        } else {
            linear_scan_parallel(decay.data(), shift.data(), rows, DN, carry.data(), block_len);
        }
        std::memcpy(carry.data(), shift.data() + (rows - 1) * DN, size_t(DN) * sizeof(T));
        readout(shift.data(), xdbc.data(), uc, rows, bc, p, y + t0 * D);
    }
    if (state) std::copy(carry.begin(), carry.end(), state);
}

template <class T>
void selective_scan_bwd(const T* u, const T* dy, int64_t L, const BlockConfig& bc,
                        const SsmParams<T>& p, const SelScanCache<T>& cache,
                        const SsmParamGrads<T>& g, T* du, const uint8_t* seg_start) {
    int64_t R = bc.dt_rank, N = bc.d_state, D = bc.d_inner;
    int64_t W = R + 2 * N, DN = D * N;
    const T* h = cache.h.data();
    const T* decay = cache.decay.data();
    const T* delta = cache.delta.data();
    const T* xdbc = cache.xdbc.data();

    Tensor<T> hgrad({L, DN});       // dL/dh_t including future-step feedback
    Tensor<T> d_xdbc({L, W});
    Tensor<T> d_pre({L, D});        // dL/d dt_pre
    auto a_table = neg_exp_table(p, bc);

    // Pass 1 (parallel over channels): reverse-time state gradient plus every
    // channel-local accumulation (d_a_log, d_delta, scan part of du).
    #pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < D; c++) {
        const T* al = a_table.data() + c * N;
        std::vector<T> gnext(size_t(N), T(0));
        for (int64_t t = L - 1; t >= 0; t--) {
            const T* c_row = xdbc + t * W + R + N;
            const T* b_row = xdbc + t * W + R;
            T gy = dy[t * D + c];
            T dl = delta[t * D + c];
            T uc = u[t * D + c];
            const T* dec = decay + t * DN + c * N;
            const T* dec_next = t + 1 < L ? decay + (t + 1) * DN + c * N : nullptr;
            const T* hprev = t > 0 ? h + (t - 1) * DN + c * N : nullptr;
            bool reset = seg_start && seg_start[t];
            T* gt = hgrad.data() + t * DN + c * N;
            T ddelta = T(0);
            T du_scan = T(0);
            for (int64_t n = 0; n < N; n++) {
                T gh = gy * c_row[n] + (dec_next ? dec_next[n] * gnext[size_t(n)] : T(0));
                gt[n] = gh;
                gnext[size_t(n)] = gh;
                // decay = exp(delta*A) unless it was forced to zero by a reset
                if (hprev && !reset) {
                    T a = al[n];
                    T d_dec = gh * hprev[n];
                    ddelta += d_dec * a * dec[n];
                    g.a_log[c * N + n] += d_dec * dl * dec[n] * a;
                }
                ddelta += gh * b_row[n] * uc;
                du_scan += gh * dl * b_row[n];
            }
            d_pre[t * D + c] = ddelta * sigmoid(cache.dt_pre[t * D + c]);
            du[t * D + c] += du_scan + gy * p.d_skip[c];
        }
    }

    // Pass 2 (parallel over time): dB, dC rows of d_xdbc.
    #pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < L; t++) {
        const T* gt = hgrad.data() + t * DN;
        const T* ht = h + t * DN;
        T* db = d_xdbc.data() + t * W + R;
        T* dc = d_xdbc.data() + t * W + R + N;
        for (int64_t n = 0; n < N; n++) {
            T accB = T(0), accC = T(0);
            for (int64_t c = 0; c < D; c++) {
                accB += gt[c * N + n] * delta[t * D + c] * u[t * D + c];
                accC += dy[t * D + c] * ht[c * N + n];
            }
            db[n] = accB;
            dc[n] = accC;
        }
    }

    // dD[c] += sum_t dy*u
    #pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < D; c++) {
        double acc = 0.0;
        for (int64_t t = 0; t < L; t++) acc += double(dy[t * D + c]) * double(u[t * D + c]);
        g.d_skip[c] += T(acc);
    }

    // delta head: dt_b, dt_w, and the dt_rank slice of d_xdbc
    for (int64_t t = 0; t < L; t++) {
        const T* pr = d_pre.data() + t * D;
        for (int64_t c = 0; c < D; c++) g.dt_b[c] += pr[c];
    }
    std::vector<T> dt_low(size_t(L * R));
    #pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < L; t++) {
        std::memcpy(dt_low.data() + t * R, xdbc + t * W, size_t(R) * sizeof(T));
    }
    matmul_tn(d_pre.data(), dt_low.data(), g.dt_w, L, D, R, /*accum=*/true);
    std::vector<T> d_dt_low(size_t(L * R));
    matmul_nn(d_pre.data(), p.dt_w, d_dt_low.data(), L, D, R);
    #pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < L; t++) {
        T* row = d_xdbc.data() + t * W;
        const T* src = d_dt_low.data() + t * R;
        for (int64_t r = 0; r < R; r++) row[r] = src[r];
    }

    // back through x_proj
    matmul_tn(d_xdbc.data(), u, g.x_proj, L, W, D, /*accum=*/true);
    matmul_nn(d_xdbc.data(), p.x_proj, du, L, W, D, /*accum=*/true);
}

template <class T>
Tensor<T> selective_scan_sequential(const Tensor<T>& u, const BlockConfig& bc, const SsmParams<T>& p) {
    Tensor<T> y(u.shape);
    selective_scan_fwd(u.data(), u.dim(0), bc, p, y.data(), ScanMode::sequential);
    return y;
}

template <class T>
Tensor<T> selective_scan_parallel(const Tensor<T>& u, const BlockConfig& bc, const SsmParams<T>& p,
                                  int64_t block_len) {
    Tensor<T> y(u.shape);
    selective_scan_fwd<T>(u.data(), u.dim(0), bc, p, y.data(), ScanMode::parallel,
                          nullptr, nullptr, nullptr, block_len);
    return y;
}

template <class T>
void selective_scan_step(const T* u_t, const BlockConfig& bc, const SsmParams<T>& p,
                         T* state, T* y_t, const T* a_table_opt) {
    int64_t R = bc.dt_rank, N = bc.d_state, D = bc.d_inner;
    int64_t W = R + 2 * N;
    std::vector<T> xdbc(static_cast<size_t>(W));
    std::vector<T> pre(static_cast<size_t>(D));
    matmul_nt(u_t, p.x_proj, xdbc.data(), 1, D, W);
    matmul_nt(xdbc.data(), p.dt_w, pre.data(), 1, R, D);
    const T* b_row = xdbc.data() + R;
    const T* c_row = xdbc.data() + R + N;
    std::vector<T> a_local;
    if (!a_table_opt) {
        a_local = neg_exp_table(p, bc);
        a_table_opt = a_local.data();
    }
    for (int64_t c = 0; c < D; c++) {
        T dl = softplus(pre[size_t(c)] + p.dt_b[c]);
        T uc = u_t[c];
        const T* al = a_table_opt + c * N;
        T* st = state + c * N;
        T acc = p.d_skip[c] * uc;
        for (int64_t n = 0; n < N; n++) {
            T dec = fast_exp(dl * al[n]);
            st[n] = dec * st[n] + dl * b_row[n] * uc;
            acc += c_row[n] * st[n];
        }
        y_t[c] = acc;
    }
}

#define SSMLM_SCAN_INSTANTIATE(T)                                                                  \
    template void discretize<T>(T, T, T, T*, T*);                                                  \
    template void linear_scan_sequential<T>(const T*, const T*, T*, int64_t, int64_t, const T*);   \
    template void linear_scan_parallel<T>(T*, T*, int64_t, int64_t, const T*, int64_t);            \
    template void selective_scan_fwd<T>(const T*, int64_t, const BlockConfig&, const SsmParams<T>&, \
                                        T*, ScanMode, SelScanCache<T>*, const uint8_t*, T*, int64_t); \
    template void selective_scan_bwd<T>(const T*, const T*, int64_t, const BlockConfig&,           \
                                        const SsmParams<T>&, const SelScanCache<T>&,               \
                                        const SsmParamGrads<T>&, T*, const uint8_t*);              \
    template Tensor<T> selective_scan_sequential<T>(const Tensor<T>&, const BlockConfig&, const SsmParams<T>&); \
    template Tensor<T> selective_scan_parallel<T>(const Tensor<T>&, const BlockConfig&, const SsmParams<T>&, int64_t); \
    template void selective_scan_step<T>(const T*, const BlockConfig&, const SsmParams<T>&, T*, T*, const T*);

SSMLM_SCAN_INSTANTIATE(float)
SSMLM_SCAN_INSTANTIATE(double)

} // namespace ssmlm
