// Compares the serial reference kernels against the production (OpenMP/BLAS)
// paths and reports the model-level forward scaling over context length.

#include <cstdio>
#include <string>

#include "ssmlm/kernels.hpp"
#include "ssmlm/model.hpp"
#include "ssmlm/scan.hpp"
#include "ssmlm/util.hpp"

using namespace ssmlm;

namespace {

template <class F>
double time_median(F&& fn, int reps = 5) {
    fn(); // warmup
    std::vector<double> times;
    for (int r = 0; r < reps; r++) {
        Timer t;
        fn();
        times.push_back(t.seconds());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
}

void bench_matmul() {
    std::printf("\n== matmul: serial reference vs BLAS ==\n");
    std::printf("%8s %8s %8s %12s %12s %9s\n", "m", "k", "n", "ref_ms", "blas_ms", "speedup");
    Rng rng(1);
    for (auto [m, k, n] : {std::tuple<int64_t, int64_t, int64_t>{512, 128, 512},
                           {2048, 128, 512},
                           {2048, 256, 128}}) {
        Tensor<float> x({m, k}), w({n, k}), y({m, n});
        x.fill_uniform(rng, -1, 1);
        w.fill_uniform(rng, -1, 1);
        double t_ref = time_median([&] { matmul_nt_ref(x.data(), w.data(), y.data(), m, k, n); });
        double t_blas = time_median([&] { matmul_nt(x.data(), w.data(), y.data(), m, k, n); });
        std::printf("%8lld %8lld %8lld %12.3f %12.3f %8.1fx\n", (long long)m, (long long)k,
                    (long long)n, t_ref * 1e3, t_blas * 1e3, t_ref / t_blas);
    }
}

void bench_scan() {
    std::printf("\n== linear scan: sequential vs blocked parallel ==\n");
    std::printf("%8s %8s %12s %12s %9s\n", "L", "lanes", "seq_ms", "par_ms", "ratio");
    Rng rng(2);
    for (int64_t L : {1024, 4096, 16384}) {
        int64_t lanes = 256 * 8;
        Tensor<float> decay({L, lanes}), shift({L, lanes}), h({L, lanes});
        decay.fill_uniform(rng, 0, 1);
        shift.fill_uniform(rng, -1, 1);
        double t_seq = time_median(
            [&] { linear_scan_sequential(decay.data(), shift.data(), h.data(), L, lanes); }, 3);
        Tensor<float> d2({L, lanes}), s2({L, lanes});
        double t_par = time_median(
            [&] {
                d2 = decay;
                s2 = shift;
                linear_scan_parallel(d2.data(), s2.data(), L, lanes);
            },
            3);
        std::printf("%8lld %8lld %12.3f %12.3f %8.2fx\n", (long long)L, (long long)lanes,
                    t_seq * 1e3, t_par * 1e3, t_seq / t_par);
    }
}

void bench_conv() {
    std::printf("\n== causal conv1d: serial reference vs parallel ==\n");
    std::printf("%8s %8s %12s %12s %9s\n", "L", "chan", "ref_ms", "par_ms", "speedup");
    Rng rng(3);
    for (int64_t L : {2048, 8192}) {
        int64_t C = 256, K = 4;
        Tensor<float> u({L, C}), w({K, C}), b({C}), y({L, C});
        u.fill_uniform(rng, -1, 1);
        w.fill_uniform(rng, -1, 1);
        double t_ref = time_median(
            [&] { causal_conv1d_ref(u.data(), w.data(), b.data(), y.data(), L, C, K); }, 3);
        double t_par = time_median(
            [&] { causal_conv1d_fwd(u.data(), w.data(), b.data(), y.data(), L, C, K); }, 3);
        std::printf("%8lld %8lld %12.3f %12.3f %8.1fx\n", (long long)L, (long long)C, t_ref * 1e3,
                    t_par * 1e3, t_ref / t_par);
    }
}

void bench_forward() {
    std::printf("\n== model forward wall-clock vs context length ==\n");
    auto cfg = ModelConfig::make(4, 128, 258, 16384, 8, 4, 2);
    LmModel<float> m;
    m.init(cfg, 7);
    Rng rng(4);
    std::printf("%8s %12s %14s\n", "L", "median_s", "tokens/s");
    double t4k = 0, t16k = 0;
    for (int64_t L : {4096, 16384}) {
        std::vector<int32_t> toks(static_cast<size_t>(L));
        for (auto& t : toks) t = int32_t(rng.below(258));
        Tensor<float> logits({L, cfg.vocab_size});
        double t_med = time_median(
            [&] { m.forward(toks.data(), L, logits.data(), nullptr, ScanMode::parallel); }, 3);
        std::printf("%8lld %12.3f %14.0f\n", (long long)L, t_med, double(L) / t_med);
        (L == 4096 ? t4k : t16k) = t_med;
    }
    std::printf("scaling 16k/4k: %.2fx (4.0 = perfectly linear)\n", t16k / t4k);
}

} // namespace

int main(int argc, char** argv) {
    int threads = 0;
    for (int i = 1; i + 1 < argc + 1; i++) {
        if (std::string(argv[i]) == "--threads" && i + 1 < argc) threads = std::stoi(argv[i + 1]);
    }
    set_num_threads(threads);
    std::printf("threads: %d\n", max_threads());
    bench_matmul();
    bench_scan();
    bench_conv();
    bench_forward();
    return 0;
}
