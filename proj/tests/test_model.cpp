#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "ssmlm/kernels.hpp"
#include "ssmlm/model.hpp"
#include "testutil.hpp"

using namespace ssmlm;
using namespace ssmlm::testing;

static ModelConfig tiny_config(int64_t layers = 2, int64_t dm = 16, int64_t vocab = 11,
                               int64_t ctx = 64) {
    return ModelConfig::make(layers, dm, vocab, ctx, /*d_state=*/4, /*d_conv=*/3, /*expand=*/2);
}

// Straight-line forward written independently of LmModel: plain loops, no
// BLAS, no caches. Only used as the test oracle.
static Tensor<double> reference_forward(LmModel<double>& m, const std::vector<int32_t>& toks) {
    const auto& cfg = m.cfg;
    int64_t L = int64_t(toks.size()), d = cfg.d_model;
    std::vector<double> x(size_t(L * d));
    for (int64_t t = 0; t < L; t++) {
        for (int64_t i = 0; i < d; i++) x[size_t(t * d + i)] = m.embed.w[toks[size_t(t)] * d + i];
    }
    auto rms = [&](std::vector<double>& v, const Tensor<double>& gain) {
        std::vector<double> out(v.size());
        for (int64_t t = 0; t < L; t++) {
            double ss = 0;
            for (int64_t i = 0; i < d; i++) ss += v[size_t(t * d + i)] * v[size_t(t * d + i)];
            double r = 1.0 / std::sqrt(ss / double(d) + 1e-5);
            for (int64_t i = 0; i < d; i++) out[size_t(t * d + i)] = v[size_t(t * d + i)] * r * gain[i];
        }
        return out;
    };
    for (auto& layer : m.layers) {
        auto normed = rms(x, layer.norm.w);
        const auto& bc = cfg.block;
        int64_t D = bc.d_inner;
        // in_proj
        std::vector<double> u(size_t(L * D)), gate(size_t(L * D));
        for (int64_t t = 0; t < L; t++) {
            for (int64_t o = 0; o < 2 * D; o++) {
                double acc = 0;
                for (int64_t i = 0; i < d; i++) {
                    acc += normed[size_t(t * d + i)] * layer.block.in_proj.w[o * d + i];
                }
                (o < D ? u[size_t(t * D + o)] : gate[size_t(t * D + o - D)]) = acc;
            }
        }
        // conv + silu
        std::vector<double> act(size_t(L * D));
        for (int64_t t = 0; t < L; t++) {
            for (int64_t c = 0; c < D; c++) {
                double acc = layer.block.conv_b.w[c];
                for (int64_t j = 0; j < bc.d_conv; j++) {
                    int64_t src = t - (bc.d_conv - 1) + j;
                    if (src >= 0) acc += layer.block.conv_w.w[j * D + c] * u[size_t(src * D + c)];
                }
                act[size_t(t * D + c)] = acc / (1.0 + std::exp(-acc));
            }
        }
        // scan via the independent loop oracle
        Tensor<double> uin({L, D});
        for (int64_t i = 0; i < L * D; i++) uin[i] = act[size_t(i)];
        auto y = selective_scan_loop_oracle(uin, bc, layer.block.ssm());
        // gate + out_proj + residual
        for (int64_t t = 0; t < L; t++) {
            for (int64_t i = 0; i < d; i++) {
                double acc = 0;
                for (int64_t c = 0; c < D; c++) {
                    double gv = gate[size_t(t * D + c)];
                    double gated = y[t * D + c] * gv / (1.0 + std::exp(-gv));
                    acc += gated * layer.block.out_proj.w[i * D + c];
                }
                x[size_t(t * d + i)] += acc;
            }
        }
    }
    auto fin = rms(x, m.final_norm.w);
    Tensor<double> logits({L, cfg.vocab_size});
    const Tensor<double>& headw = cfg.tie_embeddings ? m.embed.w : m.head.w;
    for (int64_t t = 0; t < L; t++) {
        for (int64_t v = 0; v < cfg.vocab_size; v++) {
            double acc = 0;
            for (int64_t i = 0; i < d; i++) acc += fin[size_t(t * d + i)] * headw[v * d + i];
            logits[t * cfg.vocab_size + v] = acc;
        }
    }
    return logits;
}

TEST_CASE("model forward matches straight-line reference") {
    LmModel<double> m;
    m.init(tiny_config(), 2024);
    Rng rng(1);
    std::vector<int32_t> toks;
    for (int i = 0; i < 12; i++) toks.push_back(int32_t(rng.below(11)));
    Tensor<double> logits({int64_t(toks.size()), m.cfg.vocab_size});
    m.forward(toks.data(), int64_t(toks.size()), logits.data());
    auto want = reference_forward(m, toks);
    CHECK(max_rel_diff(logits.data(), want.data(), logits.size(), 1e-6) < 1e-8);
}

TEST_CASE("model causality and shape edge cases") {
    LmModel<double> m;
    m.init(tiny_config(3), 7);
    Rng rng(2);
    std::vector<int32_t> toks;
    for (int i = 0; i < 10; i++) toks.push_back(int32_t(rng.below(11)));
    int64_t L = int64_t(toks.size()), V = m.cfg.vocab_size;
    Tensor<double> l1({L, V}), l2({L, V});
    m.forward(toks.data(), L, l1.data());
    auto toks2 = toks;
    toks2.back() = (toks2.back() + 1) % 11;
    m.forward(toks2.data(), L, l2.data());
    for (int64_t i = 0; i < (L - 1) * V; i++) CHECK(l1[i] == l2[i]);

    // L=1 finite
    Tensor<double> one({1, V});
    m.forward(toks.data(), 1, one.data());
    int64_t bad = -1;
    CHECK(!find_nonfinite(one.data(), V, &bad));

    // errors
    std::vector<int32_t> big(size_t(m.cfg.context_len + 1), 0);
    Tensor<double> lb({int64_t(big.size()), V});
    CHECK_THROWS_AS(m.forward(big.data(), int64_t(big.size()), lb.data()), Error);
    std::vector<int32_t> oor{3, 99};
    CHECK_THROWS_AS(m.forward(oor.data(), 2, lb.data()), Error);
    CHECK_THROWS_AS((void)m.next_token_logits({}), Error);
}

TEST_CASE("next_token_logits equals last forward row; recurrent agrees") {
    LmModel<double> m;
    m.init(tiny_config(), 99);
    Rng rng(3);
    std::vector<int32_t> toks;
    for (int i = 0; i < 64; i++) toks.push_back(int32_t(rng.below(11)));
    int64_t L = int64_t(toks.size()), V = m.cfg.vocab_size;
    Tensor<double> logits({L, V});
    m.forward(toks.data(), L, logits.data());
    auto last = m.next_token_logits(toks);
    for (int64_t v = 0; v < V; v++) CHECK(last[v] == logits[(L - 1) * V + v]);

    // stepwise recurrent evaluation over all 64 tokens
    auto st = m.make_state();
    Tensor<double> row({V});
    for (int64_t t = 0; t < L; t++) {
        m.step(toks[size_t(t)], st, row.data());
        for (int64_t v = 0; v < V; v++) {
            CHECK(std::abs(row[v] - logits[t * V + v]) < 1e-5);
        }
    }

    // prefill then step matches too
    auto st2 = m.make_state();
    m.prefill(toks.data(), L - 1, st2);
    m.step(toks.back(), st2, row.data());
    for (int64_t v = 0; v < V; v++) CHECK(std::abs(row[v] - logits[(L - 1) * V + v]) < 1e-5);
}

TEST_CASE("model gradients match central differences (2-layer d=8)") {
    auto cfg = ModelConfig::make(2, 8, 9, 32, 3, 3, 2);
    LmModel<double> m;
    m.init(cfg, 5);
    Rng rng(4);
    std::vector<int32_t> toks, tgts;
    for (int i = 0; i < 6; i++) toks.push_back(int32_t(rng.below(9)));
    for (int i = 0; i < 6; i++) tgts.push_back(int32_t(rng.below(9)));
    int64_t L = 6, V = cfg.vocab_size;
    std::vector<int32_t> targets(tgts.begin(), tgts.end());

    auto loss_of = [&]() {
        Tensor<double> logits({L, V});
        m.forward(toks.data(), L, logits.data(), nullptr, ScanMode::sequential);
        int64_t scored = 0;
        double s = cross_entropy_fwd(logits.data(), targets.data(), L, V, &scored);
        return s / double(scored);
    };

    LmCache<double> cache;
    Tensor<double> logits({L, V});
    m.forward(toks.data(), L, logits.data(), &cache, ScanMode::sequential);
    int64_t scored = 0;
    cross_entropy_fwd(logits.data(), targets.data(), L, V, &scored);
    Tensor<double> dlogits({L, V});
    cross_entropy_bwd(logits.data(), targets.data(), dlogits.data(), L, V, double(scored));
    m.zero_grads();
    m.backward(toks.data(), L, dlogits.data(), cache);

    const double h = 1e-4;
    double worst = 0;
    for (auto* p : m.params()) {
        for (int64_t i = 0; i < p->w.size(); i += std::max<int64_t>(1, p->w.size() / 17)) {
            double keep = p->w[i];
            p->w[i] = keep + h;
            double up = loss_of();
            p->w[i] = keep - h;
            double dn = loss_of();
            p->w[i] = keep;
            double num = (up - dn) / (2 * h);
            double err = std::abs(num - p->g[i]) / std::max(1.0, std::abs(num));
            worst = std::max(worst, err);
            CHECK_MESSAGE(err < 1e-4, p->name, "[", i, "]: analytic=", p->g[i], " numeric=", num);
        }
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("untied zero head gives vocab-size perplexity") {
    auto cfg = tiny_config();
    cfg.tie_embeddings = false;
    LmModel<double> m;
    m.init(cfg, 6);
    m.head.w.zero();
    Rng rng(5);
    std::vector<int32_t> toks;
    for (int i = 0; i < 40; i++) toks.push_back(int32_t(rng.below(11)));
    int64_t L = int64_t(toks.size()), V = cfg.vocab_size;
    Tensor<double> logits({L, V});
    m.forward(toks.data(), L, logits.data());
    std::vector<int32_t> targets(toks.begin() + 1, toks.end());
    targets.push_back(0);
    int64_t scored = 0;
    double loss = cross_entropy_fwd(logits.data(), targets.data(), L, V, &scored) / double(scored);
    CHECK(std::exp(loss) == doctest::Approx(double(V)).epsilon(0.01));
}

TEST_CASE("checkpoint round trip is bitwise") {
    LmModel<float> m;
    m.init(tiny_config(), 31337);
    auto path = std::filesystem::temp_directory_path() / "ssmlm_test_ckpt.bin";
    save_checkpoint(m, path.string());
    CHECK(checkpoint_dtype(path.string()) == "f32");
    LmModel<float> m2;
    load_checkpoint(m2, path.string());
    CHECK(m2.cfg.d_model == m.cfg.d_model);
    auto pa = m.params();
    auto pb = m2.params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); i++) {
        REQUIRE(pa[i]->w.size() == pb[i]->w.size());
        for (int64_t j = 0; j < pa[i]->w.size(); j++) CHECK(pa[i]->w[j] == pb[i]->w[j]);
    }
    LmModel<double> wrong;
    CHECK_THROWS_AS(load_checkpoint(wrong, path.string()), Error);
    std::filesystem::remove(path);
}

TEST_CASE("pos-emb variant adds trained-position parameters") {
    auto cfg = tiny_config();
    cfg.use_pos_emb = true;
    LmModel<double> m;
    m.init(cfg, 1);
    bool found = false;
    for (auto* p : m.params()) found |= p->name == "pos_emb";
    CHECK(found);
    // stock model has none
    cfg.use_pos_emb = false;
    LmModel<double> m2;
    m2.init(cfg, 1);
    for (auto* p : m2.params()) CHECK(p->name != "pos_emb");
}
