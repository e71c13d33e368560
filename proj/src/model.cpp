#include "ssmlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ssmlm/kernels.hpp"
#include "ssmlm/util.hpp"

namespace ssmlm {

static constexpr double kRmsEps = 1e-5;

void ModelConfig::validate() const {
    check(num_layer >= 1, "ModelConfig: num_layer must be >= 1");
    check(vocab_size >= 2, "ModelConfig: vocab_size must be >= 2");
    check(context_len >= 1, "ModelConfig: context_len must be >= 1");
    check(block.d_model == d_model, "ModelConfig: block.d_model mismatch");
    block.validate();
}

ModelConfig ModelConfig::make(int64_t layers, int64_t dm, int64_t vocab, int64_t ctx,
                              int64_t d_state, int64_t d_conv, int64_t expand) {
    ModelConfig c;
    c.num_layer = layers;
    c.d_model = dm;
    c.vocab_size = vocab;
    c.context_len = ctx;
    c.block.d_model = dm;
    c.block.d_inner = expand * dm;
    c.block.d_state = d_state;
    c.block.d_conv = d_conv;
    c.block.dt_rank = (dm + 15) / 16; // ceil(d_model / 16)
    return c;
}

template <class T>
void LmModel<T>::init(const ModelConfig& c, uint64_t seed) {
    c.validate();
    cfg = c;
    Rng rng(seed);
    embed.init("embed", {c.vocab_size, c.d_model}, true);
    embed.w.fill_normal(rng, 0.02);
    if (c.use_pos_emb) {
        pos_emb.init("pos_emb", {c.context_len, c.d_model}, true);
        pos_emb.w.fill_normal(rng, 0.02);
    }
    layers.resize(size_t(c.num_layer));
    for (int64_t l = 0; l < c.num_layer; l++) {
        std::string prefix = "layers." + std::to_string(l);
        auto& layer = layers[size_t(l)];
        layer.norm.init(prefix + ".norm", {c.d_model}, false);
        std::fill(layer.norm.w.v.begin(), layer.norm.w.v.end(), T(1));
        layer.block.init(c.block, prefix, rng);
    }
    final_norm.init("final_norm", {c.d_model}, false);
    std::fill(final_norm.w.v.begin(), final_norm.w.v.end(), T(1));
    if (!c.tie_embeddings) {
        head.init("head", {c.vocab_size, c.d_model}, true);
        head.w.fill_normal(rng, 0.02);
    }
}

template <class T>
std::vector<Param<T>*> LmModel<T>::params() {
    std::vector<Param<T>*> out;
    out.push_back(&embed);
    if (cfg.use_pos_emb) out.push_back(&pos_emb);
    for (auto& l : layers) {
        out.push_back(&l.norm);
        for (auto* p : l.block.params()) out.push_back(p);
    }
    out.push_back(&final_norm);
    if (!cfg.tie_embeddings) out.push_back(&head);
    return out;
}

template <class T>
int64_t LmModel<T>::num_params() {
    int64_t n = 0;
    for (auto* p : params()) n += p->w.size();
    return n;
}

template <class T>
void LmModel<T>::zero_grads() {
    for (auto* p : params()) p->g.zero();
}

static void check_tokens(const int32_t* tokens, int64_t L, const ModelConfig& cfg) {
    check(L >= 1, "forward: empty token sequence");
    check(L <= cfg.context_len, "forward: L=", L, " exceeds context_len=", cfg.context_len);
    for (int64_t t = 0; t < L; t++) {
        check(tokens[t] >= 0 && tokens[t] < cfg.vocab_size,
              "forward: token id ", tokens[t], " out of range at position ", t);
    }
}

template <class T>
void LmModel<T>::forward(const int32_t* tokens, int64_t L, T* logits,
                         LmCache<T>* cache, ScanMode mode, const uint8_t* seg_start) const {
    check_tokens(tokens, L, cfg);
    int64_t d = cfg.d_model;
    Tensor<T> x({L, d});
    embedding_fwd(tokens, embed.w.data(), x.data(), L, d);
    if (cfg.use_pos_emb) {
        for (int64_t t = 0; t < L; t++) {
            const T* row = pos_emb.w.data() + std::min(t, cfg.context_len - 1) * d;
            T* xt = x.data() + t * d;
            for (int64_t i = 0; i < d; i++) xt[i] += row[i];
        }
    }
    if (cache) cache->layers.resize(layers.size());

    Tensor<T> norm_local({L, d}), rstd_local({L}), block_out({L, d});
    for (size_t l = 0; l < layers.size(); l++) {
        auto& layer = const_cast<LmModel<T>*>(this)->layers[l];
        Tensor<T>* norm_out = &norm_local;
        Tensor<T>* rstd = &rstd_local;
        if (cache) {
            auto& lc = cache->layers[l];
            lc.x_in = x;
            lc.norm_out = Tensor<T>({L, d});
            lc.rstd = Tensor<T>({L});
            norm_out = &lc.norm_out;
            rstd = &lc.rstd;
        }
        rmsnorm_fwd(x.data(), layer.norm.w.data(), norm_out->data(), rstd->data(), L, d, T(kRmsEps));
        block_forward<T>(norm_out->data(), L, layer.block, block_out.data(), mode,
                         cache ? &cache->layers[l].block : nullptr, seg_start, nullptr);
        add_inplace(x.data(), block_out.data(), L * d);
    }

    Tensor<T>* fin = &norm_local;
    Tensor<T>* frstd = &rstd_local;
    if (cache) {
        cache->x_final = x;
        cache->final_out = Tensor<T>({L, d});
        cache->final_rstd = Tensor<T>({L});
        fin = &cache->final_out;
        frstd = &cache->final_rstd;
    }
    rmsnorm_fwd(x.data(), final_norm.w.data(), fin->data(), frstd->data(), L, d, T(kRmsEps));
    const T* lm_head = cfg.tie_embeddings ? embed.w.data() : head.w.data();
    matmul_nt(fin->data(), lm_head, logits, L, d, cfg.vocab_size);
}

template <class T>
void LmModel<T>::backward(const int32_t* tokens, int64_t L, const T* dlogits,
                          const LmCache<T>& cache, const uint8_t* seg_start) {
    int64_t d = cfg.d_model;
    const T* lm_head = cfg.tie_embeddings ? embed.w.data() : head.w.data();
    T* lm_head_g = cfg.tie_embeddings ? embed.g.data() : head.g.data();

    matmul_tn(dlogits, cache.final_out.data(), lm_head_g, L, cfg.vocab_size, d, /*accum=*/true);
    Tensor<T> d_fin({L, d});
    matmul_nn(dlogits, lm_head, d_fin.data(), L, cfg.vocab_size, d);

    Tensor<T> dx({L, d});
    rmsnorm_bwd(cache.x_final.data(), final_norm.w.data(), cache.final_rstd.data(),
                d_fin.data(), dx.data(), final_norm.g.data(), L, d);

    Tensor<T> d_norm_out({L, d});
    for (int64_t l = int64_t(layers.size()) - 1; l >= 0; l--) {
        auto& layer = layers[size_t(l)];
        const auto& lc = cache.layers[size_t(l)];
        block_backward(lc.norm_out.data(), dx.data(), L, layer.block, lc.block,
                       d_norm_out.data(), seg_start);
        // residual: dx flows through unchanged plus the norm path
        rmsnorm_bwd(lc.x_in.data(), layer.norm.w.data(), lc.rstd.data(),
                    d_norm_out.data(), dx.data(), layer.norm.g.data(), L, d);
    }
    if (cfg.use_pos_emb) {
        for (int64_t t = 0; t < L; t++) {
            T* row = pos_emb.g.data() + std::min(t, cfg.context_len - 1) * d;
            const T* dxt = dx.data() + t * d;
            for (int64_t i = 0; i < d; i++) row[i] += dxt[i];
        }
    }
    embedding_bwd(tokens, dx.data(), embed.g.data(), L, d);
}

template <class T>
Tensor<T> LmModel<T>::next_token_logits(const std::vector<int32_t>& tokens, ScanMode mode) const {
    check(!tokens.empty(), "next_token_logits: empty token sequence");
    int64_t L = int64_t(tokens.size());
    Tensor<T> logits({L, cfg.vocab_size});
    forward(tokens.data(), L, logits.data(), nullptr, mode);
    Tensor<T> out({cfg.vocab_size});
    std::memcpy(out.data(), logits.data() + (L - 1) * cfg.vocab_size,
                size_t(cfg.vocab_size) * sizeof(T));
    return out;
}

template <class T>
LmState<T> LmModel<T>::make_state() const {
    LmState<T> st;
    for (size_t l = 0; l < layers.size(); l++) st.blocks.emplace_back(cfg.block);
    return st;
}

template <class T>
void LmModel<T>::step(int32_t token, LmState<T>& st, T* logits_row) const {
    check(token >= 0 && token < cfg.vocab_size, "step: token id out of range");
    int64_t d = cfg.d_model;
    std::vector<T> x(static_cast<size_t>(d));
    std::vector<T> normed(static_cast<size_t>(d));
    std::vector<T> block_out(static_cast<size_t>(d));
    std::memcpy(x.data(), embed.w.data() + int64_t(token) * d, size_t(d) * sizeof(T));
    if (cfg.use_pos_emb) {
        const T* row = pos_emb.w.data() + std::min(st.position, cfg.context_len - 1) * d;
        for (int64_t i = 0; i < d; i++) x[size_t(i)] += row[i];
    }
    T rstd;
    for (size_t l = 0; l < layers.size(); l++) {
        auto& layer = const_cast<LmModel<T>*>(this)->layers[l];
        rmsnorm_fwd(x.data(), layer.norm.w.data(), normed.data(), &rstd, 1, d, T(kRmsEps));
        block_step(normed.data(), layer.block, st.blocks[l], block_out.data());
        for (int64_t i = 0; i < d; i++) x[size_t(i)] += block_out[size_t(i)];
    }
    rmsnorm_fwd(x.data(), final_norm.w.data(), normed.data(), &rstd, 1, d, T(kRmsEps));
    const T* lm_head = cfg.tie_embeddings ? embed.w.data() : head.w.data();
    if (logits_row) matmul_nt(normed.data(), lm_head, logits_row, 1, d, cfg.vocab_size);
    st.position++;
}

template <class T>
void LmModel<T>::prefill(const int32_t* tokens, int64_t L, LmState<T>& st) const {
    constexpr int64_t chunk = 512;
    int64_t d = cfg.d_model;
    for (int64_t t0 = 0; t0 < L; t0 += chunk) {
        int64_t rows = std::min(chunk, L - t0);
        Tensor<T> x({rows, d}), block_out({rows, d}), norm_out({rows, d}), rstd({rows});
        embedding_fwd(tokens + t0, embed.w.data(), x.data(), rows, d);
        if (cfg.use_pos_emb) {
            for (int64_t t = 0; t < rows; t++) {
                const T* row = pos_emb.w.data() + std::min(st.position + t, cfg.context_len - 1) * d;
                T* xt = x.data() + t * d;
                for (int64_t i = 0; i < d; i++) xt[i] += row[i];
            }
        }
        for (size_t l = 0; l < layers.size(); l++) {
            auto& layer = const_cast<LmModel<T>*>(this)->layers[l];
            rmsnorm_fwd(x.data(), layer.norm.w.data(), norm_out.data(), rstd.data(), rows, d, T(kRmsEps));
            block_forward<T>(norm_out.data(), rows, layer.block, block_out.data(), ScanMode::parallel,
                             nullptr, nullptr, &st.blocks[l]);
            add_inplace(x.data(), block_out.data(), rows * d);
        }
        st.position += rows;
    }
}

template <class T>
double cross_entropy_loss(const Tensor<T>& logits, const std::vector<int32_t>& targets) {
    int64_t rows = logits.dim(0), vocab = logits.dim(1);
    check(int64_t(targets.size()) == rows, "cross_entropy_loss: target length mismatch");
    int64_t scored = 0;
    double total = cross_entropy_fwd(logits.data(), targets.data(), rows, vocab, &scored);
    return total / double(scored);
}

#define SSMLM_MODEL_INSTANTIATE(T)                                                                \
    template struct LmModel<T>;                                                                   \
    template double cross_entropy_loss<T>(const Tensor<T>&, const std::vector<int32_t>&);

SSMLM_MODEL_INSTANTIATE(float)
SSMLM_MODEL_INSTANTIATE(double)

} // namespace ssmlm
