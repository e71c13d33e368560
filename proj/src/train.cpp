#include "ssmlm/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include "ssmlm/kernels.hpp"
#include "ssmlm/util.hpp"

namespace ssmlm {

int64_t TrainConfig::effective_warmup() const {
    if (warmup_steps > 0) return warmup_steps;
    return std::max<int64_t>(1, total_steps / 100);
}

void TrainConfig::validate() const {
    check(total_steps >= 1, "TrainConfig: total_steps must be >= 1");
    check(warmup_steps == 0 || warmup_steps < total_steps,
          "TrainConfig: warmup_steps must be < total_steps");
    check(min_lr <= peak_lr, "TrainConfig: min_lr must be <= peak_lr");
    check(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    check(grad_clip_norm > 0, "TrainConfig: grad_clip_norm must be > 0");
}

double lr_at(int64_t step, const TrainConfig& cfg) {
    check(step >= 0, "lr_at: negative step");
    int64_t warmup = cfg.effective_warmup();
    if (step <= warmup) return cfg.peak_lr * double(step) / double(warmup);
    if (step >= cfg.total_steps) return cfg.min_lr; // clamp past the schedule end
    double progress = double(step - warmup) / double(cfg.total_steps - warmup);
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * progress));
}

template <class T>
double clip_gradients(std::vector<Param<T>*>& params, double max_norm) {
    check(max_norm > 0, "clip_gradients: max_norm must be > 0");
    double total = 0.0;
    for (auto* p : params) total += sum_squares(p->g.data(), p->g.size());
    double norm = std::sqrt(total);
    if (norm > max_norm) {
        T scale = T(max_norm / norm);
        for (auto* p : params) scale_inplace(p->g.data(), scale, p->g.size());
    }
    return norm;
}

template <class T>
void AdamState<T>::init_for(std::vector<Param<T>*>& params) {
    m.clear();
    v.clear();
    for (auto* p : params) {
        m.emplace_back(p->w.shape);
        v.emplace_back(p->w.shape);
    }
    t = 0;
}

template <class T>
void adam_step(std::vector<Param<T>*>& params, AdamState<T>& state, const TrainConfig& cfg,
               double lr) {
    check(state.m.size() == params.size(), "adam_step: state not initialized for these params");
    state.t++;
    double bc1 = 1.0 - std::pow(cfg.beta1, double(state.t));
    double bc2 = 1.0 - std::pow(cfg.beta2, double(state.t));
    for (size_t pi = 0; pi < params.size(); pi++) {
        Param<T>* p = params[pi];
        T* w = p->w.data();
        const T* g = p->g.data();
        T* m = state.m[pi].data();
        T* v = state.v[pi].data();
        int64_t n = p->w.size();
        T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
        T decay_mul = p->wd ? T(1.0 - lr * cfg.weight_decay) : T(1);
        #pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; i++) {
            w[i] *= decay_mul;
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            double mhat = double(m[i]) / bc1;
            double vhat = double(v[i]) / bc2;
            w[i] -= T(lr * mhat / (std::sqrt(vhat) + cfg.epsilon));
        }
    }
}

// ---------------------------------------------------------------------------
// Packed corpus
// ---------------------------------------------------------------------------
std::vector<uint32_t> PackedCorpus::doc(int64_t i) const {
    check(i >= 0 && i < num_docs(), "PackedCorpus::doc index out of range");
    int64_t lo = doc_offsets[size_t(i)];
    int64_t hi = i + 1 < num_docs() ? doc_offsets[size_t(i + 1)] : int64_t(tokens.size());
    return std::vector<uint32_t>(tokens.begin() + lo, tokens.begin() + hi);
}

static constexpr char kTokMagic[] = "SSMLMTOK1\n";

void PackedCorpus::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "PackedCorpus::save: cannot open ", path);
    f.write(kTokMagic, sizeof(kTokMagic) - 1);
    uint64_t nd = doc_offsets.size(), nt = tokens.size();
    f.write(reinterpret_cast<const char*>(&nd), 8);
    f.write(reinterpret_cast<const char*>(&nt), 8);
    for (size_t i = 0; i < doc_offsets.size(); i++) {
        uint64_t off = uint64_t(doc_offsets[i]);
        uint32_t idlen = uint32_t(doc_ids[i].size());
        f.write(reinterpret_cast<const char*>(&off), 8);
        f.write(reinterpret_cast<const char*>(&idlen), 4);
        f.write(doc_ids[i].data(), idlen);
    }
    f.write(reinterpret_cast<const char*>(tokens.data()), std::streamsize(tokens.size() * 4));
    check(f.good(), "PackedCorpus::save: write failed");
}

PackedCorpus PackedCorpus::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "PackedCorpus::load: cannot open ", path);
    char magic[sizeof(kTokMagic) - 1];
    f.read(magic, sizeof(magic));
    check(f.good() && std::memcmp(magic, kTokMagic, sizeof(magic)) == 0,
          "PackedCorpus::load: ", path, " is not a packed token file");
    uint64_t nd = 0, nt = 0;
    f.read(reinterpret_cast<char*>(&nd), 8);
    f.read(reinterpret_cast<char*>(&nt), 8);
    PackedCorpus c;
    c.doc_offsets.resize(size_t(nd));
    c.doc_ids.resize(size_t(nd));
    for (size_t i = 0; i < nd; i++) {
        uint64_t off = 0;
        uint32_t idlen = 0;
        f.read(reinterpret_cast<char*>(&off), 8);
        f.read(reinterpret_cast<char*>(&idlen), 4);
        std::string id(idlen, '\0');
        f.read(id.data(), idlen);
        c.doc_offsets[i] = int64_t(off);
        c.doc_ids[i] = std::move(id);
    }
    c.tokens.resize(size_t(nt));
    f.read(reinterpret_cast<char*>(c.tokens.data()), std::streamsize(nt * 4));
    check(f.good(), "PackedCorpus::load: truncated file ", path);
    return c;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------
template <class T>
double train_step_chunks(LmModel<T>& model, const std::vector<std::vector<int32_t>>& chunks,
                         const std::vector<std::vector<uint8_t>>& segs,
                         const std::vector<std::vector<int32_t>>& target_overrides,
                         AdamState<T>& state, const TrainConfig& cfg, int64_t step,
                         double* grad_norm_out) {
    model.zero_grads();
    int64_t V = model.cfg.vocab_size;

    // denominator: total scored positions across the batch
    int64_t denom = 0;
    for (size_t b = 0; b < chunks.size(); b++) {
        int64_t L = int64_t(chunks[b].size()) - 1;
        check(L >= 1, "train_step: chunk too short");
        if (!target_overrides.empty()) {
            for (int32_t t : target_overrides[b]) denom += t >= 0 ? 1 : 0;
        } else {
            denom += L;
        }
    }
    check(denom > 0, "train_step: nothing to score");

    double loss_sum = 0.0;
    for (size_t b = 0; b < chunks.size(); b++) {
        const auto& chunk = chunks[b];
        int64_t L = int64_t(chunk.size()) - 1;
        std::vector<int32_t> targets;
        if (!target_overrides.empty()) {
            targets = target_overrides[b];
            check(int64_t(targets.size()) == L, "train_step: target override length mismatch");
        } else {
            targets.assign(chunk.begin() + 1, chunk.end());
        }
        const uint8_t* seg = (b < segs.size() && !segs[b].empty()) ? segs[b].data() : nullptr;

        bool any = false;
        for (int32_t t : targets) any |= t >= 0;
        if (!any) continue;

        LmCache<T> cache;
        Tensor<T> logits({L, V});
        model.forward(chunk.data(), L, logits.data(), &cache, ScanMode::parallel, seg);
        loss_sum += cross_entropy_fwd(logits.data(), targets.data(), L, V, nullptr);
        Tensor<T> dlogits({L, V});
        cross_entropy_bwd(logits.data(), targets.data(), dlogits.data(), L, V, double(denom));
        model.backward(chunk.data(), L, dlogits.data(), cache, seg);
    }
    double loss = loss_sum / double(denom);
    check(std::isfinite(loss), "training aborted: non-finite loss at step ", step);

    auto params = model.params();
    double norm = clip_gradients(params, cfg.grad_clip_norm);
    check(std::isfinite(norm), "training aborted: non-finite gradient norm at step ", step);
    adam_step(params, state, cfg, lr_at(step, cfg));
    if (grad_norm_out) *grad_norm_out = norm;
    return loss;
}

template <class T>
TrainResult train_loop(LmModel<T>& model, const PackedCorpus& corpus, const TrainConfig& cfg,
                       const std::vector<std::string>& heldout_ids,
                       const std::string& checkpoint_dir,
                       const std::function<void(const StepRecord&)>& on_step) {
    cfg.validate();
    int64_t S = cfg.seq_len > 0 ? cfg.seq_len : model.cfg.context_len;
    check(S <= model.cfg.context_len, "train_loop: seq_len exceeds model context_len");
    int64_t N = int64_t(corpus.tokens.size());
    int64_t nchunks = (N - 1) / S;
    check(nchunks >= 1, "train_loop: corpus too small for one ", S, "-token chunk");

    std::unordered_set<std::string> heldout(heldout_ids.begin(), heldout_ids.end());
    if (!heldout.empty()) {
        // id-set intersection with the training stream must be empty
        for (const auto& id : corpus.doc_ids) {
            check(!heldout.count(id), "train_loop: held-out id ", id, " present in training corpus");
        }
    }

    // chunk -> segment-start mask from document offsets
    auto seg_for_chunk = [&](int64_t ci) {
        std::vector<uint8_t> seg(size_t(S), 0);
        int64_t lo = ci * S, hi = lo + S;
        auto it = std::lower_bound(corpus.doc_offsets.begin(), corpus.doc_offsets.end(), lo);
        for (; it != corpus.doc_offsets.end() && *it < hi; ++it) seg[size_t(*it - lo)] = 1;
        return seg;
    };

    AdamState<T> state;
    auto params = model.params();
    state.init_for(params);

    Rng rng(cfg.seed);
    std::vector<int64_t> order(static_cast<size_t>(nchunks));
    for (int64_t i = 0; i < nchunks; i++) order[size_t(i)] = i;
    auto reshuffle = [&]() {
        for (int64_t i = nchunks - 1; i > 0; i--) {
            std::swap(order[size_t(i)], order[size_t(rng.below(uint64_t(i + 1)))]);
        }
    };
    reshuffle();

    TrainResult result;
    int64_t cursor = 0;
    for (int64_t step = 1; step <= cfg.total_steps; step++) {
        std::vector<std::vector<int32_t>> chunks;
        std::vector<std::vector<uint8_t>> segs;
        for (int64_t b = 0; b < cfg.batch_size; b++) {
            if (cursor >= nchunks) { // next epoch
                reshuffle();
                cursor = 0;
            }
            int64_t ci = order[size_t(cursor++)];
            std::vector<int32_t> chunk(static_cast<size_t>(S + 1));
            for (int64_t i = 0; i <= S; i++) {
                chunk[size_t(i)] = int32_t(corpus.tokens[size_t(ci * S + i)]);
            }
            chunks.push_back(std::move(chunk));
            segs.push_back(cfg.reset_at_doc_boundary ? seg_for_chunk(ci) : std::vector<uint8_t>{});
        }
        double norm = 0;
        double loss = train_step_chunks(model, chunks, segs, {}, state, cfg, step, &norm);
        if (step % std::max<int64_t>(1, cfg.log_every) == 0 || step == cfg.total_steps) {
            StepRecord rec{step, loss, lr_at(step, cfg), norm};
            result.curve.push_back(rec);
            if (on_step) on_step(rec);
        }
        result.final_loss = loss;
        if (!checkpoint_dir.empty() && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            save_checkpoint(model, checkpoint_dir + "/ckpt_step" + std::to_string(step) + ".bin");
        }
    }
    if (!checkpoint_dir.empty()) save_checkpoint(model, checkpoint_dir + "/ckpt_final.bin");
    return result;
}

void write_loss_curve_csv(const std::string& path, const std::vector<StepRecord>& curve) {
    std::ofstream f(path);
    check(f.good(), "write_loss_curve_csv: cannot open ", path);
    f << "step,loss,lr,grad_norm\n";
    char buf[160];
    for (const auto& r : curve) {
        std::snprintf(buf, sizeof(buf), "%lld,%.10g,%.10g,%.10g\n", (long long)r.step, r.loss,
                      r.lr, r.grad_norm);
        f << buf;
    }
}

#define SSMLM_TRAIN_INSTANTIATE(T)                                                                 \
    template double clip_gradients<T>(std::vector<Param<T>*>&, double);                            \
    template struct AdamState<T>;                                                                  \
    template void adam_step<T>(std::vector<Param<T>*>&, AdamState<T>&, const TrainConfig&, double); \
    template double train_step_chunks<T>(LmModel<T>&, const std::vector<std::vector<int32_t>>&,    \
                                         const std::vector<std::vector<uint8_t>>&,                 \
                                         const std::vector<std::vector<int32_t>>&, AdamState<T>&,  \
                                         const TrainConfig&, int64_t, double*);                    \
    template TrainResult train_loop<T>(LmModel<T>&, const PackedCorpus&, const TrainConfig&,       \
                                       const std::vector<std::string>&, const std::string&,        \
                                       const std::function<void(const StepRecord&)>&);

SSMLM_TRAIN_INSTANTIATE(float)
SSMLM_TRAIN_INSTANTIATE(double)

} // namespace ssmlm
