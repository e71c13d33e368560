#include "ssmlm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "ssmlm/kernels.hpp"
#include "ssmlm/util.hpp"

namespace ssmlm {

template <class T>
PplPoint perplexity_at(const LmModel<T>& model, const PackedCorpus& corpus, int64_t ctx_len,
                       const PplOptions& opts) {
    check(corpus.num_docs() > 0, "perplexity_at: empty corpus");
    check(ctx_len >= 2, "perplexity_at: ctx_len must be >= 2");
    check(ctx_len <= model.cfg.context_len, "perplexity_at: ctx_len ", ctx_len,
          " exceeds model context_len ", model.cfg.context_len);
    int64_t V = model.cfg.vocab_size;

    double total_nll = 0;
    int64_t total_pred = 0;
    std::vector<uint8_t> seg;
    int64_t ndocs = opts.max_docs > 0 ? std::min(opts.max_docs, corpus.num_docs())
                                      : corpus.num_docs();
    for (int64_t di = 0; di < ndocs; di++) {
        auto doc = corpus.doc(di);
        int64_t n = int64_t(doc.size());
        for (int64_t w0 = 0; w0 < n; w0 += ctx_len) {
            int64_t wlen = std::min(ctx_len, n - w0);
            if (wlen < 2) continue; // nothing to predict in a 1-token tail
            std::vector<int32_t> toks(static_cast<size_t>(wlen));
            for (int64_t i = 0; i < wlen; i++) toks[size_t(i)] = int32_t(doc[size_t(w0 + i)]);

            const uint8_t* segp = nullptr;
            if (opts.reset_every > 0) {
                seg.assign(size_t(wlen), 0);
                for (int64_t t = 0; t < wlen; t += opts.reset_every) seg[size_t(t)] = 1;
                segp = seg.data();
            }
            Tensor<T> logits({wlen, V});
            model.forward(toks.data(), wlen, logits.data(), nullptr, ScanMode::parallel, segp);
            int64_t first = 0;
            if (opts.tail_span > 0) first = std::max<int64_t>(0, wlen - 1 - opts.tail_span);
            std::vector<double> nll(size_t(wlen - 1 - first), 0.0);
            #pragma omp parallel for schedule(static)
            for (int64_t t = first; t < wlen - 1; t++) {
                nll[size_t(t - first)] =
                    -log_softmax_at(logits.data() + t * V, V, toks[size_t(t + 1)]);
            }
            for (double v : nll) total_nll += v;
            total_pred += wlen - 1 - first;
        }
    }
    check(total_pred > 0, "perplexity_at: no scorable positions");
    PplPoint p;
    p.ctx_len = ctx_len;
    p.tokens_scored = total_pred;
    p.perplexity = std::exp(total_nll / double(total_pred));
    return p;
}

void write_ppl_csv(const std::string& path, const std::vector<PplPoint>& points) {
    std::ofstream f(path);
    check(f.good(), "write_ppl_csv: cannot open ", path);
    f << "ctx_len,perplexity,tokens_scored\n";
    char buf[96];
    for (const auto& p : points) {
        std::snprintf(buf, sizeof(buf), "%lld,%.10g,%lld\n", (long long)p.ctx_len, p.perplexity,
                      (long long)p.tokens_scored);
        f << buf;
    }
}

void write_ppl_svg(const std::string& path, const std::vector<PplPoint>& points) {
    check(!points.empty(), "write_ppl_svg: no points");
    const int W = 640, H = 420, ML = 70, MR = 20, MT = 20, MB = 50;
    double xmin = std::log2(double(points.front().ctx_len)), xmax = xmin;
    double ymin = points.front().perplexity, ymax = ymin;
    for (const auto& p : points) {
        xmin = std::min(xmin, std::log2(double(p.ctx_len)));
        xmax = std::max(xmax, std::log2(double(p.ctx_len)));
        ymin = std::min(ymin, p.perplexity);
        ymax = std::max(ymax, p.perplexity);
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    ymin *= 0.95;
    ymax *= 1.05;
    auto px = [&](double lx) { return ML + (lx - xmin) / (xmax - xmin) * (W - ML - MR); };
    auto py = [&](double y) { return H - MB - (y - ymin) / (ymax - ymin) * (H - MT - MB); };

    std::ofstream f(path);
    check(f.good(), "write_ppl_svg: cannot open ", path);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    f << "<line x1=\"" << ML << "\" y1=\"" << H - MB << "\" x2=\"" << W - MR << "\" y2=\""
      << H - MB << "\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << ML << "\" y1=\"" << MT << "\" x2=\"" << ML << "\" y2=\"" << H - MB
      << "\" stroke=\"black\"/>\n";
    f << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
    for (const auto& p : points) {
        f << px(std::log2(double(p.ctx_len))) << "," << py(p.perplexity) << " ";
    }
    f << "\"/>\n";
    char buf[160];
    for (const auto& p : points) {
        double x = px(std::log2(double(p.ctx_len))), y = py(p.perplexity);
        std::snprintf(buf, sizeof(buf),
                      "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"3\" fill=\"#1f77b4\"/>\n", x, y);
        f << buf;
        std::snprintf(buf, sizeof(buf),
                      "<text x=\"%.1f\" y=\"%d\" font-size=\"12\" text-anchor=\"middle\">%lld</text>\n",
                      x, H - MB + 18, (long long)p.ctx_len);
        f << buf;
        std::snprintf(buf, sizeof(buf),
                      "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"middle\">%.3g</text>\n",
                      x, y - 8, p.perplexity);
        f << buf;
    }
    f << "<text x=\"" << (ML + W - MR) / 2
      << "\" y=\"" << H - 12 << "\" font-size=\"13\" text-anchor=\"middle\">"
      << "context length (log scale)</text>\n";
    f << "<text x=\"16\" y=\"" << (MT + H - MB) / 2
      << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (MT + H - MB) / 2 << ")\">perplexity</text>\n";
    f << "</svg>\n";
}

template <class T>
ThroughputPoint throughput(const LmModel<T>& model, int64_t ctx_len, int64_t batch, int64_t reps,
                           bool decode_mode, uint64_t seed) {
    check(ctx_len >= 1 && batch >= 1 && reps >= 1, "throughput: bad geometry");
    Rng rng(seed ^ 0xbe9c4u);
    std::vector<std::vector<int32_t>> inputs;
    for (int64_t b = 0; b < batch; b++) {
        std::vector<int32_t> toks(static_cast<size_t>(ctx_len));
        for (auto& t : toks) t = int32_t(rng.below(uint64_t(model.cfg.vocab_size)));
        inputs.push_back(std::move(toks));
    }
    int64_t V = model.cfg.vocab_size;
    auto run_once = [&]() {
        if (decode_mode) {
            for (const auto& toks : inputs) {
                auto st = model.make_state();
                std::vector<T> row(static_cast<size_t>(V));
                for (int32_t t : toks) model.step(t, st, row.data());
            }
        } else {
            Tensor<T> logits({ctx_len, V});
            for (const auto& toks : inputs) {
                model.forward(toks.data(), ctx_len, logits.data(), nullptr, ScanMode::parallel);
            }
        }
    };
    run_once(); // warmup excluded
    std::vector<double> times;
    for (int64_t r = 0; r < reps; r++) {
        Timer t;
        run_once();
        times.push_back(t.seconds());
    }
    std::sort(times.begin(), times.end());
    double median = times[times.size() / 2];
    ThroughputPoint p;
    p.ctx_len = ctx_len;
    p.batch = batch;
    p.reps = reps;
    p.wall_s = median;
    p.tokens_per_s = double(batch * ctx_len) / median;
    p.decode_mode = decode_mode;
    p.threads = max_threads();
    return p;
}

void write_throughput_csv(const std::string& path, const std::vector<ThroughputPoint>& points) {
    std::ofstream f(path);
    check(f.good(), "write_throughput_csv: cannot open ", path);
    f << "ctx_len,batch,reps,tokens_per_s,median_wall_s,decode_mode,threads\n";
    char buf[160];
    for (const auto& p : points) {
        std::snprintf(buf, sizeof(buf), "%lld,%lld,%lld,%.6g,%.6g,%d,%d\n", (long long)p.ctx_len,
                      (long long)p.batch, (long long)p.reps, p.tokens_per_s, p.wall_s,
                      p.decode_mode ? 1 : 0, p.threads);
        f << buf;
    }
}

Prf micro_prf(const std::vector<std::vector<uint8_t>>& pred,
              const std::vector<std::vector<uint8_t>>& gold) {
    check(pred.size() == gold.size(), "micro_prf: doc count mismatch");
    Prf r;
    for (size_t d = 0; d < pred.size(); d++) {
        check(pred[d].size() == gold[d].size(), "micro_prf: label count mismatch at doc ", d);
        for (size_t l = 0; l < pred[d].size(); l++) {
            if (pred[d][l] && gold[d][l]) r.tp++;
            else if (pred[d][l] && !gold[d][l]) r.fp++;
            else if (!pred[d][l] && gold[d][l]) r.fn++;
        }
    }
    r.precision = r.tp + r.fp > 0 ? double(r.tp) / double(r.tp + r.fp) : 0.0;
    r.recall = r.tp + r.fn > 0 ? double(r.tp) / double(r.tp + r.fn) : 0.0;
    r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

std::optional<double> rocauc_micro(const std::vector<double>& scores,
                                   const std::vector<uint8_t>& gold) {
    check(scores.size() == gold.size(), "rocauc_micro: length mismatch");
    int64_t npos = 0, nneg = 0;
    for (uint8_t g : gold) (g ? npos : nneg)++;
    if (npos == 0 || nneg == 0) return std::nullopt;

    // rank-sum with average ranks for ties
    std::vector<size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), size_t(0));
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0;
    size_t i = 0;
    while (i < idx.size()) {
        size_t j = i;
        while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) j++;
        double avg_rank = 0.5 * double(i + 1 + j + 1); // ranks are 1-based
        for (size_t k = i; k <= j; k++) {
            if (gold[idx[k]]) rank_sum_pos += avg_rank;
        }
        i = j + 1;
    }
    double auc = (rank_sum_pos - double(npos) * double(npos + 1) / 2.0) /
                 (double(npos) * double(nneg));
    return auc;
}

void write_metrics_csv(const std::string& path, const MetricReport& report) {
    std::ofstream f(path);
    check(f.good(), "write_metrics_csv: cannot open ", path);
    f << "task,precision,recall,f1,rocauc,tp,fp,fn\n";
    char buf[256];
    auto row = [&](const std::string& name, const Prf& m, const std::optional<double>& auc) {
        if (auc.has_value()) {
            std::snprintf(buf, sizeof(buf), "%s,%.6g,%.6g,%.6g,%.6g,%lld,%lld,%lld\n", name.c_str(),
                          m.precision, m.recall, m.f1, *auc, (long long)m.tp, (long long)m.fp,
                          (long long)m.fn);
        } else {
            std::snprintf(buf, sizeof(buf), "%s,%.6g,%.6g,%.6g,-,%lld,%lld,%lld\n", name.c_str(),
                          m.precision, m.recall, m.f1, (long long)m.tp, (long long)m.fp,
                          (long long)m.fn);
        }
        f << buf;
    };
    row("micro", report.micro, report.rocauc);
    for (const auto& [name, m] : report.per_task) row(name, m, std::nullopt);
}

#define SSMLM_EVAL_INSTANTIATE(T)                                                                  \
    template PplPoint perplexity_at<T>(const LmModel<T>&, const PackedCorpus&, int64_t,            \
                                       const PplOptions&);                                         \
    template ThroughputPoint throughput<T>(const LmModel<T>&, int64_t, int64_t, int64_t, bool,     \
                                           uint64_t);

SSMLM_EVAL_INSTANTIATE(float)
SSMLM_EVAL_INSTANTIATE(double)

} // namespace ssmlm
