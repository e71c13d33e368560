#include "ssmlm/prompt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "ssmlm/kernels.hpp"
#include "ssmlm/util.hpp"

namespace ssmlm {

using nlohmann::json;

TokenizedTask tokenize_task(const PromptTask& task, const Tokenizer& tok) {
    TokenizedTask t;
    t.def = task;
    t.prompt = tok.encode(task.prompt_text);
    t.yes_ids = tok.encode(task.yes_text);
    t.no_ids = tok.encode(task.no_text);
    check(!t.yes_ids.empty() && !t.no_ids.empty(), "task ", task.task_id,
          ": verbalizer token sequences must be non-empty");
    check(t.yes_ids != t.no_ids, "task ", task.task_id, ": verbalizer sequences must be distinct");
    return t;
}

static std::string render_template(const std::string& tpl, const std::string& criterion) {
    std::string out = tpl;
    const std::string slot = "{criterion}";
    size_t at = out.find(slot);
    if (at != std::string::npos) out.replace(at, slot.size(), criterion);
    return out;
}

std::vector<PromptTask> read_tasks_jsonl(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "read_tasks_jsonl: cannot open ", path);
    std::vector<PromptTask> tasks;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(f, line)) {
        lineno++;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const std::exception& e) {
            fail("read_tasks_jsonl: ", path, ":", lineno, ": bad JSON: ", e.what());
        }
        PromptTask t;
        t.task_id = j.at("task_id").get<std::string>();
        t.prompt_text = render_template(j.at("template").get<std::string>(),
                                        j.value("criterion", t.task_id));
        t.yes_text = j.value("yes", "Yes");
        t.no_text = j.value("no", "No");
        tasks.push_back(std::move(t));
    }
    check(!tasks.empty(), "read_tasks_jsonl: no tasks in ", path);
    return tasks;
}

void write_tasks_jsonl(const std::string& path, const std::vector<PromptTask>& tasks) {
    std::ofstream f(path);
    check(f.good(), "write_tasks_jsonl: cannot open ", path);
    for (const auto& t : tasks) {
        json j{{"task_id", t.task_id},
               {"template", t.prompt_text},
               {"yes", t.yes_text},
               {"no", t.no_text}};
        f << j.dump() << "\n";
    }
}

std::vector<PromptTask> default_cohort_tasks() {
    std::vector<PromptTask> tasks;
    for (const auto& name : cohort_criterion_names()) {
        PromptTask t;
        t.task_id = name;
        t.prompt_text = "\nquestion: does this record meet criterion " + name + "? answer:";
        tasks.push_back(std::move(t));
    }
    return tasks;
}

std::vector<int32_t> build_input(const std::vector<int32_t>& doc_tokens,
                                 const TokenizedTask& task, int64_t context_len,
                                 const BuildInputOptions& opts) {
    int64_t prompt_len = int64_t(task.prompt.size());
    check(prompt_len < context_len, "build_input: prompt for task ", task.def.task_id, " (",
          prompt_len, " tokens) does not fit in context_len ", context_len);
    int64_t budget = context_len - prompt_len - int64_t(opts.preamble.size());
    check(budget >= 0, "build_input: preamble plus prompt exceed context_len");
    std::vector<int32_t> out(opts.preamble);
    int64_t keep = std::min<int64_t>(budget, int64_t(doc_tokens.size()));
    if (opts.drop_start) {
        out.insert(out.end(), doc_tokens.end() - keep, doc_tokens.end());
    } else {
        out.insert(out.end(), doc_tokens.begin(), doc_tokens.begin() + keep);
    }
    out.insert(out.end(), task.prompt.begin(), task.prompt.end());
    return out;
}

template <class T>
double verbalizer_score(const T* logits, int64_t vocab, const TokenizedTask& task) {
    int32_t y = task.yes_ids.front(), n = task.no_ids.front();
    check(y != n, "verbalizer_score: task ", task.def.task_id,
          " label sequences share their first token; first-token scoring cannot ",
          "separate them (use full-sequence scoring or distinct label strings)");
    check(y < vocab && n < vocab, "verbalizer_score: label token out of vocab");
    double ly = double(logits[y]), ln = double(logits[n]);
    double m = std::max(ly, ln);
    double ey = std::exp(ly - m), en = std::exp(ln - m);
    return ey / (ey + en);
}

template <class T>
static double sequence_logprob(const LmModel<T>& model, LmState<T> state, const T* first_logits,
                               const std::vector<int32_t>& seq) {
    int64_t V = model.cfg.vocab_size;
    std::vector<T> row(static_cast<size_t>(V));
    double total = log_softmax_at(first_logits, V, seq.front());
    for (size_t i = 1; i < seq.size(); i++) {
        model.step(seq[i - 1], state, row.data());
        total += log_softmax_at(row.data(), V, seq[i]);
    }
    return total;
}

template <class T>
double verbalizer_score_full(const LmModel<T>& model, const std::vector<int32_t>& input,
                             const TokenizedTask& task) {
    check(!input.empty(), "verbalizer_score_full: empty input");
    auto st = model.make_state();
    model.prefill(input.data(), int64_t(input.size()) - 1, st);
    std::vector<T> logits(size_t(model.cfg.vocab_size));
    model.step(input.back(), st, logits.data());
    double ly = sequence_logprob(model, st, logits.data(), task.yes_ids);
    double ln = sequence_logprob(model, st, logits.data(), task.no_ids);
    double m = std::max(ly, ln);
    return std::exp(ly - m) / (std::exp(ly - m) + std::exp(ln - m));
}

template <class T>
TrainResult finetune(LmModel<T>& model, const std::vector<TokenizedTask>& tasks,
                     const std::vector<std::pair<std::string, std::vector<int32_t>>>& docs,
                     const std::unordered_map<std::string, std::vector<uint8_t>>& gold,
                     const std::vector<std::string>& train_ids, const FinetuneConfig& cfg) {
    check(!train_ids.empty(), "finetune: empty shot set");
    check(!tasks.empty(), "finetune: no tasks");
    if (cfg.train.total_steps == 0) return {}; // no-op: model left unchanged
    cfg.train.validate();

    std::unordered_map<std::string, const std::vector<int32_t>*> by_id;
    for (const auto& [id, toks] : docs) by_id[id] = &toks;

    // one example per (train doc, task): input ++ gold label tokens, loss on
    // the label positions only
    struct Example {
        std::vector<int32_t> chunk;
        std::vector<int32_t> targets;
    };
    std::vector<Example> examples;
    for (const auto& id : train_ids) {
        auto doc_it = by_id.find(id);
        check(doc_it != by_id.end(), "finetune: train id ", id, " not in corpus");
        auto gold_it = gold.find(id);
        check(gold_it != gold.end(), "finetune: train id ", id, " has no gold labels");
        for (size_t ti = 0; ti < tasks.size(); ti++) {
            const auto& task = tasks[ti];
            const auto& label_ids = gold_it->second[ti] ? task.yes_ids : task.no_ids;
            int64_t room = model.cfg.context_len - int64_t(label_ids.size());
            auto input = build_input(*doc_it->second, task, room);
            Example ex;
            ex.chunk = input;
            ex.chunk.insert(ex.chunk.end(), label_ids.begin(), label_ids.end());
            int64_t L = int64_t(ex.chunk.size()) - 1;
            ex.targets.assign(size_t(L), -1);
            for (int64_t p = int64_t(input.size()) - 1; p < L; p++) {
                ex.targets[size_t(p)] = ex.chunk[size_t(p + 1)];
            }
            examples.push_back(std::move(ex));
        }
    }

    AdamState<T> state;
    auto params = model.params();
    state.init_for(params);
    Rng rng(cfg.train.seed ^ 0xf17e7u);
    std::vector<size_t> order(examples.size());
    for (size_t i = 0; i < order.size(); i++) order[i] = i;
    auto reshuffle = [&]() {
        for (size_t i = order.size() - 1; i > 0; i--) {
            std::swap(order[i], order[size_t(rng.below(uint64_t(i + 1)))]);
        }
    };
    reshuffle();

    TrainResult result;
    size_t cursor = 0;
    for (int64_t step = 1; step <= cfg.train.total_steps; step++) {
        std::vector<std::vector<int32_t>> chunks, targets;
        for (int64_t b = 0; b < cfg.train.batch_size; b++) {
            if (cursor >= order.size()) {
                reshuffle();
                cursor = 0;
            }
            const auto& ex = examples[order[cursor++]];
            chunks.push_back(ex.chunk);
            targets.push_back(ex.targets);
        }
        double norm = 0;
        double loss = train_step_chunks(model, chunks, {}, targets, state, cfg.train, step, &norm);
        result.curve.push_back({step, loss, lr_at(step, cfg.train), norm});
        result.final_loss = loss;
    }
    return result;
}

template <class T>
std::vector<Prediction> predict_multilabel(const LmModel<T>& model, const std::string& doc_id,
                                           const std::vector<int32_t>& doc_tokens,
                                           const std::vector<TokenizedTask>& tasks,
                                           double threshold, bool full_sequence) {
    check(!tasks.empty(), "predict_multilabel: no tasks");
    int64_t max_prompt = 0;
    for (const auto& t : tasks) max_prompt = std::max(max_prompt, int64_t(t.prompt.size()));
    int64_t budget = model.cfg.context_len - max_prompt - 8;
    check(budget > 0, "predict_multilabel: prompts do not fit the model context");
    int64_t keep = std::min<int64_t>(budget, int64_t(doc_tokens.size()));
    std::vector<int32_t> doc(doc_tokens.end() - keep, doc_tokens.end());

    // shared document prefix state
    auto base = model.make_state();
    if (!doc.empty()) model.prefill(doc.data(), int64_t(doc.size()), base);

    int64_t V = model.cfg.vocab_size;
    std::vector<Prediction> preds;
    for (const auto& task : tasks) {
        Prediction p;
        p.doc_id = doc_id;
        p.task_id = task.def.task_id;
        if (full_sequence) {
            std::vector<int32_t> input = doc;
            input.insert(input.end(), task.prompt.begin(), task.prompt.end());
            p.score = verbalizer_score_full(model, input, task);
        } else {
            auto st = base;
            check(!task.prompt.empty(), "predict_multilabel: empty prompt for ", task.def.task_id);
            std::vector<T> row(static_cast<size_t>(V));
            for (int32_t t : task.prompt) model.step(t, st, row.data());
            p.score = verbalizer_score(row.data(), V, task);
        }
        p.label = p.score >= threshold ? 1 : 0;
        preds.push_back(std::move(p));
    }
    return preds;
}

void write_predictions_csv(const std::string& path, const std::vector<Prediction>& preds) {
    std::ofstream f(path);
    check(f.good(), "write_predictions_csv: cannot open ", path);
    f << "doc_id,task_id,score,label\n";
    char buf[64];
    for (const auto& p : preds) {
        std::snprintf(buf, sizeof(buf), "%.10g", p.score);
        f << p.doc_id << "," << p.task_id << "," << buf << "," << p.label << "\n";
    }
}

std::vector<Prediction> read_predictions_csv(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "read_predictions_csv: cannot open ", path);
    std::vector<Prediction> out;
    std::string line;
    bool header = true;
    while (std::getline(f, line)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) continue;
        Prediction p;
        size_t c1 = line.find(',');
        size_t c2 = line.find(',', c1 + 1);
        size_t c3 = line.find(',', c2 + 1);
        check(c1 != std::string::npos && c2 != std::string::npos && c3 != std::string::npos,
              "read_predictions_csv: malformed line: ", line);
        p.doc_id = line.substr(0, c1);
        p.task_id = line.substr(c1 + 1, c2 - c1 - 1);
        p.score = std::stod(line.substr(c2 + 1, c3 - c2 - 1));
        p.label = std::stoi(line.substr(c3 + 1));
        out.push_back(std::move(p));
    }
    return out;
}

#define SSMLM_PROMPT_INSTANTIATE(T)                                                                \
    template double verbalizer_score<T>(const T*, int64_t, const TokenizedTask&);                  \
    template double verbalizer_score_full<T>(const LmModel<T>&, const std::vector<int32_t>&,       \
                                             const TokenizedTask&);                                \
    template TrainResult finetune<T>(LmModel<T>&, const std::vector<TokenizedTask>&,               \
                                     const std::vector<std::pair<std::string, std::vector<int32_t>>>&, \
                                     const std::unordered_map<std::string, std::vector<uint8_t>>&, \
                                     const std::vector<std::string>&, const FinetuneConfig&);      \
    template std::vector<Prediction> predict_multilabel<T>(                                        \
        const LmModel<T>&, const std::string&, const std::vector<int32_t>&,                        \
        const std::vector<TokenizedTask>&, double, bool);

SSMLM_PROMPT_INSTANTIATE(float)
SSMLM_PROMPT_INSTANTIATE(double)

} // namespace ssmlm
