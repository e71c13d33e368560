#include <doctest.h>

#include <cmath>

#include "ssmlm/kernels.hpp"
#include "ssmlm/prompt.hpp"
#include "testutil.hpp"

using namespace ssmlm;
using namespace ssmlm::testing;

TEST_CASE("build_input: identity, truncation, prompt always intact") {
    ByteTokenizer tok;
    PromptTask empty_prompt;
    empty_prompt.task_id = "t";
    empty_prompt.prompt_text = "";
    auto te = tokenize_task(empty_prompt, tok);
    std::vector<int32_t> doc = tok.encode("some document text");
    CHECK(build_input(doc, te, 64) == doc);

    PromptTask q;
    q.task_id = "q";
    q.prompt_text = "\nanswer:";
    auto tq = tokenize_task(q, tok);
    // doc at the limit: head dropped so the prompt fully fits
    std::vector<int32_t> long_doc = tok.encode(std::string(64, 'x') + "TAIL");
    auto input = build_input(long_doc, tq, 32);
    CHECK(int64_t(input.size()) == 32);
    std::vector<int32_t> tail(input.end() - int64_t(tq.prompt.size()), input.end());
    CHECK(tail == tq.prompt);
    // kept the most recent document text
    std::string kept = tok.decode(std::vector<int32_t>(input.begin(), input.end() - int64_t(tq.prompt.size())));
    CHECK(kept.find("TAIL") != std::string::npos);

    // tail-truncation variant keeps the start instead
    BuildInputOptions opts;
    opts.drop_start = false;
    auto input2 = build_input(long_doc, tq, 32, opts);
    std::string kept2 = tok.decode(std::vector<int32_t>(input2.begin(), input2.end() - int64_t(tq.prompt.size())));
    CHECK(kept2.find("TAIL") == std::string::npos);
    std::vector<int32_t> tail2(input2.end() - int64_t(tq.prompt.size()), input2.end());
    CHECK(tail2 == tq.prompt);

    // preamble slot
    BuildInputOptions pre;
    pre.preamble = tok.encode("[codes] ");
    auto input3 = build_input(doc, tq, 64, pre);
    CHECK(std::equal(pre.preamble.begin(), pre.preamble.end(), input3.begin()));

    // prompt alone exceeding the context is an error
    PromptTask huge;
    huge.task_id = "huge";
    huge.prompt_text = std::string(128, 'p');
    auto th = tokenize_task(huge, tok);
    CHECK_THROWS_AS(build_input(doc, th, 64), Error);
}

TEST_CASE("golden render for the alcohol criterion") {
    ByteTokenizer tok;
    auto tasks = default_cohort_tasks();
    const PromptTask* alcohol = nullptr;
    for (const auto& t : tasks) {
        if (t.task_id == "ALCOHOL-ABUSE") alcohol = &t;
    }
    REQUIRE(alcohol != nullptr);
    CHECK(alcohol->prompt_text ==
          "\nquestion: does this record meet criterion ALCOHOL-ABUSE? answer:");
    auto tt = tokenize_task(*alcohol, tok);
    auto input = build_input(tok.encode("note text"), tt, 128);
    CHECK(tok.decode(input) ==
          "note text\nquestion: does this record meet criterion ALCOHOL-ABUSE? answer:");
}

TEST_CASE("verbalizer_score: fixed points and oracle") {
    ByteTokenizer tok;
    PromptTask t;
    t.task_id = "t";
    t.prompt_text = "?";
    t.yes_text = "Y";
    t.no_text = "N";
    auto tt = tokenize_task(t, tok);
    int64_t V = tok.vocab_size();
    Tensor<double> logits({V});

    CHECK(verbalizer_score(logits.data(), V, tt) == doctest::Approx(0.5));

    logits[int32_t('Y')] = std::log(3.0);
    logits[int32_t('N')] = 0.0;
    CHECK(verbalizer_score(logits.data(), V, tt) == doctest::Approx(0.75).epsilon(1e-12));

    // random logits vs full softmax restricted and renormalized
    Rng rng(3);
    for (int it = 0; it < 50; it++) {
        logits.fill_uniform(rng, -5, 5);
        double z = 0;
        std::vector<double> p(static_cast<size_t>(V));
        double mx = -1e30;
        for (int64_t i = 0; i < V; i++) mx = std::max(mx, logits[i]);
        for (int64_t i = 0; i < V; i++) z += std::exp(logits[i] - mx);
        for (int64_t i = 0; i < V; i++) p[size_t(i)] = std::exp(logits[i] - mx) / z;
        double want = p['Y'] / (p['Y'] + p['N']);
        CHECK(std::abs(verbalizer_score(logits.data(), V, tt) - want) < 1e-12);

        // invariant to adding a constant
        Tensor<double> shifted = logits;
        for (int64_t i = 0; i < V; i++) shifted[i] += 17.5;
        CHECK(std::abs(verbalizer_score(shifted.data(), V, tt) -
                       verbalizer_score(logits.data(), V, tt)) < 1e-12);
    }

    // strictly increasing in the Yes logit
    logits.zero();
    double prev = verbalizer_score(logits.data(), V, tt);
    for (double bump : {0.5, 1.0, 2.0}) {
        logits[int32_t('Y')] = bump;
        double cur = verbalizer_score(logits.data(), V, tt);
        CHECK(cur > prev);
        prev = cur;
    }
}

namespace {

struct ToySetup {
    ModelConfig cfg = ModelConfig::make(2, 32, 258, 128, 4, 3, 2);
    std::vector<TokenizedTask> tasks;
    std::vector<std::pair<std::string, std::vector<int32_t>>> docs;
    std::unordered_map<std::string, std::vector<uint8_t>> gold;
    std::vector<std::string> train_ids, test_ids;

    ToySetup() {
        ByteTokenizer tok;
        PromptTask t;
        t.task_id = "FLAG";
        t.prompt_text = "\nflag? ";
        t.yes_text = "Y";
        t.no_text = "N";
        tasks.push_back(tokenize_task(t, tok));
        Rng rng(5);
        for (int i = 0; i < 24; i++) {
            bool pos = i % 2 == 0;
            std::string text = pos ? "note: the marker is raised today." : "note: nothing unusual observed.";
            // small distractor variation
            text += " hr " + std::to_string(60 + rng.below(40)) + ".";
            std::string id = "d" + std::to_string(i);
            docs.emplace_back(id, tok.encode(text));
            gold[id] = {uint8_t(pos ? 1 : 0)};
            (i < 10 ? train_ids : test_ids).push_back(id);
        }
    }
};

} // namespace

TEST_CASE("finetune: zero steps leaves the model unchanged") {
    ToySetup s;
    LmModel<double> m;
    m.init(s.cfg, 17);
    std::vector<double> before;
    for (auto* p : m.params()) before.insert(before.end(), p->w.v.begin(), p->w.v.end());
    FinetuneConfig fc;
    fc.train.total_steps = 0;
    finetune(m, s.tasks, s.docs, s.gold, s.train_ids, fc);
    std::vector<double> after;
    for (auto* p : m.params()) after.insert(after.end(), p->w.v.begin(), p->w.v.end());
    for (size_t i = 0; i < before.size(); i++) CHECK(before[i] == after[i]);

    CHECK_THROWS_AS(finetune(m, s.tasks, s.docs, s.gold, {}, fc), Error);
}

TEST_CASE("finetune solves a separable toy task") {
    ToySetup s;
    LmModel<double> m;
    m.init(s.cfg, 17);
    FinetuneConfig fc;
    fc.train.total_steps = 400;
    fc.train.batch_size = 5;
    fc.train.peak_lr = 3e-3;
    fc.train.min_lr = 3e-4;
    fc.train.warmup_steps = 10;
    fc.train.weight_decay = 0.0;
    fc.train.seed = 2;
    finetune(m, s.tasks, s.docs, s.gold, s.train_ids, fc);

    // training shots are classified perfectly
    std::unordered_map<std::string, const std::vector<int32_t>*> by_id;
    for (auto& [id, toks] : s.docs) by_id[id] = &toks;
    int correct = 0;
    for (const auto& id : s.train_ids) {
        auto preds = predict_multilabel(m, id, *by_id[id], s.tasks, 0.5);
        correct += preds[0].label == int(s.gold[id][0]) ? 1 : 0;
    }
    CHECK(correct == int(s.train_ids.size()));

    // and it generalizes to unseen docs of the same form
    int test_correct = 0;
    for (const auto& id : s.test_ids) {
        auto preds = predict_multilabel(m, id, *by_id[id], s.tasks, 0.5);
        test_correct += preds[0].label == int(s.gold[id][0]) ? 1 : 0;
    }
    CHECK(double(test_correct) / double(s.test_ids.size()) >= 0.9);
}

TEST_CASE("label-position loss decreases over the first steps at tiny lr") {
    ToySetup s;
    LmModel<double> m;
    m.init(s.cfg, 23);
    FinetuneConfig fc;
    fc.train.total_steps = 10;
    fc.train.batch_size = int64_t(s.train_ids.size()); // full batch, fixed each step
    fc.train.peak_lr = 3e-4;
    fc.train.min_lr = 3e-4;
    fc.train.warmup_steps = 1;
    fc.train.weight_decay = 0.0;
    fc.train.seed = 3;
    auto result = finetune(m, s.tasks, s.docs, s.gold, s.train_ids, fc);
    REQUIRE(result.curve.size() == 10);
    int decreases = 0;
    for (size_t i = 1; i < result.curve.size(); i++) {
        decreases += result.curve[i].loss < result.curve[i - 1].loss ? 1 : 0;
    }
    CHECK(decreases >= 9);
}

TEST_CASE("predict_multilabel: threshold semantics and determinism") {
    ToySetup s;
    LmModel<double> m;
    m.init(s.cfg, 29);
    // three tasks with distinct prompts
    ByteTokenizer tok;
    std::vector<TokenizedTask> tasks;
    for (const char* name : {"A", "B", "C"}) {
        PromptTask t;
        t.task_id = name;
        t.prompt_text = std::string("\n") + name + "? ";
        t.yes_text = "Y";
        t.no_text = "N";
        tasks.push_back(tokenize_task(t, tok));
    }
    auto doc = tok.encode("a short note body for scoring.");
    auto p1 = predict_multilabel(m, "doc", doc, tasks, 0.5);
    auto p2 = predict_multilabel(m, "doc", doc, tasks, 0.5);
    REQUIRE(p1.size() == 3);
    for (size_t i = 0; i < 3; i++) {
        CHECK(p1[i].score == p2[i].score); // deterministic given model and input
        CHECK(p1[i].label == (p1[i].score >= 0.5 ? 1 : 0));
    }

    // threshold 0 selects every label
    auto all = predict_multilabel(m, "doc", doc, tasks, 0.0);
    for (const auto& p : all) CHECK(p.label == 1);

    // threshold splits exactly by score: pick it between observed scores
    std::vector<double> scores{p1[0].score, p1[1].score, p1[2].score};
    std::sort(scores.begin(), scores.end());
    double thr = 0.5 * (scores[0] + scores[2]);
    auto some = predict_multilabel(m, "doc", doc, tasks, thr);
    for (const auto& p : some) CHECK(p.label == (p.score >= thr ? 1 : 0));
}

TEST_CASE("full-sequence verbalizer agrees with first-token on 1-token labels") {
    ToySetup s;
    LmModel<double> m;
    m.init(s.cfg, 31);
    ByteTokenizer tok;
    auto doc = tok.encode("short body");
    auto input = build_input(doc, s.tasks[0], m.cfg.context_len);
    Tensor<double> logits({int64_t(input.size()), m.cfg.vocab_size});
    m.forward(input.data(), int64_t(input.size()), logits.data());
    double first = verbalizer_score(logits.data() + (int64_t(input.size()) - 1) * m.cfg.vocab_size,
                                    m.cfg.vocab_size, s.tasks[0]);
    double full = verbalizer_score_full(m, input, s.tasks[0]);
    CHECK(std::abs(first - full) < 1e-5);
}

TEST_CASE("task and prediction files round trip") {
    auto tasks = default_cohort_tasks();
    std::string tpath = "/tmp/ssmlm_tasks.jsonl";
    write_tasks_jsonl(tpath, tasks);
    auto back = read_tasks_jsonl(tpath);
    REQUIRE(back.size() == tasks.size());
    CHECK(back[2].task_id == tasks[2].task_id);
    CHECK(back[2].prompt_text == tasks[2].prompt_text);
    std::remove(tpath.c_str());

    std::vector<Prediction> preds{{"d1", "A", 0.75, 1}, {"d2", "B", 0.25, 0}};
    std::string ppath = "/tmp/ssmlm_preds.csv";
    write_predictions_csv(ppath, preds);
    auto pback = read_predictions_csv(ppath);
    REQUIRE(pback.size() == 2);
    CHECK(pback[0].doc_id == "d1");
    CHECK(pback[0].score == doctest::Approx(0.75));
    CHECK(pback[1].label == 0);
    std::remove(ppath.c_str());
}

TEST_CASE("verbalizer definitions must be non-empty and distinct") {
    ByteTokenizer tok;
    PromptTask t;
    t.task_id = "bad";
    t.prompt_text = "?";
    t.yes_text = "";
    CHECK_THROWS_AS(tokenize_task(t, tok), Error);
    t.yes_text = "same";
    t.no_text = "same";
    CHECK_THROWS_AS(tokenize_task(t, tok), Error);
}
