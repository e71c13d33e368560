// Command-line front end: corpus generation, preparation, pretraining,
// prompt fine-tuning, perplexity/throughput evaluation, and metric scoring.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "ssmlm/data.hpp"
#include "ssmlm/eval.hpp"
#include "ssmlm/json_io.hpp"
#include "ssmlm/kernels.hpp"
#include "ssmlm/model.hpp"
#include "ssmlm/prompt.hpp"
#include "ssmlm/synth.hpp"
#include "ssmlm/train.hpp"
#include "ssmlm/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ssmlm;

namespace {

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream f(path);
    check(f.good(), "cannot open config file ", path);
    return json::parse(f, nullptr, true, true);
}

void emit_resolved(const std::string& out_dir, const json& resolved) {
    fs::create_directories(out_dir);
    std::ofstream f(out_dir + "/resolved_config.json");
    check(f.good(), "cannot write resolved config in ", out_dir);
    f << resolved.dump(1) << "\n";
}

ModelConfig model_config_from(const json& cfg) {
    int64_t layers = 4, d_model = 128, vocab = 258, ctx = 16384;
    int64_t d_state = 16, d_conv = 4, expand = 2;
    if (cfg.contains("model")) {
        const json& m = cfg.at("model");
        layers = m.value("num_layer", layers);
        d_model = m.value("d_model", d_model);
        vocab = m.value("vocab_size", vocab);
        ctx = m.value("context_len", ctx);
        d_state = m.value("d_state", d_state);
        d_conv = m.value("d_conv", d_conv);
        expand = m.value("expand", expand);
    }
    auto mc = ModelConfig::make(layers, d_model, vocab, ctx, d_state, d_conv, expand);
    if (cfg.contains("model")) {
        const json& m = cfg.at("model");
        mc.tie_embeddings = m.value("tie_embeddings", mc.tie_embeddings);
        mc.use_pos_emb = m.value("use_pos_emb", mc.use_pos_emb);
        if (m.contains("dt_rank")) mc.block.dt_rank = m.at("dt_rank").get<int64_t>();
    }
    return mc;
}

TrainConfig train_config_from(const json& cfg) {
    TrainConfig tc;
    if (!cfg.contains("train")) return tc;
    const json& t = cfg.at("train");
    tc.peak_lr = t.value("peak_lr", tc.peak_lr);
    tc.min_lr = t.value("min_lr", tc.min_lr);
    tc.warmup_steps = t.value("warmup_steps", tc.warmup_steps);
    tc.total_steps = t.value("total_steps", tc.total_steps);
    tc.batch_size = t.value("batch_size", tc.batch_size);
    tc.seq_len = t.value("seq_len", tc.seq_len);
    tc.beta1 = t.value("beta1", tc.beta1);
    tc.beta2 = t.value("beta2", tc.beta2);
    tc.epsilon = t.value("epsilon", tc.epsilon);
    tc.weight_decay = t.value("weight_decay", tc.weight_decay);
    tc.grad_clip_norm = t.value("grad_clip_norm", tc.grad_clip_norm);
    tc.seed = t.value("seed", tc.seed);
    tc.reset_at_doc_boundary = t.value("reset_at_doc_boundary", tc.reset_at_doc_boundary);
    tc.checkpoint_every = t.value("checkpoint_every", tc.checkpoint_every);
    tc.log_every = t.value("log_every", tc.log_every);
    return tc;
}

json train_config_json(const TrainConfig& tc) {
    return json{{"peak_lr", tc.peak_lr},
                {"min_lr", tc.min_lr},
                {"warmup_steps", tc.warmup_steps},
                {"effective_warmup", tc.effective_warmup()},
                {"total_steps", tc.total_steps},
                {"batch_size", tc.batch_size},
                {"seq_len", tc.seq_len},
                {"beta1", tc.beta1},
                {"beta2", tc.beta2},
                {"epsilon", tc.epsilon},
                {"weight_decay", tc.weight_decay},
                {"grad_clip_norm", tc.grad_clip_norm},
                {"seed", tc.seed},
                {"reset_at_doc_boundary", tc.reset_at_doc_boundary},
                {"checkpoint_every", tc.checkpoint_every},
                {"log_every", tc.log_every}};
}

std::vector<std::string> split_all_ids(const FewShotSplit& split) {
    std::vector<std::string> ids = split.train_ids;
    ids.insert(ids.end(), split.dev_ids.begin(), split.dev_ids.end());
    ids.insert(ids.end(), split.test_ids.begin(), split.test_ids.end());
    return ids;
}

std::vector<int64_t> parse_lengths(const std::string& spec) {
    std::vector<int64_t> out;
    size_t pos = 0;
    while (pos < spec.size()) {
        size_t comma = spec.find(',', pos);
        std::string item =
            spec.substr(pos, comma == std::string::npos ? spec.size() - pos : comma - pos);
        check(!item.empty(), "bad --lengths value: ", spec);
        int64_t mult = 1;
        if (item.back() == 'k' || item.back() == 'K') {
            mult = 1024;
            item.pop_back();
        }
        out.push_back(std::stoll(item) * mult);
        pos = comma == std::string::npos ? spec.size() : comma + 1;
    }
    check(!out.empty(), "empty --lengths");
    return out;
}

// aggregated + truncated byte tokens for every visit in a notes file
std::vector<std::pair<std::string, std::vector<int32_t>>> tokenized_docs(
    const std::string& notes_path, int64_t max_tokens) {
    ByteTokenizer tok;
    auto visits = read_notes_jsonl(notes_path);
    std::vector<std::pair<std::string, std::vector<int32_t>>> docs;
    for (const auto& v : visits) {
        auto doc = truncate_document(aggregate_visit(v), tok, max_tokens);
        docs.emplace_back(doc.visit_id, tok.encode(doc.text));
    }
    return docs;
}

// ---------------------------------------------------------------------------
// gen-corpus
// ---------------------------------------------------------------------------
int cmd_gen_corpus(const std::string& profile_path, const std::string& config_path,
                   const std::string& out_dir, uint64_t seed, bool seed_given) {
    GenProfile profile;
    if (!profile_path.empty()) profile = read_profile_json(profile_path);
    json cfg = load_config(config_path);
    if (seed_given) profile.seed = seed;
    profile.validate();
    fs::create_directories(out_dir);

    auto corpus = generate(profile);
    write_notes_jsonl(out_dir + "/notes.jsonl", corpus.visits);
    auto attr_names = attribute_names_for(profile);
    write_meta_json(out_dir + "/meta.json", corpus, attr_names);

    if (profile.n_attributes > 0 && !corpus.visits.empty()) {
        int64_t shots = cfg.value("shots", int64_t(5));
        double eval_fraction = cfg.value("eval_fraction", 0.3);
        auto labeled = label_tasks(corpus, profile.n_attributes, shots, profile.seed, eval_fraction);
        write_labels_csv(out_dir + "/labels.csv", labeled);
        write_split_json(out_dir + "/split.json", labeled.split);
        std::vector<PromptTask> tasks;
        for (const auto& name : labeled.attr_names) {
            PromptTask t;
            t.task_id = name;
            t.prompt_text = "\nquestion: does this record meet criterion " + name + "? answer:";
            tasks.push_back(std::move(t));
        }
        write_tasks_jsonl(out_dir + "/tasks.jsonl", tasks);
    }

    write_profile_json(out_dir + "/profile.resolved.json", profile);
    std::ifstream pf(out_dir + "/profile.resolved.json");
    json resolved{{"subcommand", "gen-corpus"}, {"out", out_dir}, {"profile", json::parse(pf)}};
    emit_resolved(out_dir, resolved);
    std::printf("gen-corpus: %lld visits -> %s\n", (long long)profile.n_visits, out_dir.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------
int cmd_prepare(const std::string& notes_path, const std::string& out_dir, int64_t max_tokens,
                const std::string& exclude_split, bool single_space_sep) {
    fs::create_directories(out_dir);
    ByteTokenizer tok;
    auto visits = read_notes_jsonl(notes_path);
    check(!visits.empty(), "prepare: no visits in ", notes_path);

    AggregateOptions agg;
    agg.single_space_variant = single_space_sep;
    std::vector<Document> docs;
    for (const auto& v : visits) {
        docs.push_back(truncate_document(aggregate_visit(v, agg), tok, max_tokens));
    }
    auto stats = corpus_stats(docs, &visits);
    write_stats_csv(out_dir + "/stats.csv", stats);

    std::vector<std::string> heldout_ids;
    if (!exclude_split.empty()) heldout_ids = split_all_ids(read_split_json(exclude_split));
    auto split = split_heldout(docs, heldout_ids);
    pack_documents(split.train, tok).save(out_dir + "/tokens.bin");
    if (!split.heldout.empty()) {
        pack_documents(split.heldout, tok).save(out_dir + "/tokens_heldout.bin");
    }

    json resolved{{"subcommand", "prepare"},
                  {"notes", notes_path},
                  {"out", out_dir},
                  {"max_tokens", max_tokens},
                  {"exclude_split", exclude_split},
                  {"single_space_separator", single_space_sep},
                  {"train_docs", int64_t(split.train.size())},
                  {"heldout_docs", int64_t(split.heldout.size())}};
    emit_resolved(out_dir, resolved);
    std::printf("prepare: %zu docs (%zu held out), mean %.1f tokens -> %s\n", docs.size(),
                split.heldout.size(), stats.mean_tokens, out_dir.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------
template <class T>
int run_pretrain(const ModelConfig& mc, const TrainConfig& tc, const PackedCorpus& corpus,
                 const std::vector<std::string>& heldout_ids, const std::string& out_dir) {
    LmModel<T> model;
    model.init(mc, tc.seed);
    std::printf("pretrain: %lld params, %lld steps, seq_len %lld\n", (long long)model.num_params(),
                (long long)tc.total_steps, (long long)(tc.seq_len ? tc.seq_len : mc.context_len));
    Timer timer;
    auto result = train_loop(model, corpus, tc, heldout_ids, out_dir, [&](const StepRecord& r) {
        if (r.step % 50 == 0 || r.step == 1) {
            std::printf("  step %6lld  loss %.4f  lr %.3g  |g| %.3f  (%.0fs)\n", (long long)r.step,
                        r.loss, r.lr, r.grad_norm, timer.seconds());
            std::fflush(stdout);
        }
    });
    write_loss_curve_csv(out_dir + "/loss_curve.csv", result.curve);
    std::printf("pretrain: final loss %.4f in %.0fs -> %s\n", result.final_loss, timer.seconds(),
                out_dir.c_str());
    return 0;
}

int cmd_pretrain(const std::string& tokens_path, const std::string& config_path,
                 const std::string& out_dir, const std::string& dtype, uint64_t seed,
                 bool seed_given, int64_t steps_flag, int64_t seq_len_flag, int64_t batch_flag,
                 const std::string& heldout_split) {
    json cfg = load_config(config_path);
    ModelConfig mc = model_config_from(cfg);
    TrainConfig tc = train_config_from(cfg);
    if (steps_flag > 0) tc.total_steps = steps_flag;
    if (seq_len_flag > 0) tc.seq_len = seq_len_flag;
    if (batch_flag > 0) tc.batch_size = batch_flag;
    if (seed_given) tc.seed = seed;
    std::string dt = dtype.empty() ? cfg.value("dtype", "f32") : dtype;
    check(dt == "f32" || dt == "f64", "--dtype must be f32 or f64");

    auto corpus = PackedCorpus::load(tokens_path);
    std::vector<std::string> heldout_ids;
    if (!heldout_split.empty()) heldout_ids = split_all_ids(read_split_json(heldout_split));

    fs::create_directories(out_dir);
    json resolved{{"subcommand", "pretrain"},
                  {"tokens", tokens_path},
                  {"out", out_dir},
                  {"dtype", dt},
                  {"model", mc},
                  {"train", train_config_json(tc)},
                  {"heldout_split", heldout_split}};
    emit_resolved(out_dir, resolved);

    if (dt == "f64") return run_pretrain<double>(mc, tc, corpus, heldout_ids, out_dir);
    return run_pretrain<float>(mc, tc, corpus, heldout_ids, out_dir);
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------
template <class T>
int run_finetune(const std::string& ckpt, const std::string& notes_path,
                 const std::string& tasks_path, const std::string& labels_path,
                 const std::string& split_path, TrainConfig tc, const std::string& out_dir,
                 double threshold, bool full_sequence) {
    LmModel<T> model;
    load_checkpoint(model, ckpt);
    ByteTokenizer tok;
    auto tasks_def = read_tasks_jsonl(tasks_path);
    std::vector<TokenizedTask> tasks;
    for (const auto& t : tasks_def) tasks.push_back(tokenize_task(t, tok));

    auto split = read_split_json(split_path);
    auto labels = read_labels_csv(labels_path);
    std::unordered_map<std::string, size_t> task_index;
    for (size_t i = 0; i < tasks.size(); i++) task_index[tasks[i].def.task_id] = i;
    std::unordered_map<std::string, std::vector<uint8_t>> gold;
    for (const auto& [doc_id, task_id, label] : labels) {
        auto it = task_index.find(task_id);
        if (it == task_index.end()) continue; // labels file may cover more tasks
        auto& row = gold[doc_id];
        row.resize(tasks.size(), 0);
        row[it->second] = uint8_t(label);
    }

    auto docs = tokenized_docs(notes_path, model.cfg.context_len - 64);

    FinetuneConfig fc;
    fc.train = tc;
    fc.threshold = threshold;
    fc.full_sequence_verbalizer = full_sequence;
    Timer timer;
    auto result = finetune(model, tasks, docs, gold, split.train_ids, fc);
    write_loss_curve_csv(out_dir + "/finetune_curve.csv", result.curve);
    save_checkpoint(model, out_dir + "/ckpt_finetuned.bin");

    std::unordered_map<std::string, const std::vector<int32_t>*> by_id;
    for (auto& [id, toks] : docs) by_id[id] = &toks;
    std::vector<Prediction> preds;
    auto predict_ids = [&](const std::vector<std::string>& ids) {
        for (const auto& id : ids) {
            auto it = by_id.find(id);
            check(it != by_id.end(), "finetune: split id ", id, " missing from notes");
            auto p = predict_multilabel(model, id, *it->second, tasks, threshold, full_sequence);
            preds.insert(preds.end(), p.begin(), p.end());
        }
    };
    predict_ids(split.dev_ids);
    predict_ids(split.test_ids);
    write_predictions_csv(out_dir + "/predictions.csv", preds);
    std::printf("finetune: %zu train docs, final loss %.4f, %zu predictions in %.0fs -> %s\n",
                split.train_ids.size(), result.final_loss, preds.size(), timer.seconds(),
                out_dir.c_str());
    return 0;
}

int cmd_finetune(const std::string& ckpt, const std::string& notes_path,
                 const std::string& tasks_path, const std::string& labels_path,
                 const std::string& split_path, const std::string& config_path,
                 const std::string& out_dir, uint64_t seed, bool seed_given) {
    json cfg = load_config(config_path);
    TrainConfig tc = train_config_from(cfg);
    if (!cfg.contains("train")) {
        // fine-tuning defaults: short run, no decay
        tc.peak_lr = 1e-3;
        tc.min_lr = 1e-4;
        tc.total_steps = 300;
        tc.batch_size = 4;
        tc.weight_decay = 0.0;
    }
    if (seed_given) tc.seed = seed;
    double threshold = cfg.value("threshold", 0.5);
    bool full_sequence = cfg.value("full_sequence_verbalizer", false);
    std::string dt = checkpoint_dtype(ckpt);

    fs::create_directories(out_dir);
    json resolved{{"subcommand", "finetune"},
                  {"ckpt", ckpt},
                  {"notes", notes_path},
                  {"tasks", tasks_path},
                  {"labels", labels_path},
                  {"split", split_path},
                  {"out", out_dir},
                  {"dtype", dt},
                  {"threshold", threshold},
                  {"full_sequence_verbalizer", full_sequence},
                  {"train", train_config_json(tc)}};
    emit_resolved(out_dir, resolved);

    if (dt == "f64") {
        return run_finetune<double>(ckpt, notes_path, tasks_path, labels_path, split_path, tc,
                                    out_dir, threshold, full_sequence);
    }
    return run_finetune<float>(ckpt, notes_path, tasks_path, labels_path, split_path, tc, out_dir,
                               threshold, full_sequence);
}

// ---------------------------------------------------------------------------
// eval-ppl
// ---------------------------------------------------------------------------
template <class T>
int run_eval_ppl(const std::string& ckpt, const std::string& tokens_path,
                 const std::vector<int64_t>& lengths, const std::string& out_dir, bool plot,
                 int64_t reset_every, int64_t tail_span, int64_t max_docs) {
    LmModel<T> model;
    load_checkpoint(model, ckpt);
    auto corpus = PackedCorpus::load(tokens_path);
    PplOptions opts;
    opts.reset_every = reset_every;
    opts.tail_span = tail_span;
    opts.max_docs = max_docs;
    std::vector<PplPoint> points;
    for (int64_t L : lengths) {
        Timer t;
        auto p = perplexity_at(model, corpus, L, opts);
        points.push_back(p);
        std::printf("eval-ppl: ctx %6lld  ppl %10.4f  (%lld tokens, %.0fs)\n", (long long)L,
                    p.perplexity, (long long)p.tokens_scored, t.seconds());
        std::fflush(stdout);
    }
    write_ppl_csv(out_dir + "/ppl.csv", points);
    if (plot) write_ppl_svg(out_dir + "/ppl.svg", points);
    return 0;
}

int cmd_eval_ppl(const std::string& ckpt, const std::string& tokens_path,
                 const std::string& lengths_spec, const std::string& out_dir, bool plot,
                 int64_t reset_every, int64_t tail_span, int64_t max_docs) {
    auto lengths = parse_lengths(lengths_spec);
    fs::create_directories(out_dir);
    json resolved{{"subcommand", "eval-ppl"}, {"ckpt", ckpt},
                  {"tokens", tokens_path},    {"lengths", lengths},
                  {"plot", plot},             {"reset_every", reset_every},
                  {"tail_span", tail_span},   {"max_docs", max_docs},
                  {"out", out_dir}};
    emit_resolved(out_dir, resolved);
    std::string dt = checkpoint_dtype(ckpt);
    if (dt == "f64") {
        return run_eval_ppl<double>(ckpt, tokens_path, lengths, out_dir, plot, reset_every,
                                    tail_span, max_docs);
    }
    return run_eval_ppl<float>(ckpt, tokens_path, lengths, out_dir, plot, reset_every, tail_span,
                               max_docs);
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------
template <class T>
int run_bench(const std::string& ckpt, const std::vector<int64_t>& lengths, int64_t batch,
              int64_t reps, bool decode, const std::string& out_dir, uint64_t seed) {
    LmModel<T> model;
    load_checkpoint(model, ckpt);
    std::vector<ThroughputPoint> points;
    for (int64_t L : lengths) {
        auto p = throughput(model, L, batch, reps, decode, seed);
        points.push_back(p);
        std::printf("bench: ctx %6lld  %10.0f tokens/s  (median %.3fs over %lld reps)\n",
                    (long long)L, p.tokens_per_s, p.wall_s, (long long)reps);
        std::fflush(stdout);
    }
    write_throughput_csv(out_dir + "/throughput.csv", points);
    return 0;
}

int cmd_bench(const std::string& ckpt, const std::string& lengths_spec, int64_t batch,
              int64_t reps, bool decode, const std::string& out_dir, uint64_t seed) {
    auto lengths = parse_lengths(lengths_spec);
    fs::create_directories(out_dir);
    json resolved{{"subcommand", "bench"}, {"ckpt", ckpt}, {"lengths", lengths},
                  {"batch", batch},        {"reps", reps}, {"decode", decode},
                  {"out", out_dir},        {"seed", seed}};
    emit_resolved(out_dir, resolved);
    std::string dt = checkpoint_dtype(ckpt);
    if (dt == "f64") return run_bench<double>(ckpt, lengths, batch, reps, decode, out_dir, seed);
    return run_bench<float>(ckpt, lengths, batch, reps, decode, out_dir, seed);
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------
int cmd_score(const std::string& pred_path, const std::string& gold_path,
              const std::string& out_dir, const std::string& split_path,
              const std::string& subset) {
    auto preds = read_predictions_csv(pred_path);
    auto gold_rows = read_labels_csv(gold_path);
    check(!preds.empty(), "score: no predictions in ", pred_path);

    std::unordered_set<std::string> keep;
    if (!split_path.empty()) {
        auto split = read_split_json(split_path);
        const auto& ids = subset == "dev"     ? split.dev_ids
                          : subset == "train" ? split.train_ids
                                              : split.test_ids;
        keep.insert(ids.begin(), ids.end());
    }

    std::unordered_map<std::string, int> gold_map;
    for (const auto& [doc, task, label] : gold_rows) gold_map[doc + "\x1f" + task] = label;

    // pool (doc,label) pairs; group per task for the breakdown
    std::unordered_map<std::string, std::vector<std::pair<uint8_t, uint8_t>>> per_task_pairs;
    std::vector<double> scores;
    std::vector<uint8_t> gold_flat;
    std::vector<std::vector<uint8_t>> pred_mat, gold_mat;
    for (const auto& p : preds) {
        if (!keep.empty() && !keep.count(p.doc_id)) continue;
        auto it = gold_map.find(p.doc_id + "\x1f" + p.task_id);
        check(it != gold_map.end(), "score: no gold label for (", p.doc_id, ", ", p.task_id, ")");
        uint8_t g = uint8_t(it->second);
        scores.push_back(p.score);
        gold_flat.push_back(g);
        pred_mat.push_back({uint8_t(p.label)});
        gold_mat.push_back({g});
        per_task_pairs[p.task_id].push_back({uint8_t(p.label), g});
    }
    check(!scores.empty(), "score: nothing to score after filtering");

    MetricReport report;
    report.micro = micro_prf(pred_mat, gold_mat);
    report.rocauc = rocauc_micro(scores, gold_flat);
    std::vector<std::string> task_names;
    for (const auto& [name, pairs] : per_task_pairs) task_names.push_back(name);
    std::sort(task_names.begin(), task_names.end());
    for (const auto& name : task_names) {
        std::vector<std::vector<uint8_t>> pm, gm;
        for (auto [p, g] : per_task_pairs[name]) {
            pm.push_back({p});
            gm.push_back({g});
        }
        report.per_task.push_back({name, micro_prf(pm, gm)});
    }

    fs::create_directories(out_dir);
    json resolved{{"subcommand", "score"}, {"pred", pred_path}, {"gold", gold_path},
                  {"split", split_path},   {"subset", subset},  {"out", out_dir},
                  {"pairs", int64_t(scores.size())}};
    emit_resolved(out_dir, resolved);
    write_metrics_csv(out_dir + "/metrics.csv", report);
    if (report.rocauc.has_value()) {
        std::printf("score: micro P %.4f  R %.4f  F1 %.4f  ROCAUC %.4f  (%zu pairs)\n",
                    report.micro.precision, report.micro.recall, report.micro.f1, *report.rocauc,
                    scores.size());
    } else {
        std::printf("score: micro P %.4f  R %.4f  F1 %.4f  ROCAUC -  (%zu pairs)\n",
                    report.micro.precision, report.micro.recall, report.micro.f1, scores.size());
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"selective state space LM toolkit"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "worker thread cap (0 = library default)");

    auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic longitudinal note corpus");
    std::string gen_profile, gen_config, gen_out = "out/corpus";
    uint64_t gen_seed = 0;
    gen->add_option("--profile", gen_profile, "generation profile JSON");
    gen->add_option("--config", gen_config, "config JSON (shots, ...)");
    gen->add_option("--out", gen_out, "output directory");
    auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "override profile seed");

    auto* prep = app.add_subcommand("prepare", "aggregate notes into packed training tokens");
    std::string prep_notes, prep_out = "out/prepared", prep_exclude;
    int64_t prep_max_tokens = kDefaultMaxTokens;
    bool prep_single_space = false;
    prep->add_option("--notes", prep_notes, "notes.jsonl")->required();
    prep->add_option("--out", prep_out, "output directory");
    prep->add_option("--max-tokens", prep_max_tokens, "truncation cap per document");
    prep->add_option("--exclude-split", prep_exclude,
                     "split.json whose ids are held out of tokens.bin");
    prep->add_flag("--single-space-separator", prep_single_space,
                   "use the single-space separator variant");

    auto* pre = app.add_subcommand("pretrain", "causal LM pretraining");
    std::string pre_tokens, pre_config, pre_out = "out/pretrain", pre_dtype, pre_heldout;
    uint64_t pre_seed = 0;
    int64_t pre_steps = 0, pre_seq_len = 0, pre_batch = 0;
    pre->add_option("--tokens", pre_tokens, "tokens.bin")->required();
    pre->add_option("--config", pre_config, "config JSON with model/train sections");
    pre->add_option("--out", pre_out, "output directory");
    pre->add_option("--dtype", pre_dtype, "f32 or f64");
    auto* pre_seed_opt = pre->add_option("--seed", pre_seed, "training seed");
    pre->add_option("--steps", pre_steps, "override train.total_steps");
    pre->add_option("--seq-len", pre_seq_len, "override train.seq_len");
    pre->add_option("--batch", pre_batch, "override train.batch_size");
    pre->add_option("--heldout-split", pre_heldout, "split.json that must not appear in training");

    auto* ft = app.add_subcommand("finetune", "prompt-based few-shot fine-tuning");
    std::string ft_ckpt, ft_notes, ft_tasks, ft_labels, ft_split, ft_config,
        ft_out = "out/finetune";
    uint64_t ft_seed = 0;
    ft->add_option("--ckpt", ft_ckpt, "pretrained checkpoint")->required();
    ft->add_option("--notes", ft_notes, "notes.jsonl")->required();
    ft->add_option("--tasks", ft_tasks, "tasks.jsonl")->required();
    ft->add_option("--labels", ft_labels, "gold labels.csv")->required();
    ft->add_option("--split", ft_split, "split.json")->required();
    ft->add_option("--config", ft_config, "config JSON");
    ft->add_option("--out", ft_out, "output directory");
    auto* ft_seed_opt = ft->add_option("--seed", ft_seed, "fine-tuning seed");

    auto* ppl = app.add_subcommand("eval-ppl", "perplexity at context lengths");
    std::string ppl_ckpt, ppl_tokens, ppl_lengths = "1k,4k,16k", ppl_out = "out/eval";
    bool ppl_plot = false;
    int64_t ppl_reset = 0, ppl_tail = 0;
    ppl->add_option("--ckpt", ppl_ckpt, "checkpoint")->required();
    ppl->add_option("--tokens", ppl_tokens, "packed evaluation tokens")->required();
    ppl->add_option("--lengths", ppl_lengths, "comma list, k suffix = x1024");
    ppl->add_option("--out", ppl_out, "output directory");
    ppl->add_flag("--plot", ppl_plot, "emit ppl.svg (log-scale x)");
    ppl->add_option("--reset-every", ppl_reset,
                    "drop state every N tokens (window-limited baseline)");
    ppl->add_option("--tail-span", ppl_tail, "score only the last N predictions per window");
    int64_t ppl_max_docs = 0;
    ppl->add_option("--max-docs", ppl_max_docs, "evaluate only the first N documents");

    auto* bench = app.add_subcommand("bench", "inference throughput");
    std::string bench_ckpt, bench_lengths = "1k,4k,16k", bench_out = "out/bench";
    int64_t bench_batch = 1, bench_reps = 3;
    bool bench_decode = false;
    uint64_t bench_seed = 0;
    bench->add_option("--ckpt", bench_ckpt, "checkpoint")->required();
    bench->add_option("--lengths", bench_lengths, "comma list, k suffix = x1024");
    bench->add_option("--batch", bench_batch, "sequences per rep");
    bench->add_option("--reps", bench_reps, "timed repetitions (median reported)");
    bench->add_flag("--decode", bench_decode, "time token-by-token decoding instead");
    bench->add_option("--out", bench_out, "output directory");
    bench->add_option("--seed", bench_seed, "token sampling seed");

    auto* score = app.add_subcommand("score", "micro P/R/F1 and ROCAUC from prediction files");
    std::string score_pred, score_gold, score_out = "out/score", score_split,
                                        score_subset = "test";
    score->add_option("--pred", score_pred, "predictions.csv")->required();
    score->add_option("--gold", score_gold, "labels.csv")->required();
    score->add_option("--out", score_out, "output directory");
    score->add_option("--split", score_split, "restrict to one side of a split.json");
    score->add_option("--subset", score_subset, "train|dev|test (with --split)");

    CLI11_PARSE(app, argc, argv);
    set_num_threads(threads);

    try {
        if (gen->parsed()) {
            return cmd_gen_corpus(gen_profile, gen_config, gen_out, gen_seed,
                                  gen_seed_opt->count() > 0);
        }
        if (prep->parsed()) {
            return cmd_prepare(prep_notes, prep_out, prep_max_tokens, prep_exclude,
                               prep_single_space);
        }
        if (pre->parsed()) {
            return cmd_pretrain(pre_tokens, pre_config, pre_out, pre_dtype, pre_seed,
                                pre_seed_opt->count() > 0, pre_steps, pre_seq_len, pre_batch,
                                pre_heldout);
        }
        if (ft->parsed()) {
            return cmd_finetune(ft_ckpt, ft_notes, ft_tasks, ft_labels, ft_split, ft_config,
                                ft_out, ft_seed, ft_seed_opt->count() > 0);
        }
        if (ppl->parsed()) {
            return cmd_eval_ppl(ppl_ckpt, ppl_tokens, ppl_lengths, ppl_out, ppl_plot, ppl_reset,
                                ppl_tail, ppl_max_docs);
        }
        if (bench->parsed()) {
            return cmd_bench(bench_ckpt, bench_lengths, bench_batch, bench_reps, bench_decode,
                             bench_out, bench_seed);
        }
        if (score->parsed()) {
            return cmd_score(score_pred, score_gold, score_out, score_split, score_subset);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
