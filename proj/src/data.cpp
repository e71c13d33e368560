#include "ssmlm/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "ssmlm/util.hpp"

namespace ssmlm {

using nlohmann::json;

static const char* kNoteTypeNames[kNumNoteTypes] = {
    "Nursing",       "Radiology", "ECG",     "Physician",       "Discharge summary",
    "Echo",          "Respiratory", "Nutrition", "General",     "Rehab Services",
    "Social Work",   "Case Management", "Pharmacy", "Consult",
};

const char* note_type_name(NoteType t) {
    int i = int(t);
    check(i >= 0 && i < kNumNoteTypes, "note_type_name: bad enum value ", i);
    return kNoteTypeNames[i];
}

std::optional<NoteType> note_type_from_name(std::string_view name) {
    for (int i = 0; i < kNumNoteTypes; i++) {
        if (name == kNoteTypeNames[i]) return NoteType(i);
    }
    return std::nullopt;
}

int64_t parse_chart_date(std::string_view iso) {
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
    std::string str(iso);
    int n = std::sscanf(str.c_str(), "%d-%d-%dT%d:%d:%d", &y, &mo, &d, &h, &mi, &s);
    check(n >= 3, "parse_chart_date: not an ISO-8601 timestamp: '", str, "'");
    return (((int64_t(y) * 13 + mo) * 32 + d) * 86400) + h * 3600 + mi * 60 + s;
}

std::string note_separator(NoteType t, const AggregateOptions& opts) {
    std::string gap = opts.single_space_variant ? " " : "  ";
    return std::string("- - ") + note_type_name(t) + " note" + gap + "- -";
}

Document aggregate_visit(const VisitRecord& v, const AggregateOptions& opts) {
    check(!v.notes.empty(), "aggregate_visit: visit ", v.visit_id, " has no notes");
    std::vector<size_t> order(v.notes.size());
    for (size_t i = 0; i < order.size(); i++) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return parse_chart_date(v.notes[a].chart_date) < parse_chart_date(v.notes[b].chart_date);
    });
    std::string text;
    for (size_t k = 0; k < order.size(); k++) {
        const Note& n = v.notes[order[k]];
        if (k > 0) text += '\n';
        text += note_separator(n.note_type, opts);
        text += '\n';
        text += n.text;
    }
    Document doc;
    doc.visit_id = v.visit_id;
    doc.text = std::move(text);
    return doc;
}

// ---------------------------------------------------------------------------
// Tokenizers
// ---------------------------------------------------------------------------
std::vector<int32_t> ByteTokenizer::encode(std::string_view text) const {
    std::vector<int32_t> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(int32_t(c));
    return out;
}

std::string ByteTokenizer::decode(const std::vector<int32_t>& tokens) const {
    std::string out;
    out.reserve(tokens.size());
    for (int32_t t : tokens) {
        if (t >= 0 && t < 256) out.push_back(char(uint8_t(t)));
    }
    return out;
}

namespace {

struct VocabTokenizer final : Tokenizer {
    std::vector<std::string> entries;
    // byte-trie over vocab entries for greedy longest-match
    struct TrieNode {
        int32_t id = -1;
        std::unordered_map<uint8_t, int> next;
    };
    std::vector<TrieNode> trie{TrieNode{}};
    int32_t eod = -1;

    void insert(const std::string& s, int32_t id) {
        int cur = 0;
        for (unsigned char c : s) {
            auto it = trie[size_t(cur)].next.find(c);
            if (it == trie[size_t(cur)].next.end()) {
                trie.push_back(TrieNode{});
                int nxt = int(trie.size()) - 1;
                trie[size_t(cur)].next[c] = nxt;
                cur = nxt;
            } else {
                cur = it->second;
            }
        }
        trie[size_t(cur)].id = id;
    }

    std::vector<int32_t> encode(std::string_view text) const override {
        std::vector<int32_t> out;
        size_t i = 0;
        while (i < text.size()) {
            int cur = 0;
            int32_t best = -1;
            size_t best_len = 0;
            for (size_t j = i; j < text.size(); j++) {
                auto it = trie[size_t(cur)].next.find(uint8_t(text[j]));
                if (it == trie[size_t(cur)].next.end()) break;
                cur = it->second;
                if (trie[size_t(cur)].id >= 0) {
                    best = trie[size_t(cur)].id;
                    best_len = j - i + 1;
                }
            }
            check(best >= 0, "vocab tokenizer: no token matches byte ", int(uint8_t(text[i])));
            out.push_back(best);
            i += best_len;
        }
        return out;
    }

    std::string decode(const std::vector<int32_t>& tokens) const override {
        std::string out;
        for (int32_t t : tokens) {
            if (t == eod) continue;
            check(t >= 0 && t < int64_t(entries.size()), "vocab tokenizer: bad token id ", t);
            out += entries[size_t(t)];
        }
        return out;
    }

    int64_t vocab_size() const override { return int64_t(entries.size()); }
    int32_t eod_id() const override { return eod; }
};

} // namespace

std::unique_ptr<Tokenizer> load_vocab_tokenizer(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "load_vocab_tokenizer: cannot open vocab file ", path);
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        fail("load_vocab_tokenizer: ", path, " is not valid JSON: ", e.what());
    }
    check(j.is_array() && !j.empty(), "load_vocab_tokenizer: expected a non-empty JSON array");
    auto tok = std::make_unique<VocabTokenizer>();
    tok->entries = j.get<std::vector<std::string>>();
    for (size_t i = 0; i < tok->entries.size(); i++) {
        const std::string& e = tok->entries[i];
        if (e == "<|endoftext|>") {
            tok->eod = int32_t(i);
            continue;
        }
        check(!e.empty(), "load_vocab_tokenizer: empty token at id ", i);
        tok->insert(e, int32_t(i));
    }
    if (tok->eod < 0) {
        tok->entries.push_back("<|endoftext|>");
        tok->eod = int32_t(tok->entries.size()) - 1;
    }
    return tok;
}

// ---------------------------------------------------------------------------
// Document ops
// ---------------------------------------------------------------------------
Document truncate_document(const Document& doc, const Tokenizer& tok, int64_t max_tokens) {
    auto ids = tok.encode(doc.text);
    Document out = doc;
    if (int64_t(ids.size()) > max_tokens) {
        ids.resize(size_t(max_tokens));
        out.text = tok.decode(ids);
        out.truncated = true;
    }
    out.token_count = int64_t(ids.size());
    return out;
}

CorpusStats corpus_stats(const std::vector<Document>& docs, const std::vector<VisitRecord>* visits) {
    check(!docs.empty(), "corpus_stats: empty corpus");
    CorpusStats s;
    s.doc_count = int64_t(docs.size());
    std::vector<int64_t> lens;
    lens.reserve(docs.size());
    double total = 0;
    for (const auto& d : docs) {
        lens.push_back(d.token_count);
        total += double(d.token_count);
        s.max_tokens = std::max(s.max_tokens, d.token_count);
        s.truncated_docs += d.truncated ? 1 : 0;
    }
    std::sort(lens.begin(), lens.end());
    s.mean_tokens = total / double(lens.size());
    s.median_tokens = lens[lens.size() / 2];
    // nearest-rank percentile: ceil(p/100 * N)-th smallest
    size_t rank = size_t(std::ceil(0.99 * double(lens.size())));
    s.p99_tokens = lens[std::min(lens.size() - 1, rank == 0 ? 0 : rank - 1)];
    if (visits) {
        for (const auto& v : *visits) {
            for (const auto& n : v.notes) s.note_type_counts[size_t(n.note_type)]++;
        }
    }
    return s;
}

void write_stats_csv(const std::string& path, const CorpusStats& s) {
    std::ofstream f(path);
    check(f.good(), "write_stats_csv: cannot open ", path);
    char buf[128];
    f << "metric,value\n";
    f << "doc_count," << s.doc_count << "\n";
    std::snprintf(buf, sizeof(buf), "mean_tokens,%.4f\n", s.mean_tokens);
    f << buf;
    f << "median_tokens," << s.median_tokens << "\n";
    f << "p99_tokens," << s.p99_tokens << "\n";
    f << "max_tokens," << s.max_tokens << "\n";
    f << "truncated_docs," << s.truncated_docs << "\n";
    for (int i = 0; i < kNumNoteTypes; i++) {
        f << "notes:" << kNoteTypeNames[i] << "," << s.note_type_counts[size_t(i)] << "\n";
    }
}

SplitResult split_heldout(const std::vector<Document>& docs,
                          const std::vector<std::string>& heldout_ids) {
    std::unordered_set<std::string> ids(heldout_ids.begin(), heldout_ids.end());
    SplitResult r;
    for (const auto& d : docs) {
        (ids.count(d.visit_id) ? r.heldout : r.train).push_back(d);
    }
    if (r.train.empty() && !docs.empty()) {
        std::fprintf(stderr, "error: split_heldout left zero training documents\n");
    }
    return r;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------
std::vector<VisitRecord> read_notes_jsonl(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "read_notes_jsonl: cannot open ", path);
    std::vector<VisitRecord> visits;
    std::unordered_map<std::string, size_t> index;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(f, line)) {
        lineno++;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const std::exception& e) {
            fail("read_notes_jsonl: ", path, ":", lineno, ": bad JSON: ", e.what());
        }
        std::string vid = j.at("visit_id").get<std::string>();
        auto [it, inserted] = index.try_emplace(vid, visits.size());
        if (inserted) {
            visits.push_back(VisitRecord{vid, j.at("patient_id").get<std::string>(), {}});
        }
        std::string type_name = j.at("note_type").get<std::string>();
        auto nt = note_type_from_name(type_name);
        check(nt.has_value(), "read_notes_jsonl: ", path, ":", lineno, ": unknown note_type '",
              type_name, "'");
        visits[it->second].notes.push_back(
            Note{*nt, j.at("chart_date").get<std::string>(), j.at("text").get<std::string>()});
    }
    return visits;
}

void write_notes_jsonl(const std::string& path, const std::vector<VisitRecord>& visits) {
    std::ofstream f(path);
    check(f.good(), "write_notes_jsonl: cannot open ", path);
    for (const auto& v : visits) {
        for (const auto& n : v.notes) {
            json j{{"visit_id", v.visit_id},
                   {"patient_id", v.patient_id},
                   {"note_type", note_type_name(n.note_type)},
                   {"chart_date", n.chart_date},
                   {"text", n.text}};
            f << j.dump() << "\n";
        }
    }
    check(f.good(), "write_notes_jsonl: write failed");
}

PackedCorpus pack_documents(const std::vector<Document>& docs, const Tokenizer& tok) {
    PackedCorpus c;
    for (const auto& d : docs) {
        c.doc_offsets.push_back(int64_t(c.tokens.size()));
        c.doc_ids.push_back(d.visit_id);
        for (int32_t t : tok.encode(d.text)) c.tokens.push_back(uint32_t(t));
        c.tokens.push_back(uint32_t(tok.eod_id()));
    }
    return c;
}

} // namespace ssmlm
