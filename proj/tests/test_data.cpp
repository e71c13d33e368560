#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <json.hpp>

#include "ssmlm/data.hpp"
#include "testutil.hpp"

using namespace ssmlm;
using namespace ssmlm::testing;

TEST_CASE("aggregate_visit: golden separator format and date ordering") {
    VisitRecord v;
    v.visit_id = "v1";
    v.patient_id = "p1";
    v.notes.push_back(Note{NoteType::Radiology, "2049-01-02", "chest xray clear"});
    v.notes.push_back(Note{NoteType::Nursing, "2049-01-01", "overnight note"});
    auto doc = aggregate_visit(v);
    CHECK(doc.text ==
          "- - Nursing note  - -\novernight note\n- - Radiology note  - -\nchest xray clear");

    // exactly one separator per note, double space pinned
    std::string sep = "- - Nursing note  - -";
    size_t first = doc.text.find(sep);
    CHECK(first != std::string::npos);
    CHECK(doc.text.find(sep, first + 1) == std::string::npos);
}

TEST_CASE("aggregate_visit: single note, stability, casing, errors") {
    VisitRecord v;
    v.visit_id = "v2";
    v.notes.push_back(Note{NoteType::Echo, "2049-03-01", "EF 55% Normal LV"});
    auto doc = aggregate_visit(v);
    CHECK(doc.text == "- - Echo note  - -\nEF 55% Normal LV");

    // equal chart dates keep input order (stable sort)
    VisitRecord v2;
    v2.visit_id = "v3";
    v2.notes.push_back(Note{NoteType::Nursing, "2049-01-01T08:00:00", "first"});
    v2.notes.push_back(Note{NoteType::Nursing, "2049-01-01T08:00:00", "second"});
    v2.notes.push_back(Note{NoteType::Nursing, "2049-01-01T07:00:00", "zeroth"});
    auto doc2 = aggregate_visit(v2);
    CHECK(doc2.text.find("zeroth") < doc2.text.find("first"));
    CHECK(doc2.text.find("first") < doc2.text.find("second"));

    VisitRecord empty;
    empty.visit_id = "v4";
    CHECK_THROWS_AS(aggregate_visit(empty), Error);
}

TEST_CASE("separator single-space variant and display names") {
    AggregateOptions opts;
    opts.single_space_variant = true;
    CHECK(note_separator(NoteType::DischargeSummary, opts) == "- - Discharge summary note - -");
    CHECK(note_separator(NoteType::RehabServices) == "- - Rehab Services note  - -");
    CHECK(note_type_from_name("Case Management").value() == NoteType::CaseManagement);
    CHECK(!note_type_from_name("bogus").has_value());
}

TEST_CASE("byte tokenizer round trips") {
    ByteTokenizer tok;
    CHECK(tok.encode("").empty());
    CHECK(tok.decode({}) == "");
    CHECK(tok.encode("ab") == std::vector<int32_t>{97, 98});
    CHECK(tok.vocab_size() == 258);

    Rng rng(17);
    for (int it = 0; it < 1000; it++) {
        std::string s;
        int64_t len = rng.range(0, 64);
        for (int64_t i = 0; i < len; i++) {
            // random bytes, including multi-byte UTF-8 fragments
            s.push_back(char(uint8_t(rng.below(256))));
        }
        CHECK(tok.decode(tok.encode(s)) == s);
    }
}

TEST_CASE("vocab tokenizer: greedy longest match and errors") {
    namespace fs = std::filesystem;
    auto path = fs::temp_directory_path() / "ssmlm_vocab.json";
    {
        std::ofstream f(path);
        f << "[";
        for (int b = 32; b < 127; b++) {
            std::string s(1, char(b));
            f << nlohmann::json(s).dump() << ",";
        }
        f << "\"ab\",\"abc\",\"<|endoftext|>\"]";
    }
    auto tok = load_vocab_tokenizer(path.string());
    CHECK(tok->vocab_size() == 98);
    auto ids = tok->encode("abcab!");
    CHECK(ids == std::vector<int32_t>{96, 95, int32_t('!') - 32}); // abc, ab, !
    CHECK(tok->decode(ids) == "abcab!");
    CHECK(tok->eod_id() == 97);

    // a byte outside the vocab cannot be encoded
    CHECK_THROWS_AS(tok->encode("tab\there"), Error);

    CHECK_THROWS_AS(load_vocab_tokenizer("/nonexistent/vocab.json"), Error);
    auto bad = fs::temp_directory_path() / "ssmlm_vocab_bad.json";
    {
        std::ofstream f(bad);
        f << "{\"not\": \"an array\"}";
    }
    CHECK_THROWS_AS(load_vocab_tokenizer(bad.string()), Error);
    fs::remove(path);
    fs::remove(bad);
}

TEST_CASE("truncate_document caps and flags") {
    ByteTokenizer tok;
    Document d;
    d.visit_id = "v";
    d.text = "0123456789";
    auto same = truncate_document(d, tok);
    CHECK(same.token_count == 10);
    CHECK(!same.truncated);

    Document big;
    big.visit_id = "v";
    big.text.assign(20000, 'x');
    auto cut = truncate_document(big, tok);
    CHECK(cut.token_count == kDefaultMaxTokens);
    CHECK(cut.truncated);
    CHECK(int64_t(cut.text.size()) == kDefaultMaxTokens);

    // idempotent
    auto cut2 = truncate_document(cut, tok);
    CHECK(cut2.token_count == cut.token_count);
    CHECK(cut2.text == cut.text);
}

TEST_CASE("corpus_stats basics and nearest-rank p99") {
    CHECK_THROWS_AS(corpus_stats({}), Error);

    std::vector<Document> docs;
    for (int64_t n : {1, 2, 3}) {
        Document d;
        d.token_count = n;
        docs.push_back(d);
    }
    auto s = corpus_stats(docs);
    CHECK(s.mean_tokens == doctest::Approx(2.0));
    CHECK(s.median_tokens == 2);
    CHECK(s.max_tokens == 3);

    // p99 vs a sort-based oracle on a larger random corpus
    Rng rng(23);
    std::vector<Document> many;
    std::vector<int64_t> lens;
    for (int i = 0; i < 1234; i++) {
        Document d;
        d.token_count = int64_t(rng.below(10000));
        lens.push_back(d.token_count);
        many.push_back(d);
    }
    auto s2 = corpus_stats(many);
    std::sort(lens.begin(), lens.end());
    size_t rank = size_t(std::ceil(0.99 * double(lens.size())));
    CHECK(s2.p99_tokens == lens[rank - 1]);
}

TEST_CASE("split_heldout partitions exactly") {
    std::vector<Document> docs;
    for (int i = 0; i < 20; i++) {
        Document d;
        d.visit_id = "v" + std::to_string(i);
        docs.push_back(d);
    }
    auto all_train = split_heldout(docs, {});
    CHECK(all_train.train.size() == 20);
    CHECK(all_train.heldout.empty());

    std::vector<std::string> all_ids;
    for (const auto& d : docs) all_ids.push_back(d.visit_id);
    auto none_train = split_heldout(docs, all_ids);
    CHECK(none_train.train.empty());
    CHECK(none_train.heldout.size() == 20);

    // random partition: union matches, intersection empty
    Rng rng(3);
    std::vector<std::string> held;
    for (const auto& d : docs) {
        if (rng.uniform() < 0.4) held.push_back(d.visit_id);
    }
    auto split = split_heldout(docs, held);
    CHECK(split.train.size() + split.heldout.size() == docs.size());
    std::set<std::string> train_ids, held_ids;
    for (const auto& d : split.train) train_ids.insert(d.visit_id);
    for (const auto& d : split.heldout) held_ids.insert(d.visit_id);
    for (const auto& id : train_ids) CHECK(!held_ids.count(id));
    for (const auto& id : held) CHECK(held_ids.count(id));
}

TEST_CASE("notes jsonl round trip") {
    std::vector<VisitRecord> visits(2);
    visits[0].visit_id = "va";
    visits[0].patient_id = "pa";
    visits[0].notes.push_back(Note{NoteType::Nursing, "2049-01-01", "line one\nline two"});
    visits[0].notes.push_back(Note{NoteType::ECG, "2049-01-02", "sinus"});
    visits[1].visit_id = "vb";
    visits[1].patient_id = "pb";
    visits[1].notes.push_back(Note{NoteType::Consult, "2049-02-01", "seen and examined"});

    auto path = std::filesystem::temp_directory_path() / "ssmlm_notes.jsonl";
    write_notes_jsonl(path.string(), visits);
    auto back = read_notes_jsonl(path.string());
    REQUIRE(back.size() == 2);
    CHECK(back[0].visit_id == "va");
    CHECK(back[0].notes.size() == 2);
    CHECK(back[0].notes[0].text == "line one\nline two");
    CHECK(back[1].notes[0].note_type == NoteType::Consult);
    std::filesystem::remove(path);
}

TEST_CASE("pack_documents appends eod and records offsets") {
    ByteTokenizer tok;
    std::vector<Document> docs(2);
    docs[0].visit_id = "a";
    docs[0].text = "hi";
    docs[1].visit_id = "b";
    docs[1].text = "yo!";
    auto c = pack_documents(docs, tok);
    CHECK(c.tokens == std::vector<uint32_t>{'h', 'i', 256, 'y', 'o', '!', 256});
    CHECK(c.doc_offsets == std::vector<int64_t>{0, 3});
    CHECK(c.doc_ids == std::vector<std::string>{"a", "b"});
}

TEST_CASE("chart date parsing orders correctly") {
    CHECK(parse_chart_date("2049-01-01") < parse_chart_date("2049-01-02"));
    CHECK(parse_chart_date("2049-01-01T05:00:00") < parse_chart_date("2049-01-01T06:30:00"));
    CHECK(parse_chart_date("2048-12-31T23:59:59") < parse_chart_date("2049-01-01"));
    CHECK_THROWS_AS(parse_chart_date("not a date"), Error);
}
