#include <doctest.h>

#include <map>
#include <set>

#include "ssmlm/synth.hpp"
#include "testutil.hpp"

using namespace ssmlm;
using namespace ssmlm::testing;

TEST_CASE("generate: empty and deterministic") {
    GenProfile p;
    p.n_visits = 0;
    CHECK(generate(p).visits.empty());

    p.n_visits = 5;
    p.seed = 77;
    p.len_min = 512;
    p.len_max = 4000;
    p.len_log_mu = std::log(1500.0);
    p.dep.gap_min = 256;
    p.dep.gap_max = 2000;
    auto a = generate(p);
    auto b = generate(p);
    REQUIRE(a.visits.size() == b.visits.size());
    for (size_t i = 0; i < a.visits.size(); i++) {
        REQUIRE(a.visits[i].notes.size() == b.visits[i].notes.size());
        for (size_t k = 0; k < a.visits[i].notes.size(); k++) {
            CHECK(a.visits[i].notes[k].text == b.visits[i].notes[k].text);
            CHECK(a.visits[i].notes[k].chart_date == b.visits[i].notes[k].chart_date);
        }
    }
}

TEST_CASE("default profile calibrates to the published token statistics") {
    GenProfile p;
    p.seed = 123;
    p.n_visits = 10000;
    auto corpus = generate(p);
    ByteTokenizer tok;
    std::vector<Document> docs;
    double total = 0;
    int64_t truncated = 0;
    for (const auto& v : corpus.visits) {
        auto d = truncate_document(aggregate_visit(v), tok);
        total += double(d.token_count);
        truncated += d.truncated ? 1 : 0;
        docs.push_back(std::move(d));
    }
    double mean = total / double(docs.size());
    CHECK(mean == doctest::Approx(4924).epsilon(0.10));
    // fewer than 2% of documents hit the 16384 cap
    CHECK(double(truncated) / double(docs.size()) < 0.02);
}

TEST_CASE("gold labels are recoverable from the text (metadata audit)") {
    GenProfile p;
    p.seed = 9;
    p.n_visits = 200;
    p.len_min = 512;
    p.len_max = 4000;
    p.len_log_mu = std::log(1200.0);
    p.dep.gap_min = 256;
    p.dep.gap_max = 1500;
    p.attr_present_prob = 0.4;
    auto corpus = generate(p);
    auto names = attribute_names_for(p);
    int64_t checked = 0;
    for (size_t i = 0; i < corpus.visits.size(); i++) {
        std::string text;
        for (const auto& n : corpus.visits[i].notes) text += n.text;
        for (size_t a = 0; a < names.size(); a++) {
            bool marker = text.find(attribute_marker_sentence(names[a])) != std::string::npos;
            CHECK(marker == bool(corpus.meta[i].attrs[a]));
            checked++;
        }
        // every planted fact value appears at the plant and at each recall
        for (const auto& f : corpus.meta[i].facts) {
            std::string plant = "registry note: code " + f.name + " reads " + f.value;
            CHECK(text.find(plant) != std::string::npos);
            if (!f.recall_gaps.empty()) {
                std::string recall = "recall check: code " + f.name + " reads " + f.value;
                CHECK(text.find(recall) != std::string::npos);
            }
        }
    }
    CHECK(checked == int64_t(corpus.visits.size() * names.size()));
}

TEST_CASE("recall gaps respect the configured range") {
    GenProfile p;
    p.seed = 4;
    p.n_visits = 100;
    p.len_min = 4096;
    p.len_max = 15000;
    p.len_log_mu = std::log(8000.0);
    p.dep.gap_min = 1024;
    p.dep.gap_max = 12288;
    auto corpus = generate(p);
    int64_t recalls = 0;
    for (const auto& m : corpus.meta) {
        for (const auto& f : m.facts) {
            for (int64_t g : f.recall_gaps) {
                CHECK(g >= p.dep.gap_min);
                CHECK(g <= p.dep.gap_max);
                recalls++;
            }
        }
    }
    CHECK(recalls > 50); // most documents host at least one recall
}

TEST_CASE("label_tasks: exact shot counts and disjoint splits") {
    GenProfile p;
    p.seed = 31;
    p.n_visits = 600;
    p.len_min = 256;
    p.len_max = 2000;
    p.len_log_mu = std::log(700.0);
    p.dep.gap_min = 128;
    p.dep.gap_max = 1024;
    p.n_attributes = 13;
    p.attr_exclusive = true;
    p.attr_present_prob = 0.9;
    auto corpus = generate(p);
    auto set = label_tasks(corpus, 13, 5, 99);

    std::map<std::string, std::vector<uint8_t>> gold_by_id;
    for (size_t i = 0; i < set.visit_ids.size(); i++) gold_by_id[set.visit_ids[i]] = set.gold[i];

    // exactly 5 positive train docs per label
    for (size_t a = 0; a < set.attr_names.size(); a++) {
        int64_t pos = 0;
        for (const auto& id : set.split.train_ids) pos += gold_by_id[id][a];
        CHECK(pos == 5);
    }
    // splits are disjoint and cover distinct ids
    std::set<std::string> seen;
    for (const auto& id : set.split.train_ids) CHECK(seen.insert(id).second);
    for (const auto& id : set.split.dev_ids) CHECK(seen.insert(id).second);
    for (const auto& id : set.split.test_ids) CHECK(seen.insert(id).second);
    CHECK(!set.split.dev_ids.empty());
    CHECK(!set.split.test_ids.empty());
}

TEST_CASE("bigram model stays near chance on recall values") {
    GenProfile p;
    p.seed = 55;
    p.n_visits = 300;
    p.len_min = 2048;
    p.len_max = 8000;
    p.len_log_mu = std::log(4000.0);
    p.dep.gap_min = 1024;
    p.dep.gap_max = 6000;
    auto corpus = generate(p);

    // byte bigram counts over the whole corpus
    std::vector<std::string> texts;
    std::vector<int64_t> counts(256 * 256, 0);
    for (const auto& v : corpus.visits) {
        std::string t;
        for (const auto& n : v.notes) t += n.text;
        for (size_t i = 0; i + 1 < t.size(); i++) {
            counts[size_t(uint8_t(t[i])) * 256 + uint8_t(t[i + 1])]++;
        }
        texts.push_back(std::move(t));
    }
    std::vector<uint8_t> argmax(256, 0);
    for (int a = 0; a < 256; a++) {
        int64_t best = -1;
        for (int b = 0; b < 256; b++) {
            if (counts[size_t(a) * 256 + b] > best) {
                best = counts[size_t(a) * 256 + b];
                argmax[size_t(a)] = uint8_t(b);
            }
        }
    }
    // accuracy predicting the value characters at recall sites
    int64_t hits = 0, total = 0;
    for (size_t i = 0; i < texts.size(); i++) {
        for (const auto& f : corpus.meta[i].facts) {
            if (f.recall_gaps.empty()) continue;
            std::string cue = "recall check: code " + f.name + " reads ";
            size_t at = texts[i].find(cue);
            while (at != std::string::npos) {
                size_t v0 = at + cue.size();
                for (size_t k = 0; k < f.value.size() && v0 + k < texts[i].size(); k++) {
                    uint8_t prev = uint8_t(texts[i][v0 + k - 1]);
                    hits += argmax[prev] == uint8_t(texts[i][v0 + k]) ? 1 : 0;
                    total++;
                }
                at = texts[i].find(cue, at + 1);
            }
        }
    }
    REQUIRE(total > 200);
    double chance = 1.0 / 34.0; // value alphabet size
    double acc = double(hits) / double(total);
    CHECK(acc <= chance + 0.05);
}

TEST_CASE("infeasible dependency profile is rejected") {
    GenProfile p;
    p.len_min = 256;
    p.len_max = 1024;
    p.dep.gap_min = 4096; // recall can never fit
    p.dep.gap_max = 8192;
    CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("recall"), Error);
}

TEST_CASE("profile json round trip") {
    GenProfile p;
    p.seed = 5;
    p.n_visits = 42;
    p.dep.gap_min = 777;
    p.attr_exclusive = true;
    auto path = std::string("/tmp/ssmlm_profile.json");
    write_profile_json(path, p);
    auto q = read_profile_json(path);
    CHECK(q.seed == 5);
    CHECK(q.n_visits == 42);
    CHECK(q.dep.gap_min == 777);
    CHECK(q.attr_exclusive);
    std::remove(path.c_str());
}
