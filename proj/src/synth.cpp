#include "ssmlm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "ssmlm/rng.hpp"
#include "ssmlm/util.hpp"

namespace ssmlm {

using nlohmann::json;

// Event-count proportions of the note-type distribution in the source data.
static const double kNoteTypeEventCounts[kNumNoteTypes] = {
    506528, 338834, 123042, 92426, 47572, 34064, 32798, 7971, 7710, 5321, 2294, 939, 97, 78,
};

void GenProfile::validate() const {
    check(n_visits >= 0, "GenProfile: n_visits must be >= 0");
    check(dep.gap_min >= 1 && dep.gap_max >= dep.gap_min, "GenProfile: bad gap range");
    check(dep.value_len >= 1 && dep.fact_vocab >= 1, "GenProfile: bad fact spec");
    check(len_min >= 64 && len_max >= len_min, "GenProfile: bad length range");
    check(n_attributes >= 0, "GenProfile: n_attributes must be >= 0");
    // a recall must fit inside the longest possible document
    int64_t latest_plant = int64_t(0.15 * double(len_max));
    check(latest_plant + dep.gap_min + 128 <= len_max,
          "GenProfile: infeasible dependency spec, recall position ", latest_plant + dep.gap_min,
          " lands beyond the longest document (", len_max, ")");
}

const std::vector<std::string>& cohort_criterion_names() {
    static const std::vector<std::string> names = {
        "ABDOMINAL",     "ADVANCED-CAD",   "ALCOHOL-ABUSE", "ASP-FOR-MI", "CREATININE",
        "DIETSUPP-2MOS", "DRUG-ABUSE",     "ENGLISH",       "HBA1C",      "KETO-1YR",
        "MAJOR-DIABETES", "MAKES-DECISIONS", "MI-6MOS",
    };
    return names;
}

std::vector<std::string> code_attribute_names(int64_t n) {
    std::vector<std::string> out;
    char buf[32];
    for (int64_t i = 0; i < n; i++) {
        std::snprintf(buf, sizeof(buf), "CODE-%03d", int(i));
        out.emplace_back(buf);
    }
    return out;
}

std::vector<std::string> attribute_names_for(const GenProfile& profile) {
    if (profile.n_attributes == int64_t(cohort_criterion_names().size())) {
        return cohort_criterion_names();
    }
    return code_attribute_names(profile.n_attributes);
}

std::string attribute_marker_sentence(const std::string& name) {
    return "status marker: criterion " + name + " documented in this record.";
}

// ---------------------------------------------------------------------------
// Filler text
// ---------------------------------------------------------------------------
namespace {

const char* kFillerTemplates[] = {
    "patient resting comfortably, vitals stable overnight.",
    "heart rate # and blood pressure #/# recorded at bedside.",
    "lungs clear to auscultation bilaterally, no wheezes noted.",
    "administered @ # mg with good effect, no adverse reaction.",
    "abdomen soft and nontender, bowel sounds present in all quadrants.",
    "continues on @ drip, titrated to comfort.",
    "family at bedside, questions answered, plan of care reviewed.",
    "repeat labs ordered for the morning, pending results.",
    "oxygen saturation # percent on room air.",
    "patient tolerating diet without nausea or emesis.",
    "neuro checks unchanged, alert and oriented.",
    "telemetry shows sinus rhythm with rare ectopy.",
    "wound dressing changed, site clean dry and intact.",
    "physical therapy evaluated patient, recommends ambulation twice daily.",
    "pain rated # of 10, managed with scheduled @.",
    "urine output adequate at # ml over the shift.",
    "temperature # point # recorded, afebrile trend continues.",
    "follow up imaging scheduled for tomorrow morning.",
    "electrolytes repleted per protocol, recheck in am.",
    "case discussed with covering team during rounds.",
};

const char* kMedNames[] = {
    "metoprolol", "lisinopril", "furosemide", "heparin",    "insulin",  "warfarin",
    "aspirin",    "atorvastatin", "pantoprazole", "morphine", "vancomycin", "ceftriaxone",
};

std::string fact_value(uint64_t vocab_id, int64_t value_len) {
    static const char alphabet[] = "ABCDEFGHJKLMNPQRSTUVWXYZ0123456789";
    Rng r = Rng::fork(0x5eedfac7u, vocab_id);
    std::string s;
    for (int64_t i = 0; i < value_len; i++) {
        s.push_back(alphabet[r.below(sizeof(alphabet) - 1)]);
    }
    return s;
}

const char* kFactNames[] = {
    "alpha", "bravo", "cedar", "delta", "ember", "fjord", "gamma", "helix",
};

std::string filler_sentence(Rng& rng) {
    const char* tpl = kFillerTemplates[rng.below(std::size(kFillerTemplates))];
    std::string out;
    for (const char* p = tpl; *p; p++) {
        if (*p == '#') {
            out += std::to_string(40 + rng.below(140));
        } else if (*p == '@') {
            out += kMedNames[rng.below(std::size(kMedNames))];
        } else {
            out.push_back(*p);
        }
    }
    return out;
}

struct PlannedEvent {
    int64_t pos;
    std::string text;
};

} // namespace

SynthCorpus generate(const GenProfile& profile) {
    profile.validate();
    auto attr_names = attribute_names_for(profile);
    std::vector<double> weights = profile.note_type_weights;
    if (weights.empty()) {
        weights.assign(kNoteTypeEventCounts, kNoteTypeEventCounts + kNumNoteTypes);
    }
    check(int64_t(weights.size()) == kNumNoteTypes, "GenProfile: note_type_weights needs ",
          kNumNoteTypes, " entries");
    double wsum = 0;
    for (double w : weights) wsum += w;

    SynthCorpus corpus;
    corpus.visits.reserve(size_t(profile.n_visits));
    for (int64_t vi = 0; vi < profile.n_visits; vi++) {
        Rng rng = Rng::fork(profile.seed, uint64_t(vi));
        VisitMeta meta;
        meta.visit_id = "visit-" + std::to_string(100000 + vi);

        int64_t target = std::clamp(int64_t(rng.lognormal(profile.len_log_mu, profile.len_log_sigma)),
                                    profile.len_min, profile.len_max);
        meta.target_len = target;

        // attributes
        meta.attrs.assign(size_t(profile.n_attributes), 0);
        if (profile.attr_exclusive) {
            if (rng.uniform() < profile.attr_present_prob && profile.n_attributes > 0) {
                meta.attrs[size_t(rng.below(uint64_t(profile.n_attributes)))] = 1;
            }
        } else {
            for (auto& a : meta.attrs) a = rng.uniform() < profile.attr_present_prob ? 1 : 0;
        }

        std::vector<PlannedEvent> events;

        // facts: plant early, recall after a long gap
        int64_t n_facts = rng.range(profile.dep.facts_min, profile.dep.facts_max + 1);
        for (int64_t f = 0; f < n_facts; f++) {
            FactPlant plant;
            plant.name = kFactNames[size_t(f % std::size(kFactNames))];
            plant.value = fact_value(rng.below(uint64_t(profile.dep.fact_vocab)), profile.dep.value_len);
            plant.plant_pos = int64_t(rng.uniform(0.02, 0.15) * double(target));
            events.push_back({plant.plant_pos, "registry note: code " + plant.name + " reads " +
                                                   plant.value + "."});
            int64_t max_gap = std::min(profile.dep.gap_max, target - plant.plant_pos - 128);
            for (int64_t r = 0; r < profile.dep.recalls_per_fact; r++) {
                if (max_gap < profile.dep.gap_min) break; // document too short for a recall
                int64_t gap;
                if (profile.dep.gap_log_uniform) {
                    double lg = rng.uniform(std::log(double(profile.dep.gap_min)),
                                            std::log(double(max_gap)));
                    gap = std::clamp(int64_t(std::exp(lg)), profile.dep.gap_min, max_gap);
                } else {
                    gap = rng.range(profile.dep.gap_min, max_gap + 1);
                }
                plant.recall_gaps.push_back(gap);
                events.push_back({plant.plant_pos + gap, "recall check: code " + plant.name +
                                                             " reads " + plant.value + "."});
            }
            meta.facts.push_back(std::move(plant));
        }

        // attribute markers, each followed a few hundred tokens later by a
        // status restatement; extra restatements (present or absent) land at
        // random positions
        for (int64_t a = 0; a < profile.n_attributes; a++) {
            if (!meta.attrs[size_t(a)]) continue;
            int64_t pos = int64_t(rng.uniform(0.1, 0.8) * double(target));
            events.push_back({pos, attribute_marker_sentence(attr_names[size_t(a)])});
            if (profile.emit_attribute_summary) {
                int64_t spos = pos + rng.range(192, 768);
                if (spos < target - 64) {
                    events.push_back({spos, "summary " + attr_names[size_t(a)] + ": present."});
                }
            }
        }
        if (profile.emit_attribute_summary && profile.n_attributes > 0) {
            for (int64_t k = 0; k < profile.summary_lines; k++) {
                int64_t a = rng.range(0, profile.n_attributes);
                int64_t pos = int64_t(rng.uniform(0.2, 0.95) * double(target));
                events.push_back({pos, "summary " + attr_names[size_t(a)] + ": " +
                                           (meta.attrs[size_t(a)] ? "present." : "absent.")});
            }
        }

        std::sort(events.begin(), events.end(),
                  [](const PlannedEvent& a, const PlannedEvent& b) { return a.pos < b.pos; });

        // assemble: filler up to each event position, then the event sentence
        std::string text;
        text.reserve(size_t(target) + 256);
        size_t next_event = 0;
        while (int64_t(text.size()) < target) {
            if (next_event < events.size() && int64_t(text.size()) >= events[next_event].pos) {
                text += events[next_event].text;
                text += '\n';
                next_event++;
                continue;
            }
            text += filler_sentence(rng);
            text += '\n';
        }
        for (; next_event < events.size(); next_event++) {
            text += events[next_event].text;
            text += '\n';
        }

        // split into notes at line boundaries
        VisitRecord visit;
        visit.visit_id = meta.visit_id;
        visit.patient_id = "patient-" + std::to_string(50000 + vi / 2);
        int64_t n_notes = rng.range(2, 7);
        size_t per_note = std::max<size_t>(1, text.size() / size_t(n_notes));
        size_t start = 0;
        int64_t day = 1 + int64_t(rng.below(20));
        while (start < text.size()) {
            size_t end = std::min(text.size(), start + per_note);
            size_t nl = text.find('\n', end);
            end = nl == std::string::npos ? text.size() : nl + 1;
            double w = rng.uniform() * wsum;
            int type = 0;
            for (; type < kNumNoteTypes - 1; type++) {
                w -= weights[size_t(type)];
                if (w <= 0) break;
            }
            char date[32];
            std::snprintf(date, sizeof(date), "2049-%02d-%02dT%02d:00:00", int(1 + (day / 28) % 12),
                          int(1 + day % 28), int(rng.below(24)));
            visit.notes.push_back(Note{NoteType(type), date, text.substr(start, end - start)});
            start = end;
            day += int64_t(rng.below(3));
        }
        check(!visit.notes.empty(), "generate: produced an empty visit");

        corpus.visits.push_back(std::move(visit));
        corpus.meta.push_back(std::move(meta));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Labels and splits
// ---------------------------------------------------------------------------
LabeledSet label_tasks(const SynthCorpus& corpus, int64_t k_criteria, int64_t shots,
                       uint64_t seed, double eval_fraction) {
    check(!corpus.meta.empty(), "label_tasks: empty corpus");
    check(k_criteria >= 1, "label_tasks: k_criteria must be >= 1");
    LabeledSet set;
    int64_t n_attr = int64_t(corpus.meta.front().attrs.size());
    check(k_criteria <= n_attr, "label_tasks: corpus has only ", n_attr, " attributes");
    set.attr_names = n_attr == int64_t(cohort_criterion_names().size())
                         ? cohort_criterion_names()
                         : code_attribute_names(n_attr);
    set.attr_names.resize(size_t(k_criteria));

    for (const auto& m : corpus.meta) {
        set.visit_ids.push_back(m.visit_id);
        set.gold.emplace_back(m.attrs.begin(), m.attrs.begin() + k_criteria);
    }

    // shuffled doc order, then greedily take exactly `shots` positives per label
    Rng rng(seed ^ 0xfee15ull);
    std::vector<int64_t> order(set.visit_ids.size());
    for (size_t i = 0; i < order.size(); i++) order[i] = int64_t(i);
    for (int64_t i = int64_t(order.size()) - 1; i > 0; i--) {
        std::swap(order[size_t(i)], order[size_t(rng.below(uint64_t(i + 1)))]);
    }
    // Strict pass keeps counts exact (always attainable for exclusive-attribute
    // corpora); the relaxed pass fills any starved label when documents carry
    // several positives at once.
    std::vector<int64_t> need(size_t(k_criteria), shots);
    std::vector<uint8_t> in_train(set.visit_ids.size(), 0);
    auto take = [&](int64_t idx) {
        in_train[size_t(idx)] = 1;
        for (int64_t a = 0; a < k_criteria; a++) {
            if (set.gold[size_t(idx)][size_t(a)]) need[size_t(a)]--;
        }
    };
    for (int64_t idx : order) {
        const auto& g = set.gold[size_t(idx)];
        bool helps = false, hurts = false;
        for (int64_t a = 0; a < k_criteria; a++) {
            if (!g[size_t(a)]) continue;
            if (need[size_t(a)] > 0) helps = true;
            else hurts = true;
        }
        if (helps && !hurts) take(idx);
    }
    for (int64_t idx : order) {
        bool helps = false;
        for (int64_t a = 0; a < k_criteria; a++) {
            helps |= set.gold[size_t(idx)][size_t(a)] && need[size_t(a)] > 0;
        }
        if (helps && !in_train[size_t(idx)]) take(idx);
    }
    for (int64_t a = 0; a < k_criteria; a++) {
        check(need[size_t(a)] <= 0, "label_tasks: not enough positive documents for label ",
              set.attr_names[size_t(a)], " (", shots - need[size_t(a)], " of ", shots, " shots)");
    }
    // negatives for training: as many all-negative docs as positives taken
    int64_t train_pos = 0;
    for (uint8_t b : in_train) train_pos += b;
    int64_t want_neg = train_pos;
    for (int64_t idx : order) {
        if (want_neg == 0) break;
        if (in_train[size_t(idx)]) continue;
        bool all_neg = true;
        for (uint8_t b : set.gold[size_t(idx)]) all_neg &= b == 0;
        if (all_neg) {
            in_train[size_t(idx)] = 1;
            want_neg--;
        }
    }

    set.split.shots = shots;
    std::vector<int64_t> rest;
    for (int64_t idx : order) {
        if (in_train[size_t(idx)]) {
            set.split.train_ids.push_back(set.visit_ids[size_t(idx)]);
        } else {
            rest.push_back(idx);
        }
    }
    // cap the evaluation pool; everything else stays out of the split and
    // remains available for pretraining
    size_t pool = std::min(rest.size(), size_t(eval_fraction * double(set.visit_ids.size())));
    for (size_t i = 0; i < pool; i++) {
        auto& dst = i < pool / 4 ? set.split.dev_ids : set.split.test_ids;
        dst.push_back(set.visit_ids[size_t(rest[i])]);
    }
    return set;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------
void write_meta_json(const std::string& path, const SynthCorpus& corpus,
                     const std::vector<std::string>& attr_names) {
    json j;
    j["attr_names"] = attr_names;
    json visits = json::array();
    for (const auto& m : corpus.meta) {
        json facts = json::array();
        for (const auto& f : m.facts) {
            facts.push_back({{"name", f.name},
                             {"value", f.value},
                             {"plant_pos", f.plant_pos},
                             {"recall_gaps", f.recall_gaps}});
        }
        visits.push_back({{"visit_id", m.visit_id},
                          {"attrs", m.attrs},
                          {"facts", facts},
                          {"target_len", m.target_len}});
    }
    j["visits"] = visits;
    std::ofstream f(path);
    check(f.good(), "write_meta_json: cannot open ", path);
    f << j.dump(1) << "\n";
}

void write_labels_csv(const std::string& path, const LabeledSet& set) {
    std::ofstream f(path);
    check(f.good(), "write_labels_csv: cannot open ", path);
    f << "doc_id,task_id,label\n";
    for (size_t i = 0; i < set.visit_ids.size(); i++) {
        for (size_t a = 0; a < set.attr_names.size(); a++) {
            f << set.visit_ids[i] << "," << set.attr_names[a] << "," << int(set.gold[i][a]) << "\n";
        }
    }
}

void write_split_json(const std::string& path, const FewShotSplit& split) {
    json j{{"shots", split.shots},
           {"train", split.train_ids},
           {"dev", split.dev_ids},
           {"test", split.test_ids}};
    std::ofstream f(path);
    check(f.good(), "write_split_json: cannot open ", path);
    f << j.dump(1) << "\n";
}

FewShotSplit read_split_json(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "read_split_json: cannot open ", path);
    json j = json::parse(f, nullptr, true, true);
    FewShotSplit s;
    s.shots = j.value("shots", int64_t(0));
    s.train_ids = j.at("train").get<std::vector<std::string>>();
    s.dev_ids = j.at("dev").get<std::vector<std::string>>();
    s.test_ids = j.at("test").get<std::vector<std::string>>();
    return s;
}

std::vector<std::tuple<std::string, std::string, int>> read_labels_csv(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "read_labels_csv: cannot open ", path);
    std::vector<std::tuple<std::string, std::string, int>> out;
    std::string line;
    bool header = true;
    while (std::getline(f, line)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) continue;
        size_t c1 = line.find(','), c2 = line.rfind(',');
        check(c1 != std::string::npos && c2 != c1, "read_labels_csv: malformed line: ", line);
        out.emplace_back(line.substr(0, c1), line.substr(c1 + 1, c2 - c1 - 1),
                         std::stoi(line.substr(c2 + 1)));
    }
    return out;
}

GenProfile read_profile_json(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "read_profile_json: cannot open ", path);
    json j = json::parse(f, nullptr, true, true);
    GenProfile p;
    p.seed = j.value("seed", p.seed);
    p.n_visits = j.value("n_visits", p.n_visits);
    if (j.contains("note_type_weights")) {
        p.note_type_weights = j.at("note_type_weights").get<std::vector<double>>();
    }
    p.len_log_mu = j.value("len_log_mu", p.len_log_mu);
    p.len_log_sigma = j.value("len_log_sigma", p.len_log_sigma);
    p.len_min = j.value("len_min", p.len_min);
    p.len_max = j.value("len_max", p.len_max);
    p.dep.gap_min = j.value("gap_min", p.dep.gap_min);
    p.dep.gap_max = j.value("gap_max", p.dep.gap_max);
    p.dep.facts_min = j.value("facts_min", p.dep.facts_min);
    p.dep.facts_max = j.value("facts_max", p.dep.facts_max);
    p.dep.recalls_per_fact = j.value("recalls_per_fact", p.dep.recalls_per_fact);
    p.dep.fact_vocab = j.value("fact_vocab", p.dep.fact_vocab);
    p.dep.value_len = j.value("value_len", p.dep.value_len);
    p.dep.gap_log_uniform = j.value("gap_log_uniform", p.dep.gap_log_uniform);
    p.n_attributes = j.value("n_attributes", p.n_attributes);
    p.attr_present_prob = j.value("attr_present_prob", p.attr_present_prob);
    p.attr_exclusive = j.value("attr_exclusive", p.attr_exclusive);
    p.emit_attribute_summary = j.value("emit_attribute_summary", p.emit_attribute_summary);
    p.summary_lines = j.value("summary_lines", p.summary_lines);
    return p;
}

void write_profile_json(const std::string& path, const GenProfile& p) {
    json j{{"seed", p.seed},
           {"n_visits", p.n_visits},
           {"len_log_mu", p.len_log_mu},
           {"len_log_sigma", p.len_log_sigma},
           {"len_min", p.len_min},
           {"len_max", p.len_max},
           {"gap_min", p.dep.gap_min},
           {"gap_max", p.dep.gap_max},
           {"facts_min", p.dep.facts_min},
           {"facts_max", p.dep.facts_max},
           {"recalls_per_fact", p.dep.recalls_per_fact},
           {"fact_vocab", p.dep.fact_vocab},
           {"value_len", p.dep.value_len},
           {"gap_log_uniform", p.dep.gap_log_uniform},
           {"n_attributes", p.n_attributes},
           {"attr_present_prob", p.attr_present_prob},
           {"attr_exclusive", p.attr_exclusive},
           {"emit_attribute_summary", p.emit_attribute_summary},
           {"summary_lines", p.summary_lines}};
    if (!p.note_type_weights.empty()) j["note_type_weights"] = p.note_type_weights;
    std::ofstream f(path);
    check(f.good(), "write_profile_json: cannot open ", path);
    f << j.dump(1) << "\n";
}

} // namespace ssmlm
