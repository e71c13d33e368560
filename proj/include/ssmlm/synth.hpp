#pragma once

#include <string>
#include <vector>

#include "ssmlm/data.hpp"

namespace ssmlm {

// Long-range dependency machinery: each document plants named code values
// early ("registry note: code alpha reads X7KQ2MRV.") and restates them much
// later under the same cue ("recall check: code alpha reads ..."), so
// predicting the value at the recall site requires context reaching back
// past the gap.
struct DependencySpec {
    int64_t gap_min = 1024;
    int64_t gap_max = 12288;
    int64_t facts_min = 2; // facts planted per document
    int64_t facts_max = 5;
    int64_t recalls_per_fact = 1;
    int64_t fact_vocab = 4096; // distinct code values corpus-wide
    int64_t value_len = 8;     // chars per value
    // sample gaps log-uniformly instead of uniformly (denser short gaps)
    bool gap_log_uniform = false;
};

struct GenProfile {
    uint64_t seed = 0;
    int64_t n_visits = 1000;
    // per-note-type mixture weights; empty -> event-count proportions of the
    // source data distribution
    std::vector<double> note_type_weights;
    // visit token totals ~ lognormal (long-tailed), clamped to [len_min, len_max]
    double len_log_mu = 8.392; // calibrated so aggregated documents land on the published mean
    double len_log_sigma = 0.35;
    int64_t len_min = 512;
    int64_t len_max = 20000;
    DependencySpec dep;
    // binary attributes for classification tasks (cohort criteria / codes)
    int64_t n_attributes = 13;
    double attr_present_prob = 0.3;
    bool attr_exclusive = false; // at most one attribute per visit
    bool emit_attribute_summary = true;
    int64_t summary_lines = 4; // attribute restatements at the end of a visit

    void validate() const; // errors when no document can host a recall
};

struct FactPlant {
    std::string name;
    std::string value;
    int64_t plant_pos = 0;
    std::vector<int64_t> recall_gaps;
};

struct VisitMeta {
    std::string visit_id;
    std::vector<uint8_t> attrs;
    std::vector<FactPlant> facts;
    int64_t target_len = 0;
};

struct SynthCorpus {
    std::vector<VisitRecord> visits;
    std::vector<VisitMeta> meta;
};

// Deterministic in (profile.seed, visit index).
SynthCorpus generate(const GenProfile& profile);

// The 13 trial-eligibility criterion slugs used for the cohort-style task.
const std::vector<std::string>& cohort_criterion_names();
// Generic code names for the multi-label (ICD-style) task.
std::vector<std::string> code_attribute_names(int64_t n);

std::vector<std::string> attribute_names_for(const GenProfile& profile);

// marker sentence embedded in a visit when attribute `name` holds
std::string attribute_marker_sentence(const std::string& name);

struct FewShotSplit {
    std::vector<std::string> train_ids, dev_ids, test_ids;
    int64_t shots = 0;
};

struct LabeledSet {
    std::vector<std::string> attr_names;
    std::vector<std::string> visit_ids;
    std::vector<std::vector<uint8_t>> gold; // [visit][attr]
    FewShotSplit split;
};

// Derives gold labels from generation metadata and builds a few-shot split
// with exactly `shots` positive training documents per label. Only about
// eval_fraction of the corpus enters dev/test; the rest stays unassigned so
// it can serve as the pretraining pool (task visits are excluded from
// pretraining upstream).
LabeledSet label_tasks(const SynthCorpus& corpus, int64_t k_criteria, int64_t shots,
                       uint64_t seed, double eval_fraction = 0.3);

void write_meta_json(const std::string& path, const SynthCorpus& corpus,
                     const std::vector<std::string>& attr_names);
void write_labels_csv(const std::string& path, const LabeledSet& set);
void write_split_json(const std::string& path, const FewShotSplit& split);
FewShotSplit read_split_json(const std::string& path);

// gold labels as (doc_id, task_id) -> label
std::vector<std::tuple<std::string, std::string, int>> read_labels_csv(const std::string& path);

GenProfile read_profile_json(const std::string& path);
void write_profile_json(const std::string& path, const GenProfile& profile);

} // namespace ssmlm
