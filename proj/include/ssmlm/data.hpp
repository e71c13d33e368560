#pragma once

#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ssmlm/train.hpp"

namespace ssmlm {

// Note categories, matching the event types of the source data.
enum class NoteType : int {
    Nursing = 0,
    Radiology,
    ECG,
    Physician,
    DischargeSummary,
    Echo,
    Respiratory,
    Nutrition,
    General,
    RehabServices,
    SocialWork,
    CaseManagement,
    Pharmacy,
    Consult,
    kCount
};

constexpr int kNumNoteTypes = int(NoteType::kCount);

const char* note_type_name(NoteType t); // display name, e.g. "Discharge summary"
std::optional<NoteType> note_type_from_name(std::string_view name);

struct Note {
    NoteType note_type;
    std::string chart_date; // ISO-8601
    std::string text;
};

struct VisitRecord {
    std::string visit_id;
    std::string patient_id;
    std::vector<Note> notes;
};

struct Document {
    std::string visit_id;
    std::string text;
    int64_t token_count = 0;
    bool truncated = false;
};

// Sortable key for an ISO-8601 timestamp (date or date+time).
int64_t parse_chart_date(std::string_view iso);

struct AggregateOptions {
    // The separator is "- - {NoteType} note  - -" with a double space before
    // the trailing dashes; single_space_variant collapses it.
    bool single_space_variant = false;
};

std::string note_separator(NoteType t, const AggregateOptions& opts = {});

// Notes stably sorted by chart date, each preceded by its separator line.
// Casing of the note text is preserved. Errors on an empty visit.
Document aggregate_visit(const VisitRecord& v, const AggregateOptions& opts = {});

// ---------------------------------------------------------------------------
// Tokenizers
// ---------------------------------------------------------------------------
struct Tokenizer {
    virtual ~Tokenizer() = default;
    virtual std::vector<int32_t> encode(std::string_view text) const = 0;
    virtual std::string decode(const std::vector<int32_t>& tokens) const = 0;
    virtual int64_t vocab_size() const = 0;
    virtual int32_t eod_id() const = 0;
};

// Default desk-scale tokenizer: raw bytes plus <eod> and <pad> specials.
struct ByteTokenizer final : Tokenizer {
    static constexpr int32_t kEod = 256;
    static constexpr int32_t kPad = 257;
    std::vector<int32_t> encode(std::string_view text) const override;
    std::string decode(const std::vector<int32_t>& tokens) const override;
    int64_t vocab_size() const override { return 258; }
    int32_t eod_id() const override { return kEod; }
};

// Loads a JSON array of token strings (index = id) and encodes by greedy
// longest match. The vocab must cover every single byte so encoding is total.
std::unique_ptr<Tokenizer> load_vocab_tokenizer(const std::string& path);

// ---------------------------------------------------------------------------
// Document-level operations
// ---------------------------------------------------------------------------
constexpr int64_t kDefaultMaxTokens = 16384;

// Keeps the first max_tokens tokens; sets the truncation flag. Idempotent.
Document truncate_document(const Document& doc, const Tokenizer& tok,
                           int64_t max_tokens = kDefaultMaxTokens);

struct CorpusStats {
    int64_t doc_count = 0;
    double mean_tokens = 0;
    int64_t median_tokens = 0;
    int64_t p99_tokens = 0; // nearest-rank
    int64_t max_tokens = 0;
    int64_t truncated_docs = 0;
    std::vector<int64_t> note_type_counts = std::vector<int64_t>(kNumNoteTypes, 0);
};

CorpusStats corpus_stats(const std::vector<Document>& docs,
                         const std::vector<VisitRecord>* visits = nullptr);
void write_stats_csv(const std::string& path, const CorpusStats& s);

struct SplitResult {
    std::vector<Document> train;
    std::vector<Document> heldout;
};
SplitResult split_heldout(const std::vector<Document>& docs,
                          const std::vector<std::string>& heldout_ids);

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------
// Newline-delimited records, one JSON object per note:
// {"visit_id","patient_id","note_type","chart_date","text"}
std::vector<VisitRecord> read_notes_jsonl(const std::string& path);
void write_notes_jsonl(const std::string& path, const std::vector<VisitRecord>& visits);

PackedCorpus pack_documents(const std::vector<Document>& docs, const Tokenizer& tok);

} // namespace ssmlm
