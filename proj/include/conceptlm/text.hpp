#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace conceptlm {

enum class PosTag : uint8_t { Noun, Propn, Verb, Other };

const char* to_string(PosTag t);
PosTag pos_tag_from_string(std::string_view s);  // throws on unknown tag

struct RawSentence {
    std::string text;       // non-empty after trimming, no newlines
    std::string source_id;  // document identifier
    int64_t index = 0;      // sentence ordinal within the document stream
};

struct TaggedSentence {
    std::vector<std::string> tokens;
    std::vector<PosTag> tags;  // one per token
    RawSentence raw;

    size_t size() const { return tokens.size(); }
};

// Sentence segmentation: split at '.', '!' or '?' followed by whitespace and
// an uppercase letter (or end of text). A small abbreviation guard list
// ("Mr.", "Dr.", "U.S.", "e.g.", "i.e.") suppresses splits.
std::vector<std::string> segment_sentences(const std::string& document);

// Whitespace split, then punctuation . , ! ? ; : ' " ( ) detached as single
// tokens; possessive 's stays one token. Casing preserved.
std::vector<std::string> tokenize(const std::string& text);

// Space join with closing punctuation and 's attached to the previous token.
// Recovers the original text up to whitespace normalization.
std::string detokenize(const std::vector<std::string>& tokens);

struct IngestOptions {
    int min_tokens = 5;   // length filters applied by the pipeline, not here
    int max_tokens = 64;
};

enum class IngestFormat { PlainText, Jsonl };

struct IngestError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A JSONL line may carry pre-tokenized text with gold tags.
struct IngestRecord {
    RawSentence sentence;
    std::vector<std::string> gold_tokens;  // empty unless provided
    std::vector<PosTag> gold_tags;        // parallel to gold_tokens
    bool has_gold = false;
};

// Reads a corpus file and emits sentences in document order. Plain text is
// one document per file or documents separated by blank lines; JSONL is one
// object per line with "text" and optional "tokens"/"tags". Malformed JSONL
// lines are reported through on_error (line number + message) and skipped.
std::vector<IngestRecord> ingest(
    const std::string& path, IngestFormat format,
    const std::function<void(int64_t line, const std::string& message)>& on_error = {});

}  // namespace conceptlm
