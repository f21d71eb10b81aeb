#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "conceptlm/errors.hpp"
#include "conceptlm/text.hpp"

namespace conceptlm {

class Tagger {
public:
    virtual ~Tagger() = default;
    virtual std::vector<PosTag> tag(const std::vector<std::string>& tokens) const = 0;
};

// Word -> most-frequent-tag table loaded from a tab-separated data file.
// Lookup tries the exact surface form, then lowercase. Unknown capitalized
// tokens in non-initial position become PROPN, all other unknowns OTHER.
class LexiconTagger : public Tagger {
public:
    static LexiconTagger load(const std::string& lexicon_path);

    std::vector<PosTag> tag(const std::vector<std::string>& tokens) const override;

    size_t lexicon_size() const { return table_.size(); }

private:
    std::unordered_map<std::string, PosTag> table_;
};

// Pass-through for corpora that carry their own tags (synthetic worlds).
class GoldTagger : public Tagger {
public:
    explicit GoldTagger(std::vector<PosTag> tags) : tags_(std::move(tags)) {}
    std::vector<PosTag> tag(const std::vector<std::string>& tokens) const override;

private:
    std::vector<PosTag> tags_;
};

// Tags one ingested record: gold tags when present, the tagger otherwise.
TaggedSentence tag_record(const IngestRecord& rec, const Tagger& tagger);

}  // namespace conceptlm
