#include "conceptlm/tagger.hpp"

#include <cctype>
#include <fstream>

namespace conceptlm {

namespace {

std::string to_lower(const std::string& s) {
    std::string out = s;
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace

LexiconTagger LexiconTagger::load(const std::string& lexicon_path) {
    std::ifstream in(lexicon_path);
    if (!in) throw ConfigurationError("cannot open lexicon file: " + lexicon_path);
    LexiconTagger tagger;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw ConfigurationError("lexicon line " + std::to_string(lineno) + ": expected token<TAB>tag");
        tagger.table_[line.substr(0, tab)] = pos_tag_from_string(line.substr(tab + 1));
    }
    if (tagger.table_.empty()) throw ConfigurationError("empty lexicon file: " + lexicon_path);
    return tagger;
}

std::vector<PosTag> LexiconTagger::tag(const std::vector<std::string>& tokens) const {
    std::vector<PosTag> tags;
    tags.reserve(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) {
        const std::string& t = tokens[i];
        auto it = table_.find(t);
        if (it == table_.end()) it = table_.find(to_lower(t));
        if (it != table_.end()) {
            tags.push_back(it->second);
            continue;
        }
        bool capitalized = !t.empty() && std::isupper(static_cast<unsigned char>(t[0]));
        tags.push_back(capitalized && i > 0 ? PosTag::Propn : PosTag::Other);
    }
    return tags;
}

std::vector<PosTag> GoldTagger::tag(const std::vector<std::string>& tokens) const {
    if (tokens.size() != tags_.size())
        throw std::runtime_error("gold tags do not match token count");
    return tags_;
}

TaggedSentence tag_record(const IngestRecord& rec, const Tagger& tagger) {
    TaggedSentence out;
    if (rec.has_gold) {
        out.tokens = rec.gold_tokens;
        out.tags = rec.gold_tags;
    } else {
        out.tokens = tokenize(rec.sentence.text);
        out.tags = tagger.tag(out.tokens);
    }
    out.raw = rec.sentence;
    return out;
}

}  // namespace conceptlm
