#include "conceptlm/concepts.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "conceptlm/errors.hpp"

namespace conceptlm {

ConceptSet extract_concepts(const TaggedSentence& s, ConceptClasses classes) {
    ConceptSet out;
    const bool want_verbs = classes != ConceptClasses::NounsOnly;
    const bool want_nouns = classes != ConceptClasses::VerbsOnly;
    for (size_t i = 0; i < s.tokens.size(); ++i) {
        switch (s.tags[i]) {
            case PosTag::Verb:
                if (want_verbs) out.verbs.push_back({s.tokens[i], static_cast<int>(i), ConceptCategory::Verb});
                break;
            case PosTag::Noun:
            case PosTag::Propn:
                if (want_nouns) out.nouns.push_back({s.tokens[i], static_cast<int>(i), ConceptCategory::Noun});
                break;
            case PosTag::Other:
                break;
        }
    }
    return out;
}

std::optional<ConceptPermutation> concept_permute(const TaggedSentence& s, const ConceptSet& c,
                                                  SeededRng& rng) {
    if (c.verbs.size() < 2 && c.nouns.size() < 2) return std::nullopt;

    // Resample both category permutations until the token sequence changes.
    // Bounded so sentences whose concepts are all duplicates terminate.
    constexpr int kMaxTries = 64;
    for (int attempt = 0; attempt < kMaxTries; ++attempt) {
        ConceptPermutation result;
        result.tokens = s.tokens;
        result.verb_perm = rng.permutation(c.verbs.size());
        result.noun_perm = rng.permutation(c.nouns.size());
        for (size_t j = 0; j < c.verbs.size(); ++j)
            result.tokens[c.verbs[j].position] = c.verbs[result.verb_perm[j]].token;
        for (size_t j = 0; j < c.nouns.size(); ++j)
            result.tokens[c.nouns[j].position] = c.nouns[result.noun_perm[j]].token;
        if (result.tokens != s.tokens) return result;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Lemmatizer

namespace {

std::string lower(const std::string& w) {
    std::string out = w;
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    return out;
}

bool is_capitalized(const std::string& w) {
    return !w.empty() && std::isupper(static_cast<unsigned char>(w[0]));
}

std::string match_case(std::string lemma, const std::string& original) {
    if (is_capitalized(original) && !lemma.empty())
        lemma[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(lemma[0])));
    return lemma;
}

bool ends_with(const std::string& w, const char* suffix) {
    const size_t n = std::char_traits<char>::length(suffix);
    return w.size() >= n && w.compare(w.size() - n, n, suffix) == 0;
}

bool is_vowel(char ch) {
    return ch == 'a' || ch == 'e' || ch == 'i' || ch == 'o' || ch == 'u';
}

// Stem ends in a sibilant cluster that takes -es in the plural / 3sg.
bool sibilant_stem(const std::string& stem) {
    return ends_with(stem, "s") || ends_with(stem, "x") || ends_with(stem, "z") ||
           ends_with(stem, "ch") || ends_with(stem, "sh");
}

bool doubled_final_consonant(const std::string& stem) {
    if (stem.size() < 3) return false;
    char a = stem[stem.size() - 1], b = stem[stem.size() - 2];
    return a == b && !is_vowel(a) && std::isalpha(static_cast<unsigned char>(a));
}

void read_map(const std::string& path, std::unordered_map<std::string, std::string>& out) {
    std::ifstream in(path);
    if (!in) throw ConfigurationError("cannot open lemma data file: " + path);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size())
            throw ConfigurationError(path + " line " + std::to_string(lineno) + ": expected form<TAB>lemma");
        out[line.substr(0, tab)] = line.substr(tab + 1);
    }
}

void read_set(const std::string& path, std::unordered_set<std::string>& out) {
    std::ifstream in(path);
    if (!in) throw ConfigurationError("cannot open lemma data file: " + path);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        out.insert(line);
    }
}

}  // namespace

Lemmatizer Lemmatizer::load(const std::string& dir) {
    Lemmatizer lem;
    read_map(dir + "/verb_irregular.tsv", lem.verb_irregular_);
    read_map(dir + "/noun_irregular.tsv", lem.noun_irregular_);
    read_set(dir + "/noun_exceptions.txt", lem.noun_exceptions_);
    read_set(dir + "/lemma_verbs.txt", lem.verb_lemmas_);
    read_set(dir + "/lemma_nouns.txt", lem.noun_lemmas_);
    return lem;
}

std::string Lemmatizer::lemmatize(const std::string& token, ConceptCategory category) const {
    const std::string lemma = category == ConceptCategory::Verb ? lemmatize_verb(lower(token))
                                                                : lemmatize_noun(lower(token));
    return match_case(lemma, token);
}

// Candidate stems for an -ed/-ing form: bare strip, undoubled final
// consonant, restored silent e. The known-lemma list decides which reading
// is right ("filled" -> fill, "stopped" -> stop, "ignored" -> ignore);
// without a hit the bare strip stands.
std::string Lemmatizer::lemmatize_verb(const std::string& word) const {
    if (auto it = verb_irregular_.find(word); it != verb_irregular_.end()) return it->second;
    if (verb_lemmas_.count(word)) return word;

    for (const char* suffix : {"ed", "ing"}) {
        const size_t n = std::char_traits<char>::length(suffix);
        if (!ends_with(word, suffix) || word.size() < n + 2) continue;
        const std::string stem = word.substr(0, word.size() - n);
        if (verb_lemmas_.count(stem)) return stem;
        if (doubled_final_consonant(stem)) {
            const std::string undoubled = stem.substr(0, stem.size() - 1);
            if (verb_lemmas_.count(undoubled)) return undoubled;
        }
        if (verb_lemmas_.count(stem + "e")) return stem + "e";
        if (n == 2 && ends_with(word, "ied") && word.size() > 4)
            return word.substr(0, word.size() - 3) + "y";  // carried -> carry
        return stem;
    }

    if (ends_with(word, "ies") && word.size() > 4) {
        return word.substr(0, word.size() - 3) + "y";  // carries -> carry
    }
    if (ends_with(word, "es") && word.size() > 3) {
        const std::string stem = word.substr(0, word.size() - 2);
        const std::string s_stem = word.substr(0, word.size() - 1);
        if (verb_lemmas_.count(s_stem)) return s_stem;  // writes -> write
        if (verb_lemmas_.count(stem)) return stem;      // goes -> go
        if (sibilant_stem(stem)) return stem;           // watches -> watch
        return s_stem;
    }
    if (ends_with(word, "s") && !ends_with(word, "ss") && word.size() > 2)
        return word.substr(0, word.size() - 1);  // grows -> grow
    return word;
}

std::string Lemmatizer::lemmatize_noun(const std::string& word) const {
    if (auto it = noun_irregular_.find(word); it != noun_irregular_.end()) return it->second;
    if (noun_exceptions_.count(word)) return word;
    if (noun_lemmas_.count(word)) return word;

    if (ends_with(word, "ies") && word.size() > 4) {
        const std::string s_stem = word.substr(0, word.size() - 1);
        if (noun_lemmas_.count(s_stem)) return s_stem;  // movies -> movie
        return word.substr(0, word.size() - 3) + "y";   // cities -> city
    }
    if (ends_with(word, "es") && word.size() > 3) {
        const std::string stem = word.substr(0, word.size() - 2);
        const std::string s_stem = word.substr(0, word.size() - 1);
        if (noun_lemmas_.count(s_stem)) return s_stem;  // apples -> apple
        if (noun_lemmas_.count(stem)) return stem;      // heroes -> hero
        if (sibilant_stem(stem)) return stem;           // boxes -> box
        return s_stem;
    }
    if (ends_with(word, "s") && !ends_with(word, "ss") && word.size() > 2)
        return word.substr(0, word.size() - 1);  // prosecutors -> prosecutor
    return word;
}

}  // namespace conceptlm
