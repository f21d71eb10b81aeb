#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "conceptlm/rng.hpp"
#include "conceptlm/text.hpp"

namespace conceptlm {

enum class ConceptCategory : uint8_t { Verb, Noun };

enum class ConceptClasses : uint8_t { Both, NounsOnly, VerbsOnly };

struct ConceptOccurrence {
    std::string token;
    int position = 0;  // index into the sentence tokens
    ConceptCategory category = ConceptCategory::Noun;
};

// Ordered concept occurrences of one sentence. PROPN counts as a noun
// concept. Orderings follow sentence position ascending.
struct ConceptSet {
    std::vector<ConceptOccurrence> verbs;
    std::vector<ConceptOccurrence> nouns;

    size_t size() const { return verbs.size() + nouns.size(); }
    bool empty() const { return verbs.empty() && nouns.empty(); }
};

ConceptSet extract_concepts(const TaggedSentence& s, ConceptClasses classes = ConceptClasses::Both);

struct ConceptPermutation {
    std::vector<std::string> tokens;  // permuted sentence
    std::vector<int> verb_perm;       // slot j received the tokens of verb occurrence verb_perm[j]
    std::vector<int> noun_perm;
};

// Reorders concepts within their grammatical category, all other tokens
// fixed. The drawn category permutations are resampled until the permuted
// sentence differs from the original; nullopt when no differing arrangement
// exists (both categories below two occurrences, or all candidates collide
// on duplicate tokens).
std::optional<ConceptPermutation> concept_permute(const TaggedSentence& s, const ConceptSet& c,
                                                  SeededRng& rng);

// Rule-based suffix stripping backed by small data files: irregular form
// maps, a plural-exception list, and known-lemma lists used to pick between
// bare-stem / restored-e / undoubled candidates.
class Lemmatizer {
public:
    // Loads verb_irregular.tsv, noun_irregular.tsv, noun_exceptions.txt,
    // lemma_verbs.txt and lemma_nouns.txt from dir.
    static Lemmatizer load(const std::string& dir);

    std::string lemmatize(const std::string& token, ConceptCategory category) const;

private:
    std::unordered_map<std::string, std::string> verb_irregular_;
    std::unordered_map<std::string, std::string> noun_irregular_;
    std::unordered_set<std::string> noun_exceptions_;
    std::unordered_set<std::string> verb_lemmas_;
    std::unordered_set<std::string> noun_lemmas_;

    std::string lemmatize_verb(const std::string& word) const;
    std::string lemmatize_noun(const std::string& word) const;
};

}  // namespace conceptlm
