#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "conceptlm/model.hpp"
#include "conceptlm/objectives.hpp"
#include "conceptlm/text.hpp"
#include "conceptlm/vocab.hpp"

namespace conceptlm {

struct EvalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

bool exact_match(const std::vector<std::string>& hyp, const std::vector<std::string>& ref);

// Multiset precision/recall F1. Both empty scores 1, exactly one empty 0.
double token_f1(const std::vector<std::string>& hyp, const std::vector<std::string>& ref);

// Clipped n-gram precisions for orders 1..min(4, |hyp|), geometric mean,
// brevity penalty against the closest reference length (ties to the
// shorter). A zero clipped count enters the mean as 1e-9. Empty hypothesis
// scores 0; empty reference list throws.
double bleu4(const std::vector<std::string>& hyp,
             const std::vector<std::vector<std::string>>& refs);

// Greedy decode scored against the gold target, generative objectives only.
struct GenerationScores {
    int64_t count = 0;
    double exact_match = 0.0;
    double token_f1 = 0.0;
    double bleu4 = 0.0;
};

struct GenerationEval {
    GenerationScores overall;
    std::map<std::string, GenerationScores> by_objective;
    int64_t skipped = 0;  // contrastive examples and over-length sources
};

GenerationEval eval_generation(const Model& model, const std::vector<TrainingExample>& examples,
                               const Vocabulary& vocab);

// The real sentence and the distractor are each scored as a decoder target
// by mean per-token log-likelihood under teacher forcing, averaged over both
// presentation orders of the pair inside the source, so the outcome cannot
// depend on which candidate happened to come first. Higher score wins; ties
// count against the model.
struct DiscriminatorResult {
    double accuracy = 0.0;
    int64_t evaluated = 0;
    int64_t skipped = 0;               // non-GENQA, malformed, or over-length
    std::vector<uint8_t> correct;      // per evaluated example, input order
};

DiscriminatorResult eval_discriminator(const Model& model,
                                       const std::vector<TrainingExample>& examples,
                                       const Vocabulary& vocab);

struct WorldTriple {
    int subject = 0;  // index into nouns
    int verb = 0;     // index into verbs
    int object = 0;   // index into nouns, never equal to subject
};

// Relational toy corpus of pseudo-word nouns and verbs realized through the
// single template "The S V on the O .". Held-out triples reuse only words
// that the train split already covers and never repeat a train triple.
struct SyntheticWorld {
    std::vector<std::string> nouns;
    std::vector<std::string> verbs;
    std::vector<WorldTriple> train;
    std::vector<WorldTriple> held_out;
    std::vector<TaggedSentence> train_sentences;
    std::vector<TaggedSentence> held_out_sentences;
};

// Deterministic in all arguments; word lists depend only on the pool sizes.
// Throws when the request exceeds n_nouns * n_verbs * (n_nouns - 1) distinct
// triples or a pool is too small.
SyntheticWorld build_synthetic_world(int n_nouns, int n_verbs, int n_triples, uint64_t seed,
                                     double holdout_fraction = 0.2);

// One gold-tag JSONL line per sentence, readable by the ingest side.
void write_world_jsonl(const std::vector<TaggedSentence>& sentences, const std::string& path);

// Concept-order recovery: permute each sentence's concepts, decode greedily
// from a correction prompt, demand exact reconstruction. The corruption of a
// sentence is fixed by (seed, source_id, index).
struct ProbeResult {
    double accuracy = 0.0;
    int64_t evaluated = 0;
    int64_t skipped = 0;  // no differing concept arrangement exists
};

ProbeResult cor_probe(const Model& model, const std::vector<TaggedSentence>& sentences,
                      const Vocabulary& vocab, uint64_t seed);

// Held-out split accuracy.
double eval_cor_probe(const Model& model, const SyntheticWorld& world, const Vocabulary& vocab,
                      uint64_t seed);

struct EvalReport {
    std::optional<GenerationEval> generation;
    std::optional<DiscriminatorResult> discriminator;
    std::optional<ProbeResult> probe_train;
    std::optional<ProbeResult> probe_held_out;
};

std::string report_to_json(const EvalReport& report);

}  // namespace conceptlm
