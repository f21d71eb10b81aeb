#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "conceptlm/concepts.hpp"
#include "conceptlm/rng.hpp"
#include "conceptlm/text.hpp"

namespace conceptlm {

enum class Objective : uint8_t { C2S, COR, ContGenqa, ContMc, ContTf, Ssm, Infill };

const char* to_string(Objective o);
Objective objective_from_string(std::string_view s);  // throws on unknown

// Reserved prefix token for an objective. GENQA and MC share <cont>: only
// one contrastive format is active per dataset, so the tag<->prefix mapping
// stays unambiguous within any corpus.
const char* prefix_token(Objective o);

enum class DistractorOrigin : uint8_t { Shuffle, Generator, None };

const char* to_string(DistractorOrigin o);
DistractorOrigin distractor_origin_from_string(std::string_view s);

struct Distractor {
    std::vector<std::string> tokens;
    DistractorOrigin origin = DistractorOrigin::Shuffle;
};

struct ExampleMeta {
    std::string source_id;
    int64_t index = 0;
    uint64_t seed = 0;
    DistractorOrigin distractor_origin = DistractorOrigin::None;
    // Pair-order record for contrastive examples: whether the real sentence
    // came first (GENQA/MC) or was the one shown (TF). Absent otherwise.
    std::optional<bool> real_first;
};

struct TrainingExample {
    Objective objective = Objective::C2S;
    std::string prefix;
    std::vector<std::string> source;
    std::vector<std::string> target;
    ExampleMeta meta;
};

enum class ContrastiveFormat : uint8_t { Genqa, Mc, Tf };

ContrastiveFormat contrastive_format_from_string(std::string_view s);
Objective objective_of(ContrastiveFormat f);

// Factories return nullopt when the sentence cannot support the objective.
// lem == nullptr turns concept lemmatization off for C2S.
std::optional<TrainingExample> make_c2s(const TaggedSentence& s, const ConceptSet& c,
                                        SeededRng& rng, const Lemmatizer* lem,
                                        size_t min_concepts = 2);
std::optional<TrainingExample> make_cor(const TaggedSentence& s, const ConceptSet& c,
                                        SeededRng& rng);
std::optional<TrainingExample> make_contrastive(const TaggedSentence& s, const Distractor& d,
                                                SeededRng& rng, ContrastiveFormat format);
std::optional<TrainingExample> make_ssm(const TaggedSentence& s, const ConceptSet& c,
                                        SeededRng& rng);
std::optional<TrainingExample> make_infill(const TaggedSentence& s, SeededRng& rng,
                                           double corrupt_rate = 0.15, double mean_span = 3.0);

// Structural re-validation applied on read-back: prefix matches the
// objective, source starts with it, target non-empty, origin consistent.
void validate_example(const TrainingExample& ex);

size_t write_jsonl(const std::vector<TrainingExample>& examples, const std::string& path);
std::vector<TrainingExample> read_jsonl(
    const std::string& path,
    const std::function<void(int64_t, const std::string&)>& on_error = nullptr);

struct CorruptOptions {
    std::vector<Objective> objectives = {Objective::C2S, Objective::COR, Objective::ContGenqa};
    ConceptClasses concept_classes = ConceptClasses::Both;
    ContrastiveFormat cont_format = ContrastiveFormat::Genqa;
    uint64_t seed = 0;
    size_t min_concepts = 2;       // C2S deduplicated-concept floor
    double corrupt_rate = 0.15;    // INFILL
    double mean_span = 3.0;        // INFILL
    bool lemmatize = true;         // C2S concept lists
    int workers = 1;
};

// Runs every requested objective over every sentence. Output order is
// (sentence input order, objective list order) and is byte-stable for any
// worker count: each example depends only on its own derived seed.
std::vector<TrainingExample> corrupt_corpus(const std::vector<TaggedSentence>& sentences,
                                            const CorruptOptions& options,
                                            const Lemmatizer* lem);

}  // namespace conceptlm
