#include "conceptlm/objectives.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "conceptlm/vocab.hpp"

namespace conceptlm {

using json = nlohmann::json;

const char* to_string(Objective o) {
    switch (o) {
        case Objective::C2S: return "C2S";
        case Objective::COR: return "COR";
        case Objective::ContGenqa: return "CONT_GENQA";
        case Objective::ContMc: return "CONT_MC";
        case Objective::ContTf: return "CONT_TF";
        case Objective::Ssm: return "SSM";
        case Objective::Infill: return "INFILL";
    }
    return "C2S";
}

Objective objective_from_string(std::string_view s) {
    if (s == "C2S") return Objective::C2S;
    if (s == "COR") return Objective::COR;
    if (s == "CONT_GENQA") return Objective::ContGenqa;
    if (s == "CONT_MC") return Objective::ContMc;
    if (s == "CONT_TF") return Objective::ContTf;
    if (s == "SSM") return Objective::Ssm;
    if (s == "INFILL") return Objective::Infill;
    throw std::runtime_error("unknown objective: " + std::string(s));
}

const char* prefix_token(Objective o) {
    switch (o) {
        case Objective::C2S: return "<c2s>";
        case Objective::COR: return "<cor>";
        case Objective::ContGenqa: return "<cont>";
        case Objective::ContMc: return "<cont>";
        case Objective::ContTf: return "<tf>";
        case Objective::Ssm: return "<ssm>";
        case Objective::Infill: return "<infill>";
    }
    return "<c2s>";
}

const char* to_string(DistractorOrigin o) {
    switch (o) {
        case DistractorOrigin::Shuffle: return "shuffle";
        case DistractorOrigin::Generator: return "generator";
        case DistractorOrigin::None: return "none";
    }
    return "none";
}

DistractorOrigin distractor_origin_from_string(std::string_view s) {
    if (s == "shuffle") return DistractorOrigin::Shuffle;
    if (s == "generator") return DistractorOrigin::Generator;
    if (s == "none") return DistractorOrigin::None;
    throw std::runtime_error("unknown distractor origin: " + std::string(s));
}

ContrastiveFormat contrastive_format_from_string(std::string_view s) {
    if (s == "genqa") return ContrastiveFormat::Genqa;
    if (s == "mc") return ContrastiveFormat::Mc;
    if (s == "tf") return ContrastiveFormat::Tf;
    throw std::runtime_error("unknown contrastive format: " + std::string(s));
}

Objective objective_of(ContrastiveFormat f) {
    switch (f) {
        case ContrastiveFormat::Genqa: return Objective::ContGenqa;
        case ContrastiveFormat::Mc: return Objective::ContMc;
        case ContrastiveFormat::Tf: return Objective::ContTf;
    }
    return Objective::ContGenqa;
}

namespace {

ExampleMeta meta_of(const TaggedSentence& s) {
    ExampleMeta m;
    m.source_id = s.raw.source_id;
    m.index = s.raw.index;
    return m;
}

// Concept occurrences of both categories in sentence order.
std::vector<ConceptOccurrence> occurrences_in_order(const ConceptSet& c) {
    std::vector<ConceptOccurrence> all;
    all.reserve(c.size());
    all.insert(all.end(), c.verbs.begin(), c.verbs.end());
    all.insert(all.end(), c.nouns.begin(), c.nouns.end());
    std::sort(all.begin(), all.end(),
              [](const ConceptOccurrence& a, const ConceptOccurrence& b) { return a.position < b.position; });
    return all;
}

}  // namespace

std::optional<TrainingExample> make_c2s(const TaggedSentence& s, const ConceptSet& c,
                                        SeededRng& rng, const Lemmatizer* lem,
                                        size_t min_concepts) {
    // Lemmatize and casefold (proper nouns keep their form), then
    // deduplicate keeping first occurrences.
    std::vector<std::string> concepts;
    for (const auto& occ : occurrences_in_order(c)) {
        std::string tok = occ.token;
        if (lem) {
            tok = lem->lemmatize(tok, occ.category);
            if (s.tags[static_cast<size_t>(occ.position)] != PosTag::Propn)
                std::transform(tok.begin(), tok.end(), tok.begin(), [](unsigned char ch) {
                    return static_cast<char>(std::tolower(ch));
                });
        }
        if (std::find(concepts.begin(), concepts.end(), tok) == concepts.end())
            concepts.push_back(std::move(tok));
    }
    if (concepts.size() < min_concepts || concepts.size() < 2) return std::nullopt;

    TrainingExample ex;
    ex.objective = Objective::C2S;
    ex.prefix = prefix_token(ex.objective);
    ex.source.push_back(ex.prefix);
    for (auto& tok : permute(concepts, rng)) ex.source.push_back(std::move(tok));
    ex.target = s.tokens;
    ex.meta = meta_of(s);
    return ex;
}

std::optional<TrainingExample> make_cor(const TaggedSentence& s, const ConceptSet& c,
                                        SeededRng& rng) {
    auto perm = concept_permute(s, c, rng);
    if (!perm) return std::nullopt;

    TrainingExample ex;
    ex.objective = Objective::COR;
    ex.prefix = prefix_token(ex.objective);
    ex.source.push_back(ex.prefix);
    ex.source.insert(ex.source.end(), perm->tokens.begin(), perm->tokens.end());
    ex.target = s.tokens;
    ex.meta = meta_of(s);
    return ex;
}

std::optional<TrainingExample> make_contrastive(const TaggedSentence& s, const Distractor& d,
                                                SeededRng& rng, ContrastiveFormat format) {
    if (d.tokens == s.tokens || d.tokens.empty()) return std::nullopt;

    TrainingExample ex;
    ex.objective = objective_of(format);
    ex.prefix = prefix_token(ex.objective);
    ex.meta = meta_of(s);
    ex.meta.distractor_origin = d.origin;

    const bool real_first = rng.next_bool();
    ex.meta.real_first = real_first;
    const auto& first = real_first ? s.tokens : d.tokens;
    const auto& second = real_first ? d.tokens : s.tokens;

    switch (format) {
        case ContrastiveFormat::Genqa:
            ex.source.push_back(ex.prefix);
            ex.source.insert(ex.source.end(), first.begin(), first.end());
            ex.source.push_back("<sep>");
            ex.source.insert(ex.source.end(), second.begin(), second.end());
            ex.target = s.tokens;
            break;
        case ContrastiveFormat::Mc:
            ex.source.push_back(ex.prefix);
            ex.source.push_back("1:");
            ex.source.insert(ex.source.end(), first.begin(), first.end());
            ex.source.push_back("<sep>");
            ex.source.push_back("2:");
            ex.source.insert(ex.source.end(), second.begin(), second.end());
            ex.target = {real_first ? "1" : "2"};
            break;
        case ContrastiveFormat::Tf: {
            // real_first doubles as the coin for which sentence is shown.
            const auto& shown = real_first ? s.tokens : d.tokens;
            ex.source.push_back(ex.prefix);
            ex.source.insert(ex.source.end(), shown.begin(), shown.end());
            ex.target = {real_first ? "true" : "false"};
            break;
        }
    }
    return ex;
}

std::optional<TrainingExample> make_ssm(const TaggedSentence& s, const ConceptSet& c,
                                        SeededRng& /*rng*/) {
    auto occs = occurrences_in_order(c);
    if (occs.empty()) return std::nullopt;

    TrainingExample ex;
    ex.objective = Objective::Ssm;
    ex.prefix = prefix_token(ex.objective);
    ex.source.push_back(ex.prefix);
    ex.target.clear();
    size_t next_occ = 0;
    for (size_t i = 0; i < s.tokens.size(); ++i) {
        if (next_occ < occs.size() && occs[next_occ].position == static_cast<int>(i)) {
            ex.source.push_back(Vocabulary::sentinel(static_cast<int>(next_occ)));
            ex.target.push_back(Vocabulary::sentinel(static_cast<int>(next_occ)));
            ex.target.push_back(s.tokens[i]);
            ++next_occ;
        } else {
            ex.source.push_back(s.tokens[i]);
        }
    }
    ex.meta = meta_of(s);
    return ex;
}

std::optional<TrainingExample> make_infill(const TaggedSentence& s, SeededRng& rng,
                                           double corrupt_rate, double mean_span) {
    const size_t n = s.tokens.size();
    if (n < 2) return std::nullopt;
    if (corrupt_rate <= 0.0) return std::nullopt;

    // Stochastic rounding keeps the expected masked count at rate*n exactly.
    size_t masked = static_cast<size_t>(std::floor(corrupt_rate * static_cast<double>(n) + rng.next_real()));
    masked = std::clamp<size_t>(masked, 1, n);

    size_t spans = std::max<size_t>(
        1, static_cast<size_t>(std::llround(static_cast<double>(masked) / std::max(mean_span, 1.0))));
    const size_t unmasked = n - masked;
    spans = std::min(spans, unmasked + 1);  // non-adjacent spans need a gap each

    // Span lengths: as even as possible, order shuffled.
    std::vector<size_t> lengths(spans, masked / spans);
    for (size_t i = 0; i < masked % spans; ++i) ++lengths[i];
    rng.shuffle(lengths);

    // Choose which of the unmasked+1 gap slots hold a span.
    std::vector<size_t> slots(unmasked + 1);
    std::iota(slots.begin(), slots.end(), size_t{0});
    rng.shuffle(slots);
    slots.resize(spans);
    std::sort(slots.begin(), slots.end());

    TrainingExample ex;
    ex.objective = Objective::Infill;
    ex.prefix = prefix_token(ex.objective);
    ex.source.push_back(ex.prefix);
    size_t pos = 0, span_idx = 0;
    for (size_t slot = 0; slot <= unmasked; ++slot) {
        if (span_idx < spans && slots[span_idx] == slot) {
            const std::string sentinel = Vocabulary::sentinel(static_cast<int>(span_idx));
            ex.source.push_back(sentinel);
            ex.target.push_back(sentinel);
            for (size_t k = 0; k < lengths[span_idx]; ++k) ex.target.push_back(s.tokens[pos++]);
            ++span_idx;
        }
        if (slot < unmasked) ex.source.push_back(s.tokens[pos++]);
    }
    ex.meta = meta_of(s);
    return ex;
}

void validate_example(const TrainingExample& ex) {
    if (ex.prefix != prefix_token(ex.objective))
        throw std::runtime_error(std::string("prefix does not match objective ") + to_string(ex.objective));
    if (ex.source.empty() || ex.source.front() != ex.prefix)
        throw std::runtime_error("source does not begin with prefix " + ex.prefix);
    if (ex.target.empty()) throw std::runtime_error("empty target");
    const bool contrastive = ex.objective == Objective::ContGenqa || ex.objective == Objective::ContMc ||
                             ex.objective == Objective::ContTf;
    if (contrastive && ex.meta.distractor_origin == DistractorOrigin::None)
        throw std::runtime_error("contrastive example lacks a distractor origin");
    if (!contrastive && ex.meta.distractor_origin != DistractorOrigin::None)
        throw std::runtime_error("non-contrastive example carries a distractor origin");
}

size_t write_jsonl(const std::vector<TrainingExample>& examples, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const auto& ex : examples) {
        json meta{{"source_id", ex.meta.source_id},
                  {"index", ex.meta.index},
                  {"seed", ex.meta.seed},
                  {"distractor_origin", to_string(ex.meta.distractor_origin)}};
        if (ex.meta.real_first.has_value()) meta["real_first"] = *ex.meta.real_first;
        json j{{"objective", to_string(ex.objective)},
               {"prefix", ex.prefix},
               {"source", ex.source},
               {"target", ex.target},
               {"meta", std::move(meta)}};
        out << j.dump() << '\n';
    }
    out.flush();
    if (!out) throw std::runtime_error("write failure: " + path);
    return examples.size();
}

std::vector<TrainingExample> read_jsonl(
    const std::string& path, const std::function<void(int64_t, const std::string&)>& on_error) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::vector<TrainingExample> out;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            TrainingExample ex;
            ex.objective = objective_from_string(j.at("objective").get<std::string>());
            ex.prefix = j.at("prefix").get<std::string>();
            ex.source = j.at("source").get<std::vector<std::string>>();
            ex.target = j.at("target").get<std::vector<std::string>>();
            const json& m = j.at("meta");
            ex.meta.source_id = m.at("source_id").get<std::string>();
            ex.meta.index = m.at("index").get<int64_t>();
            ex.meta.seed = m.at("seed").get<uint64_t>();
            ex.meta.distractor_origin =
                distractor_origin_from_string(m.at("distractor_origin").get<std::string>());
            if (m.contains("real_first")) ex.meta.real_first = m["real_first"].get<bool>();
            validate_example(ex);
            out.push_back(std::move(ex));
        } catch (const std::exception& e) {
            if (on_error) on_error(lineno, e.what());
        }
    }
    if (in.bad()) throw std::runtime_error("read failure: " + path);
    return out;
}

namespace {

// All examples for one sentence, in the requested objective order. Every
// objective draws from its own purpose-derived stream so skips never shift
// later draws.
std::vector<TrainingExample> corrupt_sentence(const TaggedSentence& s, const CorruptOptions& opt,
                                              const Lemmatizer* lem) {
    std::vector<TrainingExample> out;
    const uint64_t base = sentence_seed(opt.seed, s.raw.source_id, s.raw.index);
    const ConceptSet concepts = extract_concepts(s, opt.concept_classes);

    for (Objective obj : opt.objectives) {
        const uint64_t seed = derive_seed(base, to_string(obj));
        SeededRng rng(seed);
        std::optional<TrainingExample> ex;
        switch (obj) {
            case Objective::C2S:
                ex = make_c2s(s, concepts, rng, opt.lemmatize ? lem : nullptr, opt.min_concepts);
                break;
            case Objective::COR:
                ex = make_cor(s, concepts, rng);
                break;
            case Objective::ContGenqa:
            case Objective::ContMc:
            case Objective::ContTf: {
                SeededRng perm_rng(derive_seed(seed, "distractor"));
                auto perm = concept_permute(s, concepts, perm_rng);
                if (!perm) break;
                Distractor d{perm->tokens, DistractorOrigin::Shuffle};
                ContrastiveFormat format = obj == Objective::ContGenqa ? ContrastiveFormat::Genqa
                                           : obj == Objective::ContMc  ? ContrastiveFormat::Mc
                                                                       : ContrastiveFormat::Tf;
                ex = make_contrastive(s, d, rng, format);
                break;
            }
            case Objective::Ssm:
                ex = make_ssm(s, concepts, rng);
                break;
            case Objective::Infill:
                ex = make_infill(s, rng, opt.corrupt_rate, opt.mean_span);
                break;
        }
        if (ex) {
            ex->meta.seed = seed;
            out.push_back(std::move(*ex));
        }
    }
    return out;
}

}  // namespace

std::vector<TrainingExample> corrupt_corpus(const std::vector<TaggedSentence>& sentences,
                                            const CorruptOptions& options, const Lemmatizer* lem) {
    std::vector<std::vector<TrainingExample>> slots(sentences.size());
    const int workers = std::max(1, options.workers);
    if (workers == 1 || sentences.size() < 2) {
        for (size_t i = 0; i < sentences.size(); ++i)
            slots[i] = corrupt_sentence(sentences[i], options, lem);
    } else {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (size_t i = next.fetch_add(1); i < sentences.size(); i = next.fetch_add(1))
                    slots[i] = corrupt_sentence(sentences[i], options, lem);
            });
        }
        for (auto& t : pool) t.join();
    }

    std::vector<TrainingExample> out;
    for (auto& slot : slots)
        for (auto& ex : slot) out.push_back(std::move(ex));
    return out;
}

}  // namespace conceptlm
