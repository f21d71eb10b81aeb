#include "conceptlm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "conceptlm/concepts.hpp"
#include "conceptlm/rng.hpp"

namespace conceptlm {

using json = nlohmann::json;

namespace {

constexpr double kBleuEps = 1e-9;

std::map<std::vector<std::string>, int64_t> ngram_counts(const std::vector<std::string>& tokens,
                                                         size_t n) {
    std::map<std::vector<std::string>, int64_t> counts;
    if (tokens.size() < n) return counts;
    for (size_t i = 0; i + n <= tokens.size(); ++i)
        ++counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)];
    return counts;
}

}  // namespace

bool exact_match(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
    return hyp == ref;
}

double token_f1(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
    if (hyp.empty() && ref.empty()) return 1.0;
    if (hyp.empty() || ref.empty()) return 0.0;
    auto h = ngram_counts(hyp, 1);
    auto r = ngram_counts(ref, 1);
    int64_t overlap = 0;
    for (const auto& [tok, c] : h) {
        auto it = r.find(tok);
        if (it != r.end()) overlap += std::min(c, it->second);
    }
    if (overlap == 0) return 0.0;
    double p = static_cast<double>(overlap) / static_cast<double>(hyp.size());
    double rec = static_cast<double>(overlap) / static_cast<double>(ref.size());
    return 2.0 * p * rec / (p + rec);
}

double bleu4(const std::vector<std::string>& hyp,
             const std::vector<std::vector<std::string>>& refs) {
    if (refs.empty()) throw EvalError("bleu4: no references");
    if (hyp.empty()) return 0.0;

    const size_t max_n = std::min<size_t>(4, hyp.size());
    double log_sum = 0.0;
    for (size_t n = 1; n <= max_n; ++n) {
        auto h = ngram_counts(hyp, n);
        std::map<std::vector<std::string>, int64_t> best;
        for (const auto& ref : refs)
            for (const auto& [g, c] : ngram_counts(ref, n)) {
                auto& b = best[g];
                b = std::max(b, c);
            }
        int64_t clipped = 0;
        int64_t total = 0;
        for (const auto& [g, c] : h) {
            total += c;
            auto it = best.find(g);
            if (it != best.end()) clipped += std::min(c, it->second);
        }
        double num = clipped > 0 ? static_cast<double>(clipped) : kBleuEps;
        log_sum += std::log(num / static_cast<double>(total));
    }
    double geo = std::exp(log_sum / static_cast<double>(max_n));

    // Closest reference length, ties resolved toward the shorter reference.
    const auto c = static_cast<int64_t>(hyp.size());
    int64_t r = static_cast<int64_t>(refs.front().size());
    for (const auto& ref : refs) {
        auto len = static_cast<int64_t>(ref.size());
        if (std::llabs(len - c) < std::llabs(r - c) || (std::llabs(len - c) == std::llabs(r - c) && len < r))
            r = len;
    }
    double bp = c >= r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
    return bp * geo;
}

GenerationEval eval_generation(const Model& model, const std::vector<TrainingExample>& examples,
                               const Vocabulary& vocab) {
    GenerationEval out;
    const auto max_seq = static_cast<size_t>(model.cfg.max_seq_len);
    for (const auto& ex : examples) {
        if (ex.objective == Objective::ContGenqa || ex.objective == Objective::ContMc ||
            ex.objective == Objective::ContTf) {
            ++out.skipped;
            continue;
        }
        auto src = vocab.encode(ex.source);
        if (src.size() > max_seq) {
            ++out.skipped;
            continue;
        }
        auto hyp = vocab.decode(model.decode_greedy(src, model.cfg.max_seq_len - 1));
        double em = exact_match(hyp, ex.target) ? 1.0 : 0.0;
        double f1 = token_f1(hyp, ex.target);
        double bl = bleu4(hyp, {ex.target});
        for (GenerationScores* s : {&out.overall, &out.by_objective[to_string(ex.objective)]}) {
            ++s->count;
            s->exact_match += em;
            s->token_f1 += f1;
            s->bleu4 += bl;
        }
    }
    auto finish = [](GenerationScores& s) {
        if (s.count == 0) return;
        s.exact_match /= static_cast<double>(s.count);
        s.token_f1 /= static_cast<double>(s.count);
        s.bleu4 /= static_cast<double>(s.count);
    };
    finish(out.overall);
    for (auto& [_, s] : out.by_objective) finish(s);
    return out;
}

DiscriminatorResult eval_discriminator(const Model& model,
                                       const std::vector<TrainingExample>& examples,
                                       const Vocabulary& vocab) {
    DiscriminatorResult out;
    const auto max_seq = static_cast<size_t>(model.cfg.max_seq_len);

    for (const auto& ex : examples) {
        if (ex.objective != Objective::ContGenqa || !ex.meta.real_first.has_value()) {
            ++out.skipped;
            continue;
        }
        auto sep = std::find(ex.source.begin() + 1, ex.source.end(), std::string("<sep>"));
        if (ex.source.empty() || ex.source.front() != ex.prefix || sep == ex.source.end()) {
            ++out.skipped;
            continue;
        }
        std::vector<std::string> first(ex.source.begin() + 1, sep);
        std::vector<std::string> second(sep + 1, ex.source.end());
        if (first.empty() || second.empty() || first == second) {
            ++out.skipped;
            continue;
        }
        const auto& real = *ex.meta.real_first ? first : second;
        const auto& dist = *ex.meta.real_first ? second : first;

        auto source_of = [&](const std::vector<std::string>& a, const std::vector<std::string>& b) {
            std::vector<std::string> s{ex.prefix};
            s.insert(s.end(), a.begin(), a.end());
            s.push_back("<sep>");
            s.insert(s.end(), b.begin(), b.end());
            return vocab.encode(s);
        };
        auto src_ab = source_of(first, second);
        auto src_ba = source_of(second, first);
        auto real_ids = vocab.encode(real);
        auto dist_ids = vocab.encode(dist);
        size_t longest_tgt = std::max(real_ids.size(), dist_ids.size());
        if (src_ab.size() > max_seq || longest_tgt + 1 > max_seq) {
            ++out.skipped;
            continue;
        }

        // Mean log-likelihood of a candidate target, order-symmetrized.
        auto score = [&](const std::vector<int>& cand) {
            return -0.5 * (model.forward_loss({{src_ab, cand}}) + model.forward_loss({{src_ba, cand}}));
        };
        bool correct = score(real_ids) > score(dist_ids);
        out.correct.push_back(correct ? 1 : 0);
        ++out.evaluated;
        if (correct) out.accuracy += 1.0;
    }
    if (out.evaluated > 0) out.accuracy /= static_cast<double>(out.evaluated);
    return out;
}

namespace {

std::vector<std::string> make_word_pool(const char* consonants, const char* vowels, int count,
                                        const char* suffix) {
    std::vector<std::string> syl;
    for (const char* c = consonants; *c; ++c)
        for (const char* v = vowels; *v; ++v) syl.push_back(std::string{*c, *v});
    const auto s = static_cast<int>(syl.size());
    if (count > s * s) throw EvalError("world: word pool exhausted");
    std::vector<std::string> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(syl[i % s] + syl[(i / s) % s] + suffix);
    return out;
}

TaggedSentence realize(const SyntheticWorld& w, const WorldTriple& t, const std::string& source_id,
                       int64_t index) {
    TaggedSentence s;
    s.tokens = {"The", w.nouns[t.subject], w.verbs[t.verb], "on", "the", w.nouns[t.object], "."};
    s.tags = {PosTag::Other, PosTag::Noun, PosTag::Verb,  PosTag::Other,
              PosTag::Other, PosTag::Noun, PosTag::Other};
    s.raw = RawSentence{detokenize(s.tokens), source_id, index};
    return s;
}

}  // namespace

SyntheticWorld build_synthetic_world(int n_nouns, int n_verbs, int n_triples, uint64_t seed,
                                     double holdout_fraction) {
    if (n_nouns < 2) throw EvalError("world: need at least 2 nouns");
    if (n_verbs < 1) throw EvalError("world: need at least 1 verb");
    if (n_triples < 1) throw EvalError("world: need at least 1 triple");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0))
        throw EvalError("world: holdout_fraction must lie in [0, 1)");
    const int64_t capacity =
        static_cast<int64_t>(n_nouns) * n_verbs * (static_cast<int64_t>(n_nouns) - 1);
    if (n_triples > capacity)
        throw EvalError("world: " + std::to_string(n_triples) + " triples exceed capacity " +
                        std::to_string(capacity));

    SyntheticWorld w;
    w.nouns = make_word_pool("bdgkmptz", "aeiou", n_nouns, "");
    w.verbs = make_word_pool("flnrsv", "aeiou", n_verbs, "s");

    // Draw-until-new is sampling without replacement, so the triple set is
    // uniform; n_triples <= capacity bounds the rejection loop.
    SeededRng rng(derive_seed(seed, "world"));
    std::vector<WorldTriple> triples;
    std::unordered_set<uint64_t> seen;
    while (triples.size() < static_cast<size_t>(n_triples)) {
        int s = static_cast<int>(rng.next_below(static_cast<uint64_t>(n_nouns)));
        int v = static_cast<int>(rng.next_below(static_cast<uint64_t>(n_verbs)));
        int o = static_cast<int>(rng.next_below(static_cast<uint64_t>(n_nouns)));
        if (o == s) continue;
        uint64_t key = (static_cast<uint64_t>(s) * n_verbs + v) * n_nouns + o;
        if (seen.insert(key).second) triples.push_back({s, v, o});
    }

    // A triple whose subject, verb or object is not yet covered by the train
    // split is forced into it; held-out triples come from the remainder, so
    // they never introduce vocabulary.
    std::vector<char> noun_covered(static_cast<size_t>(n_nouns), 0);
    std::vector<char> verb_covered(static_cast<size_t>(n_verbs), 0);
    std::vector<size_t> undecided;
    std::vector<char> to_train(triples.size(), 0);
    for (size_t i = 0; i < triples.size(); ++i) {
        const auto& t = triples[i];
        if (!noun_covered[t.subject] || !noun_covered[t.object] || !verb_covered[t.verb]) {
            noun_covered[t.subject] = noun_covered[t.object] = 1;
            verb_covered[t.verb] = 1;
            to_train[i] = 1;
        } else {
            undecided.push_back(i);
        }
    }
    size_t want = std::min(undecided.size(),
                           static_cast<size_t>(std::llround(holdout_fraction * n_triples)));
    std::vector<char> held(triples.size(), 0);
    for (size_t k = undecided.size() - want; k < undecided.size(); ++k) held[undecided[k]] = 1;

    for (size_t i = 0; i < triples.size(); ++i) {
        if (held[i])
            w.held_out.push_back(triples[i]);
        else
            w.train.push_back(triples[i]);
    }
    for (size_t i = 0; i < w.train.size(); ++i)
        w.train_sentences.push_back(realize(w, w.train[i], "world-train", static_cast<int64_t>(i)));
    for (size_t i = 0; i < w.held_out.size(); ++i)
        w.held_out_sentences.push_back(
            realize(w, w.held_out[i], "world-heldout", static_cast<int64_t>(i)));
    return w;
}

void write_world_jsonl(const std::vector<TaggedSentence>& sentences, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw EvalError("cannot open for writing: " + path);
    for (const auto& s : sentences) {
        json j;
        j["source_id"] = s.raw.source_id;
        j["text"] = s.raw.text;
        j["tokens"] = s.tokens;
        j["tags"] = json::array();
        for (PosTag t : s.tags) j["tags"].push_back(to_string(t));
        out << j.dump() << "\n";
    }
    if (!out) throw EvalError("write failure: " + path);
}

ProbeResult cor_probe(const Model& model, const std::vector<TaggedSentence>& sentences,
                      const Vocabulary& vocab, uint64_t seed) {
    ProbeResult out;
    const auto max_seq = static_cast<size_t>(model.cfg.max_seq_len);
    for (const auto& s : sentences) {
        SeededRng rng(sentence_seed(seed, s.raw.source_id, s.raw.index));
        auto ex = make_cor(s, extract_concepts(s), rng);
        if (!ex) {
            ++out.skipped;
            continue;
        }
        auto src = vocab.encode(ex->source);
        if (src.size() > max_seq) {
            ++out.skipped;
            continue;
        }
        int budget = std::min<int>(model.cfg.max_seq_len - 1, static_cast<int>(s.size()) + 4);
        auto hyp = vocab.decode(model.decode_greedy(src, budget));
        ++out.evaluated;
        if (hyp == s.tokens) out.accuracy += 1.0;
    }
    if (out.evaluated > 0) out.accuracy /= static_cast<double>(out.evaluated);
    return out;
}

double eval_cor_probe(const Model& model, const SyntheticWorld& world, const Vocabulary& vocab,
                      uint64_t seed) {
    return cor_probe(model, world.held_out_sentences, vocab, seed).accuracy;
}

std::string report_to_json(const EvalReport& report) {
    json j = json::object();
    if (report.generation) {
        auto scores = [](const GenerationScores& s) {
            return json{{"count", s.count},
                        {"exact_match", s.exact_match},
                        {"token_f1", s.token_f1},
                        {"bleu4", s.bleu4}};
        };
        json g;
        g["overall"] = scores(report.generation->overall);
        g["by_objective"] = json::object();
        for (const auto& [name, s] : report.generation->by_objective)
            g["by_objective"][name] = scores(s);
        g["skipped"] = report.generation->skipped;
        j["generation"] = std::move(g);
    }
    if (report.discriminator) {
        j["discriminator"] = {{"accuracy", report.discriminator->accuracy},
                              {"evaluated", report.discriminator->evaluated},
                              {"skipped", report.discriminator->skipped}};
    }
    auto probe = [](const ProbeResult& p) {
        return json{{"accuracy", p.accuracy}, {"evaluated", p.evaluated}, {"skipped", p.skipped}};
    };
    if (report.probe_train || report.probe_held_out) {
        j["probe"] = json::object();
        if (report.probe_train) j["probe"]["train"] = probe(*report.probe_train);
        if (report.probe_held_out) j["probe"]["held_out"] = probe(*report.probe_held_out);
    }
    return j.dump(2);
}

}  // namespace conceptlm
