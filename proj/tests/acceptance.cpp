#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "conceptlm/concepts.hpp"
#include "conceptlm/eval.hpp"
#include "conceptlm/model.hpp"
#include "conceptlm/objectives.hpp"
#include "conceptlm/rng.hpp"
#include "conceptlm/text.hpp"
#include "conceptlm/trainer.hpp"
#include "conceptlm/vocab.hpp"

using namespace conceptlm;

namespace {

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

bool same_params(const ParameterStore& a, const ParameterStore& b) {
    if (a.tensors.size() != b.tensors.size()) return false;
    for (const auto& [name, m] : a.tensors) {
        auto it = b.tensors.find(name);
        if (it == b.tensors.end()) return false;
        if (!(m.array() == it->second.array()).all()) return false;
    }
    return true;
}

ModelConfig d32_config(int vocab_size) {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.d_ffn = 64;
    cfg.max_seq_len = 32;
    cfg.vocab_size = vocab_size;
    cfg.dropout_rate = 0.0;
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<TrainingExample> world_examples(const SyntheticWorld& w,
                                            std::vector<Objective> objectives, uint64_t seed) {
    CorruptOptions opts;
    opts.objectives = std::move(objectives);
    opts.seed = seed;
    return corrupt_corpus(w.train_sentences, opts, nullptr);
}

int reversed_triples(const SyntheticWorld& w) {
    std::set<int64_t> keys;
    for (const auto& t : w.train) keys.insert((int64_t(t.subject) * 100 + t.verb) * 100 + t.object);
    int reversed = 0;
    for (const auto& t : w.train)
        if (keys.count((int64_t(t.object) * 100 + t.verb) * 100 + t.subject)) ++reversed;
    return reversed;
}

}  // namespace

TEST_CASE("criterion 1: concept permutations stay inside the enumerated family") {
    Timer timer;
    const std::vector<std::string> words = {
        "apple", "tree",  "bird",  "nest",   "river", "stone", "cloud", "wind",
        "grows", "sits",  "flows", "builds", "holds", "the",   "a",     "on",
        "near",  "under", "quiet", "small",  "old",   "red",   "tall",  "deep"};
    SeededRng gen(2024);
    int permuted = 0, degenerate = 0;

    for (int i = 0; i < 1000; ++i) {
        TaggedSentence s;
        ConceptSet cs;
        do {
            s.tokens.clear();
            s.tags.clear();
            size_t len = 5 + gen.next_below(8);
            for (size_t p = 0; p < len; ++p) {
                s.tokens.push_back(words[gen.next_below(words.size())]);
                double r = gen.next_real();
                s.tags.push_back(r < 0.30   ? PosTag::Noun
                                 : r < 0.35 ? PosTag::Propn
                                 : r < 0.55 ? PosTag::Verb
                                            : PosTag::Other);
            }
            s.raw = {"", "oracle", i};
            cs = extract_concepts(s);
        } while (cs.size() > 6);

        // Brute force: every category-preserving arrangement with all
        // non-concept positions fixed.
        auto apply = [&](const std::vector<int>& vp, const std::vector<int>& np) {
            auto toks = s.tokens;
            for (size_t j = 0; j < vp.size(); ++j)
                toks[static_cast<size_t>(cs.verbs[j].position)] =
                    cs.verbs[static_cast<size_t>(vp[j])].token;
            for (size_t j = 0; j < np.size(); ++j)
                toks[static_cast<size_t>(cs.nouns[j].position)] =
                    cs.nouns[static_cast<size_t>(np[j])].token;
            return toks;
        };
        std::set<std::vector<std::string>> family, differing;
        std::vector<int> vp(cs.verbs.size()), np(cs.nouns.size());
        std::iota(vp.begin(), vp.end(), 0);
        std::iota(np.begin(), np.end(), 0);
        do {
            auto np2 = np;
            do {
                auto toks = apply(vp, np2);
                family.insert(toks);
                if (toks != s.tokens) differing.insert(toks);
            } while (std::next_permutation(np2.begin(), np2.end()));
        } while (std::next_permutation(vp.begin(), vp.end()));

        SeededRng prng(derive_seed(77, "perm", i));
        auto perm = concept_permute(s, cs, prng);
        if (perm) {
            REQUIRE(family.count(perm->tokens) == 1);
            REQUIRE(perm->tokens != s.tokens);
            ++permuted;
        } else {
            REQUIRE(differing.empty());
            ++degenerate;
        }
    }
    REQUIRE(permuted + degenerate == 1000);
    REQUIRE(timer.seconds() < 30.0);
    std::printf("criterion 1 PASS: 1000 sentences, %d permuted, %d provably degenerate, %.1fs\n",
                permuted, degenerate, timer.seconds());
}

TEST_CASE("criterion 2: analytic gradients match central differences") {
    Timer timer;
    auto m = ModelT<double>::init(d32_config(40), 311);
    Batch batch = {{{5, 9, 12, 7}, {8, 6, 11}},
                   {{14, 5}, {9, 10, 13, 6, 5}},
                   {{20, 21, 22, 23, 24, 25}, {26}}};
    ForwardTraceT<double> trace;
    m.forward_loss(batch, &trace);
    auto grads = m.backward(trace);

    std::vector<std::string> names;
    for (const auto& [name, g] : m.params.tensors) names.push_back(name);
    SeededRng rng(778);
    const double h = 1e-5;
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const std::string& name = names[rng.next_below(names.size())];
        auto& t = m.params.at(name);
        auto i = static_cast<Eigen::Index>(rng.next_below(static_cast<uint64_t>(t.rows())));
        auto j = static_cast<Eigen::Index>(rng.next_below(static_cast<uint64_t>(t.cols())));
        const double orig = t(i, j);
        t(i, j) = orig + h;
        double up = m.forward_loss(batch);
        t(i, j) = orig - h;
        double down = m.forward_loss(batch);
        t(i, j) = orig;
        double numeric = (up - down) / (2 * h);
        double analytic = grads.at(name)(i, j);
        double rel = std::abs(analytic - numeric) /
                     std::max({std::abs(analytic), std::abs(numeric), 1e-6});
        INFO(name, "(", i, ",", j, ") analytic ", analytic, " numeric ", numeric);
        REQUIRE(rel < 1e-4);
        worst = std::max(worst, rel);
    }
    REQUIRE(timer.seconds() < 60.0);
    std::printf("criterion 2 PASS: 100 coordinates, worst relative error %.3g, %.1fs\n", worst,
                timer.seconds());
}

TEST_CASE("criterion 3: loss formulas check out") {
    // Teacher-forced mean cross entropy against a hand log-sum-exp oracle.
    auto m = ModelT<double>::init(d32_config(40), 17);
    Example ex{{5, 9, 12}, {8, 6}};
    double loss = m.forward_loss({ex});
    auto logits = m.forward_logits(ex.src, ex.tgt);
    std::vector<int> gold = {8, 6, Vocabulary::kEos};
    REQUIRE(logits.rows() == 3);
    double sum = 0.0;
    for (int t = 0; t < 3; ++t) {
        double mx = logits.row(t).maxCoeff();
        double z = 0.0;
        for (Eigen::Index v = 0; v < logits.cols(); ++v) z += std::exp(logits(t, v) - mx);
        sum += mx + std::log(z) - logits(t, gold[static_cast<size_t>(t)]);
    }
    REQUIRE(std::abs(loss - sum / 3.0) < 1e-9);

    // Joint total recomputed from the same expression shape, exactly.
    SeededRng r(91);
    for (int k = 0; k < 100; ++k) {
        double a = r.next_real() * 3, b = r.next_real() * 3;
        double c = r.next_real() * 3, d = r.next_real() * 3;
        double beta = r.next_real() * 2;
        REQUIRE(loss_total(a, b, c, d, beta) == (a + b) + beta * (c + d));
    }

    // Zero-beta joint trajectory equals the generative-only replay bitwise.
    std::map<std::string, int64_t> counts;
    for (const char* word : {"the", "apple", "tree", "grows", "on", "bird", "builds", "nest"})
        counts[word] = 5;
    auto vocab = Vocabulary::build(counts, 1);
    auto make = [&](Objective obj, std::vector<std::string> body, std::vector<std::string> tgt,
                    int64_t idx) {
        TrainingExample e;
        e.objective = obj;
        e.prefix = prefix_token(obj);
        e.source = {e.prefix};
        e.source.insert(e.source.end(), body.begin(), body.end());
        e.target = std::move(tgt);
        e.meta.source_id = "doc";
        e.meta.index = idx;
        return e;
    };
    std::vector<TrainingExample> examples = {
        make(Objective::C2S, {"apple", "tree"}, {"the", "apple", "tree", "grows"}, 0),
        make(Objective::COR, {"grows", "the", "apple", "tree"},
             {"the", "apple", "tree", "grows"}, 0),
        make(Objective::C2S, {"bird", "nest"}, {"the", "bird", "builds", "the", "nest"}, 1),
        make(Objective::COR, {"builds", "the", "the", "bird", "nest"},
             {"the", "bird", "builds", "the", "nest"}, 1),
    };
    auto cfg = d32_config(vocab.size());
    cfg.dropout_rate = 0.1;
    TrainPlan plan;
    plan.beta = 0.0;
    plan.stage2_steps = 50;
    plan.batch_size = 2;
    plan.lr_peak = 1e-3;
    plan.warmup_steps = 5;
    plan.seed = 31;

    Model a = Model::init(cfg, 5);
    stage_joint(a, examples, vocab, plan);

    struct G {
        Example c2s, cor;
    };
    std::vector<G> groups;
    for (size_t i = 0; i < examples.size(); i += 2)
        groups.push_back({{vocab.encode(examples[i].source), vocab.encode(examples[i].target)},
                          {vocab.encode(examples[i + 1].source),
                           vocab.encode(examples[i + 1].target)}});
    Model b = Model::init(cfg, 5);
    AdamW opt(b.params);
    for (int64_t s = 1; s <= plan.stage2_steps; ++s) {
        const uint64_t step_seed = derive_seed(plan.seed, "joint", s);
        Batch gc2s, gcor;
        for (int64_t e = 0; e < plan.batch_size; ++e) {
            const G& g = groups[static_cast<size_t>((s - 1) * plan.batch_size + e) % groups.size()];
            gc2s.push_back(g.c2s);
            gcor.push_back(g.cor);
        }
        ParameterStore grads = b.params;
        grads.zero();
        ForwardTraceT<float> t1;
        b.forward_loss(gc2s, &t1, {cfg.dropout_rate, derive_seed(step_seed, "dropout", 0)});
        grads.add_scaled(b.backward(t1), 1.0f);
        ForwardTraceT<float> t2;
        b.forward_loss(gcor, &t2, {cfg.dropout_rate, derive_seed(step_seed, "dropout", 1)});
        grads.add_scaled(b.backward(t2), 1.0f);
        opt.step(b.params, grads, plan, s);
    }
    REQUIRE(same_params(a.params, b.params));
    std::printf("criterion 3 PASS: softmax oracle 1e-9, exact total recompute, "
                "50-step zero-beta trajectory bitwise\n");
}

TEST_CASE("criterion 4: micro model overfits the 64-sentence world") {
    Timer timer;
    // World seed chosen reversal-free: when both orderings of a triple are
    // trained sentences, their pair is undecidable from likelihood alone.
    auto w = build_synthetic_world(20, 5, 64, 1, 0.0);
    REQUIRE(w.train_sentences.size() == 64);
    REQUIRE(reversed_triples(w) == 0);
    auto examples = world_examples(
        w, {Objective::C2S, Objective::COR, Objective::ContGenqa}, 21);
    auto vocab = Vocabulary::build(w.train_sentences, 1);

    ModelConfig cfg;
    cfg.vocab_size = vocab.size();
    Model model = Model::init(cfg, 33);
    TrainPlan plan;
    plan.stage1_steps = 2000;
    plan.stage2_steps = 500;
    plan.seed = 33;
    stage_mix(model, examples, vocab, plan);
    stage_joint(model, examples, vocab, plan, true);

    auto gen = eval_generation(model, examples, vocab);
    std::vector<TrainingExample> genqa;
    for (const auto& ex : examples)
        if (ex.objective == Objective::ContGenqa) genqa.push_back(ex);
    auto disc = eval_discriminator(model, genqa, vocab);

    double c2s_em = gen.by_objective.at("C2S").exact_match;
    double cor_em = gen.by_objective.at("COR").exact_match;
    REQUIRE(c2s_em >= 0.90);
    REQUIRE(cor_em >= 0.90);
    REQUIRE(disc.evaluated == 64);
    REQUIRE(disc.accuracy >= 0.95);
    REQUIRE(timer.seconds() < 900.0);
    std::printf("criterion 4 PASS: C2S EM %.3f, COR EM %.3f, discriminator %.3f, %.0fs\n",
                c2s_em, cor_em, disc.accuracy, timer.seconds());
}

TEST_CASE("criterion 5: concept objectives beat infilling on held-out correction") {
    Timer timer;
    auto w = build_synthetic_world(20, 5, 500, 2, 0.2);
    REQUIRE(w.held_out_sentences.size() == 100);
    auto vocab = Vocabulary::build(w.train_sentences, 1);

    int wins = 0;
    for (uint64_t seed = 101; seed <= 105; ++seed) {
        double acc[2];
        for (int arm = 0; arm < 2; ++arm) {
            auto examples = world_examples(
                w,
                arm == 0 ? std::vector<Objective>{Objective::C2S, Objective::COR,
                                                  Objective::ContGenqa}
                         : std::vector<Objective>{Objective::Infill},
                seed);
            ModelConfig cfg;
            cfg.vocab_size = vocab.size();
            Model model = Model::init(cfg, derive_seed(seed, "init"));
            TrainPlan plan;
            plan.stage1_steps = 600;
            plan.stage2_steps = 1;
            plan.seed = seed;
            stage_mix(model, examples, vocab, plan);
            acc[arm] = cor_probe(model, w.held_out_sentences, vocab, 7).accuracy;
        }
        if (acc[0] >= acc[1]) ++wins;
        std::printf("criterion 5 seed %llu: mix %.3f infill %.3f\n",
                    static_cast<unsigned long long>(seed), acc[0], acc[1]);
    }
    REQUIRE(wins >= 4);
    REQUIRE(timer.seconds() < 5400.0);
    std::printf("criterion 5 PASS: mix wins %d/5 on held-out correction, %.0fs\n", wins,
                timer.seconds());
}

TEST_CASE("criterion 6: corruption bytes and checkpoint digests reproduce") {
    auto w = build_synthetic_world(10, 3, 60, 9, 0.0);
    std::vector<std::string> files;
    for (int workers : {1, 2, 4}) {
        CorruptOptions opts;
        opts.objectives = {Objective::C2S, Objective::COR, Objective::ContGenqa, Objective::Ssm,
                           Objective::Infill};
        opts.seed = 31;
        opts.workers = workers;
        auto examples = corrupt_corpus(w.train_sentences, opts, nullptr);
        std::string path = "acc_corrupt_w" + std::to_string(workers) + ".jsonl";
        write_jsonl(examples, path);
        files.push_back(path);
    }
    auto bytes1 = slurp(files[0]);
    REQUIRE(bytes1 == slurp(files[1]));
    REQUIRE(bytes1 == slurp(files[2]));
    for (const auto& f : files) std::remove(f.c_str());

    auto vocab = Vocabulary::build(w.train_sentences, 1);
    auto examples = world_examples(
        w, {Objective::C2S, Objective::COR, Objective::ContGenqa}, 31);
    TrainPlan plan;
    plan.stage1_steps = 60;
    plan.stage2_steps = 20;
    plan.batch_size = 8;
    plan.seed = 13;
    std::vector<std::string> ckpts;
    for (int run = 0; run < 2; ++run) {
        Model model = Model::init(d32_config(vocab.size()), derive_seed(plan.seed, "init"));
        stage_mix(model, examples, vocab, plan);
        stage_joint(model, examples, vocab, plan, true);
        std::string path = "acc_run" + std::to_string(run) + ".ckpt";
        save_checkpoint(model.params, model.cfg, path);
        ckpts.push_back(path);
    }
    REQUIRE(slurp(ckpts[0]) == slurp(ckpts[1]));
    for (const auto& f : ckpts) std::remove(f.c_str());
    std::printf("criterion 6 PASS: workers 1/2/4 byte-identical, two-run checkpoints identical\n");
}

TEST_CASE("criterion 7: bleu4 matches the reference scorer within 1e-9") {
    // Independent mechanics: string-joined n-grams, precision product via pow.
    auto ref_bleu = [](const std::vector<std::string>& hyp,
                       const std::vector<std::vector<std::string>>& refs) {
        if (hyp.empty()) return 0.0;
        auto join = [](const std::vector<std::string>& t, size_t i, size_t n) {
            std::string s;
            for (size_t k = i; k < i + n; ++k) {
                s += t[k];
                s += '\x1f';
            }
            return s;
        };
        size_t max_order = hyp.size() < 4 ? hyp.size() : 4;
        double product = 1.0;
        for (size_t n = 1; n <= max_order; ++n) {
            std::unordered_map<std::string, long> hyp_counts, ref_best;
            for (size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[join(hyp, i, n)];
            for (const auto& ref : refs) {
                std::unordered_map<std::string, long> one;
                for (size_t i = 0; i + n <= ref.size(); ++i) ++one[join(ref, i, n)];
                for (const auto& [k, v] : one)
                    if (v > ref_best[k]) ref_best[k] = v;
            }
            long matched = 0, total = 0;
            for (const auto& [k, v] : hyp_counts) {
                total += v;
                auto it = ref_best.find(k);
                if (it != ref_best.end()) matched += std::min(v, it->second);
            }
            double p = (matched > 0 ? double(matched) : 1e-9) / double(total);
            product *= std::pow(p, 1.0 / double(max_order));
        }
        long c = long(hyp.size());
        long r = long(refs.front().size());
        for (const auto& ref : refs) {
            long len = long(ref.size());
            long da = len > c ? len - c : c - len;
            long db = r > c ? r - c : c - r;
            if (da < db || (da == db && len < r)) r = len;
        }
        double bp = c >= r ? 1.0 : std::exp(1.0 - double(r) / double(c));
        return product * bp;
    };

    using Toks = std::vector<std::string>;
    std::vector<std::pair<Toks, std::vector<Toks>>> pairs = {
        {{"the", "cat", "sat", "on", "the", "mat", "."},
         {{"the", "cat", "sat", "on", "the", "mat", "."}}},
        {{}, {{"the", "cat"}}},
        {{"the", "the", "the", "the"}, {{"the", "cat"}}},
        {{"a", "b"}, {{"a", "c"}}},
        {{"a"}, {{"a"}}},
        {{"a"}, {{"b"}}},
        {{"a", "b", "c"}, {{"a", "b", "c", "d"}}},
        {{"a", "b", "c", "d"}, {{"a", "b", "c"}}},
        {{"a", "b", "c", "d"}, {{"a", "b", "x", "y"}, {"z", "b", "c", "d"}}},
        {{"a", "b"}, {{"a"}, {"a", "b", "c"}}},
        {{"a", "a", "a", "b"}, {{"a", "a", "b", "b"}}},
        {{"w", "x", "y", "z", "p", "q", "r", "s", "t", "u", "v", "k"},
         {{"w", "x", "y", "z", "p", "q", "r", "s", "t", "u", "v", "k"}}},
        {{"a", "b", "c", "d", "e"}, {{"a", "b", "c", "d"}}},
        {{"p", "q", "r", "s"}, {{"w", "x", "y", "z"}}},
        {{"a", "b", "a", "b"}, {{"a", "b", "a"}}},
        {{"a", "b", "c"}, {{"a", "b", "c", "d", "e", "f"}}},
        {{"x", "y"}, {{"x", "y"}, {"x", "y"}}},
        {{"it", "rains", ".", ","}, {{"it", "rains", ",", "."}}},
        {{"a"}, {{"a", "b", "c", "d"}}},
        {{"a", "b", "c", "x", "y", "z"}, {{"x", "y", "z", "a", "b", "c"}}},
    };
    REQUIRE(pairs.size() == 20);
    double worst = 0.0;
    for (const auto& [hyp, refs] : pairs) {
        double dev = std::abs(bleu4(hyp, refs) - ref_bleu(hyp, refs));
        REQUIRE(dev <= 1e-9);
        worst = std::max(worst, dev);
    }
    REQUIRE(bleu4(pairs[2].first, pairs[2].second) < 1e-3);  // degenerate clipped case
    std::printf("criterion 7 PASS: 20 pairs, worst deviation %.2g\n", worst);
}

TEST_CASE("criterion 8: checkpoint round trip preserves the forward pass bitwise") {
    auto w = build_synthetic_world(8, 3, 40, 15, 0.0);
    auto vocab = Vocabulary::build(w.train_sentences, 1);
    auto examples = world_examples(w, {Objective::C2S, Objective::COR}, 15);
    Model model = Model::init(d32_config(vocab.size()), 55);
    TrainPlan plan;
    plan.stage1_steps = 30;
    plan.stage2_steps = 1;
    plan.batch_size = 8;
    plan.seed = 3;
    stage_mix(model, examples, vocab, plan);

    Batch batch;
    for (size_t i = 0; i < 4; ++i)
        batch.push_back({vocab.encode(examples[i].source), vocab.encode(examples[i].target)});
    double loss_pre = model.forward_loss(batch);
    auto logits_pre = model.forward_logits(batch[0].src, batch[0].tgt);

    std::string path = "acc_roundtrip.ckpt";
    save_checkpoint(model.params, model.cfg, path);
    auto [params, cfg] = load_checkpoint(path);
    std::remove(path.c_str());
    REQUIRE(cfg == model.cfg);
    Model loaded{cfg, std::move(params)};
    REQUIRE(same_params(model.params, loaded.params));

    double loss_post = loaded.forward_loss(batch);
    auto logits_post = loaded.forward_logits(batch[0].src, batch[0].tgt);
    REQUIRE(loss_post == loss_pre);
    REQUIRE(logits_pre.rows() == logits_post.rows());
    REQUIRE((logits_pre.array() == logits_post.array()).all());
    std::printf("criterion 8 PASS: loss %.9g reproduced bitwise after reload\n", loss_pre);
}
