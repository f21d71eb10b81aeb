#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "conceptlm/objectives.hpp"
#include "conceptlm/vocab.hpp"
#include "oracles.hpp"

using namespace conceptlm;

namespace {

TaggedSentence make_sentence(const std::vector<std::pair<std::string, PosTag>>& words,
                             const std::string& source_id = "test", int64_t index = 0) {
    TaggedSentence s;
    for (const auto& [tok, tag] : words) {
        s.tokens.push_back(tok);
        s.tags.push_back(tag);
    }
    s.raw = {detokenize(s.tokens), source_id, index};
    return s;
}

TaggedSentence apple_tree() {
    return make_sentence({{"apple", PosTag::Noun},
                          {"grows", PosTag::Verb},
                          {"on", PosTag::Other},
                          {"the", PosTag::Other},
                          {"tree", PosTag::Noun}});
}

TaggedSentence figure_sentence() {
    return make_sentence({{"The", PosTag::Other},
                          {"information", PosTag::Noun},
                          {"was", PosTag::Other},
                          {"forwarded", PosTag::Verb},
                          {"to", PosTag::Other},
                          {"Simpson", PosTag::Propn},
                          {"'s", PosTag::Other},
                          {"prosecutors", PosTag::Noun},
                          {",", PosTag::Other},
                          {"but", PosTag::Other},
                          {"it", PosTag::Other},
                          {"was", PosTag::Other},
                          {"ignored", PosTag::Verb},
                          {".", PosTag::Other}});
}

const Lemmatizer& lemmas() {
    static Lemmatizer lem = Lemmatizer::load(CONCEPTLM_DATA_DIR);
    return lem;
}

TaggedSentence random_sentence(SeededRng& rng, const std::string& sid, int64_t idx) {
    static const std::vector<std::string> nouns = {"dog",  "cat",  "tree",  "apple",
                                                   "car",  "bird", "river", "house"};
    static const std::vector<std::string> verbs = {"sees", "likes", "chases", "finds"};
    static const std::vector<std::string> others = {"the", "a", "on", "near", "very"};
    TaggedSentence s;
    int n = 4 + static_cast<int>(rng.next_below(9));
    for (int i = 0; i < n; ++i) {
        switch (rng.next_below(3)) {
            case 0:
                s.tokens.push_back(nouns[rng.next_below(nouns.size())]);
                s.tags.push_back(PosTag::Noun);
                break;
            case 1:
                s.tokens.push_back(verbs[rng.next_below(verbs.size())]);
                s.tags.push_back(PosTag::Verb);
                break;
            default:
                s.tokens.push_back(others[rng.next_below(others.size())]);
                s.tags.push_back(PosTag::Other);
        }
    }
    s.raw = {detokenize(s.tokens), sid, idx};
    return s;
}

}  // namespace

TEST_CASE("c2s concept list is the lemmatized deduplicated set") {
    auto s = figure_sentence();
    auto c = extract_concepts(s);
    SeededRng rng(1);
    auto ex = make_c2s(s, c, rng, &lemmas());
    REQUIRE(ex.has_value());
    CHECK(ex->objective == Objective::C2S);
    CHECK(ex->prefix == "<c2s>");
    CHECK(ex->source.front() == "<c2s>");
    CHECK(ex->target == s.tokens);

    std::multiset<std::string> got(ex->source.begin() + 1, ex->source.end());
    std::multiset<std::string> want{"information", "forward", "Simpson", "prosecutor", "ignore"};
    CHECK(got == want);
}

TEST_CASE("c2s lowercases sentence-initial common nouns") {
    auto s = make_sentence({{"Apple", PosTag::Noun},
                            {"grows", PosTag::Verb},
                            {"on", PosTag::Other},
                            {"the", PosTag::Other},
                            {"tree", PosTag::Noun}});
    SeededRng rng(2);
    auto ex = make_c2s(s, extract_concepts(s), rng, &lemmas());
    REQUIRE(ex.has_value());
    std::multiset<std::string> got(ex->source.begin() + 1, ex->source.end());
    CHECK(got == std::multiset<std::string>{"apple", "grow", "tree"});
    CHECK(detokenize(ex->target) == "Apple grows on the tree");
}

TEST_CASE("c2s deduplicates repeated lemmas") {
    auto s = make_sentence({{"dogs", PosTag::Noun},
                            {"chase", PosTag::Verb},
                            {"the", PosTag::Other},
                            {"dog", PosTag::Noun}});
    SeededRng rng(3);
    auto ex = make_c2s(s, extract_concepts(s), rng, &lemmas());
    REQUIRE(ex.has_value());
    CHECK(ex->source.size() == 3);  // prefix + {dog, chase}
}

TEST_CASE("c2s skips below the concept floor") {
    auto s = make_sentence({{"the", PosTag::Other}, {"dog", PosTag::Noun}, {"sat", PosTag::Other}});
    SeededRng rng(4);
    CHECK_FALSE(make_c2s(s, extract_concepts(s), rng, &lemmas()).has_value());

    auto two = apple_tree();
    SeededRng rng2(5);
    CHECK_FALSE(make_c2s(two, extract_concepts(two), rng2, &lemmas(), 4).has_value());
}

TEST_CASE("c2s without lemmatizer uses surface forms") {
    auto s = figure_sentence();
    SeededRng rng(6);
    auto ex = make_c2s(s, extract_concepts(s), rng, nullptr);
    REQUIRE(ex.has_value());
    std::multiset<std::string> got(ex->source.begin() + 1, ex->source.end());
    std::multiset<std::string> want{"information", "forwarded", "Simpson", "prosecutors", "ignored"};
    CHECK(got == want);
}

TEST_CASE("cor source is the forced swap with original target") {
    auto s = apple_tree();
    SeededRng rng(7);
    auto ex = make_cor(s, extract_concepts(s), rng);
    REQUIRE(ex.has_value());
    CHECK(ex->prefix == "<cor>");
    CHECK(ex->source == std::vector<std::string>{"<cor>", "tree", "grows", "on", "the", "apple"});
    CHECK(ex->target == s.tokens);
}

TEST_CASE("cor skips when not permutable") {
    auto s = make_sentence({{"dog", PosTag::Noun}, {"runs", PosTag::Verb}});
    SeededRng rng(8);
    CHECK_FALSE(make_cor(s, extract_concepts(s), rng).has_value());
}

TEST_CASE("cor sources are category-preserving permutations per oracle") {
    SeededRng gen(9);
    int produced = 0;
    for (int t = 0; t < 4000 && produced < 1000; ++t) {
        auto s = random_sentence(gen, "cor_prop", t);
        auto c = extract_concepts(s);
        if (c.size() > 6) continue;
        SeededRng rng(sentence_seed(99, s.raw.source_id, t));
        auto ex = make_cor(s, c, rng);
        if (!ex) continue;
        ++produced;
        std::vector<std::string> body(ex->source.begin() + 1, ex->source.end());
        CHECK(body != ex->target);
        CHECK(detokenize(body) != detokenize(ex->target));
        auto oracle = oracles::enumerate_category_permutations(s, c);
        CHECK(oracle.count(body) == 1);

        // Length and multiset invariants, prefix excluded.
        REQUIRE(body.size() == ex->target.size());
        auto a = body, b = ex->target;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        CHECK(a == b);
    }
    CHECK(produced == 1000);
}

TEST_CASE("genqa source holds both candidates and targets the real one") {
    auto s = apple_tree();
    Distractor d{{"tree", "grows", "on", "the", "apple"}, DistractorOrigin::Shuffle};
    for (uint64_t seed = 0; seed < 20; ++seed) {
        SeededRng rng(seed);
        auto ex = make_contrastive(s, d, rng, ContrastiveFormat::Genqa);
        REQUIRE(ex.has_value());
        CHECK(ex->prefix == "<cont>");
        CHECK(ex->target == s.tokens);
        REQUIRE(ex->meta.real_first.has_value());
        auto sep = std::find(ex->source.begin(), ex->source.end(), "<sep>");
        REQUIRE(sep != ex->source.end());
        std::vector<std::string> first(ex->source.begin() + 1, sep);
        std::vector<std::string> second(sep + 1, ex->source.end());
        if (*ex->meta.real_first) {
            CHECK(first == s.tokens);
            CHECK(second == d.tokens);
        } else {
            CHECK(first == d.tokens);
            CHECK(second == s.tokens);
        }
        CHECK(ex->meta.distractor_origin == DistractorOrigin::Shuffle);
    }
}

TEST_CASE("both candidate orders occur") {
    auto s = apple_tree();
    Distractor d{{"tree", "grows", "on", "the", "apple"}, DistractorOrigin::Shuffle};
    std::set<bool> orders;
    for (uint64_t seed = 0; seed < 50; ++seed) {
        SeededRng rng(seed);
        auto ex = make_contrastive(s, d, rng, ContrastiveFormat::Genqa);
        orders.insert(*ex->meta.real_first);
    }
    CHECK(orders.size() == 2);
}

TEST_CASE("mc target names the slot holding the real sentence") {
    auto s = apple_tree();
    Distractor d{{"tree", "grows", "on", "the", "apple"}, DistractorOrigin::Shuffle};
    bool saw_first = false, saw_second = false;
    for (uint64_t seed = 0; seed < 50; ++seed) {
        SeededRng rng(seed);
        auto ex = make_contrastive(s, d, rng, ContrastiveFormat::Mc);
        REQUIRE(ex.has_value());
        CHECK(ex->prefix == "<cont>");
        CHECK(ex->source[1] == "1:");
        if (*ex->meta.real_first) {
            CHECK(ex->target == std::vector<std::string>{"1"});
            saw_first = true;
        } else {
            CHECK(ex->target == std::vector<std::string>{"2"});  // distractor first
            saw_second = true;
        }
    }
    CHECK(saw_first);
    CHECK(saw_second);
}

TEST_CASE("tf labels follow the shown sentence") {
    auto s = apple_tree();
    Distractor d{{"tree", "grows", "on", "the", "apple"}, DistractorOrigin::Shuffle};
    bool saw_true = false, saw_false = false;
    for (uint64_t seed = 0; seed < 50; ++seed) {
        SeededRng rng(seed);
        auto ex = make_contrastive(s, d, rng, ContrastiveFormat::Tf);
        REQUIRE(ex.has_value());
        CHECK(ex->prefix == "<tf>");
        std::vector<std::string> shown(ex->source.begin() + 1, ex->source.end());
        if (ex->target == std::vector<std::string>{"true"}) {
            CHECK(shown == s.tokens);
            saw_true = true;
        } else {
            REQUIRE(ex->target == std::vector<std::string>{"false"});
            CHECK(shown == d.tokens);
            saw_false = true;
        }
    }
    CHECK(saw_true);
    CHECK(saw_false);
}

TEST_CASE("identical candidate pair is skipped") {
    auto s = apple_tree();
    Distractor d{s.tokens, DistractorOrigin::Shuffle};
    SeededRng rng(10);
    CHECK_FALSE(make_contrastive(s, d, rng, ContrastiveFormat::Genqa).has_value());
}

TEST_CASE("ssm masks every concept occurrence with its own sentinel") {
    auto s = apple_tree();
    SeededRng rng(11);
    auto ex = make_ssm(s, extract_concepts(s), rng);
    REQUIRE(ex.has_value());
    CHECK(ex->prefix == "<ssm>");
    CHECK(ex->source ==
          std::vector<std::string>{"<ssm>", "<M0>", "<M1>", "on", "the", "<M2>"});
    CHECK(ex->target ==
          std::vector<std::string>{"<M0>", "apple", "<M1>", "grows", "<M2>", "tree"});
}

TEST_CASE("ssm skips concept-free sentences") {
    auto s = make_sentence({{"the", PosTag::Other}, {"very", PosTag::Other}});
    SeededRng rng(12);
    CHECK_FALSE(make_ssm(s, extract_concepts(s), rng).has_value());
}

TEST_CASE("ssm masked fraction equals the concept fraction") {
    SeededRng gen(13);
    size_t masked = 0, tokens = 0, concepts = 0;
    for (int t = 0; t < 300; ++t) {
        auto s = random_sentence(gen, "ssm_prop", t);
        auto c = extract_concepts(s);
        SeededRng rng(t);
        auto ex = make_ssm(s, c, rng);
        tokens += s.tokens.size();
        concepts += c.size();
        if (!ex) continue;
        for (const auto& tok : ex->source)
            masked += tok.size() > 2 && tok[0] == '<' && tok[1] == 'M';
    }
    CHECK(masked == concepts);
    CHECK(tokens > 0);
}

TEST_CASE("infill zero rate is skipped") {
    auto s = apple_tree();
    SeededRng rng(14);
    CHECK_FALSE(make_infill(s, rng, 0.0, 3.0).has_value());
}

TEST_CASE("infill saturation masks the whole sentence as one span") {
    auto s = apple_tree();
    SeededRng rng(15);
    auto ex = make_infill(s, rng, 1.0, 10.0);
    REQUIRE(ex.has_value());
    CHECK(ex->source == std::vector<std::string>{"<infill>", "<M0>"});
    std::vector<std::string> want{"<M0>"};
    want.insert(want.end(), s.tokens.begin(), s.tokens.end());
    CHECK(ex->target == want);
}

TEST_CASE("infill reconstruction recovers the sentence") {
    SeededRng gen(16);
    for (int t = 0; t < 400; ++t) {
        auto s = random_sentence(gen, "inf_prop", t);
        SeededRng rng(sentence_seed(3, "inf_prop", t));
        auto ex = make_infill(s, rng, 0.3, 2.0);
        REQUIRE(ex.has_value());
        // Splice each sentinel's span back into the source.
        std::map<std::string, std::vector<std::string>> spans;
        std::string cur;
        for (const auto& tok : ex->target) {
            if (tok.size() > 2 && tok[0] == '<' && tok[1] == 'M') {
                cur = tok;
                spans[cur];
            } else {
                REQUIRE(!cur.empty());
                spans[cur].push_back(tok);
            }
        }
        std::vector<std::string> rebuilt;
        for (size_t i = 1; i < ex->source.size(); ++i) {
            const auto& tok = ex->source[i];
            auto it = spans.find(tok);
            if (it != spans.end()) {
                rebuilt.insert(rebuilt.end(), it->second.begin(), it->second.end());
            } else {
                rebuilt.push_back(tok);
            }
        }
        CHECK(rebuilt == s.tokens);
    }
}

TEST_CASE("infill empirical rate converges to the configured rate") {
    // Sentences of >= 7 tokens keep floor(rate*n + u) >= 1, so no clamping
    // distorts the expectation.
    SeededRng gen(17);
    size_t masked = 0, total = 0;
    for (int t = 0; t < 10000; ++t) {
        TaggedSentence s;
        int n = 8 + static_cast<int>(gen.next_below(20));
        for (int i = 0; i < n; ++i) {
            s.tokens.push_back("w" + std::to_string(i));
            s.tags.push_back(PosTag::Other);
        }
        s.raw = {"", "rate", t};
        SeededRng rng(sentence_seed(5, "rate", t));
        auto ex = make_infill(s, rng, 0.15, 3.0);
        REQUIRE(ex.has_value());
        total += n;
        masked += n - (ex->source.size() - 1 -
                       static_cast<size_t>(std::count_if(ex->source.begin() + 1, ex->source.end(),
                                                         [](const std::string& tok) {
                                                             return tok.size() > 2 && tok[0] == '<' &&
                                                                    tok[1] == 'M';
                                                         })));
    }
    double rate = static_cast<double>(masked) / static_cast<double>(total);
    INFO("empirical rate ", rate);
    CHECK(rate > 0.147);
    CHECK(rate < 0.153);
}

TEST_CASE("objective prefixes are distinct within an active set") {
    // One contrastive format per dataset: with GENQA active the map over
    // {C2S, COR, CONT_GENQA, SSM, INFILL} plus TF is injective.
    std::set<std::string> prefixes;
    for (Objective o : {Objective::C2S, Objective::COR, Objective::ContGenqa, Objective::ContTf,
                        Objective::Ssm, Objective::Infill})
        prefixes.insert(prefix_token(o));
    CHECK(prefixes.size() == 6);
    CHECK(std::string(prefix_token(Objective::ContMc)) == prefix_token(Objective::ContGenqa));
}

TEST_CASE("objective names round trip") {
    for (Objective o : {Objective::C2S, Objective::COR, Objective::ContGenqa, Objective::ContMc,
                        Objective::ContTf, Objective::Ssm, Objective::Infill})
        CHECK(objective_from_string(to_string(o)) == o);
    CHECK_THROWS(objective_from_string("NOPE"));
}

TEST_CASE("jsonl round trip preserves every field") {
    SeededRng gen(18);
    std::vector<TrainingExample> examples;
    CorruptOptions opt;
    opt.objectives = {Objective::C2S, Objective::COR, Objective::ContGenqa, Objective::Ssm,
                      Objective::Infill};
    opt.seed = 21;
    std::vector<TaggedSentence> corpus;
    for (int t = 0; t < 300; ++t) corpus.push_back(random_sentence(gen, "rt", t));
    examples = corrupt_corpus(corpus, opt, &lemmas());
    REQUIRE(examples.size() > 1000);

    auto path = (std::filesystem::temp_directory_path() / "conceptlm_obj_rt.jsonl").string();
    CHECK(write_jsonl(examples, path) == examples.size());
    auto back = read_jsonl(path);
    REQUIRE(back.size() == examples.size());
    for (size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].objective == examples[i].objective);
        CHECK(back[i].prefix == examples[i].prefix);
        CHECK(back[i].source == examples[i].source);
        CHECK(back[i].target == examples[i].target);
        CHECK(back[i].meta.source_id == examples[i].meta.source_id);
        CHECK(back[i].meta.index == examples[i].meta.index);
        CHECK(back[i].meta.seed == examples[i].meta.seed);
        CHECK(back[i].meta.distractor_origin == examples[i].meta.distractor_origin);
        CHECK(back[i].meta.real_first == examples[i].meta.real_first);
    }
    std::remove(path.c_str());
}

TEST_CASE("empty jsonl reads as empty") {
    auto path = (std::filesystem::temp_directory_path() / "conceptlm_obj_empty.jsonl").string();
    std::ofstream(path).close();
    CHECK(read_jsonl(path).empty());
    std::remove(path.c_str());
}

TEST_CASE("malformed jsonl lines are reported with numbers") {
    auto path = (std::filesystem::temp_directory_path() / "conceptlm_obj_bad.jsonl").string();
    {
        TrainingExample ex;
        ex.objective = Objective::C2S;
        ex.prefix = "<c2s>";
        ex.source = {"<c2s>", "dog", "cat"};
        ex.target = {"the", "dog", "sees", "the", "cat"};
        ex.meta.source_id = "x";
        write_jsonl({ex}, path);
        std::ofstream app(path, std::ios::app);
        app << "{broken\n";
        app << "{\"objective\": \"C2S\", \"prefix\": \"<cor>\", \"source\": [\"<cor>\"], "
               "\"target\": [\"a\"], \"meta\": {\"source_id\": \"x\", \"index\": 0, \"seed\": 0, "
               "\"distractor_origin\": \"none\"}}\n";
    }
    std::vector<int64_t> bad;
    auto recs = read_jsonl(path, [&](int64_t line, const std::string&) { bad.push_back(line); });
    CHECK(recs.size() == 1);
    CHECK(bad == std::vector<int64_t>{2, 3});  // parse failure, then prefix mismatch
    std::remove(path.c_str());
}

TEST_CASE("corrupt output is identical for any worker count") {
    SeededRng gen(19);
    std::vector<TaggedSentence> corpus;
    for (int t = 0; t < 200; ++t) corpus.push_back(random_sentence(gen, "wk", t));
    CorruptOptions opt;
    opt.objectives = {Objective::C2S, Objective::COR, Objective::ContGenqa, Objective::Ssm,
                      Objective::Infill};
    opt.seed = 7;

    auto p1 = (std::filesystem::temp_directory_path() / "conceptlm_w1.jsonl").string();
    auto p4 = (std::filesystem::temp_directory_path() / "conceptlm_w4.jsonl").string();
    opt.workers = 1;
    write_jsonl(corrupt_corpus(corpus, opt, &lemmas()), p1);
    opt.workers = 4;
    write_jsonl(corrupt_corpus(corpus, opt, &lemmas()), p4);

    std::ifstream a(p1, std::ios::binary), b(p4, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
    CHECK(!sa.empty());
    std::remove(p1.c_str());
    std::remove(p4.c_str());
}

TEST_CASE("every corrupt example validates and keeps sentence identity") {
    SeededRng gen(20);
    std::vector<TaggedSentence> corpus;
    for (int t = 0; t < 100; ++t) corpus.push_back(random_sentence(gen, "val", t));
    CorruptOptions opt;
    opt.objectives = {Objective::C2S, Objective::COR, Objective::ContGenqa, Objective::Ssm,
                      Objective::Infill};
    for (const auto& ex : corrupt_corpus(corpus, opt, &lemmas())) {
        CHECK_NOTHROW(validate_example(ex));
        if (ex.objective == Objective::C2S || ex.objective == Objective::COR ||
            ex.objective == Objective::ContGenqa) {
            CHECK(ex.target == corpus[static_cast<size_t>(ex.meta.index)].tokens);
        }
    }
}

TEST_CASE("validation rejects structural violations") {
    TrainingExample ex;
    ex.objective = Objective::COR;
    ex.prefix = "<c2s>";
    ex.source = {"<c2s>", "a"};
    ex.target = {"a"};
    CHECK_THROWS(validate_example(ex));

    ex.prefix = "<cor>";
    ex.source = {"a", "<cor>"};
    CHECK_THROWS(validate_example(ex));

    ex.source = {"<cor>", "a"};
    ex.target = {};
    CHECK_THROWS(validate_example(ex));

    ex.target = {"a"};
    CHECK_NOTHROW(validate_example(ex));

    ex.meta.distractor_origin = DistractorOrigin::Shuffle;
    CHECK_THROWS(validate_example(ex));
}
