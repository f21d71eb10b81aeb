#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "conceptlm/errors.hpp"
#include "conceptlm/tagger.hpp"
#include "conceptlm/text.hpp"

using namespace conceptlm;

namespace {
const LexiconTagger& lexicon() {
    static LexiconTagger t = LexiconTagger::load(CONCEPTLM_DATA_DIR "/lexicon.tsv");
    return t;
}
}  // namespace

TEST_CASE("content words get noun and verb tags") {
    auto tags = lexicon().tag({"apple", "grows", "on", "the", "tree"});
    CHECK(tags == std::vector<PosTag>{PosTag::Noun, PosTag::Verb, PosTag::Other, PosTag::Other,
                                      PosTag::Noun});
}

TEST_CASE("function words are OTHER") {
    auto tags = lexicon().tag({"the", "of", "and"});
    CHECK(tags == std::vector<PosTag>{PosTag::Other, PosTag::Other, PosTag::Other});
}

TEST_CASE("capitalized lookup falls back to lowercase") {
    auto tags = lexicon().tag({"Apples", "Grow"});
    CHECK(tags[0] == PosTag::Noun);
    CHECK(tags[1] == PosTag::Verb);
}

TEST_CASE("unknown capitalized non-initial token becomes PROPN") {
    auto tags = lexicon().tag({"the", "Xylophonist", "waved"});
    CHECK(tags[1] == PosTag::Propn);
}

TEST_CASE("unknown sentence-initial token becomes OTHER") {
    auto tags = lexicon().tag({"Xylophonist", "waved"});
    CHECK(tags[0] == PosTag::Other);
}

TEST_CASE("missing lexicon file is a configuration error") {
    CHECK_THROWS_AS(LexiconTagger::load("/nonexistent/lexicon.tsv"), ConfigurationError);
}

TEST_CASE("one tag per token") {
    for (int n = 1; n <= 12; ++n) {
        std::vector<std::string> toks(n, "word");
        CHECK(lexicon().tag(toks).size() == static_cast<size_t>(n));
    }
}

TEST_CASE("gold tagger passes its tags through and checks length") {
    GoldTagger g({PosTag::Noun, PosTag::Verb});
    CHECK(g.tag({"apple", "grows"}) == std::vector<PosTag>{PosTag::Noun, PosTag::Verb});
    CHECK_THROWS(g.tag({"apple"}));
}

TEST_CASE("lexicon accuracy on the hand-tagged file is at least 0.85") {
    auto recs = ingest(CONCEPTLM_TEST_DATA_DIR "/tagged_100.jsonl", IngestFormat::Jsonl);
    REQUIRE(recs.size() == 100);
    size_t correct = 0, total = 0;
    for (const auto& r : recs) {
        REQUIRE(r.has_gold);
        auto pred = lexicon().tag(r.gold_tokens);
        for (size_t i = 0; i < pred.size(); ++i) {
            correct += pred[i] == r.gold_tags[i];
            ++total;
        }
    }
    double acc = static_cast<double>(correct) / static_cast<double>(total);
    INFO("accuracy ", acc, " over ", total, " tokens");
    CHECK(acc >= 0.85);
    CHECK(acc < 1.0);  // the fixture contains genuinely ambiguous tokens
}

TEST_CASE("tag_record prefers gold tags when present") {
    IngestRecord rec;
    rec.sentence = RawSentence{"apple grows", "t", 0};
    rec.gold_tokens = {"apple", "grows"};
    rec.gold_tags = {PosTag::Noun, PosTag::Verb};
    rec.has_gold = true;
    auto ts = tag_record(rec, lexicon());
    CHECK(ts.tokens == rec.gold_tokens);
    CHECK(ts.tags == rec.gold_tags);

    IngestRecord plain;
    plain.sentence = RawSentence{"apple grows on the tree", "t", 1};
    auto ts2 = tag_record(plain, lexicon());
    CHECK(ts2.tokens == std::vector<std::string>{"apple", "grows", "on", "the", "tree"});
    CHECK(ts2.tags[0] == PosTag::Noun);
}
