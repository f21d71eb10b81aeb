#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "conceptlm/text.hpp"

namespace conceptlm {

// Word-level vocabulary with a fixed reserved block at the low ids:
//   0..3      <pad> <bos> <eos> <unk>
//   4..10     task prefixes <c2s> <cor> <cont> <tf> <ssm> <infill> and <sep>
//   11..110   sentinels <M0>..<M99>
//   111..116  contrastive answer tokens 1: 2: 1 2 true false
// Non-reserved ids follow in frequency-descending, then lexicographic order.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kNumSentinels = 100;

    static const std::vector<std::string>& reserved_tokens();
    static int reserved_size();
    static std::string sentinel(int k);  // "<M0>".."<M99>"

    // Builds from token counts: tokens with frequency >= min_freq, ordered by
    // frequency descending then lexicographic. Throws on an empty corpus.
    static Vocabulary build(const std::map<std::string, int64_t>& counts, int64_t min_freq);

    // Convenience over tagged sentences.
    static Vocabulary build(const std::vector<TaggedSentence>& corpus, int64_t min_freq);

    static Vocabulary load(const std::string& path);
    void save(const std::string& path) const;

    // Exact match, then lowercase fallback, then <unk>.
    int id(const std::string& token) const;
    // Exact/lowercase lookup without the <unk> fallback; -1 when absent.
    int find(const std::string& token) const;
    const std::string& token(int id) const;

    std::vector<int> encode(const std::vector<std::string>& tokens) const;
    std::vector<std::string> decode(const std::vector<int>& ids) const;

    int size() const { return static_cast<int>(id_to_token_.size()); }

private:
    Vocabulary();
    void append(const std::string& token);

    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
};

}  // namespace conceptlm
