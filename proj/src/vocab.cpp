#include "conceptlm/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

namespace conceptlm {

namespace {

std::string to_lower(const std::string& s) {
    std::string out = s;
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::vector<std::string> make_reserved() {
    std::vector<std::string> r = {"<pad>", "<bos>", "<eos>", "<unk>",
                                  "<c2s>", "<cor>", "<cont>", "<tf>", "<ssm>", "<infill>", "<sep>"};
    for (int k = 0; k < Vocabulary::kNumSentinels; ++k) r.push_back("<M" + std::to_string(k) + ">");
    for (const char* t : {"1:", "2:", "1", "2", "true", "false"}) r.emplace_back(t);
    return r;
}

bool is_reserved(const std::string& token) {
    const auto& r = Vocabulary::reserved_tokens();
    return std::find(r.begin(), r.end(), token) != r.end();
}

}  // namespace

const std::vector<std::string>& Vocabulary::reserved_tokens() {
    static const std::vector<std::string> r = make_reserved();
    return r;
}

int Vocabulary::reserved_size() { return static_cast<int>(reserved_tokens().size()); }

std::string Vocabulary::sentinel(int k) { return "<M" + std::to_string(k) + ">"; }

Vocabulary::Vocabulary() {
    for (const std::string& t : reserved_tokens()) append(t);
}

void Vocabulary::append(const std::string& token) {
    token_to_id_.emplace(token, static_cast<int>(id_to_token_.size()));
    id_to_token_.push_back(token);
}

Vocabulary Vocabulary::build(const std::map<std::string, int64_t>& counts, int64_t min_freq) {
    if (counts.empty()) throw std::runtime_error("build_vocab: empty corpus");
    std::vector<std::pair<std::string, int64_t>> kept;
    for (const auto& [tok, n] : counts) {
        if (n >= min_freq && !is_reserved(tok)) kept.emplace_back(tok, n);
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [tok, n] : kept) v.append(tok);
    return v;
}

Vocabulary Vocabulary::build(const std::vector<TaggedSentence>& corpus, int64_t min_freq) {
    if (corpus.empty()) throw std::runtime_error("build_vocab: empty corpus");
    std::map<std::string, int64_t> counts;
    for (const TaggedSentence& s : corpus)
        for (const std::string& t : s.tokens) ++counts[t];
    return build(counts, min_freq);
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocabulary file: " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("#% ", 0) == 0) continue;  // header comment
        if (line.empty()) continue;
        if (v.token_to_id_.count(line))
            throw std::runtime_error("duplicate vocabulary token: " + line);
        v.append(line);
    }
    return v;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write vocabulary file: " + path);
    out << "#% word vocabulary; line number = id - " << reserved_size() << "\n";
    out << "#% reserved ids 0.." << reserved_size() - 1 << ": <pad> <bos> <eos> <unk>, task prefixes,"
        << " <sep>, sentinels <M0>..<M99>, answer tokens 1: 2: 1 2 true false\n";
    for (size_t i = static_cast<size_t>(reserved_size()); i < id_to_token_.size(); ++i)
        out << id_to_token_[i] << "\n";
    if (!out) throw std::runtime_error("write failure: " + path);
}

int Vocabulary::find(const std::string& token) const {
    auto it = token_to_id_.find(token);
    if (it != token_to_id_.end()) return it->second;
    it = token_to_id_.find(to_lower(token));
    if (it != token_to_id_.end()) return it->second;
    return -1;
}

int Vocabulary::id(const std::string& token) const {
    int i = find(token);
    return i >= 0 ? i : kUnk;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id out of range: " + std::to_string(id));
    return id_to_token_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const std::string& t : tokens) ids.push_back(id(t));
    return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
    std::vector<std::string> tokens;
    tokens.reserve(ids.size());
    for (int i : ids) tokens.push_back(token(i));
    return tokens;
}

}  // namespace conceptlm
