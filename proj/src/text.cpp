#include "conceptlm/text.hpp"

#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace conceptlm {

using json = nlohmann::json;

const char* to_string(PosTag t) {
    switch (t) {
        case PosTag::Noun: return "NOUN";
        case PosTag::Propn: return "PROPN";
        case PosTag::Verb: return "VERB";
        case PosTag::Other: return "OTHER";
    }
    return "OTHER";
}

PosTag pos_tag_from_string(std::string_view s) {
    if (s == "NOUN") return PosTag::Noun;
    if (s == "PROPN") return PosTag::Propn;
    if (s == "VERB") return PosTag::Verb;
    if (s == "OTHER") return PosTag::Other;
    throw std::runtime_error("unknown POS tag: " + std::string(s));
}

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && is_space(s[b])) ++b;
    while (e > b && is_space(s[e - 1])) --e;
    return s.substr(b, e - b);
}

std::string flatten_whitespace(std::string s) {
    for (char& c : s) {
        if (c == '\n' || c == '\r' || c == '\t') c = ' ';
    }
    return s;
}

const std::array<std::string_view, 5> kAbbrev = {"Mr.", "Dr.", "U.S.", "e.g.", "i.e."};

// True when the terminator at position i ends an abbreviation from the guard
// list rather than a sentence.
bool ends_abbreviation(const std::string& doc, size_t i) {
    for (std::string_view a : kAbbrev) {
        if (i + 1 >= a.size()) {
            size_t start = i + 1 - a.size();
            if (doc.compare(start, a.size(), a) == 0) {
                // Must begin at a word boundary.
                if (start == 0 || is_space(doc[start - 1]) || doc[start - 1] == '(') return true;
            }
        }
    }
    return false;
}

constexpr std::string_view kPunct = ".,!?;:'\"()";

bool is_punct(char c) { return kPunct.find(c) != std::string_view::npos; }

}  // namespace

std::vector<std::string> segment_sentences(const std::string& document) {
    std::vector<std::string> out;
    size_t start = 0;
    for (size_t i = 0; i < document.size(); ++i) {
        char c = document[i];
        if (c != '.' && c != '!' && c != '?') continue;
        if (ends_abbreviation(document, i)) continue;
        // Look past the terminator (and any closing quote/paren hugging it).
        size_t j = i + 1;
        while (j < document.size() && (document[j] == '"' || document[j] == '\'' || document[j] == ')')) ++j;
        size_t split_end = j;
        if (j >= document.size()) {
            std::string s = trim(document.substr(start, split_end - start));
            if (!s.empty()) out.push_back(s);
            start = split_end;
            break;
        }
        if (!is_space(document[j])) continue;
        while (j < document.size() && is_space(document[j])) ++j;
        if (j < document.size() && !std::isupper(static_cast<unsigned char>(document[j]))) continue;
        std::string s = trim(document.substr(start, split_end - start));
        if (!s.empty()) out.push_back(s);
        start = j;
        i = j - 1;
    }
    std::string tail = trim(document.substr(start));
    if (!tail.empty()) out.push_back(tail);
    return out;
}

// Punctuation detaches at word edges only; interior characters stay put so
// that "U.S." or "don't" survive a tokenize/detokenize round trip.
std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> tokens;
    std::string word;
    auto emit = [&] {
        if (word.empty()) return;
        size_t b = 0, e = word.size();
        while (b < e && is_punct(word[b])) ++b;
        size_t core_end = e;
        while (core_end > b && is_punct(word[core_end - 1])) --core_end;
        for (size_t i = 0; i < b; ++i) tokens.push_back(std::string(1, word[i]));
        if (core_end > b) {
            std::string core = word.substr(b, core_end - b);
            if (core.size() >= 3 && core[core.size() - 2] == '\'' &&
                (core.back() == 's' || core.back() == 'S')) {
                tokens.push_back(core.substr(0, core.size() - 2));
                tokens.push_back(core.substr(core.size() - 2));
            } else {
                tokens.push_back(std::move(core));
            }
        }
        for (size_t i = core_end; i < e; ++i) tokens.push_back(std::string(1, word[i]));
        word.clear();
    };
    for (char c : text) {
        if (is_space(c)) {
            emit();
        } else {
            word.push_back(c);
        }
    }
    emit();
    return tokens;
}

std::string detokenize(const std::vector<std::string>& tokens) {
    constexpr std::string_view no_space_before = ".,!?;:)\"'";
    std::string out;
    bool suppress_next_space = false;
    for (size_t i = 0; i < tokens.size(); ++i) {
        const std::string& t = tokens[i];
        bool attach = !out.empty() &&
                      ((t.size() == 1 && no_space_before.find(t[0]) != std::string_view::npos) ||
                       t == "'s" || t == "'S");
        if (i > 0 && !attach && !suppress_next_space) out.push_back(' ');
        out += t;
        suppress_next_space = (t == "(");
    }
    return out;
}

namespace {

void ingest_plain(const std::string& path, std::vector<IngestRecord>& out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IngestError("read failure: " + path);
    std::string content = ss.str();

    std::string stem = std::filesystem::path(path).stem().string();

    // Documents are separated by blank lines.
    std::vector<std::string> docs;
    std::string cur;
    std::istringstream lines(content);
    std::string line;
    auto flush_doc = [&] {
        std::string t = trim(cur);
        if (!t.empty()) docs.push_back(t);
        cur.clear();
    };
    while (std::getline(lines, line)) {
        if (trim(line).empty()) {
            flush_doc();
        } else {
            if (!cur.empty()) cur += ' ';
            cur += trim(line);
        }
    }
    flush_doc();

    for (size_t d = 0; d < docs.size(); ++d) {
        std::string source_id = docs.size() == 1 ? stem : stem + "#" + std::to_string(d);
        int64_t index = 0;
        for (std::string& s : segment_sentences(docs[d])) {
            IngestRecord rec;
            rec.sentence = RawSentence{std::move(s), source_id, index++};
            out.push_back(std::move(rec));
        }
    }
}

void ingest_jsonl(const std::string& path, std::vector<IngestRecord>& out,
                  const std::function<void(int64_t, const std::string&)>& on_error) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open file: " + path);
    std::string stem = std::filesystem::path(path).stem().string();
    std::string line;
    int64_t lineno = 0;
    int64_t index = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const std::exception& e) {
            if (on_error) on_error(lineno, e.what());
            continue;
        }
        std::string source_id = j.value("source_id", stem);
        if (j.contains("tokens") && j.contains("tags")) {
            IngestRecord rec;
            try {
                rec.gold_tokens = j["tokens"].get<std::vector<std::string>>();
                for (const auto& t : j["tags"]) rec.gold_tags.push_back(pos_tag_from_string(t.get<std::string>()));
                if (rec.gold_tokens.size() != rec.gold_tags.size() || rec.gold_tokens.empty())
                    throw std::runtime_error("tokens/tags length mismatch");
            } catch (const std::exception& e) {
                if (on_error) on_error(lineno, e.what());
                continue;
            }
            std::string text = j.contains("text") && j["text"].is_string()
                                   ? flatten_whitespace(j["text"].get<std::string>())
                                   : detokenize(rec.gold_tokens);
            rec.sentence = RawSentence{trim(text), source_id, index++};
            rec.has_gold = true;
            out.push_back(std::move(rec));
        } else if (j.contains("text") && j["text"].is_string()) {
            std::string text = flatten_whitespace(j["text"].get<std::string>());
            for (std::string& s : segment_sentences(text)) {
                IngestRecord rec;
                rec.sentence = RawSentence{std::move(s), source_id, index++};
                out.push_back(std::move(rec));
            }
        } else {
            if (on_error) on_error(lineno, "missing string field 'text'");
        }
    }
    if (in.bad()) throw IngestError("read failure: " + path);
}

}  // namespace

std::vector<IngestRecord> ingest(const std::string& path, IngestFormat format,
                                 const std::function<void(int64_t, const std::string&)>& on_error) {
    std::vector<IngestRecord> out;
    if (format == IngestFormat::PlainText) {
        ingest_plain(path, out);
    } else {
        ingest_jsonl(path, out, on_error);
    }
    return out;
}

}  // namespace conceptlm
