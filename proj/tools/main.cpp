#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "conceptlm/concepts.hpp"
#include "conceptlm/errors.hpp"
#include "conceptlm/eval.hpp"
#include "conceptlm/model.hpp"
#include "conceptlm/objectives.hpp"
#include "conceptlm/rng.hpp"
#include "conceptlm/tagger.hpp"
#include "conceptlm/text.hpp"
#include "conceptlm/trainer.hpp"
#include "conceptlm/vocab.hpp"

namespace {

using json = nlohmann::json;
using namespace conceptlm;

struct CorpusCli {
    std::string input;
    std::string format = "auto";
    std::string lexicon = "data/lexicon.tsv";
    int min_tokens = 5;
    int max_tokens = 64;
};

void add_corpus_options(CLI::App* cmd, CorpusCli& o) {
    cmd->add_option("--input", o.input, "corpus file (plain text or JSONL)")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--format", o.format, "input format, auto selects by extension")
        ->check(CLI::IsMember({"auto", "plain", "jsonl"}));
    cmd->add_option("--lexicon", o.lexicon, "token<TAB>tag table for sentences without gold tags");
    cmd->add_option("--min-tokens", o.min_tokens, "drop sentences shorter than this");
    cmd->add_option("--max-tokens", o.max_tokens, "drop sentences longer than this");
}

IngestFormat resolve_format(const CorpusCli& o) {
    if (o.format == "plain") return IngestFormat::PlainText;
    if (o.format == "jsonl") return IngestFormat::Jsonl;
    return std::filesystem::path(o.input).extension() == ".jsonl" ? IngestFormat::Jsonl
                                                                  : IngestFormat::PlainText;
}

json corpus_config(const CorpusCli& o) {
    return {{"input", o.input},
            {"format", o.format},
            {"lexicon", o.lexicon},
            {"min_tokens", o.min_tokens},
            {"max_tokens", o.max_tokens}};
}

// Consulted only when a record lacks gold tags and no lexicon was loadable.
struct NullTagger : Tagger {
    std::vector<PosTag> tag(const std::vector<std::string>&) const override {
        throw ConfigurationError("no tagger available");
    }
};

struct LoadedCorpus {
    std::vector<TaggedSentence> sentences;
    int64_t ingested = 0;
    int64_t length_filtered = 0;
    int64_t bad_lines = 0;
};

LoadedCorpus load_corpus(const CorpusCli& o) {
    LoadedCorpus out;
    auto records = ingest(o.input, resolve_format(o), [&](int64_t line, const std::string& msg) {
        ++out.bad_lines;
        std::cerr << o.input << ":" << line << ": " << msg << "\n";
    });
    out.ingested = static_cast<int64_t>(records.size());
    std::optional<LexiconTagger> lex;
    NullTagger none;
    for (const auto& rec : records) {
        if (!rec.has_gold && !lex) lex = LexiconTagger::load(o.lexicon);
        TaggedSentence ts =
            tag_record(rec, rec.has_gold ? static_cast<const Tagger&>(none) : *lex);
        int n = static_cast<int>(ts.size());
        if (n < o.min_tokens || n > o.max_tokens) {
            ++out.length_filtered;
            continue;
        }
        out.sentences.push_back(std::move(ts));
    }
    return out;
}

void write_run_files(const std::string& beside, const json& config, const json& summary) {
    auto dir = std::filesystem::path(beside).parent_path();
    if (dir.empty()) dir = ".";
    std::filesystem::create_directories(dir);
    std::ofstream c(dir / "config.resolved.json");
    c << config.dump(2) << "\n";
    std::ofstream s(dir / "summary.json");
    s << summary.dump(2) << "\n";
    if (!c || !s) throw std::runtime_error("cannot write run files in " + dir.string());
}

json corpus_summary(const LoadedCorpus& corpus) {
    return {{"sentences_ingested", corpus.ingested},
            {"sentences_kept", static_cast<int64_t>(corpus.sentences.size())},
            {"length_filtered", corpus.length_filtered},
            {"bad_lines", corpus.bad_lines}};
}

int cmd_ingest(const CorpusCli& co, const std::string& output, const std::string& vocab_out,
               int64_t min_freq) {
    auto corpus = load_corpus(co);
    if (corpus.sentences.empty()) throw IngestError("no sentences survived ingestion");

    std::ofstream f(output);
    if (!f) throw IngestError("cannot write " + output);
    for (const auto& s : corpus.sentences) {
        json tags = json::array();
        for (auto t : s.tags) tags.push_back(to_string(t));
        json j{{"text", s.raw.text},
               {"tokens", s.tokens},
               {"tags", std::move(tags)},
               {"source_id", s.raw.source_id},
               {"index", s.raw.index}};
        f << j.dump() << "\n";
    }
    if (!f) throw IngestError("write failed: " + output);

    json config = corpus_config(co);
    config["subcommand"] = "ingest";
    config["output"] = output;
    json summary = corpus_summary(corpus);
    summary["subcommand"] = "ingest";
    summary["output"] = output;
    if (!vocab_out.empty()) {
        auto vocab = Vocabulary::build(corpus.sentences, min_freq);
        vocab.save(vocab_out);
        config["vocab_out"] = vocab_out;
        config["min_freq"] = min_freq;
        summary["vocab_size"] = vocab.size();
    }
    write_run_files(output, config, summary);
    std::cout << "ingest: " << corpus.sentences.size() << " sentences -> " << output << "\n";
    return 0;
}

struct CorruptCli {
    CorpusCli corpus;
    std::string output;
    std::string objectives = "c2s,cor,cont";
    std::string concept_classes = "both";
    std::string cont_format = "genqa";
    uint64_t seed = 0;
    int min_concepts = 2;
    double corrupt_rate = 0.15;
    double mean_span = 3.0;
    int workers = 1;
    bool no_lemmatize = false;
    std::string lemma_dir = "data";
};

std::vector<Objective> parse_objectives(const std::string& csv, ContrastiveFormat fmt) {
    std::vector<Objective> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        if (item == "c2s")
            out.push_back(Objective::C2S);
        else if (item == "cor")
            out.push_back(Objective::COR);
        else if (item == "cont")
            out.push_back(objective_of(fmt));
        else if (item == "ssm")
            out.push_back(Objective::Ssm);
        else if (item == "infill")
            out.push_back(Objective::Infill);
        else
            throw CLI::ValidationError("--objectives", "unknown objective: " + item);
    }
    if (out.empty()) throw CLI::ValidationError("--objectives", "empty objective list");
    return out;
}

ConceptClasses parse_concept_classes(const std::string& s) {
    if (s == "both") return ConceptClasses::Both;
    if (s == "nouns") return ConceptClasses::NounsOnly;
    if (s == "verbs") return ConceptClasses::VerbsOnly;
    throw CLI::ValidationError("--concept-classes", "expected both|nouns|verbs, got " + s);
}

int cmd_corrupt(const CorruptCli& c) {
    auto corpus = load_corpus(c.corpus);
    if (corpus.sentences.empty()) throw IngestError("no sentences survived ingestion");

    CorruptOptions opt;
    opt.cont_format = contrastive_format_from_string(c.cont_format);
    opt.objectives = parse_objectives(c.objectives, opt.cont_format);
    opt.concept_classes = parse_concept_classes(c.concept_classes);
    opt.seed = c.seed;
    opt.min_concepts = c.min_concepts;
    opt.corrupt_rate = c.corrupt_rate;
    opt.mean_span = c.mean_span;
    opt.lemmatize = !c.no_lemmatize;
    opt.workers = c.workers;

    std::optional<Lemmatizer> lem;
    bool wants_c2s = std::count(opt.objectives.begin(), opt.objectives.end(), Objective::C2S) > 0;
    if (opt.lemmatize && wants_c2s) lem = Lemmatizer::load(c.lemma_dir);

    auto examples = corrupt_corpus(corpus.sentences, opt, lem ? &*lem : nullptr);
    for (const auto& ex : examples) validate_example(ex);
    if (write_jsonl(examples, c.output) != examples.size())
        throw std::runtime_error("short write: " + c.output);

    std::map<std::string, int64_t> produced;
    for (const auto& ex : examples) ++produced[to_string(ex.objective)];
    json per_objective = json::object(), skipped = json::object();
    for (Objective o : opt.objectives) {
        const char* name = to_string(o);
        per_objective[name] = produced[name];
        skipped[name] = static_cast<int64_t>(corpus.sentences.size()) - produced[name];
    }

    json config = corpus_config(c.corpus);
    config["subcommand"] = "corrupt";
    config["output"] = c.output;
    config["objectives"] = c.objectives;
    config["concept_classes"] = c.concept_classes;
    config["cont_format"] = c.cont_format;
    config["seed"] = c.seed;
    config["min_concepts"] = c.min_concepts;
    config["corrupt_rate"] = c.corrupt_rate;
    config["mean_span"] = c.mean_span;
    config["lemmatize"] = opt.lemmatize;
    config["lemma_dir"] = c.lemma_dir;
    config["workers"] = c.workers;

    json summary = corpus_summary(corpus);
    summary["subcommand"] = "corrupt";
    summary["output"] = c.output;
    summary["examples"] = static_cast<int64_t>(examples.size());
    summary["per_objective"] = per_objective;
    summary["skipped"] = skipped;
    write_run_files(c.output, config, summary);
    std::cout << "corrupt: " << examples.size() << " examples from " << corpus.sentences.size()
              << " sentences -> " << c.output << "\n";
    return 0;
}

// Structured run configuration shared by the training-side subcommands.
// Every section is optional; direct flags override config entries.
struct RunConfig {
    json paths = json::object();
    json model;
    json plan;
    json objectives;
    json eval;
};

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigurationError("cannot open config file: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigurationError("config: " + std::string(e.what()));
    }
    if (!j.is_object()) throw ConfigurationError("config: top level must be an object");

    RunConfig rc;
    for (const auto& [key, value] : j.items()) {
        if (key == "paths") {
            if (!value.is_object()) throw ConfigurationError("config: paths must be an object");
            for (const auto& [pk, pv] : value.items()) {
                if (pk != "corpus" && pk != "vocab" && pk != "lexicon" && pk != "data" &&
                    pk != "output_dir" && pk != "resume" && pk != "ckpt")
                    throw ConfigurationError("config: unknown field 'paths." + pk + "'");
                if (!pv.is_string())
                    throw ConfigurationError("config: paths." + pk + " must be a string");
            }
            rc.paths = value;
        } else if (key == "eval") {
            if (!value.is_object()) throw ConfigurationError("config: eval must be an object");
            for (const auto& [ek, ev] : value.items()) {
                if (ek == "seed") {
                    if (!ev.is_number())
                        throw ConfigurationError("config: eval.seed must be a number");
                } else if (ek == "metrics" || ek == "probe_data" || ek == "probe_train_data" ||
                           ek == "out") {
                    if (!ev.is_string())
                        throw ConfigurationError("config: eval." + ek + " must be a string");
                } else {
                    throw ConfigurationError("config: unknown field 'eval." + ek + "'");
                }
            }
            rc.eval = value;
        } else if (key == "model") rc.model = value;
        else if (key == "plan") rc.plan = value;
        else if (key == "objectives") rc.objectives = value;
        else throw ConfigurationError("config: unknown field '" + key + "'");
    }
    return rc;
}

std::string need_path(const std::string& flag_value, const RunConfig& rc, const char* key) {
    if (!flag_value.empty()) return flag_value;
    if (rc.paths.contains(key)) return rc.paths[key].get<std::string>();
    throw ConfigurationError(std::string("missing required path: paths.") + key);
}

std::string need_file(const std::string& flag_value, const RunConfig& rc, const char* key) {
    std::string p = need_path(flag_value, rc, key);
    if (!std::filesystem::exists(p))
        throw ConfigurationError(std::string("paths.") + key + ": no such file: " + p);
    return p;
}

// The model section overrides the micro-model defaults field by field;
// vocab_size always comes from the vocabulary file.
ModelConfig model_config_from(const json& section) {
    ModelConfig cfg;
    if (section.is_null()) return cfg;
    if (!section.is_object()) throw ConfigurationError("config: model must be an object");
    try {
        for (const auto& [key, value] : section.items()) {
            if (key == "d_model") cfg.d_model = value.get<int>();
            else if (key == "n_heads") cfg.n_heads = value.get<int>();
            else if (key == "n_enc_layers") cfg.n_enc_layers = value.get<int>();
            else if (key == "n_dec_layers") cfg.n_dec_layers = value.get<int>();
            else if (key == "d_ffn") cfg.d_ffn = value.get<int>();
            else if (key == "max_seq_len") cfg.max_seq_len = value.get<int>();
            else if (key == "dropout_rate") cfg.dropout_rate = value.get<double>();
            else throw ConfigurationError("config: unknown field 'model." + key + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigurationError("config: model: " + std::string(e.what()));
    }
    return cfg;
}

struct PretrainCli {
    std::string config_path;
    std::string plan_path;
    std::string data;
    std::string vocab;
    std::string stage = "both";
    std::string resume;
    std::string out_dir;
    uint64_t seed = 0;
};

std::vector<TrainingExample> load_examples(const std::string& path, int64_t& bad_lines) {
    auto examples = read_jsonl(path, [&](int64_t line, const std::string& msg) {
        ++bad_lines;
        std::cerr << path << ":" << line << ": " << msg << "\n";
    });
    for (const auto& ex : examples) validate_example(ex);
    if (examples.empty()) throw ConfigurationError("no usable examples in " + path);
    return examples;
}

int cmd_pretrain(const PretrainCli& p, bool seed_given) {
    RunConfig rc = p.config_path.empty() ? RunConfig{} : load_run_config(p.config_path);
    const std::string data_path = need_file(p.data, rc, "data");
    const std::string vocab_path = need_file(p.vocab, rc, "vocab");
    const std::string out_dir = need_path(p.out_dir, rc, "output_dir");
    std::string resume = p.resume;
    if (resume.empty() && rc.paths.contains("resume")) resume = rc.paths["resume"];

    json plan_json;
    if (!p.plan_path.empty()) {
        std::ifstream in(p.plan_path);
        if (!in) throw ConfigurationError("cannot open plan file: " + p.plan_path);
        std::stringstream ss;
        ss << in.rdbuf();
        plan_json = json::parse(ss.str(), nullptr, false);
        if (plan_json.is_discarded())
            throw ConfigurationError("train plan: invalid json in " + p.plan_path);
    } else if (!rc.plan.is_null()) {
        plan_json = rc.plan;
    } else {
        throw ConfigurationError("missing train plan: pass --plan or config.plan");
    }
    TrainPlan plan = plan_from_json(plan_json.dump());
    if (seed_given) plan.seed = p.seed;
    else if (!plan_json.contains("seed"))
        throw ConfigurationError("train plan: seed is mandatory (set plan.seed or --seed)");

    auto vocab = Vocabulary::load(vocab_path);
    int64_t bad_lines = 0;
    auto examples = load_examples(data_path, bad_lines);

    Model model = [&] {
        if (!resume.empty()) {
            auto [params, cfg] = load_checkpoint(resume);
            if (cfg.vocab_size != vocab.size())
                throw ConfigurationError("checkpoint vocab_size " +
                                         std::to_string(cfg.vocab_size) +
                                         " does not match vocabulary " + vocab_path);
            return Model{cfg, std::move(params)};
        }
        ModelConfig cfg = model_config_from(rc.model);
        cfg.vocab_size = vocab.size();
        cfg.validate();
        return Model::init(cfg, derive_seed(plan.seed, "init"));
    }();

    std::filesystem::create_directories(out_dir);
    const auto out = std::filesystem::path(out_dir);
    const std::string ckpt_path = (out / "model.ckpt").string();

    const bool run_mix = p.stage != "joint";
    const bool run_joint = p.stage != "mix";
    json stages = json::object();
    auto finish_stage = [&](TrainReport& report, const std::string& csv_name) {
        report.checkpoint_path = ckpt_path;
        write_report_csv(report, (out / csv_name).string());
        json s = json::parse(report_summary_json(report));
        stages[report.stage] = std::move(s);
        std::cout << "pretrain " << report.stage << ": " << report.steps.size() << " steps";
        if (!report.steps.empty())
            std::cout << ", final total " << report.steps.back().total;
        std::cout << "\n";
    };

    if (run_mix) {
        TrainReport report = stage_mix(model, examples, vocab, plan);
        finish_stage(report, "train_mix.csv");
    }
    if (run_joint) {
        const bool warm = run_mix || !resume.empty();
        TrainReport report = stage_joint(model, examples, vocab, plan, warm);
        finish_stage(report, "train_joint.csv");
    }
    save_checkpoint(model.params, model.cfg, ckpt_path);

    json config{{"subcommand", "pretrain"},
                {"stage", p.stage},
                {"paths", json{{"data", data_path},
                               {"vocab", vocab_path},
                               {"output_dir", out_dir},
                               {"resume", resume}}},
                {"model", json::parse(config_to_json(model.cfg))},
                {"plan", json::parse(plan_to_json(plan))}};
    json summary{{"subcommand", "pretrain"},
                 {"stage", p.stage},
                 {"examples", static_cast<int64_t>(examples.size())},
                 {"bad_lines", bad_lines},
                 {"stages", std::move(stages)},
                 {"checkpoint", ckpt_path}};
    write_run_files(ckpt_path, config, summary);
    std::cout << "pretrain: checkpoint -> " << ckpt_path << "\n";
    return 0;
}

Model load_model_for(const std::string& ckpt_path, const Vocabulary& vocab,
                     const std::string& vocab_path) {
    auto [params, cfg] = load_checkpoint(ckpt_path);
    if (cfg.vocab_size != vocab.size())
        throw ConfigurationError("checkpoint vocab_size " + std::to_string(cfg.vocab_size) +
                                 " does not match vocabulary " + vocab_path);
    return Model{cfg, std::move(params)};
}

// Probe corpora must carry gold tags; the probe depends on exact concept
// positions, not on lexicon guesses.
std::vector<TaggedSentence> load_gold_sentences(const std::string& path) {
    std::vector<TaggedSentence> out;
    NullTagger none;
    auto records = ingest(path, IngestFormat::Jsonl, [&](int64_t line, const std::string& msg) {
        std::cerr << path << ":" << line << ": " << msg << "\n";
    });
    for (const auto& rec : records) {
        if (!rec.has_gold)
            throw ConfigurationError("probe data needs gold tags: " + path);
        out.push_back(tag_record(rec, none));
    }
    if (out.empty()) throw ConfigurationError("no sentences in " + path);
    return out;
}

struct EvaluateCli {
    std::string config_path;
    std::string ckpt;
    std::string data;
    std::string vocab;
    std::string metrics = "em,f1,bleu4";
    std::string probe_data;
    std::string probe_train_data;
    std::string out;
    uint64_t seed = 0;
};

struct MetricSet {
    bool em = false, f1 = false, bleu = false, disc = false, probe = false;

    bool generation() const { return em || f1 || bleu; }
};

MetricSet parse_metrics(const std::string& csv) {
    MetricSet m;
    std::stringstream ss(csv);
    std::string item;
    bool any = false;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        any = true;
        if (item == "em") m.em = true;
        else if (item == "f1") m.f1 = true;
        else if (item == "bleu4") m.bleu = true;
        else if (item == "disc") m.disc = true;
        else if (item == "probe") m.probe = true;
        else throw CLI::ValidationError("--metrics", "unknown metric: " + item);
    }
    if (!any) throw CLI::ValidationError("--metrics", "empty metric list");
    return m;
}

std::string eval_entry(const RunConfig& rc, const char* key) {
    if (rc.eval.is_object() && rc.eval.contains(key)) return rc.eval[key].get<std::string>();
    return "";
}

int cmd_evaluate(const EvaluateCli& e, bool metrics_given, bool seed_given) {
    RunConfig rc = e.config_path.empty() ? RunConfig{} : load_run_config(e.config_path);

    std::string metrics_csv = e.metrics;
    if (!metrics_given && !eval_entry(rc, "metrics").empty()) metrics_csv = eval_entry(rc, "metrics");
    MetricSet metrics = parse_metrics(metrics_csv);

    const std::string ckpt_path = need_file(e.ckpt, rc, "ckpt");
    const std::string vocab_path = need_file(e.vocab, rc, "vocab");
    std::string out_path = e.out.empty() ? eval_entry(rc, "out") : e.out;
    if (out_path.empty()) out_path = "report.json";

    auto vocab = Vocabulary::load(vocab_path);
    Model model = load_model_for(ckpt_path, vocab, vocab_path);

    EvalReport report;
    json summary{{"subcommand", "evaluate"}, {"metrics", metrics_csv}};
    std::string data_path, probe_path, probe_train_path;
    int64_t bad_lines = 0;

    if (metrics.generation() || metrics.disc) {
        data_path = need_file(e.data, rc, "data");
        auto examples = load_examples(data_path, bad_lines);
        summary["examples"] = static_cast<int64_t>(examples.size());
        summary["bad_lines"] = bad_lines;
        if (metrics.generation()) report.generation = eval_generation(model, examples, vocab);
        if (metrics.disc) {
            auto disc = eval_discriminator(model, examples, vocab);
            if (disc.evaluated == 0)
                throw ConfigurationError("no scorable CONT_GENQA examples in " + data_path);
            report.discriminator = std::move(disc);
        }
    }
    if (metrics.probe) {
        probe_path = !e.probe_data.empty() ? e.probe_data : eval_entry(rc, "probe_data");
        if (probe_path.empty())
            throw ConfigurationError("missing required path: eval.probe_data");
        if (!std::filesystem::exists(probe_path))
            throw ConfigurationError("eval.probe_data: no such file: " + probe_path);
        uint64_t seed = e.seed;
        if (!seed_given) {
            if (!rc.eval.is_object() || !rc.eval.contains("seed"))
                throw ConfigurationError("probe seed is mandatory (set eval.seed or --seed)");
            seed = rc.eval["seed"].get<uint64_t>();
        }
        summary["probe_seed"] = seed;
        report.probe_held_out = cor_probe(model, load_gold_sentences(probe_path), vocab, seed);
        probe_train_path =
            !e.probe_train_data.empty() ? e.probe_train_data : eval_entry(rc, "probe_train_data");
        if (!probe_train_path.empty())
            report.probe_train = cor_probe(model, load_gold_sentences(probe_train_path), vocab, seed);
    }

    const std::string report_json = report_to_json(report);
    {
        auto dir = std::filesystem::path(out_path).parent_path();
        if (!dir.empty()) std::filesystem::create_directories(dir);
        std::ofstream f(out_path);
        f << report_json << "\n";
        if (!f) throw std::runtime_error("cannot write " + out_path);
    }

    json config{{"subcommand", "evaluate"},
                {"ckpt", ckpt_path},
                {"vocab", vocab_path},
                {"data", data_path},
                {"probe_data", probe_path},
                {"probe_train_data", probe_train_path},
                {"metrics", metrics_csv},
                {"out", out_path},
                {"model", json::parse(config_to_json(model.cfg))}};
    summary["report"] = json::parse(report_json);
    summary["out"] = out_path;
    write_run_files(out_path, config, summary);
    std::cout << "evaluate: report -> " << out_path << "\n";
    return 0;
}

struct GenerateCli {
    std::string config_path;
    std::string ckpt;
    std::string vocab;
    std::string input;
    std::string out;
    int max_len = 0;  // 0 selects the model's full capacity
};

int cmd_generate(const GenerateCli& g) {
    RunConfig rc = g.config_path.empty() ? RunConfig{} : load_run_config(g.config_path);
    const std::string ckpt_path = need_file(g.ckpt, rc, "ckpt");
    const std::string vocab_path = need_file(g.vocab, rc, "vocab");

    auto vocab = Vocabulary::load(vocab_path);
    Model model = load_model_for(ckpt_path, vocab, vocab_path);
    int max_len = g.max_len > 0 ? std::min(g.max_len, model.cfg.max_seq_len - 1)
                                : model.cfg.max_seq_len - 1;

    std::ifstream in(g.input);
    if (!in) throw ConfigurationError("cannot open prompt file: " + g.input);
    auto dir = std::filesystem::path(g.out).parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);
    std::ofstream out(g.out);
    if (!out) throw std::runtime_error("cannot write " + g.out);

    std::string line;
    int64_t prompts = 0, skipped = 0;
    while (std::getline(in, line)) {
        auto tokens = tokenize(line);
        if (tokens.empty()) continue;
        ++prompts;
        auto src = vocab.encode(tokens);
        if (src.size() > static_cast<size_t>(model.cfg.max_seq_len)) {
            ++skipped;
            std::cerr << g.input << ": prompt " << prompts << " exceeds max_seq_len, skipped\n";
            out << "\n";
            continue;
        }
        out << detokenize(vocab.decode(model.decode_greedy(src, max_len))) << "\n";
    }
    if (!out) throw std::runtime_error("write failed: " + g.out);

    json config{{"subcommand", "generate"}, {"ckpt", ckpt_path},   {"vocab", vocab_path},
                {"input", g.input},         {"out", g.out},        {"max_len", max_len},
                {"model", json::parse(config_to_json(model.cfg))}};
    json summary{{"subcommand", "generate"},
                 {"prompts", prompts},
                 {"skipped_too_long", skipped},
                 {"out", g.out}};
    write_run_files(g.out, config, summary);
    std::cout << "generate: " << prompts - skipped << " continuations -> " << g.out << "\n";
    return 0;
}

struct WorldCli {
    int nouns = 20;
    int verbs = 5;
    int triples = 300;
    uint64_t seed = 0;
    double holdout = 0.2;
    std::string out_train;
    std::string out_heldout;
};

int cmd_world(const WorldCli& w) {
    auto world = build_synthetic_world(w.nouns, w.verbs, w.triples, w.seed, w.holdout);
    auto dir = std::filesystem::path(w.out_train).parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);
    write_world_jsonl(world.train_sentences, w.out_train);
    if (!w.out_heldout.empty())
        write_world_jsonl(world.held_out_sentences, w.out_heldout);
    else if (!world.held_out_sentences.empty())
        throw ConfigurationError("world has a held-out split: pass --out-heldout");

    json config{{"subcommand", "world"}, {"nouns", w.nouns},     {"verbs", w.verbs},
                {"triples", w.triples},  {"seed", w.seed},       {"holdout", w.holdout},
                {"out_train", w.out_train}, {"out_heldout", w.out_heldout}};
    json summary{{"subcommand", "world"},
                 {"train_sentences", static_cast<int64_t>(world.train_sentences.size())},
                 {"held_out_sentences", static_cast<int64_t>(world.held_out_sentences.size())},
                 {"noun_pool", static_cast<int64_t>(world.nouns.size())},
                 {"verb_pool", static_cast<int64_t>(world.verbs.size())}};
    write_run_files(w.out_train, config, summary);
    std::cout << "world: " << world.train_sentences.size() << " train / "
              << world.held_out_sentences.size() << " held-out sentences\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"concept-centric pre-training pipeline"};
    app.require_subcommand(1);

    CorpusCli ingest_corpus;
    std::string ingest_output, vocab_out;
    int64_t min_freq = 1;
    auto* ingest_cmd = app.add_subcommand("ingest", "segment, tokenize and tag a corpus");
    add_corpus_options(ingest_cmd, ingest_corpus);
    ingest_cmd->add_option("--output", ingest_output, "tagged-sentence JSONL")->required();
    ingest_cmd->add_option("--vocab-out", vocab_out, "also write a vocabulary file");
    ingest_cmd->add_option("--min-freq", min_freq, "vocabulary frequency floor")
        ->check(CLI::PositiveNumber);

    CorruptCli cc;
    auto* corrupt_cmd = app.add_subcommand("corrupt", "build training examples from a corpus");
    add_corpus_options(corrupt_cmd, cc.corpus);
    corrupt_cmd->add_option("--output", cc.output, "training-example JSONL")->required();
    corrupt_cmd->add_option("--objectives", cc.objectives,
                            "comma list from c2s,cor,cont,ssm,infill");
    corrupt_cmd->add_option("--concept-classes", cc.concept_classes, "both|nouns|verbs");
    corrupt_cmd->add_option("--cont-format", cc.cont_format, "genqa|mc|tf");
    corrupt_cmd->add_option("--seed", cc.seed, "global corruption seed")->required();
    corrupt_cmd->add_option("--min-concepts", cc.min_concepts, "concept floor for c2s")
        ->check(CLI::PositiveNumber);
    corrupt_cmd->add_option("--corrupt-rate", cc.corrupt_rate, "infill mask fraction")
        ->check(CLI::Range(0.0, 1.0));
    corrupt_cmd->add_option("--mean-span", cc.mean_span, "infill mean span length");
    corrupt_cmd->add_option("--workers", cc.workers, "parallel corruption threads")
        ->check(CLI::PositiveNumber);
    corrupt_cmd->add_flag("--no-lemmatize", cc.no_lemmatize, "keep surface forms in c2s");
    corrupt_cmd->add_option("--lemma-dir", cc.lemma_dir, "lemmatizer data directory");

    PretrainCli pc;
    auto* pretrain_cmd =
        app.add_subcommand("pretrain", "run the two-stage training schedule");
    pretrain_cmd->add_option("--config", pc.config_path,
                             "run-config json; direct flags override its entries");
    pretrain_cmd->add_option("--plan", pc.plan_path, "train-plan json file");
    pretrain_cmd->add_option("--data", pc.data, "training-example JSONL");
    pretrain_cmd->add_option("--vocab", pc.vocab, "vocabulary file");
    pretrain_cmd->add_option("--stage", pc.stage, "mix|joint|both")
        ->check(CLI::IsMember({"mix", "joint", "both"}));
    pretrain_cmd->add_option("--resume", pc.resume, "checkpoint to continue from");
    pretrain_cmd->add_option("--out", pc.out_dir, "output directory");
    auto* seed_opt = pretrain_cmd->add_option("--seed", pc.seed, "overrides plan.seed");

    EvaluateCli ec;
    auto* evaluate_cmd = app.add_subcommand("evaluate", "score a checkpoint");
    evaluate_cmd->add_option("--config", ec.config_path,
                             "run-config json; direct flags override its entries");
    evaluate_cmd->add_option("--ckpt", ec.ckpt, "model checkpoint");
    evaluate_cmd->add_option("--data", ec.data, "training-example JSONL to score");
    evaluate_cmd->add_option("--vocab", ec.vocab, "vocabulary file");
    auto* metrics_opt = evaluate_cmd->add_option("--metrics", ec.metrics,
                                                 "comma list from em,f1,bleu4,disc,probe");
    evaluate_cmd->add_option("--probe-data", ec.probe_data, "gold-tag JSONL for the probe");
    evaluate_cmd->add_option("--probe-train-data", ec.probe_train_data,
                             "optional train-split gold-tag JSONL");
    evaluate_cmd->add_option("--out", ec.out, "report path, default report.json");
    auto* eval_seed_opt = evaluate_cmd->add_option("--seed", ec.seed, "probe corruption seed");

    GenerateCli gc;
    auto* generate_cmd = app.add_subcommand("generate", "decode continuations for a prompt file");
    generate_cmd->add_option("--config", gc.config_path,
                             "run-config json; direct flags override its entries");
    generate_cmd->add_option("--ckpt", gc.ckpt, "model checkpoint");
    generate_cmd->add_option("--vocab", gc.vocab, "vocabulary file");
    generate_cmd->add_option("--input", gc.input, "prompt file, one per line")
        ->required()
        ->check(CLI::ExistingFile);
    generate_cmd->add_option("--out", gc.out, "output file")->required();
    generate_cmd->add_option("--max-len", gc.max_len, "decode budget, 0 = model capacity")
        ->check(CLI::NonNegativeNumber);

    WorldCli wc;
    auto* world_cmd = app.add_subcommand("world", "emit a synthetic relational corpus");
    world_cmd->add_option("--nouns", wc.nouns, "noun pool size")->check(CLI::PositiveNumber);
    world_cmd->add_option("--verbs", wc.verbs, "verb pool size")->check(CLI::PositiveNumber);
    world_cmd->add_option("--triples", wc.triples, "relation count")->check(CLI::PositiveNumber);
    world_cmd->add_option("--seed", wc.seed, "world seed")->required();
    world_cmd->add_option("--holdout", wc.holdout, "held-out fraction")
        ->check(CLI::Range(0.0, 1.0));
    world_cmd->add_option("--out-train", wc.out_train, "train-split JSONL")->required();
    world_cmd->add_option("--out-heldout", wc.out_heldout, "held-out-split JSONL");

    CLI11_PARSE(app, argc, argv);

    try {
        if (ingest_cmd->parsed()) return cmd_ingest(ingest_corpus, ingest_output, vocab_out, min_freq);
        if (corrupt_cmd->parsed()) return cmd_corrupt(cc);
        if (pretrain_cmd->parsed()) return cmd_pretrain(pc, seed_opt->count() > 0);
        if (evaluate_cmd->parsed())
            return cmd_evaluate(ec, metrics_opt->count() > 0, eval_seed_opt->count() > 0);
        if (generate_cmd->parsed()) return cmd_generate(gc);
        if (world_cmd->parsed()) return cmd_world(wc);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
