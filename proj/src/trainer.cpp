#include "conceptlm/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <utility>

#include "conceptlm/rng.hpp"
#include "json.hpp"

namespace conceptlm {

using nlohmann::json;

void TrainPlan::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigurationError("train plan: " + msg); };
    if (!std::isfinite(beta) || beta < 0) fail("beta must be finite and >= 0");
    if (stage1_steps < 0) fail("stage1_steps must be >= 0");
    if (stage2_steps < 0) fail("stage2_steps must be >= 0");
    if (!mix_weights.empty()) {
        double total = 0;
        for (const auto& [obj, w] : mix_weights) {
            if (!std::isfinite(w) || w < 0)
                fail(std::string("mix weight for ") + to_string(obj) +
                     " must be finite and >= 0");
            total += w;
        }
        if (total <= 0) fail("mix_weights must not all be zero");
    }
    if (!std::isfinite(lr_peak) || lr_peak <= 0) fail("lr_peak must be positive");
    if (warmup_steps < 1) fail("warmup_steps must be >= 1");
    if (!std::isfinite(weight_decay) || weight_decay < 0) fail("weight_decay must be >= 0");
    if (!std::isfinite(adam_eps) || adam_eps <= 0) fail("adam_eps must be positive");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (grad_accum < 1) fail("grad_accum must be >= 1");
}

namespace {

const char* format_name(ContrastiveFormat f) {
    switch (f) {
        case ContrastiveFormat::Genqa: return "genqa";
        case ContrastiveFormat::Mc: return "mc";
        case ContrastiveFormat::Tf: return "tf";
    }
    return "genqa";
}

}  // namespace

std::string plan_to_json(const TrainPlan& plan) {
    json weights = json::object();
    for (const auto& [obj, w] : plan.mix_weights) weights[to_string(obj)] = w;
    json j{{"beta", plan.beta},
           {"stage1_steps", plan.stage1_steps},
           {"stage2_steps", plan.stage2_steps},
           {"mix_weights", weights},
           {"lr_peak", plan.lr_peak},
           {"warmup_steps", plan.warmup_steps},
           {"weight_decay", plan.weight_decay},
           {"adam_eps", plan.adam_eps},
           {"batch_size", plan.batch_size},
           {"grad_accum", plan.grad_accum},
           {"seed", plan.seed},
           {"cont_format", format_name(plan.cont_format)},
           {"random_distractor_choice", plan.random_distractor_choice}};
    return j.dump(2);
}

TrainPlan plan_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigurationError(std::string("train plan: invalid json: ") + e.what());
    }
    if (!j.is_object()) throw ConfigurationError("train plan: top level must be an object");

    TrainPlan plan;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "beta") plan.beta = value.get<double>();
            else if (key == "stage1_steps") plan.stage1_steps = value.get<int64_t>();
            else if (key == "stage2_steps") plan.stage2_steps = value.get<int64_t>();
            else if (key == "mix_weights") {
                if (!value.is_object())
                    throw ConfigurationError("train plan: mix_weights must be an object");
                for (const auto& [name, w] : value.items())
                    plan.mix_weights[objective_from_string(name)] = w.get<double>();
            } else if (key == "lr_peak") plan.lr_peak = value.get<double>();
            else if (key == "warmup_steps") plan.warmup_steps = value.get<int64_t>();
            else if (key == "weight_decay") plan.weight_decay = value.get<double>();
            else if (key == "adam_eps") plan.adam_eps = value.get<double>();
            else if (key == "batch_size") plan.batch_size = value.get<int>();
            else if (key == "grad_accum") plan.grad_accum = value.get<int>();
            else if (key == "seed") plan.seed = value.get<uint64_t>();
            else if (key == "cont_format")
                plan.cont_format = contrastive_format_from_string(value.get<std::string>());
            else if (key == "random_distractor_choice")
                plan.random_distractor_choice = value.get<bool>();
            else throw ConfigurationError("train plan: unknown field '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigurationError(std::string("train plan: ") + e.what());
    }
    plan.validate();
    return plan;
}

double loss_total(double l_c2s, double l_cor, double l_cont_c2s, double l_cont_cor, double beta) {
    if (!std::isfinite(l_c2s) || !std::isfinite(l_cor) || !std::isfinite(l_cont_c2s) ||
        !std::isfinite(l_cont_cor) || !std::isfinite(beta))
        throw TrainError("loss_total: non-finite input");
    if (beta < 0) throw TrainError("loss_total: negative beta");
    return (l_c2s + l_cor) + beta * (l_cont_c2s + l_cont_cor);
}

double lr_schedule(int64_t step, const TrainPlan& plan) {
    if (step < 0) throw TrainError("lr_schedule: negative step");
    const double w = static_cast<double>(plan.warmup_steps);
    if (step <= plan.warmup_steps) return plan.lr_peak * static_cast<double>(step) / w;
    return plan.lr_peak * std::sqrt(w / static_cast<double>(step));
}

AdamW::AdamW(const ParameterStore& params) : m_(params), v_(params) {
    m_.zero();
    v_.zero();
}

void AdamW::step(ParameterStore& params, const ParameterStore& grads, const TrainPlan& plan,
                 int64_t step_index) {
    const float lr = static_cast<float>(lr_schedule(step_index, plan));
    ++t_;
    const float bc1 = static_cast<float>(1.0 - std::pow(kBeta1, static_cast<double>(t_)));
    const float bc2 = static_cast<float>(1.0 - std::pow(kBeta2, static_cast<double>(t_)));
    const float b1 = static_cast<float>(kBeta1);
    const float b2 = static_cast<float>(kBeta2);
    const float eps = static_cast<float>(plan.adam_eps);
    const float wd = static_cast<float>(plan.weight_decay);

    for (auto& [name, p] : params.tensors) {
        auto git = grads.tensors.find(name);
        if (git == grads.tensors.end() || git->second.rows() != p.rows() ||
            git->second.cols() != p.cols())
            throw TrainError("gradient shape mismatch for tensor " + name);
        const MatT<float>& g = git->second;
        if (!g.allFinite()) throw TrainError("non-finite gradient in tensor " + name);

        MatT<float>& m = m_.tensors.at(name);
        MatT<float>& v = v_.tensors.at(name);
        m = b1 * m + (1.0f - b1) * g;
        v = (b2 * v.array() + (1.0f - b2) * g.array().square()).matrix();
        p.array() -= lr * ((m.array() / bc1) / ((v.array() / bc2).sqrt() + eps) + wd * p.array());
    }
}

namespace {

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double elapsed() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

int64_t loss_tokens(const Batch& batch) {
    int64_t n = 0;
    for (const auto& e : batch) n += static_cast<int64_t>(e.tgt.size()) + 1;
    return n;
}

bool fits(const ModelConfig& cfg, const Example& e) {
    return static_cast<int>(e.src.size()) <= cfg.max_seq_len &&
           static_cast<int>(e.tgt.size()) + 1 <= cfg.max_seq_len;
}

void check_vocab(const Model& model, const Vocabulary& vocab) {
    if (model.cfg.vocab_size != vocab.size())
        throw ConfigurationError("model vocab_size " + std::to_string(model.cfg.vocab_size) +
                                 " does not match vocabulary size " +
                                 std::to_string(vocab.size()));
}

// Token means over a step, merged per report column.
struct ComponentSums {
    double loss_tok[5] = {};
    int64_t tok[5] = {};

    static int slot(Objective o) {
        switch (o) {
            case Objective::C2S: return 0;
            case Objective::COR: return 1;
            case Objective::Ssm: return 3;
            case Objective::Infill: return 4;
            default: return 2;
        }
    }
    void add(Objective o, double loss, int64_t tokens) {
        loss_tok[slot(o)] += loss * static_cast<double>(tokens);
        tok[slot(o)] += tokens;
    }
    double mean(int s) const {
        return tok[s] ? loss_tok[s] / static_cast<double>(tok[s]) : StepRecord::kAbsent;
    }
};

ParameterStore zeros_like(const ParameterStore& params) {
    ParameterStore out = params;
    out.zero();
    return out;
}

// Forward + backward on one group; grads accumulated with the given weight.
double run_group(Model& model, const Batch& group, uint64_t dropout_seed, double weight,
                 ParameterStore& grads) {
    ForwardTraceT<float> trace;
    DropoutSpec drop{model.cfg.dropout_rate, dropout_seed};
    double loss = model.forward_loss(group, &trace, drop);
    ParameterStore g = model.backward(trace);
    grads.add_scaled(g, static_cast<float>(weight));
    return loss;
}

}  // namespace

TrainReport stage_mix(Model& model, const std::vector<TrainingExample>& examples,
                      const Vocabulary& vocab, const TrainPlan& plan) {
    plan.validate();
    check_vocab(model, vocab);
    Timer timer;
    TrainReport report;
    report.stage = "mix";

    std::map<Objective, Batch> pools;
    for (const auto& ex : examples) {
        if (ex.meta.distractor_origin == DistractorOrigin::Generator) continue;
        Example e{vocab.encode(ex.source), vocab.encode(ex.target)};
        if (!fits(model.cfg, e)) {
            ++report.dropped_too_long;
            continue;
        }
        pools[ex.objective].push_back(std::move(e));
    }
    if (pools.empty()) throw TrainError("stage_mix: no usable examples in dataset");

    std::vector<std::pair<Objective, double>> weights;
    if (plan.mix_weights.empty()) {
        for (const auto& [obj, pool] : pools) weights.emplace_back(obj, 1.0);
    } else {
        for (const auto& [obj, w] : plan.mix_weights) {
            if (w <= 0) continue;
            if (!pools.count(obj) || pools[obj].empty())
                throw TrainError(std::string("stage_mix: mix weight set for ") + to_string(obj) +
                                 " but dataset has no usable examples of it");
            weights.emplace_back(obj, w);
        }
    }
    double weight_total = 0;
    for (const auto& [obj, w] : weights) weight_total += w;

    AdamW opt(model.params);
    const int64_t slots = static_cast<int64_t>(plan.batch_size) * plan.grad_accum;
    for (int64_t s = 1; s <= plan.stage1_steps; ++s) {
        const uint64_t step_seed = derive_seed(plan.seed, "mix", s);
        SeededRng rng(step_seed);

        std::map<Objective, Batch> batch;
        int64_t total_tok = 0;
        for (int64_t slot = 0; slot < slots; ++slot) {
            double r = rng.next_real() * weight_total;
            Objective picked = weights.back().first;
            double acc = 0;
            for (const auto& [obj, w] : weights) {
                acc += w;
                if (r < acc) {
                    picked = obj;
                    break;
                }
            }
            const Batch& pool = pools[picked];
            const Example& e = pool[rng.next_below(pool.size())];
            batch[picked].push_back(e);
            total_tok += static_cast<int64_t>(e.tgt.size()) + 1;
            ++report.consumed[picked];
        }

        ParameterStore grads = zeros_like(model.params);
        ComponentSums comps;
        double total = 0;
        for (const auto& [obj, group] : batch) {
            const uint64_t drop_seed =
                derive_seed(step_seed, "dropout", static_cast<int64_t>(obj));
            const int64_t tok = loss_tokens(group);
            const double share = static_cast<double>(tok) / static_cast<double>(total_tok);
            double loss = run_group(model, group, drop_seed, share, grads);
            comps.add(obj, loss, tok);
            total += loss * share;
        }
        opt.step(model.params, grads, plan, s);

        StepRecord rec;
        rec.step = s;
        rec.l_c2s = comps.mean(0);
        rec.l_cor = comps.mean(1);
        rec.l_cont = comps.mean(2);
        rec.l_ssm = comps.mean(3);
        rec.l_infill = comps.mean(4);
        rec.total = total;
        rec.lr = lr_schedule(s, plan);
        report.steps.push_back(rec);
    }

    report.wall_clock_sec = timer.elapsed();
    return report;
}

namespace {

struct JointGroup {
    std::string source_id;
    int64_t index = 0;
    std::vector<std::string> real_tokens;
    std::vector<int> real_ids;
    std::optional<Example> c2s;
    std::optional<Example> cor;
};

std::vector<JointGroup> build_joint_groups(const std::vector<TrainingExample>& examples,
                                           const Vocabulary& vocab, const ModelConfig& cfg,
                                           int64_t& dropped) {
    std::vector<JointGroup> groups;
    std::map<std::pair<std::string, int64_t>, size_t> at;
    for (const auto& ex : examples) {
        if (ex.objective != Objective::C2S && ex.objective != Objective::COR) continue;
        Example e{vocab.encode(ex.source), vocab.encode(ex.target)};
        if (!fits(cfg, e)) {
            ++dropped;
            continue;
        }
        auto key = std::make_pair(ex.meta.source_id, ex.meta.index);
        auto it = at.find(key);
        if (it == at.end()) {
            it = at.emplace(key, groups.size()).first;
            JointGroup g;
            g.source_id = ex.meta.source_id;
            g.index = ex.meta.index;
            g.real_tokens = ex.target;
            g.real_ids = vocab.encode(ex.target);
            groups.push_back(std::move(g));
        }
        JointGroup& g = groups[it->second];
        if (g.real_tokens != ex.target)
            throw TrainError("stage_joint: conflicting targets for " + ex.meta.source_id + ":" +
                             std::to_string(ex.meta.index));
        if (ex.objective == Objective::C2S) {
            if (!g.c2s) g.c2s = std::move(e);
        } else if (!g.cor) {
            g.cor = std::move(e);
        }
    }
    return groups;
}

}  // namespace

TrainReport stage_joint(Model& model, const std::vector<TrainingExample>& examples,
                        const Vocabulary& vocab, const TrainPlan& plan, bool warm_started) {
    plan.validate();
    check_vocab(model, vocab);
    Timer timer;
    TrainReport report;
    report.stage = "joint";
    report.mix_warmup = warm_started;

    std::vector<JointGroup> groups =
        build_joint_groups(examples, vocab, model.cfg, report.dropped_too_long);
    if (groups.empty()) throw TrainError("stage_joint: no usable sentence groups in dataset");

    const Objective cont_obj = objective_of(plan.cont_format);
    AdamW opt(model.params);
    const int64_t elements = static_cast<int64_t>(plan.batch_size) * plan.grad_accum;
    const int64_t n = static_cast<int64_t>(groups.size());

    for (int64_t s = 1; s <= plan.stage2_steps; ++s) {
        const uint64_t step_seed = derive_seed(plan.seed, "joint", s);

        Batch gen_c2s, gen_cor, cont_c2s, cont_cor;
        StepRecord rec;
        rec.step = s;

        for (int64_t e = 0; e < elements; ++e) {
            const JointGroup& g = groups[((s - 1) * elements + e) % n];
            if (g.c2s) {
                gen_c2s.push_back(*g.c2s);
                ++report.consumed[Objective::C2S];
            }
            if (g.cor) {
                gen_cor.push_back(*g.cor);
                ++report.consumed[Objective::COR];
            }
            if (plan.beta == 0) continue;

            bool want_c2s = g.c2s.has_value();
            bool want_cor = g.cor.has_value();
            if (plan.random_distractor_choice && want_c2s && want_cor) {
                SeededRng coin(derive_seed(step_seed, "branch", e));
                if (coin.next_bool()) want_cor = false;
                else want_c2s = false;
            }

            for (int branch = 0; branch < 2; ++branch) {
                const bool is_c2s = branch == 0;
                if (is_c2s ? !want_c2s : !want_cor) continue;
                const Example& corruption = is_c2s ? *g.c2s : *g.cor;
                SeededRng rng(derive_seed(step_seed, is_c2s ? "cont-c2s" : "cont-cor", e));

                // Generator role: shared parameters, dropout off.
                const int budget = std::min(model.cfg.max_seq_len - 1,
                                            static_cast<int>(g.real_ids.size()) + 4);
                std::vector<int> ids = model.decode_greedy(corruption.src, budget);
                std::vector<std::string> distractor = vocab.decode(ids);
                DistractorOrigin origin = DistractorOrigin::Generator;
                int tries = 0;
                while ((distractor.empty() || distractor == g.real_tokens) && tries < 16) {
                    distractor = permute(g.real_tokens, rng, true);
                    origin = DistractorOrigin::Shuffle;
                    ++tries;
                }

                TaggedSentence ts;
                ts.tokens = g.real_tokens;
                ts.raw.source_id = g.source_id;
                ts.raw.index = g.index;
                auto built = make_contrastive(ts, {distractor, origin}, rng, plan.cont_format);
                if (!built) {
                    ++report.contrastive_skipped;
                    continue;
                }
                Example ce{vocab.encode(built->source), vocab.encode(built->target)};
                if (!fits(model.cfg, ce)) {
                    ++report.contrastive_skipped;
                    continue;
                }
                (is_c2s ? cont_c2s : cont_cor).push_back(std::move(ce));
                ++report.consumed[cont_obj];
                if (origin == DistractorOrigin::Generator) {
                    ++rec.n_generator;
                    ++report.distractor_generator;
                } else {
                    ++rec.n_shuffle;
                    ++report.distractor_shuffle;
                }
            }
        }

        ParameterStore grads = zeros_like(model.params);
        double l_c2s = 0, l_cor = 0, l_cc = 0, l_ccor = 0;
        if (!gen_c2s.empty()) {
            l_c2s = run_group(model, gen_c2s, derive_seed(step_seed, "dropout", 0), 1.0, grads);
            rec.l_c2s = l_c2s;
        }
        if (!gen_cor.empty()) {
            l_cor = run_group(model, gen_cor, derive_seed(step_seed, "dropout", 1), 1.0, grads);
            rec.l_cor = l_cor;
        }
        if (!cont_c2s.empty()) {
            l_cc = run_group(model, cont_c2s, derive_seed(step_seed, "dropout", 2), plan.beta,
                             grads);
            rec.l_cont_c2s = l_cc;
        }
        if (!cont_cor.empty()) {
            l_ccor = run_group(model, cont_cor, derive_seed(step_seed, "dropout", 3), plan.beta,
                               grads);
            rec.l_cont_cor = l_ccor;
        }
        opt.step(model.params, grads, plan, s);

        rec.total = loss_total(l_c2s, l_cor, l_cc, l_ccor, plan.beta);
        rec.lr = lr_schedule(s, plan);
        report.steps.push_back(rec);
    }

    report.wall_clock_sec = timer.elapsed();
    return report;
}

namespace {

void append_field(std::string& line, double v) {
    line += ',';
    if (std::isnan(v)) return;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    line += buf;
}

}  // namespace

void write_report_csv(const TrainReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw TrainError("cannot write report csv: " + path);
    out << "step,stage,l_c2s,l_cor,l_cont,l_ssm,l_infill,l_cont_c2s,l_cont_cor,total,lr,"
           "n_generator,n_shuffle\n";
    for (const StepRecord& r : report.steps) {
        std::string line = std::to_string(r.step) + ',' + report.stage;
        append_field(line, r.l_c2s);
        append_field(line, r.l_cor);
        append_field(line, r.l_cont);
        append_field(line, r.l_ssm);
        append_field(line, r.l_infill);
        append_field(line, r.l_cont_c2s);
        append_field(line, r.l_cont_cor);
        append_field(line, r.total);
        append_field(line, r.lr);
        line += ',' + std::to_string(r.n_generator) + ',' + std::to_string(r.n_shuffle);
        out << line << '\n';
    }
    if (!out.flush()) throw TrainError("cannot write report csv: " + path);
}

std::string report_summary_json(const TrainReport& report) {
    json consumed = json::object();
    for (const auto& [obj, count] : report.consumed) consumed[to_string(obj)] = count;

    auto mean_total = [&](size_t from, size_t to) {
        double sum = 0;
        for (size_t i = from; i < to; ++i) sum += report.steps[i].total;
        return to > from ? sum / static_cast<double>(to - from) : 0.0;
    };
    const size_t n = report.steps.size();
    const size_t window = std::min<size_t>(100, n);

    json j{{"stage", report.stage},
           {"steps", n},
           {"consumed", consumed},
           {"distractor_generator", report.distractor_generator},
           {"distractor_shuffle", report.distractor_shuffle},
           {"contrastive_skipped", report.contrastive_skipped},
           {"dropped_too_long", report.dropped_too_long},
           {"mix_warmup", report.mix_warmup},
           {"wall_clock_sec", report.wall_clock_sec},
           {"checkpoint_path", report.checkpoint_path},
           {"mean_total_first_window", mean_total(0, window)},
           {"mean_total_last_window", mean_total(n - window, n)},
           {"window", window}};
    if (!report.mix_warmup) j["variant"] = "w/o Mix warmup";
    return j.dump(2);
}

}  // namespace conceptlm
