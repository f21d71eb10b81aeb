#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "conceptlm/errors.hpp"
#include "conceptlm/model.hpp"
#include "conceptlm/objectives.hpp"
#include "conceptlm/vocab.hpp"

namespace conceptlm {

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Two-stage training schedule. mix_weights steers stage-one objective
// sampling; an empty map means equal weight for every objective present in
// the dataset, so a single-objective corpus trains that objective alone.
struct TrainPlan {
    double beta = 1.0;
    int64_t stage1_steps = 0;
    int64_t stage2_steps = 0;
    std::map<Objective, double> mix_weights;
    double lr_peak = 3e-4;
    int64_t warmup_steps = 200;
    double weight_decay = 0.01;
    double adam_eps = 1e-6;
    int batch_size = 16;
    int grad_accum = 1;
    uint64_t seed = 0;
    // Discriminator example format built in the joint stage.
    ContrastiveFormat cont_format = ContrastiveFormat::Genqa;
    // One sampled contrastive branch per element instead of summing both.
    bool random_distractor_choice = false;

    void validate() const;  // throws ConfigurationError naming the field
};

std::string plan_to_json(const TrainPlan& plan);
TrainPlan plan_from_json(const std::string& text);  // rejects unknown fields

// Component losses are token means over that component's group; NaN marks a
// component absent from the step. n_generator / n_shuffle count distractor
// origins constructed during joint steps.
struct StepRecord {
    static constexpr double kAbsent = std::numeric_limits<double>::quiet_NaN();
    int64_t step = 0;
    double l_c2s = kAbsent;
    double l_cor = kAbsent;
    double l_cont = kAbsent;
    double l_ssm = kAbsent;
    double l_infill = kAbsent;
    double l_cont_c2s = kAbsent;
    double l_cont_cor = kAbsent;
    double total = 0.0;
    double lr = 0.0;
    int64_t n_generator = 0;
    int64_t n_shuffle = 0;
};

struct TrainReport {
    std::string stage;  // "mix" or "joint"
    std::vector<StepRecord> steps;
    std::map<Objective, int64_t> consumed;  // examples consumed per objective
    int64_t distractor_generator = 0;
    int64_t distractor_shuffle = 0;
    // Degenerate elements whose contrastive example could not be built
    // (distractor identical after retries, or encoded length overflow).
    int64_t contrastive_skipped = 0;
    int64_t dropped_too_long = 0;  // dataset examples exceeding max_seq_len
    bool mix_warmup = true;        // false labels the cold-start joint variant
    double wall_clock_sec = 0.0;
    std::string checkpoint_path;   // filled by the caller after saving
};

void write_report_csv(const TrainReport& report, const std::string& path);
std::string report_summary_json(const TrainReport& report);

// total = (l_c2s + l_cor) + beta * (l_cont_c2s + l_cont_cor). Callers pass 0
// for a component absent from the step. Throws TrainError on non-finite
// input or negative beta.
double loss_total(double l_c2s, double l_cor, double l_cont_c2s, double l_cont_cor, double beta);

// Linear ramp 0 -> lr_peak over warmup_steps, then inverse-square-root
// decay: lr_peak * sqrt(warmup / step).
double lr_schedule(int64_t step, const TrainPlan& plan);

// Adam with decoupled weight decay applied to every tensor. Moments start at
// zero; bias correction counts the calls made on this instance.
class AdamW {
public:
    explicit AdamW(const ParameterStore& params);

    // lr comes from lr_schedule(step, plan). Throws TrainError naming the
    // tensor on a non-finite gradient.
    void step(ParameterStore& params, const ParameterStore& grads, const TrainPlan& plan,
              int64_t step_index);

    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;

private:
    ParameterStore m_;
    ParameterStore v_;
    int64_t t_ = 0;
};

// Seeding and ordering contract, relied on by determinism replays:
//   step_seed      = derive_seed(plan.seed, "mix" | "joint", step)   (1-based)
//   mix sampling   : one SeededRng(step_seed); per slot, a weighted objective
//                    draw (next_real) then a uniform example draw (next_below),
//                    batch_size * grad_accum slots in order
//   joint batching : element e of step s reads group (s-1)*E + e mod n,
//                    E = batch_size * grad_accum, groups in input order
//   dropout        : DropoutSpec{cfg.dropout_rate, derive_seed(step_seed,
//                    "dropout", g)}; mix groups use g = objective enum value,
//                    joint groups use g = 0 c2s, 1 cor, 2 cont_c2s, 3 cont_cor
//   joint contrast : element rng = SeededRng(derive_seed(step_seed,
//                    "cont-c2s" | "cont-cor", e)); branch coin (when enabled)
//                    from SeededRng(derive_seed(step_seed, "branch", e))
// Groups are processed in ascending g; gradients of one step are summed into
// a single store (token-share weights in mix, Eq-composition weights in
// joint) before one optimizer step. With beta = 0 the joint stage performs
// no distractor work at all, so its trajectory is bitwise-reproducible from
// the generative terms alone.

// Stage one: multi-task warmup over prefixed examples with shuffle-origin
// distractors. Generator-origin contrastive examples in the input are
// ignored. Throws on an empty usable dataset or a weighted objective with no
// examples.
TrainReport stage_mix(Model& model, const std::vector<TrainingExample>& examples,
                      const Vocabulary& vocab, const TrainPlan& plan);

// Stage two: per element, the current parameters decode a distractor from
// the element's own C2S / COR corruption (generator role, dropout off); the
// discriminator terms are built from that distractor, falling back to a
// seeded reshuffle when the decode reproduces the sentence or comes back
// empty. One parameter store serves both roles. warm_started = false labels
// the report as the cold-start variant.
TrainReport stage_joint(Model& model, const std::vector<TrainingExample>& examples,
                        const Vocabulary& vocab, const TrainPlan& plan, bool warm_started = true);

}  // namespace conceptlm
