#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "conceptlm/errors.hpp"

namespace conceptlm {

struct ModelConfig {
    int d_model = 128;
    int n_heads = 4;
    int n_enc_layers = 2;
    int n_dec_layers = 2;
    int d_ffn = 512;
    int max_seq_len = 64;
    int vocab_size = 0;  // set from the vocabulary before init
    double dropout_rate = 0.1;

    void validate() const;  // throws ConfigurationError naming the field
    bool operator==(const ModelConfig&) const = default;
};

template <typename Real>
using MatT = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Named 2-d tensors in lexicographic order. One store serves every model
// role; callers holding the store see each other's updates.
template <typename Real>
struct ParameterStoreT {
    std::map<std::string, MatT<Real>> tensors;

    MatT<Real>& at(const std::string& name);
    const MatT<Real>& at(const std::string& name) const;
    void add_scaled(const ParameterStoreT& other, Real scale);  // this += scale * other
    void zero();
    int64_t parameter_count() const;

    template <typename Other>
    ParameterStoreT<Other> cast() const {
        ParameterStoreT<Other> out;
        for (const auto& [name, m] : tensors) out.tensors[name] = m.template cast<Other>();
        return out;
    }
};

// One training pair as token ids, without BOS/EOS; forward_loss prepends BOS
// to the decoder input and appends EOS to the gold sequence.
struct Example {
    std::vector<int> src;
    std::vector<int> tgt;
};
using Batch = std::vector<Example>;

// Low-level row: explicit decoder input and gold ids. Gold positions equal to
// the pad id are excluded from the loss.
struct PackedRow {
    std::vector<int> src;
    std::vector<int> dec_in;
    std::vector<int> gold;
};

struct DropoutSpec {
    double rate = 0.0;  // 0 disables
    uint64_t seed = 0;
};

template <typename Real>
struct TraceImplT;

// Opaque activation cache; spent by its first backward.
template <typename Real>
struct ForwardTraceT {
    ForwardTraceT();
    ~ForwardTraceT();
    ForwardTraceT(ForwardTraceT&&) noexcept;
    ForwardTraceT& operator=(ForwardTraceT&&) noexcept;

    bool consumed() const;

    // Largest |row sum - 1| over every cached softmax row, attention heads
    // included, and the smallest cached attention weight (>= 0 in exact
    // arithmetic). Probes for invariant tests; valid until backward.
    double max_row_sum_error() const;
    double min_attention_weight() const;

    std::unique_ptr<TraceImplT<Real>> impl;
};

template <typename Real>
struct ModelT {
    ModelConfig cfg;
    ParameterStoreT<Real> params;

    // Truncated-normal std 0.02 weights, unit layer-norm gains, zero biases;
    // each tensor's stream is derived from (seed, name) so the layout of the
    // store never shifts values between tensors.
    static ModelT init(const ModelConfig& cfg, uint64_t seed);

    // Mean cross-entropy over all gold positions in the batch, teacher
    // forced, accumulated in double. Empty loss mask gives loss 0. The trace,
    // when requested, holds everything backward needs.
    double forward_loss(const Batch& batch, ForwardTraceT<Real>* trace = nullptr,
                        const DropoutSpec& dropout = {}) const;
    double forward_loss_rows(const std::vector<PackedRow>& rows,
                             ForwardTraceT<Real>* trace = nullptr,
                             const DropoutSpec& dropout = {}) const;

    // Exact gradients of the traced loss for every tensor. A trace is spent
    // by its first backward.
    ParameterStoreT<Real> backward(ForwardTraceT<Real>& trace) const;

    // Argmax decoding, ties to the lowest id, stops at EOS or max_len.
    // max_len < 0 selects ceil(1.2 * |src|).
    std::vector<int> decode_greedy(const std::vector<int>& src, int max_len = -1) const;

    // Next-token logits for a given decoder prefix (BOS implicit), used by
    // decode_greedy and by oracle tests.
    std::vector<Real> next_logits(const std::vector<int>& src,
                                  const std::vector<int>& prefix) const;

    // Teacher-forced logits for every decoder position; row t conditions on
    // BOS and tgt[0..t-1]. Shape [len(tgt)+1, vocab_size].
    MatT<Real> forward_logits(const std::vector<int>& src, const std::vector<int>& tgt) const;
};

using Model = ModelT<float>;
using ParameterStore = ParameterStoreT<float>;

// Cross-entropy of one logit row against a gold index in log-sum-exp form,
// the same arithmetic forward_loss applies at each target position.
double softmax_nll(const std::vector<double>& logits, int gold);

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Layout: u64 little-endian manifest length, JSON manifest (format version,
// config, tensor names/shapes/offsets in name order), float32 little-endian
// payload in manifest order.
void save_checkpoint(const ParameterStoreT<float>& params, const ModelConfig& cfg,
                     const std::string& path);
std::pair<ParameterStoreT<float>, ModelConfig> load_checkpoint(const std::string& path);
// Validates the stored config against the requested one; throws
// CheckpointError naming the first mismatching field.
std::pair<ParameterStoreT<float>, ModelConfig> load_checkpoint(const std::string& path,
                                                               const ModelConfig& want);

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

extern template struct ParameterStoreT<float>;
extern template struct ParameterStoreT<double>;
extern template struct ForwardTraceT<float>;
extern template struct ForwardTraceT<double>;
extern template struct ModelT<float>;
extern template struct ModelT<double>;

}  // namespace conceptlm
