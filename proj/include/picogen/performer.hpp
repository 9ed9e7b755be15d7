#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "picogen/leadsheet.hpp"
#include "picogen/tokenizer.hpp"

namespace picogen {

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    int d_model = 64;  // paper-scale value is 512
    int n_layers = 2;  // paper-scale value is 8
    int n_heads = 4;   // paper-scale value is 8
    int max_len = 1024;
    int mlp_hidden = 0;  // 0 -> 4 * d_model
    std::array<int, kNumFields> field_embed = {4, 4, 8, 8, 16, 32, 16, 16};
    uint64_t seed = 7;

    double learning_rate = 3e-4;
    int warmup_steps = 100;
    double grad_clip = 1.0;
    double weight_decay = 0.01;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 4;
    int max_steps = 2000;
    int epochs = 0;           // 0 -> bounded by max_steps only
    double target_loss = 0.0; // stop once training loss drops below (0 = off)

    int embed_concat() const;
    int hidden() const { return mlp_hidden > 0 ? mlp_hidden : 4 * d_model; }
    void validate() const;
};

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    static Tensor zeros(std::vector<int> shape);
    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int cols() const { return shape.back(); }
    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }
};

// Named parameter tensors in a fixed order shared by gradients, optimizer
// moments, serialization, and the finite-difference check.
struct ParamSet {
    std::vector<std::pair<std::string, Tensor>> tensors;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    ParamSet zeros_like() const;
};

ParamSet build_params(const ModelConfig& cfg);
void init_params(ParamSet& params, const ModelConfig& cfg, std::mt19937_64& rng);

// Per-position target mask: mask[t] says whether predicting seq[t+1] counts
// toward the loss (piano-side content plus BAR/EOS structure; lead-sheet
// content is given, not generated).
std::vector<uint8_t> target_active_mask(const std::vector<IdRecord>& seq);

using FieldLogits = std::array<Tensor, kNumFields>;

class Model {
public:
    explicit Model(const ModelConfig& cfg);
    Model(const ModelConfig& cfg, ParamSet params);

    const ModelConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    // Embedding concat + input projection for one record (no position added).
    std::vector<double> embed_record(const IdRecord& ids) const;

    // Full-sequence causal forward; logits at row t predict record t+1.
    FieldLogits forward(const std::vector<IdRecord>& seq) const;

    double loss(const std::vector<std::vector<IdRecord>>& batch) const;
    double loss_and_grad(const std::vector<std::vector<IdRecord>>& batch, ParamSet& grads,
                         std::array<double, kNumFields>* field_losses = nullptr) const;

private:
    ModelConfig cfg_;
    ParamSet params_;
};

// Incremental decoding with per-layer KV caches; logits after append(r) are
// bit-for-bit those of the full forward at r's row.
class DecodeSession {
public:
    explicit DecodeSession(const Model& model);

    void reset();
    const std::array<std::vector<double>, kNumFields>& append(const IdRecord& ids);
    const std::array<std::vector<double>, kNumFields>& logits() const { return logits_; }
    int length() const { return len_; }

private:
    const Model& model_;
    int len_ = 0;
    std::vector<std::vector<double>> k_cache_, v_cache_;  // per layer, len x d_model
    std::array<std::vector<double>, kNumFields> logits_;
};

struct StepMetrics {
    int64_t step;
    double loss;
    std::array<double, kNumFields> field_loss;
};

struct TrainState {
    ModelConfig config;
    ParamSet params;
    ParamSet adam_m;
    ParamSet adam_v;
    int64_t step = 0;
    std::mt19937_64 rng;
};

struct TrainResult {
    TrainState state;
    std::vector<StepMetrics> curve;
};

TrainResult train(const std::vector<std::vector<IdRecord>>& dataset, const ModelConfig& cfg);

void write_metrics_csv(const std::vector<StepMetrics>& curve, const std::string& path);

void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

struct SamplingConfig {
    double temperature = 1.0;  // <= 1e-9 means argmax
    double top_p = 1.0;
    uint64_t seed = 0;
    int max_tokens_per_bar = 64;
};

struct GenerateResult {
    std::vector<Bar> piano;
    InterleavedSequence sequence;
    size_t sampled_tokens = 0;
    size_t forced_closes = 0;
};

GenerateResult generate(const LeadSheet& leadsheet, const TrainState& state,
                        const SamplingConfig& sampling);

}  // namespace picogen
