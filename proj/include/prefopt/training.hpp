#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "prefopt/corpus.hpp"
#include "prefopt/lm.hpp"

namespace prefopt {

/// Negative target log-likelihood summed over the target span (one logits row
/// per target token). Reporting divides by the span length where a per-token
/// number is wanted.
Tensor ce_loss(const Tensor& logits, const std::vector<int>& targets);

struct ScheduleConfig {
    int warmup_steps = 200;
    int total_steps = 0;
    double peak_lr = 1e-3;

    void validate() const;
};

/// Linear 0 -> peak over the warmup, then cosine decay to 0 at total_steps.
double lr_at(const ScheduleConfig& schedule, int step);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Flat per-parameter gradient buffers, aligned with LMParams::named_tensors().
using GradBuffers = std::vector<std::vector<double>>;

GradBuffers collect_grads(const LMParams& params);
GradBuffers zero_grads_like(const LMParams& params);
void add_grads(GradBuffers& into, const GradBuffers& from);

struct OptState {
    AdamWConfig hyper;
    long long step = 0;  // completed update count
    GradBuffers m, v;

    static OptState init(const LMParams& params, const AdamWConfig& hyper);
};

/// Decoupled-weight-decay Adam update:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p).
/// Rejects non-finite gradients, naming the parameter.
void adamw_step(LMParams& params, const GradBuffers& grads, OptState& state, double lr);

enum class ModelKind { n2s, s2s };

struct TrainConfig {
    int steps = 5000;
    int batch_size = 32;
    int micro_batch = 8;  // fixed accumulation granularity; determinism anchor
    int threads = 0;      // 0 = hardware concurrency
    ScheduleConfig schedule;
    AdamWConfig adamw;
    std::uint64_t init_seed = 0;
    std::uint64_t train_seed = 0;
};

struct LossPoint {
    int step;
    double loss;  // batch mean of per-example summed CE
    double lr;
};

struct PretrainResult {
    LMParams params;
    OptState opt;
    std::vector<LossPoint> curve;
};

PromptChain chain_for(ModelKind kind, const VocabLayout& vocab, const CorpusExample& ex);

/// Gradient of the batch-mean summed-CE objective over equal-length chains.
/// Accumulation is ordered micro-batch by micro-batch, so the result is a
/// function of (params, chains, micro_batch) only, never of the thread count.
/// Returns the gradients and the batch-mean loss value.
std::pair<GradBuffers, double> ce_batch_gradient(const LMParams& params,
                                                 const std::vector<PromptChain>& chains,
                                                 int micro_batch, int threads);

/// Teacher-forced CE pretraining. Deterministic given config (thread count does
/// not affect results; accumulation is ordered by micro-batch). When
/// `resume_from` is set, training continues from that checkpoint and the curve
/// covers only the remaining steps. On a non-finite loss, aborts after writing
/// the last good parameters to `abort_dir` (when provided).
PretrainResult pretrain(ModelKind kind, const VocabLayout& vocab,
                        const std::vector<CorpusExample>& train, const LMConfig& model_cfg,
                        const TrainConfig& cfg, const std::string& resume_from = "",
                        const std::string& abort_dir = "");

void write_loss_curve(const std::vector<LossPoint>& curve, const std::string& path);

// ---- checkpointing ----

struct CheckpointMeta {
    std::string kind;  // "n2s" | "s2s" | free-form
    long long step = 0;
    std::uint64_t train_seed = 0;
    std::uint64_t config_hash = 0;
    VocabLayout vocab;  // band split; zeros when not applicable
};

/// manifest.json + params.bin. The blob is little-endian float64, row-major,
/// tensors at the offsets named by the manifest; optimizer moments follow the
/// parameters. Round-trips bit-exactly.
void save_checkpoint(const std::string& dir, const LMParams& params, const OptState* opt,
                     const CheckpointMeta& meta);

struct Checkpoint {
    LMParams params;
    std::optional<OptState> opt;
    CheckpointMeta meta;
};

/// `expected_config_hash`, when nonzero, must match the manifest.
Checkpoint load_checkpoint(const std::string& dir, std::uint64_t expected_config_hash = 0);

std::uint64_t lm_config_hash(const LMConfig& cfg);
std::uint64_t params_content_hash(const LMParams& params);

}  // namespace prefopt
