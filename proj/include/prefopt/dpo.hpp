#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "prefopt/judge.hpp"
#include "prefopt/training.hpp"

namespace prefopt {

enum class PairingRule { rank_matched, all_pairs };
enum class DpoLossMode { ce, dpo, ce_dpo };

struct DpoConfig {
    double beta = 0.1;
    int top_k = 16;
    int n_candidates = 8;
    int z_pairs = 1;
    PairingRule pairing = PairingRule::rank_matched;
    DpoLossMode loss_mode = DpoLossMode::dpo;
    int steps = 400;
    double lr = 1e-4;  // fixed, no schedule
    int batch_size = 8;
    int micro_batch = 8;
    int threads = 0;
    AdamWConfig adamw;
    std::uint64_t seed = 0;
    bool resample_each_step = true;      // rebuild pairs from the frozen reference every step
    bool gt_as_preferred = false;        // ablation: preferred set := { ground-truth sequence }
    bool autoregressive_sampling = false;  // ablation: condition draws on the sampled prefix

    void validate(int vocab_size) const;
};

struct ScoredCandidate {
    std::vector<int> tokens;
    double score = 0.0;
    int candidate_index = 0;  // position in the sampled family; -1 for the ground truth
};

/// One example's preference sets. `preferred[z]` is the z-th best candidate and
/// `rejected[z]` the z-th worst; the two sets never share a sequence and
/// min(preferred scores) >= max(rejected scores).
struct PreferenceBatch {
    long long example_id = 0;
    PromptChain prompt;  // separator chain with the ground-truth target span
    std::vector<ScoredCandidate> preferred;
    std::vector<ScoredCandidate> rejected;
    int top_k = 0;
    int n_candidates = 0;
    std::uint64_t seed = 0;
};

/// Top/bottom-Z selection over content-distinct candidates. Returns the winner
/// indices (best first) and loser indices (worst first); score ties break
/// toward the lower candidate index, exact duplicates keep their lowest-index
/// copy. Throws when fewer than 2Z distinct sequences exist.
std::pair<std::vector<int>, std::vector<int>> select_preference_indices(
    const std::vector<std::vector<int>>& candidates, const std::vector<double>& scores,
    int z_pairs);

/// Teacher-forced sampling from the frozen reference, judge scoring, and
/// top/bottom-Z selection over content-distinct candidates (score ties break
/// toward the lower candidate index). Throws when fewer than 2Z distinct
/// sequences were drawn, suggesting a larger top_k.
PreferenceBatch build_preference_batch(const LMParams& ref, const CorpusExample& ex,
                                       const VocabLayout& vocab, const JudgeModel& judge_a,
                                       const DpoConfig& cfg, Rng rng);

/// As above but reports a degenerate candidate set (too few distinct
/// sequences, possible on barely-corrupted examples where the converged
/// reference is nearly deterministic) as nullopt instead of throwing.
/// The fine-tuning loop substitutes a neighbouring example in that case.
std::optional<PreferenceBatch> try_build_preference_batch(const LMParams& ref,
                                                          const CorpusExample& ex,
                                                          const VocabLayout& vocab,
                                                          const JudgeModel& judge_a,
                                                          const DpoConfig& cfg, Rng rng);

/// Mean over all pairs of -log sigmoid(beta * [(log pi_theta(A+) - log pi_ref(A+))
///                                            - (log pi_theta(A-) - log pi_ref(A-))]).
/// Graph-attached through the theta log-probabilities; the reference enters as
/// constants. Both models score exactly the chains carried by the batch.
Tensor dpo_loss_tensor(const LMParams& theta, const LMParams& ref,
                       const std::vector<PreferenceBatch>& batch, double beta,
                       PairingRule pairing = PairingRule::rank_matched);
double dpo_loss(const LMParams& theta, const LMParams& ref,
                const std::vector<PreferenceBatch>& batch, double beta,
                PairingRule pairing = PairingRule::rank_matched);

struct StepStats {
    double dpo_loss = 0.0;
    double ce_loss = 0.0;
    double mean_margin = 0.0;     // mean of beta-free log-ratio margins
    double mean_judge_gap = 0.0;  // mean over examples of (mean A+ score - mean A- score)
    double lr = 0.0;
};

/// One fixed-lr AdamW update of theta under the configured loss mode. CE mode
/// runs the exact pretraining gradient path on the ground-truth chains; DPO
/// modes consume the given preference batches. The reference is never touched.
StepStats combined_step(LMParams& theta, const LMParams& ref,
                        const std::vector<PreferenceBatch>& prefs,
                        const std::vector<const CorpusExample*>& examples,
                        const VocabLayout& vocab, const DpoConfig& cfg, OptState& opt);

struct FinetuneTraceRow {
    int step;
    StepStats stats;
};

struct FinetuneResult {
    LMParams params;
    std::vector<FinetuneTraceRow> trace;
};

/// Initialises theta as a copy of the frozen reference and runs cfg.steps
/// combined updates over batches drawn from the train split. Deterministic
/// given cfg; thread count never changes the numbers. On a non-finite loss,
/// aborts after writing the last good parameters to `abort_dir` (if given).
FinetuneResult finetune(const LMParams& ref, const std::vector<CorpusExample>& train,
                        const VocabLayout& vocab, const JudgeModel& judge_a, const DpoConfig& cfg,
                        const std::string& abort_dir = "");

void write_finetune_trace(const std::vector<FinetuneTraceRow>& trace, const std::string& path);

}  // namespace prefopt
