#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prefopt/rng.hpp"
#include "prefopt/tensor.hpp"
#include "prefopt/vocab.hpp"

namespace prefopt {

struct LMConfig {
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq_len = 256;
    int vocab_size = 0;

    void validate() const;
};

LMConfig make_lm_config(int d_model, int n_layers, int n_heads, int d_ff, int max_seq_len,
                        const VocabLayout& vocab);

/// All learnable tensors of one pre-norm decoder-only transformer.
struct LMParams {
    struct Layer {
        Tensor ln1_gain, ln1_bias;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_gain, ln2_bias;
        Tensor w_ff1, b_ff1, w_ff2, b_ff2;
    };

    LMConfig config;
    Tensor tok_emb;  // [V, d_model]
    Tensor pos_emb;  // [max_seq_len, d_model]
    std::vector<Layer> layers;
    Tensor lnf_gain, lnf_bias;
    Tensor w_out;  // [d_model, V]
    Tensor b_out;  // [V]

    std::vector<std::pair<std::string, Tensor*>> named_tensors();
    std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;

    /// Deep copy: fresh value and gradient buffers.
    LMParams clone() const;
    /// Shares values, owns fresh zeroed gradients. One per worker thread.
    LMParams grad_workspace() const;

    void zero_grad();
    void set_requires_grad(bool enabled);
    long long n_params() const;
};

/// Weights ~ normal(0, 0.02); layer-norm gains 1; all biases 0. Deterministic per rng.
LMParams init_params(const LMConfig& config, Rng rng);

/// Logits for every position of `batch` equal-length token rows, shape
/// [batch*seq_len, vocab_size]. Row b*seq_len+t is conditioned on row b's
/// tokens 0..t (causal).
Tensor lm_forward(const LMParams& params, std::span<const int> tokens_flat, int batch, int seq_len);

/// Rows of next-token logits covering the chain's target span, one row per
/// target position, conditioned on everything strictly before that position.
Tensor teacher_forced_logits(const LMParams& params, const PromptChain& chain);

/// Sum over the target span of log softmax(row)[token]; graph-attached when
/// gradients are enabled.
Tensor sequence_logprob_tensor(const LMParams& params, const PromptChain& chain);
double sequence_logprob(const LMParams& params, const PromptChain& chain);

/// One forward pass for several equal-length chains; per-chain logprob scalars.
std::vector<Tensor> sequence_logprob_batch(const LMParams& params,
                                           const std::vector<const PromptChain*>& chains);

struct TopkDistribution {
    std::vector<int> ids;      // K highest-logit ids, logit-descending, ties to lower id
    std::vector<double> probs;  // softmax over exactly those K logits
};

TopkDistribution topk_filter(std::span<const double> row, int k);

/// Draws `n` sequences over the target span. Every position is sampled from the
/// top-k filtered row of the teacher-forced logits, i.e. conditioned on the
/// ground-truth prefix in the chain. `autoregressive` switches to conditioning
/// on the sampled prefix instead (ablation only).
std::vector<std::vector<int>> sample_candidates(const LMParams& params, const PromptChain& chain,
                                                int k, int n, Rng rng,
                                                bool autoregressive = false);

enum class DecodeMode { greedy, topk };

/// Autoregressive decoding of `t_out` tokens from a prompt-only chain.
std::vector<int> generate(const LMParams& params, const PromptChain& prompt, int t_out,
                          DecodeMode mode, int k = 1, Rng rng = Rng(0));

/// Greedy-decodes all prompts (equal lengths) in lockstep with batched forwards.
std::vector<std::vector<int>> generate_batch_greedy(const LMParams& params,
                                                    const std::vector<PromptChain>& prompts,
                                                    int t_out);

}  // namespace prefopt
