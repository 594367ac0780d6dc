#include "prefopt/dpo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <stdexcept>

#include "prefopt/parallel.hpp"

namespace prefopt {

void DpoConfig::validate(int vocab_size) const {
    if (!(beta > 0.0)) throw std::invalid_argument("DpoConfig: beta must be positive");
    if (top_k < 1 || top_k > vocab_size)
        throw std::invalid_argument("DpoConfig: top_k " + std::to_string(top_k) + " outside [1, " +
                                    std::to_string(vocab_size) + "]");
    if (z_pairs < 1) throw std::invalid_argument("DpoConfig: z_pairs must be positive");
    if (2 * z_pairs > n_candidates)
        throw std::invalid_argument("DpoConfig: need 2*Z <= N, got Z=" + std::to_string(z_pairs) +
                                    ", N=" + std::to_string(n_candidates));
    if (gt_as_preferred && z_pairs != 1)
        throw std::invalid_argument("DpoConfig: ground-truth-as-preferred runs with Z=1");
    if (steps < 1 || batch_size < 1 || micro_batch < 1)
        throw std::invalid_argument("DpoConfig: steps, batch_size, micro_batch must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("DpoConfig: lr must be positive");
}

// ---- preference-pair construction ----

std::optional<PreferenceBatch> try_build_preference_batch(const LMParams& ref,
                                                          const CorpusExample& ex,
                                                          const VocabLayout& vocab,
                                                          const JudgeModel& judge_a,
                                                          const DpoConfig& cfg, Rng rng) {
    cfg.validate(ref.config.vocab_size);
    if (!judge_a.calibrated())
        throw std::invalid_argument("build_preference_batch: judge is not calibrated");

    PreferenceBatch batch;
    batch.example_id = ex.id;
    batch.top_k = cfg.top_k;
    batch.n_candidates = cfg.n_candidates;
    batch.seed = rng.seed();
    batch.prompt = make_s2s_chain(vocab, ex.noisy_semantic, ex.clean_semantic, ex.noisy_acoustic,
                                  ex.clean_acoustic);

    auto candidates = sample_candidates(ref, batch.prompt, cfg.top_k, cfg.n_candidates,
                                        rng.derive("sample"), cfg.autoregressive_sampling);
    std::vector<double> scores(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) scores[i] = judge_a.score(candidates[i]);

    try {
        auto [winners, losers] = select_preference_indices(candidates, scores,
                                                           cfg.gt_as_preferred ? 1 : cfg.z_pairs);
        if (cfg.gt_as_preferred) {
            batch.preferred.push_back({ex.clean_acoustic, judge_a.score(ex.clean_acoustic), -1});
            batch.rejected.push_back({candidates[losers[0]], scores[losers[0]], losers[0]});
        } else {
            for (int w : winners) batch.preferred.push_back({candidates[w], scores[w], w});
            for (int l : losers) batch.rejected.push_back({candidates[l], scores[l], l});
        }
    } catch (const std::runtime_error&) {
        return std::nullopt;
    }
    return batch;
}

PreferenceBatch build_preference_batch(const LMParams& ref, const CorpusExample& ex,
                                       const VocabLayout& vocab, const JudgeModel& judge_a,
                                       const DpoConfig& cfg, Rng rng) {
    auto batch = try_build_preference_batch(ref, ex, vocab, judge_a, cfg, rng);
    if (!batch)
        throw std::runtime_error(
            "build_preference_batch: fewer than " +
            std::to_string(cfg.gt_as_preferred ? 2 : 2 * cfg.z_pairs) +
            " distinct candidates in " + std::to_string(cfg.n_candidates) +
            " draws; raise top_k (currently " + std::to_string(cfg.top_k) + ") or n_candidates");
    return std::move(*batch);
}

std::pair<std::vector<int>, std::vector<int>> select_preference_indices(
    const std::vector<std::vector<int>>& candidates, const std::vector<double>& scores,
    int z_pairs) {
    if (candidates.size() != scores.size())
        throw std::invalid_argument("select_preference_indices: " + std::to_string(scores.size()) +
                                    " scores for " + std::to_string(candidates.size()) +
                                    " candidates");
    // Highest score first, ties toward the lower candidate index; then drop
    // duplicate sequences (keeps the lowest-index copy) so the preferred and
    // rejected sets cannot share a sequence.
    std::vector<int> order(candidates.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    std::vector<int> distinct;
    for (int idx : order) {
        bool duplicate = false;
        for (int kept : distinct)
            if (candidates[kept] == candidates[idx]) {
                duplicate = true;
                break;
            }
        if (!duplicate) distinct.push_back(idx);
    }
    if (static_cast<int>(distinct.size()) < 2 * z_pairs)
        throw std::runtime_error("select_preference_indices: only " +
                                 std::to_string(distinct.size()) + " distinct candidates out of " +
                                 std::to_string(candidates.size()) + " draws, need " +
                                 std::to_string(2 * z_pairs));
    std::vector<int> winners(distinct.begin(), distinct.begin() + z_pairs);
    std::vector<int> losers;
    for (int z = 0; z < z_pairs; ++z) losers.push_back(distinct[distinct.size() - 1 - z]);
    return {std::move(winners), std::move(losers)};
}

// ---- DPO objective ----

namespace {

PromptChain with_target(const PromptChain& prompt, const std::vector<int>& target) {
    if (static_cast<int>(target.size()) != prompt.target_len)
        throw std::invalid_argument("dpo: candidate length " + std::to_string(target.size()) +
                                    " does not match the prompt target span of " +
                                    std::to_string(prompt.target_len));
    PromptChain chain = prompt;
    std::copy(target.begin(), target.end(), chain.tokens.begin() + chain.target_start);
    return chain;
}

std::vector<std::pair<int, int>> pair_indices(int z_pairs, PairingRule pairing) {
    std::vector<std::pair<int, int>> pairs;
    if (pairing == PairingRule::rank_matched) {
        for (int z = 0; z < z_pairs; ++z) pairs.emplace_back(z, z);
    } else {
        for (int w = 0; w < z_pairs; ++w)
            for (int l = 0; l < z_pairs; ++l) pairs.emplace_back(w, l);
    }
    return pairs;
}

void check_same_interface(const LMParams& theta, const LMParams& ref) {
    if (theta.config.vocab_size != ref.config.vocab_size)
        throw std::invalid_argument("dpo: target and reference models disagree on the vocabulary, " +
                                    std::to_string(theta.config.vocab_size) + " vs " +
                                    std::to_string(ref.config.vocab_size));
}

struct PairTerms {
    Tensor loss;     // graph-attached scalar
    double margin;   // beta-free log-ratio margin value
};

// Builds the pair losses for a group of examples in one theta forward.
// ce_out, when non-null, receives per-example -log p_theta(ground truth) terms
// computed inside the same forward.
std::vector<PairTerms> group_pair_terms(const LMParams& theta, const LMParams& ref,
                                        const std::vector<const PreferenceBatch*>& group,
                                        double beta, PairingRule pairing,
                                        std::vector<Tensor>* ce_out) {
    check_same_interface(theta, ref);
    std::vector<PromptChain> chains;
    const int z = group.empty() ? 0 : static_cast<int>(group[0]->preferred.size());
    for (const PreferenceBatch* b : group) {
        if (static_cast<int>(b->preferred.size()) != z ||
            b->preferred.size() != b->rejected.size() || b->preferred.empty())
            throw std::invalid_argument("dpo: preference sets must be non-empty and equally sized");
        for (const auto& c : b->preferred) chains.push_back(with_target(b->prompt, c.tokens));
        for (const auto& c : b->rejected) chains.push_back(with_target(b->prompt, c.tokens));
        if (ce_out) chains.push_back(b->prompt);
    }
    const int per_example = 2 * z + (ce_out ? 1 : 0);

    std::vector<const PromptChain*> views;
    views.reserve(chains.size());
    for (const auto& c : chains) views.push_back(&c);
    std::vector<Tensor> theta_lp = sequence_logprob_batch(theta, views);

    std::vector<double> ref_lp;
    {
        NoGradGuard no_grad;
        std::vector<const PromptChain*> cand_views;
        for (std::size_t i = 0; i < group.size(); ++i)
            for (int j = 0; j < 2 * z; ++j)
                cand_views.push_back(views[i * per_example + j]);
        for (const Tensor& t : sequence_logprob_batch(ref, cand_views)) ref_lp.push_back(t.item());
    }

    std::vector<PairTerms> terms;
    const auto pairs = pair_indices(z, pairing);
    for (std::size_t i = 0; i < group.size(); ++i) {
        const std::size_t base = i * per_example;
        const std::size_t ref_base = i * 2 * z;
        for (const auto& [w, l] : pairs) {
            Tensor theta_margin = sub(theta_lp[base + w], theta_lp[base + z + l]);
            const double ref_margin = ref_lp[ref_base + w] - ref_lp[ref_base + z + l];
            Tensor m = sub(theta_margin, Tensor::scalar(ref_margin));
            PairTerms term;
            term.loss = scale(log_sigmoid(scale(m, beta)), -1.0);
            term.margin = m.item();
            terms.push_back(std::move(term));
        }
        if (ce_out) ce_out->push_back(scale(theta_lp[base + 2 * z], -1.0));
    }
    return terms;
}

}  // namespace

Tensor dpo_loss_tensor(const LMParams& theta, const LMParams& ref,
                       const std::vector<PreferenceBatch>& batch, double beta,
                       PairingRule pairing) {
    if (batch.empty()) throw std::invalid_argument("dpo_loss: empty batch");
    if (!(beta > 0.0)) throw std::invalid_argument("dpo_loss: beta must be positive");
    std::vector<const PreferenceBatch*> group;
    for (const auto& b : batch) group.push_back(&b);
    auto terms = group_pair_terms(theta, ref, group, beta, pairing, nullptr);
    std::vector<Tensor> losses;
    losses.reserve(terms.size());
    for (auto& t : terms) losses.push_back(t.loss);
    return scale(sum(stack_scalars(losses)), 1.0 / static_cast<double>(losses.size()));
}

double dpo_loss(const LMParams& theta, const LMParams& ref,
                const std::vector<PreferenceBatch>& batch, double beta, PairingRule pairing) {
    NoGradGuard no_grad;
    return dpo_loss_tensor(theta, ref, batch, beta, pairing).item();
}

// ---- combined update ----

StepStats combined_step(LMParams& theta, const LMParams& ref,
                        const std::vector<PreferenceBatch>& prefs,
                        const std::vector<const CorpusExample*>& examples,
                        const VocabLayout& vocab, const DpoConfig& cfg, OptState& opt) {
    cfg.validate(theta.config.vocab_size);
    StepStats stats;
    stats.lr = cfg.lr;

    if (cfg.loss_mode == DpoLossMode::ce) {
        std::vector<PromptChain> chains;
        chains.reserve(examples.size());
        for (const CorpusExample* ex : examples)
            chains.push_back(chain_for(ModelKind::s2s, vocab, *ex));
        auto [grads, loss] = ce_batch_gradient(theta, chains, cfg.micro_batch, cfg.threads);
        if (!std::isfinite(loss)) throw std::runtime_error("combined_step: non-finite CE loss");
        adamw_step(theta, grads, opt, cfg.lr);
        stats.ce_loss = loss;
        stats.dpo_loss = std::nan("");
        stats.mean_margin = std::nan("");
        stats.mean_judge_gap = std::nan("");
        return stats;
    }

    if (prefs.empty()) throw std::invalid_argument("combined_step: no preference batches");
    const int batch = static_cast<int>(prefs.size());
    const int pairs_per_example = cfg.pairing == PairingRule::rank_matched
                                      ? cfg.z_pairs
                                      : cfg.z_pairs * cfg.z_pairs;
    const int total_pairs = batch * pairs_per_example;
    const bool with_ce = cfg.loss_mode == DpoLossMode::ce_dpo;
    const int n_micro = (batch + cfg.micro_batch - 1) / cfg.micro_batch;

    struct Micro {
        GradBuffers grads;
        double dpo_sum = 0.0, ce_sum = 0.0, margin_sum = 0.0;
    };
    std::vector<Micro> micro(n_micro);

    parallel_for(n_micro, cfg.threads, [&](int mb) {
        const int lo = mb * cfg.micro_batch;
        const int hi = std::min(batch, lo + cfg.micro_batch);
        std::vector<const PreferenceBatch*> group;
        for (int i = lo; i < hi; ++i) group.push_back(&prefs[i]);

        LMParams ws = theta.grad_workspace();
        std::vector<Tensor> ce_terms;
        auto terms = group_pair_terms(ws, ref, group, cfg.beta, cfg.pairing, &ce_terms);

        std::vector<Tensor> losses;
        for (auto& t : terms) {
            losses.push_back(t.loss);
            micro[mb].dpo_sum += t.loss.item();
            micro[mb].margin_sum += t.margin;
        }
        Tensor objective = scale(sum(stack_scalars(losses)), 1.0 / total_pairs);
        for (const Tensor& ce : ce_terms) micro[mb].ce_sum += ce.item();
        if (with_ce) {
            Tensor ce_total = scale(sum(stack_scalars(ce_terms)), 1.0 / batch);
            objective = add(objective, ce_total);
        }
        backward(objective);
        micro[mb].grads = collect_grads(ws);
    });

    GradBuffers grads = std::move(micro[0].grads);
    double dpo_sum = micro[0].dpo_sum, ce_sum = micro[0].ce_sum, margin_sum = micro[0].margin_sum;
    for (int mb = 1; mb < n_micro; ++mb) {
        add_grads(grads, micro[mb].grads);
        dpo_sum += micro[mb].dpo_sum;
        ce_sum += micro[mb].ce_sum;
        margin_sum += micro[mb].margin_sum;
    }

    stats.dpo_loss = dpo_sum / total_pairs;
    stats.ce_loss = ce_sum / batch;
    stats.mean_margin = margin_sum / total_pairs;
    double gap = 0.0;
    for (const auto& p : prefs) {
        double win = 0.0, lose = 0.0;
        for (const auto& c : p.preferred) win += c.score;
        for (const auto& c : p.rejected) lose += c.score;
        gap += win / p.preferred.size() - lose / p.rejected.size();
    }
    stats.mean_judge_gap = gap / batch;

    const double objective_value = stats.dpo_loss + (with_ce ? ce_sum / batch : 0.0);
    if (!std::isfinite(objective_value))
        throw std::runtime_error("combined_step: non-finite loss");
    adamw_step(theta, grads, opt, cfg.lr);
    return stats;
}

// ---- fine-tuning loop ----

FinetuneResult finetune(const LMParams& ref, const std::vector<CorpusExample>& train,
                        const VocabLayout& vocab, const JudgeModel& judge_a, const DpoConfig& cfg,
                        const std::string& abort_dir) {
    cfg.validate(ref.config.vocab_size);
    if (train.empty()) throw std::invalid_argument("finetune: empty train split");

    LMParams frozen = ref.clone();
    frozen.set_requires_grad(false);

    FinetuneResult result;
    result.params = ref.clone();
    OptState opt = OptState::init(result.params, cfg.adamw);

    Rng batch_root = Rng(cfg.seed).derive("batch");
    Rng prefs_root = Rng(cfg.seed).derive("prefs");

    std::map<std::size_t, PreferenceBatch> cache;  // precompute mode only
    std::mutex cache_mutex;

    for (int step = 0; step < cfg.steps; ++step) {
        Rng batch_rng = batch_root.derive(static_cast<std::uint64_t>(step));
        std::vector<std::size_t> picks(cfg.batch_size);
        for (auto& p : picks) p = batch_rng.next_below(train.size());

        std::vector<const CorpusExample*> examples;
        examples.reserve(picks.size());
        for (std::size_t p : picks) examples.push_back(&train[p]);

        std::vector<PreferenceBatch> prefs;
        if (cfg.loss_mode != DpoLossMode::ce) {
            prefs.resize(cfg.batch_size);
            Rng step_root = prefs_root.derive(static_cast<std::uint64_t>(step));
            parallel_for(cfg.batch_size, cfg.threads, [&](int slot) {
                // Barely-corrupted examples can leave the converged reference
                // nearly deterministic; walk to the next train example when the
                // candidate set degenerates. The walk is a pure function of the
                // drawn index, so runs stay bit-reproducible.
                std::size_t pick = picks[slot];
                Rng slot_rng = step_root.derive(static_cast<std::uint64_t>(slot));
                for (int probe = 0;; ++probe) {
                    if (probe > 64)
                        throw std::runtime_error(
                            "finetune: no usable preference batch near train example " +
                            std::to_string(picks[slot]) + " after 64 substitutions");
                    std::optional<PreferenceBatch> built;
                    if (cfg.resample_each_step) {
                        built = try_build_preference_batch(
                            frozen, train[pick], vocab, judge_a, cfg,
                            probe == 0 ? slot_rng
                                       : slot_rng.derive("retry").derive(
                                             static_cast<std::uint64_t>(probe)));
                    } else {
                        {
                            std::lock_guard<std::mutex> lock(cache_mutex);
                            auto it = cache.find(pick);
                            if (it != cache.end()) {
                                prefs[slot] = it->second;
                                examples[slot] = &train[pick];
                                return;
                            }
                        }
                        built = try_build_preference_batch(frozen, train[pick], vocab, judge_a,
                                                           cfg, prefs_root.derive(pick));
                        if (built) {
                            std::lock_guard<std::mutex> lock(cache_mutex);
                            cache.emplace(pick, *built);
                        }
                    }
                    if (built) {
                        prefs[slot] = std::move(*built);
                        examples[slot] = &train[pick];
                        return;
                    }
                    pick = (pick + 1) % train.size();
                }
            });
        }

        StepStats stats;
        try {
            stats = combined_step(result.params, frozen, prefs, examples, vocab, cfg, opt);
        } catch (const std::runtime_error& e) {
            if (!abort_dir.empty())
                save_checkpoint(abort_dir, result.params, &opt,
                                CheckpointMeta{"s2s-dpo", step, cfg.seed,
                                               lm_config_hash(result.params.config), vocab});
            throw std::runtime_error("finetune: aborted at step " + std::to_string(step) + ": " +
                                     e.what() +
                                     (abort_dir.empty() ? "" : ", last good state in " + abort_dir));
        }
        result.trace.push_back({step, stats});
    }
    return result;
}

void write_finetune_trace(const std::vector<FinetuneTraceRow>& trace, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "step,dpo_loss,ce_loss,mean_margin,mean_judgeA_gap,lr\n";
    char buf[160];
    for (const auto& row : trace) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", row.step,
                      row.stats.dpo_loss, row.stats.ce_loss, row.stats.mean_margin,
                      row.stats.mean_judge_gap, row.stats.lr);
        out << buf;
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace prefopt
