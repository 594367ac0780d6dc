// Acceptance suite: drives the full desk-scale experiment through the CLI and
// checks every acceptance criterion at its stated tolerance. Prints one
// PASS/FAIL line per criterion and exits nonzero if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "prefopt/cli.hpp"
#include "prefopt/config.hpp"
#include "prefopt/dpo.hpp"
#include "prefopt/eval.hpp"
#include "prefopt/gradcheck.hpp"
#include "prefopt/parallel.hpp"

using namespace prefopt;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), f, a, b, c, d);
    return std::string(buf);
}

PromptChain raw_chain(std::vector<int> tokens, int target_len) {
    PromptChain c;
    c.tokens = std::move(tokens);
    c.target_len = target_len;
    c.target_start = static_cast<int>(c.tokens.size()) - target_len;
    return c;
}

LMConfig tiny_lm_config() {
    LMConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_seq_len = 16;
    cfg.vocab_size = 12;
    return cfg;
}

// ---- criterion 1: gradient correctness on CE and DPO ----

void criterion_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    LMConfig cfg = tiny_lm_config();
    LMParams params = init_params(cfg, Rng(13));
    PromptChain ce_chain = raw_chain({0, 7, 3, 11, 5, 2}, 4);

    std::vector<Tensor> leaves;
    for (auto& [name, t] : params.named_tensors()) leaves.push_back(*t);
    auto ce_fn = [&] {
        return ce_loss(teacher_forced_logits(params, ce_chain), ce_chain.target_tokens());
    };
    const double ce_err = grad_check(ce_fn, leaves, 1e-5, Rng(101), 150);

    LMParams ref = params.clone();
    LMParams theta = params.clone();
    Rng noise(5);
    for (auto& [name, t] : theta.named_tensors())
        for (auto& v : *t->data) v += 0.02 * noise.next_gaussian();

    PreferenceBatch batch;
    batch.prompt = raw_chain({0, 4, 9, 1, 6, 8}, 4);
    batch.preferred.push_back({{2, 7, 7, 1}, 4.0, 0});
    batch.rejected.push_back({{10, 3, 0, 5}, 1.5, 1});
    PreferenceBatch batch2;
    batch2.prompt = raw_chain({0, 1, 2, 3, 4, 5}, 4);
    batch2.preferred.push_back({{6, 7, 8, 9}, 3.5, 0});
    batch2.rejected.push_back({{9, 8, 7, 6}, 2.0, 1});

    std::vector<Tensor> theta_leaves;
    for (auto& [name, t] : theta.named_tensors()) theta_leaves.push_back(*t);
    auto dpo_fn = [&] { return dpo_loss_tensor(theta, ref, {batch, batch2}, 0.1); };
    const double dpo_err = grad_check(dpo_fn, theta_leaves, 1e-5, Rng(202), 150);

    const double elapsed = seconds_since(t0);
    report(1, ce_err < 1e-4 && dpo_err < 1e-4 && elapsed < 60.0,
           fmt("CE/DPO finite-difference max relative error %.3g / %.3g (< 1e-4), %.1fs (< 60s)",
               ce_err, dpo_err, elapsed));
}

// ---- criterion 2: DPO identities at theta == ref ----

void criterion_dpo_identities() {
    constexpr double kLn2 = 0.69314718055994530942;
    LMConfig cfg = tiny_lm_config();
    LMParams ref = init_params(cfg, Rng(23));
    LMParams theta = ref.clone();

    PreferenceBatch batch;
    batch.prompt = raw_chain({0, 4, 9, 1, 6, 8}, 4);
    batch.preferred.push_back({{2, 7, 7, 1}, 4.0, 0});
    batch.rejected.push_back({{10, 3, 0, 5}, 1.5, 1});

    bool ok = true;
    std::string detail;

    // Per-pair loss at the symmetric point.
    const double loss = dpo_loss(theta, ref, {batch}, 0.1);
    ok = ok && std::abs(loss - kLn2) < 1e-9;

    // Gradient signs on the two sequence log-probabilities.
    const double beta = 0.1;
    Tensor lp_win = Tensor::scalar(-5.21, true);
    Tensor lp_lose = Tensor::scalar(-5.21, true);
    backward(scale(log_sigmoid(scale(sub(sub(lp_win, lp_lose), Tensor::scalar(0.0)), beta)), -1.0));
    const double g_win = (*lp_win.grad)[0], g_lose = (*lp_lose.grad)[0];
    ok = ok && std::abs(g_win - (-beta / 2)) < 1e-9 && std::abs(g_lose - beta / 2) < 1e-9;

    // Swapping the sets negates the margin exactly.
    PromptChain win_chain = batch.prompt, lose_chain = batch.prompt;
    std::copy(batch.preferred[0].tokens.begin(), batch.preferred[0].tokens.end(),
              win_chain.tokens.begin() + win_chain.target_start);
    std::copy(batch.rejected[0].tokens.begin(), batch.rejected[0].tokens.end(),
              lose_chain.tokens.begin() + lose_chain.target_start);
    // Nudge theta so margins are nonzero.
    (*theta.b_out.data)[2] += 0.37;
    const double m = (sequence_logprob(theta, win_chain) - sequence_logprob(ref, win_chain)) -
                     (sequence_logprob(theta, lose_chain) - sequence_logprob(ref, lose_chain));
    const double m_swapped = (sequence_logprob(theta, lose_chain) - sequence_logprob(ref, lose_chain)) -
                             (sequence_logprob(theta, win_chain) - sequence_logprob(ref, win_chain));
    ok = ok && (m_swapped == -m) && m != 0.0;

    report(2, ok,
           fmt("loss at theta==ref %.12f (ln 2 +- 1e-9), pair grads %.6f/%.6f (-+beta/2), "
               "swapped margin exactly negated",
               loss, g_win, g_lose));
}

// ---- criterion 4: probability normalisation oracle ----

void criterion_normalization() {
    bool ok = true;
    double worst_sum_err = 0.0;
    for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        LMConfig cfg;
        cfg.d_model = 8;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.d_ff = 16;
        cfg.max_seq_len = 8;
        cfg.vocab_size = 3;
        LMParams p = init_params(cfg, Rng(seed));
        double total = 0.0;
        for (int t1 = 0; t1 < 3; ++t1)
            for (int t2 = 0; t2 < 3; ++t2)
                total += std::exp(sequence_logprob(p, raw_chain({0, t1, t2}, 2)));
        worst_sum_err = std::max(worst_sum_err, std::abs(total - 1.0));
    }
    ok = ok && worst_sum_err < 1e-9;

    double worst_topk_err = 0.0;
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        const int v = 2 + rng.next_int(30);
        std::vector<double> row(v);
        for (auto& x : row) x = 3.0 * rng.next_gaussian();
        TopkDistribution d = topk_filter(row, v);
        Tensor full = row_softmax(Tensor::of({1, v}, row));
        for (int i = 0; i < v; ++i)
            worst_topk_err = std::max(worst_topk_err,
                                      std::abs(d.probs[i] - full.at(0, d.ids[i])));
    }
    ok = ok && worst_topk_err < 1e-12;

    report(4, ok,
           fmt("exhaustive sequence-probability sum off by %.3g (< 1e-9); top-k at K=V off full "
               "softmax by %.3g (< 1e-12)",
               worst_sum_err, worst_topk_err));
}

// ---- pipeline driving ----

struct Paths {
    std::string root;
    std::string eval_report(const std::string& s) const { return root + "/eval/" + s + ".json"; }
    std::string dpo_ckpt(const std::string& arm) const {
        return root + "/dpo/" + arm + "/checkpoint";
    }
};

bool run_stage(const std::string& config, const std::string& out,
               std::vector<std::string> args) {
    args.insert(args.begin() + 1, {"--config", config, "--out", out});
    const int rc = run_cli(args);
    if (rc != 0) std::fprintf(stderr, "stage '%s' failed with code %d\n", args[0].c_str(), rc);
    return rc == 0;
}

bool run_pipeline(const std::string& config, const std::string& out) {
    const Paths paths{out};
    return run_stage(config, out, {"gen-world"}) && run_stage(config, out, {"gen-data"}) &&
           run_stage(config, out, {"fit-judges"}) && run_stage(config, out, {"pretrain-n2s"}) &&
           run_stage(config, out, {"pretrain-s2s"}) &&
           run_stage(config, out, {"dpo-finetune", "--name", "dpo", "--mode", "dpo"}) &&
           run_stage(config, out, {"dpo-finetune", "--name", "ce", "--mode", "ce"}) &&
           run_stage(config, out, {"evaluate", "--system", "noisy"}) &&
           run_stage(config, out, {"evaluate"}) &&
           run_stage(config, out,
                     {"evaluate", "--system", "dpo", "--s2s-checkpoint", paths.dpo_ckpt("dpo")}) &&
           run_stage(config, out,
                     {"evaluate", "--system", "ce", "--s2s-checkpoint", paths.dpo_ckpt("ce")}) &&
           run_stage(config, out, {"ablate"}) && run_stage(config, out, {"report"});
}

// ---- criterion 3: Fig.-1 sampling-pipeline properties ----

void criterion_sampling_properties(const PipelineConfig& cfg, const std::string& out) {
    World world = load_world(out + "/world.json");
    Corpus corpus = load_corpus(out + "/corpus");
    JudgeModel judge_a = JudgeModel::load(out + "/judges/judge_a.json");
    const VocabLayout vocab = world.vocab();
    LMParams ref = load_checkpoint(out + "/checkpoints/s2s",
                                   lm_config_hash(cfg.s2s.lm_config(vocab)))
                       .params;
    ref.set_requires_grad(false);

    long long violations = 0;
    long long batches_built = 0;
    long long degenerate_rejections = 0;
    std::string first_violation;

    auto run_block = [&](int z_pairs, int count, std::uint64_t seed_base) {
        DpoConfig dcfg = cfg.dpo;
        dcfg.z_pairs = z_pairs;
        const auto& pool = corpus.train;
        for (int built = 0, i = 0; built < count; ++i) {
            const CorpusExample& ex = pool[i % pool.size()];
            Rng rng(seed_base + i);
            // Degenerate candidate sets are rejected by contract; they produce
            // no batch and are skipped here.
            if (!try_build_preference_batch(ref, ex, vocab, judge_a, dcfg, rng)) {
                ++degenerate_rejections;
                continue;
            }
            ++built;
            PromptChain prompt = make_s2s_chain(vocab, ex.noisy_semantic, ex.clean_semantic,
                                                ex.noisy_acoustic, ex.clean_acoustic);
            auto candidates = sample_candidates(ref, prompt, dcfg.top_k, dcfg.n_candidates,
                                                rng.derive("sample"));
            // Support check against the teacher-forced rows, all draws.
            NoGradGuard no_grad;
            Tensor logits = teacher_forced_logits(ref, prompt);
            const int v = logits.shape[1];
            for (int t = 0; t < logits.shape[0]; ++t) {
                TopkDistribution dist = topk_filter(
                    std::span<const double>(logits.data->data() + std::size_t(t) * v, v),
                    dcfg.top_k);
                const std::set<int> support(dist.ids.begin(), dist.ids.end());
                for (const auto& cand : candidates)
                    if (!support.count(cand[t])) {
                        ++violations;
                        if (first_violation.empty())
                            first_violation = "off-support token at example " + std::to_string(ex.id);
                    }
            }

            PreferenceBatch batch = build_preference_batch(ref, ex, vocab, judge_a, dcfg, rng);
            ++batches_built;
            if (static_cast<int>(batch.preferred.size()) != z_pairs ||
                static_cast<int>(batch.rejected.size()) != z_pairs) {
                ++violations;
                if (first_violation.empty()) first_violation = "wrong set size";
            }
            std::set<std::vector<int>> win_set, lose_set;
            double min_win = 1e18, max_lose = -1e18;
            for (const auto& c : batch.preferred) {
                win_set.insert(c.tokens);
                min_win = std::min(min_win, c.score);
            }
            for (const auto& c : batch.rejected) {
                lose_set.insert(c.tokens);
                max_lose = std::max(max_lose, c.score);
            }
            for (const auto& w : win_set)
                if (lose_set.count(w)) {
                    ++violations;
                    if (first_violation.empty()) first_violation = "preferred/rejected overlap";
                }
            if (min_win < max_lose) {
                ++violations;
                if (first_violation.empty()) first_violation = "score ordering violated";
            }
        }
    };

    run_block(1, 500, 900000);
    run_block(4, 500, 910000);

    report(3, batches_built == 1000 && violations == 0,
           fmt("%.0f batches built (500 at Z=1, 500 at Z=4), %.0f property violations, "
               "%.0f degenerate candidate sets rejected by contract",
               double(batches_built), double(violations), double(degenerate_rejections)) +
               (first_violation.empty() ? "" : " [" + first_violation + "]"));
}

// ---- criterion 5: judge sanity ----

void criterion_judges(const PipelineConfig& cfg, const std::string& out) {
    World world = load_world(out + "/world.json");
    Corpus corpus = load_corpus(out + "/corpus");
    JudgeModel judge_a = JudgeModel::load(out + "/judges/judge_a.json");
    JudgeModel judge_b = JudgeModel::load(out + "/judges/judge_b.json");

    bool monotone = true;
    for (const JudgeModel* judge : {&judge_a, &judge_b}) {
        double previous = 1e18;
        for (double p_noise : {0.0, 0.1, 0.25, 0.5}) {
            CorruptionConfig ccfg;
            ccfg.p_noise = p_noise;
            double mean = 0.0;
            const int n = 250;
            Rng root(424242);
            for (int i = 0; i < n; ++i) {
                const auto& ex = corpus.train[i];
                Rng child = root.derive(std::uint64_t(i));
                auto [sbar, abar] =
                    corrupt(world, ex.clean_semantic, ex.clean_acoustic, ccfg, child);
                mean += judge->score(abar);
            }
            mean /= n;
            monotone = monotone && mean < previous;
            previous = mean;
        }
    }

    // Calibration anchors: recompute the medians the calibration used.
    double worst_anchor_err = 0.0;
    const auto check_anchor = [&](const JudgeModel& judge, const JudgeSettings& settings) {
        const int n = std::min<int>(cfg.judges.n_calibration,
                                    static_cast<int>(corpus.train.size()));
        std::vector<double> clean_ll, corr_ll;
        Rng root(settings.calibration_seed);
        CorruptionConfig ccfg;
        ccfg.p_noise = cfg.judges.corrupt_p_noise;
        for (int i = 0; i < n; ++i) {
            clean_ll.push_back(judge.mean_loglik(corpus.train[i].clean_acoustic));
            Rng child = root.derive(std::uint64_t(i));
            auto [sbar, abar] = corrupt(world, corpus.train[i].clean_semantic,
                                        corpus.train[i].clean_acoustic, ccfg, child);
            corr_ll.push_back(judge.mean_loglik(abar));
        }
        auto median = [](std::vector<double> xs) {
            std::sort(xs.begin(), xs.end());
            return xs.size() % 2 ? xs[xs.size() / 2]
                                 : 0.5 * (xs[xs.size() / 2 - 1] + xs[xs.size() / 2]);
        };
        worst_anchor_err = std::max(
            worst_anchor_err, std::abs(judge.score_from_loglik(median(clean_ll)) - 4.5));
        worst_anchor_err = std::max(
            worst_anchor_err, std::abs(judge.score_from_loglik(median(corr_ll)) - 1.5));
    };
    check_anchor(judge_a, cfg.judges.judge_a);
    check_anchor(judge_b, cfg.judges.judge_b);

    report(5, monotone && worst_anchor_err < 1e-9,
           fmt("mean scores strictly decreasing over p_noise {0, .1, .25, .5} for both judges; "
               "worst anchor error %.3g (< 1e-9)",
               worst_anchor_err));
}

// ---- criteria 6 and 7: desk-scale main result and ablation pattern ----

struct MainMetrics {
    EvalReport baseline, dpo, ce, z1_gt, z1, z4;
};

MainMetrics load_metrics(const std::string& out) {
    const Paths paths{out};
    MainMetrics m;
    m.baseline = EvalReport::load(paths.eval_report("baseline"));
    m.dpo = EvalReport::load(paths.eval_report("dpo"));
    m.ce = EvalReport::load(paths.eval_report("ce"));
    m.z1_gt = EvalReport::load(paths.eval_report("z1_gt"));
    m.z1 = EvalReport::load(paths.eval_report("z1"));
    m.z4 = EvalReport::load(paths.eval_report("z4"));
    return m;
}

void criterion_main_result(const MainMetrics& m, double pipeline_seconds) {
    const double rel_nr = (m.dpo.no_reverb.judge_a - m.baseline.no_reverb.judge_a) /
                          m.baseline.no_reverb.judge_a;
    const double rel_rev =
        (m.dpo.reverb.judge_a - m.baseline.reverb.judge_a) / m.baseline.reverb.judge_a;
    const bool a_ok = rel_nr >= 0.05 && rel_rev >= 0.05;

    const bool b_ok = m.dpo.no_reverb.judge_b > m.baseline.no_reverb.judge_b &&
                      m.dpo.reverb.judge_b > m.baseline.reverb.judge_b;

    const double ce_rel_nr = std::abs(m.ce.no_reverb.judge_a - m.baseline.no_reverb.judge_a) /
                             m.baseline.no_reverb.judge_a;
    const double ce_rel_rev =
        std::abs(m.ce.reverb.judge_a - m.baseline.reverb.judge_a) / m.baseline.reverb.judge_a;
    const bool c_ok = ce_rel_nr < 0.02 && ce_rel_rev < 0.02;

    const bool time_ok = pipeline_seconds < 1800.0;

    report(6, a_ok && b_ok && c_ok && time_ok,
           fmt("DPO judge-A gain %+.1f%%/%+.1f%% (no-rev/rev, need >= +5%%); ", 100 * rel_nr,
               100 * rel_rev) +
               fmt("judge-B gain %+.4f/%+.4f (need > 0); ",
                   m.dpo.no_reverb.judge_b - m.baseline.no_reverb.judge_b,
                   m.dpo.reverb.judge_b - m.baseline.reverb.judge_b) +
               fmt("CE-only drift %.1f%%/%.1f%% (need < 2%%); pipeline %.0fs (< 1800s)",
                   100 * ce_rel_nr, 100 * ce_rel_rev, pipeline_seconds));
}

void info(const std::string& detail) {
    std::printf("[INFO] %s\n", detail.c_str());
    std::fflush(stdout);
}

// Desk-scale sanity readings that the spec asks to be measured and recorded
// alongside the main result: the clean >= enhanced >= noisy ordering, the N2S
// accuracy margin over chance, and which partition gained more from DPO.
void auxiliary_readings(const PipelineConfig& cfg, const std::string& out, const MainMetrics& m) {
    World world = load_world(out + "/world.json");
    Corpus corpus = load_corpus(out + "/corpus");
    JudgeModel judge_a = JudgeModel::load(out + "/judges/judge_a.json");
    const VocabLayout vocab = world.vocab();
    EvalReport noisy = EvalReport::load(out + "/eval/noisy.json");

    auto clean_mean = [&](const std::vector<CorpusExample>& part) {
        double s = 0.0;
        for (const auto& ex : part) s += judge_a.score(ex.clean_acoustic);
        return s / part.size();
    };
    const double clean_nr = clean_mean(corpus.test_noreverb);
    const double clean_rev = clean_mean(corpus.test_reverb);
    info(fmt("ordering judge-A no-rev: clean %.3f vs enhanced %.3f vs noisy %.3f", clean_nr,
             m.baseline.no_reverb.judge_a, noisy.no_reverb.judge_a) +
         fmt("; reverb: clean %.3f vs enhanced %.3f vs noisy %.3f", clean_rev,
             m.baseline.reverb.judge_a, noisy.reverb.judge_a));

    LMParams n2s = load_checkpoint(out + "/checkpoints/n2s",
                                   lm_config_hash(cfg.n2s.lm_config(vocab)))
                       .params;
    int hits = 0, total = 0;
    std::vector<PromptChain> prompts;
    const int n_eval = std::min<std::size_t>(200, corpus.test_noreverb.size());
    for (int i = 0; i < n_eval; ++i)
        prompts.push_back(make_n2s_chain(vocab, corpus.test_noreverb[i].noisy_semantic, {}));
    auto outputs = generate_batch_greedy(n2s, prompts, cfg.corpus.frames);
    for (int i = 0; i < n_eval; ++i)
        for (int t = 0; t < cfg.corpus.frames; ++t) {
            hits += outputs[i][t] == corpus.test_noreverb[i].clean_semantic[t];
            ++total;
        }
    const double accuracy = double(hits) / total;
    const double chance = 1.0 / cfg.world.n_semantic;
    info(fmt("greedy N2S semantic accuracy %.3f vs chance %.4f (%.1fx, spec expects >= 5x)",
             accuracy, chance, accuracy / chance));

    const double gain_nr = m.dpo.no_reverb.judge_a - m.baseline.no_reverb.judge_a;
    const double gain_rev = m.dpo.reverb.judge_a - m.baseline.reverb.judge_a;
    info(fmt("DPO judge-A gain no-rev %+.4f vs reverb %+.4f: ", gain_nr, gain_rev) +
         (gain_rev > gain_nr ? "reverb partition gained more, matching the reported pattern"
                             : "no-reverb partition gained at least as much (recorded)"));
}

void criterion_ablation(const MainMetrics& m) {
    const double gt_gain_nr = m.z1_gt.no_reverb.judge_a - m.baseline.no_reverb.judge_a;
    const double gt_gain_rev = m.z1_gt.reverb.judge_a - m.baseline.reverb.judge_a;
    const double z1_gain_nr = m.z1.no_reverb.judge_a - m.baseline.no_reverb.judge_a;
    const double z1_gain_rev = m.z1.reverb.judge_a - m.baseline.reverb.judge_a;
    const double z4_gain_nr = m.z4.no_reverb.judge_a - m.baseline.no_reverb.judge_a;
    const double z4_gain_rev = m.z4.reverb.judge_a - m.baseline.reverb.judge_a;

    const bool gt_smaller = gt_gain_nr < z1_gain_nr && gt_gain_rev < z1_gain_rev;
    const bool positive = z1_gain_nr > 0 && z1_gain_rev > 0 && z4_gain_nr > 0 && z4_gain_rev > 0;

    report(7, gt_smaller && positive,
           fmt("judge-A gains no-rev/rev: gt %+.4f/%+.4f, ", gt_gain_nr, gt_gain_rev) +
               fmt("z1 %+.4f/%+.4f, ", z1_gain_nr, z1_gain_rev) +
               fmt("z4 %+.4f/%+.4f (gt strictly below z1, z1 and z4 positive)", z4_gain_nr,
                   z4_gain_rev));
}

// ---- criterion 8: reproducibility ----

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void criterion_reproducibility(const PipelineConfig& cfg, const std::string& config_path,
                               const std::string& out, const std::string& out2) {
    bool rerun_ok = run_pipeline(config_path, out2);

    int mismatches = 0;
    std::string first;
    if (rerun_ok) {
        const std::vector<std::string> metric_files = {
            "/eval/noisy.json", "/eval/baseline.json", "/eval/dpo.json",  "/eval/ce.json",
            "/eval/z1_gt.json", "/eval/z1.json",       "/eval/z4.json",   "/ablation/table.csv",
            "/ablation/table.md", "/checkpoints/s2s/params.bin", "/checkpoints/n2s/params.bin",
            "/dpo/dpo/checkpoint/params.bin"};
        for (const auto& rel : metric_files) {
            if (file_bytes(out + rel) != file_bytes(out2 + rel)) {
                ++mismatches;
                if (first.empty()) first = rel;
            }
        }
    }

    // Mid-pretrain resume: a shortened S2S run split in half must reproduce the
    // uninterrupted loss trace exactly.
    World world = load_world(out + "/world.json");
    Corpus corpus = load_corpus(out + "/corpus");
    const VocabLayout vocab = world.vocab();
    LMConfig model_cfg = cfg.s2s.lm_config(vocab);
    TrainConfig tcfg = cfg.s2s.train;
    tcfg.steps = 160;
    tcfg.schedule.total_steps = 160;
    tcfg.schedule.warmup_steps = 20;

    PretrainResult full = pretrain(ModelKind::s2s, vocab, corpus.train, model_cfg, tcfg);
    TrainConfig half = tcfg;
    half.steps = 80;
    half.schedule = tcfg.schedule;
    PretrainResult part = pretrain(ModelKind::s2s, vocab, corpus.train, model_cfg, half);
    const std::string resume_dir = out2 + "/resume_check";
    save_checkpoint(resume_dir, part.params, &part.opt,
                    CheckpointMeta{"s2s", 80, tcfg.train_seed, lm_config_hash(model_cfg)});
    PretrainResult resumed =
        pretrain(ModelKind::s2s, vocab, corpus.train, model_cfg, tcfg, resume_dir);

    bool resume_ok = resumed.curve.size() == 80;
    for (std::size_t i = 0; resume_ok && i < resumed.curve.size(); ++i)
        resume_ok = resumed.curve[i].step == full.curve[80 + i].step &&
                    resumed.curve[i].loss == full.curve[80 + i].loss;
    auto nf = full.params.named_tensors();
    auto nr = resumed.params.named_tensors();
    for (std::size_t i = 0; resume_ok && i < nf.size(); ++i)
        resume_ok = *nf[i].second->data == *nr[i].second->data;

    report(8, rerun_ok && mismatches == 0 && resume_ok,
           (rerun_ok ? fmt("rerun produced %.0f differing artifact(s)", double(mismatches)) +
                           (first.empty() ? "" : " [first: " + first + "]")
                     : std::string("rerun failed")) +
               (resume_ok ? "; resumed 80+80-step pretrain matches the 160-step trace exactly"
                          : "; resume trace mismatch"));
}

}  // namespace

int main(int argc, char** argv) {
    keep_freed_buffers();
    const std::string config_path = argc > 1 ? argv[1] : "configs/default.json";
    const std::string out = argc > 2 ? argv[2] : "acceptance_out";
    const std::string out2 = out + "_rerun";

    std::printf("acceptance: config %s, artifacts under %s\n", config_path.c_str(), out.c_str());
    PipelineConfig cfg = PipelineConfig::load(config_path);

    criterion_gradients();
    criterion_dpo_identities();
    criterion_normalization();

    fs::remove_all(out);
    fs::remove_all(out2);
    const auto t0 = std::chrono::steady_clock::now();
    const bool pipeline_ok = run_pipeline(config_path, out);
    const double pipeline_seconds = seconds_since(t0);
    std::printf("pipeline: %s in %.0fs\n", pipeline_ok ? "completed" : "FAILED", pipeline_seconds);
    std::fflush(stdout);

    if (!pipeline_ok) {
        report(3, false, "pipeline failed, sampling properties not evaluated");
        report(5, false, "pipeline failed, judges not evaluated");
        report(6, false, "pipeline failed");
        report(7, false, "pipeline failed");
        report(8, false, "pipeline failed");
    } else {
        criterion_sampling_properties(cfg, out);
        criterion_judges(cfg, out);
        MainMetrics metrics = load_metrics(out);
        criterion_main_result(metrics, pipeline_seconds);
        criterion_ablation(metrics);
        auxiliary_readings(cfg, out, metrics);
        criterion_reproducibility(cfg, config_path, out, out2);
    }

    std::printf("acceptance: %d criterion failure(s)\n", g_failures);
    return g_failures == 0 ? 0 : 1;
}
