#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "prefopt/lm.hpp"

using namespace prefopt;

namespace {

VocabLayout tiny_vocab() {
    VocabLayout v;
    v.n_semantic = 4;
    v.n_acoustic = 6;
    return v;
}

LMConfig tiny_config() {
    LMConfig cfg = make_lm_config(16, 1, 2, 32, 64, tiny_vocab());
    return cfg;
}

PromptChain raw_chain(std::vector<int> tokens, int target_len) {
    PromptChain c;
    c.tokens = std::move(tokens);
    c.target_len = target_len;
    c.target_start = static_cast<int>(c.tokens.size()) - target_len;
    return c;
}

void make_uniform(LMParams& p) {
    std::fill(p.w_out.data->begin(), p.w_out.data->end(), 0.0);
    std::fill(p.b_out.data->begin(), p.b_out.data->end(), 0.0);
}

}  // namespace

TEST_CASE("init_params is deterministic per seed") {
    LMConfig cfg = tiny_config();
    LMParams a = init_params(cfg, Rng(5)), b = init_params(cfg, Rng(5)), c = init_params(cfg, Rng(6));
    double max_diff_same = 0.0, max_diff_other = 0.0;
    auto na = a.named_tensors(), nb = b.named_tensors(), nc = c.named_tensors();
    for (std::size_t i = 0; i < na.size(); ++i) {
        for (std::size_t j = 0; j < na[i].second->data->size(); ++j) {
            max_diff_same = std::max(max_diff_same, std::abs((*na[i].second->data)[j] -
                                                             (*nb[i].second->data)[j]));
            max_diff_other = std::max(max_diff_other, std::abs((*na[i].second->data)[j] -
                                                               (*nc[i].second->data)[j]));
        }
    }
    CHECK(max_diff_same == 0.0);
    CHECK(max_diff_other > 0.0);
}

TEST_CASE("embedding row norms track the init scale") {
    VocabLayout v;
    v.n_semantic = 40;
    v.n_acoustic = 60;
    LMConfig cfg = make_lm_config(64, 1, 4, 64, 64, v);
    LMParams p = init_params(cfg, Rng(3));
    double mean_norm = 0.0;
    for (int r = 0; r < cfg.vocab_size; ++r) {
        double s = 0.0;
        for (int c = 0; c < cfg.d_model; ++c) s += p.tok_emb.at(r, c) * p.tok_emb.at(r, c);
        mean_norm += std::sqrt(s);
    }
    mean_norm /= cfg.vocab_size;
    const double expected = 0.02 * std::sqrt(static_cast<double>(cfg.d_model));
    CHECK(mean_norm > 0.5 * expected);
    CHECK(mean_norm < 1.5 * expected);
}

TEST_CASE("teacher forced logits are causal and sized by the target span") {
    LMConfig cfg = tiny_config();
    LMParams p = init_params(cfg, Rng(1));
    VocabLayout v = tiny_vocab();
    std::vector<int> sbar{0, 1, 2}, s{1, 1, 3}, abar{4, 5, 6}, a{5, 6, 7};
    PromptChain chain = make_s2s_chain(v, sbar, s, abar, a);

    Tensor logits = teacher_forced_logits(p, chain);
    CHECK(logits.shape[0] == 3);
    CHECK(logits.shape[1] == cfg.vocab_size);

    // Permuting target tokens after position t must not change row t at all.
    std::vector<int> a_perm{5, 7, 6};
    PromptChain chain2 = make_s2s_chain(v, sbar, s, abar, a_perm);
    Tensor logits2 = teacher_forced_logits(p, chain2);
    for (int c = 0; c < cfg.vocab_size; ++c) {
        CHECK(logits.at(0, c) == logits2.at(0, c));
        CHECK(logits.at(1, c) == logits2.at(1, c));
    }

    PromptChain empty_target = make_s2s_chain(v, sbar, s, abar, {});
    Tensor none = teacher_forced_logits(p, empty_target);
    CHECK(none.shape[0] == 0);

    PromptChain too_long = chain;
    too_long.tokens.assign(cfg.max_seq_len + 3, v.bos());
    too_long.target_start = static_cast<int>(too_long.tokens.size()) - 1;
    too_long.target_len = 1;
    CHECK_THROWS_WITH_AS(teacher_forced_logits(p, too_long), doctest::Contains("max_seq_len"),
                         std::invalid_argument);
}

TEST_CASE("freshly initialised model emits near uniform rows") {
    LMConfig cfg = tiny_config();
    LMParams p = init_params(cfg, Rng(17));
    VocabLayout v = tiny_vocab();
    PromptChain chain = make_s2s_chain(v, std::vector<int>{0, 1}, std::vector<int>{2, 3},
                                       std::vector<int>{4, 5}, std::vector<int>{6, 7});
    Tensor logits = teacher_forced_logits(p, chain);
    Tensor probs = row_softmax(logits);
    const double ln_v = std::log(static_cast<double>(cfg.vocab_size));
    for (int r = 0; r < logits.shape[0]; ++r) {
        double entropy = 0.0;
        for (int c = 0; c < cfg.vocab_size; ++c) {
            const double pr = probs.at(r, c);
            entropy -= pr * std::log(pr);
        }
        CHECK(entropy > 0.9 * ln_v);
        CHECK(entropy <= 1.0001 * ln_v);
    }
}

TEST_CASE("uniform model scores every sequence at -T ln V") {
    LMConfig cfg = tiny_config();
    LMParams p = init_params(cfg, Rng(2));
    make_uniform(p);
    PromptChain chain = raw_chain({0, 3, 1, 2, 0}, 4);
    const double lp = sequence_logprob(p, chain);
    CHECK(std::abs(lp - (-4.0 * std::log(static_cast<double>(cfg.vocab_size)))) < 1e-9);
    CHECK(lp <= 0.0);

    PromptChain no_target = raw_chain({0, 3}, 0);
    CHECK_THROWS_AS(sequence_logprob(p, no_target), std::invalid_argument);
}

TEST_CASE("sequence probabilities over all targets sum to one") {
    // Exhaustive oracle on a 3-token vocabulary: all 9 two-token targets.
    LMConfig cfg;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.max_seq_len = 8;
    cfg.vocab_size = 3;
    LMParams p = init_params(cfg, Rng(23));

    double total = 0.0;
    for (int t1 = 0; t1 < 3; ++t1)
        for (int t2 = 0; t2 < 3; ++t2)
            total += std::exp(sequence_logprob(p, raw_chain({0, t1, t2}, 2)));
    CHECK(std::abs(total - 1.0) < 1e-9);
}

TEST_CASE("greedy target tokens maximise their own rows") {
    LMConfig cfg = tiny_config();
    LMParams p = init_params(cfg, Rng(31));
    VocabLayout v = tiny_vocab();
    PromptChain prompt = make_s2s_chain(v, std::vector<int>{0, 1}, std::vector<int>{1, 2},
                                        std::vector<int>{5, 6}, {});
    std::vector<int> best = generate(p, prompt, 4, DecodeMode::greedy);
    PromptChain scored = make_s2s_chain(v, std::vector<int>{0, 1}, std::vector<int>{1, 2},
                                        std::vector<int>{5, 6}, best);
    Tensor logits = teacher_forced_logits(p, scored);
    Tensor logp = row_log_softmax(logits);
    for (int t = 0; t < 4; ++t)
        for (int y = 0; y < cfg.vocab_size; ++y) CHECK(logp.at(t, best[t]) >= logp.at(t, y));
}

TEST_CASE("topk_filter keeps the k best ids and renormalises") {
    std::vector<double> row{2.0, 1.0, 0.0};

    SUBCASE("k equal to vocab matches full softmax") {
        TopkDistribution d = topk_filter(row, 3);
        Tensor full = row_softmax(Tensor::of({1, 3}, {2.0, 1.0, 0.0}));
        double s = 0.0;
        for (int i = 0; i < 3; ++i) {
            CHECK(std::abs(d.probs[i] - full.at(0, d.ids[i])) < 1e-12);
            s += d.probs[i];
        }
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
    SUBCASE("k one concentrates on the argmax") {
        TopkDistribution d = topk_filter(row, 1);
        CHECK(d.ids == std::vector<int>{0});
        CHECK(d.probs[0] == doctest::Approx(1.0));
    }
    SUBCASE("two-logit closed form") {
        TopkDistribution d = topk_filter(row, 2);
        CHECK(d.ids == std::vector<int>{0, 1});
        const double e2 = std::exp(2.0), e1 = std::exp(1.0);
        CHECK(d.probs[0] == doctest::Approx(e2 / (e2 + e1)).epsilon(1e-12));
        CHECK(d.probs[1] == doctest::Approx(e1 / (e2 + e1)).epsilon(1e-12));
    }
    SUBCASE("ties break toward the lower id") {
        TopkDistribution d = topk_filter(std::vector<double>{1.0, 1.0, 1.0}, 2);
        CHECK(d.ids == std::vector<int>{0, 1});
    }
    SUBCASE("out of range k is rejected") {
        CHECK_THROWS_AS(topk_filter(row, 0), std::invalid_argument);
        CHECK_THROWS_AS(topk_filter(row, 4), std::invalid_argument);
    }
}

TEST_CASE("sampled candidates stay inside each row's top-k support") {
    LMConfig cfg = tiny_config();
    LMParams p = init_params(cfg, Rng(8));
    PromptChain chain = raw_chain({0, 1, 2, 3, 4, 5}, 4);

    const int k = 3;
    auto cands = sample_candidates(p, chain, k, 16, Rng(100));
    CHECK(cands.size() == 16);

    Tensor logits = [&] {
        NoGradGuard g;
        return teacher_forced_logits(p, chain);
    }();
    for (int t = 0; t < 4; ++t) {
        TopkDistribution d = topk_filter(
            std::span<const double>(logits.data->data() + static_cast<std::size_t>(t) * cfg.vocab_size,
                                    cfg.vocab_size),
            k);
        for (const auto& cand : cands) {
            CHECK(cand.size() == 4);
            CHECK(std::find(d.ids.begin(), d.ids.end(), cand[t]) != d.ids.end());
        }
    }

    SUBCASE("k=1 collapses every candidate onto the argmax sequence") {
        auto greedy_cands = sample_candidates(p, chain, 1, 5, Rng(3));
        for (const auto& c : greedy_cands) CHECK(c == greedy_cands[0]);
        for (int t = 0; t < 4; ++t) {
            TopkDistribution d = topk_filter(
                std::span<const double>(logits.data->data() +
                                            static_cast<std::size_t>(t) * cfg.vocab_size,
                                        cfg.vocab_size),
                1);
            CHECK(greedy_cands[0][t] == d.ids[0]);
        }
    }
    SUBCASE("n below two is rejected") {
        CHECK_THROWS_AS(sample_candidates(p, chain, 2, 1, Rng(0)), std::invalid_argument);
    }
}

TEST_CASE("per position sampling frequencies match the softmax within 3 sigma") {
    LMConfig cfg;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.max_seq_len = 8;
    cfg.vocab_size = 4;
    LMParams p = init_params(cfg, Rng(44));
    PromptChain chain = raw_chain({0, 1, 2, 3}, 3);

    const int n = 10000;
    auto cands = sample_candidates(p, chain, 4, n, Rng(7));

    Tensor logits = [&] {
        NoGradGuard g;
        return teacher_forced_logits(p, chain);
    }();
    Tensor probs = row_softmax(logits);
    for (int t = 0; t < 3; ++t) {
        std::vector<int> counts(4, 0);
        for (const auto& c : cands) counts[c[t]]++;
        for (int id = 0; id < 4; ++id) {
            const double pr = probs.at(t, id);
            const double sigma = std::sqrt(pr * (1.0 - pr) / n);
            CHECK(std::abs(counts[id] / double(n) - pr) <= 3.0 * sigma);
        }
    }
}

TEST_CASE("generation is deterministic and topk with k=1 equals greedy") {
    LMConfig cfg = tiny_config();
    LMParams p = init_params(cfg, Rng(12));
    VocabLayout v = tiny_vocab();
    PromptChain prompt = make_n2s_chain(v, std::vector<int>{0, 2, 3}, {});

    auto g1 = generate(p, prompt, 5, DecodeMode::greedy);
    auto g2 = generate(p, prompt, 5, DecodeMode::greedy);
    CHECK(g1 == g2);

    auto t1 = generate(p, prompt, 5, DecodeMode::topk, 1, Rng(997));
    CHECK(t1 == g1);

    auto batch = generate_batch_greedy(p, {prompt, prompt}, 5);
    CHECK(batch[0] == g1);
    CHECK(batch[1] == g1);

    CHECK_THROWS_AS(generate(p, prompt, cfg.max_seq_len, DecodeMode::greedy), std::invalid_argument);
}

TEST_CASE("batched logprobs equal single-chain logprobs") {
    LMConfig cfg = tiny_config();
    LMParams p = init_params(cfg, Rng(90));
    PromptChain c1 = raw_chain({0, 1, 2, 3, 4}, 3);
    PromptChain c2 = raw_chain({0, 5, 6, 7, 8}, 3);
    NoGradGuard no_grad;
    auto batch = sequence_logprob_batch(p, {&c1, &c2});
    CHECK(batch[0].item() == doctest::Approx(sequence_logprob(p, c1)).epsilon(1e-12));
    CHECK(batch[1].item() == doctest::Approx(sequence_logprob(p, c2)).epsilon(1e-12));
}

TEST_CASE("chain layout from the builders") {
    VocabLayout v = tiny_vocab();
    std::vector<int> sbar{0, 1}, s{2, 3}, abar{4, 5, 6, 7}, a{8, 9, 4, 5};
    PromptChain chain = make_s2s_chain(v, sbar, s, abar, a);
    CHECK(chain.length() == 5 + 2 + 2 + 4 + 4);
    CHECK(chain.tokens[0] == v.bos());
    CHECK(chain.tokens[1] == v.sep_noisy_sem());
    CHECK(chain.tokens[4] == v.sep_clean_sem());
    CHECK(chain.tokens[7] == v.sep_noisy_ac());
    CHECK(chain.tokens[12] == v.sep_target());
    CHECK(chain.target_start == 13);
    CHECK(chain.target_tokens() == a);

    PromptChain n2s = make_n2s_chain(v, sbar, s);
    CHECK(n2s.tokens[0] == v.bos());
    CHECK(n2s.tokens[4] == v.sep_target());
    CHECK(n2s.target_tokens() == s);

    CHECK_THROWS_AS(make_n2s_chain(v, std::vector<int>{99}, s), std::invalid_argument);
}
