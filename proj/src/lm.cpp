#include "prefopt/lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace prefopt {

void LMConfig::validate() const {
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 1 || vocab_size < 1)
        throw std::invalid_argument("LMConfig: all dimensions must be positive");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("LMConfig: d_model " + std::to_string(d_model) +
                                    " not divisible by n_heads " + std::to_string(n_heads));
}

LMConfig make_lm_config(int d_model, int n_layers, int n_heads, int d_ff, int max_seq_len,
                        const VocabLayout& vocab) {
    vocab.validate();
    LMConfig cfg;
    cfg.d_model = d_model;
    cfg.n_layers = n_layers;
    cfg.n_heads = n_heads;
    cfg.d_ff = d_ff;
    cfg.max_seq_len = max_seq_len;
    cfg.vocab_size = vocab.total();
    cfg.validate();
    return cfg;
}

// ---- parameters ----

std::vector<std::pair<std::string, Tensor*>> LMParams::named_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("tok_emb", &tok_emb);
    out.emplace_back("pos_emb", &pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string p = "layer" + std::to_string(i) + ".";
        Layer& l = layers[i];
        out.emplace_back(p + "ln1_gain", &l.ln1_gain);
        out.emplace_back(p + "ln1_bias", &l.ln1_bias);
        out.emplace_back(p + "wq", &l.wq);
        out.emplace_back(p + "bq", &l.bq);
        out.emplace_back(p + "wk", &l.wk);
        out.emplace_back(p + "bk", &l.bk);
        out.emplace_back(p + "wv", &l.wv);
        out.emplace_back(p + "bv", &l.bv);
        out.emplace_back(p + "wo", &l.wo);
        out.emplace_back(p + "bo", &l.bo);
        out.emplace_back(p + "ln2_gain", &l.ln2_gain);
        out.emplace_back(p + "ln2_bias", &l.ln2_bias);
        out.emplace_back(p + "w_ff1", &l.w_ff1);
        out.emplace_back(p + "b_ff1", &l.b_ff1);
        out.emplace_back(p + "w_ff2", &l.w_ff2);
        out.emplace_back(p + "b_ff2", &l.b_ff2);
    }
    out.emplace_back("lnf_gain", &lnf_gain);
    out.emplace_back("lnf_bias", &lnf_bias);
    out.emplace_back("w_out", &w_out);
    out.emplace_back("b_out", &b_out);
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> LMParams::named_tensors() const {
    auto mut = const_cast<LMParams*>(this)->named_tensors();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mut.size());
    for (auto& [name, t] : mut) out.emplace_back(name, t);
    return out;
}

LMParams LMParams::clone() const {
    LMParams copy;
    copy.config = config;
    copy.layers.resize(layers.size());
    auto src = named_tensors();
    auto dst = copy.named_tensors();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const Tensor& s = *src[i].second;
        *dst[i].second = Tensor::of(s.shape, *s.data, s.requires_grad);
    }
    return copy;
}

LMParams LMParams::grad_workspace() const {
    LMParams ws;
    ws.config = config;
    ws.layers.resize(layers.size());
    auto src = named_tensors();
    auto dst = ws.named_tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->grad_alias();
    return ws;
}

void LMParams::zero_grad() {
    for (auto& [name, t] : named_tensors()) t->zero_grad();
}

void LMParams::set_requires_grad(bool enabled) {
    for (auto& [name, t] : named_tensors()) {
        t->requires_grad = enabled;
        if (enabled && !t->grad)
            t->grad = std::make_shared<std::vector<double>>(t->data->size(), 0.0);
    }
}

long long LMParams::n_params() const {
    long long n = 0;
    for (const auto& [name, t] : named_tensors()) n += t->numel();
    return n;
}

namespace {

Tensor normal_tensor(std::vector<int> shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (auto& v : *t.data) v = stddev * rng.next_gaussian();
    return t;
}

}  // namespace

LMParams init_params(const LMConfig& config, Rng rng) {
    config.validate();
    constexpr double kInitStd = 0.02;
    const int d = config.d_model, v = config.vocab_size, f = config.d_ff;

    LMParams p;
    p.config = config;
    p.tok_emb = normal_tensor({v, d}, kInitStd, rng);
    p.pos_emb = normal_tensor({config.max_seq_len, d}, kInitStd, rng);
    p.layers.resize(config.n_layers);
    for (auto& l : p.layers) {
        l.ln1_gain = Tensor::full({d}, 1.0, true);
        l.ln1_bias = Tensor::zeros({d}, true);
        l.wq = normal_tensor({d, d}, kInitStd, rng);
        l.bq = Tensor::zeros({d}, true);
        l.wk = normal_tensor({d, d}, kInitStd, rng);
        l.bk = Tensor::zeros({d}, true);
        l.wv = normal_tensor({d, d}, kInitStd, rng);
        l.bv = Tensor::zeros({d}, true);
        l.wo = normal_tensor({d, d}, kInitStd, rng);
        l.bo = Tensor::zeros({d}, true);
        l.ln2_gain = Tensor::full({d}, 1.0, true);
        l.ln2_bias = Tensor::zeros({d}, true);
        l.w_ff1 = normal_tensor({d, f}, kInitStd, rng);
        l.b_ff1 = Tensor::zeros({f}, true);
        l.w_ff2 = normal_tensor({f, d}, kInitStd, rng);
        l.b_ff2 = Tensor::zeros({d}, true);
    }
    p.lnf_gain = Tensor::full({d}, 1.0, true);
    p.lnf_bias = Tensor::zeros({d}, true);
    p.w_out = normal_tensor({d, v}, kInitStd, rng);
    p.b_out = Tensor::zeros({v}, true);
    return p;
}

// ---- forward ----

Tensor lm_forward(const LMParams& params, std::span<const int> tokens_flat, int batch,
                  int seq_len) {
    const LMConfig& cfg = params.config;
    if (batch < 1 || seq_len < 1 ||
        static_cast<int>(tokens_flat.size()) != batch * seq_len)
        throw std::invalid_argument("lm_forward: " + std::to_string(tokens_flat.size()) +
                                    " tokens do not form batch " + std::to_string(batch) +
                                    " x seq_len " + std::to_string(seq_len));
    if (seq_len > cfg.max_seq_len)
        throw std::invalid_argument("lm_forward: sequence length " + std::to_string(seq_len) +
                                    " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));

    std::vector<int> ids(tokens_flat.begin(), tokens_flat.end());
    std::vector<int> positions(ids.size());
    for (int b = 0; b < batch; ++b)
        for (int t = 0; t < seq_len; ++t) positions[static_cast<std::size_t>(b) * seq_len + t] = t;

    Tensor x = add(embedding(params.tok_emb, ids), embedding(params.pos_emb, positions));
    for (const auto& l : params.layers) {
        Tensor h = layer_norm(x, l.ln1_gain, l.ln1_bias);
        Tensor q = add_bias(matmul(h, l.wq), l.bq);
        Tensor k = add_bias(matmul(h, l.wk), l.bk);
        Tensor v = add_bias(matmul(h, l.wv), l.bv);
        Tensor att = multihead_causal_attention(q, k, v, batch, seq_len, cfg.n_heads);
        x = add(x, add_bias(matmul(att, l.wo), l.bo));
        Tensor h2 = layer_norm(x, l.ln2_gain, l.ln2_bias);
        Tensor ff = relu(add_bias(matmul(h2, l.w_ff1), l.b_ff1));
        x = add(x, add_bias(matmul(ff, l.w_ff2), l.b_ff2));
    }
    x = layer_norm(x, params.lnf_gain, params.lnf_bias);
    return add_bias(matmul(x, params.w_out), params.b_out);
}

namespace {

void check_chain(const LMParams& params, const PromptChain& chain) {
    if (chain.length() > params.config.max_seq_len)
        throw std::invalid_argument("chain length " + std::to_string(chain.length()) +
                                    " exceeds max_seq_len " +
                                    std::to_string(params.config.max_seq_len));
    if (chain.target_start < 1 || chain.target_start + chain.target_len != chain.length())
        throw std::invalid_argument("chain target span [" + std::to_string(chain.target_start) +
                                    ", +" + std::to_string(chain.target_len) +
                                    ") must be the suffix of the " +
                                    std::to_string(chain.length()) + "-token chain");
    for (int id : chain.tokens)
        if (id < 0 || id >= params.config.vocab_size)
            throw std::invalid_argument("chain id " + std::to_string(id) +
                                        " outside vocabulary of size " +
                                        std::to_string(params.config.vocab_size));
}

Tensor target_logprobs_from(const Tensor& full_logits, const PromptChain& chain, int row_offset) {
    Tensor rows = slice_rows(full_logits, row_offset + chain.target_start - 1, chain.target_len);
    Tensor logp = row_log_softmax(rows);
    return sum(gather_cols(logp, chain.target_tokens()));
}

}  // namespace

Tensor teacher_forced_logits(const LMParams& params, const PromptChain& chain) {
    check_chain(params, chain);
    Tensor full = lm_forward(params, chain.tokens, 1, chain.length());
    return slice_rows(full, chain.target_start - 1, chain.target_len);
}

Tensor sequence_logprob_tensor(const LMParams& params, const PromptChain& chain) {
    if (chain.target_len < 1)
        throw std::invalid_argument("sequence_logprob: empty target span");
    check_chain(params, chain);
    Tensor full = lm_forward(params, chain.tokens, 1, chain.length());
    return target_logprobs_from(full, chain, 0);
}

double sequence_logprob(const LMParams& params, const PromptChain& chain) {
    NoGradGuard no_grad;
    return sequence_logprob_tensor(params, chain).item();
}

std::vector<Tensor> sequence_logprob_batch(const LMParams& params,
                                           const std::vector<const PromptChain*>& chains) {
    if (chains.empty()) return {};
    const int len = chains[0]->length();
    std::vector<int> flat;
    flat.reserve(static_cast<std::size_t>(len) * chains.size());
    for (const PromptChain* c : chains) {
        if (c->length() != len)
            throw std::invalid_argument("sequence_logprob_batch: chain lengths differ, " +
                                        std::to_string(len) + " vs " + std::to_string(c->length()));
        if (c->target_len < 1)
            throw std::invalid_argument("sequence_logprob_batch: empty target span");
        check_chain(params, *c);
        flat.insert(flat.end(), c->tokens.begin(), c->tokens.end());
    }
    Tensor full = lm_forward(params, flat, static_cast<int>(chains.size()), len);
    std::vector<Tensor> out;
    out.reserve(chains.size());
    for (std::size_t b = 0; b < chains.size(); ++b)
        out.push_back(target_logprobs_from(full, *chains[b], static_cast<int>(b) * len));
    return out;
}

// ---- sampling ----

TopkDistribution topk_filter(std::span<const double> row, int k) {
    const int v = static_cast<int>(row.size());
    if (k < 1 || k > v)
        throw std::invalid_argument("topk_filter: k " + std::to_string(k) +
                                    " outside [1, " + std::to_string(v) + "]");
    std::vector<int> order(v);
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&row](int a, int b) {
        if (row[a] != row[b]) return row[a] > row[b];
        return a < b;
    });
    TopkDistribution out;
    out.ids.assign(order.begin(), order.begin() + k);
    out.probs.resize(k);
    double mx = row[out.ids[0]];
    double s = 0.0;
    for (int i = 0; i < k; ++i) {
        out.probs[i] = std::exp(row[out.ids[i]] - mx);
        s += out.probs[i];
    }
    for (auto& p : out.probs) p /= s;
    return out;
}

namespace {

int sample_from(const TopkDistribution& dist, double u) {
    double c = 0.0;
    for (std::size_t i = 0; i < dist.probs.size(); ++i) {
        c += dist.probs[i];
        if (u < c) return dist.ids[i];
    }
    return dist.ids.back();
}

int argmax_id(std::span<const double> row) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(row.size()); ++i)
        if (row[i] > row[best]) best = i;  // ties keep the lower id
    return best;
}

}  // namespace

std::vector<std::vector<int>> sample_candidates(const LMParams& params, const PromptChain& chain,
                                                int k, int n, Rng rng, bool autoregressive) {
    if (n < 2) throw std::invalid_argument("sample_candidates: need n >= 2, got " + std::to_string(n));
    if (chain.target_len < 1)
        throw std::invalid_argument("sample_candidates: chain has no target span");
    NoGradGuard no_grad;

    if (autoregressive) {
        PromptChain prompt = chain;
        prompt.tokens.resize(chain.target_start);
        prompt.target_len = 0;
        prompt.target_start = static_cast<int>(prompt.tokens.size());
        std::vector<std::vector<int>> out;
        out.reserve(n);
        for (int i = 0; i < n; ++i)
            out.push_back(generate(params, prompt, chain.target_len, DecodeMode::topk, k,
                                   rng.derive(static_cast<std::uint64_t>(i))));
        return out;
    }

    Tensor logits = teacher_forced_logits(params, chain);
    const int t_len = logits.shape[0], v = logits.shape[1];
    std::vector<TopkDistribution> rows(t_len);
    for (int t = 0; t < t_len; ++t)
        rows[t] = topk_filter(std::span<const double>(logits.data->data() +
                                                      static_cast<std::size_t>(t) * v, v), k);

    std::vector<std::vector<int>> out(n);
    for (int i = 0; i < n; ++i) {
        Rng child = rng.derive(static_cast<std::uint64_t>(i));
        out[i].resize(t_len);
        for (int t = 0; t < t_len; ++t) out[i][t] = sample_from(rows[t], child.next_double());
    }
    return out;
}

std::vector<int> generate(const LMParams& params, const PromptChain& prompt, int t_out,
                          DecodeMode mode, int k, Rng rng) {
    if (prompt.target_len != 0)
        throw std::invalid_argument("generate: prompt chain must not carry a target span");
    if (prompt.length() + t_out > params.config.max_seq_len)
        throw std::invalid_argument("generate: prompt " + std::to_string(prompt.length()) +
                                    " + output " + std::to_string(t_out) + " exceeds max_seq_len " +
                                    std::to_string(params.config.max_seq_len));
    NoGradGuard no_grad;
    std::vector<int> tokens = prompt.tokens;
    std::vector<int> out;
    out.reserve(t_out);
    const int v = params.config.vocab_size;
    for (int step = 0; step < t_out; ++step) {
        Tensor logits = lm_forward(params, tokens, 1, static_cast<int>(tokens.size()));
        std::span<const double> last(logits.data->data() +
                                         static_cast<std::size_t>(tokens.size() - 1) * v, v);
        int next;
        if (mode == DecodeMode::greedy) {
            next = argmax_id(last);
        } else {
            next = sample_from(topk_filter(last, k), rng.next_double());
        }
        out.push_back(next);
        tokens.push_back(next);
    }
    return out;
}

std::vector<std::vector<int>> generate_batch_greedy(const LMParams& params,
                                                    const std::vector<PromptChain>& prompts,
                                                    int t_out) {
    if (prompts.empty()) return {};
    const int prompt_len = prompts[0].length();
    for (const auto& p : prompts) {
        if (p.target_len != 0)
            throw std::invalid_argument("generate_batch_greedy: prompts must not carry targets");
        if (p.length() != prompt_len)
            throw std::invalid_argument("generate_batch_greedy: prompt lengths differ");
    }
    if (prompt_len + t_out > params.config.max_seq_len)
        throw std::invalid_argument("generate_batch_greedy: prompt " + std::to_string(prompt_len) +
                                    " + output " + std::to_string(t_out) + " exceeds max_seq_len " +
                                    std::to_string(params.config.max_seq_len));
    NoGradGuard no_grad;
    const int batch = static_cast<int>(prompts.size());
    const int v = params.config.vocab_size;

    std::vector<std::vector<int>> tokens(batch);
    for (int b = 0; b < batch; ++b) tokens[b] = prompts[b].tokens;
    std::vector<std::vector<int>> out(batch);

    std::vector<int> flat;
    for (int step = 0; step < t_out; ++step) {
        const int len = prompt_len + step;
        flat.clear();
        flat.reserve(static_cast<std::size_t>(batch) * len);
        for (int b = 0; b < batch; ++b) flat.insert(flat.end(), tokens[b].begin(), tokens[b].end());
        Tensor logits = lm_forward(params, flat, batch, len);
        for (int b = 0; b < batch; ++b) {
            std::span<const double> last(
                logits.data->data() + (static_cast<std::size_t>(b) * len + len - 1) * v, v);
            const int next = argmax_id(last);
            out[b].push_back(next);
            tokens[b].push_back(next);
        }
    }
    return out;
}

}  // namespace prefopt
