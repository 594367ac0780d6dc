#include "prefopt/training.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "prefopt/parallel.hpp"

namespace prefopt {

using json = nlohmann::json;

Tensor ce_loss(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.shape.size() != 2 || logits.shape[0] != static_cast<int>(targets.size()))
        throw std::invalid_argument("ce_loss: " + std::to_string(targets.size()) +
                                    " targets for logits " + logits.shape_str());
    if (targets.empty()) throw std::invalid_argument("ce_loss: empty target span");
    Tensor logp = row_log_softmax(logits);
    return scale(sum(gather_cols(logp, targets)), -1.0);
}

void ScheduleConfig::validate() const {
    if (!(warmup_steps > 0 && warmup_steps < total_steps))
        throw std::invalid_argument("ScheduleConfig: need 0 < warmup " +
                                    std::to_string(warmup_steps) + " < total " +
                                    std::to_string(total_steps));
}

double lr_at(const ScheduleConfig& schedule, int step) {
    schedule.validate();
    if (step < 0 || step > schedule.total_steps)
        throw std::invalid_argument("lr_at: step " + std::to_string(step) + " outside [0, " +
                                    std::to_string(schedule.total_steps) + "]");
    if (step < schedule.warmup_steps)
        return schedule.peak_lr * static_cast<double>(step) / schedule.warmup_steps;
    const double progress = static_cast<double>(step - schedule.warmup_steps) /
                            (schedule.total_steps - schedule.warmup_steps);
    return schedule.peak_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---- optimizer ----

GradBuffers collect_grads(const LMParams& params) {
    GradBuffers out;
    for (const auto& [name, t] : params.named_tensors()) out.push_back(t->grad_values());
    return out;
}

GradBuffers zero_grads_like(const LMParams& params) {
    GradBuffers out;
    for (const auto& [name, t] : params.named_tensors())
        out.emplace_back(t->data->size(), 0.0);
    return out;
}

void add_grads(GradBuffers& into, const GradBuffers& from) {
    for (std::size_t i = 0; i < into.size(); ++i)
        for (std::size_t j = 0; j < into[i].size(); ++j) into[i][j] += from[i][j];
}

OptState OptState::init(const LMParams& params, const AdamWConfig& hyper) {
    OptState s;
    s.hyper = hyper;
    s.m = zero_grads_like(params);
    s.v = zero_grads_like(params);
    return s;
}

void adamw_step(LMParams& params, const GradBuffers& grads, OptState& state, double lr) {
    auto named = params.named_tensors();
    if (grads.size() != named.size() || state.m.size() != named.size())
        throw std::invalid_argument("adamw_step: gradient/state layout does not match parameters");
    for (std::size_t i = 0; i < named.size(); ++i) {
        if (grads[i].size() != named[i].second->data->size())
            throw std::invalid_argument("adamw_step: gradient size mismatch for " + named[i].first);
        for (double g : grads[i])
            if (!std::isfinite(g))
                throw std::runtime_error("adamw_step: non-finite gradient in " + named[i].first);
    }

    const auto& h = state.hyper;
    const long long t = state.step + 1;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < named.size(); ++i) {
        auto& p = *named[i].second->data;
        auto& m = state.m[i];
        auto& v = state.v[i];
        const auto& g = grads[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            p[j] -= lr * (m_hat / (std::sqrt(v_hat) + h.eps) + h.weight_decay * p[j]);
        }
    }
    state.step = t;
}

// ---- pretraining ----

PromptChain chain_for(ModelKind kind, const VocabLayout& vocab, const CorpusExample& ex) {
    if (kind == ModelKind::s2s)
        return make_s2s_chain(vocab, ex.noisy_semantic, ex.clean_semantic, ex.noisy_acoustic,
                              ex.clean_acoustic);
    return make_n2s_chain(vocab, ex.noisy_semantic, ex.clean_semantic);
}

namespace {

std::uint64_t hash_combine(std::uint64_t h, std::uint64_t x) {
    return fnv1a64(&x, sizeof(x)) ^ (h * 0x100000001b3ull);
}

struct MicroResult {
    GradBuffers grads;
    double loss_sum = 0.0;
};

// Summed-then-scaled CE over one micro-batch; gradient contribution of the
// full-batch mean objective.
MicroResult micro_batch_pass(const LMParams& shared, const std::vector<const PromptChain*>& chains,
                             int full_batch) {
    LMParams ws = shared.grad_workspace();
    const int len = chains[0]->length();
    std::vector<int> flat;
    flat.reserve(static_cast<std::size_t>(len) * chains.size());
    for (const PromptChain* c : chains) {
        if (c->length() != len)
            throw std::invalid_argument("pretrain: chain lengths differ inside a micro-batch");
        flat.insert(flat.end(), c->tokens.begin(), c->tokens.end());
    }
    Tensor logits = lm_forward(ws, flat, static_cast<int>(chains.size()), len);
    std::vector<Tensor> losses;
    losses.reserve(chains.size());
    for (std::size_t b = 0; b < chains.size(); ++b) {
        const PromptChain& c = *chains[b];
        Tensor rows = slice_rows(logits, static_cast<int>(b) * len + c.target_start - 1, c.target_len);
        losses.push_back(ce_loss(rows, c.target_tokens()));
    }
    Tensor total = sum(stack_scalars(losses));
    MicroResult result;
    result.loss_sum = total.item();
    backward(scale(total, 1.0 / full_batch));
    result.grads = collect_grads(ws);
    return result;
}

}  // namespace

std::pair<GradBuffers, double> ce_batch_gradient(const LMParams& params,
                                                 const std::vector<PromptChain>& chains,
                                                 int micro_batch, int threads) {
    if (chains.empty()) throw std::invalid_argument("ce_batch_gradient: empty batch");
    if (micro_batch < 1) throw std::invalid_argument("ce_batch_gradient: micro_batch must be positive");
    const int batch = static_cast<int>(chains.size());
    const int n_micro = (batch + micro_batch - 1) / micro_batch;

    std::vector<MicroResult> micro(n_micro);
    parallel_for(n_micro, threads, [&](int mb) {
        const int lo = mb * micro_batch;
        const int hi = std::min(batch, lo + micro_batch);
        std::vector<const PromptChain*> view;
        view.reserve(hi - lo);
        for (int i = lo; i < hi; ++i) view.push_back(&chains[i]);
        micro[mb] = micro_batch_pass(params, view, batch);
    });

    double loss_sum = micro[0].loss_sum;
    GradBuffers grads = std::move(micro[0].grads);
    for (int mb = 1; mb < n_micro; ++mb) {
        add_grads(grads, micro[mb].grads);
        loss_sum += micro[mb].loss_sum;
    }
    return {std::move(grads), loss_sum / batch};
}

PretrainResult pretrain(ModelKind kind, const VocabLayout& vocab,
                        const std::vector<CorpusExample>& train, const LMConfig& model_cfg,
                        const TrainConfig& cfg, const std::string& resume_from,
                        const std::string& abort_dir) {
    model_cfg.validate();
    if (model_cfg.vocab_size != vocab.total())
        throw std::invalid_argument("pretrain: model vocab " + std::to_string(model_cfg.vocab_size) +
                                    " != layout vocab " + std::to_string(vocab.total()));
    if (train.empty()) throw std::invalid_argument("pretrain: empty train split");
    if (cfg.batch_size < 1 || cfg.micro_batch < 1)
        throw std::invalid_argument("pretrain: batch_size and micro_batch must be positive");

    ScheduleConfig schedule = cfg.schedule;
    if (schedule.total_steps == 0) schedule.total_steps = cfg.steps;
    schedule.validate();

    const std::uint64_t cfg_hash = lm_config_hash(model_cfg);
    const std::string kind_name = kind == ModelKind::s2s ? "s2s" : "n2s";

    PretrainResult result;
    int start_step = 0;
    if (resume_from.empty()) {
        result.params = init_params(model_cfg, Rng(cfg.init_seed));
        result.opt = OptState::init(result.params, cfg.adamw);
    } else {
        Checkpoint ckpt = load_checkpoint(resume_from, cfg_hash);
        if (!ckpt.opt)
            throw std::runtime_error("pretrain: checkpoint " + resume_from +
                                     " carries no optimizer state, cannot resume");
        result.params = std::move(ckpt.params);
        result.opt = std::move(*ckpt.opt);
        start_step = static_cast<int>(ckpt.meta.step);
    }

    Rng batch_root = Rng(cfg.train_seed).derive("batch");

    for (int step = start_step; step < cfg.steps; ++step) {
        Rng batch_rng = batch_root.derive(static_cast<std::uint64_t>(step));
        std::vector<PromptChain> chains;
        chains.reserve(cfg.batch_size);
        for (int i = 0; i < cfg.batch_size; ++i)
            chains.push_back(chain_for(kind, vocab, train[batch_rng.next_below(train.size())]));

        auto [grads, batch_loss] = ce_batch_gradient(result.params, chains, cfg.micro_batch, cfg.threads);

        if (!std::isfinite(batch_loss)) {
            if (!abort_dir.empty())
                save_checkpoint(abort_dir, result.params, &result.opt,
                                CheckpointMeta{kind_name, step, cfg.train_seed, cfg_hash, vocab});
            throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(step) +
                                     (abort_dir.empty() ? "" : ", last good state in " + abort_dir));
        }

        const double lr = lr_at(schedule, step);
        adamw_step(result.params, grads, result.opt, lr);
        result.curve.push_back({step, batch_loss, lr});
    }
    return result;
}

void write_loss_curve(const std::vector<LossPoint>& curve, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "step,loss,lr\n";
    char buf[96];
    for (const auto& p : curve) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", p.step, p.loss, p.lr);
        out << buf;
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

// ---- checkpointing ----

std::uint64_t lm_config_hash(const LMConfig& cfg) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (long long x : {static_cast<long long>(cfg.d_model), static_cast<long long>(cfg.n_layers),
                        static_cast<long long>(cfg.n_heads), static_cast<long long>(cfg.d_ff),
                        static_cast<long long>(cfg.max_seq_len),
                        static_cast<long long>(cfg.vocab_size)})
        h = hash_combine(h, static_cast<std::uint64_t>(x));
    return h;
}

namespace {

void append_le_doubles(std::string& blob, const std::vector<double>& xs) {
    for (double x : xs) {
        const auto bits = std::bit_cast<std::uint64_t>(x);
        for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
}

void read_le_doubles(const std::string& blob, std::size_t offset, std::vector<double>& out,
                     const std::string& name) {
    const std::size_t need = offset + out.size() * 8;
    if (need > blob.size())
        throw std::runtime_error("checkpoint blob truncated: tensor '" + name + "' needs bytes [" +
                                 std::to_string(offset) + ", " + std::to_string(need) +
                                 ") but the blob ends at " + std::to_string(blob.size()));
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 7; b >= 0; --b)
            bits = (bits << 8) |
                   static_cast<unsigned char>(blob[offset + i * 8 + static_cast<std::size_t>(b)]);
        out[i] = std::bit_cast<double>(bits);
    }
}

}  // namespace

void save_checkpoint(const std::string& dir, const LMParams& params, const OptState* opt,
                     const CheckpointMeta& meta) {
    std::filesystem::create_directories(dir);
    auto named = params.named_tensors();

    std::string blob;
    json tensors = json::array();
    for (const auto& [name, t] : named) {
        tensors.push_back(
            json{{"name", name}, {"shape", t->shape}, {"offset", blob.size()}});
        append_le_doubles(blob, *t->data);
    }
    json opt_tensors = json::array();
    if (opt) {
        for (std::size_t i = 0; i < named.size(); ++i) {
            opt_tensors.push_back(json{{"name", "m." + named[i].first}, {"offset", blob.size()}});
            append_le_doubles(blob, opt->m[i]);
        }
        for (std::size_t i = 0; i < named.size(); ++i) {
            opt_tensors.push_back(json{{"name", "v." + named[i].first}, {"offset", blob.size()}});
            append_le_doubles(blob, opt->v[i]);
        }
    }

    json manifest;
    manifest["format"] = "prefopt-checkpoint-v1";
    manifest["kind"] = meta.kind;
    manifest["step"] = meta.step;
    manifest["train_seed"] = meta.train_seed;
    manifest["config_hash"] = meta.config_hash;
    manifest["vocab"] = json{{"n_semantic", meta.vocab.n_semantic},
                             {"n_acoustic", meta.vocab.n_acoustic}};
    const LMConfig& c = params.config;
    manifest["model"] = json{{"d_model", c.d_model},   {"n_layers", c.n_layers},
                             {"n_heads", c.n_heads},   {"d_ff", c.d_ff},
                             {"max_seq_len", c.max_seq_len}, {"vocab_size", c.vocab_size}};
    manifest["tensors"] = tensors;
    manifest["blob_bytes"] = blob.size();
    if (opt) {
        manifest["opt"] = json{{"step", opt->step},
                               {"beta1", opt->hyper.beta1},
                               {"beta2", opt->hyper.beta2},
                               {"eps", opt->hyper.eps},
                               {"weight_decay", opt->hyper.weight_decay},
                               {"tensors", opt_tensors}};
    }

    {
        std::ofstream out(dir + "/manifest.json", std::ios::binary);
        if (!out) throw std::runtime_error("cannot open for writing: " + dir + "/manifest.json");
        out << manifest.dump(2) << '\n';
        if (!out) throw std::runtime_error("write failed: " + dir + "/manifest.json");
    }
    {
        std::ofstream out(dir + "/params.bin", std::ios::binary);
        if (!out) throw std::runtime_error("cannot open for writing: " + dir + "/params.bin");
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!out) throw std::runtime_error("write failed: " + dir + "/params.bin");
    }
}

Checkpoint load_checkpoint(const std::string& dir, std::uint64_t expected_config_hash) {
    std::ifstream min(dir + "/manifest.json", std::ios::binary);
    if (!min) throw std::runtime_error("cannot open for reading: " + dir + "/manifest.json");
    json manifest;
    try {
        min >> manifest;
    } catch (const json::exception& e) {
        throw std::runtime_error(dir + "/manifest.json: " + e.what());
    }
    if (manifest.value("format", "") != "prefopt-checkpoint-v1")
        throw std::runtime_error(dir + ": unknown checkpoint format");

    Checkpoint ckpt;
    ckpt.meta.kind = manifest.at("kind").get<std::string>();
    ckpt.meta.step = manifest.at("step").get<long long>();
    ckpt.meta.train_seed = manifest.at("train_seed").get<std::uint64_t>();
    ckpt.meta.config_hash = manifest.at("config_hash").get<std::uint64_t>();
    if (manifest.contains("vocab")) {
        ckpt.meta.vocab.n_semantic = manifest.at("vocab").at("n_semantic").get<int>();
        ckpt.meta.vocab.n_acoustic = manifest.at("vocab").at("n_acoustic").get<int>();
    }
    if (expected_config_hash != 0 && ckpt.meta.config_hash != expected_config_hash)
        throw std::runtime_error(dir + ": config hash mismatch, checkpoint has " +
                                 std::to_string(ckpt.meta.config_hash) + ", expected " +
                                 std::to_string(expected_config_hash));

    const json& mc = manifest.at("model");
    LMConfig cfg;
    cfg.d_model = mc.at("d_model").get<int>();
    cfg.n_layers = mc.at("n_layers").get<int>();
    cfg.n_heads = mc.at("n_heads").get<int>();
    cfg.d_ff = mc.at("d_ff").get<int>();
    cfg.max_seq_len = mc.at("max_seq_len").get<int>();
    cfg.vocab_size = mc.at("vocab_size").get<int>();

    std::ifstream bin(dir + "/params.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open for reading: " + dir + "/params.bin");
    std::ostringstream os;
    os << bin.rdbuf();
    const std::string blob = os.str();

    ckpt.params = init_params(cfg, Rng(0));
    auto named = ckpt.params.named_tensors();
    const json& tensors = manifest.at("tensors");
    if (tensors.size() != named.size())
        throw std::runtime_error(dir + ": manifest lists " + std::to_string(tensors.size()) +
                                 " tensors, model has " + std::to_string(named.size()));
    for (std::size_t i = 0; i < named.size(); ++i) {
        const json& entry = tensors[i];
        if (entry.at("name").get<std::string>() != named[i].first)
            throw std::runtime_error(dir + ": tensor order mismatch at '" + named[i].first + "'");
        const auto shape = entry.at("shape").get<std::vector<int>>();
        if (shape != named[i].second->shape)
            throw std::runtime_error(dir + ": shape mismatch for '" + named[i].first + "'");
        read_le_doubles(blob, entry.at("offset").get<std::size_t>(), *named[i].second->data,
                        named[i].first);
    }

    if (manifest.contains("opt")) {
        const json& jo = manifest.at("opt");
        OptState opt;
        opt.hyper.beta1 = jo.at("beta1").get<double>();
        opt.hyper.beta2 = jo.at("beta2").get<double>();
        opt.hyper.eps = jo.at("eps").get<double>();
        opt.hyper.weight_decay = jo.at("weight_decay").get<double>();
        opt.step = jo.at("step").get<long long>();
        opt.m = zero_grads_like(ckpt.params);
        opt.v = zero_grads_like(ckpt.params);
        const json& ots = jo.at("tensors");
        for (std::size_t i = 0; i < named.size(); ++i)
            read_le_doubles(blob, ots[i].at("offset").get<std::size_t>(), opt.m[i],
                            ots[i].at("name").get<std::string>());
        for (std::size_t i = 0; i < named.size(); ++i)
            read_le_doubles(blob, ots[named.size() + i].at("offset").get<std::size_t>(), opt.v[i],
                            ots[named.size() + i].at("name").get<std::string>());
        ckpt.opt = std::move(opt);
    }
    return ckpt;
}

std::uint64_t params_content_hash(const LMParams& params) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : params.named_tensors()) {
        h = hash_combine(h, fnv1a64(name));
        h = hash_combine(h, fnv1a64(t->data->data(), t->data->size() * sizeof(double)));
    }
    return h;
}

}  // namespace prefopt
