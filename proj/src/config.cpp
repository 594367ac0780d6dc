#include "prefopt/config.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace prefopt {

using json = nlohmann::json;

namespace {

const json& need(const json& j, const std::string& section, const char* key) {
    if (!j.contains(key))
        throw std::runtime_error("config: missing field '" + section + "." + key + "'");
    return j.at(key);
}

int need_int(const json& j, const std::string& section, const char* key) {
    const json& v = need(j, section, key);
    if (!v.is_number_integer())
        throw std::runtime_error("config: '" + section + "." + key + "' must be an integer");
    return v.get<int>();
}

std::uint64_t need_u64(const json& j, const std::string& section, const char* key) {
    const json& v = need(j, section, key);
    if (!v.is_number_unsigned() && !v.is_number_integer())
        throw std::runtime_error("config: '" + section + "." + key + "' must be an integer");
    return v.get<std::uint64_t>();
}

double need_double(const json& j, const std::string& section, const char* key) {
    const json& v = need(j, section, key);
    if (!v.is_number())
        throw std::runtime_error("config: '" + section + "." + key + "' must be a number");
    return v.get<double>();
}

bool need_bool(const json& j, const std::string& section, const char* key) {
    const json& v = need(j, section, key);
    if (!v.is_boolean())
        throw std::runtime_error("config: '" + section + "." + key + "' must be a boolean");
    return v.get<bool>();
}

std::string need_string(const json& j, const std::string& section, const char* key) {
    const json& v = need(j, section, key);
    if (!v.is_string())
        throw std::runtime_error("config: '" + section + "." + key + "' must be a string");
    return v.get<std::string>();
}

const json& need_section(const json& j, const char* key) {
    if (!j.contains(key)) throw std::runtime_error("config: missing section '" + std::string(key) + "'");
    if (!j.at(key).is_object())
        throw std::runtime_error("config: section '" + std::string(key) + "' must be an object");
    return j.at(key);
}

JudgeSettings parse_judge(const json& j, const std::string& section) {
    JudgeSettings s;
    s.order = need_int(j, section, "order");
    s.alpha = need_double(j, section, "alpha");
    s.calibration_seed = need_u64(j, section, "calibration_seed");
    return s;
}

AdamWConfig parse_adamw(const json& j, const std::string& section) {
    AdamWConfig a;
    a.beta1 = need_double(j, section, "beta1");
    a.beta2 = need_double(j, section, "beta2");
    a.eps = need_double(j, section, "eps");
    a.weight_decay = need_double(j, section, "weight_decay");
    return a;
}

ModelTrainSettings parse_model(const json& j, const std::string& section) {
    ModelTrainSettings m;
    m.d_model = need_int(j, section, "d_model");
    m.n_layers = need_int(j, section, "n_layers");
    m.n_heads = need_int(j, section, "n_heads");
    m.d_ff = need_int(j, section, "d_ff");
    m.max_seq_len = need_int(j, section, "max_seq_len");
    m.train.steps = need_int(j, section, "steps");
    m.train.batch_size = need_int(j, section, "batch_size");
    m.train.micro_batch = need_int(j, section, "micro_batch");
    m.train.schedule.warmup_steps = need_int(j, section, "warmup_steps");
    m.train.schedule.total_steps = m.train.steps;
    m.train.schedule.peak_lr = need_double(j, section, "peak_lr");
    m.train.adamw = parse_adamw(j, section);
    m.train.init_seed = need_u64(j, section, "init_seed");
    m.train.train_seed = need_u64(j, section, "train_seed");
    return m;
}

}  // namespace

LMConfig ModelTrainSettings::lm_config(const VocabLayout& vocab) const {
    return make_lm_config(d_model, n_layers, n_heads, d_ff, max_seq_len, vocab);
}

DpoLossMode parse_loss_mode(const std::string& text) {
    if (text == "ce") return DpoLossMode::ce;
    if (text == "dpo") return DpoLossMode::dpo;
    if (text == "ce+dpo") return DpoLossMode::ce_dpo;
    throw std::runtime_error("config: unknown loss mode '" + text + "', expected ce | dpo | ce+dpo");
}

std::string loss_mode_name(DpoLossMode mode) {
    switch (mode) {
        case DpoLossMode::ce: return "ce";
        case DpoLossMode::dpo: return "dpo";
        case DpoLossMode::ce_dpo: return "ce+dpo";
    }
    return "?";
}

PipelineConfig PipelineConfig::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    std::ostringstream os;
    os << in.rdbuf();
    const std::string text = os.str();

    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }

    PipelineConfig cfg;
    cfg.config_hash = fnv1a64(text.data(), text.size());
    cfg.threads = need_int(j, "", "threads");

    {
        const json& w = need_section(j, "world");
        cfg.world.n_semantic = need_int(w, "world", "n_semantic");
        cfg.world.n_acoustic = need_int(w, "world", "n_acoustic");
        cfg.world.n_noise_ids = need_int(w, "world", "n_noise_ids");
        cfg.world.expansion_len = need_int(w, "world", "expansion_len");
        cfg.world.jitter = need_double(w, "world", "jitter");
        cfg.world.seed = need_u64(w, "world", "seed");
    }
    {
        const json& c = need_section(j, "corpus");
        cfg.corpus.n_train = need_int(c, "corpus", "n_train");
        cfg.corpus.n_test_per_partition = need_int(c, "corpus", "n_test_per_partition");
        cfg.corpus.frames = need_int(c, "corpus", "frames");
        cfg.corpus.p_noise_min = need_double(c, "corpus", "p_noise_min");
        cfg.corpus.p_noise_max = need_double(c, "corpus", "p_noise_max");
        cfg.corpus.p_rev_zero_prob = need_double(c, "corpus", "p_rev_zero_prob");
        cfg.corpus.p_rev_min = need_double(c, "corpus", "p_rev_min");
        cfg.corpus.p_rev_max = need_double(c, "corpus", "p_rev_max");
        cfg.corpus.test_p_noise_min = need_double(c, "corpus", "test_p_noise_min");
        cfg.corpus.test_p_noise_max = need_double(c, "corpus", "test_p_noise_max");
        cfg.corpus.test_p_rev_min = need_double(c, "corpus", "test_p_rev_min");
        cfg.corpus.test_p_rev_max = need_double(c, "corpus", "test_p_rev_max");
        cfg.corpus.seed = need_u64(c, "corpus", "seed");
    }
    {
        const json& g = need_section(j, "judges");
        cfg.judges.judge_a = parse_judge(need_section(g, "judge_a"), "judges.judge_a");
        cfg.judges.judge_b = parse_judge(need_section(g, "judge_b"), "judges.judge_b");
        cfg.judges.n_calibration = need_int(g, "judges", "n_calibration");
        cfg.judges.corrupt_p_noise = need_double(g, "judges", "corrupt_p_noise");
    }
    cfg.n2s = parse_model(need_section(j, "n2s"), "n2s");
    cfg.s2s = parse_model(need_section(j, "s2s"), "s2s");
    {
        const json& d = need_section(j, "dpo");
        cfg.dpo.beta = need_double(d, "dpo", "beta");
        cfg.dpo.top_k = need_int(d, "dpo", "top_k");
        cfg.dpo.n_candidates = need_int(d, "dpo", "n_candidates");
        cfg.dpo.z_pairs = need_int(d, "dpo", "z_pairs");
        const std::string pairing = need_string(d, "dpo", "pairing");
        if (pairing == "rank-matched")
            cfg.dpo.pairing = PairingRule::rank_matched;
        else if (pairing == "all-pairs")
            cfg.dpo.pairing = PairingRule::all_pairs;
        else
            throw std::runtime_error(
                "config: 'dpo.pairing' must be 'rank-matched' or 'all-pairs', got '" + pairing + "'");
        cfg.dpo.loss_mode = parse_loss_mode(need_string(d, "dpo", "loss_mode"));
        cfg.dpo.steps = need_int(d, "dpo", "steps");
        cfg.dpo.lr = need_double(d, "dpo", "lr");
        cfg.dpo.batch_size = need_int(d, "dpo", "batch_size");
        cfg.dpo.micro_batch = need_int(d, "dpo", "micro_batch");
        cfg.dpo.adamw = parse_adamw(d, "dpo");
        cfg.dpo.seed = need_u64(d, "dpo", "seed");
        cfg.dpo.resample_each_step = need_bool(d, "dpo", "resample_each_step");
        cfg.dpo.gt_as_preferred = need_bool(d, "dpo", "gt_as_preferred");
        cfg.dpo.autoregressive_sampling = need_bool(d, "dpo", "autoregressive_sampling");
    }
    {
        const json& e = need_section(j, "eval");
        const std::string decode = need_string(e, "eval", "decode");
        if (decode == "greedy")
            cfg.eval.decode = DecodeMode::greedy;
        else if (decode == "topk")
            cfg.eval.decode = DecodeMode::topk;
        else
            throw std::runtime_error("config: 'eval.decode' must be 'greedy' or 'topk', got '" +
                                     decode + "'");
        cfg.eval.top_k = need_int(e, "eval", "top_k");
        cfg.eval.use_ground_truth_semantic = need_bool(e, "eval", "use_ground_truth_semantic");
        cfg.eval.generation_batch = need_int(e, "eval", "generation_batch");
        cfg.eval.seed = need_u64(e, "eval", "seed");
    }
    {
        const json& a = need_section(j, "ablation");
        const json& arms = need(a, "ablation", "arms");
        if (!arms.is_array()) throw std::runtime_error("config: 'ablation.arms' must be an array");
        for (std::size_t i = 0; i < arms.size(); ++i) {
            const std::string section = "ablation.arms[" + std::to_string(i) + "]";
            const json& arm = arms[i];
            AblationArmSettings s;
            s.name = need_string(arm, section, "name");
            s.loss_mode = parse_loss_mode(need_string(arm, section, "loss_mode"));
            s.z_pairs = need_int(arm, section, "z_pairs");
            s.gt_as_preferred = need_bool(arm, section, "gt_as_preferred");
            cfg.ablation.push_back(std::move(s));
        }
    }

    cfg.n2s.train.threads = cfg.threads;
    cfg.s2s.train.threads = cfg.threads;
    cfg.dpo.threads = cfg.threads;
    cfg.eval.threads = cfg.threads;
    return cfg;
}

void PipelineConfig::apply_master_seed(std::uint64_t master) {
    Rng root(master);
    world.seed = root.derive("world").seed();
    corpus.seed = root.derive("corpus").seed();
    judges.judge_a.calibration_seed = root.derive("judge_a").seed();
    judges.judge_b.calibration_seed = root.derive("judge_b").seed();
    n2s.train.init_seed = root.derive("n2s_init").seed();
    n2s.train.train_seed = root.derive("n2s_train").seed();
    s2s.train.init_seed = root.derive("s2s_init").seed();
    s2s.train.train_seed = root.derive("s2s_train").seed();
    dpo.seed = root.derive("dpo").seed();
    eval.seed = root.derive("eval").seed();
    config_hash = fnv1a64(&master, sizeof(master)) ^ config_hash;
}

}  // namespace prefopt
