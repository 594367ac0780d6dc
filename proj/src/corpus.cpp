#include "prefopt/corpus.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace prefopt {

using json = nlohmann::json;

void CorruptionConfig::validate() const {
    for (double p : {p_noise, p_rev, p_sem})
        if (p < 0.0 || p > 1.0)
            throw std::invalid_argument("CorruptionConfig: probability " + std::to_string(p) +
                                        " outside [0,1]");
}

VocabLayout World::vocab() const {
    VocabLayout v;
    v.n_semantic = n_semantic;
    v.n_acoustic = n_acoustic;
    return v;
}

World build_world(int n_semantic, int n_acoustic, int expansion_len, int n_noise_ids, Rng rng,
                  double jitter) {
    if (n_semantic < 2 || n_noise_ids < 1 || expansion_len < 1)
        throw std::invalid_argument("build_world: need n_semantic >= 2, n_noise_ids >= 1, r >= 1");
    if (n_acoustic < n_semantic + n_noise_ids)
        throw std::invalid_argument("build_world: id budget infeasible, n_acoustic " +
                                    std::to_string(n_acoustic) + " < n_semantic " +
                                    std::to_string(n_semantic) + " + n_noise_ids " +
                                    std::to_string(n_noise_ids));
    // Non-noise acoustic ids available for expansion; needs >= 2 so jitter
    // alternates exist.
    const int n_usable = n_acoustic - n_noise_ids;
    if (n_usable < 2)
        throw std::invalid_argument("build_world: only " + std::to_string(n_usable) +
                                    " non-noise acoustic ids, need at least 2");

    World w;
    w.n_semantic = n_semantic;
    w.n_acoustic = n_acoustic;
    w.n_noise_ids = n_noise_ids;
    w.expansion_len = expansion_len;
    w.jitter = jitter;
    w.seed = rng.seed();

    // Sparse row-stochastic transitions with per-row support 2..4.
    Rng trans_rng = rng.derive("transitions");
    w.transitions.assign(n_semantic, std::vector<double>(n_semantic, 0.0));
    for (int row = 0; row < n_semantic; ++row) {
        const int support = std::min(n_semantic, 2 + static_cast<int>(trans_rng.next_below(3)));
        std::vector<int> cols(n_semantic);
        for (int i = 0; i < n_semantic; ++i) cols[i] = i;
        for (int i = 0; i < support; ++i) {
            const int j = i + trans_rng.next_int(n_semantic - i);
            std::swap(cols[i], cols[j]);
        }
        double total = 0.0;
        std::vector<double> weights(support);
        for (int i = 0; i < support; ++i) {
            weights[i] = trans_rng.next_uniform(0.2, 1.0);
            total += weights[i];
        }
        for (int i = 0; i < support; ++i) w.transitions[row][cols[i]] = weights[i] / total;
    }

    // Distinct base expansion grams over the non-noise acoustic band.
    Rng exp_rng = rng.derive("expansions");
    const int ac_begin = n_semantic;
    std::set<std::vector<int>> seen;
    w.expansions.resize(n_semantic);
    for (int s = 0; s < n_semantic; ++s) {
        std::vector<int> base(expansion_len);
        do {
            for (int i = 0; i < expansion_len; ++i) base[i] = ac_begin + exp_rng.next_int(n_usable);
        } while (!seen.insert(base).second);
        w.expansions[s].base = base;
        w.expansions[s].alternates.resize(expansion_len);
        for (int i = 0; i < expansion_len; ++i) {
            int alt = base[i];
            while (alt == base[i]) alt = ac_begin + exp_rng.next_int(n_usable);
            w.expansions[s].alternates[i] = alt;
        }
    }
    return w;
}

std::pair<std::vector<int>, std::vector<int>> sample_clean(const World& world, int frames,
                                                           Rng& rng) {
    if (frames < 2) throw std::invalid_argument("sample_clean: need frames >= 2");
    std::vector<int> semantic(frames);
    semantic[0] = rng.next_int(world.n_semantic);
    for (int t = 1; t < frames; ++t) {
        const auto& row = world.transitions[semantic[t - 1]];
        const double u = rng.next_double();
        double c = 0.0;
        int next = world.n_semantic - 1;
        for (int j = 0; j < world.n_semantic; ++j) {
            c += row[j];
            if (u < c) {
                next = j;
                break;
            }
        }
        semantic[t] = next;
    }

    std::vector<int> acoustic;
    acoustic.reserve(static_cast<std::size_t>(frames) * world.expansion_len);
    for (int t = 0; t < frames; ++t) {
        const auto& exp = world.expansions[semantic[t]];
        for (int i = 0; i < world.expansion_len; ++i) {
            const bool jittered = world.jitter > 0.0 && rng.next_double() < world.jitter;
            acoustic.push_back(jittered ? exp.alternates[i] : exp.base[i]);
        }
    }
    return {std::move(semantic), std::move(acoustic)};
}

std::pair<std::vector<int>, std::vector<int>> corrupt(const World& world,
                                                      const std::vector<int>& clean_semantic,
                                                      const std::vector<int>& clean_acoustic,
                                                      const CorruptionConfig& cfg, Rng& rng) {
    cfg.validate();
    std::vector<int> acoustic = clean_acoustic;
    for (std::size_t t = 1; t < acoustic.size(); ++t)
        if (rng.next_double() < cfg.p_rev) acoustic[t] = acoustic[t - 1];
    const int noise_begin = world.noise_band_begin();
    for (std::size_t t = 0; t < acoustic.size(); ++t)
        if (rng.next_double() < cfg.p_noise) acoustic[t] = noise_begin + rng.next_int(world.n_noise_ids);

    std::vector<int> semantic = clean_semantic;
    for (std::size_t t = 0; t < semantic.size(); ++t)
        if (rng.next_double() < cfg.p_sem) semantic[t] = rng.next_int(world.n_semantic);
    return {std::move(semantic), std::move(acoustic)};
}

namespace {

CorpusExample make_example(const World& world, long long id, int frames, const CorruptionConfig& cfg,
                           Rng child) {
    CorpusExample ex;
    ex.id = id;
    ex.corruption = cfg;
    Rng clean_rng = child.derive("clean");
    auto [s, a] = sample_clean(world, frames, clean_rng);
    Rng corrupt_rng = child.derive("corrupt");
    auto [sbar, abar] = corrupt(world, s, a, cfg, corrupt_rng);
    ex.clean_semantic = std::move(s);
    ex.clean_acoustic = std::move(a);
    ex.noisy_semantic = std::move(sbar);
    ex.noisy_acoustic = std::move(abar);
    return ex;
}

CorruptionConfig draw_corruption(const DatasetConfig& cfg, Rng& rng) {
    CorruptionConfig c;
    c.p_noise = rng.next_uniform(cfg.p_noise_min, cfg.p_noise_max);
    c.p_rev = rng.next_double() < cfg.p_rev_zero_prob ? 0.0
                                                      : rng.next_uniform(cfg.p_rev_min, cfg.p_rev_max);
    c.p_sem = c.p_noise / 2.0;
    return c;
}

}  // namespace

Corpus make_dataset(const World& world, const DatasetConfig& cfg) {
    if (cfg.n_train < 1 || cfg.n_test_per_partition < 1)
        throw std::invalid_argument("make_dataset: need at least one example per split");
    Rng root(cfg.seed);
    Corpus corpus;
    long long id = 0;

    corpus.train.reserve(cfg.n_train);
    for (int i = 0; i < cfg.n_train; ++i, ++id) {
        Rng child = root.derive(static_cast<std::uint64_t>(id));
        Rng knob_rng = child.derive("corruption");
        corpus.train.push_back(make_example(world, id, cfg.frames, draw_corruption(cfg, knob_rng), child));
    }
    corpus.test_noreverb.reserve(cfg.n_test_per_partition);
    for (int i = 0; i < cfg.n_test_per_partition; ++i, ++id) {
        Rng child = root.derive(static_cast<std::uint64_t>(id));
        Rng knob_rng = child.derive("corruption");
        CorruptionConfig c;
        c.p_noise = knob_rng.next_uniform(cfg.test_p_noise_min, cfg.test_p_noise_max);
        c.p_sem = c.p_noise / 2.0;
        c.p_rev = 0.0;
        corpus.test_noreverb.push_back(make_example(world, id, cfg.frames, c, child));
    }
    corpus.test_reverb.reserve(cfg.n_test_per_partition);
    for (int i = 0; i < cfg.n_test_per_partition; ++i, ++id) {
        Rng child = root.derive(static_cast<std::uint64_t>(id));
        Rng knob_rng = child.derive("corruption");
        CorruptionConfig c;
        c.p_noise = knob_rng.next_uniform(cfg.test_p_noise_min, cfg.test_p_noise_max);
        c.p_sem = c.p_noise / 2.0;
        c.p_rev = knob_rng.next_uniform(cfg.test_p_rev_min, cfg.test_p_rev_max);
        corpus.test_reverb.push_back(make_example(world, id, cfg.frames, c, child));
    }
    return corpus;
}

// ---- persistence ----

namespace {

json example_to_json(const CorpusExample& ex) {
    return json{{"id", ex.id},          {"S", ex.clean_semantic},  {"S_bar", ex.noisy_semantic},
                {"A", ex.clean_acoustic}, {"A_bar", ex.noisy_acoustic}, {"p_noise", ex.corruption.p_noise},
                {"p_rev", ex.corruption.p_rev}, {"p_sem", ex.corruption.p_sem}};
}

CorpusExample example_from_json(const json& j) {
    CorpusExample ex;
    ex.id = j.at("id").get<long long>();
    ex.clean_semantic = j.at("S").get<std::vector<int>>();
    ex.noisy_semantic = j.at("S_bar").get<std::vector<int>>();
    ex.clean_acoustic = j.at("A").get<std::vector<int>>();
    ex.noisy_acoustic = j.at("A_bar").get<std::vector<int>>();
    ex.corruption.p_noise = j.at("p_noise").get<double>();
    ex.corruption.p_rev = j.at("p_rev").get<double>();
    ex.corruption.p_sem = j.at("p_sem").get<double>();
    return ex;
}

void write_partition(const std::vector<CorpusExample>& part, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const auto& ex : part) out << example_to_json(ex).dump() << '\n';
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<CorpusExample> read_partition(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::vector<CorpusExample> part;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            part.push_back(example_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return part;
}

void hash_partition(const std::vector<CorpusExample>& part, std::string& buffer) {
    for (const auto& ex : part) {
        buffer += example_to_json(ex).dump();
        buffer += '\n';
    }
}

}  // namespace

void save_world(const World& world, const std::string& path) {
    json j;
    j["n_semantic"] = world.n_semantic;
    j["n_acoustic"] = world.n_acoustic;
    j["n_noise_ids"] = world.n_noise_ids;
    j["expansion_len"] = world.expansion_len;
    j["jitter"] = world.jitter;
    j["seed"] = world.seed;
    j["transitions"] = world.transitions;
    json exps = json::array();
    for (const auto& e : world.expansions) exps.push_back(json{{"base", e.base}, {"alternates", e.alternates}});
    j["expansions"] = exps;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed: " + path);
}

World load_world(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
    World w;
    w.n_semantic = j.at("n_semantic").get<int>();
    w.n_acoustic = j.at("n_acoustic").get<int>();
    w.n_noise_ids = j.at("n_noise_ids").get<int>();
    w.expansion_len = j.at("expansion_len").get<int>();
    w.jitter = j.at("jitter").get<double>();
    w.seed = j.at("seed").get<std::uint64_t>();
    w.transitions = j.at("transitions").get<std::vector<std::vector<double>>>();
    for (const auto& e : j.at("expansions")) {
        World::Expansion exp;
        exp.base = e.at("base").get<std::vector<int>>();
        exp.alternates = e.at("alternates").get<std::vector<int>>();
        w.expansions.push_back(std::move(exp));
    }
    return w;
}

void save_corpus(const Corpus& corpus, const std::string& dir) {
    std::filesystem::create_directories(dir);
    write_partition(corpus.train, dir + "/train.jsonl");
    write_partition(corpus.test_noreverb, dir + "/test_noreverb.jsonl");
    write_partition(corpus.test_reverb, dir + "/test_reverb.jsonl");
}

Corpus load_corpus(const std::string& dir) {
    Corpus corpus;
    corpus.train = read_partition(dir + "/train.jsonl");
    corpus.test_noreverb = read_partition(dir + "/test_noreverb.jsonl");
    corpus.test_reverb = read_partition(dir + "/test_reverb.jsonl");
    return corpus;
}

std::uint64_t corpus_content_hash(const Corpus& corpus) {
    std::string buffer;
    hash_partition(corpus.train, buffer);
    hash_partition(corpus.test_noreverb, buffer);
    hash_partition(corpus.test_reverb, buffer);
    return fnv1a64(buffer.data(), buffer.size());
}

}  // namespace prefopt
