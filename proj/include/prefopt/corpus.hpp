#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "prefopt/rng.hpp"
#include "prefopt/vocab.hpp"

namespace prefopt {

/// Per-token corruption probabilities applied to one example.
struct CorruptionConfig {
    double p_noise = 0.0;  // substitution into the acoustic noise band
    double p_rev = 0.0;    // copy-previous-token temporal smearing
    double p_sem = 0.0;    // semantic substitution

    void validate() const;
};

/// The synthetic paired-token world: a Markov source over semantic ids, a
/// deterministic-plus-jitter semantic-to-acoustic expansion, and a reserved
/// acoustic noise band that clean expansion never touches. All ids are
/// vocabulary-level (semantic band first, acoustic band after).
struct World {
    int n_semantic = 0;
    int n_acoustic = 0;
    int n_noise_ids = 0;
    int expansion_len = 0;  // acoustic tokens per semantic token
    double jitter = 0.1;
    std::uint64_t seed = 0;

    std::vector<std::vector<double>> transitions;  // row-stochastic [n_semantic][n_semantic]
    struct Expansion {
        std::vector<int> base;        // expansion_len non-noise acoustic ids
        std::vector<int> alternates;  // per-position jitter substitute, != base
    };
    std::vector<Expansion> expansions;  // one per semantic id

    VocabLayout vocab() const;
    int noise_band_begin() const { return n_semantic + n_acoustic - n_noise_ids; }
    bool is_noise_id(int id) const { return id >= noise_band_begin() && id < n_semantic + n_acoustic; }
};

struct CorpusExample {
    long long id = 0;
    std::vector<int> clean_semantic;   // length F
    std::vector<int> noisy_semantic;   // length F
    std::vector<int> clean_acoustic;   // length expansion_len * F
    std::vector<int> noisy_acoustic;   // length expansion_len * F
    CorruptionConfig corruption;
};

struct Corpus {
    std::vector<CorpusExample> train;
    std::vector<CorpusExample> test_noreverb;  // p_rev forced to 0
    std::vector<CorpusExample> test_reverb;    // p_rev forced positive
};

struct DatasetConfig {
    int n_train = 4000;
    int n_test_per_partition = 500;
    int frames = 16;
    double p_noise_min = 0.05;
    double p_noise_max = 0.4;
    double p_rev_zero_prob = 0.6;
    double p_rev_min = 0.1;
    double p_rev_max = 0.3;
    // Held-out partitions draw from their own, harsher corruption band, the
    // way the real benchmark's test conditions sit outside the training mix.
    double test_p_noise_min = 0.3;
    double test_p_noise_max = 0.6;
    double test_p_rev_min = 0.2;
    double test_p_rev_max = 0.4;
    std::uint64_t seed = 0;
};

World build_world(int n_semantic, int n_acoustic, int expansion_len, int n_noise_ids, Rng rng,
                  double jitter = 0.1);

/// Markov-walk semantic sequence of length `frames` and its acoustic expansion.
std::pair<std::vector<int>, std::vector<int>> sample_clean(const World& world, int frames, Rng& rng);

/// Reverb pass first (left-to-right copy of the evolving stream), then noise
/// substitution on the acoustic stream, then semantic substitution.
std::pair<std::vector<int>, std::vector<int>> corrupt(const World& world,
                                                      const std::vector<int>& clean_semantic,
                                                      const std::vector<int>& clean_acoustic,
                                                      const CorruptionConfig& cfg, Rng& rng);

/// Pure function of (world, config): per-example child seeds, id-disjoint splits.
Corpus make_dataset(const World& world, const DatasetConfig& cfg);

void save_world(const World& world, const std::string& path);
World load_world(const std::string& path);

/// One JSON object per line per partition: train.jsonl, test_noreverb.jsonl,
/// test_reverb.jsonl.
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

/// Hash over the serialized bytes of all three partitions.
std::uint64_t corpus_content_hash(const Corpus& corpus);

}  // namespace prefopt
