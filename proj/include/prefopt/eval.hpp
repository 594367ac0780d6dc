#pragma once

#include <span>
#include <string>
#include <vector>

#include "prefopt/corpus.hpp"
#include "prefopt/judge.hpp"
#include "prefopt/lm.hpp"

namespace prefopt {

struct EvalSettings {
    bool use_ground_truth_semantic = false;  // bypass the N2S stage
    DecodeMode decode = DecodeMode::greedy;
    int top_k = 16;            // only for topk decoding
    std::uint64_t seed = 0;    // only for topk decoding
    int generation_batch = 100;
    int threads = 0;
};

/// Two-stage inference: predicted clean semantics from the N2S model, then the
/// clean acoustic sequence from the S2S model, both decoded greedily by default.
std::vector<int> enhance(const LMParams& n2s, const LMParams& s2s, const CorpusExample& ex,
                         const VocabLayout& vocab, const EvalSettings& settings = {});

/// Greedy lockstep decoding over many examples; identical outputs to enhance().
std::vector<std::vector<int>> enhance_batch(const LMParams& n2s, const LMParams& s2s,
                                            const std::vector<const CorpusExample*>& examples,
                                            const VocabLayout& vocab,
                                            const EvalSettings& settings = {});

/// Position-wise match fraction; lengths must agree.
double token_accuracy(std::span<const int> predicted, std::span<const int> reference);

/// Cosine similarity of acoustic-band token-count histograms. 1 for identical
/// multisets; 0 for disjoint support (including all-off-band inputs).
double hist_cosine(std::span<const int> predicted, std::span<const int> reference,
                   const VocabLayout& vocab);

struct PartitionMetrics {
    double judge_a = 0.0;
    double judge_b = 0.0;
    double token_accuracy = 0.0;
    double hist_cosine = 0.0;
    int n_examples = 0;
};

struct EvalReport {
    std::string system;
    PartitionMetrics no_reverb;
    PartitionMetrics reverb;
    std::uint64_t corpus_hash = 0;
    std::uint64_t judge_a_hash = 0;
    std::uint64_t judge_b_hash = 0;
    std::uint64_t checkpoint_hash = 0;  // over both model parameter sets
    std::uint64_t config_hash = 0;

    std::string to_json_string() const;
    static EvalReport from_json_string(const std::string& text);
    void save(const std::string& path) const;
    static EvalReport load(const std::string& path);
};

/// Per-partition means over the fixed test sets. Rejects uncalibrated judges
/// and missing partitions. Deterministic for greedy decoding.
EvalReport evaluate(const std::string& system_name, const LMParams& n2s, const LMParams& s2s,
                    const Corpus& corpus, const VocabLayout& vocab, const JudgeModel& judge_a,
                    const JudgeModel& judge_b, const EvalSettings& settings = {},
                    std::uint64_t config_hash = 0);

/// The "noisy" table row: the unprocessed noisy acoustic stream scored as if it
/// were the system output.
EvalReport evaluate_noisy_passthrough(const Corpus& corpus, const VocabLayout& vocab,
                                      const JudgeModel& judge_a, const JudgeModel& judge_b,
                                      std::uint64_t config_hash = 0);

/// Table-1-style markdown over several systems. Refuses to collate reports
/// whose corpus or judge hashes differ.
std::string render_report_table(const std::vector<EvalReport>& reports);
void write_report_csv(const std::vector<EvalReport>& reports, const std::string& path);

}  // namespace prefopt
