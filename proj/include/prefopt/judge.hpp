#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "prefopt/corpus.hpp"

namespace prefopt {

/// Reference-free proxy quality scorer: an add-alpha smoothed n-gram model over
/// clean acoustic tokens with an affine calibration onto a [1,5] MOS-like scale.
///
/// Scoring is defined for arbitrary token ids; ids outside the acoustic band
/// simply never match a trained n-gram and fall through to the smoothed floor,
/// which penalises them heavily. Conditional distributions over the acoustic
/// band sum to 1 for every context.
class JudgeModel {
public:
    /// Counts all n-grams (with begin padding) of the clean sequences.
    static JudgeModel fit(const std::vector<std::vector<int>>& clean_sequences, int order,
                          double alpha, int acoustic_begin, int n_acoustic);

    /// Fixes the affine map by two anchors: the median clean mean log-likelihood
    /// maps to 4.5, the median corrupted one to 1.5. Both samples need >= 200
    /// sequences and the medians must differ in the right direction.
    void calibrate(const std::vector<std::vector<int>>& clean_sample,
                   const std::vector<std::vector<int>>& corrupted_sample);

    /// MOS in [1,5]. Requires a calibrated judge and len(seq) >= order.
    double score(const std::vector<int>& seq) const;

    /// Mean per-token natural-log likelihood.
    double mean_loglik(const std::vector<int>& seq) const;
    double score_from_loglik(double loglik) const;

    double conditional(const std::vector<int>& context, int token) const;

    bool calibrated() const { return calibrated_; }
    int order() const { return order_; }
    double alpha() const { return alpha_; }
    double slope() const { return slope_; }
    double intercept() const { return intercept_; }

    std::string to_json_string() const;
    static JudgeModel from_json_string(const std::string& text);
    void save(const std::string& path) const;
    static JudgeModel load(const std::string& path);

    std::uint64_t content_hash() const;

private:
    JudgeModel() = default;

    std::uint64_t context_key(const int* seq, int pos) const;

    int order_ = 0;
    double alpha_ = 0.0;
    int acoustic_begin_ = 0;
    int n_acoustic_ = 0;
    std::unordered_map<std::uint64_t, int> ngram_counts_;    // (context, token) -> count
    std::unordered_map<std::uint64_t, int> context_counts_;  // context -> total count
    double slope_ = 0.0;
    double intercept_ = 0.0;
    bool calibrated_ = false;
};

struct JudgeSettings {
    int order = 3;
    double alpha = 0.1;
    std::uint64_t calibration_seed = 0;
};

/// Fit on the train split's clean acoustic streams, then calibrate against the
/// same streams corrupted at `corrupt_p_noise`. Uses `n_calibration` sequences
/// for both anchors.
JudgeModel fit_and_calibrate_judge(const World& world, const std::vector<CorpusExample>& train,
                                   const JudgeSettings& settings, int n_calibration,
                                   double corrupt_p_noise);

}  // namespace prefopt
