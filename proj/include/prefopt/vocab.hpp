#pragma once

#include <span>
#include <vector>

namespace prefopt {

/// Unified token-id space: a contiguous semantic band, then a contiguous
/// acoustic band, then five separator/control ids.
struct VocabLayout {
    int n_semantic = 0;
    int n_acoustic = 0;

    static constexpr int n_specials = 5;

    int total() const { return n_semantic + n_acoustic + n_specials; }
    int semantic_begin() const { return 0; }
    int acoustic_begin() const { return n_semantic; }
    int bos() const { return n_semantic + n_acoustic; }
    int sep_noisy_sem() const { return n_semantic + n_acoustic + 1; }
    int sep_clean_sem() const { return n_semantic + n_acoustic + 2; }
    int sep_noisy_ac() const { return n_semantic + n_acoustic + 3; }
    int sep_target() const { return n_semantic + n_acoustic + 4; }

    bool is_semantic(int id) const { return id >= 0 && id < n_semantic; }
    bool is_acoustic(int id) const { return id >= n_semantic && id < n_semantic + n_acoustic; }

    void validate() const;
};

/// A separator-delimited token chain plus the location of its target span.
/// The target span, when present, is always the suffix of `tokens`.
struct PromptChain {
    std::vector<int> tokens;
    int target_start = 0;
    int target_len = 0;

    int length() const { return static_cast<int>(tokens.size()); }
    std::vector<int> target_tokens() const;
};

/// [BOS, SEP_NOISY_SEM, noisy semantic, SEP_CLEAN_SEM, clean semantic,
///  SEP_NOISY_AC, noisy acoustic, SEP_TARGET, target acoustic].
/// Pass an empty target to build a generation prompt.
PromptChain make_s2s_chain(const VocabLayout& vocab, std::span<const int> noisy_semantic,
                           std::span<const int> clean_semantic, std::span<const int> noisy_acoustic,
                           std::span<const int> target);

/// [BOS, SEP_NOISY_SEM, noisy semantic, SEP_TARGET, target semantic].
PromptChain make_n2s_chain(const VocabLayout& vocab, std::span<const int> noisy_semantic,
                           std::span<const int> target);

}  // namespace prefopt
