#include "prefopt/vocab.hpp"

#include <stdexcept>
#include <string>

namespace prefopt {

void VocabLayout::validate() const {
    if (n_semantic < 1 || n_acoustic < 1)
        throw std::invalid_argument("VocabLayout: need at least one semantic and one acoustic id, got " +
                                    std::to_string(n_semantic) + "/" + std::to_string(n_acoustic));
}

std::vector<int> PromptChain::target_tokens() const {
    return std::vector<int>(tokens.begin() + target_start, tokens.begin() + target_start + target_len);
}

namespace {

void check_ids(std::span<const int> ids, int vocab_total, const char* segment) {
    for (int id : ids)
        if (id < 0 || id >= vocab_total)
            throw std::invalid_argument(std::string("PromptChain: id ") + std::to_string(id) +
                                        " in " + segment + " outside vocabulary of size " +
                                        std::to_string(vocab_total));
}

}  // namespace

PromptChain make_s2s_chain(const VocabLayout& vocab, std::span<const int> noisy_semantic,
                           std::span<const int> clean_semantic, std::span<const int> noisy_acoustic,
                           std::span<const int> target) {
    vocab.validate();
    const int v = vocab.total();
    check_ids(noisy_semantic, v, "noisy semantic");
    check_ids(clean_semantic, v, "clean semantic");
    check_ids(noisy_acoustic, v, "noisy acoustic");
    check_ids(target, v, "target");

    PromptChain chain;
    chain.tokens.reserve(5 + noisy_semantic.size() + clean_semantic.size() + noisy_acoustic.size() +
                         target.size());
    chain.tokens.push_back(vocab.bos());
    chain.tokens.push_back(vocab.sep_noisy_sem());
    chain.tokens.insert(chain.tokens.end(), noisy_semantic.begin(), noisy_semantic.end());
    chain.tokens.push_back(vocab.sep_clean_sem());
    chain.tokens.insert(chain.tokens.end(), clean_semantic.begin(), clean_semantic.end());
    chain.tokens.push_back(vocab.sep_noisy_ac());
    chain.tokens.insert(chain.tokens.end(), noisy_acoustic.begin(), noisy_acoustic.end());
    chain.tokens.push_back(vocab.sep_target());
    chain.target_start = static_cast<int>(chain.tokens.size());
    chain.tokens.insert(chain.tokens.end(), target.begin(), target.end());
    chain.target_len = static_cast<int>(target.size());
    return chain;
}

PromptChain make_n2s_chain(const VocabLayout& vocab, std::span<const int> noisy_semantic,
                           std::span<const int> target) {
    vocab.validate();
    const int v = vocab.total();
    check_ids(noisy_semantic, v, "noisy semantic");
    check_ids(target, v, "target");

    PromptChain chain;
    chain.tokens.reserve(3 + noisy_semantic.size() + target.size());
    chain.tokens.push_back(vocab.bos());
    chain.tokens.push_back(vocab.sep_noisy_sem());
    chain.tokens.insert(chain.tokens.end(), noisy_semantic.begin(), noisy_semantic.end());
    chain.tokens.push_back(vocab.sep_target());
    chain.target_start = static_cast<int>(chain.tokens.size());
    chain.tokens.insert(chain.tokens.end(), target.begin(), target.end());
    chain.target_len = static_cast<int>(target.size());
    return chain;
}

}  // namespace prefopt
