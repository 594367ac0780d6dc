#include "prefopt/judge.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace prefopt {

using json = nlohmann::json;

namespace {

constexpr int kMaxOrder = 4;  // context packs into 48 bits, token into 16
constexpr std::uint64_t kPad = 1;

std::uint64_t encode_token(int id) {
    if (id < 0 || id > 0xFFFC)
        throw std::invalid_argument("JudgeModel: token id " + std::to_string(id) +
                                    " outside the encodable range");
    return static_cast<std::uint64_t>(id) + 2;
}

double median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace

std::uint64_t JudgeModel::context_key(const int* seq, int pos) const {
    std::uint64_t key = 0;
    for (int i = order_ - 1; i >= 1; --i) {
        const int j = pos - i;
        key = (key << 16) | (j < 0 ? kPad : encode_token(seq[j]));
    }
    return key;
}

JudgeModel JudgeModel::fit(const std::vector<std::vector<int>>& clean_sequences, int order,
                           double alpha, int acoustic_begin, int n_acoustic) {
    if (clean_sequences.empty()) throw std::invalid_argument("JudgeModel::fit: empty corpus");
    if (order < 1 || order > kMaxOrder)
        throw std::invalid_argument("JudgeModel::fit: order " + std::to_string(order) +
                                    " outside [1, " + std::to_string(kMaxOrder) + "]");
    if (alpha <= 0.0) throw std::invalid_argument("JudgeModel::fit: alpha must be positive");
    if (n_acoustic < 1) throw std::invalid_argument("JudgeModel::fit: empty acoustic vocabulary");

    JudgeModel m;
    m.order_ = order;
    m.alpha_ = alpha;
    m.acoustic_begin_ = acoustic_begin;
    m.n_acoustic_ = n_acoustic;
    for (const auto& seq : clean_sequences) {
        for (int t = 0; t < static_cast<int>(seq.size()); ++t) {
            const std::uint64_t ctx = m.context_key(seq.data(), t);
            m.ngram_counts_[(ctx << 16) | encode_token(seq[t])]++;
            m.context_counts_[ctx]++;
        }
    }
    return m;
}

double JudgeModel::conditional(const std::vector<int>& context, int token) const {
    if (static_cast<int>(context.size()) != order_ - 1)
        throw std::invalid_argument("JudgeModel::conditional: expected a context of " +
                                    std::to_string(order_ - 1) + " tokens");
    std::uint64_t key = 0;
    for (int id : context) key = (key << 16) | encode_token(id);
    const auto cit = context_counts_.find(key);
    const double ctx_count = cit == context_counts_.end() ? 0.0 : cit->second;
    const auto nit = ngram_counts_.find((key << 16) | encode_token(token));
    const double count = nit == ngram_counts_.end() ? 0.0 : nit->second;
    return (count + alpha_) / (ctx_count + alpha_ * n_acoustic_);
}

double JudgeModel::mean_loglik(const std::vector<int>& seq) const {
    if (static_cast<int>(seq.size()) < order_)
        throw std::invalid_argument("JudgeModel: sequence of length " +
                                    std::to_string(seq.size()) + " shorter than order " +
                                    std::to_string(order_));
    double total = 0.0;
    for (int t = 0; t < static_cast<int>(seq.size()); ++t) {
        const std::uint64_t ctx = context_key(seq.data(), t);
        const auto cit = context_counts_.find(ctx);
        const double ctx_count = cit == context_counts_.end() ? 0.0 : cit->second;
        const auto nit = ngram_counts_.find((ctx << 16) | encode_token(seq[t]));
        const double count = nit == ngram_counts_.end() ? 0.0 : nit->second;
        total += std::log((count + alpha_) / (ctx_count + alpha_ * n_acoustic_));
    }
    return total / static_cast<double>(seq.size());
}

void JudgeModel::calibrate(const std::vector<std::vector<int>>& clean_sample,
                           const std::vector<std::vector<int>>& corrupted_sample) {
    if (clean_sample.size() < 200 || corrupted_sample.size() < 200)
        throw std::invalid_argument("JudgeModel::calibrate: need >= 200 sequences per anchor, got " +
                                    std::to_string(clean_sample.size()) + " and " +
                                    std::to_string(corrupted_sample.size()));
    std::vector<double> clean_ll, corrupted_ll;
    clean_ll.reserve(clean_sample.size());
    corrupted_ll.reserve(corrupted_sample.size());
    for (const auto& s : clean_sample) clean_ll.push_back(mean_loglik(s));
    for (const auto& s : corrupted_sample) corrupted_ll.push_back(mean_loglik(s));

    const double med_clean = median(std::move(clean_ll));
    const double med_corrupted = median(std::move(corrupted_ll));
    if (!(med_clean > med_corrupted))
        throw std::invalid_argument(
            "JudgeModel::calibrate: degenerate anchors, clean median " + std::to_string(med_clean) +
            " not above corrupted median " + std::to_string(med_corrupted));

    slope_ = (4.5 - 1.5) / (med_clean - med_corrupted);
    intercept_ = 4.5 - slope_ * med_clean;
    calibrated_ = true;
}

double JudgeModel::score_from_loglik(double loglik) const {
    if (!calibrated_) throw std::logic_error("JudgeModel: score requested before calibration");
    return std::clamp(slope_ * loglik + intercept_, 1.0, 5.0);
}

double JudgeModel::score(const std::vector<int>& seq) const {
    return score_from_loglik(mean_loglik(seq));
}

// ---- persistence ----

std::string JudgeModel::to_json_string() const {
    std::vector<std::pair<std::uint64_t, int>> ngrams(ngram_counts_.begin(), ngram_counts_.end());
    std::sort(ngrams.begin(), ngrams.end());
    json j;
    j["order"] = order_;
    j["alpha"] = alpha_;
    j["acoustic_begin"] = acoustic_begin_;
    j["n_acoustic"] = n_acoustic_;
    j["calibrated"] = calibrated_;
    j["slope"] = slope_;
    j["intercept"] = intercept_;
    json table = json::array();
    for (const auto& [key, count] : ngrams) table.push_back(json::array({key, count}));
    j["ngrams"] = table;
    return j.dump();
}

JudgeModel JudgeModel::from_json_string(const std::string& text) {
    json j = json::parse(text);
    JudgeModel m;
    m.order_ = j.at("order").get<int>();
    m.alpha_ = j.at("alpha").get<double>();
    m.acoustic_begin_ = j.at("acoustic_begin").get<int>();
    m.n_acoustic_ = j.at("n_acoustic").get<int>();
    m.calibrated_ = j.at("calibrated").get<bool>();
    m.slope_ = j.at("slope").get<double>();
    m.intercept_ = j.at("intercept").get<double>();
    for (const auto& entry : j.at("ngrams")) {
        const auto key = entry.at(0).get<std::uint64_t>();
        const auto count = entry.at(1).get<int>();
        m.ngram_counts_[key] = count;
        m.context_counts_[key >> 16] += count;
    }
    return m;
}

void JudgeModel::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << to_json_string() << '\n';
    if (!out) throw std::runtime_error("write failed: " + path);
}

JudgeModel JudgeModel::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::ostringstream os;
    os << in.rdbuf();
    try {
        return from_json_string(os.str());
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

std::uint64_t JudgeModel::content_hash() const {
    const std::string text = to_json_string();
    return fnv1a64(text.data(), text.size());
}

JudgeModel fit_and_calibrate_judge(const World& world, const std::vector<CorpusExample>& train,
                                   const JudgeSettings& settings, int n_calibration,
                                   double corrupt_p_noise) {
    if (train.empty()) throw std::invalid_argument("fit_and_calibrate_judge: empty train split");
    std::vector<std::vector<int>> clean;
    clean.reserve(train.size());
    for (const auto& ex : train) clean.push_back(ex.clean_acoustic);

    JudgeModel judge = JudgeModel::fit(clean, settings.order, settings.alpha,
                                       world.vocab().acoustic_begin(), world.n_acoustic);

    const int n = std::min<int>(n_calibration, static_cast<int>(train.size()));
    std::vector<std::vector<int>> clean_sample, corrupted_sample;
    clean_sample.reserve(n);
    corrupted_sample.reserve(n);
    Rng root(settings.calibration_seed);
    CorruptionConfig cfg;
    cfg.p_noise = corrupt_p_noise;
    for (int i = 0; i < n; ++i) {
        clean_sample.push_back(train[i].clean_acoustic);
        Rng child = root.derive(static_cast<std::uint64_t>(i));
        auto [sbar, abar] = corrupt(world, train[i].clean_semantic, train[i].clean_acoustic, cfg, child);
        corrupted_sample.push_back(std::move(abar));
    }
    judge.calibrate(clean_sample, corrupted_sample);
    return judge;
}

}  // namespace prefopt
