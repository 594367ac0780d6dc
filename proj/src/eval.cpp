#include "prefopt/eval.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "prefopt/parallel.hpp"
#include "prefopt/training.hpp"

namespace prefopt {

using json = nlohmann::json;

namespace {

PromptChain n2s_prompt(const VocabLayout& vocab, const CorpusExample& ex) {
    return make_n2s_chain(vocab, ex.noisy_semantic, {});
}

PromptChain s2s_prompt(const VocabLayout& vocab, const CorpusExample& ex,
                       const std::vector<int>& semantic) {
    return make_s2s_chain(vocab, ex.noisy_semantic, semantic, ex.noisy_acoustic, {});
}

}  // namespace

std::vector<int> enhance(const LMParams& n2s, const LMParams& s2s, const CorpusExample& ex,
                         const VocabLayout& vocab, const EvalSettings& settings) {
    const int frames = static_cast<int>(ex.clean_semantic.size());
    const int t_len = static_cast<int>(ex.clean_acoustic.size());
    std::vector<int> semantic;
    if (settings.use_ground_truth_semantic) {
        semantic = ex.clean_semantic;
    } else if (settings.decode == DecodeMode::greedy) {
        semantic = generate(n2s, n2s_prompt(vocab, ex), frames, DecodeMode::greedy);
    } else {
        semantic = generate(n2s, n2s_prompt(vocab, ex), frames, DecodeMode::topk, settings.top_k,
                            Rng(settings.seed).derive("n2s").derive(ex.id));
    }
    if (settings.decode == DecodeMode::greedy)
        return generate(s2s, s2s_prompt(vocab, ex, semantic), t_len, DecodeMode::greedy);
    return generate(s2s, s2s_prompt(vocab, ex, semantic), t_len, DecodeMode::topk, settings.top_k,
                    Rng(settings.seed).derive("s2s").derive(ex.id));
}

std::vector<std::vector<int>> enhance_batch(const LMParams& n2s, const LMParams& s2s,
                                            const std::vector<const CorpusExample*>& examples,
                                            const VocabLayout& vocab,
                                            const EvalSettings& settings) {
    if (examples.empty()) return {};
    if (settings.decode != DecodeMode::greedy) {
        std::vector<std::vector<int>> out(examples.size());
        parallel_for(static_cast<int>(examples.size()), settings.threads, [&](int i) {
            out[i] = enhance(n2s, s2s, *examples[i], vocab, settings);
        });
        return out;
    }

    const int frames = static_cast<int>(examples[0]->clean_semantic.size());
    const int t_len = static_cast<int>(examples[0]->clean_acoustic.size());
    for (const auto* ex : examples)
        if (static_cast<int>(ex->clean_semantic.size()) != frames ||
            static_cast<int>(ex->clean_acoustic.size()) != t_len)
            throw std::invalid_argument("enhance_batch: examples disagree on frame counts");

    std::vector<std::vector<int>> out(examples.size());
    const int chunk = std::max(1, settings.generation_batch);
    for (std::size_t lo = 0; lo < examples.size(); lo += chunk) {
        const std::size_t hi = std::min(examples.size(), lo + chunk);
        std::vector<PromptChain> prompts;
        prompts.reserve(hi - lo);

        std::vector<std::vector<int>> semantics(hi - lo);
        if (settings.use_ground_truth_semantic) {
            for (std::size_t i = lo; i < hi; ++i) semantics[i - lo] = examples[i]->clean_semantic;
        } else {
            for (std::size_t i = lo; i < hi; ++i) prompts.push_back(n2s_prompt(vocab, *examples[i]));
            semantics = generate_batch_greedy(n2s, prompts, frames);
            prompts.clear();
        }
        for (std::size_t i = lo; i < hi; ++i)
            prompts.push_back(s2s_prompt(vocab, *examples[i], semantics[i - lo]));
        auto acoustics = generate_batch_greedy(s2s, prompts, t_len);
        for (std::size_t i = lo; i < hi; ++i) out[i] = std::move(acoustics[i - lo]);
    }
    return out;
}

double token_accuracy(std::span<const int> predicted, std::span<const int> reference) {
    if (predicted.size() != reference.size())
        throw std::invalid_argument("token_accuracy: length mismatch, " +
                                    std::to_string(predicted.size()) + " vs " +
                                    std::to_string(reference.size()));
    if (predicted.empty()) throw std::invalid_argument("token_accuracy: empty sequences");
    int hits = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == reference[i];
    return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

double hist_cosine(std::span<const int> predicted, std::span<const int> reference,
                   const VocabLayout& vocab) {
    if (predicted.empty() || reference.empty())
        throw std::invalid_argument("hist_cosine: empty input");
    std::vector<double> ha(vocab.n_acoustic, 0.0), hb(vocab.n_acoustic, 0.0);
    for (int id : predicted)
        if (vocab.is_acoustic(id)) ha[id - vocab.acoustic_begin()] += 1.0;
    for (int id : reference)
        if (vocab.is_acoustic(id)) hb[id - vocab.acoustic_begin()] += 1.0;
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int i = 0; i < vocab.n_acoustic; ++i) {
        dot += ha[i] * hb[i];
        na += ha[i] * ha[i];
        nb += hb[i] * hb[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

PartitionMetrics partition_metrics(const std::vector<CorpusExample>& partition,
                                   const std::vector<std::vector<int>>& outputs,
                                   const JudgeModel& judge_a, const JudgeModel& judge_b,
                                   const VocabLayout& vocab) {
    PartitionMetrics m;
    m.n_examples = static_cast<int>(partition.size());
    for (std::size_t i = 0; i < partition.size(); ++i) {
        m.judge_a += judge_a.score(outputs[i]);
        m.judge_b += judge_b.score(outputs[i]);
        m.token_accuracy += token_accuracy(outputs[i], partition[i].clean_acoustic);
        m.hist_cosine += hist_cosine(outputs[i], partition[i].clean_acoustic, vocab);
    }
    m.judge_a /= m.n_examples;
    m.judge_b /= m.n_examples;
    m.token_accuracy /= m.n_examples;
    m.hist_cosine /= m.n_examples;
    return m;
}

void check_eval_inputs(const Corpus& corpus, const JudgeModel& judge_a, const JudgeModel& judge_b) {
    if (corpus.test_noreverb.empty() || corpus.test_reverb.empty())
        throw std::invalid_argument("evaluate: both test partitions must be present, have " +
                                    std::to_string(corpus.test_noreverb.size()) + " no-reverb and " +
                                    std::to_string(corpus.test_reverb.size()) + " reverb examples");
    if (!judge_a.calibrated() || !judge_b.calibrated())
        throw std::invalid_argument("evaluate: judges must be calibrated");
}

json metrics_to_json(const PartitionMetrics& m) {
    return json{{"judge_a", m.judge_a},
                {"judge_b", m.judge_b},
                {"token_accuracy", m.token_accuracy},
                {"hist_cosine", m.hist_cosine},
                {"n_examples", m.n_examples}};
}

PartitionMetrics metrics_from_json(const json& j) {
    PartitionMetrics m;
    m.judge_a = j.at("judge_a").get<double>();
    m.judge_b = j.at("judge_b").get<double>();
    m.token_accuracy = j.at("token_accuracy").get<double>();
    m.hist_cosine = j.at("hist_cosine").get<double>();
    m.n_examples = j.at("n_examples").get<int>();
    return m;
}

}  // namespace

EvalReport evaluate(const std::string& system_name, const LMParams& n2s, const LMParams& s2s,
                    const Corpus& corpus, const VocabLayout& vocab, const JudgeModel& judge_a,
                    const JudgeModel& judge_b, const EvalSettings& settings,
                    std::uint64_t config_hash) {
    check_eval_inputs(corpus, judge_a, judge_b);
    vocab.validate();
    if (vocab.total() != s2s.config.vocab_size || vocab.total() != n2s.config.vocab_size)
        throw std::invalid_argument("evaluate: vocabulary layout of " +
                                    std::to_string(vocab.total()) +
                                    " ids does not match the model checkpoints");
    EvalReport report;
    report.system = system_name;
    report.corpus_hash = corpus_content_hash(corpus);
    report.judge_a_hash = judge_a.content_hash();
    report.judge_b_hash = judge_b.content_hash();
    report.checkpoint_hash = params_content_hash(n2s) ^ (params_content_hash(s2s) * 0x9e3779b9ull);
    report.config_hash = config_hash;

    for (const auto* partition : {&corpus.test_noreverb, &corpus.test_reverb}) {
        std::vector<const CorpusExample*> views;
        views.reserve(partition->size());
        for (const auto& ex : *partition) views.push_back(&ex);
        auto outputs = enhance_batch(n2s, s2s, views, vocab, settings);
        PartitionMetrics m = partition_metrics(*partition, outputs, judge_a, judge_b, vocab);
        (partition == &corpus.test_noreverb ? report.no_reverb : report.reverb) = m;
    }
    return report;
}

EvalReport evaluate_noisy_passthrough(const Corpus& corpus, const VocabLayout& vocab,
                                      const JudgeModel& judge_a, const JudgeModel& judge_b,
                                      std::uint64_t config_hash) {
    check_eval_inputs(corpus, judge_a, judge_b);
    vocab.validate();
    EvalReport report;
    report.system = "noisy";
    report.corpus_hash = corpus_content_hash(corpus);
    report.judge_a_hash = judge_a.content_hash();
    report.judge_b_hash = judge_b.content_hash();
    report.config_hash = config_hash;
    for (const auto* partition : {&corpus.test_noreverb, &corpus.test_reverb}) {
        std::vector<std::vector<int>> outputs;
        outputs.reserve(partition->size());
        for (const auto& ex : *partition) outputs.push_back(ex.noisy_acoustic);
        PartitionMetrics m = partition_metrics(*partition, outputs, judge_a, judge_b, vocab);
        (partition == &corpus.test_noreverb ? report.no_reverb : report.reverb) = m;
    }
    return report;
}

// ---- report I/O ----

std::string EvalReport::to_json_string() const {
    json j;
    j["system"] = system;
    j["no_reverb"] = metrics_to_json(no_reverb);
    j["reverb"] = metrics_to_json(reverb);
    j["corpus_hash"] = corpus_hash;
    j["judge_a_hash"] = judge_a_hash;
    j["judge_b_hash"] = judge_b_hash;
    j["checkpoint_hash"] = checkpoint_hash;
    j["config_hash"] = config_hash;
    return j.dump(2);
}

EvalReport EvalReport::from_json_string(const std::string& text) {
    json j = json::parse(text);
    EvalReport r;
    r.system = j.at("system").get<std::string>();
    r.no_reverb = metrics_from_json(j.at("no_reverb"));
    r.reverb = metrics_from_json(j.at("reverb"));
    r.corpus_hash = j.at("corpus_hash").get<std::uint64_t>();
    r.judge_a_hash = j.at("judge_a_hash").get<std::uint64_t>();
    r.judge_b_hash = j.at("judge_b_hash").get<std::uint64_t>();
    r.checkpoint_hash = j.at("checkpoint_hash").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::uint64_t>();
    return r;
}

void EvalReport::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << to_json_string() << '\n';
    if (!out) throw std::runtime_error("write failed: " + path);
}

EvalReport EvalReport::load(const std::string& path) {
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

namespace {

void check_comparable(const std::vector<EvalReport>& reports) {
    for (std::size_t i = 1; i < reports.size(); ++i) {
        if (reports[i].corpus_hash != reports[0].corpus_hash)
            throw std::runtime_error("report: corpus hash of '" + reports[i].system +
                                     "' differs from '" + reports[0].system +
                                     "'; systems were not evaluated on the same data");
        if (reports[i].judge_a_hash != reports[0].judge_a_hash ||
            reports[i].judge_b_hash != reports[0].judge_b_hash)
            throw std::runtime_error("report: judge hashes of '" + reports[i].system +
                                     "' differ from '" + reports[0].system + "'");
    }
}

}  // namespace

std::string render_report_table(const std::vector<EvalReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("render_report_table: no reports");
    check_comparable(reports);
    std::ostringstream os;
    os << "| System | judge-A (no-rev) | judge-B (no-rev) | tok-acc (no-rev) | hist-cos (no-rev) "
          "| judge-A (rev) | judge-B (rev) | tok-acc (rev) | hist-cos (rev) |\n";
    os << "|---|---|---|---|---|---|---|---|---|\n";
    char buf[64];
    auto cell = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.4f", v);
        return std::string(buf);
    };
    for (const auto& r : reports) {
        os << "| " << r.system << " | " << cell(r.no_reverb.judge_a) << " | "
           << cell(r.no_reverb.judge_b) << " | " << cell(r.no_reverb.token_accuracy) << " | "
           << cell(r.no_reverb.hist_cosine) << " | " << cell(r.reverb.judge_a) << " | "
           << cell(r.reverb.judge_b) << " | " << cell(r.reverb.token_accuracy) << " | "
           << cell(r.reverb.hist_cosine) << " |\n";
    }
    return os.str();
}

void write_report_csv(const std::vector<EvalReport>& reports, const std::string& path) {
    if (reports.empty()) throw std::invalid_argument("write_report_csv: no reports");
    check_comparable(reports);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "system,partition,judge_a,judge_b,token_accuracy,hist_cosine,n_examples\n";
    char buf[256];
    for (const auto& r : reports) {
        const std::pair<const char*, const PartitionMetrics*> parts[] = {
            {"no_reverb", &r.no_reverb}, {"reverb", &r.reverb}};
        for (const auto& [name, m] : parts) {
            std::snprintf(buf, sizeof(buf), "%s,%s,%.17g,%.17g,%.17g,%.17g,%d\n", r.system.c_str(),
                          name, m->judge_a, m->judge_b, m->token_accuracy, m->hist_cosine,
                          m->n_examples);
            out << buf;
        }
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace prefopt
