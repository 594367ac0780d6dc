#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "prefopt/judge.hpp"

using namespace prefopt;

namespace {

World test_world(std::uint64_t seed = 11) { return build_world(32, 64, 2, 8, Rng(seed)); }

std::vector<CorpusExample> train_split(const World& w, int n, std::uint64_t seed = 22) {
    DatasetConfig cfg;
    cfg.n_train = n;
    cfg.n_test_per_partition = 1;
    cfg.frames = 16;
    cfg.seed = seed;
    return make_dataset(w, cfg).train;
}

std::vector<std::vector<int>> corrupted_acoustics(const World& w,
                                                  const std::vector<CorpusExample>& split,
                                                  double p_noise, std::uint64_t seed) {
    std::vector<std::vector<int>> out;
    Rng root(seed);
    CorruptionConfig cfg;
    cfg.p_noise = p_noise;
    for (std::size_t i = 0; i < split.size(); ++i) {
        Rng child = root.derive(i);
        auto [sbar, abar] =
            corrupt(w, split[i].clean_semantic, split[i].clean_acoustic, cfg, child);
        out.push_back(std::move(abar));
    }
    return out;
}

}  // namespace

TEST_CASE("repeated token with vanishing smoothing concentrates the conditional") {
    const int a = 40;  // some acoustic id
    JudgeModel m = JudgeModel::fit({{a, a, a}}, 2, 1e-9, 32, 64);
    CHECK(m.conditional({a}, a) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("unseen contexts fall back to the uniform distribution") {
    JudgeModel m = JudgeModel::fit({{40, 41, 42}}, 2, 0.5, 32, 64);
    CHECK(m.conditional({55}, 60) == doctest::Approx(1.0 / 64).epsilon(1e-12));
}

TEST_CASE("conditionals over the acoustic band sum to one for observed contexts") {
    World w = test_world();
    auto train = train_split(w, 50);
    std::vector<std::vector<int>> clean;
    for (const auto& ex : train) clean.push_back(ex.clean_acoustic);
    JudgeModel m = JudgeModel::fit(clean, 3, 0.1, w.vocab().acoustic_begin(), w.n_acoustic);

    const std::vector<int>& seq = train[0].clean_acoustic;
    for (int pos : {2, 7, 15}) {
        std::vector<int> ctx{seq[pos - 2], seq[pos - 1]};
        double total = 0.0;
        for (int id = w.vocab().acoustic_begin(); id < w.vocab().acoustic_begin() + w.n_acoustic; ++id)
            total += m.conditional(ctx, id);
        CHECK(std::abs(total - 1.0) < 1e-12);
    }
}

TEST_CASE("fit rejects bad arguments") {
    CHECK_THROWS_AS(JudgeModel::fit({}, 2, 0.1, 32, 64), std::invalid_argument);
    CHECK_THROWS_AS(JudgeModel::fit({{40}}, 0, 0.1, 32, 64), std::invalid_argument);
    CHECK_THROWS_AS(JudgeModel::fit({{40}}, 2, 0.0, 32, 64), std::invalid_argument);
}

TEST_CASE("calibration anchors map the medians to 4.5 and 1.5") {
    World w = test_world();
    auto train = train_split(w, 300);
    JudgeSettings settings;
    settings.order = 3;
    settings.alpha = 0.1;
    settings.calibration_seed = 33;
    JudgeModel judge = fit_and_calibrate_judge(w, train, settings, 250, 0.5);
    CHECK(judge.calibrated());
    CHECK(judge.slope() > 0.0);

    std::vector<double> clean_ll, corr_ll;
    auto corrupted = corrupted_acoustics(w, {train.begin(), train.begin() + 250}, 0.5, 33);
    for (int i = 0; i < 250; ++i) {
        clean_ll.push_back(judge.mean_loglik(train[i].clean_acoustic));
        corr_ll.push_back(judge.mean_loglik(corrupted[i]));
    }
    std::sort(clean_ll.begin(), clean_ll.end());
    std::sort(corr_ll.begin(), corr_ll.end());
    const double med_clean = clean_ll[125];  // even count: average of middle two
    const double med_clean2 = 0.5 * (clean_ll[124] + clean_ll[125]);
    (void)med_clean;
    const double med_corr2 = 0.5 * (corr_ll[124] + corr_ll[125]);
    CHECK(std::abs(judge.score_from_loglik(med_clean2) - 4.5) < 1e-9);
    CHECK(std::abs(judge.score_from_loglik(med_corr2) - 1.5) < 1e-9);
}

TEST_CASE("calibration preconditions are enforced") {
    World w = test_world();
    auto train = train_split(w, 300);
    std::vector<std::vector<int>> clean;
    for (const auto& ex : train) clean.push_back(ex.clean_acoustic);
    JudgeModel m = JudgeModel::fit(clean, 2, 0.1, w.vocab().acoustic_begin(), w.n_acoustic);

    std::vector<std::vector<int>> few(clean.begin(), clean.begin() + 50);
    CHECK_THROWS_AS(m.calibrate(few, few), std::invalid_argument);

    std::vector<std::vector<int>> sample(clean.begin(), clean.begin() + 200);
    CHECK_THROWS_WITH_AS(m.calibrate(sample, sample), doctest::Contains("degenerate"),
                         std::invalid_argument);

    CHECK_THROWS_AS(m.score({40, 41, 42}), std::logic_error);  // not calibrated yet
}

TEST_CASE("scores stay in range, are deterministic, and degrade with noise") {
    World w = test_world();
    auto train = train_split(w, 400);
    JudgeSettings a_settings{3, 0.1, 33};
    JudgeSettings b_settings{2, 0.5, 44};
    JudgeModel judge_a = fit_and_calibrate_judge(w, train, a_settings, 250, 0.5);
    JudgeModel judge_b = fit_and_calibrate_judge(w, train, b_settings, 250, 0.5);

    for (const auto& judge : {judge_a, judge_b}) {
        const double s1 = judge.score(train[7].clean_acoustic);
        CHECK(s1 >= 1.0);
        CHECK(s1 <= 5.0);
        CHECK(judge.score(train[7].clean_acoustic) == s1);
    }
    CHECK_THROWS_AS(judge_a.score({40, 41}), std::invalid_argument);  // shorter than order

    // Monotone degradation across noise levels, both judges.
    std::vector<CorpusExample> eval(train.begin() + 150, train.begin() + 400);
    for (const auto& judge : {judge_a, judge_b}) {
        double previous = 1e9;
        for (double p_noise : {0.0, 0.1, 0.25, 0.5}) {
            auto seqs = corrupted_acoustics(w, eval, p_noise, 777);
            double mean = 0.0;
            for (const auto& s : seqs) mean += judge.score(s);
            mean /= static_cast<double>(seqs.size());
            CHECK(mean < previous);
            previous = mean;
        }
    }

    // Paired comparison: clean beats its own corruption almost always.
    auto noisy = corrupted_acoustics(w, eval, 0.3, 555);
    int wins = 0;
    for (std::size_t i = 0; i < eval.size(); ++i)
        wins += judge_a.score(eval[i].clean_acoustic) > judge_a.score(noisy[i]);
    CHECK(static_cast<double>(wins) / eval.size() >= 0.95);

    // The held-out judge is not a rank copy of the ranking judge.
    Rng pair_rng(91);
    int agreements = 0, pairs = 0;
    auto pool = corrupted_acoustics(w, eval, 0.15, 321);
    for (int i = 0; i < 500; ++i) {
        const auto& x = pool[pair_rng.next_below(pool.size())];
        const auto& y = pool[pair_rng.next_below(pool.size())];
        const double ax = judge_a.score(x), ay = judge_a.score(y);
        const double bx = judge_b.score(x), by = judge_b.score(y);
        if (ax == ay || bx == by) continue;
        ++pairs;
        agreements += (ax > ay) == (bx > by);
    }
    CHECK(pairs > 100);
    CHECK(agreements < pairs);
}

TEST_CASE("judge persistence round trips exactly") {
    World w = test_world();
    auto train = train_split(w, 250);
    JudgeModel judge = fit_and_calibrate_judge(w, train, JudgeSettings{3, 0.1, 33}, 200, 0.5);

    const auto tmp = std::filesystem::temp_directory_path() / "prefopt_judge_test.json";
    judge.save(tmp.string());
    JudgeModel loaded = JudgeModel::load(tmp.string());
    std::filesystem::remove(tmp);

    CHECK(loaded.content_hash() == judge.content_hash());
    for (const auto& ex : {train[3], train[99]})
        CHECK(loaded.score(ex.clean_acoustic) == judge.score(ex.clean_acoustic));

    CHECK_THROWS_WITH_AS(JudgeModel::load("/nonexistent/judge.json"),
                         doctest::Contains("/nonexistent"), std::runtime_error);
}

TEST_CASE("off-band ids score through the smoothed floor") {
    World w = test_world();
    auto train = train_split(w, 250);
    JudgeModel judge = fit_and_calibrate_judge(w, train, JudgeSettings{3, 0.1, 33}, 200, 0.5);

    std::vector<int> weird = train[0].clean_acoustic;
    weird[4] = 2;   // semantic id inside an acoustic sequence
    weird[9] = 99;  // separator id
    const double s = judge.score(weird);
    CHECK(s >= 1.0);
    CHECK(s <= 5.0);
    CHECK(s < judge.score(train[0].clean_acoustic));
}
