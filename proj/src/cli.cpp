#include "prefopt/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "prefopt/config.hpp"
#include "prefopt/dpo.hpp"
#include "prefopt/eval.hpp"
#include "prefopt/parallel.hpp"

namespace prefopt {

namespace {

struct Paths {
    std::string root;

    std::string world() const { return root + "/world.json"; }
    std::string corpus_dir() const { return root + "/corpus"; }
    std::string judges_dir() const { return root + "/judges"; }
    std::string judge_a() const { return judges_dir() + "/judge_a.json"; }
    std::string judge_b() const { return judges_dir() + "/judge_b.json"; }
    std::string ckpt_dir(const std::string& kind) const { return root + "/checkpoints/" + kind; }
    std::string loss_curve(const std::string& kind) const {
        return root + "/checkpoints/" + kind + "_loss.csv";
    }
    std::string dpo_dir(const std::string& arm) const { return root + "/dpo/" + arm; }
    std::string dpo_ckpt(const std::string& arm) const { return dpo_dir(arm) + "/checkpoint"; }
    std::string dpo_trace(const std::string& arm) const { return dpo_dir(arm) + "/trace.csv"; }
    std::string eval_dir() const { return root + "/eval"; }
    std::string eval_report(const std::string& system) const {
        return eval_dir() + "/" + system + ".json";
    }
    std::string ablation_dir() const { return root + "/ablation"; }
    std::string report_dir() const { return root + "/report"; }
};

struct Ctx {
    PipelineConfig cfg;
    Paths paths;
};

void ensure_dir(const std::string& dir) { std::filesystem::create_directories(dir); }

World load_world_artifact(const Ctx& ctx) { return load_world(ctx.paths.world()); }

Corpus load_corpus_artifact(const Ctx& ctx) { return load_corpus(ctx.paths.corpus_dir()); }

LMParams load_model(const Ctx& ctx, const std::string& dir, const VocabLayout& vocab,
                    const ModelTrainSettings& settings) {
    return load_checkpoint(dir, lm_config_hash(settings.lm_config(vocab))).params;
}

int cmd_gen_world(const Ctx& ctx) {
    const auto& w = ctx.cfg.world;
    World world = build_world(w.n_semantic, w.n_acoustic, w.expansion_len, w.n_noise_ids,
                              Rng(w.seed), w.jitter);
    ensure_dir(ctx.paths.root);
    save_world(world, ctx.paths.world());
    std::cout << "world: " << w.n_semantic << " semantic + " << w.n_acoustic << " acoustic ids ("
              << w.n_noise_ids << " noise) -> " << ctx.paths.world() << "\n";
    return 0;
}

int cmd_gen_data(const Ctx& ctx) {
    World world = load_world_artifact(ctx);
    Corpus corpus = make_dataset(world, ctx.cfg.corpus);
    save_corpus(corpus, ctx.paths.corpus_dir());
    std::cout << "corpus: " << corpus.train.size() << " train, " << corpus.test_noreverb.size()
              << " + " << corpus.test_reverb.size() << " test examples -> "
              << ctx.paths.corpus_dir() << " (hash " << corpus_content_hash(corpus) << ")\n";
    return 0;
}

int cmd_fit_judges(const Ctx& ctx) {
    World world = load_world_artifact(ctx);
    Corpus corpus = load_corpus_artifact(ctx);
    const auto& js = ctx.cfg.judges;
    JudgeModel judge_a = fit_and_calibrate_judge(world, corpus.train, js.judge_a, js.n_calibration,
                                                 js.corrupt_p_noise);
    JudgeModel judge_b = fit_and_calibrate_judge(world, corpus.train, js.judge_b, js.n_calibration,
                                                 js.corrupt_p_noise);
    ensure_dir(ctx.paths.judges_dir());
    judge_a.save(ctx.paths.judge_a());
    judge_b.save(ctx.paths.judge_b());
    std::cout << "judges: A(order " << js.judge_a.order << ") hash " << judge_a.content_hash()
              << ", B(order " << js.judge_b.order << ") hash " << judge_b.content_hash() << " -> "
              << ctx.paths.judges_dir() << "\n";
    return 0;
}

int cmd_pretrain(const Ctx& ctx, ModelKind kind, const std::string& resume) {
    World world = load_world_artifact(ctx);
    Corpus corpus = load_corpus_artifact(ctx);
    const ModelTrainSettings& settings = kind == ModelKind::s2s ? ctx.cfg.s2s : ctx.cfg.n2s;
    const std::string kind_name = kind == ModelKind::s2s ? "s2s" : "n2s";
    const VocabLayout vocab = world.vocab();
    const LMConfig model_cfg = settings.lm_config(vocab);

    PretrainResult result = pretrain(kind, vocab, corpus.train, model_cfg, settings.train, resume,
                                     ctx.paths.ckpt_dir(kind_name) + "_abort");
    ensure_dir(ctx.paths.ckpt_dir(kind_name));
    save_checkpoint(ctx.paths.ckpt_dir(kind_name), result.params, &result.opt,
                    CheckpointMeta{kind_name, settings.train.steps, settings.train.train_seed,
                                   lm_config_hash(model_cfg), vocab});
    write_loss_curve(result.curve, ctx.paths.loss_curve(kind_name));
    const auto& back = result.curve.back();
    std::cout << kind_name << ": " << settings.train.steps << " steps, final batch CE "
              << back.loss << " -> " << ctx.paths.ckpt_dir(kind_name) << "\n";
    return 0;
}

DpoConfig arm_config(const Ctx& ctx, DpoLossMode mode, int z_pairs, bool gt_as_preferred) {
    DpoConfig cfg = ctx.cfg.dpo;
    cfg.loss_mode = mode;
    cfg.z_pairs = z_pairs;
    cfg.gt_as_preferred = gt_as_preferred;
    return cfg;
}

int run_finetune_arm(const Ctx& ctx, const std::string& name, const DpoConfig& dpo_cfg) {
    World world = load_world_artifact(ctx);
    Corpus corpus = load_corpus_artifact(ctx);
    JudgeModel judge_a = JudgeModel::load(ctx.paths.judge_a());
    const VocabLayout vocab = world.vocab();
    LMParams ref = load_model(ctx, ctx.paths.ckpt_dir("s2s"), vocab, ctx.cfg.s2s);

    FinetuneResult result = finetune(ref, corpus.train, vocab, judge_a, dpo_cfg,
                                     ctx.paths.dpo_dir(name) + "/abort");
    ensure_dir(ctx.paths.dpo_ckpt(name));
    save_checkpoint(ctx.paths.dpo_ckpt(name), result.params, nullptr,
                    CheckpointMeta{"s2s-dpo:" + name, dpo_cfg.steps, dpo_cfg.seed,
                                   lm_config_hash(result.params.config), vocab});
    write_finetune_trace(result.trace, ctx.paths.dpo_trace(name));
    const auto& last = result.trace.back().stats;
    std::cout << "dpo-finetune '" << name << "' (" << loss_mode_name(dpo_cfg.loss_mode)
              << ", Z=" << dpo_cfg.z_pairs << (dpo_cfg.gt_as_preferred ? ", gt-preferred" : "")
              << "): " << dpo_cfg.steps << " steps, final dpo " << last.dpo_loss << ", ce "
              << last.ce_loss << ", margin " << last.mean_margin << " -> "
              << ctx.paths.dpo_dir(name) << "\n";
    return 0;
}

int cmd_evaluate(const Ctx& ctx, const std::string& system, std::string s2s_ckpt,
                 bool use_gt_semantic) {
    World world = load_world_artifact(ctx);
    Corpus corpus = load_corpus_artifact(ctx);
    JudgeModel judge_a = JudgeModel::load(ctx.paths.judge_a());
    JudgeModel judge_b = JudgeModel::load(ctx.paths.judge_b());
    const VocabLayout vocab = world.vocab();

    EvalReport report;
    if (system == "noisy") {
        report = evaluate_noisy_passthrough(corpus, vocab, judge_a, judge_b, ctx.cfg.config_hash);
    } else {
        if (s2s_ckpt.empty()) s2s_ckpt = ctx.paths.ckpt_dir("s2s");
        LMParams n2s = load_model(ctx, ctx.paths.ckpt_dir("n2s"), vocab, ctx.cfg.n2s);
        LMParams s2s = load_model(ctx, s2s_ckpt, vocab, ctx.cfg.s2s);
        EvalSettings settings = ctx.cfg.eval;
        settings.use_ground_truth_semantic =
            settings.use_ground_truth_semantic || use_gt_semantic;
        report = evaluate(system, n2s, s2s, corpus, vocab, judge_a, judge_b, settings,
                          ctx.cfg.config_hash);
    }
    ensure_dir(ctx.paths.eval_dir());
    report.save(ctx.paths.eval_report(system));
    std::cout << render_report_table({report});
    return 0;
}

int cmd_ablate(const Ctx& ctx) {
    if (ctx.cfg.ablation.empty()) {
        std::cerr << "ablate: no arms configured\n";
        return 1;
    }
    const std::string baseline_path = ctx.paths.eval_report("baseline");
    if (!std::filesystem::exists(baseline_path))
        throw std::runtime_error("ablate: missing baseline report " + baseline_path +
                                 "; run `prefopt evaluate` first");
    EvalReport baseline = EvalReport::load(baseline_path);

    std::vector<EvalReport> arm_reports;
    for (const auto& arm : ctx.cfg.ablation) {
        run_finetune_arm(ctx, arm.name, arm_config(ctx, arm.loss_mode, arm.z_pairs,
                                                   arm.gt_as_preferred));
        Ctx eval_ctx = ctx;
        cmd_evaluate(eval_ctx, arm.name, ctx.paths.dpo_ckpt(arm.name), false);
        arm_reports.push_back(EvalReport::load(ctx.paths.eval_report(arm.name)));
    }

    ensure_dir(ctx.paths.ablation_dir());
    std::vector<EvalReport> with_baseline{baseline};
    with_baseline.insert(with_baseline.end(), arm_reports.begin(), arm_reports.end());
    write_report_csv(arm_reports, ctx.paths.ablation_dir() + "/table.csv");

    std::ostringstream md;
    md << "# Preference-pair selection ablation\n\n";
    md << render_report_table(with_baseline) << "\n";
    md << "Judge-A gains over the baseline:\n\n";
    md << "| Arm | no-reverb gain | reverb gain |\n|---|---|---|\n";
    char buf[64];
    for (const auto& r : arm_reports) {
        std::snprintf(buf, sizeof(buf), "| %s | %+.4f | %+.4f |\n", r.system.c_str(),
                      r.no_reverb.judge_a - baseline.no_reverb.judge_a,
                      r.reverb.judge_a - baseline.reverb.judge_a);
        md << buf;
    }
    std::ofstream out(ctx.paths.ablation_dir() + "/table.md", std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + ctx.paths.ablation_dir() +
                                       "/table.md");
    out << md.str();
    std::cout << md.str();
    return 0;
}

int cmd_report(const Ctx& ctx) {
    if (!std::filesystem::is_directory(ctx.paths.eval_dir()))
        throw std::runtime_error("report: no evaluation reports under " + ctx.paths.eval_dir() +
                                 "; run `prefopt evaluate` first");
    std::vector<std::string> files;
    for (const auto& entry : std::filesystem::directory_iterator(ctx.paths.eval_dir()))
        if (entry.path().extension() == ".json") files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty())
        throw std::runtime_error("report: no evaluation reports under " + ctx.paths.eval_dir());

    std::vector<EvalReport> reports;
    reports.reserve(files.size());
    for (const auto& f : files) reports.push_back(EvalReport::load(f));
    const std::string table = render_report_table(reports);

    ensure_dir(ctx.paths.report_dir());
    std::ofstream out(ctx.paths.report_dir() + "/table.md", std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + ctx.paths.report_dir() +
                                       "/table.md");
    out << "# Evaluation summary\n\n" << table;
    const std::string ablation_md = ctx.paths.ablation_dir() + "/table.md";
    if (std::filesystem::exists(ablation_md)) {
        std::ifstream in(ablation_md, std::ios::binary);
        out << "\n" << in.rdbuf();
    }
    std::cout << table;
    std::cout << "report -> " << ctx.paths.report_dir() + "/table.md" << "\n";
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    keep_freed_buffers();
    CLI::App app{"Token-domain speech-enhancement laboratory: two-stage LM pipeline with "
                 "preference-optimised fine-tuning"};
    app.fallthrough();
    app.require_subcommand(1);

    std::string config_path = "configs/default.json";
    std::string out_dir = "out";
    std::uint64_t master_seed = 0;
    bool seed_given = false;
    app.add_option("--config", config_path, "pipeline configuration JSON")
        ->capture_default_str();
    app.add_option("--out", out_dir, "artifact output directory")->capture_default_str();
    auto* seed_opt = app.add_option("--seed", master_seed,
                                    "master seed; re-derives every stage seed (PREFOPT_SEED "
                                    "environment variable overrides this flag)");

    auto* gen_world = app.add_subcommand("gen-world", "synthesise the token world");
    auto* gen_data = app.add_subcommand("gen-data", "generate train/test corpora");
    auto* fit_judges = app.add_subcommand("fit-judges", "fit and calibrate both proxy judges");
    auto* pre_n2s = app.add_subcommand("pretrain-n2s", "cross-entropy pretrain the N2S model");
    auto* pre_s2s = app.add_subcommand("pretrain-s2s", "cross-entropy pretrain the S2S model");
    std::string resume_n2s, resume_s2s;
    pre_n2s->add_option("--resume", resume_n2s, "checkpoint directory to resume from");
    pre_s2s->add_option("--resume", resume_s2s, "checkpoint directory to resume from");

    auto* dpo_cmd = app.add_subcommand("dpo-finetune", "preference fine-tune from the S2S model");
    std::string arm_name = "dpo";
    std::string mode_text;
    int z_override = 0;
    bool gt_flag = false;
    dpo_cmd->add_option("--name", arm_name, "run name (artifact subdirectory)")
        ->capture_default_str();
    dpo_cmd->add_option("--mode", mode_text, "loss mode: ce | dpo | ce+dpo (default: config)");
    dpo_cmd->add_option("--z", z_override, "preference pairs per example (default: config)");
    dpo_cmd->add_flag("--gt-as-preferred", gt_flag,
                      "use the ground-truth sequence as the preferred sample");

    auto* eval_cmd = app.add_subcommand("evaluate", "two-stage inference and metrics");
    std::string system_name = "baseline";
    std::string s2s_ckpt;
    bool use_gt_semantic = false;
    eval_cmd->add_option("--system", system_name, "system label ('noisy' scores the inputs)")
        ->capture_default_str();
    eval_cmd->add_option("--s2s-checkpoint", s2s_ckpt,
                         "S2S checkpoint directory (default: the pretrained baseline)");
    eval_cmd->add_flag("--use-ground-truth-semantic", use_gt_semantic,
                       "bypass the N2S stage with ground-truth semantics");

    auto* ablate_cmd = app.add_subcommand("ablate", "run the configured preference-pair ablation");
    auto* report_cmd = app.add_subcommand("report", "collate evaluation reports into one table");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        Ctx ctx{PipelineConfig::load(config_path), Paths{out_dir}};
        if (const char* env = std::getenv("PREFOPT_SEED")) {
            ctx.cfg.apply_master_seed(std::strtoull(env, nullptr, 10));
        } else if (seed_opt->count() > 0 || seed_given) {
            ctx.cfg.apply_master_seed(master_seed);
        }

        if (*gen_world) return cmd_gen_world(ctx);
        if (*gen_data) return cmd_gen_data(ctx);
        if (*fit_judges) return cmd_fit_judges(ctx);
        if (*pre_n2s) return cmd_pretrain(ctx, ModelKind::n2s, resume_n2s);
        if (*pre_s2s) return cmd_pretrain(ctx, ModelKind::s2s, resume_s2s);
        if (*dpo_cmd) {
            DpoConfig cfg = ctx.cfg.dpo;
            if (!mode_text.empty()) cfg.loss_mode = parse_loss_mode(mode_text);
            if (z_override > 0) cfg.z_pairs = z_override;
            if (gt_flag) cfg.gt_as_preferred = true;
            return run_finetune_arm(ctx, arm_name, cfg);
        }
        if (*eval_cmd) return cmd_evaluate(ctx, system_name, s2s_ckpt, use_gt_semantic);
        if (*ablate_cmd) return cmd_ablate(ctx);
        if (*report_cmd) return cmd_report(ctx);
        std::cerr << "no command given\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace prefopt
