#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prefopt/corpus.hpp"
#include "prefopt/dpo.hpp"
#include "prefopt/eval.hpp"
#include "prefopt/judge.hpp"
#include "prefopt/training.hpp"

namespace prefopt {

struct WorldSettings {
    int n_semantic = 32;
    int n_acoustic = 64;
    int n_noise_ids = 8;
    int expansion_len = 2;
    double jitter = 0.1;
    std::uint64_t seed = 0;
};

struct JudgesSettings {
    JudgeSettings judge_a{3, 0.1, 0};
    JudgeSettings judge_b{2, 0.5, 0};
    int n_calibration = 400;
    double corrupt_p_noise = 0.5;
};

struct ModelTrainSettings {
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq_len = 256;
    TrainConfig train;

    LMConfig lm_config(const VocabLayout& vocab) const;
};

struct AblationArmSettings {
    std::string name;
    DpoLossMode loss_mode = DpoLossMode::ce_dpo;
    int z_pairs = 1;
    bool gt_as_preferred = false;
};

/// One JSON file with sections {world, corpus, judges, n2s, s2s, dpo, eval}
/// plus the ablation grid. Parsing reports missing or ill-typed fields by
/// their dotted path.
struct PipelineConfig {
    int threads = 0;
    WorldSettings world;
    DatasetConfig corpus;
    JudgesSettings judges;
    ModelTrainSettings n2s;
    ModelTrainSettings s2s;
    DpoConfig dpo;
    EvalSettings eval;
    std::vector<AblationArmSettings> ablation;
    std::uint64_t config_hash = 0;  // over the file bytes and any seed override

    static PipelineConfig load(const std::string& path);

    /// Re-derives every stage seed from one master seed; stage labels keep the
    /// streams apart. Leaves everything else untouched.
    void apply_master_seed(std::uint64_t master);
};

DpoLossMode parse_loss_mode(const std::string& text);
std::string loss_mode_name(DpoLossMode mode);

}  // namespace prefopt
