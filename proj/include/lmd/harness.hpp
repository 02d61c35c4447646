#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lmd/datagen.hpp"
#include "lmd/icc.hpp"
#include "lmd/metrics.hpp"
#include "lmd/model.hpp"
#include "lmd/rrl.hpp"

namespace lmd {

// One experiment description: data source, both stage configs, and the
// ablation/baseline switch. Ablations and baselines are mutually exclusive.
struct RunConfig {
    std::string data_path;            // empty -> synthesize from `gen`
    LongTailSpec gen;
    std::array<double, 3> split_ratios{0.7, 0.1, 0.2};
    std::uint64_t split_seed = 7;
    std::vector<std::size_t> hidden{64};
    std::size_t feature_dim = 32;
    Stage1Config stage1;
    IccConfig stage2;
    std::vector<std::string> ablations; // subset of {no_rrl,no_icc,no_vfc,no_fdc}
    std::string baseline;               // "", "ce", "rs", "decoupling"
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::string out_dir;
    std::string groups_file;            // optional explicit group assignment

    void validate() const;
    bool has_ablation(const std::string& name) const;
};

// Flat key=value config text. Unknown keys are errors; `#` starts a comment.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
// Canonical serialization: fixed key order, every field present.
std::string serialize_config(const RunConfig& cfg);
// FNV-1a over the canonical serialization.
std::string config_hash(const RunConfig& cfg);
// Hash with the ablation/baseline switch masked out; equal across the
// rows of an ablation matrix by construction.
std::string shared_config_hash(const RunConfig& cfg);

// ============================================================
// Checkpoints: "LMDC" | u32 version | u32 manifest_len | manifest JSON |
// f64-LE blob | u32 crc32 over everything preceding.
// ============================================================

struct CheckpointMeta {
    std::string stage;
    std::uint64_t seed = 0;
    std::string config_hash;
};

void save_checkpoint(const ModelState& state, const std::string& path,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
    ModelState state;
    CheckpointMeta meta;
};
LoadedCheckpoint load_checkpoint(const std::string& path);
// Additionally validates tensor shapes against `expected`, naming the
// first offending tensor.
LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig& expected);

// ============================================================
// Evaluation and reporting
// ============================================================

MetricsReport evaluate_model(const ModelState& state, const Dataset& eval_ds,
                             const GroupSpec& groups, std::uint64_t seed,
                             const std::string& cfg_hash);

struct AggregateStat {
    double mean = 0.0;
    double std_dev = 0.0;
};

struct AggregateReport {
    AggregateStat auc, bacc, f1, kappa, precision, recall;
    AggregateStat head, medium, tail;
    int n_seeds = 0;
};

AggregateReport aggregate_reports(const std::vector<MetricsReport>& reports);
std::string aggregate_to_json(const AggregateReport& agg);

// Encoder outputs + labels as CSV (z0..z{C-1},label) for external plotting.
void export_features(const ModelState& state, const Dataset& ds,
                     const std::string& path);

// ============================================================
// Pipelines
// ============================================================

// Per-run derivations shared by the pipeline and the CLI subcommands, so
// a stage run from the command line reproduces the pipeline bit for bit.
// Splits are stratified per the config ratios, then standardized with
// statistics fitted on the raw training split.
struct PreparedData {
    SplitResult parts;
    Standardizer norm;
};
PreparedData prepare_data(const RunConfig& cfg, const Dataset& ds, std::uint64_t seed);
ModelConfig arch_for(const RunConfig& cfg, const Dataset& ds);
Stage1Config stage1_for_run(const RunConfig& cfg, std::uint64_t seed);
IccConfig stage2_for_run(const RunConfig& cfg, std::uint64_t seed);

struct SeedRunResult {
    std::uint64_t seed = 0;
    MetricsReport report;
    Stage1Trace stage1_trace;
    IccTrace icc_trace; // empty when stage 2 was skipped
    ModelState final_state;
};

struct PipelineResult {
    std::vector<SeedRunResult> runs;
    AggregateReport aggregate;
};

// One seed end to end: data -> stage 1 -> stage 2 -> test report.
SeedRunResult run_seed(const RunConfig& cfg, std::uint64_t seed);

// All seeds (parallel up to LMD_THREADS), reports + checkpoints + traces
// under cfg.out_dir when set, plus the aggregate and a run manifest.
PipelineResult run_pipeline(const RunConfig& cfg);

// Kang-style comparator: CE-only stage 1, then a class-balanced classifier
// retrain on frozen real features (no VFC, no EM).
SeedRunResult run_baseline_decoupling(const RunConfig& cfg, std::uint64_t seed);

struct AblationRow {
    std::string name;
    AggregateReport aggregate;
    std::string full_hash;
    std::string shared_hash;
};

// {full, no_rrl, no_icc, no_vfc, no_fdc, ce, rs, decoupling} over shared
// seeds and data; writes JSON and an aligned text table under out_dir.
std::vector<AblationRow> ablation_matrix(const RunConfig& cfg,
                                         const std::vector<std::string>& rows = {});

std::string ablation_table_json(const std::vector<AblationRow>& rows);
std::string ablation_table_text(const std::vector<AblationRow>& rows);

// Stage-1 / stage-2 trace serialization for run outputs.
std::string stage1_trace_to_json(const Stage1Trace& trace);
std::string icc_trace_to_json(const IccTrace& trace);

} // namespace lmd
