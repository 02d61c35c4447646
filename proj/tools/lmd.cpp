#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lmd/harness.hpp"

namespace {

namespace fs = std::filesystem;

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
};

lmd::RunConfig build_config(const Common& common) {
    lmd::RunConfig cfg;
    if (!common.config_path.empty()) cfg = lmd::parse_config_file(common.config_path);
    for (const auto& kv : common.overrides) {
        const std::size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw lmd::ValidationError("--set expects key=value, got '" + kv + "'");
        lmd::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

std::string checkpoint_path(const std::string& ckpt, const char* preferred) {
    if (!fs::is_directory(ckpt)) return ckpt;
    const std::string candidate = ckpt + "/" + preferred;
    if (fs::exists(candidate)) return candidate;
    return ckpt + "/checkpoint.lmdc";
}

int cmd_gen(const lmd::LongTailSpec& spec, const std::string& out) {
    const lmd::Dataset ds = lmd::synth_longtail(spec);
    lmd::save_dataset(ds, out);
    std::printf("wrote %zu samples, %d classes, dim %zu -> %s\n", ds.size(),
                ds.num_classes(), ds.dim(), out.c_str());
    return 0;
}

int cmd_stage1(const Common& common, const std::string& data, const std::string& out,
               std::uint64_t seed_flag, bool seed_given) {
    lmd::RunConfig cfg = build_config(common);
    if (!data.empty()) cfg.data_path = data;
    cfg.validate();
    if (cfg.data_path.empty())
        throw lmd::ValidationError("stage1: --data or data.path is required");

    const std::uint64_t seed = seed_given ? seed_flag : cfg.seeds.at(0);
    const lmd::Dataset full = lmd::load_dataset(cfg.data_path);
    const lmd::SplitResult parts = lmd::prepare_data(cfg, full, seed).parts;
    const lmd::ModelConfig arch = lmd::arch_for(cfg, full);
    const lmd::Stage1Config s1 = lmd::stage1_for_run(cfg, seed);

    const bool ce_style = !cfg.baseline.empty() || cfg.has_ablation("no_rrl");
    const lmd::Stage1Result res =
        ce_style ? lmd::train_ce_only(parts.train, parts.val, arch, s1,
                                      cfg.baseline == "rs")
                 : lmd::train_stage1(parts.train, parts.val, arch, s1);

    fs::create_directories(out);
    lmd::save_checkpoint(res.state, out + "/stage1.lmdc",
                         {"stage1", seed, lmd::config_hash(cfg)});
    lmd::write_file_atomic(out + "/stage1_trace.json",
                           lmd::stage1_trace_to_json(res.trace));
    std::printf("stage1 done: final loss %.6f, val bacc %.4f -> %s\n",
                res.trace.l_total.back(), res.trace.val_bacc.back(), out.c_str());
    return 0;
}

int cmd_stage2(const Common& common, const std::string& data, const std::string& ckpt,
               const std::string& out) {
    lmd::RunConfig cfg = build_config(common);
    if (!data.empty()) cfg.data_path = data;
    cfg.validate();
    if (cfg.data_path.empty())
        throw lmd::ValidationError("stage2: --data or data.path is required");

    const lmd::LoadedCheckpoint loaded =
        lmd::load_checkpoint(checkpoint_path(ckpt, "stage1.lmdc"));
    const std::uint64_t seed = loaded.meta.seed;
    const lmd::Dataset full = lmd::load_dataset(cfg.data_path);
    if (full.dim() != loaded.state.arch.input_dim)
        throw lmd::ValidationError("stage2: dataset dim " + std::to_string(full.dim()) +
                                   " does not match checkpoint input_dim " +
                                   std::to_string(loaded.state.arch.input_dim));
    const lmd::SplitResult parts = lmd::prepare_data(cfg, full, seed).parts;
    lmd::IccConfig s2 = lmd::stage2_for_run(cfg, seed);
    if (cfg.has_ablation("no_vfc")) s2.use_virtual = false;
    if (cfg.has_ablation("no_fdc")) s2.lambda_e = 0.0;

    const lmd::IccResult res = lmd::run_icc(parts.train, parts.val, loaded.state, s2);
    fs::create_directories(out);
    lmd::save_checkpoint(res.state, out + "/stage2.lmdc",
                         {"stage2", seed, lmd::config_hash(cfg)});
    lmd::write_file_atomic(out + "/stage2_trace.json", lmd::icc_trace_to_json(res.trace));
    std::printf("stage2 done: %zu iterations, val bacc %.4f -> %s\n",
                res.trace.entries.size(), res.trace.entries.back().val_bacc, out.c_str());
    return 0;
}

int cmd_eval(const Common& common, const std::string& data, const std::string& ckpt,
             const std::string& out, const std::string& split_name) {
    lmd::RunConfig cfg = build_config(common);
    if (!data.empty()) cfg.data_path = data;
    if (cfg.data_path.empty())
        throw lmd::ValidationError("eval: --data or data.path is required");

    const lmd::LoadedCheckpoint loaded =
        lmd::load_checkpoint(checkpoint_path(ckpt, "stage2.lmdc"));
    const lmd::Dataset full = lmd::load_dataset(cfg.data_path);

    const lmd::PreparedData prepared = lmd::prepare_data(cfg, full, loaded.meta.seed);
    lmd::Dataset eval_ds;
    std::vector<int> group_counts = prepared.parts.train.class_counts;
    if (split_name == "all") {
        eval_ds = full;
        prepared.norm.apply(eval_ds);
        group_counts = full.class_counts;
    } else if (split_name == "train") {
        eval_ds = prepared.parts.train;
    } else if (split_name == "val") {
        eval_ds = prepared.parts.val;
    } else if (split_name == "test") {
        eval_ds = prepared.parts.test;
    } else {
        throw lmd::ValidationError("eval: --split must be train|val|test|all");
    }

    const lmd::GroupSpec groups =
        cfg.groups_file.empty() ? lmd::GroupSpec::from_train_counts(group_counts)
                                : lmd::GroupSpec::from_file(cfg.groups_file,
                                                            full.num_classes());
    const lmd::MetricsReport report = lmd::evaluate_model(
        loaded.state, eval_ds, groups, loaded.meta.seed, loaded.meta.config_hash);
    const std::string json = lmd::report_to_json(report);
    if (!out.empty()) {
        lmd::write_file_atomic(out, json);
        std::printf("bacc %.4f auc %.4f f1 %.4f kappa %.4f -> %s\n", report.bacc,
                    report.auc_macro, report.f1_macro, report.kappa_quadratic,
                    out.c_str());
    } else {
        std::fputs(json.c_str(), stdout);
    }
    return 0;
}

int cmd_ablate(const Common& common, const std::string& out, const std::string& rows_csv) {
    lmd::RunConfig cfg = build_config(common);
    if (!out.empty()) cfg.out_dir = out;
    cfg.validate();

    std::vector<std::string> rows;
    if (!rows_csv.empty()) {
        std::istringstream is(rows_csv);
        std::string tok;
        while (std::getline(is, tok, ',')) rows.push_back(tok);
    }
    const auto table = lmd::ablation_matrix(cfg, rows);
    std::fputs(lmd::ablation_table_text(table).c_str(), stdout);
    return 0;
}

int cmd_export_features(const Common& common, const std::string& data,
                        const std::string& ckpt, const std::string& out) {
    lmd::RunConfig cfg = build_config(common);
    const lmd::LoadedCheckpoint loaded =
        lmd::load_checkpoint(checkpoint_path(ckpt, "stage2.lmdc"));
    lmd::Dataset ds = lmd::load_dataset(data);
    if (ds.dim() != loaded.state.arch.input_dim)
        throw lmd::ValidationError("export-features: dataset dim does not match checkpoint");
    lmd::prepare_data(cfg, ds, loaded.meta.seed).norm.apply(ds);
    lmd::export_features(loaded.state, ds, out);
    std::printf("wrote %zu feature rows -> %s\n", ds.size(), out.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-stage long-tailed classification workbench (RRL + iterative "
                 "classifier calibration)"};
    app.require_subcommand(1);

    // gen
    lmd::LongTailSpec gen_spec;
    std::string gen_out;
    auto* gen = app.add_subcommand("gen", "Synthesize a Pareto long-tailed dataset");
    gen->add_option("--classes", gen_spec.num_classes, "Number of classes K");
    gen->add_option("--n0", gen_spec.head_count, "Head class count N0");
    gen->add_option("--imbalance", gen_spec.imbalance_factor, "Imbalance factor r");
    gen->add_option("--dim", gen_spec.feature_dim, "Informative feature dims");
    gen->add_option("--noise-dims", gen_spec.noise_dims, "Pure-noise dims");
    gen->add_option("--sep", gen_spec.class_separation, "Adjacent class mean distance");
    gen->add_option("--seed", gen_spec.seed, "Generation seed");
    gen->add_option("--out", gen_out, "Output file (.lmds or .csv)")->required();

    // stage1
    Common s1_common;
    std::string s1_data, s1_out;
    std::uint64_t s1_seed = 0;
    auto* stage1 = app.add_subcommand("stage1", "Run relation-aware stage-1 training");
    stage1->add_option("--data", s1_data, "Dataset file");
    stage1->add_option("--config", s1_common.config_path, "Config file (key=value)");
    stage1->add_option("--set", s1_common.overrides, "Config override key=value");
    auto* s1_seed_opt = stage1->add_option("--seed", s1_seed, "Run seed");
    stage1->add_option("--out", s1_out, "Output directory")->required();

    // stage2
    Common s2_common;
    std::string s2_data, s2_ckpt, s2_out, s2_mode;
    auto* stage2 = app.add_subcommand("stage2", "Run iterative classifier calibration");
    stage2->add_option("--data", s2_data, "Dataset file");
    stage2->add_option("--ckpt", s2_ckpt, "Stage-1 checkpoint file or directory")->required();
    stage2->add_option("--config", s2_common.config_path, "Config file (key=value)");
    stage2->add_option("--set", s2_common.overrides, "Config override key=value");
    int s2_iters = -1;
    long long s2_r = -1;
    double s2_lambda_e = -1.0;
    stage2->add_option("--iters", s2_iters, "EM iterations J");
    stage2->add_option("--r-virtual", s2_r, "Virtual features per class R");
    stage2->add_option("--lambda-e", s2_lambda_e, "FDC weight lambda_e");
    stage2->add_option("--mode", s2_mode, "Mahalanobis mode: inverse|as-printed");
    stage2->add_option("--out", s2_out, "Output directory")->required();

    // eval
    Common ev_common;
    std::string ev_data, ev_ckpt, ev_out, ev_split = "test";
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval_cmd->add_option("--data", ev_data, "Dataset file");
    eval_cmd->add_option("--ckpt", ev_ckpt, "Checkpoint file or directory")->required();
    eval_cmd->add_option("--config", ev_common.config_path, "Config file");
    eval_cmd->add_option("--set", ev_common.overrides, "Config override key=value");
    eval_cmd->add_option("--split", ev_split, "Split to evaluate: train|val|test|all");
    eval_cmd->add_option("--out", ev_out, "Report JSON path (stdout if omitted)");

    // ablate
    Common ab_common;
    std::string ab_out, ab_rows;
    auto* ablate = app.add_subcommand("ablate", "Run the ablation/baseline matrix");
    ablate->add_option("--config", ab_common.config_path, "Config file")->required();
    ablate->add_option("--set", ab_common.overrides, "Config override key=value");
    ablate->add_option("--out", ab_out, "Output directory");
    ablate->add_option("--rows", ab_rows,
                       "Comma list of rows (default full matrix): "
                       "full,no_rrl,no_icc,no_vfc,no_fdc,ce,rs,decoupling");

    // export-features
    Common ex_common;
    std::string ex_data, ex_ckpt, ex_out;
    auto* exp = app.add_subcommand("export-features", "Dump encoder features as CSV");
    exp->add_option("--data", ex_data, "Dataset file")->required();
    exp->add_option("--ckpt", ex_ckpt, "Checkpoint file or directory")->required();
    exp->add_option("--config", ex_common.config_path, "Config file");
    exp->add_option("--set", ex_common.overrides, "Config override key=value");
    exp->add_option("--out", ex_out, "Output CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen(gen_spec, gen_out);
        if (stage1->parsed())
            return cmd_stage1(s1_common, s1_data, s1_out, s1_seed, s1_seed_opt->count() > 0);
        if (stage2->parsed()) {
            if (s2_iters >= 0)
                s2_common.overrides.push_back("stage2.iters=" + std::to_string(s2_iters));
            if (s2_r >= 0)
                s2_common.overrides.push_back("stage2.r_virtual=" + std::to_string(s2_r));
            if (s2_lambda_e >= 0.0) {
                char buf[48];
                std::snprintf(buf, sizeof(buf), "stage2.lambda_e=%.17g", s2_lambda_e);
                s2_common.overrides.push_back(buf);
            }
            if (!s2_mode.empty())
                s2_common.overrides.push_back(
                    "stage2.mahalanobis_mode=" +
                    std::string(s2_mode == "as-printed" ? "as_printed" : s2_mode));
            return cmd_stage2(s2_common, s2_data, s2_ckpt, s2_out);
        }
        if (eval_cmd->parsed()) return cmd_eval(ev_common, ev_data, ev_ckpt, ev_out, ev_split);
        if (ablate->parsed()) return cmd_ablate(ab_common, ab_out, ab_rows);
        if (exp->parsed()) return cmd_export_features(ex_common, ex_data, ex_ckpt, ex_out);
        std::cerr << "no subcommand given\n";
        return 1;
    } catch (const lmd::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const lmd::NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 3;
    } catch (const lmd::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
