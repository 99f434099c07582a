#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "cda/errors.hpp"
#include "cda/experiment.hpp"

namespace fs = std::filesystem;
using namespace cda;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct GlobalOpts {
    std::string config_path;
    std::string out_override;
    std::optional<uint64_t> seed_override;
    std::optional<int> threads_override;
};

ExperimentConfig load_config(const GlobalOpts& opts) {
    if (opts.config_path.empty()) throw ConfigError("--config <path> is required");
    ExperimentConfig cfg = parse_config_file(opts.config_path);
    if (!opts.out_override.empty()) cfg.out_dir = opts.out_override;
    if (opts.seed_override) {
        cfg.seeds = {*opts.seed_override};
        cfg.train.seed = *opts.seed_override;
    }
    if (opts.threads_override) cfg.threads = *opts.threads_override;
    cfg.validate();
    return cfg;
}

int cmd_gen_data(const GlobalOpts& opts) {
    const ExperimentConfig cfg = load_config(opts);
    for (const DataPairConfig& pair : cfg.pairs) {
        const std::string dir = (fs::path(cfg.out_dir) / "data" / pair.name).string();
        const auto files = generate_data_files(pair, dir);
        std::cout << "pair " << pair.name << ":\n";
        for (const auto& f : files) std::cout << "  " << f << "\n";
    }
    return kExitOk;
}

int cmd_pretrain(const GlobalOpts& opts) {
    const ExperimentConfig cfg = load_config(opts);
    const DataPairConfig& pair_cfg = cfg.pairs.front();
    const LoadedPair pair = load_pair(pair_cfg);
    const EncoderSpec enc = resolve_encoder(cfg, pair.source);
    const uint64_t seed = cfg.train.seed;

    ExperimentConfig run_cfg = cfg;
    run_cfg.train.validate();
    const std::string config_json = canonical_config_json(run_cfg);

    const RunPaths paths = run_paths(cfg, pair.name, cfg.train.variant, seed);
    fs::create_directories(paths.dir);

    // metrics stream row by row; the checkpoint is refreshed at every epoch
    // boundary so an interrupted run can be resumed
    MetricsWriter metrics(paths.metrics, run_cfg.train);
    PretrainResult result = pretrain(
        run_cfg.train, enc, run_cfg.projector, pair.source, pair.target,
        [&](const LossReport& r) { metrics.append(r); }, nullptr, config_json,
        [&](const Checkpoint& c) { save_checkpoint(c, paths.checkpoint); });

    const LossReport& last = result.reports.back();
    std::cout << "pretrain " << variant_name(cfg.train.variant) << " seed " << seed << ": "
              << result.reports.size() << " steps, final total " << last.total << " (cont_s "
              << last.cont_s << ", cont_t " << last.cont_t << ", mmd " << last.mmd << ")\n"
              << "checkpoint: " << paths.checkpoint << "\nmetrics:    " << paths.metrics << "\n";
    return kExitOk;
}

int cmd_resume(const GlobalOpts& opts, const std::string& checkpoint_path) {
    const ExperimentConfig cfg = load_config(opts);
    const LoadedPair pair = load_pair(cfg.pairs.front());
    const EncoderSpec enc = resolve_encoder(cfg, pair.source);
    const Checkpoint resume_from = load_checkpoint(checkpoint_path);
    const std::string config_json = canonical_config_json(cfg);
    if (resume_from.config_json != config_json) {
        throw ConfigError("resume: checkpoint was produced by a different config");
    }

    const RunPaths paths = run_paths(cfg, pair.name, cfg.train.variant, cfg.train.seed);
    fs::create_directories(paths.dir);
    MetricsWriter metrics(paths.metrics, cfg.train, /*resume=*/true);
    PretrainResult result = pretrain(
        cfg.train, enc, cfg.projector, pair.source, pair.target,
        [&](const LossReport& r) { metrics.append(r); }, &resume_from, config_json,
        [&](const Checkpoint& c) { save_checkpoint(c, paths.checkpoint); });
    std::cout << "resumed from epoch " << resume_from.epochs_completed << " to "
              << cfg.train.epochs << "; checkpoint: " << paths.checkpoint << "\n";
    return kExitOk;
}

int cmd_eval(const GlobalOpts& opts, const std::string& checkpoint_path) {
    const ExperimentConfig cfg = load_config(opts);
    const LoadedPair pair = load_pair(cfg.pairs.front());
    const EncoderSpec enc = resolve_encoder(cfg, pair.source);
    const Checkpoint ckpt = load_checkpoint(checkpoint_path);

    // Shape guard: the checkpointed encoder must match the configured one.
    const ParameterStore reference = init_params(enc, cfg.projector, ckpt.base_seed);
    for (const std::string& name : reference.names) {
        if (!ckpt.store.has_param(name) ||
            !ckpt.store.param(name).same_shape(reference.param(name))) {
            throw ConfigError("eval: checkpoint parameter '" + name +
                              "' does not match the configured encoder shape");
        }
    }

    const EvalResult result = linear_evaluate(ckpt, enc, pair.source, pair.target, cfg.eval);
    CellResult row;
    row.pair = pair.name;
    row.variant = cfg.train.variant;
    row.seed = ckpt.base_seed;
    row.ok = true;
    row.source_acc = result.source_acc;
    row.target_acc = result.target_acc;
    append_manifest_row(cfg.out_dir, cfg, row);
    std::printf("variant=%s seed=%llu source_acc=%.4f target_acc=%.4f\n",
                variant_name(cfg.train.variant), static_cast<unsigned long long>(ckpt.base_seed),
                result.source_acc, result.target_acc);
    return kExitOk;
}

int cmd_bench(const GlobalOpts& opts) {
    const ExperimentConfig cfg = load_config(opts);
    const BenchResult result = run_bench(cfg, cfg.threads);
    size_t failed = 0;
    for (const CellResult& r : result.rows) {
        std::printf("%-12s %-20s seed=%-4llu ", r.pair.c_str(), variant_name(r.variant),
                    static_cast<unsigned long long>(r.seed));
        if (r.ok) {
            std::printf("target_acc=%.4f source_acc=%.4f (%.1fs)\n", r.target_acc, r.source_acc,
                        r.runtime_seconds);
        } else {
            ++failed;
            std::printf("FAILED: %s\n", r.error.c_str());
        }
    }
    std::cout << "manifest: " << result.manifest_path << "\nsummary:  " << result.summary_md_path
              << "\n";
    if (failed) std::cout << failed << " of " << result.rows.size() << " cells failed\n";
    return failed == result.rows.size() && !result.rows.empty() ? kExitOther : kExitOk;
}

int cmd_inspect(const std::string& checkpoint_path) {
    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    std::cout << "version:          " << ckpt.version << "\n"
              << "base_seed:        " << ckpt.base_seed << "\n"
              << "epochs_completed: " << ckpt.epochs_completed << "\n"
              << "global_step:      " << ckpt.global_step << "\n"
              << "parameters:\n";
    for (const std::string& name : ckpt.store.names) {
        std::cout << "  " << name << " " << shape_str(ckpt.store.param(name).shape()) << "\n";
    }
    for (const std::string& name : ckpt.store.buffer_names) {
        std::cout << "  [buffer] " << name << " " << shape_str(ckpt.store.buffer(name).shape()) << "\n";
    }
    std::cout << "optimizer state tensors: " << ckpt.opt_state.size() << "\n";
    if (!ckpt.config_json.empty()) std::cout << "config:\n" << ckpt.config_json << "\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"contrastive domain adaptation experiments"};
    app.require_subcommand(1);
    app.fallthrough(); // global flags may follow the subcommand

    GlobalOpts opts;
    app.add_option("--config", opts.config_path, "experiment config file (JSON)");
    app.add_option("--out", opts.out_override, "output directory override");
    uint64_t seed_value = 0;
    auto* seed_opt = app.add_option("--seed", seed_value, "seed override");
    int threads_value = 0;
    auto* threads_opt = app.add_option("--threads", threads_value, "bench worker threads");

    auto* gen = app.add_subcommand("gen-data", "write configured dataset pairs as IDX files");
    auto* pre = app.add_subcommand("pretrain", "run one contrastive pretraining");
    std::string resume_path;
    pre->add_option("--resume", resume_path, "continue from a checkpoint");
    std::string eval_ckpt;
    auto* eval = app.add_subcommand("eval", "linear evaluation of a checkpoint");
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required();
    auto* bench = app.add_subcommand("bench", "sweep variants x seeds and summarize");
    std::string inspect_ckpt;
    auto* inspect = app.add_subcommand("inspect", "dump checkpoint metadata");
    inspect->add_option("--checkpoint", inspect_ckpt, "checkpoint to inspect")->required();

    CLI11_PARSE(app, argc, argv);

    if (seed_opt->count()) opts.seed_override = seed_value;
    if (threads_opt->count()) opts.threads_override = threads_value;

    try {
        if (gen->parsed()) return cmd_gen_data(opts);
        if (pre->parsed()) {
            return resume_path.empty() ? cmd_pretrain(opts) : cmd_resume(opts, resume_path);
        }
        if (eval->parsed()) return cmd_eval(opts, eval_ckpt);
        if (bench->parsed()) return cmd_bench(opts);
        if (inspect->parsed()) return cmd_inspect(inspect_ckpt);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitOther;
    }
    return kExitOther;
}
