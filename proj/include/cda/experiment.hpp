#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "cda/config.hpp"

namespace cda {

inline constexpr const char* kCodeVersion = "cda 0.1.0";
inline constexpr const char* kMetricsSchema = "cda-metrics-v1";

struct LoadedPair {
    std::string name;
    ImageSet source;
    ImageSet target;
};

// Generate or read a configured pair; applies the optional subsample limit.
LoadedPair load_pair(const DataPairConfig& cfg);

// Encoder spec with input dimensions filled in from the data.
EncoderSpec resolve_encoder(const ExperimentConfig& cfg, const ImageSet& source);

struct RunPaths {
    std::string dir;
    std::string checkpoint;
    std::string metrics;
    std::string run_json;
};

// <out>/<variant>/<seed> for a single pair, <out>/<pair>/<variant>/<seed>
// when the config sweeps several pairs.
RunPaths run_paths(const ExperimentConfig& cfg, const std::string& pair_name, Variant variant,
                   uint64_t seed);

struct CellResult {
    std::string pair;
    Variant variant = Variant::cda_base;
    uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double source_acc = 0.0;
    double target_acc = 0.0;
    double final_total = 0.0;
    double runtime_seconds = 0.0;
};

// Schema line, header, one row per step. Inactive loss terms are written
// as 0; `seconds` is 0 unless the config opts into csv timing, keeping
// reruns byte-identical.
void write_metrics_csv(const std::string& path, const TrainConfig& cfg,
                       const std::vector<LossReport>& reports);

// Append-only per-step metrics stream with the same layout; rows land on
// disk as training progresses. In `resume` mode an existing file keeps its
// rows and the header is only written when the file is empty or absent.
class MetricsWriter {
public:
    MetricsWriter(const std::string& path, const TrainConfig& cfg, bool resume = false);
    void append(const LossReport& report);

private:
    std::ofstream out_;
    bool timing_;
};

// pretrain + linear evaluation for one (pair, variant, seed) cell,
// writing checkpoint/metrics/run.json under the run directory.
CellResult run_cell(const ExperimentConfig& cfg, const LoadedPair& pair, Variant variant, uint64_t seed,
                    bool write_outputs = true);

// Writes source/target IDX files plus a provenance sidecar; returns the
// file paths written.
std::vector<std::string> generate_data_files(const DataPairConfig& cfg, const std::string& out_dir);

struct BenchResult {
    std::vector<CellResult> rows;
    std::string manifest_path;
    std::string summary_md_path;
    std::string summary_csv_path;
};

// Full ablation sweep over pairs x variants x seeds, optionally using
// worker threads (cells share only read-only datasets). Failed cells are
// recorded and the sweep continues.
BenchResult run_bench(const ExperimentConfig& cfg, int threads);

// Manifest row append used by `eval` on an existing checkpoint.
void append_manifest_row(const std::string& out_dir, const ExperimentConfig& cfg, const CellResult& row);

// Median-of-seeds summary table (markdown + csv), one row per variant,
// one column per pair plus their mean.
void write_summary(const ExperimentConfig& cfg, const std::vector<CellResult>& rows,
                   const std::string& md_path, const std::string& csv_path);

} // namespace cda
