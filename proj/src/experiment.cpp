#include "cda/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <thread>

#include <json.hpp>

#include "cda/errors.hpp"

namespace cda {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

ImageSet subsample(ImageSet set, size_t limit) {
    if (limit == 0 || limit >= set.count) return set;
    ImageSet out = set;
    out.count = limit;
    out.pixels.resize(limit * set.image_size());
    if (!set.labels.empty()) out.labels.resize(limit);
    return out;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out << text;
}

} // namespace

LoadedPair load_pair(const DataPairConfig& cfg) {
    cfg.validate();
    LoadedPair pair;
    pair.name = cfg.name;
    if (cfg.use_generator) {
        ImageSet base = synth_glyphs(cfg.glyphs, cfg.gen_seed);
        auto [source, target] = synth_domain_pair(base, cfg.shift, cfg.shift_param, cfg.gen_seed);
        pair.source = std::move(source);
        pair.target = std::move(target);
    } else {
        pair.source = load_image_set(cfg.source_images, cfg.source_labels, Domain::source);
        pair.target = load_image_set(cfg.target_images, cfg.target_labels, Domain::target);
    }
    pair.source = subsample(std::move(pair.source), cfg.limit);
    pair.target = subsample(std::move(pair.target), cfg.limit);
    pair.source.validate();
    pair.target.validate();
    if (pair.source.height != pair.target.height || pair.source.width != pair.target.width ||
        pair.source.channels != pair.target.channels) {
        throw DataError("pair '" + cfg.name + "': source and target image shapes differ");
    }
    return pair;
}

EncoderSpec resolve_encoder(const ExperimentConfig& cfg, const ImageSet& source) {
    EncoderSpec enc = cfg.encoder;
    enc.in_h = source.height;
    enc.in_w = source.width;
    enc.in_c = source.channels;
    enc.validate();
    return enc;
}

RunPaths run_paths(const ExperimentConfig& cfg, const std::string& pair_name, Variant variant,
                   uint64_t seed) {
    fs::path dir = cfg.out_dir;
    if (cfg.pairs.size() > 1) dir /= pair_name;
    dir /= variant_name(variant);
    dir /= std::to_string(seed);
    RunPaths paths;
    paths.dir = dir.string();
    paths.checkpoint = (dir / "checkpoint.bin").string();
    paths.metrics = (dir / "metrics.csv").string();
    paths.run_json = (dir / "run.json").string();
    return paths;
}

namespace {

void write_metrics_row(std::ostream& out, const LossReport& r, bool timing) {
    out << r.step << ',' << fmt_double(r.total) << ',' << fmt_double(r.cont_s) << ','
        << fmt_double(r.cont_t) << ',' << fmt_double(r.mmd) << ',' << r.removed_per_anchor << ','
        << (timing ? fmt_double(r.seconds) : "0") << '\n';
}

void write_metrics_header(std::ostream& out, const TrainConfig& cfg) {
    out << "# " << kMetricsSchema << " variant=" << variant_name(cfg.variant)
        << " inactive_terms_zero=1\n";
    out << "step,loss_total,loss_cont_s,loss_cont_t,loss_mmd,removed_per_anchor,seconds\n";
}

} // namespace

void write_metrics_csv(const std::string& path, const TrainConfig& cfg,
                       const std::vector<LossReport>& reports) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    write_metrics_header(out, cfg);
    for (const LossReport& r : reports) write_metrics_row(out, r, cfg.csv_timing);
    if (!out) throw DataError("write failure on " + path);
}

MetricsWriter::MetricsWriter(const std::string& path, const TrainConfig& cfg, bool resume)
    : out_(path, resume ? std::ios::app : std::ios::trunc), timing_(cfg.csv_timing) {
    if (!out_) throw DataError("cannot write " + path);
    const bool fresh = !resume || fs::file_size(fs::path(path)) == 0;
    if (fresh) write_metrics_header(out_, cfg);
    out_.flush();
}

void MetricsWriter::append(const LossReport& report) {
    write_metrics_row(out_, report, timing_);
    out_.flush();
}

CellResult run_cell(const ExperimentConfig& cfg, const LoadedPair& pair, Variant variant, uint64_t seed,
                    bool write_outputs) {
    CellResult cell;
    cell.pair = pair.name;
    cell.variant = variant;
    cell.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        ExperimentConfig run_cfg = cfg;
        run_cfg.train.variant = variant;
        run_cfg.train.views = variant_views(variant);
        run_cfg.train.seed = seed;
        if (!variant_uses_fnr(variant)) {
            run_cfg.train.fnr_k = 0;
        } else if (run_cfg.train.fnr_k < 1) {
            run_cfg.train.fnr_k = 1; // fnr cells default to removing one negative
        }
        run_cfg.train.validate();

        const EncoderSpec enc = resolve_encoder(run_cfg, pair.source);
        const std::string config_json = canonical_config_json(run_cfg);

        const RunPaths paths = run_paths(cfg, pair.name, variant, seed);
        std::optional<MetricsWriter> metrics;
        ReportSink sink = nullptr;
        if (write_outputs) {
            fs::create_directories(paths.dir);
            metrics.emplace(paths.metrics, run_cfg.train);
            sink = [&](const LossReport& r) { metrics->append(r); };
        }
        PretrainResult trained = pretrain(run_cfg.train, enc, run_cfg.projector, pair.source,
                                          pair.target, sink, nullptr, config_json);
        const EvalResult eval =
            linear_evaluate(trained.checkpoint, enc, pair.source, pair.target, run_cfg.eval);

        cell.ok = true;
        cell.source_acc = eval.source_acc;
        cell.target_acc = eval.target_acc;
        cell.final_total = trained.reports.empty() ? 0.0 : trained.reports.back().total;
        cell.runtime_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        if (write_outputs) {
            save_checkpoint(trained.checkpoint, paths.checkpoint);
            json run;
            run["config_hash"] = config_hash(run_cfg);
            run["code_version"] = kCodeVersion;
            run["pair"] = pair.name;
            run["variant"] = variant_name(variant);
            run["seed"] = seed;
            run["source_acc"] = eval.source_acc;
            run["target_acc"] = eval.target_acc;
            run["final_total"] = cell.final_total;
            run["runtime_seconds"] = cell.runtime_seconds;
            write_text(paths.run_json, run.dump(2) + "\n");
        }
    } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
        cell.runtime_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    return cell;
}

std::vector<std::string> generate_data_files(const DataPairConfig& cfg, const std::string& out_dir) {
    const LoadedPair pair = load_pair(cfg);
    fs::create_directories(out_dir);
    const fs::path dir(out_dir);
    std::vector<std::string> written;

    auto emit = [&](const ImageSet& set, const std::string& stem) {
        const std::string images = (dir / (stem + "_images.idx")).string();
        write_idx_images(images, set);
        written.push_back(images);
        if (set.has_labels()) {
            const std::string labels = (dir / (stem + "_labels.idx")).string();
            write_idx_labels(labels, set.labels);
            written.push_back(labels);
        }
    };
    emit(pair.source, "source");
    emit(pair.target, "target");

    json sidecar;
    sidecar["pair"] = cfg.name;
    sidecar["generator"] = cfg.use_generator;
    sidecar["source_provenance"] = pair.source.provenance;
    sidecar["target_provenance"] = pair.target.provenance;
    sidecar["count"] = pair.source.count;
    sidecar["height"] = pair.source.height;
    sidecar["width"] = pair.source.width;
    sidecar["channels"] = pair.source.channels;
    if (cfg.use_generator) {
        sidecar["shift"] = shift_name(cfg.shift);
        sidecar["shift_param"] = cfg.shift_param;
        sidecar["seed"] = cfg.gen_seed;
        sidecar["classes"] = cfg.glyphs.classes;
        sidecar["per_class"] = cfg.glyphs.per_class;
    }
    const std::string sidecar_path = (dir / "provenance.json").string();
    write_text(sidecar_path, sidecar.dump(2) + "\n");
    written.push_back(sidecar_path);
    return written;
}

namespace {

json cell_to_json(const CellResult& cell) {
    json j;
    j["pair"] = cell.pair;
    j["variant"] = variant_name(cell.variant);
    j["seed"] = cell.seed;
    j["ok"] = cell.ok;
    if (!cell.ok) j["error"] = cell.error;
    j["source_acc"] = cell.source_acc;
    j["target_acc"] = cell.target_acc;
    j["final_total"] = cell.final_total;
    j["runtime_seconds"] = cell.runtime_seconds;
    return j;
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

void write_summary(const ExperimentConfig& cfg, const std::vector<CellResult>& rows,
                   const std::string& md_path, const std::string& csv_path) {
    std::string md = "| variant |";
    std::string csv = "variant";
    for (const auto& p : cfg.pairs) {
        md += " " + p.name + " |";
        csv += "," + p.name;
    }
    md += " Avg |\n|---|";
    csv += ",avg\n";
    for (size_t i = 0; i < cfg.pairs.size() + 1; ++i) md += "---|";
    md += "\n";

    for (Variant v : cfg.variants) {
        md += "| " + std::string(variant_name(v)) + " |";
        csv += variant_name(v);
        double sum = 0.0;
        for (const auto& p : cfg.pairs) {
            std::vector<double> accs;
            for (const CellResult& r : rows) {
                if (r.ok && r.variant == v && r.pair == p.name) accs.push_back(r.target_acc);
            }
            const double cell = median(accs); // median across seeds
            sum += cell;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.4f", cell);
            md += std::string(" ") + buf + " |";
            csv += std::string(",") + fmt_double(cell);
        }
        const double avg = sum / static_cast<double>(cfg.pairs.size());
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f", avg);
        md += std::string(" ") + buf + " |\n";
        csv += std::string(",") + fmt_double(avg) + "\n";
    }
    write_text(md_path, md);
    write_text(csv_path, csv);
}

BenchResult run_bench(const ExperimentConfig& cfg, int threads) {
    cfg.validate();
    std::vector<LoadedPair> pairs;
    for (const auto& p : cfg.pairs) pairs.push_back(load_pair(p));

    struct Job {
        size_t pair_index;
        Variant variant;
        uint64_t seed;
    };
    std::vector<Job> jobs;
    for (size_t pi = 0; pi < pairs.size(); ++pi) {
        for (Variant v : cfg.variants) {
            for (uint64_t s : cfg.seeds) jobs.push_back({pi, v, s});
        }
    }

    std::vector<CellResult> rows(jobs.size());
    std::atomic<size_t> next{0};
    auto worker = [&]() {
        while (true) {
            const size_t i = next.fetch_add(1);
            if (i >= jobs.size()) break;
            const Job& job = jobs[i];
            rows[i] = run_cell(cfg, pairs[job.pair_index], job.variant, job.seed);
        }
    };
    const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(jobs.size())));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    fs::create_directories(cfg.out_dir);
    BenchResult result;
    result.rows = rows;

    json manifest;
    manifest["config_hash"] = config_hash(cfg);
    manifest["code_version"] = kCodeVersion;
    json jrows = json::array();
    for (const CellResult& r : rows) jrows.push_back(cell_to_json(r));
    manifest["rows"] = jrows;
    result.manifest_path = (fs::path(cfg.out_dir) / "manifest.json").string();
    write_text(result.manifest_path, manifest.dump(2) + "\n");

    result.summary_md_path = (fs::path(cfg.out_dir) / "summary.md").string();
    result.summary_csv_path = (fs::path(cfg.out_dir) / "summary.csv").string();
    write_summary(cfg, rows, result.summary_md_path, result.summary_csv_path);
    return result;
}

void append_manifest_row(const std::string& out_dir, const ExperimentConfig& cfg,
                         const CellResult& row) {
    static std::mutex manifest_mutex;
    std::lock_guard<std::mutex> lock(manifest_mutex);
    fs::create_directories(out_dir);
    const std::string path = (fs::path(out_dir) / "manifest.json").string();
    json manifest;
    if (fs::exists(path)) {
        std::ifstream in(path);
        try {
            in >> manifest;
        } catch (const json::exception&) {
            throw DataError("manifest: cannot parse existing " + path);
        }
    }
    if (!manifest.contains("rows")) {
        manifest["config_hash"] = config_hash(cfg);
        manifest["code_version"] = kCodeVersion;
        manifest["rows"] = json::array();
    }
    manifest["rows"].push_back(cell_to_json(row));
    write_text(path, manifest.dump(2) + "\n");
}

} // namespace cda
