#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cda/config.hpp"
#include "cda/errors.hpp"
#include "cda/experiment.hpp"
#include "cda/idx.hpp"

using namespace cda;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path work_dir() {
    const fs::path dir = fs::temp_directory_path() / "cda_test_cli";
    fs::create_directories(dir);
    return dir;
}

std::string write_config(const std::string& name, const std::string& text) {
    const std::string path = (work_dir() / name).string();
    std::ofstream out(path, std::ios::trunc);
    out << text;
    return path;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE_MESSAGE(bool(in), ("missing file " + path).c_str());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(CDA_CLI_BIN) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

// Small but trainable toy experiment, fast enough for CLI-level tests.
const char* kToyConfig = R"JSON({
  "data": {
    "pairs": [{
      "name": "toy",
      "generator": {"kind": "glyphs", "classes": 3, "per_class": 24,
                    "height": 12, "width": 12, "shift": "invert", "seed": 5}
    }]
  },
  "model": {
    "encoder": {"kind": "mlp", "hidden": [24], "norm": "none", "d_h": 12},
    "projector": {"hidden": [12, 12], "d_z": 6}
  },
  "train": {
    "variant": "cda_base", "batch": 12, "epochs": 2, "temperature": 0.5,
    "optimizer": {"kind": "sgd_momentum", "lr": 0.05, "momentum": 0.9},
    "seed": 3
  },
  "eval": {"head_epochs": 10, "head_lr": 0.5},
  "output": {"dir": "OUT"},
  "seeds": [3],
  "variants": ["cda_base"]
})JSON";

std::string toy_config_with_out(const std::string& name, const std::string& out_dir) {
    std::string text = kToyConfig;
    const std::string key = "\"OUT\"";
    text.replace(text.find(key), key.size(), "\"" + out_dir + "\"");
    return write_config(name, text);
}

} // namespace

TEST_CASE("strict config parsing") {
    SUBCASE("valid config round-trips through the canonical dump") {
        const ExperimentConfig cfg = parse_config_text(kToyConfig);
        CHECK(cfg.pairs.size() == 1);
        CHECK(cfg.pairs[0].name == "toy");
        CHECK(cfg.train.batch == 12);
        const ExperimentConfig again = parse_config_text(canonical_config_json(cfg));
        CHECK(canonical_config_json(again) == canonical_config_json(cfg));
    }

    SUBCASE("unknown keys fail before any compute") {
        std::string bad = kToyConfig;
        bad.replace(bad.find("\"variant\""), 9, "\"vairant\"");
        try {
            parse_config_text(bad);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("vairant") != std::string::npos);
        }
    }

    SUBCASE("unknown variant names the field") {
        std::string bad = kToyConfig;
        const std::string from = "\"cda_base\", \"batch\"";
        bad.replace(bad.find(from), from.size(), "\"cda_vase\", \"batch\"");
        try {
            parse_config_text(bad);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("variant") != std::string::npos);
            CHECK(msg.find("cda_vase") != std::string::npos);
        }
    }

    SUBCASE("config hash is stable under key reordering") {
        const char* reordered = R"JSON({
          "train": {"epochs": 2, "batch": 12, "seed": 3, "temperature": 0.5,
                    "optimizer": {"momentum": 0.9, "lr": 0.05, "kind": "sgd_momentum"},
                    "variant": "cda_base"},
          "model": {
            "projector": {"d_z": 6, "hidden": [12, 12]},
            "encoder": {"d_h": 12, "hidden": [24], "norm": "none", "kind": "mlp"}
          },
          "data": {
            "pairs": [{
              "generator": {"seed": 5, "shift": "invert", "width": 12, "height": 12,
                            "per_class": 24, "classes": 3, "kind": "glyphs"},
              "name": "toy"
            }]
          },
          "eval": {"head_lr": 0.5, "head_epochs": 10},
          "variants": ["cda_base"],
          "seeds": [3],
          "output": {"dir": "OUT"}
        })JSON";
        CHECK(config_hash(parse_config_text(kToyConfig)) == config_hash(parse_config_text(reordered)));
    }
}

TEST_CASE("gen-data writes byte-valid IDX files that round trip") {
    const fs::path out = work_dir() / "gen_lib";
    fs::remove_all(out);
    const ExperimentConfig cfg = parse_config_text(kToyConfig);
    const auto files = generate_data_files(cfg.pairs[0], out.string());
    REQUIRE(files.size() == 5); // source/target images+labels, provenance

    const ImageSet source = read_idx_images((out / "source_images.idx").string());
    const ImageSet target = read_idx_images((out / "target_images.idx").string());
    CHECK(source.count == 72);
    CHECK(target.count == 72);
    const std::vector<int> labels = read_idx_labels((out / "source_labels.idx").string());
    CHECK(labels.size() == 72);

    // regenerate -> byte identical files
    const fs::path out2 = work_dir() / "gen_lib2";
    fs::remove_all(out2);
    generate_data_files(cfg.pairs[0], out2.string());
    CHECK(slurp((out / "source_images.idx").string()) == slurp((out2 / "source_images.idx").string()));
    CHECK(slurp((out / "target_images.idx").string()) == slurp((out2 / "target_images.idx").string()));

    // re-derive the pair: pixel identical with the written files
    const LoadedPair pair = load_pair(cfg.pairs[0]);
    CHECK(pair.target.pixels == target.pixels);
    CHECK(pair.source.pixels == source.pixels);
}

TEST_CASE("cli pretrain writes checkpoint and metrics with one row per step") {
    const fs::path out = work_dir() / "run_pretrain";
    fs::remove_all(out);
    const std::string cfg_path = toy_config_with_out("pretrain.json", out.string());
    REQUIRE(run_cli("--config " + cfg_path + " pretrain") == 0);

    const std::string metrics = slurp((out / "cda_base" / "3" / "metrics.csv").string());
    std::istringstream lines(metrics);
    std::string line;
    std::getline(lines, line);
    CHECK(line.find(kMetricsSchema) != std::string::npos);
    CHECK(line.find("variant=cda_base") != std::string::npos);
    std::getline(lines, line);
    CHECK(line == "step,loss_total,loss_cont_s,loss_cont_t,loss_mmd,removed_per_anchor,seconds");
    size_t rows = 0;
    while (std::getline(lines, line)) {
        if (!line.empty()) ++rows;
    }
    CHECK(rows == 12); // 72 images / batch 12 = 6 steps x 2 epochs
    CHECK(fs::exists(out / "cda_base" / "3" / "checkpoint.bin"));
}

TEST_CASE("cli pretrain reruns are byte-identical") {
    const fs::path out = work_dir() / "det";
    fs::remove_all(out);
    const std::string cfg_path = toy_config_with_out("det.json", out.string());
    REQUIRE(run_cli("--config " + cfg_path + " pretrain") == 0);
    const std::string metrics1 = slurp((out / "cda_base" / "3" / "metrics.csv").string());
    const std::string ckpt1 = slurp((out / "cda_base" / "3" / "checkpoint.bin").string());
    REQUIRE(run_cli("--config " + cfg_path + " pretrain") == 0);
    CHECK(slurp((out / "cda_base" / "3" / "metrics.csv").string()) == metrics1);
    CHECK(slurp((out / "cda_base" / "3" / "checkpoint.bin").string()) == ckpt1);
}

TEST_CASE("cli resume continues to the uninterrupted checkpoint bytes") {
    const fs::path out = work_dir() / "run_resume";
    fs::remove_all(out);
    std::string text = kToyConfig;
    const std::string from = "\"epochs\": 2";
    text.replace(text.find(from), from.size(), "\"epochs\": 3");
    const std::string out_key = "\"OUT\"";
    text.replace(text.find(out_key), out_key.size(), "\"" + out.string() + "\"");
    const std::string cfg_path = write_config("resume.json", text);

    // uninterrupted 3-epoch run
    REQUIRE(run_cli("--config " + cfg_path + " pretrain") == 0);
    const std::string ckpt_path = (out / "cda_base" / "3" / "checkpoint.bin").string();
    const std::string full_bytes = slurp(ckpt_path);

    // craft the state an interruption after epoch 2 would leave behind
    ExperimentConfig cfg = parse_config_file(cfg_path);
    const LoadedPair pair = load_pair(cfg.pairs[0]);
    const EncoderSpec enc = resolve_encoder(cfg, pair.source);
    ExperimentConfig part_cfg = cfg;
    part_cfg.train.epochs = 2;
    const PretrainResult part =
        pretrain(part_cfg.train, enc, cfg.projector, pair.source, pair.target, nullptr, nullptr,
                 canonical_config_json(cfg));
    save_checkpoint(part.checkpoint, ckpt_path);
    REQUIRE(slurp(ckpt_path) != full_bytes);

    REQUIRE(run_cli("--config " + cfg_path + " pretrain --resume " + ckpt_path) == 0);
    CHECK(slurp(ckpt_path) == full_bytes);
}

TEST_CASE("cli resume rejects a checkpoint from a different config") {
    const fs::path out = work_dir() / "run_resume_mismatch";
    fs::remove_all(out);
    const std::string cfg_path = toy_config_with_out("resume_mismatch.json", out.string());
    REQUIRE(run_cli("--config " + cfg_path + " pretrain") == 0);
    const std::string ckpt = (out / "cda_base" / "3" / "checkpoint.bin").string();

    std::string other = kToyConfig;
    const std::string from = "\"epochs\": 2";
    other.replace(other.find(from), from.size(), "\"epochs\": 4");
    const std::string out_key = "\"OUT\"";
    other.replace(other.find(out_key), out_key.size(), "\"" + out.string() + "\"");
    const std::string other_path = write_config("resume_other.json", other);
    CHECK(run_cli("--config " + other_path + " pretrain --resume " + ckpt) == 2);
}

TEST_CASE("cli error categories map to exit codes") {
    SUBCASE("config error: unknown key") {
        const std::string bad = write_config("bad_key.json", R"({"trian": {}})");
        CHECK(run_cli("--config " + bad + " pretrain") == 2);
    }
    SUBCASE("config error: invalid variant") {
        std::string text = kToyConfig;
        const std::string from = "\"cda_base\", \"batch\"";
        text.replace(text.find(from), from.size(), "\"cda_vase\", \"batch\"");
        const std::string bad = write_config("bad_variant.json", text);
        CHECK(run_cli("--config " + bad + " pretrain") == 2);
    }
    SUBCASE("data error: missing idx file") {
        const char* cfg = R"JSON({
          "data": {"pairs": [{"name": "missing",
            "source_images": "/nonexistent/a.idx", "target_images": "/nonexistent/b.idx"}]},
          "output": {"dir": "/tmp/cda_test_cli/never"}
        })JSON";
        const std::string bad = write_config("missing_data.json", cfg);
        CHECK(run_cli("--config " + bad + " pretrain") == 3);
    }
    SUBCASE("missing config flag") {
        CHECK(run_cli("pretrain") == 2);
    }
}

TEST_CASE("cli eval appends a manifest row") {
    const fs::path out = work_dir() / "run_eval";
    fs::remove_all(out);
    const std::string cfg_path = toy_config_with_out("eval.json", out.string());
    REQUIRE(run_cli("--config " + cfg_path + " pretrain") == 0);
    const std::string ckpt = (out / "cda_base" / "3" / "checkpoint.bin").string();
    REQUIRE(run_cli("--config " + cfg_path + " eval --checkpoint " + ckpt) == 0);

    const json manifest = json::parse(slurp((out / "manifest.json").string()));
    REQUIRE(manifest.contains("rows"));
    REQUIRE(manifest["rows"].size() == 1);
    const json& row = manifest["rows"][0];
    CHECK(row["variant"] == "cda_base");
    CHECK(row["seed"] == 3);
    CHECK(row["target_acc"].get<double>() >= 0.0);
    CHECK(row["target_acc"].get<double>() <= 1.0);

    // a second eval appends a second row
    REQUIRE(run_cli("--config " + cfg_path + " eval --checkpoint " + ckpt) == 0);
    const json manifest2 = json::parse(slurp((out / "manifest.json").string()));
    CHECK(manifest2["rows"].size() == 2);
}

TEST_CASE("cli inspect prints checkpoint metadata") {
    const fs::path out = work_dir() / "run_inspect";
    fs::remove_all(out);
    const std::string cfg_path = toy_config_with_out("inspect.json", out.string());
    REQUIRE(run_cli("--config " + cfg_path + " pretrain") == 0);
    const std::string ckpt = (out / "cda_base" / "3" / "checkpoint.bin").string();
    const std::string cmd = std::string(CDA_CLI_BIN) + " inspect --checkpoint " + ckpt + " > " +
                            (work_dir() / "inspect.txt").string() + " 2>&1";
    REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
    const std::string text = slurp((work_dir() / "inspect.txt").string());
    CHECK(text.find("epochs_completed: 2") != std::string::npos);
    CHECK(text.find("encoder.fc0.w") != std::string::npos);
    CHECK(text.find("projector.out.w") != std::string::npos);
}

TEST_CASE("bench produces one manifest row per cell and a summary table") {
    const fs::path out = work_dir() / "run_bench";
    fs::remove_all(out);
    std::string text = kToyConfig;
    const std::string seeds_from = "\"seeds\": [3]";
    text.replace(text.find(seeds_from), seeds_from.size(), "\"seeds\": [1, 2, 3]");
    const std::string variants_from = "\"variants\": [\"cda_base\"]";
    text.replace(text.find(variants_from), variants_from.size(),
                 "\"variants\": [\"cda_base\", \"cda_fnr\"]");
    const std::string out_key = "\"OUT\"";
    text.replace(text.find(out_key), out_key.size(), "\"" + out.string() + "\"");
    const std::string cfg_path = write_config("bench.json", text);

    REQUIRE(run_cli("--config " + cfg_path + " bench --threads 2") == 0);
    const json manifest = json::parse(slurp((out / "manifest.json").string()));
    REQUIRE(manifest["rows"].size() == 6); // 2 variants x 3 seeds
    for (const auto& row : manifest["rows"]) CHECK(row["ok"] == true);

    // fnr cells really remove one negative per anchor; base cells none
    auto last_row_fields = [&](const std::string& path) {
        std::istringstream lines(slurp(path));
        std::string line, last;
        while (std::getline(lines, line)) {
            if (!line.empty()) last = line;
        }
        std::vector<std::string> fields;
        std::istringstream cells(last);
        std::string cell;
        while (std::getline(cells, cell, ',')) fields.push_back(cell);
        return fields;
    };
    CHECK(last_row_fields((out / "cda_fnr" / "1" / "metrics.csv").string()).at(5) == "1");
    CHECK(last_row_fields((out / "cda_base" / "1" / "metrics.csv").string()).at(5) == "0");

    const std::string summary = slurp((out / "summary.csv").string());
    std::istringstream lines(summary);
    std::string header, row;
    std::getline(lines, header);
    CHECK(header == "variant,toy,avg");
    std::getline(lines, row); // first configured variant
    CHECK(row.substr(0, 9) == "cda_base,");

    // single pair: avg column equals the pair column
    const size_t c1 = row.find(',');
    const size_t c2 = row.find(',', c1 + 1);
    const double pair_val = std::stod(row.substr(c1 + 1, c2 - c1 - 1));
    const double avg_val = std::stod(row.substr(c2 + 1));
    CHECK(std::abs(pair_val - avg_val) < 1e-9);

    // per-run outputs exist for every seed
    for (const char* seed : {"1", "2", "3"}) {
        CHECK(fs::exists(out / "cda_base" / seed / "checkpoint.bin"));
        CHECK(fs::exists(out / "cda_base" / seed / "metrics.csv"));
        CHECK(fs::exists(out / "cda_base" / seed / "run.json"));
    }
}

TEST_CASE("summary avg equals the row mean across pairs") {
    ExperimentConfig cfg = parse_config_text(kToyConfig);
    DataPairConfig second = cfg.pairs[0];
    second.name = "other";
    cfg.pairs.push_back(second);
    cfg.variants = {Variant::cda_base, Variant::simclr_base};

    std::vector<CellResult> rows;
    auto push = [&](const std::string& pair, Variant v, uint64_t seed, double acc) {
        CellResult r;
        r.pair = pair;
        r.variant = v;
        r.seed = seed;
        r.ok = true;
        r.target_acc = acc;
        rows.push_back(r);
    };
    push("toy", Variant::cda_base, 1, 0.5);
    push("toy", Variant::cda_base, 2, 0.7);
    push("toy", Variant::cda_base, 3, 0.6);
    push("other", Variant::cda_base, 1, 0.9);
    push("other", Variant::cda_base, 2, 0.8);
    push("other", Variant::cda_base, 3, 1.0);
    push("toy", Variant::simclr_base, 1, 0.25);
    push("other", Variant::simclr_base, 1, 0.75);

    const fs::path out = work_dir() / "summary_math";
    fs::create_directories(out);
    write_summary(cfg, rows, (out / "summary.md").string(), (out / "summary.csv").string());

    std::istringstream lines(slurp((out / "summary.csv").string()));
    std::string header, row1, row2;
    std::getline(lines, header);
    CHECK(header == "variant,toy,other,avg");
    std::getline(lines, row1); // cda_base: medians 0.6 and 0.9 -> avg 0.75
    CHECK(row1.find("cda_base,") == 0);
    {
        std::istringstream cells(row1);
        std::string name, a, b, avg;
        std::getline(cells, name, ',');
        std::getline(cells, a, ',');
        std::getline(cells, b, ',');
        std::getline(cells, avg, ',');
        CHECK(std::abs(std::stod(a) - 0.6) < 1e-12);
        CHECK(std::abs(std::stod(b) - 0.9) < 1e-12);
        CHECK(std::abs(std::stod(avg) - (std::stod(a) + std::stod(b)) / 2.0) < 1e-9);
    }
    std::getline(lines, row2); // simclr_base: 0.25, 0.75 -> 0.5
    {
        std::istringstream cells(row2);
        std::string name, a, b, avg;
        std::getline(cells, name, ',');
        std::getline(cells, a, ',');
        std::getline(cells, b, ',');
        std::getline(cells, avg, ',');
        CHECK(std::abs(std::stod(avg) - 0.5) < 1e-9);
    }
}

TEST_CASE("run_cell records failures without aborting the sweep") {
    ExperimentConfig cfg = parse_config_text(kToyConfig);
    cfg.train.optimizer.lr = 1e80; // guaranteed numeric blow-up
    const LoadedPair pair = load_pair(cfg.pairs[0]);
    const CellResult cell = run_cell(cfg, pair, Variant::cda_base, 3, false);
    CHECK(!cell.ok);
    CHECK(cell.error.find("non-finite") != std::string::npos);
}
