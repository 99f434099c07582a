#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cda/model.hpp"
#include "cda/pipeline.hpp"
#include "cda/synth.hpp"

namespace cda {

// One source/target dataset pair: either IDX files on disk or a seeded
// synthetic generator (glyph base set plus a domain shift).
struct DataPairConfig {
    std::string name = "pair";

    bool use_generator = true;
    GlyphSpec glyphs;
    ShiftKind shift = ShiftKind::invert;
    double shift_param = 0.0;
    uint64_t gen_seed = 7;

    std::string source_images, source_labels;
    std::string target_images, target_labels;

    size_t limit = 0; // optional per-domain subsample

    void validate() const;
};

// Whole experiment description. Every field has a default; unknown keys
// anywhere in the file are rejected before any compute happens.
struct ExperimentConfig {
    std::vector<DataPairConfig> pairs{DataPairConfig{}};
    EncoderSpec encoder;
    ProjectorSpec projector;
    TrainConfig train;
    EvalConfig eval;
    std::string out_dir = "runs";
    std::vector<uint64_t> seeds{1};
    std::vector<Variant> variants{Variant::cda_base};
    int threads = 1;

    void validate() const;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

// Canonical serialization (sorted keys, defaults materialized); the basis
// of the config hash, the checkpoint-embedded config, and resume checks.
std::string canonical_config_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

} // namespace cda
