#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cda/augment.hpp"
#include "cda/checkpoint.hpp"
#include "cda/idx.hpp"
#include "cda/losses.hpp"
#include "cda/model.hpp"
#include "cda/optim.hpp"

namespace cda {

// Experimental scenarios. The variant fixes which loss terms are active
// and the view count; *_fnr variants require k >= 1, *_mmd variants add
// the weighted discrepancy term, x4aug variants use four views.
enum class Variant {
    simclr_base,
    cda_base,
    cda_fnr,
    cda_mmd,
    cda_fnr_mmd,
    cda_x4aug,
    cda_x4aug_fnr,
    cda_x4aug_mmd,
    cda_x4aug_fnr_mmd,
};

Variant variant_from_string(const std::string& name);
const char* variant_name(Variant v);
bool variant_uses_fnr(Variant v);
bool variant_uses_mmd(Variant v);
bool variant_uses_target(Variant v); // simclr_base pretrains on source only
size_t variant_views(Variant v);

struct TrainConfig {
    Variant variant = Variant::cda_base;
    size_t batch = 128;
    size_t epochs = 20;
    double temperature = 0.5;
    int fnr_k = 0;
    double mmd_weight = 1.0;
    size_t views = 2;
    OptimizerSpec optimizer;
    KernelConfig kernel;
    AugmentationPolicy policy = AugmentationPolicy::digits_default();
    uint64_t seed = 1;
    bool csv_timing = false; // leave wall time out of metrics so reruns are byte-identical

    void validate() const;
};

struct LossReport {
    size_t step = 0;
    size_t epoch = 0;
    double cont_s = 0.0;
    double cont_t = 0.0;
    double mmd = 0.0;
    double total = 0.0;
    int removed_per_anchor = 0;
    double seconds = 0.0;
};

using ReportSink = std::function<void(const LossReport&)>;
using EpochSink = std::function<void(const Checkpoint&)>;

struct PretrainResult {
    Checkpoint checkpoint;
    std::vector<LossReport> reports;
};

// One contrastive pretraining run: per step, sample a paired multi-view
// batch, encode and project every view stack, assemble the variant's
// objective, backpropagate once and apply the optimizer. Aborts with a
// NumericError carrying the step's report if the loss leaves the finite
// range. Passing `resume` continues a checkpointed run from its epoch
// boundary; the trajectory matches an uninterrupted run bit for bit.
// `epoch_sink` fires at every epoch boundary with the state an interrupted
// run would resume from.
PretrainResult pretrain(const TrainConfig& cfg, const EncoderSpec& enc, const ProjectorSpec& proj,
                        const ImageSet& source, const ImageSet& target,
                        const ReportSink& sink = nullptr, const Checkpoint* resume = nullptr,
                        const std::string& config_json = "", const EpochSink& epoch_sink = nullptr);

struct EvalConfig {
    size_t head_epochs = 100;
    double head_lr = 0.5;
    double head_momentum = 0.9;
    size_t head_batch = 256;
    double holdout_frac = 0.1;
    uint64_t seed = 97;

    void validate() const;
};

struct EvalResult {
    double source_acc = 0.0;
    double target_acc = 0.0;
};

// Linear evaluation protocol: freeze the encoder, discard the projector,
// fit a linear classifier on un-augmented source features with softmax
// cross-entropy, report top-1 accuracy on a held-out source split and on
// the full target set.
EvalResult linear_evaluate(const Checkpoint& ckpt, const EncoderSpec& enc,
                           const ImageSet& labeled_source, const ImageSet& target,
                           const EvalConfig& cfg);

} // namespace cda
