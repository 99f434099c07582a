#include "cda/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "cda/errors.hpp"
#include "cda/rng.hpp"

namespace cda {

Variant variant_from_string(const std::string& name) {
    static const std::pair<const char*, Variant> table[] = {
        {"simclr_base", Variant::simclr_base},
        {"cda_base", Variant::cda_base},
        {"cda_fnr", Variant::cda_fnr},
        {"cda_mmd", Variant::cda_mmd},
        {"cda_fnr_mmd", Variant::cda_fnr_mmd},
        {"cda_x4aug", Variant::cda_x4aug},
        {"cda_x4aug_fnr", Variant::cda_x4aug_fnr},
        {"cda_x4aug_mmd", Variant::cda_x4aug_mmd},
        {"cda_x4aug_fnr_mmd", Variant::cda_x4aug_fnr_mmd},
    };
    for (const auto& [n, v] : table) {
        if (name == n) return v;
    }
    throw ConfigError("train.variant: unknown variant '" + name + "'");
}

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::simclr_base: return "simclr_base";
        case Variant::cda_base: return "cda_base";
        case Variant::cda_fnr: return "cda_fnr";
        case Variant::cda_mmd: return "cda_mmd";
        case Variant::cda_fnr_mmd: return "cda_fnr_mmd";
        case Variant::cda_x4aug: return "cda_x4aug";
        case Variant::cda_x4aug_fnr: return "cda_x4aug_fnr";
        case Variant::cda_x4aug_mmd: return "cda_x4aug_mmd";
        case Variant::cda_x4aug_fnr_mmd: return "cda_x4aug_fnr_mmd";
    }
    return "?";
}

bool variant_uses_fnr(Variant v) {
    return v == Variant::cda_fnr || v == Variant::cda_fnr_mmd || v == Variant::cda_x4aug_fnr ||
           v == Variant::cda_x4aug_fnr_mmd;
}

bool variant_uses_mmd(Variant v) {
    return v == Variant::cda_mmd || v == Variant::cda_fnr_mmd || v == Variant::cda_x4aug_mmd ||
           v == Variant::cda_x4aug_fnr_mmd;
}

bool variant_uses_target(Variant v) { return v != Variant::simclr_base; }

size_t variant_views(Variant v) {
    switch (v) {
        case Variant::cda_x4aug:
        case Variant::cda_x4aug_fnr:
        case Variant::cda_x4aug_mmd:
        case Variant::cda_x4aug_fnr_mmd:
            return 4;
        default:
            return 2;
    }
}

void TrainConfig::validate() const {
    if (batch < 2) throw ConfigError("train.batch: need at least 2 images per batch");
    if (epochs == 0) throw ConfigError("train.epochs: must be >= 1");
    if (temperature <= 0.0) throw ConfigError("train.temperature: must be > 0");
    if (views != variant_views(variant)) {
        throw ConfigError(std::string("train.views: variant ") + variant_name(variant) + " requires " +
                          std::to_string(variant_views(variant)) + " views, got " + std::to_string(views));
    }
    if (variant_uses_fnr(variant)) {
        if (fnr_k < 0) throw ConfigError("train.fnr_k: must be >= 0");
    } else if (fnr_k != 0) {
        throw ConfigError("train.fnr_k: k > 0 is only valid in fnr variants");
    }
    if (variant_uses_mmd(variant) && mmd_weight < 0.0) {
        throw ConfigError("train.mmd_weight: must be >= 0");
    }
    optimizer.validate();
    kernel.validate();
    policy.validate();
}

namespace {

struct StepLosses {
    Value total;
    double cont_s = 0.0;
    double cont_t = 0.0;
    double mmd_value = 0.0;
};

// Encode+project one stacked pair of views ([v1; v2] as 2N images).
Value project_pair(Graph& g, const ModelBinding& binding, const EncoderSpec& enc,
                   const ProjectorSpec& proj, ParameterStore& store, const Tensor& a, const Tensor& b) {
    const size_t n = a.dim(0);
    Tensor stacked({2 * n, a.dim(1), a.dim(2), a.dim(3)});
    std::copy(a.data(), a.data() + a.size(), stacked.data());
    std::copy(b.data(), b.data() + b.size(), stacked.data() + a.size());
    Value h = encode(g, binding, enc, store, g.constant(std::move(stacked)), true);
    return project(g, binding, proj, h);
}

StepLosses build_step_losses(Graph& g, const TrainConfig& cfg, const EncoderSpec& enc,
                             const ProjectorSpec& proj, ParameterStore& store,
                             const ModelBinding& binding, const DomainBatch& batch) {
    const size_t n = batch.source_indices.size();
    const std::vector<int> pairing = two_view_pairing(n);
    StepLosses out;

    if (cfg.variant == Variant::simclr_base) {
        Value z = project_pair(g, binding, enc, proj, store, batch.source_views[0], batch.source_views[1]);
        ContrastiveResult r = nt_xent(g, z, pairing, cfg.temperature);
        out.total = r.loss;
        out.cont_s = r.loss.val().scalar_value();
        return out;
    }

    const int k = variant_uses_fnr(cfg.variant) ? cfg.fnr_k : 0;
    Value zs{nullptr, -1}; // first source pair [v1; v2]
    Value zt{nullptr, -1}; // first target pair
    Value cont{nullptr, -1};

    if (cfg.views == 2) {
        zs = project_pair(g, binding, enc, proj, store, batch.source_views[0], batch.source_views[1]);
        zt = project_pair(g, binding, enc, proj, store, batch.target_views[0], batch.target_views[1]);
        DomainLossResult da = k > 0 ? fnr_da(g, zs, zt, pairing, pairing, cfg.temperature, k)
                                    : cda_contrastive(g, zs, zt, pairing, pairing, cfg.temperature);
        out.cont_s = da.source.val().scalar_value();
        out.cont_t = da.target.val().scalar_value();
        cont = da.total;
    } else {
        zs = project_pair(g, binding, enc, proj, store, batch.source_views[0], batch.source_views[1]);
        Value zs34 = project_pair(g, binding, enc, proj, store, batch.source_views[2], batch.source_views[3]);
        zt = project_pair(g, binding, enc, proj, store, batch.target_views[0], batch.target_views[1]);
        Value zt34 = project_pair(g, binding, enc, proj, store, batch.target_views[2], batch.target_views[3]);
        MultiviewResult mv = multiview_loss(g, zs, zs34, zt, zt34, cfg.temperature, k);
        out.cont_s = mv.source_a.val().scalar_value() + mv.source_b.val().scalar_value();
        out.cont_t = mv.target_a.val().scalar_value() + mv.target_b.val().scalar_value();
        cont = mv.total;
    }

    // mmd_weight == 0 skips the term entirely so the trajectory matches the
    // corresponding base variant bit for bit.
    if (variant_uses_mmd(cfg.variant) && cfg.mmd_weight != 0.0) {
        Value zs_v1 = g.slice_rows(zs, 0, n);
        Value zt_v1 = g.slice_rows(zt, 0, n);
        Value m = mmd(g, zs_v1, zt_v1, cfg.kernel);
        out.mmd_value = m.val().scalar_value();
        out.total = g.add(cont, g.scalar_mul(m, cfg.mmd_weight));
        return out;
    }

    out.total = cont;
    return out;
}

} // namespace

PretrainResult pretrain(const TrainConfig& cfg, const EncoderSpec& enc, const ProjectorSpec& proj,
                        const ImageSet& source, const ImageSet& target, const ReportSink& sink,
                        const Checkpoint* resume, const std::string& config_json,
                        const EpochSink& epoch_sink) {
    cfg.validate();
    enc.validate();
    proj.validate();
    if (source.count == 0 || (variant_uses_target(cfg.variant) && target.count == 0)) {
        throw DataError("pretrain: datasets must be non-empty");
    }

    PretrainResult result;
    ParameterStore store = resume ? resume->store : init_params(enc, proj, cfg.seed);
    Optimizer optimizer(cfg.optimizer);
    if (resume) optimizer.state() = resume->opt_state;
    const std::string effective_config =
        config_json.empty() && resume ? resume->config_json : config_json;

    const size_t per_epoch = std::min(source.count, variant_uses_target(cfg.variant)
                                                        ? target.count
                                                        : source.count) /
                             cfg.batch;
    if (per_epoch == 0) {
        throw DataError("pretrain: batch " + std::to_string(cfg.batch) + " larger than the datasets");
    }
    const size_t total_steps = per_epoch * cfg.epochs;
    const uint32_t start_epoch = resume ? resume->epochs_completed : 0;
    uint64_t global_step = resume ? resume->global_step : 0;

    for (uint32_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        EpochSampler src_sampler(source.count, cfg.seed, epoch, Domain::source);
        EpochSampler tgt_sampler(target.count ? target.count : source.count, cfg.seed, epoch,
                                 Domain::target);
        for (size_t step = 0; step < per_epoch; ++step, ++global_step) {
            const auto t0 = std::chrono::steady_clock::now();
            const uint64_t step_seed = derive_seed(cfg.seed, {0x57E9, epoch, step});
            DomainBatch batch = make_minibatch_from_indices(
                source, variant_uses_target(cfg.variant) ? target : source,
                src_sampler.batch_indices(step, cfg.batch), tgt_sampler.batch_indices(step, cfg.batch),
                cfg.views, cfg.policy, step_seed);

            Graph g;
            ModelBinding binding = bind_params(g, store);
            StepLosses losses = build_step_losses(g, cfg, enc, proj, store, binding, batch);

            LossReport report;
            report.step = global_step;
            report.epoch = epoch;
            report.cont_s = losses.cont_s;
            report.cont_t = losses.cont_t;
            report.mmd = losses.mmd_value;
            report.total = losses.total.val().scalar_value();
            report.removed_per_anchor = variant_uses_fnr(cfg.variant) ? cfg.fnr_k : 0;

            if (!std::isfinite(report.total)) {
                throw NumericError("pretrain: non-finite loss at step " + std::to_string(global_step) +
                                   " (cont_s=" + std::to_string(report.cont_s) +
                                   ", cont_t=" + std::to_string(report.cont_t) +
                                   ", mmd=" + std::to_string(report.mmd) + ")");
            }

            GradMap grads = g.backward(losses.total);
            const double lr_scale =
                schedule_scale(cfg.optimizer.schedule, global_step, total_steps);
            optimizer.step(store, named_grads(grads, binding), lr_scale);

            report.seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (sink) sink(report);
            result.reports.push_back(report);
        }
        if (epoch_sink) {
            Checkpoint boundary;
            boundary.config_json = effective_config;
            boundary.store = store;
            boundary.opt_state = optimizer.state();
            boundary.base_seed = cfg.seed;
            boundary.epochs_completed = epoch + 1;
            boundary.global_step = global_step;
            epoch_sink(boundary);
        }
    }

    result.checkpoint.version = 1;
    result.checkpoint.config_json = effective_config;
    result.checkpoint.store = std::move(store);
    result.checkpoint.opt_state = optimizer.state();
    result.checkpoint.base_seed = cfg.seed;
    result.checkpoint.epochs_completed = static_cast<uint32_t>(cfg.epochs);
    result.checkpoint.global_step = global_step;
    return result;
}

void EvalConfig::validate() const {
    if (head_epochs == 0) throw ConfigError("eval.head_epochs: must be >= 1");
    if (head_lr <= 0.0) throw ConfigError("eval.head_lr: must be > 0");
    if (holdout_frac <= 0.0 || holdout_frac >= 1.0) {
        throw ConfigError("eval.holdout_frac: must be in (0, 1)");
    }
}

namespace {

// Softmax cross-entropy with a constant per-row max subtracted for range
// safety; the shift is data of the step, so gradients are exact.
Value softmax_xent(Graph& g, Value logits, const std::vector<int>& labels) {
    const Tensor& lv = logits.val();
    const size_t n = lv.rows(), c = lv.cols();
    Tensor shift({n, c});
    Tensor shift_row({n});
    Tensor onehot({n, c});
    for (size_t i = 0; i < n; ++i) {
        double m = lv.at(i, 0);
        for (size_t j = 1; j < c; ++j) m = std::max(m, lv.at(i, j));
        shift_row[i] = m;
        for (size_t j = 0; j < c; ++j) shift.at(i, j) = m;
        onehot.at(i, static_cast<size_t>(labels[i])) = 1.0;
    }
    Value shifted = g.sub(logits, g.constant(std::move(shift)));
    Value lse = g.add(g.log(g.sum(g.exp(shifted), 1)), g.constant(std::move(shift_row)));
    Value picked = g.sum(g.mul(logits, g.constant(std::move(onehot))), 1);
    return g.mean(g.sub(lse, picked));
}

double accuracy(const Tensor& features, const ParameterStore& head, const std::vector<int>& labels) {
    const size_t n = features.rows();
    const Tensor& w = head.param("head.w");
    const Tensor& b = head.param("head.b");
    const size_t c = b.size();
    size_t hits = 0;
    for (size_t i = 0; i < n; ++i) {
        size_t best = 0;
        double best_v = -1e300;
        for (size_t j = 0; j < c; ++j) {
            double v = b[j];
            for (size_t k = 0; k < features.cols(); ++k) v += features.at(i, k) * w.at(k, j);
            if (v > best_v) {
                best_v = v;
                best = j;
            }
        }
        if (static_cast<int>(best) == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

} // namespace

EvalResult linear_evaluate(const Checkpoint& ckpt, const EncoderSpec& enc,
                           const ImageSet& labeled_source, const ImageSet& target,
                           const EvalConfig& cfg) {
    cfg.validate();
    if (!labeled_source.has_labels()) throw DataError("linear_evaluate: source labels required");
    if (!target.has_labels()) throw DataError("linear_evaluate: target labels required for scoring");

    const int classes = labeled_source.num_classes();
    for (int l : target.labels) {
        if (l < 0 || l >= classes) {
            throw DataError("linear_evaluate: target label " + std::to_string(l) +
                            " outside the source class set [0, " + std::to_string(classes) + ")");
        }
    }

    // Frozen encoder: features are computed once, in eval mode, and the
    // head trains against them as constants.
    ParameterStore encoder_store = ckpt.store;
    const Tensor source_features = embed_images(enc, encoder_store, labeled_source.gather_all());
    const Tensor target_features = embed_images(enc, encoder_store, target.gather_all());

    Rng rng(derive_seed(cfg.seed, {0xE7A1}));
    std::vector<size_t> order = rng.permutation(labeled_source.count);
    const size_t holdout = std::max<size_t>(1, static_cast<size_t>(std::lround(
                                                   cfg.holdout_frac * static_cast<double>(labeled_source.count))));
    if (holdout >= labeled_source.count) throw DataError("linear_evaluate: holdout swallows the whole set");
    const std::vector<size_t> held(order.begin(), order.begin() + static_cast<long>(holdout));
    const std::vector<size_t> train(order.begin() + static_cast<long>(holdout), order.end());

    auto take = [&](const Tensor& feats, const std::vector<int>& labels, const std::vector<size_t>& idx,
                    Tensor& f_out, std::vector<int>& l_out) {
        f_out = Tensor({idx.size(), feats.cols()});
        l_out.resize(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
            std::copy(feats.data() + idx[i] * feats.cols(), feats.data() + (idx[i] + 1) * feats.cols(),
                      f_out.data() + i * feats.cols());
            l_out[i] = labels[idx[i]];
        }
    };
    Tensor train_f, held_f;
    std::vector<int> train_l, held_l;
    take(source_features, labeled_source.labels, train, train_f, train_l);
    take(source_features, labeled_source.labels, held, held_f, held_l);

    ParameterStore head;
    head.init_seed = cfg.seed;
    init_linear_head(head, enc.d_h, static_cast<size_t>(classes));
    OptimizerSpec opt_spec;
    opt_spec.kind = OptimizerSpec::Kind::sgd_momentum;
    opt_spec.lr = cfg.head_lr;
    opt_spec.momentum = cfg.head_momentum;
    Optimizer optimizer(opt_spec);

    const size_t batches = (train.size() + cfg.head_batch - 1) / cfg.head_batch;
    for (size_t epoch = 0; epoch < cfg.head_epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, {0x3AFF, epoch}));
        std::vector<size_t> perm = shuffle_rng.permutation(train.size());
        for (size_t bi = 0; bi < batches; ++bi) {
            const size_t lo = bi * cfg.head_batch;
            const size_t hi = std::min(train.size(), lo + cfg.head_batch);
            if (lo >= hi) break;
            Tensor fb({hi - lo, train_f.cols()});
            std::vector<int> lb(hi - lo);
            for (size_t i = lo; i < hi; ++i) {
                std::copy(train_f.data() + perm[i] * train_f.cols(),
                          train_f.data() + (perm[i] + 1) * train_f.cols(),
                          fb.data() + (i - lo) * train_f.cols());
                lb[i - lo] = train_l[perm[i]];
            }
            Graph g;
            ModelBinding binding = bind_params(g, head);
            Value logits = linear_head(g, binding, g.constant(std::move(fb)));
            Value loss = softmax_xent(g, logits, lb);
            GradMap grads = g.backward(loss);
            optimizer.step(head, named_grads(grads, binding));
        }
    }

    EvalResult result;
    result.source_acc = accuracy(held_f, head, held_l);
    result.target_acc = accuracy(target_features, head, target.labels);
    return result;
}

} // namespace cda
