#include "cda/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include <json.hpp>

#include "cda/errors.hpp"

namespace cda {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& section) {
    if (!obj.is_object()) throw ConfigError("config: section '" + section + "' must be an object");
    for (const auto& [key, _] : obj.items()) {
        if (!allowed.count(key)) {
            throw ConfigError("config: unknown key '" + key + "' in section '" + section + "'");
        }
    }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: key '" + key + "' has the wrong type");
    }
}

DataPairConfig parse_pair(const json& j) {
    check_keys(j, {"name", "generator", "source_images", "source_labels", "target_images",
                   "target_labels", "limit"},
               "data.pairs[]");
    DataPairConfig pair;
    pair.name = get_or<std::string>(j, "name", pair.name);
    pair.limit = get_or<size_t>(j, "limit", pair.limit);
    if (j.contains("generator") &&
        (j.contains("source_images") || j.contains("target_images") || j.contains("source_labels") ||
         j.contains("target_labels"))) {
        throw ConfigError("config: data pair '" + pair.name +
                          "' specifies both a generator and IDX paths");
    }
    if (j.contains("generator")) {
        const json& g = j.at("generator");
        check_keys(g, {"kind", "classes", "per_class", "height", "width", "shift", "shift_param", "seed"},
                   "data.pairs[].generator");
        const std::string kind = get_or<std::string>(g, "kind", "glyphs");
        if (kind != "glyphs") throw ConfigError("config: unknown generator kind '" + kind + "'");
        pair.use_generator = true;
        pair.glyphs.classes = get_or<size_t>(g, "classes", pair.glyphs.classes);
        pair.glyphs.per_class = get_or<size_t>(g, "per_class", pair.glyphs.per_class);
        pair.glyphs.height = get_or<size_t>(g, "height", pair.glyphs.height);
        pair.glyphs.width = get_or<size_t>(g, "width", pair.glyphs.width);
        pair.shift = shift_from_string(get_or<std::string>(g, "shift", "invert"));
        pair.shift_param = get_or<double>(g, "shift_param", pair.shift_param);
        pair.gen_seed = get_or<uint64_t>(g, "seed", pair.gen_seed);
    } else {
        pair.use_generator = false;
        pair.source_images = get_or<std::string>(j, "source_images", "");
        pair.source_labels = get_or<std::string>(j, "source_labels", "");
        pair.target_images = get_or<std::string>(j, "target_images", "");
        pair.target_labels = get_or<std::string>(j, "target_labels", "");
    }
    pair.validate();
    return pair;
}

EncoderSpec parse_encoder(const json& j) {
    check_keys(j, {"kind", "hidden", "conv_channels", "norm", "d_h"}, "model.encoder");
    EncoderSpec enc;
    const std::string kind = get_or<std::string>(j, "kind", "small_cnn");
    if (kind == "mlp") enc.kind = EncoderSpec::Kind::mlp;
    else if (kind == "small_cnn") enc.kind = EncoderSpec::Kind::small_cnn;
    else throw ConfigError("config: model.encoder.kind must be 'mlp' or 'small_cnn'");
    enc.hidden = get_or<std::vector<size_t>>(j, "hidden", enc.hidden);
    enc.conv_channels = get_or<std::vector<size_t>>(j, "conv_channels", enc.conv_channels);
    const std::string norm = get_or<std::string>(j, "norm", "none");
    if (norm == "none") enc.norm = NormKind::none;
    else if (norm == "batch") enc.norm = NormKind::batch;
    else throw ConfigError("config: model.encoder.norm must be 'none' or 'batch'");
    enc.d_h = get_or<size_t>(j, "d_h", enc.d_h);
    return enc;
}

ProjectorSpec parse_projector(const json& j) {
    check_keys(j, {"hidden", "d_z", "normalize"}, "model.projector");
    ProjectorSpec proj;
    proj.hidden = get_or<std::vector<size_t>>(j, "hidden", proj.hidden);
    proj.d_z = get_or<size_t>(j, "d_z", proj.d_z);
    proj.normalize = get_or<bool>(j, "normalize", proj.normalize);
    proj.validate();
    return proj;
}

OptimizerSpec parse_optimizer(const json& j) {
    check_keys(j, {"kind", "lr", "momentum", "weight_decay", "trust", "schedule"}, "train.optimizer");
    OptimizerSpec spec;
    const std::string kind = get_or<std::string>(j, "kind", "sgd_momentum");
    if (kind == "sgd_momentum") spec.kind = OptimizerSpec::Kind::sgd_momentum;
    else if (kind == "lars") spec.kind = OptimizerSpec::Kind::lars;
    else throw ConfigError("config: train.optimizer.kind must be 'sgd_momentum' or 'lars'");
    spec.lr = get_or<double>(j, "lr", spec.lr);
    spec.momentum = get_or<double>(j, "momentum", spec.momentum);
    spec.weight_decay = get_or<double>(j, "weight_decay", spec.weight_decay);
    spec.trust = get_or<double>(j, "trust", spec.trust);
    const std::string schedule = get_or<std::string>(j, "schedule", "constant");
    if (schedule == "constant") spec.schedule = OptimizerSpec::Schedule::constant;
    else if (schedule == "cosine") spec.schedule = OptimizerSpec::Schedule::cosine;
    else throw ConfigError("config: train.optimizer.schedule must be 'constant' or 'cosine'");
    spec.validate();
    return spec;
}

KernelConfig parse_kernel(const json& j) {
    check_keys(j, {"bandwidth", "sigma"}, "train.kernel");
    KernelConfig k;
    const std::string bw = get_or<std::string>(j, "bandwidth", "median");
    if (bw == "median") k.strategy = KernelConfig::Bandwidth::median;
    else if (bw == "multi") k.strategy = KernelConfig::Bandwidth::multi;
    else if (bw == "fixed") k.strategy = KernelConfig::Bandwidth::fixed;
    else throw ConfigError("config: train.kernel.bandwidth must be 'median', 'multi' or 'fixed'");
    k.sigma = get_or<double>(j, "sigma", k.sigma);
    k.validate();
    return k;
}

AugmentationPolicy parse_policy(const json& j) {
    if (!j.is_array()) throw ConfigError("config: train.augment must be an array of steps");
    AugmentationPolicy policy;
    for (const json& s : j) {
        check_keys(s, {"kind", "a", "b"}, "train.augment[]");
        AugStep step;
        step.kind = aug_from_string(get_or<std::string>(s, "kind", ""));
        step.a = get_or<double>(s, "a", 0.0);
        step.b = get_or<double>(s, "b", 0.0);
        policy.steps.push_back(step);
    }
    policy.validate();
    return policy;
}

TrainConfig parse_train(const json& j) {
    check_keys(j,
               {"variant", "batch", "epochs", "temperature", "fnr_k", "mmd_weight", "views",
                "optimizer", "kernel", "augment", "seed", "csv_timing"},
               "train");
    TrainConfig cfg;
    cfg.variant = variant_from_string(get_or<std::string>(j, "variant", "cda_base"));
    cfg.batch = get_or<size_t>(j, "batch", cfg.batch);
    cfg.epochs = get_or<size_t>(j, "epochs", cfg.epochs);
    cfg.temperature = get_or<double>(j, "temperature", cfg.temperature);
    cfg.fnr_k = get_or<int>(j, "fnr_k", variant_uses_fnr(cfg.variant) ? 1 : 0);
    cfg.mmd_weight = get_or<double>(j, "mmd_weight", cfg.mmd_weight);
    cfg.views = get_or<size_t>(j, "views", variant_views(cfg.variant));
    if (j.contains("optimizer")) cfg.optimizer = parse_optimizer(j.at("optimizer"));
    if (j.contains("kernel")) cfg.kernel = parse_kernel(j.at("kernel"));
    if (j.contains("augment")) cfg.policy = parse_policy(j.at("augment"));
    cfg.seed = get_or<uint64_t>(j, "seed", cfg.seed);
    cfg.csv_timing = get_or<bool>(j, "csv_timing", cfg.csv_timing);
    cfg.validate();
    return cfg;
}

EvalConfig parse_eval(const json& j) {
    check_keys(j, {"head_epochs", "head_lr", "head_momentum", "head_batch", "holdout_frac", "seed"},
               "eval");
    EvalConfig cfg;
    cfg.head_epochs = get_or<size_t>(j, "head_epochs", cfg.head_epochs);
    cfg.head_lr = get_or<double>(j, "head_lr", cfg.head_lr);
    cfg.head_momentum = get_or<double>(j, "head_momentum", cfg.head_momentum);
    cfg.head_batch = get_or<size_t>(j, "head_batch", cfg.head_batch);
    cfg.holdout_frac = get_or<double>(j, "holdout_frac", cfg.holdout_frac);
    cfg.seed = get_or<uint64_t>(j, "seed", cfg.seed);
    cfg.validate();
    return cfg;
}

json dump_pair(const DataPairConfig& p) {
    json j;
    j["name"] = p.name;
    j["limit"] = p.limit;
    if (p.use_generator) {
        j["generator"] = {{"kind", "glyphs"},
                          {"classes", p.glyphs.classes},
                          {"per_class", p.glyphs.per_class},
                          {"height", p.glyphs.height},
                          {"width", p.glyphs.width},
                          {"shift", shift_name(p.shift)},
                          {"shift_param", p.shift_param},
                          {"seed", p.gen_seed}};
    } else {
        j["source_images"] = p.source_images;
        j["source_labels"] = p.source_labels;
        j["target_images"] = p.target_images;
        j["target_labels"] = p.target_labels;
    }
    return j;
}

} // namespace

void DataPairConfig::validate() const {
    if (name.empty()) throw ConfigError("config: data pair name must be non-empty");
    if (use_generator) {
        glyphs.validate();
    } else if (source_images.empty() || target_images.empty()) {
        throw ConfigError("config: data pair '" + name +
                          "' needs either a generator or source/target image paths");
    }
}

void ExperimentConfig::validate() const {
    if (pairs.empty()) throw ConfigError("config: at least one data pair required");
    for (const auto& p : pairs) p.validate();
    projector.validate();
    train.validate();
    eval.validate();
    if (seeds.empty()) throw ConfigError("config: at least one seed required");
    if (variants.empty()) throw ConfigError("config: at least one variant required");
    if (threads < 1) throw ConfigError("config: threads must be >= 1");
    if (out_dir.empty()) throw ConfigError("config: output.dir must be non-empty");
}

ExperimentConfig parse_config_text(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    check_keys(root, {"data", "model", "train", "eval", "output", "seeds", "variants", "threads"},
               "<root>");

    ExperimentConfig cfg;
    if (root.contains("data")) {
        const json& d = root.at("data");
        check_keys(d, {"pairs"}, "data");
        if (d.contains("pairs")) {
            if (!d.at("pairs").is_array() || d.at("pairs").empty()) {
                throw ConfigError("config: data.pairs must be a non-empty array");
            }
            cfg.pairs.clear();
            for (const json& p : d.at("pairs")) cfg.pairs.push_back(parse_pair(p));
        }
    }
    if (root.contains("model")) {
        const json& m = root.at("model");
        check_keys(m, {"encoder", "projector"}, "model");
        if (m.contains("encoder")) cfg.encoder = parse_encoder(m.at("encoder"));
        if (m.contains("projector")) cfg.projector = parse_projector(m.at("projector"));
    }
    if (root.contains("train")) cfg.train = parse_train(root.at("train"));
    if (root.contains("eval")) cfg.eval = parse_eval(root.at("eval"));
    if (root.contains("output")) {
        const json& o = root.at("output");
        check_keys(o, {"dir"}, "output");
        cfg.out_dir = get_or<std::string>(o, "dir", cfg.out_dir);
    }
    cfg.seeds = get_or<std::vector<uint64_t>>(root, "seeds", cfg.seeds);
    if (root.contains("variants")) {
        cfg.variants.clear();
        for (const auto& v : root.at("variants")) {
            cfg.variants.push_back(variant_from_string(v.get<std::string>()));
        }
    }
    cfg.threads = get_or<int>(root, "threads", cfg.threads);
    cfg.validate();
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_config_text(text);
}

std::string canonical_config_json(const ExperimentConfig& cfg) {
    json root;
    json pairs = json::array();
    for (const auto& p : cfg.pairs) pairs.push_back(dump_pair(p));
    root["data"] = {{"pairs", pairs}};

    json enc;
    enc["kind"] = cfg.encoder.kind == EncoderSpec::Kind::mlp ? "mlp" : "small_cnn";
    enc["hidden"] = cfg.encoder.hidden;
    enc["conv_channels"] = cfg.encoder.conv_channels;
    enc["norm"] = cfg.encoder.norm == NormKind::batch ? "batch" : "none";
    enc["d_h"] = cfg.encoder.d_h;
    json proj;
    proj["hidden"] = cfg.projector.hidden;
    proj["d_z"] = cfg.projector.d_z;
    proj["normalize"] = cfg.projector.normalize;
    root["model"] = {{"encoder", enc}, {"projector", proj}};

    json opt;
    opt["kind"] = cfg.train.optimizer.kind == OptimizerSpec::Kind::lars ? "lars" : "sgd_momentum";
    opt["lr"] = cfg.train.optimizer.lr;
    opt["momentum"] = cfg.train.optimizer.momentum;
    opt["weight_decay"] = cfg.train.optimizer.weight_decay;
    opt["trust"] = cfg.train.optimizer.trust;
    opt["schedule"] =
        cfg.train.optimizer.schedule == OptimizerSpec::Schedule::cosine ? "cosine" : "constant";
    json kernel;
    kernel["bandwidth"] = cfg.train.kernel.strategy == KernelConfig::Bandwidth::fixed    ? "fixed"
                          : cfg.train.kernel.strategy == KernelConfig::Bandwidth::multi ? "multi"
                                                                                        : "median";
    kernel["sigma"] = cfg.train.kernel.sigma;
    json augment = json::array();
    for (const AugStep& s : cfg.train.policy.steps) {
        augment.push_back({{"kind", aug_name(s.kind)}, {"a", s.a}, {"b", s.b}});
    }
    json train;
    train["variant"] = variant_name(cfg.train.variant);
    train["batch"] = cfg.train.batch;
    train["epochs"] = cfg.train.epochs;
    train["temperature"] = cfg.train.temperature;
    train["fnr_k"] = cfg.train.fnr_k;
    train["mmd_weight"] = cfg.train.mmd_weight;
    train["views"] = cfg.train.views;
    train["optimizer"] = opt;
    train["kernel"] = kernel;
    train["augment"] = augment;
    train["seed"] = cfg.train.seed;
    train["csv_timing"] = cfg.train.csv_timing;
    root["train"] = train;

    json eval;
    eval["head_epochs"] = cfg.eval.head_epochs;
    eval["head_lr"] = cfg.eval.head_lr;
    eval["head_momentum"] = cfg.eval.head_momentum;
    eval["head_batch"] = cfg.eval.head_batch;
    eval["holdout_frac"] = cfg.eval.holdout_frac;
    eval["seed"] = cfg.eval.seed;
    root["eval"] = eval;

    root["output"] = {{"dir", cfg.out_dir}};
    root["seeds"] = cfg.seeds;
    json variants = json::array();
    for (Variant v : cfg.variants) variants.push_back(variant_name(v));
    root["variants"] = variants;
    root["threads"] = cfg.threads;
    return root.dump(2);
}

std::string config_hash(const ExperimentConfig& cfg) {
    const std::string text = canonical_config_json(cfg);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace cda
