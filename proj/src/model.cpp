#include "cda/model.hpp"

#include <cmath>

#include "cda/errors.hpp"
#include "cda/rng.hpp"

namespace cda {

void EncoderSpec::validate() const {
    if (d_h < 2) throw ConfigError("encoder: d_h must be >= 2");
    if (in_h < 4 || in_w < 4 || in_c < 1) throw ConfigError("encoder: input shape too small");
    if (kind == Kind::mlp) {
        if (hidden.empty()) throw ConfigError("encoder: mlp needs at least one hidden layer");
    } else {
        if (conv_channels.empty() || conv_channels.size() > 3) {
            throw ConfigError("encoder: small_cnn needs 1-3 conv stages");
        }
        size_t side = std::min(in_h, in_w);
        for (size_t i = 0; i < conv_channels.size(); ++i) side /= 2;
        if (side == 0) throw ConfigError("encoder: too many pooling stages for the input size");
    }
}

void ProjectorSpec::validate() const {
    if (hidden.size() != 2) throw ConfigError("projector: exactly two hidden layers required");
    if (d_z < 2) throw ConfigError("projector: d_z must be >= 2");
}

void ParameterStore::add_param(const std::string& name, Tensor t) {
    if (params.count(name) || buffers.count(name)) {
        throw ConfigError("parameter store: duplicate name " + name);
    }
    names.push_back(name);
    params.emplace(name, std::move(t));
}

void ParameterStore::add_buffer(const std::string& name, Tensor t) {
    if (params.count(name) || buffers.count(name)) {
        throw ConfigError("parameter store: duplicate name " + name);
    }
    buffer_names.push_back(name);
    buffers.emplace(name, std::move(t));
}

Tensor& ParameterStore::param(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("parameter store: unknown parameter " + name);
    return it->second;
}

const Tensor& ParameterStore::param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("parameter store: unknown parameter " + name);
    return it->second;
}

Tensor& ParameterStore::buffer(const std::string& name) {
    auto it = buffers.find(name);
    if (it == buffers.end()) throw ConfigError("parameter store: unknown buffer " + name);
    return it->second;
}

const Tensor& ParameterStore::buffer(const std::string& name) const {
    auto it = buffers.find(name);
    if (it == buffers.end()) throw ConfigError("parameter store: unknown buffer " + name);
    return it->second;
}

namespace {

Tensor fan_in_uniform(Shape shape, size_t fan_in, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    return Tensor::uniform(std::move(shape), rng, -limit, limit);
}

void add_bn(ParameterStore& store, const std::string& prefix, size_t channels) {
    store.add_param(prefix + ".bn.gamma", Tensor::full({channels}, 1.0));
    store.add_param(prefix + ".bn.beta", Tensor::zeros({channels}));
    store.add_buffer(prefix + ".bn.mean", Tensor::zeros({channels}));
    store.add_buffer(prefix + ".bn.var", Tensor::full({channels}, 1.0));
}

struct EncoderDims {
    size_t flat_in;   // flattened input to the final affine
    size_t out_h, out_w;
};

EncoderDims cnn_dims(const EncoderSpec& spec) {
    size_t h = spec.in_h, w = spec.in_w;
    for (size_t i = 0; i < spec.conv_channels.size(); ++i) {
        h = (h - 2) / 2 + 1; // 2x2 max pool, stride 2
        w = (w - 2) / 2 + 1;
    }
    return {h * w * spec.conv_channels.back(), h, w};
}

} // namespace

ParameterStore init_params(const EncoderSpec& enc, const ProjectorSpec& proj, uint64_t seed) {
    enc.validate();
    proj.validate();
    ParameterStore store;
    store.init_seed = seed;
    Rng rng(derive_seed(seed, {0x1417}));

    if (enc.kind == EncoderSpec::Kind::mlp) {
        size_t in = enc.in_h * enc.in_w * enc.in_c;
        for (size_t i = 0; i < enc.hidden.size(); ++i) {
            const std::string prefix = "encoder.fc" + std::to_string(i);
            store.add_param(prefix + ".w", fan_in_uniform({in, enc.hidden[i]}, in, rng));
            store.add_param(prefix + ".b", Tensor::zeros({enc.hidden[i]}));
            if (enc.norm == NormKind::batch) add_bn(store, prefix, enc.hidden[i]);
            in = enc.hidden[i];
        }
        store.add_param("encoder.out.w", fan_in_uniform({in, enc.d_h}, in, rng));
        store.add_param("encoder.out.b", Tensor::zeros({enc.d_h}));
    } else {
        size_t cin = enc.in_c;
        for (size_t i = 0; i < enc.conv_channels.size(); ++i) {
            const std::string prefix = "encoder.conv" + std::to_string(i);
            const size_t cout = enc.conv_channels[i];
            store.add_param(prefix + ".w", fan_in_uniform({3, 3, cin, cout}, 9 * cin, rng));
            store.add_param(prefix + ".b", Tensor::zeros({cout}));
            if (enc.norm == NormKind::batch) add_bn(store, prefix, cout);
            cin = cout;
        }
        const EncoderDims dims = cnn_dims(enc);
        store.add_param("encoder.out.w", fan_in_uniform({dims.flat_in, enc.d_h}, dims.flat_in, rng));
        store.add_param("encoder.out.b", Tensor::zeros({enc.d_h}));
    }

    size_t in = enc.d_h;
    for (size_t i = 0; i < proj.hidden.size(); ++i) {
        const std::string prefix = "projector.fc" + std::to_string(i);
        store.add_param(prefix + ".w", fan_in_uniform({in, proj.hidden[i]}, in, rng));
        store.add_param(prefix + ".b", Tensor::zeros({proj.hidden[i]}));
        in = proj.hidden[i];
    }
    store.add_param("projector.out.w", fan_in_uniform({in, proj.d_z}, in, rng));
    store.add_param("projector.out.b", Tensor::zeros({proj.d_z}));
    return store;
}

void init_linear_head(ParameterStore& store, size_t d_h, size_t classes) {
    store.add_param("head.w", Tensor::zeros({d_h, classes}));
    store.add_param("head.b", Tensor::zeros({classes}));
}

Value ModelBinding::at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw ConfigError("model binding: parameter " + name + " not bound");
    return it->second;
}

ModelBinding bind_params(Graph& g, const ParameterStore& store) {
    ModelBinding binding;
    for (const std::string& name : store.names) {
        Value v = g.input(store.param(name));
        binding.values.emplace(name, v);
        binding.names_by_node.emplace(v.id, name);
    }
    return binding;
}

std::unordered_map<std::string, Tensor> named_grads(const GradMap& grads, const ModelBinding& binding) {
    std::unordered_map<std::string, Tensor> out;
    for (const auto& [id, grad] : grads) {
        auto it = binding.names_by_node.find(id);
        if (it != binding.names_by_node.end()) out.emplace(it->second, grad);
    }
    return out;
}

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

// Batch norm in either mode; training refreshes the running buffers from
// the batch statistics cached on the node.
Value norm_layer(Graph& g, const ModelBinding& binding, ParameterStore& store,
                 const std::string& prefix, Value x, bool training) {
    Value gamma = binding.at(prefix + ".bn.gamma");
    Value beta = binding.at(prefix + ".bn.beta");
    if (training) {
        Value y = g.batch_norm(x, gamma, beta, kBnEps);
        const Tensor& mean = g.aux0(y.id);
        const Tensor& var = g.aux1(y.id);
        Tensor& rmean = store.buffer(prefix + ".bn.mean");
        Tensor& rvar = store.buffer(prefix + ".bn.var");
        for (size_t i = 0; i < rmean.size(); ++i) {
            rmean[i] = (1.0 - kBnMomentum) * rmean[i] + kBnMomentum * mean[i];
            rvar[i] = (1.0 - kBnMomentum) * rvar[i] + kBnMomentum * var[i];
        }
        return y;
    }
    return g.batch_norm_eval(x, gamma, beta, store.buffer(prefix + ".bn.mean"),
                             store.buffer(prefix + ".bn.var"), kBnEps);
}

} // namespace

Value encode(Graph& g, const ModelBinding& binding, const EncoderSpec& spec, ParameterStore& store,
             Value images, bool training) {
    const Shape& in_shape = images.shape();
    if (in_shape.size() != 4 || in_shape[1] != spec.in_h || in_shape[2] != spec.in_w ||
        in_shape[3] != spec.in_c) {
        throw std::invalid_argument("encode: input " + shape_str(in_shape) + " does not match spec (" +
                                    std::to_string(spec.in_h) + "x" + std::to_string(spec.in_w) + "x" +
                                    std::to_string(spec.in_c) + ")");
    }
    const size_t n = in_shape[0];

    if (spec.kind == EncoderSpec::Kind::mlp) {
        Value x = g.reshape(images, {n, spec.in_h * spec.in_w * spec.in_c});
        for (size_t i = 0; i < spec.hidden.size(); ++i) {
            const std::string prefix = "encoder.fc" + std::to_string(i);
            x = g.affine(x, binding.at(prefix + ".w"), binding.at(prefix + ".b"));
            if (spec.norm == NormKind::batch) x = norm_layer(g, binding, store, prefix, x, training);
            x = g.relu(x);
        }
        return g.affine(x, binding.at("encoder.out.w"), binding.at("encoder.out.b"));
    }

    Value x = images;
    for (size_t i = 0; i < spec.conv_channels.size(); ++i) {
        const std::string prefix = "encoder.conv" + std::to_string(i);
        x = g.conv2d(x, binding.at(prefix + ".w"), binding.at(prefix + ".b"), 1, 1);
        if (spec.norm == NormKind::batch) x = norm_layer(g, binding, store, prefix, x, training);
        x = g.relu(x);
        x = g.max_pool(x, 2, 2, 2);
    }
    const EncoderDims dims = cnn_dims(spec);
    x = g.reshape(x, {n, dims.flat_in});
    return g.affine(x, binding.at("encoder.out.w"), binding.at("encoder.out.b"));
}

Value project(Graph& g, const ModelBinding& binding, const ProjectorSpec& spec, Value h) {
    Value x = h;
    for (size_t i = 0; i < spec.hidden.size(); ++i) {
        const std::string prefix = "projector.fc" + std::to_string(i);
        x = g.affine(x, binding.at(prefix + ".w"), binding.at(prefix + ".b"));
        x = g.relu(x);
    }
    x = g.affine(x, binding.at("projector.out.w"), binding.at("projector.out.b"));
    if (spec.normalize) x = g.l2_normalize_rows(x);
    return x;
}

Value linear_head(Graph& g, const ModelBinding& binding, Value h) {
    return g.affine(h, binding.at("head.w"), binding.at("head.b"));
}

Tensor embed_images(const EncoderSpec& spec, ParameterStore& store, const Tensor& images) {
    const size_t n = images.dim(0);
    const size_t chunk = 256;
    Tensor out({n, spec.d_h});
    const size_t img = spec.in_h * spec.in_w * spec.in_c;
    for (size_t start = 0; start < n; start += chunk) {
        const size_t m = std::min(chunk, n - start);
        Tensor part({m, spec.in_h, spec.in_w, spec.in_c});
        std::copy(images.data() + start * img, images.data() + (start + m) * img, part.data());
        Graph g;
        ModelBinding binding = bind_params(g, store);
        Value h = encode(g, binding, spec, store, g.constant(std::move(part)), false);
        const Tensor& hv = h.val();
        std::copy(hv.data(), hv.data() + m * spec.d_h, out.data() + start * spec.d_h);
    }
    return out;
}

} // namespace cda
