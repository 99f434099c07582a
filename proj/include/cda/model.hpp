#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cda/graph.hpp"

namespace cda {

enum class NormKind { none, batch };

// Desk-scale encoder f(.): a small conv stack or an MLP. The contrastive
// objectives live downstream; the backbone only has to produce features
// worth probing linearly.
struct EncoderSpec {
    enum class Kind { mlp, small_cnn };
    Kind kind = Kind::small_cnn;
    std::vector<size_t> hidden{128};       // mlp hidden widths
    std::vector<size_t> conv_channels{8, 16}; // small_cnn channel plan (2-3 stages)
    NormKind norm = NormKind::none;
    size_t d_h = 128;
    size_t in_h = 16, in_w = 16, in_c = 1;

    void validate() const;
};

// Projection head g(.): two hidden relu layers onto d_z, rows
// L2-normalized by default so cosine similarity is a plain dot product.
struct ProjectorSpec {
    std::vector<size_t> hidden{128, 128}; // exactly two
    size_t d_z = 64;
    bool normalize = true;

    void validate() const;
};

// Named parameter tensors plus non-trainable buffers (batch-norm running
// statistics). Iteration follows insertion order for determinism.
struct ParameterStore {
    std::vector<std::string> names;
    std::unordered_map<std::string, Tensor> params;
    std::vector<std::string> buffer_names;
    std::unordered_map<std::string, Tensor> buffers;
    uint64_t init_seed = 0;

    void add_param(const std::string& name, Tensor t);
    void add_buffer(const std::string& name, Tensor t);
    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
    Tensor& buffer(const std::string& name);
    const Tensor& buffer(const std::string& name) const;
    bool has_param(const std::string& name) const { return params.count(name) != 0; }
};

// Fan-in-scaled uniform initialization: weights ~ U(-sqrt(6/fan_in),
// +sqrt(6/fan_in)), biases zero, batch-norm gamma 1 / beta 0. Deterministic
// in the seed.
ParameterStore init_params(const EncoderSpec& enc, const ProjectorSpec& proj, uint64_t seed);

// Adds a zero-initialized linear classifier (head.w d_h x classes, head.b).
void init_linear_head(ParameterStore& store, size_t d_h, size_t classes);

// Per-graph binding of store parameters to input leaves, so one backward
// pass yields gradients by parameter name.
struct ModelBinding {
    std::unordered_map<std::string, Value> values;
    std::unordered_map<int, std::string> names_by_node;

    Value at(const std::string& name) const;
};

ModelBinding bind_params(Graph& g, const ParameterStore& store);

// Gradient map keyed by parameter name.
std::unordered_map<std::string, Tensor> named_grads(const GradMap& grads, const ModelBinding& binding);

// f(.): images (N, H, W, C) -> H (N, d_h). Training mode uses batch
// statistics and refreshes the running buffers; eval mode reads them.
Value encode(Graph& g, const ModelBinding& binding, const EncoderSpec& spec, ParameterStore& store,
             Value images, bool training);

// g(.): H (N, d_h) -> Z (N, d_z), rows unit-norm when the flag is on.
Value project(Graph& g, const ModelBinding& binding, const ProjectorSpec& spec, Value h);

// Linear classifier on frozen features: H (N, d_h) -> logits (N, C).
Value linear_head(Graph& g, const ModelBinding& binding, Value h);

// Eval-mode embedding of a whole set, batched internally; no graph kept.
Tensor embed_images(const EncoderSpec& spec, ParameterStore& store, const Tensor& images);

} // namespace cda
