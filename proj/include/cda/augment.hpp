#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cda/idx.hpp"

namespace cda {

enum class AugKind {
    random_resized_crop,
    brightness,
    contrast,
    gauss_noise,
    random_erase,
    channel_colorize,
};

AugKind aug_from_string(const std::string& name);
const char* aug_name(AugKind kind);

// One transform with its parameter range. Meaning of (a, b) per kind:
//   random_resized_crop: area scale range [a, b], b <= 1
//   brightness:          additive delta in [-a, a]
//   contrast:            factor in [1-a, 1+a] around the image mean
//   gauss_noise:         sigma = a
//   random_erase:        erased area fraction range [a, b]
//   channel_colorize:    per-channel factor in [1-a, 1+a]
struct AugStep {
    AugKind kind;
    double a = 0.0;
    double b = 0.0;
};

struct AugmentationPolicy {
    std::vector<AugStep> steps;

    void validate() const;
    static AugmentationPolicy digits_default();
    static AugmentationPolicy none() { return {}; }
};

// Pure function of (image, policy, seed): all randomness comes from the
// seed, applied transform by transform in order. Output stays in [0, 1]
// with the input shape.
void augment(const float* in, float* out, size_t h, size_t w, size_t c,
             const AugmentationPolicy& policy, uint64_t seed);

Tensor augment_image(const ImageSet& set, size_t index, const AugmentationPolicy& policy,
                     uint64_t seed);

// Paired multi-view mini-batch. Views are stored one tensor per view,
// each (n, h, w, c); view v of row i always derives from underlying image
// source_indices[i] / target_indices[i].
struct DomainBatch {
    std::vector<Tensor> source_views;
    std::vector<Tensor> target_views;
    std::vector<size_t> source_indices;
    std::vector<size_t> target_indices;
    std::vector<uint64_t> seeds_used;
    uint64_t seed = 0;
};

// View seed for (batch seed, domain, dataset index, view); documented chain
// in rng.hpp so runs are reproducible from the config seed alone.
uint64_t view_seed(uint64_t seed, Domain domain, size_t index, size_t view);

// Draws n distinct indices per domain, then expands each image into V
// seeded views. V must be 2 or 4.
DomainBatch make_minibatch(const ImageSet& source, const ImageSet& target, size_t n, size_t views,
                           const AugmentationPolicy& policy, uint64_t seed);

DomainBatch make_minibatch_from_indices(const ImageSet& source, const ImageSet& target,
                                        std::vector<size_t> src_idx, std::vector<size_t> tgt_idx,
                                        size_t views, const AugmentationPolicy& policy, uint64_t seed);

// Seeded per-epoch permutation, chunked into fixed-size batches so each
// index appears exactly once per epoch.
class EpochSampler {
public:
    EpochSampler(size_t count, uint64_t seed, uint64_t epoch, Domain domain);

    size_t steps(size_t batch) const { return order_.size() / batch; }
    std::vector<size_t> batch_indices(size_t step, size_t batch) const;

private:
    std::vector<size_t> order_;
};

} // namespace cda
