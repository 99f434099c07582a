#include "cda/augment.hpp"

#include <algorithm>
#include <cmath>

#include "cda/errors.hpp"
#include "cda/rng.hpp"

namespace cda {

namespace {

float clamp01(double v) { return static_cast<float>(std::min(1.0, std::max(0.0, v))); }

float sample_bilinear(const std::vector<float>& img, size_t h, size_t w, size_t c, double y, double x,
                      size_t ch) {
    const double yc = std::min(std::max(y, 0.0), static_cast<double>(h - 1));
    const double xc = std::min(std::max(x, 0.0), static_cast<double>(w - 1));
    const size_t y0 = static_cast<size_t>(yc);
    const size_t x0 = static_cast<size_t>(xc);
    const size_t y1 = std::min(y0 + 1, h - 1);
    const size_t x1 = std::min(x0 + 1, w - 1);
    const double ty = yc - static_cast<double>(y0);
    const double tx = xc - static_cast<double>(x0);
    const double v00 = img[(y0 * w + x0) * c + ch];
    const double v01 = img[(y0 * w + x1) * c + ch];
    const double v10 = img[(y1 * w + x0) * c + ch];
    const double v11 = img[(y1 * w + x1) * c + ch];
    const double top = v00 * (1 - tx) + v01 * tx;
    const double bot = v10 * (1 - tx) + v11 * tx;
    return static_cast<float>(top * (1 - ty) + bot * ty);
}

void apply_crop(std::vector<float>& img, size_t h, size_t w, size_t c, double lo, double hi, Rng& rng) {
    const double area = rng.uniform(lo, hi);
    const double aspect = rng.uniform(0.75, 4.0 / 3.0);
    double ch_d = std::sqrt(area / aspect) * static_cast<double>(h);
    double cw_d = std::sqrt(area * aspect) * static_cast<double>(w);
    const size_t crop_h = std::max<size_t>(2, std::min(h, static_cast<size_t>(std::lround(ch_d))));
    const size_t crop_w = std::max<size_t>(2, std::min(w, static_cast<size_t>(std::lround(cw_d))));
    const size_t oy = static_cast<size_t>(rng.below(h - crop_h + 1));
    const size_t ox = static_cast<size_t>(rng.below(w - crop_w + 1));

    std::vector<float> out(img.size());
    for (size_t y = 0; y < h; ++y) {
        const double sy = static_cast<double>(oy) +
                          (crop_h - 1) * static_cast<double>(y) / std::max<size_t>(1, h - 1);
        for (size_t x = 0; x < w; ++x) {
            const double sx = static_cast<double>(ox) +
                              (crop_w - 1) * static_cast<double>(x) / std::max<size_t>(1, w - 1);
            for (size_t chn = 0; chn < c; ++chn) {
                out[(y * w + x) * c + chn] = sample_bilinear(img, h, w, c, sy, sx, chn);
            }
        }
    }
    img = std::move(out);
}

void apply_erase(std::vector<float>& img, size_t h, size_t w, size_t c, double lo, double hi, Rng& rng) {
    const double area = rng.uniform(lo, hi) * static_cast<double>(h * w);
    const double aspect = rng.uniform(0.5, 2.0);
    size_t eh = std::max<size_t>(1, static_cast<size_t>(std::lround(std::sqrt(area / aspect))));
    size_t ew = std::max<size_t>(1, static_cast<size_t>(std::lround(std::sqrt(area * aspect))));
    eh = std::min(eh, h);
    ew = std::min(ew, w);
    const size_t oy = static_cast<size_t>(rng.below(h - eh + 1));
    const size_t ox = static_cast<size_t>(rng.below(w - ew + 1));
    for (size_t y = oy; y < oy + eh; ++y) {
        for (size_t x = ox; x < ox + ew; ++x) {
            for (size_t chn = 0; chn < c; ++chn) {
                img[(y * w + x) * c + chn] = static_cast<float>(rng.uniform());
            }
        }
    }
}

} // namespace

AugKind aug_from_string(const std::string& name) {
    if (name == "random_resized_crop") return AugKind::random_resized_crop;
    if (name == "brightness") return AugKind::brightness;
    if (name == "contrast") return AugKind::contrast;
    if (name == "gauss_noise") return AugKind::gauss_noise;
    if (name == "random_erase") return AugKind::random_erase;
    if (name == "channel_colorize") return AugKind::channel_colorize;
    throw ConfigError("unknown augmentation '" + name + "'");
}

const char* aug_name(AugKind kind) {
    switch (kind) {
        case AugKind::random_resized_crop: return "random_resized_crop";
        case AugKind::brightness: return "brightness";
        case AugKind::contrast: return "contrast";
        case AugKind::gauss_noise: return "gauss_noise";
        case AugKind::random_erase: return "random_erase";
        case AugKind::channel_colorize: return "channel_colorize";
    }
    return "?";
}

void AugmentationPolicy::validate() const {
    for (const AugStep& s : steps) {
        switch (s.kind) {
            case AugKind::random_resized_crop:
                if (!(s.a > 0.0 && s.a <= s.b && s.b <= 1.0)) {
                    throw ConfigError("random_resized_crop: scale range must satisfy 0 < lo <= hi <= 1");
                }
                break;
            case AugKind::brightness:
            case AugKind::contrast:
            case AugKind::channel_colorize:
                if (s.a < 0.0 || s.a >= 1.0) {
                    throw ConfigError(std::string(aug_name(s.kind)) + ": max delta must be in [0, 1)");
                }
                break;
            case AugKind::gauss_noise:
                if (s.a < 0.0) throw ConfigError("gauss_noise: sigma must be >= 0");
                break;
            case AugKind::random_erase:
                if (!(s.a >= 0.0 && s.a <= s.b && s.b < 1.0)) {
                    throw ConfigError("random_erase: area range must satisfy 0 <= lo <= hi < 1");
                }
                break;
        }
    }
}

AugmentationPolicy AugmentationPolicy::digits_default() {
    // No horizontal flip: digit-style glyph orientation is class-bearing.
    AugmentationPolicy p;
    p.steps = {
        {AugKind::random_resized_crop, 0.6, 1.0},
        {AugKind::brightness, 0.4, 0.0},
        {AugKind::contrast, 0.4, 0.0},
        {AugKind::gauss_noise, 0.05, 0.0},
        {AugKind::random_erase, 0.02, 0.1},
    };
    return p;
}

void augment(const float* in, float* out, size_t h, size_t w, size_t c,
             const AugmentationPolicy& policy, uint64_t seed) {
    policy.validate();
    std::vector<float> img(in, in + h * w * c);
    Rng rng(seed);
    for (const AugStep& s : policy.steps) {
        switch (s.kind) {
            case AugKind::random_resized_crop:
                apply_crop(img, h, w, c, s.a, s.b, rng);
                break;
            case AugKind::brightness: {
                const double delta = rng.uniform(-s.a, s.a);
                for (float& v : img) v = clamp01(v + delta);
                break;
            }
            case AugKind::contrast: {
                const double factor = 1.0 + rng.uniform(-s.a, s.a);
                double mean = 0.0;
                for (float v : img) mean += v;
                mean /= static_cast<double>(img.size());
                for (float& v : img) v = clamp01(mean + factor * (v - mean));
                break;
            }
            case AugKind::gauss_noise: {
                for (float& v : img) v = clamp01(v + s.a * rng.normal());
                break;
            }
            case AugKind::random_erase:
                apply_erase(img, h, w, c, s.a, s.b, rng);
                break;
            case AugKind::channel_colorize: {
                std::vector<double> factor(c);
                for (size_t chn = 0; chn < c; ++chn) factor[chn] = 1.0 + rng.uniform(-s.a, s.a);
                for (size_t i = 0; i < img.size(); ++i) {
                    img[i] = clamp01(img[i] * factor[i % c]);
                }
                break;
            }
        }
    }
    std::copy(img.begin(), img.end(), out);
}

Tensor augment_image(const ImageSet& set, size_t index, const AugmentationPolicy& policy,
                     uint64_t seed) {
    std::vector<float> out(set.image_size());
    augment(set.image(index), out.data(), set.height, set.width, set.channels, policy, seed);
    Tensor t({set.height, set.width, set.channels});
    for (size_t i = 0; i < out.size(); ++i) t[i] = out[i];
    return t;
}

uint64_t view_seed(uint64_t seed, Domain domain, size_t index, size_t view) {
    return derive_seed(seed, {domain_tag(domain), static_cast<uint64_t>(index), static_cast<uint64_t>(view)});
}

DomainBatch make_minibatch(const ImageSet& source, const ImageSet& target, size_t n, size_t views,
                           const AugmentationPolicy& policy, uint64_t seed) {
    if (n > source.count || n > target.count) {
        throw DataError("make_minibatch: batch " + std::to_string(n) + " exceeds dataset sizes " +
                        std::to_string(source.count) + "/" + std::to_string(target.count));
    }
    Rng src_rng(derive_seed(seed, {domain_tag(Domain::source), 0xBA7C}));
    Rng tgt_rng(derive_seed(seed, {domain_tag(Domain::target), 0xBA7C}));
    return make_minibatch_from_indices(source, target, src_rng.sample_without_replacement(source.count, n),
                                       tgt_rng.sample_without_replacement(target.count, n), views, policy,
                                       seed);
}

DomainBatch make_minibatch_from_indices(const ImageSet& source, const ImageSet& target,
                                        std::vector<size_t> src_idx, std::vector<size_t> tgt_idx,
                                        size_t views, const AugmentationPolicy& policy, uint64_t seed) {
    if (views != 2 && views != 4) {
        throw ConfigError("make_minibatch: views must be 2 or 4, got " + std::to_string(views));
    }
    if (src_idx.size() != tgt_idx.size()) {
        throw DataError("make_minibatch: source and target index counts differ");
    }
    DomainBatch batch;
    batch.seed = seed;
    batch.source_indices = std::move(src_idx);
    batch.target_indices = std::move(tgt_idx);

    auto expand = [&](const ImageSet& set, const std::vector<size_t>& idx, std::vector<Tensor>& out) {
        const size_t n = idx.size();
        const size_t sz = set.image_size();
        for (size_t v = 0; v < views; ++v) {
            Tensor t({n, set.height, set.width, set.channels});
            for (size_t i = 0; i < n; ++i) {
                const uint64_t s = view_seed(seed, set.domain, idx[i], v);
                batch.seeds_used.push_back(s);
                std::vector<float> buf(sz);
                augment(set.image(idx[i]), buf.data(), set.height, set.width, set.channels, policy, s);
                double* dst = t.data() + i * sz;
                for (size_t j = 0; j < sz; ++j) dst[j] = buf[j];
            }
            out.push_back(std::move(t));
        }
    };
    expand(source, batch.source_indices, batch.source_views);
    expand(target, batch.target_indices, batch.target_views);
    return batch;
}

EpochSampler::EpochSampler(size_t count, uint64_t seed, uint64_t epoch, Domain domain) {
    Rng rng(derive_seed(seed, {0xE90C, epoch, domain_tag(domain)}));
    order_ = rng.permutation(count);
}

std::vector<size_t> EpochSampler::batch_indices(size_t step, size_t batch) const {
    if ((step + 1) * batch > order_.size()) {
        throw DataError("epoch sampler: step " + std::to_string(step) + " out of range");
    }
    return {order_.begin() + static_cast<long>(step * batch),
            order_.begin() + static_cast<long>((step + 1) * batch)};
}

} // namespace cda
