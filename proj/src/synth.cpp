#include "cda/synth.hpp"

#include <algorithm>
#include <cmath>

#include "cda/errors.hpp"
#include "cda/rng.hpp"

namespace cda {

namespace {

double smooth_edge(double signed_dist, double softness) {
    // 1 inside, 0 outside, linear ramp of width `softness` around the edge.
    const double t = 0.5 - signed_dist / softness;
    return std::min(1.0, std::max(0.0, t));
}

// Signed distance to each glyph outline; negative inside the stroke.
double glyph_dist(int cls, double x, double y, double radius, double thick) {
    const double r = std::sqrt(x * x + y * y);
    switch (cls) {
        case 0: // ring
            return std::abs(r - radius) - thick;
        case 1: // plus
            return std::min(std::abs(x), std::abs(y)) - thick +
                   std::max(0.0, r - 1.35 * radius);
        case 2: { // two horizontal bars
            const double bar = std::min(std::abs(y - 0.62 * radius), std::abs(y + 0.62 * radius));
            return bar - thick + std::max(0.0, std::abs(x) - 1.15 * radius);
        }
        case 3: { // diagonal cross
            const double d = std::min(std::abs(x - y), std::abs(x + y)) / std::sqrt(2.0);
            return d - thick + std::max(0.0, r - 1.35 * radius);
        }
        case 4: { // box outline
            const double box = std::max(std::abs(x), std::abs(y));
            return std::abs(box - radius) - thick;
        }
        case 5: // filled disc
            return r - 0.8 * radius;
        case 6: { // vee
            const double d = std::abs(std::abs(x) * 0.9 - (y + 0.9 * radius) * 0.55);
            return d - thick + std::max(0.0, std::abs(x) - 1.2 * radius);
        }
        case 7: { // vertical bar pair
            const double bar = std::min(std::abs(x - 0.62 * radius), std::abs(x + 0.62 * radius));
            return bar - thick + std::max(0.0, std::abs(y) - 1.15 * radius);
        }
        default:
            throw ConfigError("glyphs: class index out of range");
    }
}

// Coarse random grid bilinearly upsampled; one channel of a background field.
void low_freq_field(Rng& rng, size_t h, size_t w, double lo, double hi, std::vector<double>& out) {
    constexpr size_t G = 4;
    double grid[G][G];
    for (size_t gy = 0; gy < G; ++gy)
        for (size_t gx = 0; gx < G; ++gx) grid[gy][gx] = rng.uniform(lo, hi);
    out.resize(h * w);
    for (size_t y = 0; y < h; ++y) {
        const double fy = (G - 1) * static_cast<double>(y) / std::max<size_t>(1, h - 1);
        const size_t y0 = std::min(static_cast<size_t>(fy), G - 2);
        const double ty = fy - static_cast<double>(y0);
        for (size_t x = 0; x < w; ++x) {
            const double fx = (G - 1) * static_cast<double>(x) / std::max<size_t>(1, w - 1);
            const size_t x0 = std::min(static_cast<size_t>(fx), G - 2);
            const double tx = fx - static_cast<double>(x0);
            const double top = grid[y0][x0] * (1 - tx) + grid[y0][x0 + 1] * tx;
            const double bot = grid[y0 + 1][x0] * (1 - tx) + grid[y0 + 1][x0 + 1] * tx;
            out[y * w + x] = top * (1 - ty) + bot * ty;
        }
    }
}

float bilinear_at(const float* img, size_t h, size_t w, size_t c, double y, double x, size_t ch) {
    if (y < 0 || x < 0 || y > static_cast<double>(h - 1) || x > static_cast<double>(w - 1)) return 0.0f;
    const size_t y0 = static_cast<size_t>(y);
    const size_t x0 = static_cast<size_t>(x);
    const size_t y1 = std::min(y0 + 1, h - 1);
    const size_t x1 = std::min(x0 + 1, w - 1);
    const double ty = y - static_cast<double>(y0);
    const double tx = x - static_cast<double>(x0);
    const double v00 = img[(y0 * w + x0) * c + ch];
    const double v01 = img[(y0 * w + x1) * c + ch];
    const double v10 = img[(y1 * w + x0) * c + ch];
    const double v11 = img[(y1 * w + x1) * c + ch];
    const double top = v00 * (1 - tx) + v01 * tx;
    const double bot = v10 * (1 - tx) + v11 * tx;
    return static_cast<float>(top * (1 - ty) + bot * ty);
}

ImageSet promote_to_rgb(const ImageSet& gray) {
    ImageSet out = gray;
    out.channels = 3;
    out.pixels.resize(gray.count * gray.height * gray.width * 3);
    for (size_t i = 0; i < gray.pixels.size(); ++i) {
        out.pixels[3 * i] = gray.pixels[i];
        out.pixels[3 * i + 1] = gray.pixels[i];
        out.pixels[3 * i + 2] = gray.pixels[i];
    }
    return out;
}

} // namespace

ShiftKind shift_from_string(const std::string& name) {
    if (name == "invert") return ShiftKind::invert;
    if (name == "colorize_background") return ShiftKind::colorize_background;
    if (name == "noise_blend") return ShiftKind::noise_blend;
    if (name == "affine_jitter") return ShiftKind::affine_jitter;
    throw ConfigError("unknown shift kind '" + name + "'");
}

const char* shift_name(ShiftKind kind) {
    switch (kind) {
        case ShiftKind::invert: return "invert";
        case ShiftKind::colorize_background: return "colorize_background";
        case ShiftKind::noise_blend: return "noise_blend";
        case ShiftKind::affine_jitter: return "affine_jitter";
    }
    return "?";
}

void GlyphSpec::validate() const {
    if (classes < 2 || classes > 8) throw ConfigError("glyphs: classes must be in [2, 8]");
    if (per_class == 0) throw ConfigError("glyphs: per_class must be >= 1");
    if (height < 8 || width < 8) throw ConfigError("glyphs: images must be at least 8x8");
}

ImageSet synth_glyphs(const GlyphSpec& spec, uint64_t seed) {
    spec.validate();
    ImageSet set;
    set.count = spec.classes * spec.per_class;
    set.height = spec.height;
    set.width = spec.width;
    set.channels = 1;
    set.domain = Domain::source;
    set.provenance = "glyphs(classes=" + std::to_string(spec.classes) +
                     ",per_class=" + std::to_string(spec.per_class) + ",seed=" + std::to_string(seed) + ")";
    set.pixels.resize(set.count * spec.height * spec.width);
    set.labels.resize(set.count);

    const double half = 0.5 * static_cast<double>(std::min(spec.height, spec.width));
    size_t img = 0;
    for (size_t cls = 0; cls < spec.classes; ++cls) {
        for (size_t rep = 0; rep < spec.per_class; ++rep, ++img) {
            Rng rng(derive_seed(seed, {0x617959, cls, rep}));
            const double cx = (spec.width - 1) * 0.5 + rng.uniform(-1.5, 1.5);
            const double cy = (spec.height - 1) * 0.5 + rng.uniform(-1.5, 1.5);
            const double radius = half * 0.52 * rng.uniform(0.85, 1.15);
            const double thick = rng.uniform(0.9, 1.5);
            const double angle = rng.uniform(-0.18, 0.18);
            const double intensity = rng.uniform(0.75, 1.0);
            const double ca = std::cos(angle), sa = std::sin(angle);
            float* px = set.image(img);
            for (size_t y = 0; y < spec.height; ++y) {
                for (size_t x = 0; x < spec.width; ++x) {
                    const double dx = static_cast<double>(x) - cx;
                    const double dy = static_cast<double>(y) - cy;
                    const double rx = ca * dx - sa * dy;
                    const double ry = sa * dx + ca * dy;
                    const double d = glyph_dist(static_cast<int>(cls), rx, ry, radius, thick);
                    const double v = intensity * smooth_edge(d, 1.2);
                    px[y * spec.width + x] = quantize_u8(v);
                }
            }
            set.labels[img] = static_cast<int>(cls);
        }
    }
    return set;
}

std::pair<ImageSet, ImageSet> synth_domain_pair(const ImageSet& base, ShiftKind shift, double param,
                                                uint64_t seed) {
    if (base.count == 0) throw DataError("synth_domain_pair: base set is empty");

    ImageSet source = shift == ShiftKind::colorize_background ? promote_to_rgb(base) : base;
    source.domain = Domain::source;

    ImageSet target = source;
    target.domain = Domain::target;
    target.provenance = source.provenance + "+" + shift_name(shift);
    const size_t h = source.height, w = source.width, c = source.channels;

    for (size_t i = 0; i < source.count; ++i) {
        Rng rng(derive_seed(seed, {static_cast<uint64_t>(shift) + 0xD0, i}));
        const float* src = source.image(i);
        float* dst = target.image(i);
        switch (shift) {
            case ShiftKind::invert: {
                for (size_t j = 0; j < source.image_size(); ++j) dst[j] = quantize_u8(1.0 - src[j]);
                break;
            }
            case ShiftKind::colorize_background: {
                // Dark glyph composited over a low-frequency color field.
                std::vector<double> field[3];
                for (int ch = 0; ch < 3; ++ch) low_freq_field(rng, h, w, 0.25, 0.95, field[ch]);
                const float* gray = base.image(i);
                for (size_t p = 0; p < h * w; ++p) {
                    const double g = gray[p];
                    for (int ch = 0; ch < 3; ++ch) {
                        dst[p * 3 + ch] = quantize_u8((1.0 - g) * field[ch][p] + g * 0.05);
                    }
                }
                break;
            }
            case ShiftKind::noise_blend: {
                const double wgt = param;
                if (wgt < 0.0 || wgt > 1.0) throw ConfigError("noise_blend: weight must be in [0,1]");
                if (wgt == 0.0) break; // target stays identical to source
                for (size_t j = 0; j < source.image_size(); ++j) {
                    dst[j] = quantize_u8((1.0 - wgt) * src[j] + wgt * rng.uniform());
                }
                break;
            }
            case ShiftKind::affine_jitter: {
                const double max_rot = param > 0.0 ? param : 0.3;
                const double theta = rng.uniform(-max_rot, max_rot);
                const double scale = rng.uniform(0.9, 1.1);
                const double tx = rng.uniform(-2.0, 2.0);
                const double ty = rng.uniform(-2.0, 2.0);
                const double ca = std::cos(theta) / scale, sa = std::sin(theta) / scale;
                const double cx = (w - 1) * 0.5, cy = (h - 1) * 0.5;
                for (size_t y = 0; y < h; ++y) {
                    for (size_t x = 0; x < w; ++x) {
                        const double dx = static_cast<double>(x) - cx - tx;
                        const double dy = static_cast<double>(y) - cy - ty;
                        const double sx = ca * dx + sa * dy + cx;
                        const double sy = -sa * dx + ca * dy + cy;
                        for (size_t ch = 0; ch < c; ++ch) {
                            dst[(y * w + x) * c + ch] =
                                quantize_u8(bilinear_at(src, h, w, c, sy, sx, ch));
                        }
                    }
                }
                break;
            }
        }
    }
    return {std::move(source), std::move(target)};
}

} // namespace cda
