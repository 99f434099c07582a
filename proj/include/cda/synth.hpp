#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "cda/idx.hpp"

namespace cda {

// Procedural shifts applied to a base set to synthesize a target domain.
enum class ShiftKind { invert, colorize_background, noise_blend, affine_jitter };

ShiftKind shift_from_string(const std::string& name);
const char* shift_name(ShiftKind kind);

// Parametric glyph classes rendered at low resolution: ring, plus, bars,
// diagonal cross, box, disc, vee, checker. Distinct enough for a linear
// probe on decent features, jittered enough that augmentation matters.
struct GlyphSpec {
    size_t classes = 6; // <= 8
    size_t per_class = 350;
    size_t height = 16;
    size_t width = 16;

    void validate() const;
};

ImageSet synth_glyphs(const GlyphSpec& spec, uint64_t seed);

// Source keeps the base pixels (promoted to 3 channels when the shift
// colorizes); target is a deterministically shifted copy with identical
// labels. `param` is the shift strength: blend weight for noise_blend,
// max rotation in radians for affine_jitter, unused otherwise.
std::pair<ImageSet, ImageSet> synth_domain_pair(const ImageSet& base, ShiftKind shift, double param,
                                                uint64_t seed);

} // namespace cda
