#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cda/tensor.hpp"

namespace cda {

enum class Domain { source, target };

inline const char* domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }
inline uint64_t domain_tag(Domain d) { return d == Domain::source ? 1 : 2; }

// A loaded digit-style dataset. Pixels are channels-last floats in [0, 1];
// every creation path quantizes to the k/255 grid so IDX round-trips are
// exact. Read-only after load.
struct ImageSet {
    size_t count = 0;
    size_t height = 0;
    size_t width = 0;
    size_t channels = 1;
    std::vector<float> pixels; // count*height*width*channels
    std::vector<int> labels;   // empty or one per image
    Domain domain = Domain::source;
    std::string provenance;

    size_t image_size() const { return height * width * channels; }
    bool has_labels() const { return !labels.empty(); }
    int num_classes() const;

    const float* image(size_t i) const { return pixels.data() + i * image_size(); }
    float* image(size_t i) { return pixels.data() + i * image_size(); }

    // (n, h, w, c) tensor of the selected images.
    Tensor gather(std::span<const size_t> indices) const;
    Tensor gather_all() const;

    void validate() const;
};

// Snap a pixel to the nearest representable 8-bit value.
float quantize_u8(double v);

// IDX container content: unsigned-byte images (magic 0x00000803 for
// count x h x w, 0x00000804 for count x h x w x c) or labels
// (magic 0x00000801).
struct IdxContent {
    std::optional<ImageSet> images;
    std::optional<std::vector<int>> labels;
};

IdxContent read_idx(const std::string& path);
ImageSet read_idx_images(const std::string& path);
std::vector<int> read_idx_labels(const std::string& path);

// Images plus optional label file, validated against each other.
ImageSet load_image_set(const std::string& images_path, const std::string& labels_path = "",
                        Domain domain = Domain::source);

void write_idx_images(const std::string& path, const ImageSet& set);
void write_idx_labels(const std::string& path, const std::vector<int>& labels);

} // namespace cda
