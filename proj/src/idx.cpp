#include "cda/idx.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "cda/errors.hpp"

namespace cda {

namespace {

constexpr uint32_t kMagicLabels = 0x00000801;
constexpr uint32_t kMagicImages3 = 0x00000803;
constexpr uint32_t kMagicImages4 = 0x00000804;
constexpr uint64_t kMaxElements = 1ULL << 33;

uint32_t read_be32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void write_be32(std::ofstream& out, uint32_t v) {
    const uint8_t buf[4] = {uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8), uint8_t(v)};
    out.write(reinterpret_cast<const char*>(buf), 4);
}

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("idx: cannot open " + path);
    in.seekg(0, std::ios::end);
    const auto len = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<uint8_t> bytes(static_cast<size_t>(len));
    in.read(reinterpret_cast<char*>(bytes.data()), len);
    if (!in) throw DataError("idx: read failure on " + path);
    return bytes;
}

std::string hex32(uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "0x%08x", v);
    return buf;
}

} // namespace

float quantize_u8(double v) {
    const double clamped = std::min(1.0, std::max(0.0, v));
    const long k = std::lround(clamped * 255.0);
    return static_cast<float>(k) / 255.0f;
}

int ImageSet::num_classes() const {
    int c = 0;
    for (int l : labels) c = std::max(c, l + 1);
    return c;
}

Tensor ImageSet::gather(std::span<const size_t> indices) const {
    Tensor out({indices.size(), height, width, channels});
    const size_t n = image_size();
    for (size_t i = 0; i < indices.size(); ++i) {
        const float* src = image(indices[i]);
        double* dst = out.data() + i * n;
        for (size_t j = 0; j < n; ++j) dst[j] = src[j];
    }
    return out;
}

Tensor ImageSet::gather_all() const {
    std::vector<size_t> idx(count);
    for (size_t i = 0; i < count; ++i) idx[i] = i;
    return gather(idx);
}

void ImageSet::validate() const {
    if (pixels.size() != count * image_size()) {
        throw DataError("image set: pixel buffer size does not match count x h x w x c");
    }
    if (!labels.empty() && labels.size() != count) {
        throw DataError("image set: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(count) + " images");
    }
    for (float v : pixels) {
        if (!(v >= 0.0f && v <= 1.0f)) throw DataError("image set: pixel outside [0,1]");
    }
}

IdxContent read_idx(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file(path);
    if (bytes.size() < 4) throw DataError("idx: " + path + " shorter than the 4-byte magic");
    const uint32_t magic = read_be32(bytes.data());

    size_t ndim = 0;
    if (magic == kMagicLabels) ndim = 1;
    else if (magic == kMagicImages3) ndim = 3;
    else if (magic == kMagicImages4) ndim = 4;
    else throw DataError("idx: bad magic " + hex32(magic) + " in " + path);

    const size_t header = 4 + 4 * ndim;
    if (bytes.size() < header) {
        throw DataError("idx: " + path + " truncated header, expected " + std::to_string(header) +
                        " bytes, got " + std::to_string(bytes.size()));
    }
    std::vector<size_t> dims(ndim);
    uint64_t total = 1;
    for (size_t i = 0; i < ndim; ++i) {
        dims[i] = read_be32(bytes.data() + 4 + 4 * i);
        total *= dims[i];
        if (total > kMaxElements) {
            throw DataError("idx: dimension overflow in " + path + ", product exceeds " +
                            std::to_string(kMaxElements));
        }
    }
    const uint64_t actual_payload = bytes.size() - header;
    if (actual_payload != total) {
        throw DataError("idx: " + path + " truncated payload, expected " + std::to_string(total) +
                        " bytes, got " + std::to_string(actual_payload));
    }

    IdxContent content;
    if (magic == kMagicLabels) {
        std::vector<int> labels(dims[0]);
        for (size_t i = 0; i < dims[0]; ++i) labels[i] = bytes[header + i];
        content.labels = std::move(labels);
        return content;
    }

    ImageSet set;
    set.count = dims[0];
    set.height = dims[1];
    set.width = dims[2];
    set.channels = ndim == 4 ? dims[3] : 1;
    set.provenance = path;
    set.pixels.resize(total);
    for (uint64_t i = 0; i < total; ++i) {
        set.pixels[i] = static_cast<float>(bytes[header + i]) / 255.0f;
    }
    content.images = std::move(set);
    return content;
}

ImageSet read_idx_images(const std::string& path) {
    IdxContent content = read_idx(path);
    if (!content.images) throw DataError("idx: " + path + " holds labels, expected images");
    return std::move(*content.images);
}

std::vector<int> read_idx_labels(const std::string& path) {
    IdxContent content = read_idx(path);
    if (!content.labels) throw DataError("idx: " + path + " holds images, expected labels");
    return std::move(*content.labels);
}

ImageSet load_image_set(const std::string& images_path, const std::string& labels_path, Domain domain) {
    ImageSet set = read_idx_images(images_path);
    set.domain = domain;
    if (!labels_path.empty()) {
        set.labels = read_idx_labels(labels_path);
        if (set.labels.size() != set.count) {
            throw DataError("idx: " + std::to_string(set.labels.size()) + " labels in " + labels_path +
                            " for " + std::to_string(set.count) + " images in " + images_path);
        }
    }
    return set;
}

void write_idx_images(const std::string& path, const ImageSet& set) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("idx: cannot write " + path);
    if (set.channels == 1) {
        write_be32(out, kMagicImages3);
        write_be32(out, static_cast<uint32_t>(set.count));
        write_be32(out, static_cast<uint32_t>(set.height));
        write_be32(out, static_cast<uint32_t>(set.width));
    } else {
        write_be32(out, kMagicImages4);
        write_be32(out, static_cast<uint32_t>(set.count));
        write_be32(out, static_cast<uint32_t>(set.height));
        write_be32(out, static_cast<uint32_t>(set.width));
        write_be32(out, static_cast<uint32_t>(set.channels));
    }
    std::vector<uint8_t> bytes(set.pixels.size());
    for (size_t i = 0; i < set.pixels.size(); ++i) {
        bytes[i] = static_cast<uint8_t>(std::lround(set.pixels[i] * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("idx: write failure on " + path);
}

void write_idx_labels(const std::string& path, const std::vector<int>& labels) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("idx: cannot write " + path);
    write_be32(out, kMagicLabels);
    write_be32(out, static_cast<uint32_t>(labels.size()));
    std::vector<uint8_t> bytes(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) bytes[i] = static_cast<uint8_t>(labels[i]);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("idx: write failure on " + path);
}

} // namespace cda
