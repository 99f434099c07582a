#include "cda/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "cda/errors.hpp"

namespace cda {

namespace {

constexpr char kMagic[8] = {'C', 'D', 'A', 'C', 'K', 'P', 'T', '\n'};
constexpr uint32_t kVersion = 1;

void put_bytes(std::string& buf, const void* p, size_t n) {
    buf.append(static_cast<const char*>(p), n);
}

void put_u8(std::string& buf, uint8_t v) { buf.push_back(static_cast<char>(v)); }

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

uint64_t fnv1a64(const std::string& buf) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : buf) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Reader {
public:
    explicit Reader(std::string data) : data_(std::move(data)) {}

    size_t pos() const { return pos_; }
    size_t size() const { return data_.size(); }
    const std::string& data() const { return data_; }

    void need(size_t n) const {
        if (pos_ + n > data_.size()) {
            throw DataError("checkpoint: corrupt payload, expected " + std::to_string(pos_ + n) +
                            " bytes, file has " + std::to_string(data_.size()));
        }
    }
    void read(void* dst, size_t n) {
        need(n);
        std::memcpy(dst, data_.data() + pos_, n);
        pos_ += n;
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(data_[pos_++]);
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    std::string str(size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    std::string data_;
    size_t pos_ = 0;
};

void put_tensor_entry(std::string& buf, uint8_t kind, const std::string& name, const Tensor& t,
                      TensorDtype dtype) {
    put_u8(buf, kind);
    put_u32(buf, static_cast<uint32_t>(name.size()));
    put_bytes(buf, name.data(), name.size());
    put_u8(buf, static_cast<uint8_t>(dtype));
    put_u32(buf, static_cast<uint32_t>(t.rank()));
    for (size_t d : t.shape()) put_u64(buf, d);
    if (dtype == TensorDtype::f64) {
        for (size_t i = 0; i < t.size(); ++i) put_u64(buf, std::bit_cast<uint64_t>(t[i]));
    } else {
        for (size_t i = 0; i < t.size(); ++i) {
            put_u32(buf, std::bit_cast<uint32_t>(static_cast<float>(t[i])));
        }
    }
}

Tensor read_tensor_entry(Reader& r) {
    const auto dtype = static_cast<TensorDtype>(r.u8());
    if (dtype != TensorDtype::f64 && dtype != TensorDtype::f32) {
        throw DataError("checkpoint: unknown tensor dtype tag");
    }
    const uint32_t ndim = r.u32();
    if (ndim == 0 || ndim > 8) throw DataError("checkpoint: corrupt tensor rank");
    Shape shape(ndim);
    for (uint32_t i = 0; i < ndim; ++i) shape[i] = r.u64();
    Tensor t(shape);
    if (dtype == TensorDtype::f64) {
        for (size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<double>(r.u64());
    } else {
        for (size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<float>(r.u32());
    }
    return t;
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path, TensorDtype dtype) {
    std::string buf;
    put_bytes(buf, kMagic, sizeof(kMagic));
    put_u32(buf, kVersion);
    put_u64(buf, ckpt.config_json.size());
    put_bytes(buf, ckpt.config_json.data(), ckpt.config_json.size());
    put_u64(buf, ckpt.base_seed);
    put_u32(buf, ckpt.epochs_completed);
    put_u64(buf, ckpt.global_step);

    const uint32_t entries = static_cast<uint32_t>(ckpt.store.names.size() +
                                                   ckpt.store.buffer_names.size() + ckpt.opt_state.size());
    put_u32(buf, entries);
    for (const std::string& name : ckpt.store.names) {
        put_tensor_entry(buf, 0, name, ckpt.store.param(name), dtype);
    }
    for (const std::string& name : ckpt.store.buffer_names) {
        put_tensor_entry(buf, 1, name, ckpt.store.buffer(name), dtype);
    }
    // Optimizer state follows parameter order for a deterministic file.
    for (const std::string& name : ckpt.store.names) {
        auto it = ckpt.opt_state.find(name);
        if (it != ckpt.opt_state.end()) put_tensor_entry(buf, 2, name, it->second, dtype);
    }
    put_u64(buf, fnv1a64(buf));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("checkpoint: cannot write " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError("checkpoint: write failure on " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (data.size() < sizeof(kMagic) + 4 + 8) {
        throw DataError("checkpoint: corrupt payload, file too short (" + std::to_string(data.size()) +
                        " bytes)");
    }
    const std::string body = data.substr(0, data.size() - 8);
    Reader tail(data.substr(data.size() - 8));
    if (fnv1a64(body) != tail.u64()) {
        throw DataError("checkpoint: checksum mismatch in " + path);
    }

    Reader r(body);
    char magic[8];
    r.read(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw DataError("checkpoint: bad magic in " + path);
    }
    Checkpoint ckpt;
    ckpt.version = r.u32();
    if (ckpt.version != kVersion) {
        throw DataError("checkpoint: unsupported format version " + std::to_string(ckpt.version));
    }
    const uint64_t cfg_len = r.u64();
    ckpt.config_json = r.str(cfg_len);
    ckpt.base_seed = r.u64();
    ckpt.epochs_completed = r.u32();
    ckpt.global_step = r.u64();

    const uint32_t entries = r.u32();
    for (uint32_t i = 0; i < entries; ++i) {
        const uint8_t kind = r.u8();
        const uint32_t name_len = r.u32();
        const std::string name = r.str(name_len);
        Tensor t = read_tensor_entry(r);
        switch (kind) {
            case 0: ckpt.store.add_param(name, std::move(t)); break;
            case 1: ckpt.store.add_buffer(name, std::move(t)); break;
            case 2: ckpt.opt_state.emplace(name, std::move(t)); break;
            default: throw DataError("checkpoint: unknown entry kind");
        }
    }
    if (r.pos() != r.size()) {
        throw DataError("checkpoint: corrupt payload, " + std::to_string(r.size() - r.pos()) +
                        " trailing bytes");
    }
    return ckpt;
}

} // namespace cda
