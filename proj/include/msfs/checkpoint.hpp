#pragma once

// Byte layout (all integers little-endian):
//   8   magic "MSFSCKPT"
//   u32 format version (1)
//   u32 n, then n bytes of model config text ("key = value" lines)
//   u64 training step
//   u64 root seed
//   u32 number of entries, then per entry:
//       u32 n, n bytes of parameter path
//       u32 rank, rank x u64 dims
//       prod(dims) x float32 (IEEE-754, little-endian)

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msfs/network.hpp"

namespace msfs {

inline constexpr char kCheckpointMagic[8] = {'M', 'S', 'F', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string path;
    Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    ModelConfig config;
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    std::vector<CheckpointEntry> entries;
};

inline std::string config_text(const ModelConfig& c) {
    std::string s;
    for (const auto& [k, v] : to_key_values(c)) s += k + " = " + v + "\n";
    return s;
}

inline ModelConfig parse_config_text(const std::string& text) {
    ModelConfig c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) throw CheckpointError("malformed config line in checkpoint: " + line);
        try {
            set_model_key(c, line.substr(0, eq), line.substr(eq + 3));
        } catch (const ConfigError& e) {
            throw CheckpointError(std::string("checkpoint config: ") + e.what());
        }
    }
    return c;
}

namespace detail {

class ByteWriter {
public:
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f32(float v) { put(std::bit_cast<std::uint32_t>(v), 4); }
    void bytes(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_.append(s);
    }
    void raw(const char* p, std::size_t n) { buf_.append(p, n); }
    const std::string& str() const { return buf_; }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    std::string buf_;
};

class ByteReader {
public:
    ByteReader(std::string data, std::string origin) : d_(std::move(data)), origin_(std::move(origin)) {}
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(get(4))); }
    std::string bytes() {
        const std::uint32_t n = u32();
        need(n);
        std::string s = d_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string raw(std::size_t n) {
        need(n);
        std::string s = d_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == d_.size(); }

private:
    void need(std::size_t n) {
        if (d_.size() - pos_ < n) throw CheckpointError(origin_ + ": truncated checkpoint");
    }
    std::uint64_t get(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= std::uint64_t(static_cast<unsigned char>(d_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    std::string d_;
    std::string origin_;
    std::size_t pos_ = 0;
};

} // namespace detail

template <typename T>
std::string serialize_checkpoint(const Model<T>& model, std::uint64_t step, std::uint64_t seed) {
    detail::ByteWriter w;
    w.raw(kCheckpointMagic, 8);
    w.u32(kCheckpointVersion);
    w.bytes(config_text(model.config()));
    w.u64(step);
    w.u64(seed);
    const auto& entries = model.parameters().entries();
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& [path, v] : entries) {
        w.bytes(path);
        w.u32(static_cast<std::uint32_t>(v.shape().size()));
        for (auto d : v.shape()) w.u64(d);
        for (T x : v.value().values()) w.f32(static_cast<float>(x));
    }
    return w.str();
}

/// Writes through a temporary file and renames, so an existing checkpoint is
/// only replaced by a complete one.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, std::uint64_t step,
                     std::uint64_t seed) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw CheckpointError("cannot open " + tmp.string() + " for writing");
        const auto bytes = serialize_checkpoint(model, step, seed);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw CheckpointError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint parse_checkpoint(std::string data, const std::string& origin) {
    detail::ByteReader r(std::move(data), origin);
    if (r.raw(8) != std::string(kCheckpointMagic, 8)) throw CheckpointError(origin + ": not a checkpoint (bad magic)");
    if (const auto v = r.u32(); v != kCheckpointVersion)
        throw CheckpointError(origin + ": unsupported checkpoint version " + std::to_string(v));
    Checkpoint ck;
    ck.config = parse_config_text(r.bytes());
    ck.step = r.u64();
    ck.seed = r.u64();
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        CheckpointEntry e;
        e.path = r.bytes();
        const std::uint32_t rank = r.u32();
        if (rank > 8) throw CheckpointError(origin + ": implausible rank for " + e.path);
        for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(static_cast<std::size_t>(r.u64()));
        e.values.resize(shape_numel(e.shape));
        for (auto& x : e.values) x = r.f32();
        ck.entries.push_back(std::move(e));
    }
    if (!r.done()) throw CheckpointError(origin + ": trailing bytes after last entry");
    return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_checkpoint(ss.str(), path.string());
}

/// Copies checkpoint values into a model. Paths must match one to one and
/// shapes exactly.
template <typename T>
void apply_checkpoint(const Checkpoint& ck, Model<T>& model) {
    auto& store = model.parameters();
    std::set<std::string> seen;
    for (const auto& e : ck.entries) {
        if (!store.contains(e.path)) throw CheckpointError("checkpoint parameter " + e.path + " does not exist in the model");
        auto v = store.get(e.path);
        if (v.shape() != e.shape)
            throw CheckpointError("parameter " + e.path + ": checkpoint shape " + shape_string(e.shape) +
                                  " does not match model shape " + shape_string(v.shape()));
        auto& dst = v.mutable_value();
        for (std::size_t i = 0; i < e.values.size(); ++i) dst[i] = static_cast<T>(e.values[i]);
        seen.insert(e.path);
    }
    for (const auto& [path, _] : store.entries())
        if (!seen.count(path)) throw CheckpointError("checkpoint is missing parameter " + path);
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ck) {
    auto m = Model<T>::build(ck.config, 0);
    apply_checkpoint(ck, m);
    return m;
}

} // namespace msfs
