#include "clu/checkpoint.hpp"

#include "clu/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace clu {

namespace {

constexpr char kMagic[8] = {'C', 'L', 'U', 'C', 'K', 'P', 'T', '\0'};

class Writer {
public:
    void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }

    template <typename U>
    void uint(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
        }
    }
    void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) { uint(v); }
    void u64(std::uint64_t v) { uint(v); }
    void i32(std::int32_t v) { uint(static_cast<std::uint32_t>(v)); }
    void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
    void str32(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(const std::string& in) : in_(in) {}

    void need(std::size_t n) const {
        if (n > in_.size() - pos_) {
            throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
        }
    }
    template <typename U>
    U uint() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            v |= static_cast<U>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(U);
        return v;
    }
    std::uint8_t u8() { return uint<std::uint8_t>(); }
    std::uint32_t u32() { return uint<std::uint32_t>(); }
    std::uint64_t u64() { return uint<std::uint64_t>(); }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    const std::string& in_;
    std::size_t pos_ = 0;
};

struct Record {
    std::string name;
    RecordTag tag = RecordTag::model;
    Tensor tensor;
};

RecordTag tag_for(BundleMode mode, Pathway p) {
    if (mode == BundleMode::shared) {
        return RecordTag::shared;
    }
    switch (p) {
        case Pathway::retain: return RecordTag::retain;
        case Pathway::novel: return RecordTag::novel;
        case Pathway::forget: return RecordTag::forget;
    }
    return RecordTag::retain;
}

std::vector<Record> collect(const Checkpoint& ckpt) {
    std::vector<Record> out;
    for (const auto& p : ckpt.model.parameters()) {
        out.push_back({p.name, RecordTag::model, p.tensor});
    }
    if (ckpt.bundle) {
        const auto& b = *ckpt.bundle;
        for (std::size_t l = 0; l < b.num_layers(); ++l) {
            for (const auto* a : b.adapters(l)) {
                const std::string base =
                    "adapter." + std::to_string(l) + "." + std::string(pathway_name(a->pathway));
                out.push_back({base + ".a", tag_for(b.mode(), a->pathway), a->a});
                out.push_back({base + ".b", tag_for(b.mode(), a->pathway), a->b});
            }
        }
    }
    return out;
}

// Parses "adapter.<layer>.<pathway>.<a|b>".
bool parse_adapter_name(const std::string& name, std::size_t& layer, Pathway& p, char& which) {
    std::istringstream ss(name);
    std::string head, l, path, ab;
    if (!std::getline(ss, head, '.') || head != "adapter" || !std::getline(ss, l, '.') ||
        !std::getline(ss, path, '.') || !std::getline(ss, ab) || (ab != "a" && ab != "b")) {
        return false;
    }
    try {
        layer = std::stoul(l);
        p = parse_pathway(path);
    } catch (const std::exception&) {
        return false;
    }
    which = ab[0];
    return true;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.bytes(kMagic, sizeof(kMagic));
    w.u32(ckpt.version);
    const std::string cfg = ckpt.config.to_json();
    w.u64(cfg.size());
    w.bytes(cfg.data(), cfg.size());
    w.i32(ckpt.task_index);
    const auto& active = ckpt.model.active_classes();
    w.u32(static_cast<std::uint32_t>(active.size()));
    for (auto c : active) {
        w.i32(c);
    }
    w.u8(ckpt.bundle ? 1 : 0);
    if (ckpt.bundle) {
        w.u8(static_cast<std::uint8_t>(ckpt.bundle->mode()));
        w.f64(ckpt.bundle->scaling());
    }
    const auto records = collect(ckpt);
    w.u32(static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        w.str32(r.name);
        w.u8(static_cast<std::uint8_t>(r.tag));
        w.u32(static_cast<std::uint32_t>(r.tensor.rank()));
        for (auto d : r.tensor.shape()) {
            w.u64(d);
        }
        for (double v : r.tensor.values()) {
            w.f64(v);
        }
    }
    return w.take();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    if (r.str(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
        throw IoError("not a checkpoint file (bad magic)");
    }
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
        throw IoError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
    }
    RunConfig config = RunConfig::from_json(r.str(r.u64()));
    const int task = r.i32();
    ClassSet active;
    for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) {
        active.insert(r.i32());
    }
    std::optional<std::pair<BundleMode, double>> bundle_meta;
    if (const auto has = r.u8(); has > 1) {
        throw IoError("checkpoint bundle flag is corrupt");
    } else if (has == 1) {
        const auto mode = r.u8();
        if (mode > static_cast<std::uint8_t>(BundleMode::shared)) {
            throw IoError("checkpoint bundle mode is corrupt");
        }
        bundle_meta.emplace(static_cast<BundleMode>(mode), r.f64());
    }

    Checkpoint ckpt(Model(config.model, 0));
    ckpt.version = version;
    ckpt.config = std::move(config);
    ckpt.task_index = task;
    std::map<std::string, Tensor> params;
    for (auto& p : ckpt.model.parameters()) {
        params.emplace(p.name, p.tensor);
    }
    std::vector<PathwayBundle::Layer> layers;
    if (bundle_meta) {
        layers.resize(ckpt.model.num_adapted_layers());
    }
    std::map<std::string, bool> seen;

    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str(r.u32());
        const auto tag = r.u8();
        if (tag > static_cast<std::uint8_t>(RecordTag::shared)) {
            throw IoError("record '" + name + "' has unknown tag " + std::to_string(tag));
        }
        const auto ndim = r.u32();
        if (ndim > 8) {
            throw IoError("checkpoint record '" + name + "' has implausible rank " + std::to_string(ndim));
        }
        Shape shape(ndim);
        for (auto& d : shape) {
            d = r.u64();
        }
        const std::size_t n = shape_numel(shape);
        if (n > bytes.size() / sizeof(double)) {
            throw IoError("checkpoint record '" + name + "' claims more values than the file holds");
        }
        r.need(n * sizeof(double));
        std::vector<double> values(n);
        for (auto& v : values) {
            v = r.f64();
        }
        if (seen[name]) {
            throw IoError("duplicate checkpoint record '" + name + "'");
        }
        seen[name] = true;

        if (static_cast<RecordTag>(tag) == RecordTag::model) {
            auto it = params.find(name);
            if (it == params.end()) {
                throw IoError("checkpoint record '" + name + "' does not belong to the model");
            }
            if (it->second.shape() != shape) {
                throw IoError("checkpoint record '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                              shape_str(it->second.shape()));
            }
            auto dst = it->second.mutable_values();
            std::copy(values.begin(), values.end(), dst.begin());
            continue;
        }
        std::size_t layer = 0;
        Pathway p = Pathway::retain;
        char which = 'a';
        if (!bundle_meta || !parse_adapter_name(name, layer, p, which) || layer >= layers.size() || shape.size() != 2) {
            throw IoError("malformed adapter record '" + name + "'");
        }
        const auto slot = bundle_meta->first == BundleMode::shared ? 0 : static_cast<std::size_t>(p);
        auto& a = layers[layer].slots[slot];
        if (!a) {
            a.emplace();
            a->pathway = p;
        }
        (which == 'a' ? a->a : a->b) = Tensor::from(shape, std::move(values));
    }
    if (!r.done()) {
        throw IoError("trailing bytes after the last checkpoint record");
    }
    for (const auto& [name, _] : params) {
        if (!seen[name]) {
            throw IoError("checkpoint is missing record '" + name + "'");
        }
    }
    ckpt.model.set_active_classes(active);
    if (bundle_meta) {
        for (auto& l : layers) {
            for (auto& s : l.slots) {
                if (s) {
                    if (s->a.rank() != 2 || s->b.rank() != 2 || s->a.dim(0) != s->b.dim(1)) {
                        throw IoError("adapter record pair is incomplete or inconsistent");
                    }
                    s->rank = s->a.dim(0);
                }
            }
        }
        ckpt.bundle.emplace(bundle_meta->first, bundle_meta->second, std::move(layers));
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const std::string bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write checkpoint '" + path + "'");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("failed writing checkpoint '" + path + "'");
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("checkpoint '" + path + "' not found");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

}  // namespace clu
