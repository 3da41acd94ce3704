#include "flowgate/params.hpp"

#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>

#include "flowgate/rng.hpp"

namespace flowgate {

using json = nlohmann::json;

Tensor seeded_init(const Shape& shape, uint64_t seed, const std::string& scheme, DType dt) {
    Tensor t(make_node(shape, dt, "param"));
    int64_t n = shape_numel(shape);
    if (scheme == "zeros") return t;
    if (scheme == "ones") {
        for (int64_t i = 0; i < n; ++i) t.set(i, 1.0);
        return t;
    }
    if (scheme == "normal-scaled") {
        int64_t last = shape.empty() ? 1 : shape.back();
        int64_t fan_in = std::max<int64_t>(1, n / std::max<int64_t>(1, last));
        double sigma = 1.0 / std::sqrt(static_cast<double>(fan_in));
        Rng rng(seed);
        // Draw in double and cast so f32/f64 stores agree in value.
        if (dt == DType::F32) {
            auto& v = t.vals<float>();
            for (int64_t i = 0; i < n; ++i)
                v[static_cast<size_t>(i)] = static_cast<float>(rng.next_normal() * sigma);
        } else {
            auto& v = t.vals<double>();
            for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = rng.next_normal() * sigma;
        }
        return t;
    }
    throw std::runtime_error("seeded_init: unknown scheme '" + scheme + "'");
}

Tensor ParamStore::create(const std::string& name, const Shape& shape, const std::string& scheme) {
    if (entries.count(name))
        throw std::runtime_error("ParamStore: duplicate parameter name '" + name + "'");
    uint64_t seed = mix_seed(master_seed, name);
    Entry e;
    e.t = seeded_init(shape, seed, scheme, dtype);
    e.t.set_requires_grad(true);
    e.frozen = false;
    e.seed = seed;
    e.scheme = scheme;
    entries.emplace(name, e);
    return e.t;
}

Tensor ParamStore::ensure(const std::string& name, const Shape& shape,
                          const std::string& scheme) {
    auto it = entries.find(name);
    if (it == entries.end()) return create(name, shape, scheme);
    if (it->second.t.shape() != shape)
        throw ShapeError("ParamStore: '" + name + "' has shape " +
                         shape_str(it->second.t.shape()) + ", expected " + shape_str(shape));
    return it->second.t;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("ParamStore: missing parameter '" + name + "'");
    return it->second.t;
}

void ParamStore::set_frozen(const std::string& prefix, bool frozen) {
    for (auto& [name, e] : entries) {
        if (name.rfind(prefix, 0) == 0) {
            e.frozen = frozen;
            e.t.set_requires_grad(!frozen);
        }
    }
}

bool ParamStore::is_frozen(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("ParamStore: missing parameter '" + name + "'");
    return it->second.frozen;
}

std::vector<std::string> ParamStore::names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries)
        if (name.rfind(prefix, 0) == 0) out.push_back(name);
    return out;
}

std::vector<std::string> ParamStore::trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries)
        if (!e.frozen) out.push_back(name);
    return out;
}

int64_t ParamStore::trainable_scalar_count() const {
    int64_t n = 0;
    for (const auto& [name, e] : entries)
        if (!e.frozen) n += e.t.numel();
    return n;
}

void ParamStore::zero_grads() {
    for (auto& [name, e] : entries) e.t.zero_grad();
}

ParamStore ParamStore::cast(DType dt) const {
    ParamStore out;
    out.master_seed = master_seed;
    out.dtype = dt;
    for (const auto& [name, e] : entries) {
        Entry ne;
        ne.t = e.t.astype(dt);
        ne.t.set_requires_grad(!e.frozen);
        ne.frozen = e.frozen;
        ne.seed = e.seed;
        ne.scheme = e.scheme;
        out.entries.emplace(name, ne);
    }
    return out;
}

static const char kMagic[8] = {'F', 'G', 'C', 'K', 'P', 'T', '1', '\n'};

void ParamStore::save(const std::string& path) const {
    json header;
    header["format"] = "flowgate-ckpt-v1";
    header["master_seed"] = master_seed;
    json params = json::array();
    for (const auto& [name, e] : entries) {
        json p;
        p["name"] = name;
        p["shape"] = e.t.shape();
        p["dtype"] = dtype_name(e.t.dtype());
        p["frozen"] = e.frozen;
        p["seed"] = e.seed;
        p["scheme"] = e.scheme;
        params.push_back(p);
    }
    header["params"] = params;
    std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint save: cannot open " + path);
    f.write(kMagic, 8);
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, e] : entries) {
        if (e.t.dtype() == DType::F32) {
            const auto& v = e.t.vals<float>();
            f.write(reinterpret_cast<const char*>(v.data()),
                    static_cast<std::streamsize>(v.size() * sizeof(float)));
        } else {
            const auto& v = e.t.vals<double>();
            f.write(reinterpret_cast<const char*>(v.data()),
                    static_cast<std::streamsize>(v.size() * sizeof(double)));
        }
    }
    if (!f) throw std::runtime_error("checkpoint save: write failed for " + path);
}

void ParamStore::load_file(const std::string& path, bool force_trainable) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint load: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("checkpoint load: bad magic in " + path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    json header = json::parse(hs);
    for (const auto& p : header["params"]) {
        std::string name = p["name"];
        Shape shape = p["shape"].get<Shape>();
        std::string dts = p["dtype"];
        DType dt = dts == "f32" ? DType::F32 : DType::F64;
        Entry e;
        e.frozen = force_trainable ? false : p["frozen"].get<bool>();
        e.seed = p["seed"].get<uint64_t>();
        e.scheme = p["scheme"].get<std::string>();
        e.t = Tensor(make_node(shape, dt, "param"));
        size_t count = static_cast<size_t>(shape_numel(shape));
        if (dt == DType::F32)
            f.read(reinterpret_cast<char*>(e.t.vals<float>().data()),
                   static_cast<std::streamsize>(count * sizeof(float)));
        else
            f.read(reinterpret_cast<char*>(e.t.vals<double>().data()),
                   static_cast<std::streamsize>(count * sizeof(double)));
        if (!f) throw std::runtime_error("checkpoint load: truncated payload in " + path);
        e.t.set_requires_grad(!e.frozen);
        entries[name] = e;
        if (dtype != dt) dtype = dt;
    }
    if (header.contains("master_seed")) master_seed = header["master_seed"].get<uint64_t>();
}

ParamStore ParamStore::load(const std::string& path) {
    ParamStore ps;
    ps.load_file(path);
    return ps;
}

}  // namespace flowgate
