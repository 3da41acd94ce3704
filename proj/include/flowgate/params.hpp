#pragma once
// Named parameter store with per-tensor frozen flags, deterministic seeded
// initialization, and single-file checkpoints (JSON header + raw little-endian
// payloads in header order).

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "flowgate/tensor.hpp"

namespace flowgate {

// scheme: "normal-scaled" (N(0, 1/sqrt(fan_in)), fan_in = numel/last_dim),
// "zeros", "ones". Same (shape, seed, scheme) gives bitwise-identical values
// at the same dtype.
Tensor seeded_init(const Shape& shape, uint64_t seed, const std::string& scheme,
                   DType dt = DType::F32);

struct ParamStore {
    struct Entry {
        Tensor t;
        bool frozen = false;
        uint64_t seed = 0;
        std::string scheme;
    };

    uint64_t master_seed = 0;
    DType dtype = DType::F32;
    std::map<std::string, Entry> entries;  // sorted; checkpoint order

    // Creates a tensor seeded from mix(master_seed, name). Name must be new.
    Tensor create(const std::string& name, const Shape& shape, const std::string& scheme);
    // create() unless the name already exists (e.g. loaded from a checkpoint).
    Tensor ensure(const std::string& name, const Shape& shape, const std::string& scheme);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return entries.count(name) != 0; }

    void set_frozen(const std::string& prefix, bool frozen);
    bool is_frozen(const std::string& name) const;

    std::vector<std::string> names_with_prefix(const std::string& prefix) const;
    std::vector<std::string> trainable_names() const;
    int64_t trainable_scalar_count() const;

    void zero_grads();

    // Deep copy with values cast to dt (graph-free leaves).
    ParamStore cast(DType dt) const;

    void save(const std::string& path) const;
    // Merges entries from a checkpoint file; existing names are overwritten.
    // force_trainable drops the stored frozen flags.
    void load_file(const std::string& path, bool force_trainable = false);
    static ParamStore load(const std::string& path);
};

}  // namespace flowgate
