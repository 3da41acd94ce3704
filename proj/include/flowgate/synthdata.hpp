#pragma once
// Procedural latent-edit corpus: smooth random source fields on a 64x64
// generation grid, rectangle edits (recolor / erase / pattern swap), exact
// masks, symbolic instructions through a frozen toy encoder, and
// deterministic train/val/test splits with held-out rectangle positions.

#include <cstdint>
#include <string>
#include <vector>

#include "flowgate/params.hpp"
#include "flowgate/tensor.hpp"

namespace flowgate {

struct SynthConfig {
    int gen_h = 64, gen_w = 64;
    int latent_h = 16, latent_w = 16;
    int channels = 4;
    int instr_len = 16;  // token sequence length, padded
    int vocab = 64;
    int enc_dim = 32, enc_layers = 2, enc_heads = 2;  // frozen instruction encoder
    uint64_t master_seed = 9000;
    int train_n = 4096, val_n = 256, test_n = 256;
    double min_area_frac = 0.04, max_area_frac = 0.40;

    int downsample() const { return gen_h / latent_h; }
    int hidden_width() const { return enc_layers * enc_dim; }  // stacked layers
};

enum TaskKind : int { kRecolor = 0, kErase = 1, kPatternSwap = 2 };

struct TaskSpec {
    int kind = 0;
    int x0 = 0, y0 = 0, w = 0, h = 0;  // generation-grid pixels
    int payload = 0;
};

struct EditSample {
    uint64_t seed = 0;
    TaskSpec spec;
    std::vector<float> source;        // [C, Hl, Wl]
    std::vector<float> target;        // [C, Hl, Wl]
    std::vector<uint8_t> mask_hi;     // [gen_h * gen_w], 0/1
    std::vector<int64_t> instr_tokens;  // [instr_len]
    std::vector<float> instr_hidden;    // [enc_layers, instr_len, enc_dim]
};

class InstructionEncoder {
  public:
    explicit InstructionEncoder(const SynthConfig& cfg);
    // Returns all layer outputs, [enc_layers, T, enc_dim]. Rejects ids
    // outside the vocabulary and empty sequences.
    std::vector<float> encode(const std::vector<int64_t>& tokens) const;
    const ParamStore& params() const { return ps_; }

  private:
    SynthConfig cfg_;
    ParamStore ps_;
    Tensor pe_;
};

struct CorpusSplit {
    std::vector<uint64_t> train, val, test;
};

// Disjoint seed ranges per split, reproducible from the master seed.
CorpusSplit make_splits(uint64_t master_seed, int train_n, int val_n, int test_n);

// Rectangle-position region id used to hold out positions for val/test.
int position_region(int x0, int y0);  // 0..7; train uses 0..5, val 6, test 7

// Draws a TaskSpec whose position falls in the split's region.
// split: 0 train, 1 val, 2 test.
TaskSpec sample_task(uint64_t seed, const SynthConfig& cfg, int split);

// Builds the full sample; rejects specs whose rect leaves the grid or whose
// area is outside the configured band.
EditSample gen_sample(const TaskSpec& spec, uint64_t seed, const SynthConfig& cfg,
                      const InstructionEncoder& enc);

class Corpus {
  public:
    explicit Corpus(const SynthConfig& cfg);

    const SynthConfig& config() const { return cfg_; }
    const InstructionEncoder& encoder() const { return enc_; }
    const std::vector<EditSample>& split(const std::string& name) const;

    // Optional on-disk cache: one binary record stream + JSON sidecar per
    // split shard. Content is identical to regeneration from seeds.
    void materialize(const std::string& dir) const;

  private:
    SynthConfig cfg_;
    InstructionEncoder enc_;
    std::vector<EditSample> train_, val_, test_;
};

}  // namespace flowgate
