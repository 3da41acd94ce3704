#include "flowgate/synthdata.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "flowgate/ops.hpp"
#include "flowgate/rng.hpp"

namespace flowgate {

namespace {

constexpr double kTau = 6.283185307179586;

// Sinusoidal 1D positions [n, d].
Tensor sinusoid_pe(int n, int d) {
    Tensor pe = Tensor::zeros({n, d});
    auto& v = pe.vals<float>();
    for (int p = 0; p < n; ++p)
        for (int i = 0; i < d / 2; ++i) {
            double freq = std::pow(10000.0, -2.0 * i / d);
            v[static_cast<size_t>(p * d + 2 * i)] = static_cast<float>(std::sin(p * freq));
            v[static_cast<size_t>(p * d + 2 * i + 1)] = static_cast<float>(std::cos(p * freq));
        }
    return pe;
}

}  // namespace

InstructionEncoder::InstructionEncoder(const SynthConfig& cfg) : cfg_(cfg) {
    ps_.master_seed = mix_seed(cfg.master_seed, "instr-encoder");
    ps_.dtype = DType::F32;
    int d = cfg.enc_dim;
    ps_.create("enc/embed", {cfg.vocab, d}, "normal-scaled");
    for (int l = 0; l < cfg.enc_layers; ++l) {
        std::string p = "enc/block" + std::to_string(l) + "/";
        ps_.create(p + "ln1_g", {d}, "ones");
        ps_.create(p + "ln1_b", {d}, "zeros");
        for (const char* w : {"wq", "wk", "wv", "wo"}) ps_.create(p + w, {d, d}, "normal-scaled");
        ps_.create(p + "ln2_g", {d}, "ones");
        ps_.create(p + "ln2_b", {d}, "zeros");
        ps_.create(p + "ffn_w1", {d, 4 * d}, "normal-scaled");
        ps_.create(p + "ffn_b1", {4 * d}, "zeros");
        ps_.create(p + "ffn_w2", {4 * d, d}, "normal-scaled");
        ps_.create(p + "ffn_b2", {d}, "zeros");
    }
    ps_.set_frozen("enc/", true);
    pe_ = sinusoid_pe(cfg.instr_len, d);
}

std::vector<float> InstructionEncoder::encode(const std::vector<int64_t>& tokens) const {
    if (tokens.empty()) throw std::runtime_error("instruction encoder: empty token sequence");
    if (static_cast<int>(tokens.size()) != cfg_.instr_len)
        throw std::runtime_error("instruction encoder: expected " +
                                 std::to_string(cfg_.instr_len) + " tokens, got " +
                                 std::to_string(tokens.size()));
    for (int64_t t : tokens)
        if (t < 0 || t >= cfg_.vocab)
            throw std::runtime_error("instruction encoder: unknown symbol id " + std::to_string(t));
    NoGradGuard ng;
    int d = cfg_.enc_dim, T = cfg_.instr_len;
    Tensor x = embedding(ps_.get("enc/embed"), tokens, {1, T});
    x = add(x, pe_);
    std::vector<float> out;
    out.reserve(static_cast<size_t>(cfg_.enc_layers * T * d));
    for (int l = 0; l < cfg_.enc_layers; ++l) {
        std::string p = "enc/block" + std::to_string(l) + "/";
        Tensor h = layer_norm(x, ps_.get(p + "ln1_g"), ps_.get(p + "ln1_b"));
        Tensor att = attention(matmul(h, ps_.get(p + "wq")), matmul(h, ps_.get(p + "wk")),
                               matmul(h, ps_.get(p + "wv")), cfg_.enc_heads);
        x = add(x, matmul(att, ps_.get(p + "wo")));
        Tensor h2 = layer_norm(x, ps_.get(p + "ln2_g"), ps_.get(p + "ln2_b"));
        Tensor f = matmul(silu(add(matmul(h2, ps_.get(p + "ffn_w1")), ps_.get(p + "ffn_b1"))),
                          ps_.get(p + "ffn_w2"));
        x = add(x, add(f, ps_.get(p + "ffn_b2")));
        const auto& xv = x.vals<float>();
        out.insert(out.end(), xv.begin(), xv.end());
    }
    return out;
}

CorpusSplit make_splits(uint64_t master_seed, int train_n, int val_n, int test_n) {
    if (train_n <= 0 || val_n <= 0 || test_n <= 0)
        throw std::runtime_error("make_splits: sizes must be positive");
    CorpusSplit s;
    auto fill = [&](std::vector<uint64_t>& dst, int base, int n) {
        dst.reserve(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i)
            dst.push_back(mix_seed(master_seed, "sample-" + std::to_string(base + i)));
    };
    fill(s.train, 0, train_n);
    fill(s.val, train_n, val_n);
    fill(s.test, train_n + val_n, test_n);
    return s;
}

int position_region(int x0, int y0) { return (x0 * 31 + y0 * 17) % 8; }

namespace {

bool region_allowed(int region, int split) {
    if (split == 0) return region <= 5;
    if (split == 1) return region == 6;
    return region == 7;
}

}  // namespace

TaskSpec sample_task(uint64_t seed, const SynthConfig& cfg, int split) {
    Rng rng(mix_seed(seed, "task"));
    double area_lo = cfg.min_area_frac * cfg.gen_h * cfg.gen_w;
    double area_hi = cfg.max_area_frac * cfg.gen_h * cfg.gen_w;
    TaskSpec spec;
    spec.kind = static_cast<int>(rng.next_below(3));
    spec.payload = static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.vocab - 1)));
    int lo_w = std::max(2, cfg.gen_w / 8), lo_h = std::max(2, cfg.gen_h / 8);
    int span_w = std::max<int>(1, cfg.gen_w - cfg.gen_w / 5 - lo_w);
    int span_h = std::max<int>(1, cfg.gen_h - cfg.gen_h / 5 - lo_h);
    for (int attempt = 0; attempt < 10000; ++attempt) {
        int w = lo_w + static_cast<int>(rng.next_below(static_cast<uint64_t>(span_w)));
        int h = lo_h + static_cast<int>(rng.next_below(static_cast<uint64_t>(span_h)));
        double area = static_cast<double>(w) * h;
        if (area < area_lo || area > area_hi) continue;
        int x0 = static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.gen_w - w + 1)));
        int y0 = static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.gen_h - h + 1)));
        if (!region_allowed(position_region(x0, y0), split)) continue;
        spec.x0 = x0;
        spec.y0 = y0;
        spec.w = w;
        spec.h = h;
        return spec;
    }
    throw std::runtime_error("sample_task: rejection sampling failed");
}

namespace {

// Payload-determined channel signature for recolor edits.
void payload_colors(int payload, int channels, std::vector<double>& out) {
    out.resize(static_cast<size_t>(channels));
    Rng rng(mix_seed(static_cast<uint64_t>(payload), "payload-color"));
    for (int c = 0; c < channels; ++c) out[static_cast<size_t>(c)] = 3.0 * rng.next_unit() - 1.5;
}

// Payload-determined sinusoid pattern parameters per channel.
struct PatternParams {
    double u, v, phase;
};
void payload_pattern(int payload, int channels, std::vector<PatternParams>& out) {
    out.resize(static_cast<size_t>(channels));
    Rng rng(mix_seed(static_cast<uint64_t>(payload), "payload-pattern"));
    for (int c = 0; c < channels; ++c) {
        out[static_cast<size_t>(c)].u = 1.5 + 3.0 * rng.next_unit();
        out[static_cast<size_t>(c)].v = 1.5 + 3.0 * rng.next_unit();
        out[static_cast<size_t>(c)].phase = kTau * rng.next_unit();
    }
}

}  // namespace

EditSample gen_sample(const TaskSpec& spec, uint64_t seed, const SynthConfig& cfg,
                      const InstructionEncoder& enc) {
    if (spec.x0 < 0 || spec.y0 < 0 || spec.w <= 0 || spec.h <= 0 ||
        spec.x0 + spec.w > cfg.gen_w || spec.y0 + spec.h > cfg.gen_h)
        throw std::runtime_error("gen_sample: rect outside the generation grid");
    double frac = static_cast<double>(spec.w) * spec.h / (cfg.gen_w * cfg.gen_h);
    if (frac < cfg.min_area_frac - 1e-9 || frac > cfg.max_area_frac + 1e-9)
        throw std::runtime_error("gen_sample: rect area fraction out of band");

    EditSample s;
    s.seed = seed;
    s.spec = spec;
    int C = cfg.channels, H = cfg.gen_h, W = cfg.gen_w;
    int k = cfg.downsample();

    // Smooth low-frequency source field, O(1) amplitude.
    std::vector<float> src_px(static_cast<size_t>(C * H * W));
    Rng rng(mix_seed(seed, "field"));
    for (int c = 0; c < C; ++c) {
        double a[4], u[4], v[4], ph[4];
        for (int j = 0; j < 4; ++j) {
            a[j] = 0.55 * rng.next_normal();
            u[j] = 6.0 * rng.next_unit() - 3.0;
            v[j] = 6.0 * rng.next_unit() - 3.0;
            ph[j] = kTau * rng.next_unit();
        }
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double val = 0;
                for (int j = 0; j < 4; ++j)
                    val += a[j] * std::sin(kTau * (u[j] * x + v[j] * y) / W + ph[j]);
                src_px[static_cast<size_t>((c * H + y) * W + x)] = static_cast<float>(val);
            }
    }

    std::vector<float> tgt_px = src_px;
    s.mask_hi.assign(static_cast<size_t>(H * W), 0);
    std::vector<double> colors;
    std::vector<PatternParams> pat;
    if (spec.kind == kRecolor) payload_colors(spec.payload, C, colors);
    if (spec.kind == kPatternSwap) payload_pattern(spec.payload, C, pat);
    for (int y = spec.y0; y < spec.y0 + spec.h; ++y)
        for (int x = spec.x0; x < spec.x0 + spec.w; ++x) {
            s.mask_hi[static_cast<size_t>(y * W + x)] = 1;
            for (int c = 0; c < C; ++c) {
                float& px = tgt_px[static_cast<size_t>((c * H + y) * W + x)];
                switch (spec.kind) {
                    case kRecolor: px = static_cast<float>(colors[static_cast<size_t>(c)]); break;
                    case kErase: px = 0.0f; break;
                    case kPatternSwap: {
                        const PatternParams& pp = pat[static_cast<size_t>(c)];
                        px = static_cast<float>(
                            1.2 * std::sin(kTau * (pp.u * x + pp.v * y) / W + pp.phase));
                        break;
                    }
                    default: throw std::runtime_error("gen_sample: unknown task kind");
                }
            }
        }

    // Latents = 4x area average of the pixel fields, channel by channel.
    auto down = [&](const std::vector<float>& px, std::vector<float>& out) {
        int hl = cfg.latent_h, wl = cfg.latent_w;
        out.assign(static_cast<size_t>(C * hl * wl), 0.0f);
        float inv = 1.0f / static_cast<float>(k * k);
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < hl; ++y)
                for (int x = 0; x < wl; ++x) {
                    float acc = 0.0f;
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx)
                            acc += px[static_cast<size_t>((c * H + y * k + dy) * W + x * k + dx)];
                    out[static_cast<size_t>((c * hl + y) * wl + x)] = acc * inv;
                }
    };
    down(src_px, s.source);
    down(tgt_px, s.target);

    // Symbolic instruction: [kind, x0, y0, w, h, payload, PAD...].
    int pad = cfg.vocab - 1;
    s.instr_tokens.assign(static_cast<size_t>(cfg.instr_len), pad);
    s.instr_tokens[0] = spec.kind;
    s.instr_tokens[1] = spec.x0;
    s.instr_tokens[2] = spec.y0;
    s.instr_tokens[3] = spec.w;
    s.instr_tokens[4] = spec.h;
    s.instr_tokens[5] = spec.payload;
    s.instr_hidden = enc.encode(s.instr_tokens);
    return s;
}

Corpus::Corpus(const SynthConfig& cfg) : cfg_(cfg), enc_(cfg) {
    CorpusSplit seeds = make_splits(cfg.master_seed, cfg.train_n, cfg.val_n, cfg.test_n);
    auto build = [&](const std::vector<uint64_t>& ss, int split, std::vector<EditSample>& dst) {
        dst.reserve(ss.size());
        for (uint64_t seed : ss) dst.push_back(gen_sample(sample_task(seed, cfg_, split), seed, cfg_, enc_));
    };
    build(seeds.train, 0, train_);
    build(seeds.val, 1, val_);
    build(seeds.test, 2, test_);
}

const std::vector<EditSample>& Corpus::split(const std::string& name) const {
    if (name == "train") return train_;
    if (name == "val") return val_;
    if (name == "test") return test_;
    throw std::runtime_error("Corpus: unknown split '" + name + "'");
}

void Corpus::materialize(const std::string& dir) const {
    using json = nlohmann::json;
    for (const char* name : {"train", "val", "test"}) {
        const auto& samples = split(name);
        std::string base = dir + "/" + name;
        std::ofstream bin(base + ".bin", std::ios::binary);
        if (!bin) throw std::runtime_error("materialize: cannot open " + base + ".bin");
        for (const EditSample& s : samples) {
            bin.write(reinterpret_cast<const char*>(&s.seed), sizeof(s.seed));
            int32_t spec[6] = {s.spec.kind, s.spec.x0, s.spec.y0, s.spec.w, s.spec.h,
                               s.spec.payload};
            bin.write(reinterpret_cast<const char*>(spec), sizeof(spec));
            bin.write(reinterpret_cast<const char*>(s.source.data()),
                      static_cast<std::streamsize>(s.source.size() * sizeof(float)));
            bin.write(reinterpret_cast<const char*>(s.target.data()),
                      static_cast<std::streamsize>(s.target.size() * sizeof(float)));
            bin.write(reinterpret_cast<const char*>(s.mask_hi.data()),
                      static_cast<std::streamsize>(s.mask_hi.size()));
            std::vector<int32_t> toks(s.instr_tokens.begin(), s.instr_tokens.end());
            bin.write(reinterpret_cast<const char*>(toks.data()),
                      static_cast<std::streamsize>(toks.size() * sizeof(int32_t)));
            bin.write(reinterpret_cast<const char*>(s.instr_hidden.data()),
                      static_cast<std::streamsize>(s.instr_hidden.size() * sizeof(float)));
        }
        json side;
        side["split"] = name;
        side["count"] = samples.size();
        side["master_seed"] = cfg_.master_seed;
        side["record"] = {"seed:u64", "spec:i32x6", "source:f32", "target:f32",
                          "mask_hi:u8", "instr_tokens:i32", "instr_hidden:f32"};
        side["latent"] = {cfg_.channels, cfg_.latent_h, cfg_.latent_w};
        side["gen_grid"] = {cfg_.gen_h, cfg_.gen_w};
        std::ofstream js(base + ".json");
        js << side.dump(2) << "\n";
    }
}

}  // namespace flowgate
