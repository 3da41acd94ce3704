#include <cmath>

#include "flowgate/ops.hpp"
#include "flowgate/rng.hpp"
#include "harness_detail.hpp"

namespace flowgate {

SampleMetrics compute_sample_metrics(const std::vector<float>& out, const EditSample& s,
                                     const MaskPyramid& gt, int channels) {
    SampleMetrics m;
    int64_t L = static_cast<int64_t>(gt.h) * gt.w;
    int64_t total = channels * L;
    double l1 = 0, l2 = 0, lk = 0, le = 0, lkt = 0;
    int64_t keep_n = 0, edit_n = 0;
    for (int64_t i = 0; i < total; ++i) {
        double d = out[static_cast<size_t>(i)] - s.target[static_cast<size_t>(i)];
        l1 += std::fabs(d);
        l2 += d * d;
        int64_t cell = i % L;
        if (gt.bin[static_cast<size_t>(cell)]) {
            le += std::fabs(d);
            edit_n++;
        } else {
            lk += std::fabs(out[static_cast<size_t>(i)] - s.source[static_cast<size_t>(i)]);
            lkt += std::fabs(d);
            keep_n++;
        }
    }
    m.l1_global = l1 / static_cast<double>(total);
    m.l2_global = l2 / static_cast<double>(total);
    m.l1_keep = keep_n ? lk / static_cast<double>(keep_n) : 0.0;
    m.l1_edit = edit_n ? le / static_cast<double>(edit_n) : 0.0;
    m.l1_keep_vs_target = keep_n ? lkt / static_cast<double>(keep_n) : 0.0;
    return m;
}

void compute_overlap_metrics(const std::vector<float>& probs, const MaskPyramid& gt,
                             double threshold, SampleMetrics& m) {
    int64_t inter = 0, uni = 0, pa = 0, ga = 0;
    for (size_t i = 0; i < probs.size(); ++i) {
        bool p = probs[i] >= static_cast<float>(threshold);
        bool g = gt.bin[i] != 0;
        inter += (p && g);
        uni += (p || g);
        pa += p;
        ga += g;
    }
    m.iou = uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
    m.dice = (pa + ga) ? 2.0 * static_cast<double>(inter) / static_cast<double>(pa + ga) : 1.0;
}

namespace {

using detail::BatchData;
using detail::CondMask;

Tensor eval_noise(const EditSample& s, const Shape& latent_shape, uint64_t override_seed) {
    Rng rng(override_seed ? override_seed : mix_seed(s.seed, "eval-noise"));
    Tensor z(make_node(latent_shape, DType::F32, "noise"));
    for (auto& x : z.vals<float>()) x = static_cast<float>(rng.next_normal());
    return z;
}

struct ChunkResult {
    std::vector<std::vector<float>> outputs;      // final latents per sample
    std::vector<std::vector<float>> prob_fields;  // mask-head probabilities (may be empty)
};

// Runs the Euler sampler for a chunk with fixed conditioning masks.
ChunkResult run_chunk(Wiring& w, const RunConfig& cfg, const Corpus& corpus,
                      const std::vector<const EditSample*>& samples,
                      const std::vector<CondMask>& cond, bool want_probs,
                      uint64_t noise_seed_override) {
    NoGradGuard ng;
    int64_t B = static_cast<int64_t>(samples.size());
    int C = cfg.model.channels, L = cfg.model.l_img();
    BatchData bd = detail::make_batch(corpus, samples);
    Tensor z = Tensor::zeros(bd.target.shape());
    {
        auto& zv = z.vals<float>();
        for (int64_t b = 0; b < B; ++b) {
            Tensor zb = eval_noise(*samples[static_cast<size_t>(b)],
                                   {1, C, cfg.model.latent_h, cfg.model.latent_w},
                                   noise_seed_override ? noise_seed_override + static_cast<uint64_t>(b)
                                                       : 0);
            std::copy(zb.vals<float>().begin(), zb.vals<float>().end(),
                      zv.begin() + b * C * L);
        }
    }

    ChunkResult res;
    if (want_probs && w.flags.mp) {
        Tensor t0 = Tensor::zeros({B});
        TokenSequence seq0 = w.backbone->assemble(bd.source, z, bd.instr);
        Tensor probs = detail::predict_probs(w, bd.instr, seq0);
        for (int64_t b = 0; b < B; ++b) {
            std::vector<float> p(static_cast<size_t>(L));
            for (int64_t i = 0; i < L; ++i)
                p[static_cast<size_t>(i)] = static_cast<float>(probs.at(b * L + i));
            res.prob_fields.push_back(std::move(p));
        }
    }

    int N = cfg.euler_steps;
    for (int k = 0; k < N; ++k) {
        Tensor t = Tensor::full({B}, static_cast<double>(k) / N);
        TokenSequence seq = w.backbone->assemble(bd.source, z, bd.instr);
        Tensor v = detail::edited_forward(w, cfg, seq, t, bd.instr, cond);
        z = add(z, mul_scalar(v, 1.0 / N));
    }
    for (int64_t b = 0; b < B; ++b) {
        std::vector<float> out(static_cast<size_t>(C) * L);
        std::copy(z.vals<float>().begin() + b * C * L, z.vals<float>().begin() + (b + 1) * C * L,
                  out.begin());
        res.outputs.push_back(std::move(out));
    }
    return res;
}

// Conditioning mask for one sample under a mask source; returns false when
// the sample must be skipped (erosion emptied the perturbed mask).
bool conditioning_mask(Wiring& w, const RunConfig& cfg, const Corpus& corpus,
                       const EditSample& s, MaskSource source,
                       const std::vector<uint8_t>* supplied_hi, const PerturbationSpec* perturb,
                       CondMask& out) {
    const SynthConfig& sc = corpus.config();
    if (source == MaskSource::Supplied) {
        if (!supplied_hi) throw std::runtime_error("evaluate: supplied mask missing");
        out = detail::cond_from_pyramid(
            downsample_mask(*supplied_hi, sc.gen_h, sc.gen_w, sc.latent_h, sc.latent_w));
        return true;
    }
    if (source == MaskSource::Gt) {
        std::vector<uint8_t> hi = s.mask_hi;
        if (perturb) {
            BinaryMask m{sc.gen_h, sc.gen_w, hi};
            BinaryMask pm = morph_perturb(m, *perturb);
            if (pm.empty_mask()) return false;  // flagged and skipped by the caller
            hi = pm.v;
        }
        out = detail::cond_from_pyramid(
            downsample_mask(hi, sc.gen_h, sc.gen_w, sc.latent_h, sc.latent_w));
        return true;
    }
    // Predicted: single mask-head forward at the first sampling step, then
    // threshold + dilate; held fixed for the whole trajectory.
    NoGradGuard ng;
    std::vector<const EditSample*> one = {&s};
    BatchData bd = detail::make_batch(corpus, one);
    Tensor z0 = eval_noise(s, bd.target.shape(), 0);
    TokenSequence seq = w.backbone->assemble(bd.source, z0, bd.instr);
    Tensor probs = detail::predict_probs(w, bd.instr, seq);
    std::vector<float> p(static_cast<size_t>(cfg.model.l_img()));
    for (size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(probs.at(static_cast<int64_t>(i)));
    PredictedMask pm = postprocess_mask(p, cfg.model.latent_h, cfg.model.latent_w,
                                        cfg.mask_threshold, cfg.dilate_radius);
    out = detail::cond_from_binary(pm.binary);
    return true;
}

}  // namespace

BinaryMask morph_perturb(const BinaryMask& mask_hi, const PerturbationSpec& spec) {
    if (spec.magnitude <= 0) throw std::runtime_error("morph_perturb: magnitude must be positive");
    if (spec.family == "erode") return erode(mask_hi, spec.magnitude);
    if (spec.family == "dilate") return dilate(mask_hi, spec.magnitude);
    if (spec.family == "shift-x") return circular_shift(mask_hi, spec.magnitude, 0);
    if (spec.family == "shift-y") return circular_shift(mask_hi, 0, spec.magnitude);
    if (spec.family == "shift-xy")
        return circular_shift(mask_hi, spec.magnitude, spec.magnitude);
    throw std::runtime_error("morph_perturb: unknown family '" + spec.family + "'");
}

std::vector<PerturbationSpec> default_perturbations() {
    std::vector<PerturbationSpec> v;
    for (int m : {4, 8, 16}) v.push_back({"erode", m});
    for (int m : {4, 8, 16}) v.push_back({"dilate", m});
    v.push_back({"shift-x", 8});
    v.push_back({"shift-y", 8});
    v.push_back({"shift-xy", 8});
    return v;
}

std::vector<float> sample_edit(ParamStore& store, const RunConfig& cfg, const Corpus& corpus,
                               const EditSample& sample, MaskSource source,
                               const std::vector<uint8_t>* supplied_hi,
                               uint64_t noise_seed_override) {
    Wiring w(cfg, &store);
    CondMask cm;
    if (!conditioning_mask(w, cfg, corpus, sample, source, supplied_hi, nullptr, cm))
        throw std::runtime_error("sample_edit: conditioning mask is empty");
    std::vector<const EditSample*> one = {&sample};
    ChunkResult r = run_chunk(w, cfg, corpus, one, {cm}, false, noise_seed_override);
    return r.outputs[0];
}

MetricsRow evaluate(ParamStore& store, const RunConfig& cfg, const Corpus& corpus,
                    const std::string& split, MaskSource mask_source,
                    const PerturbationSpec* perturb) {
    const auto& all = corpus.split(split);
    int64_t n = static_cast<int64_t>(all.size());
    if (cfg.eval_max_samples > 0) n = std::min<int64_t>(n, cfg.eval_max_samples);
    if (n == 0) throw std::runtime_error("evaluate: empty split");

    Wiring w(cfg, &store);
    const SynthConfig& sc = corpus.config();

    MetricsRow row;
    row.variant = std::string(1, cfg.variant);
    row.split = split;
    row.seed = cfg.seed;
    row.mask_source = mask_source == MaskSource::Gt        ? "gt"
                      : mask_source == MaskSource::Predicted ? "predicted"
                                                             : "supplied";
    if (perturb) row.bucket = perturb->bucket();

    std::vector<const EditSample*> pending;
    std::vector<CondMask> pending_cond;
    std::vector<SampleMetrics> evals;

    auto flush = [&]() {
        if (pending.empty()) return;
        bool want_probs = w.flags.mp;
        ChunkResult r = run_chunk(w, cfg, corpus, pending, pending_cond, want_probs, 0);
        for (size_t i = 0; i < pending.size(); ++i) {
            const EditSample& s = *pending[i];
            MaskPyramid gt = downsample_mask(s.mask_hi, sc.gen_h, sc.gen_w, sc.latent_h,
                                             sc.latent_w);
            SampleMetrics m = compute_sample_metrics(r.outputs[i], s, gt, sc.channels);
            if (want_probs) compute_overlap_metrics(r.prob_fields[i], gt, cfg.mask_threshold, m);
            evals.push_back(m);
        }
        pending.clear();
        pending_cond.clear();
    };

    for (int64_t i = 0; i < n; ++i) {
        const EditSample& s = all[static_cast<size_t>(i)];
        CondMask cm;
        if (!conditioning_mask(w, cfg, corpus, s, mask_source, nullptr, perturb, cm)) {
            row.skipped++;
            continue;
        }
        pending.push_back(&s);
        pending_cond.push_back(std::move(cm));
        if (static_cast<int>(pending.size()) == cfg.eval_batch) flush();
    }
    flush();

    row.n = static_cast<int>(evals.size());
    if (row.n == 0) throw std::runtime_error("evaluate: every sample was skipped");
    double iou = 0, dice = 0;
    bool has_overlap = true;
    for (const SampleMetrics& m : evals) {
        row.l1_global += m.l1_global;
        row.l2_global += m.l2_global;
        row.l1_keep += m.l1_keep;
        row.l1_edit += m.l1_edit;
        if (m.iou) {
            iou += *m.iou;
            dice += *m.dice;
        } else {
            has_overlap = false;
        }
    }
    row.l1_global /= row.n;
    row.l2_global /= row.n;
    row.l1_keep /= row.n;
    row.l1_edit /= row.n;
    if (has_overlap && w.flags.mp) {
        row.mask_iou = iou / row.n;
        row.mask_dice = dice / row.n;
    }
    return row;
}

std::vector<MetricsRow> robustness_sweep(ParamStore& store, const RunConfig& cfg,
                                         const Corpus& corpus, const std::string& split,
                                         const std::vector<PerturbationSpec>& specs) {
    std::vector<MetricsRow> rows;
    rows.push_back(evaluate(store, cfg, corpus, split, MaskSource::Gt));  // oracle anchor
    rows.back().bucket = "none";
    rows.push_back(evaluate(store, cfg, corpus, split, MaskSource::Predicted));  // deployed anchor
    rows.back().bucket = "predicted";
    for (const PerturbationSpec& spec : specs)
        rows.push_back(evaluate(store, cfg, corpus, split, MaskSource::Gt, &spec));
    return rows;
}

}  // namespace flowgate
