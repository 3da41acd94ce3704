#include <cmath>

#include "flowgate/ops.hpp"
#include "flowgate/rng.hpp"
#include "harness_detail.hpp"

namespace flowgate {

VariantFlags variant_flags(char letter) {
    switch (letter) {
        case 'A': return {false, false, false, false};
        case 'B': return {true, false, false, false};
        case 'C': return {false, true, false, false};
        case 'D': return {true, true, false, false};
        case 'E': return {true, true, true, false};
        case 'F': return {true, true, false, true};
        case 'G': return {true, true, true, true};
        default: throw std::runtime_error("unknown variant letter");
    }
}

std::string variant_label(char letter) {
    switch (letter) {
        case 'A': return "baseline";
        case 'B': return "adapter-only";
        case 'C': return "region-loss-only";
        case 'D': return "adapter+region-loss";
        case 'E': return "adapter+region-loss+gate";
        case 'F': return "adapter+region-loss+maskpred";
        case 'G': return "full";
        default: throw std::runtime_error("unknown variant letter");
    }
}

CondEncConfig RunConfig::condenc_config() const {
    CondEncConfig c;
    c.dim = model.dim;
    c.heads = model.heads;
    c.n_queries = n_queries;
    c.fusion_layers = fusion_layers;
    c.latent_h = model.latent_h;
    c.latent_w = model.latent_w;
    c.hidden_in = model.hidden_in;
    c.soft_mask_tokens = soft_mask_tokens;
    return c;
}

AdapterConfig RunConfig::adapter_config() const {
    AdapterConfig a;
    a.n_blocks = model.n_blocks;
    a.dim = model.dim;
    a.heads = model.heads;
    a.ffn_mult = model.ffn_mult;
    return a;
}

MaskPredConfig RunConfig::maskpred_config() const {
    MaskPredConfig m;
    m.dim = model.dim;
    m.heads = model.heads;
    m.query_h = query_h;
    m.query_w = query_w;
    m.latent_h = model.latent_h;
    m.latent_w = model.latent_w;
    return m;
}

Wiring::Wiring(const RunConfig& cfg, ParamStore* ps) : flags(variant_flags(cfg.variant)) {
    backbone.emplace(cfg.model, ps);
    if (flags.adp || flags.mp) condenc.emplace(cfg.condenc_config(), ps);
    if (flags.adp) {
        adapters.emplace(cfg.adapter_config(), ps);
        gate.emplace(cfg.model.dim, ps, cfg.hard_gate);
    }
    if (flags.mp) maskpred.emplace(cfg.maskpred_config(), ps);
}

namespace detail {

BatchData make_batch(const Corpus& corpus, const std::vector<const EditSample*>& samples) {
    const SynthConfig& sc = corpus.config();
    int64_t B = static_cast<int64_t>(samples.size());
    int C = sc.channels, H = sc.latent_h, W = sc.latent_w;
    int T = sc.instr_len, E = sc.enc_dim, Lh = sc.enc_layers;
    BatchData bd;
    bd.source = Tensor::zeros({B, C, H, W});
    bd.target = Tensor::zeros({B, C, H, W});
    bd.instr = Tensor::zeros({B, T, Lh * E});
    auto& sv = bd.source.vals<float>();
    auto& tv = bd.target.vals<float>();
    auto& iv = bd.instr.vals<float>();
    int64_t lat = static_cast<int64_t>(C) * H * W;
    for (int64_t b = 0; b < B; ++b) {
        const EditSample& s = *samples[static_cast<size_t>(b)];
        std::copy(s.source.begin(), s.source.end(), sv.begin() + b * lat);
        std::copy(s.target.begin(), s.target.end(), tv.begin() + b * lat);
        // instr_hidden is [Lh, T, E]; stack layers along the channel axis
        for (int t = 0; t < T; ++t)
            for (int l = 0; l < Lh; ++l)
                for (int e = 0; e < E; ++e)
                    iv[static_cast<size_t>(b * T * Lh * E + t * Lh * E + l * E + e)] =
                        s.instr_hidden[static_cast<size_t>((l * T + t) * E + e)];
        bd.gt.push_back(downsample_mask(s.mask_hi, sc.gen_h, sc.gen_w, H, W));
    }
    return bd;
}

CondMask cond_from_pyramid(const MaskPyramid& p) {
    CondMask c;
    c.soft = p.soft;
    c.bin = p.bin;
    c.empty = true;
    for (uint8_t v : p.bin)
        if (v) c.empty = false;
    return c;
}

CondMask cond_from_binary(const std::vector<uint8_t>& bin_latent) {
    CondMask c;
    c.bin = bin_latent;
    c.soft.assign(bin_latent.size(), 0.0f);
    c.empty = true;
    for (size_t i = 0; i < bin_latent.size(); ++i) {
        c.soft[i] = bin_latent[i] ? 1.0f : 0.0f;
        if (bin_latent[i]) c.empty = false;
    }
    return c;
}

Tensor predict_probs(Wiring& w, const Tensor& instr, const TokenSequence& seq) {
    Tensor c_inst = w.condenc->instruction_perceiver(instr);
    return w.maskpred->forward(c_inst, seq);
}

Tensor mask_loss_target(const RunConfig& cfg, const std::vector<MaskPyramid>& gt, DType dt) {
    int64_t B = static_cast<int64_t>(gt.size());
    int H = cfg.model.latent_h, W = cfg.model.latent_w;
    Tensor m = Tensor::zeros({B, static_cast<int64_t>(H) * W}, dt);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < H * W; ++i)
            m.set(b * H * W + i, gt[static_cast<size_t>(b)].bin[static_cast<size_t>(i)]);
    return m;
}

Tensor edited_forward(Wiring& w, const RunConfig& cfg, const TokenSequence& seq, const Tensor& t,
                      const Tensor& instr, const std::vector<CondMask>& cond,
                      const ForwardOptions& opt) {
    if (!w.flags.adp) return w.backbone->forward(seq, t, nullptr, nullptr).v_pred;

    int64_t B = seq.tokens.dim(0);
    int L = seq.l_img;
    bool all_off = !opt.force_zero_gate;
    for (const CondMask& c : cond)
        if (!c.empty) all_off = false;
    if (all_off && !opt.force_zero_gate)
        return w.backbone->forward(seq, t, nullptr, nullptr).v_pred;

    DType dt = seq.tokens.dtype();
    Tensor m_in = Tensor::zeros({B, L, 1}, dt);   // Eq-3 input
    Tensor m_bin = Tensor::zeros({B, L, 1}, dt);  // gate input
    for (int64_t b = 0; b < B; ++b) {
        const CondMask& c = cond[static_cast<size_t>(b)];
        for (int64_t i = 0; i < L; ++i) {
            m_in.set(b * L + i, cfg.soft_mask_tokens ? c.soft[static_cast<size_t>(i)]
                                                     : static_cast<double>(c.bin[static_cast<size_t>(i)]));
            m_bin.set(b * L + i, c.bin[static_cast<size_t>(i)]);
        }
    }
    ConditionStreams cs = w.condenc->encode(m_in, instr);

    Tensor gate_img;
    if (opt.force_zero_gate) {
        gate_img = Tensor::zeros({B, L, 1}, dt);
    } else if (w.flags.sg) {
        gate_img = w.gate->gate_from_mask(m_bin);
        // per-sample fallback: an all-zero conditioning mask turns the
        // adapter off for that sample
        bool any_empty = false;
        for (const CondMask& c : cond) any_empty |= c.empty;
        if (any_empty) {
            Tensor onoff = Tensor::zeros({B, 1, 1}, dt);
            for (int64_t b = 0; b < B; ++b)
                onoff.set(b, cond[static_cast<size_t>(b)].empty ? 0.0 : 1.0);
            gate_img = mul(gate_img, onoff);
        }
    } else {
        gate_img = Tensor::zeros({B, L, 1}, dt);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < L; ++i)
                gate_img.set(b * L + i, cond[static_cast<size_t>(b)].empty ? 0.0 : 1.0);
    }

    AdapterHook hook;
    if (cfg.adapter_full_sequence) {
        Tensor g_full = protect_source_tokens(gate_img, seq.branch);
        hook = [&w, &cs, g_full](int block, const Tensor& h0) {
            return w.adapters->block_forward(block, h0, cs.c, g_full);
        };
    } else {
        hook = [&w, &cs, gate_img, L](int block, const Tensor& h0) {
            return w.adapters->block_forward_front(block, h0, cs.c, gate_img, L);
        };
    }
    return w.backbone->forward(seq, t, &hook, nullptr).v_pred;
}

}  // namespace detail

namespace {

using detail::BatchData;

struct TrainStreams {
    Rng data, noise, tdraw, coupled;
    explicit TrainStreams(uint64_t seed)
        : data(mix_seed(seed, "data")),
          noise(mix_seed(seed, "noise")),
          tdraw(mix_seed(seed, "t")),
          coupled(mix_seed(seed, "coupled")) {}
};

Tensor draw_noise(Rng& rng, const Shape& s) {
    Tensor z(make_node(s, DType::F32, "noise"));
    auto& v = z.vals<float>();
    for (auto& x : v) x = static_cast<float>(rng.next_normal());
    return z;
}

std::vector<std::vector<std::string>> optimizer_groups(const ParamStore& ps) {
    std::vector<std::string> edit, mask;
    for (const std::string& n : ps.trainable_names()) {
        if (n.rfind("maskpred/", 0) == 0)
            mask.push_back(n);
        else
            edit.push_back(n);
    }
    std::vector<std::vector<std::string>> groups;
    if (!edit.empty()) groups.push_back(std::move(edit));
    if (!mask.empty()) groups.push_back(std::move(mask));
    return groups;
}

void copy_store_into(const ParamStore& src, ParamStore& dst, bool force_trainable) {
    for (const auto& [name, e] : src.entries) {
        ParamStore::Entry ne;
        ne.t = e.t.detach_copy();
        ne.frozen = force_trainable ? false : e.frozen;
        ne.t.set_requires_grad(!ne.frozen);
        ne.seed = e.seed;
        ne.scheme = e.scheme;
        dst.entries[name] = ne;
    }
}

}  // namespace

ParamStore pretrain_backbone(const Corpus& corpus, const RunConfig& cfg,
                             std::vector<StepLog>* log) {
    ParamStore ps;
    ps.master_seed = mix_seed(cfg.corpus.master_seed, "stage0");
    ps.dtype = DType::F32;
    Backbone bb(cfg.model, &ps);
    AdamW opt(cfg.optim);
    std::vector<std::vector<std::string>> groups = {ps.trainable_names()};
    TrainStreams rs(ps.master_seed);
    const auto& train = corpus.split("train");
    int64_t B = cfg.batch;

    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<const EditSample*> picks;
        for (int64_t b = 0; b < B; ++b)
            picks.push_back(&train[rs.data.next_below(train.size())]);
        BatchData bd = detail::make_batch(corpus, picks);
        Tensor t = Tensor::zeros({B});
        for (int64_t b = 0; b < B; ++b) t.set(b, rs.tdraw.next_unit());
        Tensor z0 = draw_noise(rs.noise, bd.target.shape());
        FlowState fs = flow_interpolate(z0, bd.target, t);
        TokenSequence seq = bb.assemble(bd.source, fs.zt, bd.instr);
        Tensor v = bb.forward(seq, t, nullptr, nullptr).v_pred;
        Tensor mask0 = Tensor::zeros({B, cfg.model.latent_h, cfg.model.latent_w});
        Tensor loss = region_weighted_edit_loss(v, stop_gradient(fs.v_star), mask0, 0.0);
        double lv = loss.item();
        if (!std::isfinite(lv))
            throw std::runtime_error("pretrain_backbone: non-finite loss at step " +
                                     std::to_string(step));
        backward(loss);
        opt.step(ps, groups, step);
        ps.zero_grads();
        if (log) log->push_back({step, lv, lv, 0.0, opt.last_lr(), opt.last_group_norms()[0], 0.0});
    }
    ps.set_frozen("backbone/", true);
    return ps;
}

TrainResult train_variant(const Corpus& corpus, const RunConfig& cfg, const ParamStore& stage0) {
    TrainResult res;
    res.store.master_seed = mix_seed(cfg.seed, "params");
    res.store.dtype = DType::F32;
    VariantFlags flags = variant_flags(cfg.variant);
    // Variant C continues full fine-tuning of the backbone copy; everyone
    // else trains against the frozen Stage-0 weights.
    copy_store_into(stage0, res.store, /*force_trainable=*/cfg.variant == 'C');
    Wiring w(cfg, &res.store);

    if (res.store.trainable_names().empty()) return res;  // variant A: no-op

    AdamW opt(cfg.optim);
    auto groups = optimizer_groups(res.store);
    TrainStreams rs(cfg.seed);
    const auto& train = corpus.split("train");
    int64_t B = cfg.batch;
    int L = cfg.model.l_img();
    double alpha = flags.rl ? cfg.weights.alpha : 0.0;

    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<const EditSample*> picks;
        for (int64_t b = 0; b < B; ++b)
            picks.push_back(&train[rs.data.next_below(train.size())]);
        BatchData bd = detail::make_batch(corpus, picks);
        Tensor t = Tensor::zeros({B});
        for (int64_t b = 0; b < B; ++b) t.set(b, rs.tdraw.next_unit());
        Tensor z0 = draw_noise(rs.noise, bd.target.shape());
        FlowState fs = flow_interpolate(z0, bd.target, t);
        TokenSequence seq = w.backbone->assemble(bd.source, fs.zt, bd.instr);

        Tensor probs;
        if (flags.mp) probs = detail::predict_probs(w, bd.instr, seq);

        // conditioning masks: GT in the decoupled regime; in the coupled
        // regime the post-processed prediction replaces GT with probability
        // r(t) ramping linearly 0 -> 1
        std::vector<detail::CondMask> cond;
        for (int64_t b = 0; b < B; ++b)
            cond.push_back(detail::cond_from_pyramid(bd.gt[static_cast<size_t>(b)]));
        if (flags.mp && cfg.regime == Regime::Coupled) {
            double r = static_cast<double>(step) / cfg.steps;
            for (int64_t b = 0; b < B; ++b) {
                if (rs.coupled.next_unit() >= r) continue;
                std::vector<float> p(static_cast<size_t>(L));
                for (int64_t i = 0; i < L; ++i) p[static_cast<size_t>(i)] = static_cast<float>(probs.at(b * L + i));
                PredictedMask pm = postprocess_mask(p, cfg.model.latent_h, cfg.model.latent_w,
                                                    cfg.mask_threshold, cfg.dilate_radius);
                cond[static_cast<size_t>(b)] = detail::cond_from_binary(pm.binary);
            }
        }

        Tensor v = detail::edited_forward(w, cfg, seq, t, bd.instr, cond);

        // losses always use the GT mask
        Tensor m_loss_grid = Tensor::zeros({B, cfg.model.latent_h, cfg.model.latent_w});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < L; ++i)
                m_loss_grid.set(b * L + i, bd.gt[static_cast<size_t>(b)].bin[static_cast<size_t>(i)]);
        Tensor edit = region_weighted_edit_loss(v, stop_gradient(fs.v_star), m_loss_grid, alpha);
        Tensor total = edit;
        double mask_lv = 0.0;
        if (flags.mp) {
            Tensor m_flat = detail::mask_loss_target(cfg, bd.gt, DType::F32);
            Tensor ml = mask_loss(reshape(probs, {B, static_cast<int64_t>(L)}), m_flat,
                                  cfg.weights.lambda_dice);
            mask_lv = ml.item();
            total = total_loss(edit, ml, cfg.weights.lambda_mask);
        }
        double ev = edit.item(), tv = total.item();
        if (!std::isfinite(tv))
            throw std::runtime_error("train_variant: non-finite loss at step " +
                                     std::to_string(step));
        backward(total);
        opt.step(res.store, groups, step);
        res.store.zero_grads();
        StepLog sl;
        sl.step = step;
        sl.loss_total = tv;
        sl.loss_edit = ev;
        sl.loss_mask = mask_lv;
        sl.lr = opt.last_lr();
        sl.grad_norm_edit = opt.last_group_norms()[0];
        sl.grad_norm_mask = opt.last_group_norms().size() > 1 ? opt.last_group_norms()[1] : 0.0;
        res.log.push_back(sl);
    }
    return res;
}

}  // namespace flowgate
