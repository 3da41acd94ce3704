#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "flowgate/rng.hpp"
#include "harness_detail.hpp"

namespace flowgate {

using json = nlohmann::json;

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> config_kv(const RunConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> kv;
    auto add = [&](const std::string& k, const std::string& v) { kv.emplace_back(k, v); };
    auto addi = [&](const std::string& k, int64_t v) { add(k, std::to_string(v)); };
    auto addf = [&](const std::string& k, double v) { add(k, fmt_double(v)); };
    auto addb = [&](const std::string& k, bool v) { add(k, v ? "true" : "false"); };

    addi("model.n_blocks", cfg.model.n_blocks);
    addi("model.dim", cfg.model.dim);
    addi("model.heads", cfg.model.heads);
    addi("model.latent_h", cfg.model.latent_h);
    addi("model.latent_w", cfg.model.latent_w);
    addi("model.channels", cfg.model.channels);
    addi("model.text_len", cfg.model.text_len);
    addi("model.hidden_in", cfg.model.hidden_in);
    addi("model.ffn_mult", cfg.model.ffn_mult);
    addi("condenc.n_queries", cfg.n_queries);
    addi("condenc.fusion_layers", cfg.fusion_layers);
    addi("maskpred.query_h", cfg.query_h);
    addi("maskpred.query_w", cfg.query_w);
    addb("condenc.soft_mask_tokens", cfg.soft_mask_tokens);
    addb("gate.hard", cfg.hard_gate);
    addb("adapter.full_sequence", cfg.adapter_full_sequence);
    addi("corpus.gen_h", cfg.corpus.gen_h);
    addi("corpus.gen_w", cfg.corpus.gen_w);
    addi("corpus.latent_h", cfg.corpus.latent_h);
    addi("corpus.latent_w", cfg.corpus.latent_w);
    addi("corpus.channels", cfg.corpus.channels);
    addi("corpus.instr_len", cfg.corpus.instr_len);
    addi("corpus.vocab", cfg.corpus.vocab);
    addi("corpus.enc_dim", cfg.corpus.enc_dim);
    addi("corpus.enc_layers", cfg.corpus.enc_layers);
    addi("corpus.enc_heads", cfg.corpus.enc_heads);
    addi("corpus.master_seed", static_cast<int64_t>(cfg.corpus.master_seed));
    addi("corpus.train_n", cfg.corpus.train_n);
    addi("corpus.val_n", cfg.corpus.val_n);
    addi("corpus.test_n", cfg.corpus.test_n);
    addf("corpus.min_area_frac", cfg.corpus.min_area_frac);
    addf("corpus.max_area_frac", cfg.corpus.max_area_frac);
    add("train.variant", std::string(1, cfg.variant));
    add("train.regime", cfg.regime == Regime::Decoupled ? "decoupled" : "coupled");
    addi("train.seed", static_cast<int64_t>(cfg.seed));
    addi("train.steps", cfg.steps);
    addi("train.batch", cfg.batch);
    addf("optim.lr", cfg.optim.lr);
    addf("optim.beta1", cfg.optim.beta1);
    addf("optim.beta2", cfg.optim.beta2);
    addf("optim.eps", cfg.optim.eps);
    addf("optim.weight_decay", cfg.optim.weight_decay);
    addf("optim.clip_norm", cfg.optim.clip_norm);
    addi("optim.warmup_steps", cfg.optim.warmup_steps);
    addf("loss.alpha", cfg.weights.alpha);
    addf("loss.lambda_mask", cfg.weights.lambda_mask);
    addf("loss.lambda_dice", cfg.weights.lambda_dice);
    addi("eval.euler_steps", cfg.euler_steps);
    addf("eval.mask_threshold", cfg.mask_threshold);
    addi("eval.dilate_radius", cfg.dilate_radius);
    addi("eval.batch", cfg.eval_batch);
    addi("eval.max_samples", cfg.eval_max_samples);
    return kv;
}

std::string config_hash(const RunConfig& cfg) {
    std::string blob;
    for (const auto& [k, v] : config_kv(cfg)) blob += k + "=" + v + "\n";
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, fnv1a64(blob));
    return buf;
}

std::string config_toml(const RunConfig& cfg) {
    // flat key = value lines grouped by dotted section prefix
    std::ostringstream os;
    std::string section;
    for (const auto& [k, v] : config_kv(cfg)) {
        std::string sec = k.substr(0, k.find('.'));
        std::string key = k.substr(k.find('.') + 1);
        if (sec != section) {
            os << (section.empty() ? "" : "\n") << "[" << sec << "]\n";
            section = sec;
        }
        bool quote = v != "true" && v != "false" &&
                     v.find_first_not_of("0123456789.-+e") != std::string::npos;
        os << key << " = " << (quote ? "\"" + v + "\"" : v) << "\n";
    }
    return os.str();
}

std::string config_protocol_signature(const RunConfig& cfg) {
    std::string blob;
    for (const auto& [k, v] : config_kv(cfg)) {
        if (k == "train.variant" || k == "train.regime" || k == "train.seed") continue;
        blob += k + "=" + v + "\n";
    }
    return blob;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_metrics_csv: cannot open " + path);
    f << "variant,split,seed,bucket,mask_source,n,skipped,l1_global,l2_global,l1_keep,l1_edit,"
         "mask_iou,mask_dice\n";
    for (const MetricsRow& r : rows) {
        f << r.variant << "," << r.split << "," << r.seed << "," << r.bucket << ","
          << r.mask_source << "," << r.n << "," << r.skipped << "," << fmt_double(r.l1_global)
          << "," << fmt_double(r.l2_global) << "," << fmt_double(r.l1_keep) << ","
          << fmt_double(r.l1_edit) << "," << (r.mask_iou ? fmt_double(*r.mask_iou) : "") << ","
          << (r.mask_dice ? fmt_double(*r.mask_dice) : "") << "\n";
    }
}

void write_step_log_csv(const std::string& path, const std::vector<StepLog>& log) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_step_log_csv: cannot open " + path);
    f << "step,loss_total,loss_edit,loss_mask,lr,grad_norm_edit,grad_norm_mask\n";
    for (const StepLog& s : log)
        f << s.step << "," << fmt_double(s.loss_total) << "," << fmt_double(s.loss_edit) << ","
          << fmt_double(s.loss_mask) << "," << fmt_double(s.lr) << ","
          << fmt_double(s.grad_norm_edit) << "," << fmt_double(s.grad_norm_mask) << "\n";
}

std::string git_describe() {
    FILE* p = popen("git describe --always --dirty 2>/dev/null", "r");
    if (!p) return "unknown";
    char buf[128] = {0};
    std::string out;
    while (fgets(buf, sizeof(buf), p)) out += buf;
    pclose(p);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    return out.empty() ? "unknown" : out;
}

void write_manifest(const std::string& path, const RunConfig& cfg, const std::string& command,
                    const std::vector<MetricsRow>& summary) {
    json j;
    j["command"] = command;
    j["config_hash"] = config_hash(cfg);
    j["git_describe"] = git_describe();
    json c;
    for (const auto& [k, v] : config_kv(cfg)) c[k] = v;
    j["config"] = c;
    j["seeds"] = {cfg.seed};
    json rows = json::array();
    for (const MetricsRow& r : summary) {
        json row;
        row["variant"] = r.variant;
        row["split"] = r.split;
        row["seed"] = r.seed;
        row["bucket"] = r.bucket;
        row["mask_source"] = r.mask_source;
        row["n"] = r.n;
        row["skipped"] = r.skipped;
        row["l1_global"] = r.l1_global;
        row["l2_global"] = r.l2_global;
        row["l1_keep"] = r.l1_keep;
        row["l1_edit"] = r.l1_edit;
        if (r.mask_iou) row["mask_iou"] = *r.mask_iou;
        if (r.mask_dice) row["mask_dice"] = *r.mask_dice;
        rows.push_back(row);
    }
    j["metrics"] = rows;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_manifest: cannot open " + path);
    f << j.dump(2) << "\n";
}

}  // namespace flowgate
