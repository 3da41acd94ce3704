#include <atomic>
#include <filesystem>
#include <thread>

#include "flowgate/rng.hpp"
#include "harness_detail.hpp"

namespace flowgate {

void run_jobs(std::vector<std::function<void()>> jobs, int workers) {
    if (workers < 1) workers = 1;
    workers = std::min<int>(workers, static_cast<int>(jobs.size()));
    if (workers <= 1) {
        for (auto& j : jobs) j();
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(jobs.size());
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            while (true) {
                size_t i = next.fetch_add(1);
                if (i >= jobs.size()) return;
                try {
                    jobs[i]();
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

AblationOutput run_ablation(const Corpus& corpus, const RunConfig& base,
                            const std::vector<uint64_t>& seeds, const std::string& out_dir,
                            int jobs) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    // Shared Stage-0 init: one pretrained-then-frozen backbone for every row,
    // seeded from the corpus, not the run seeds.
    RunConfig pre = base;
    std::string stage0_path = out_dir + "/stage0.ckpt";
    std::vector<StepLog> pre_log;
    ParamStore stage0 = pretrain_backbone(corpus, pre, &pre_log);
    stage0.save(stage0_path);
    write_step_log_csv(out_dir + "/stage0_steps.csv", pre_log);

    const std::string variants = "ABCDEFG";

    struct Job {
        RunConfig cfg;
        bool coupled = false;
        std::vector<MetricsRow> rows;  // filled by the job
    };
    std::vector<Job> table;
    std::string protocol_sig;
    for (uint64_t seed : seeds) {
        for (char v : variants) {
            Job j;
            j.cfg = base;
            j.cfg.variant = v;
            j.cfg.seed = seed;
            j.cfg.regime = Regime::Decoupled;
            std::string sig = config_protocol_signature(j.cfg);
            if (protocol_sig.empty())
                protocol_sig = sig;
            else if (protocol_sig != sig)
                throw std::runtime_error("run_ablation: protocol purity violated for variant " +
                                         std::string(1, v));
            table.push_back(std::move(j));
        }
        // coupled-curriculum counterpart of the full variant, same budget
        Job cj;
        cj.cfg = base;
        cj.cfg.variant = 'G';
        cj.cfg.seed = seed;
        cj.cfg.regime = Regime::Coupled;
        cj.coupled = true;
        table.push_back(std::move(cj));
    }

    std::vector<std::function<void()>> work;
    for (Job& j : table) {
        work.push_back([&j, &corpus, &stage0, out_dir]() {
            TrainResult tr = train_variant(corpus, j.cfg, stage0);
            std::string tag = std::string(1, j.cfg.variant) +
                              (j.coupled ? "_coupled" : "") + "_seed" +
                              std::to_string(j.cfg.seed);
            tr.store.save(out_dir + "/" + tag + ".ckpt");
            write_step_log_csv(out_dir + "/" + tag + "_steps.csv", tr.log);
            MetricsRow gt = evaluate(tr.store, j.cfg, corpus, "val", MaskSource::Gt);
            if (j.coupled) gt.bucket = "coupled";
            j.rows.push_back(gt);
            // deployed rows (predicted mask) for the variants that have a
            // mask head, decoupled regime only
            if (!j.coupled && variant_flags(j.cfg.variant).mp) {
                MetricsRow dep = evaluate(tr.store, j.cfg, corpus, "val", MaskSource::Predicted);
                j.rows.push_back(dep);
            }
        });
    }
    run_jobs(std::move(work), jobs);

    AblationOutput out;
    out.out_dir = out_dir;
    for (Job& j : table) {
        for (MetricsRow& r : j.rows) {
            if (j.coupled)
                out.coupled_rows.push_back(r);
            else
                out.rows.push_back(r);
        }
    }
    std::vector<MetricsRow> all = out.rows;
    all.insert(all.end(), out.coupled_rows.begin(), out.coupled_rows.end());
    write_metrics_csv(out_dir + "/metrics.csv", all);
    return out;
}

}  // namespace flowgate
