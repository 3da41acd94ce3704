#pragma once
// Experiment harness: variant wiring (ablation grid A..G), the two training
// regimes, Euler-sampling evaluation with gt / predicted / supplied masks,
// the ablation and mask-robustness protocols, and run artifacts (CSV,
// manifest, checkpoints).

#include <optional>
#include <string>
#include <vector>

#include "flowgate/adapter.hpp"
#include "flowgate/backbone.hpp"
#include "flowgate/condenc.hpp"
#include "flowgate/losses.hpp"
#include "flowgate/maskpred.hpp"
#include "flowgate/morphology.hpp"
#include "flowgate/optim.hpp"
#include "flowgate/synthdata.hpp"

namespace flowgate {

struct VariantFlags {
    bool adp = false, rl = false, sg = false, mp = false;
};

// A: none; B: Adp; C: RL; D: Adp+RL; E: Adp+RL+SG; F: Adp+RL+MP; G: all.
VariantFlags variant_flags(char letter);
std::string variant_label(char letter);

enum class Regime { Decoupled, Coupled };
enum class MaskSource { Gt, Predicted, Supplied };

struct RunConfig {
    // model
    BackboneConfig model;
    int n_queries = 8;
    int fusion_layers = 2;
    int query_h = 8, query_w = 8;
    bool soft_mask_tokens = true;        // Eq-3 input: fractional vs binarized
    bool hard_gate = false;              // reference hard-gate mode
    bool adapter_full_sequence = false;  // full-length adapter path (reference)

    // corpus
    SynthConfig corpus;

    // training
    char variant = 'G';
    Regime regime = Regime::Decoupled;
    uint64_t seed = 1;
    int steps = 2000;
    int batch = 4;
    OptimConfig optim;
    LossWeights weights;

    // inference / evaluation
    int euler_steps = 20;
    double mask_threshold = 0.5;
    int dilate_radius = 1;
    int eval_batch = 16;
    int eval_max_samples = 0;  // 0 = full split

    CondEncConfig condenc_config() const;
    AdapterConfig adapter_config() const;
    MaskPredConfig maskpred_config() const;
};

// Canonical key=value serialization of every hyperparameter (manifest body,
// config hash input, protocol-purity comparisons).
std::vector<std::pair<std::string, std::string>> config_kv(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);
std::string config_toml(const RunConfig& cfg);
// Same serialization with variant/regime/seed blanked out; equal across rows
// of a valid ablation.
std::string config_protocol_signature(const RunConfig& cfg);

struct StepLog {
    int step = 0;
    double loss_total = 0, loss_edit = 0, loss_mask = 0;
    double lr = 0, grad_norm_edit = 0, grad_norm_mask = 0;
};

// Wires the modules a variant needs around one parameter store.
struct Wiring {
    VariantFlags flags;
    std::optional<Backbone> backbone;
    std::optional<ConditionEncoder> condenc;
    std::optional<AdapterStack> adapters;
    std::optional<SpatialGate> gate;
    std::optional<MaskPredictor> maskpred;

    Wiring(const RunConfig& cfg, ParamStore* ps);
};

// Stage 0: trains the backbone with the uniform (alpha = 0) flow loss on
// instruction-conditioned editing, then freezes every backbone tensor.
ParamStore pretrain_backbone(const Corpus& corpus, const RunConfig& cfg,
                             std::vector<StepLog>* log = nullptr);

struct TrainResult {
    ParamStore store;
    std::vector<StepLog> log;
};

TrainResult train_variant(const Corpus& corpus, const RunConfig& cfg, const ParamStore& stage0);

// ---- evaluation ----

struct MetricsRow {
    std::string variant, split, bucket = "none", mask_source;
    uint64_t seed = 0;
    int n = 0, skipped = 0;
    double l1_global = 0, l2_global = 0, l1_keep = 0, l1_edit = 0;
    std::optional<double> mask_iou, mask_dice;
};

struct SampleMetrics {
    double l1_global = 0, l2_global = 0, l1_keep = 0, l1_edit = 0;
    double l1_keep_vs_target = 0;  // for the mask-area-weighted identity
    std::optional<double> iou, dice;
};

// out: [C * Hl * Wl] sampled latent; metrics against the sample's target /
// source split by the GT latent mask.
SampleMetrics compute_sample_metrics(const std::vector<float>& out, const EditSample& s,
                                     const MaskPyramid& gt, int channels);
// IoU/Dice of thresholded pre-dilation probabilities against the GT mask.
void compute_overlap_metrics(const std::vector<float>& probs, const MaskPyramid& gt,
                             double threshold, SampleMetrics& m);

struct PerturbationSpec {
    std::string family;  // erode | dilate | shift-x | shift-y | shift-xy
    int magnitude = 0;   // generation-grid pixels
    std::string bucket() const { return family + "-" + std::to_string(magnitude); }
};

// Erode/dilate with the elliptical structuring element, or circular shift,
// on the generation-resolution mask. An erosion that empties the mask is a
// valid result; callers flag and skip it.
BinaryMask morph_perturb(const BinaryMask& mask_hi, const PerturbationSpec& spec);

// 20-step (cfg.euler_steps) deterministic Euler integration of the learned
// velocity field for one sample. mask_source picks the conditioning mask;
// Predicted runs the mask head once at the first step and holds the result.
// An all-zero conditioning mask turns the adapter off (g == 0 fallback).
std::vector<float> sample_edit(ParamStore& store, const RunConfig& cfg, const Corpus& corpus,
                               const EditSample& sample, MaskSource source,
                               const std::vector<uint8_t>* supplied_hi = nullptr,
                               uint64_t noise_seed_override = 0);

// Split-level metrics, fixed order, batched sampling. perturb (optional)
// alters the conditioning mask only; metrics stay against the clean truth.
MetricsRow evaluate(ParamStore& store, const RunConfig& cfg, const Corpus& corpus,
                    const std::string& split, MaskSource mask_source,
                    const PerturbationSpec* perturb = nullptr);

// ---- protocols ----

struct AblationOutput {
    std::vector<MetricsRow> rows;           // 7 gt rows per seed + deployed rows
    std::vector<MetricsRow> coupled_rows;   // coupled-regime G, gt + IoU
    std::string out_dir;
};

// Shared Stage-0 init, shared data/optimizer/steps; only the flag set (and
// regime for the coupled run) differs across rows.
AblationOutput run_ablation(const Corpus& corpus, const RunConfig& base,
                            const std::vector<uint64_t>& seeds, const std::string& out_dir,
                            int jobs);

std::vector<PerturbationSpec> default_perturbations();  // erode/dilate {4,8,16}, shifts at 8

std::vector<MetricsRow> robustness_sweep(ParamStore& store, const RunConfig& cfg,
                                         const Corpus& corpus, const std::string& split,
                                         const std::vector<PerturbationSpec>& specs);

// ---- artifacts ----

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);
void write_step_log_csv(const std::string& path, const std::vector<StepLog>& log);
void write_manifest(const std::string& path, const RunConfig& cfg, const std::string& command,
                    const std::vector<MetricsRow>& summary);
std::string git_describe();

// Runs jobs on a small pool; results land in caller-owned slots so output
// order never depends on scheduling.
void run_jobs(std::vector<std::function<void()>> jobs, int workers);

}  // namespace flowgate
