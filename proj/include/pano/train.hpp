#pragma once

#include <string>
#include <vector>

#include "pano/cdam.hpp"
#include "pano/model.hpp"
#include "pano/ppam.hpp"
#include "pano/projection.hpp"
#include "pano/synthdata.hpp"

namespace pano {

struct AdaptConfig {
    float lambda = 100.0f;  // weight of the prototype transfer loss
    float gamma = 0.1f;     // weight of the attention alignment loss
    int epochs = 5;
    int batch_size = 4;
    float lr_target = 0.001f;
    float lr_source = 0.0001f;
    unsigned seed = 7;
    double ffp_fov = 90.0;
    std::string layout = "default";

    // Pseudo-labels from a full-ERP source pass instead of stitched slab
    // predictions (the prose variant; default is the stitched form).
    bool full_erp_pseudo_label = false;

    // Loss toggles for the ablation harness. All on by default.
    bool use_sup = true;
    bool use_ppa = true;
    bool use_sft = true;
    bool use_cda = true;
    bool use_bns = true;

    int attention_cap = 4096;
    bool dump_attention = false;

    void validate() const;
};

// Reads/writes flat "key = value" config files with the keys above.
AdaptConfig load_config(const std::string& path);
void apply_config_entry(AdaptConfig& cfg, const std::string& key, const std::string& value);
std::string config_banner(const AdaptConfig& cfg);

struct StepLosses {
    double sup = 0.0;
    double ppa = 0.0;
    double sft = 0.0;
    double bns = 0.0;
    double cda = 0.0;
    double total = 0.0;  // sup + lambda*ppa + bns + gamma*cda, recorded exactly
};

struct EpochMetrics {
    int epoch = 0;
    StepLosses mean;
    double miou = 0.0;
};

// Prediction-level supervision: stitch the slab logits, take the per-pixel
// argmax as a constant pseudo-label, and score the target logits against it
// with mean cross-entropy.
Tensor loss_sup(const Tensor& p_target, const std::vector<Tensor>& ffp_preds);

// State threaded through adapt_step.
struct AdaptState {
    TangentLayout layout;
    std::vector<SampleGrid> tp_grids;  // for the run's ERP dims
    int ffp_slabs = 4;
    PrototypeBank tau_g;
    BankAccumulator epoch_acc;
};

AdaptState make_adapt_state(const AdaptConfig& cfg, int num_classes, int feat_channels,
                            int erp_h, int erp_w);

// One synchronized update: extract knowledge from the source model on both
// projections, compute the weighted target objective and step the target
// model, then step the source model on the slab prototype alignment alone.
StepLosses adapt_step(SegModel& source, SegModel& target, const std::vector<ErpImage>& batch,
                      AdaptState& state, const BnStats& stats, const AdaptConfig& cfg,
                      SgdOptimizer& opt_target, SgdOptimizer& opt_source);

struct AdaptResult {
    std::vector<EpochMetrics> epochs;
    PrototypeBank tau_g;
};

// Full adaptation loop over the training set; the global prototype bank
// updates once per epoch. eval_data supplies the per-epoch mIoU column
// (falls back to train_data when empty). metrics_csv may be empty.
AdaptResult adapt(SegModel& source, SegModel& target, const std::vector<ErpImage>& train_data,
                  const std::vector<ErpImage>& eval_data, const BnStats& stats,
                  const AdaptConfig& cfg, const std::string& metrics_csv = "",
                  const std::string& attention_dir = "");

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& rows);

}  // namespace pano
