#pragma once

#include <random>
#include <string>
#include <vector>

#include "pano/projection.hpp"
#include "pano/serialize.hpp"
#include "pano/tensor.hpp"

namespace pano {

// Per-channel running statistics of the source model's last normalization
// layer; the constant anchor for the feature-statistics loss.
struct BnStats {
    std::vector<float> mean;
    std::vector<float> var;
};

struct Conv2dLayer {
    Tensor w;  // [OC,C,kh,kw]
    Tensor b;  // [OC]
    int stride = 1;
    int pad = 0;

    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct BatchNorm2dLayer {
    Tensor gamma;
    Tensor beta;
    std::vector<float> running_mean;
    std::vector<float> running_var;
    float momentum = 0.1f;
    float eps = 1e-5f;

    // Train mode normalizes by batch statistics and, unless suppressed,
    // folds them into the running estimates with the configured momentum.
    Tensor forward(const Tensor& x, bool train_mode, bool update_running = true);
};

// Encoder-decoder segmentation net: three stride-2 conv/bn/relu blocks
// (3 -> 16 -> 32 -> C_feat), then a 1x1 conv to K classes upsampled back to
// the input resolution. Input dims must be divisible by 8.
class SegModel {
public:
    struct Output {
        Tensor pred;  // logits
        Tensor feat;  // pre-decoder features
    };

    SegModel(int num_classes, int feat_channels, std::mt19937& rng);

    // [3,H,W] -> pred [K,H,W], feat [C_feat,H/8,W/8]
    Output forward(const Tensor& x, bool train_mode, bool update_running = true);
    // [N,3,H,W] -> pred [N,K,H,W], feat [N,C_feat,H/8,W/8]
    Output forward_batch(const Tensor& x, bool train_mode, bool update_running = true);

    int num_classes() const { return num_classes_; }
    int feat_channels() const { return feat_channels_; }

    // Snapshot of the last (third) block's BN running statistics.
    BnStats bn_stats() const;

    std::vector<Tensor> parameters();
    void zero_grad();

    // Parameters plus running statistics, in a fixed topological order.
    NamedTensors state() const;
    void load_state(const NamedTensors& state);

    void save(const std::string& path) const;
    static SegModel load(const std::string& path);

    SegModel clone() const;

private:
    struct Block {
        Conv2dLayer conv;
        BatchNorm2dLayer bn;
    };

    SegModel() = default;

    int num_classes_ = 0;
    int feat_channels_ = 0;
    Block blocks_[3];
    Conv2dLayer decoder_;
};

// SGD with classic momentum: v = mu*v + g, p -= lr*v.
class SgdOptimizer {
public:
    SgdOptimizer(std::vector<Tensor> params, float lr, float momentum = 0.9f);
    void step();
    void zero_grad();
    float lr() const { return lr_; }
    void set_lr(float lr) { lr_ = lr; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> velocity_;
    float lr_;
    float momentum_;
};

struct LabeledImage {
    Tensor image;  // [3,h,w]
    LabelMap labels;
};

struct PretrainConfig {
    int epochs = 20;
    int batch_size = 8;
    float lr = 0.01f;
    float momentum = 0.9f;
    unsigned seed = 7;
};

struct PretrainResult {
    BnStats stats;                  // last-BN snapshot after training
    std::vector<float> epoch_loss;  // mean CE per epoch
};

// Supervised source training on perspective-like crops.
PretrainResult pretrain_source(SegModel& model, const std::vector<LabeledImage>& crops,
                               const PretrainConfig& cfg);

// Stacks equally-shaped [3,h,w] images into a constant [N,3,h,w] batch.
Tensor stack_batch(const std::vector<Tensor>& images);

}  // namespace pano
