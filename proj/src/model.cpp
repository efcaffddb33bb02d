#include "pano/model.hpp"

#include <algorithm>
#include <cmath>

#include "pano/errors.hpp"
#include "pano/util.hpp"

namespace pano {

Tensor BatchNorm2dLayer::forward(const Tensor& x, bool train_mode, bool update_running) {
    BatchStats stats;
    Tensor y = batchnorm2d(x, gamma, beta, running_mean, running_var, train_mode, eps,
                           train_mode ? &stats : nullptr);
    if (train_mode && update_running) {
        const int C = gamma.dim(0);
        if (running_mean.size() != static_cast<std::size_t>(C)) {
            running_mean.assign(C, 0.0f);
            running_var.assign(C, 1.0f);
        }
        for (int c = 0; c < C; ++c) {
            running_mean[c] = (1.0f - momentum) * running_mean[c] + momentum * stats.mean[c];
            running_var[c] = (1.0f - momentum) * running_var[c] + momentum * stats.var[c];
        }
    }
    return y;
}

namespace {

// Kaiming-uniform fan-in with relu gain; biases start at zero.
Tensor kaiming_conv(int oc, int ic, int kh, int kw, std::mt19937& rng) {
    const float fan_in = static_cast<float>(ic * kh * kw);
    const float bound = std::sqrt(6.0f / fan_in);
    return Tensor::uniform({oc, ic, kh, kw}, rng, -bound, bound, /*requires_grad=*/true);
}

BatchNorm2dLayer make_bn(int c) {
    BatchNorm2dLayer bn;
    bn.gamma = Tensor::full({c}, 1.0f, true);
    bn.beta = Tensor::zeros({c}, true);
    bn.running_mean.assign(c, 0.0f);
    bn.running_var.assign(c, 1.0f);
    return bn;
}

}  // namespace

SegModel::SegModel(int num_classes, int feat_channels, std::mt19937& rng)
    : num_classes_(num_classes), feat_channels_(feat_channels) {
    if (num_classes < 2) throw ConfigError("SegModel: need at least 2 classes");
    if (feat_channels < 1) throw ConfigError("SegModel: need at least 1 feature channel");
    const int widths[4] = {3, 16, 32, feat_channels};
    for (int i = 0; i < 3; ++i) {
        blocks_[i].conv.w = kaiming_conv(widths[i + 1], widths[i], 3, 3, rng);
        blocks_[i].conv.b = Tensor::zeros({widths[i + 1]}, true);
        blocks_[i].conv.stride = 2;
        blocks_[i].conv.pad = 1;
        blocks_[i].bn = make_bn(widths[i + 1]);
    }
    decoder_.w = kaiming_conv(num_classes, feat_channels, 1, 1, rng);
    decoder_.b = Tensor::zeros({num_classes}, true);
    decoder_.stride = 1;
    decoder_.pad = 0;
}

SegModel::Output SegModel::forward_batch(const Tensor& x, bool train_mode, bool update_running) {
    if (!x.defined() || x.rank() != 4 || x.dim(1) != 3)
        throw DimensionError("SegModel: input must be [N,3,H,W], got " +
                             (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
    const int H = x.dim(2), W = x.dim(3);
    if (H % 8 != 0 || W % 8 != 0)
        throw DimensionError("SegModel: input dims must be divisible by 8, got " +
                             std::to_string(H) + "x" + std::to_string(W));
    Tensor h = x;
    for (auto& block : blocks_) {
        h = block.conv.forward(h);
        h = block.bn.forward(h, train_mode, update_running);
        h = relu(h);
    }
    Output out;
    out.feat = h;
    Tensor logits = decoder_.forward(h);
    out.pred = upsample_bilinear(logits, H, W);
    return out;
}

SegModel::Output SegModel::forward(const Tensor& x, bool train_mode, bool update_running) {
    if (!x.defined() || x.rank() != 3)
        throw DimensionError("SegModel: input must be [3,H,W]");
    Tensor batched = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    Output b = forward_batch(batched, train_mode, update_running);
    Output out;
    out.pred = select_batch(b.pred, 0);
    out.feat = select_batch(b.feat, 0);
    return out;
}

BnStats SegModel::bn_stats() const {
    BnStats s;
    s.mean = blocks_[2].bn.running_mean;
    s.var = blocks_[2].bn.running_var;
    return s;
}

std::vector<Tensor> SegModel::parameters() {
    std::vector<Tensor> params;
    for (auto& block : blocks_) {
        params.push_back(block.conv.w);
        params.push_back(block.conv.b);
        params.push_back(block.bn.gamma);
        params.push_back(block.bn.beta);
    }
    params.push_back(decoder_.w);
    params.push_back(decoder_.b);
    return params;
}

void SegModel::zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
}

NamedTensors SegModel::state() const {
    NamedTensors s;
    for (int i = 0; i < 3; ++i) {
        const std::string base = "enc" + std::to_string(i + 1);
        const auto& block = blocks_[i];
        s.emplace_back(base + ".conv.w", block.conv.w);
        s.emplace_back(base + ".conv.b", block.conv.b);
        s.emplace_back(base + ".bn.gamma", block.bn.gamma);
        s.emplace_back(base + ".bn.beta", block.bn.beta);
        s.emplace_back(base + ".bn.running_mean",
                       Tensor::from_data({static_cast<int>(block.bn.running_mean.size())},
                                         block.bn.running_mean));
        s.emplace_back(base + ".bn.running_var",
                       Tensor::from_data({static_cast<int>(block.bn.running_var.size())},
                                         block.bn.running_var));
    }
    s.emplace_back("dec.w", decoder_.w);
    s.emplace_back("dec.b", decoder_.b);
    return s;
}

void SegModel::load_state(const NamedTensors& state) {
    auto fetch = [&state](const std::string& name) -> const Tensor& {
        for (const auto& [n, t] : state)
            if (n == name) return t;
        throw IoError("checkpoint missing parameter " + name);
    };
    auto copy_into = [](Tensor& dst, const Tensor& src) {
        if (dst.shape() != src.shape())
            throw IoError("checkpoint parameter shape mismatch: " + shape_str(src.shape()) +
                          " vs expected " + shape_str(dst.shape()));
        std::copy_n(src.data().data(), src.numel(), dst.raw_data().data());
    };
    for (int i = 0; i < 3; ++i) {
        const std::string base = "enc" + std::to_string(i + 1);
        auto& block = blocks_[i];
        copy_into(block.conv.w, fetch(base + ".conv.w"));
        copy_into(block.conv.b, fetch(base + ".conv.b"));
        copy_into(block.bn.gamma, fetch(base + ".bn.gamma"));
        copy_into(block.bn.beta, fetch(base + ".bn.beta"));
        const Tensor& rm = fetch(base + ".bn.running_mean");
        const Tensor& rv = fetch(base + ".bn.running_var");
        block.bn.running_mean.assign(rm.data().begin(), rm.data().end());
        block.bn.running_var.assign(rv.data().begin(), rv.data().end());
    }
    copy_into(decoder_.w, fetch("dec.w"));
    copy_into(decoder_.b, fetch("dec.b"));
}

void SegModel::save(const std::string& path) const { save_checkpoint(path, state()); }

SegModel SegModel::load(const std::string& path) {
    NamedTensors state = load_checkpoint(path);
    const Tensor* dec_w = nullptr;
    for (const auto& [n, t] : state)
        if (n == "dec.w") dec_w = &t;
    if (!dec_w || dec_w->rank() != 4)
        throw IoError(path + ": checkpoint lacks a valid dec.w entry");
    std::mt19937 rng(0);
    SegModel m(dec_w->dim(0), dec_w->dim(1), rng);
    m.load_state(state);
    return m;
}

SegModel SegModel::clone() const {
    SegModel copy;
    copy.num_classes_ = num_classes_;
    copy.feat_channels_ = feat_channels_;
    for (int i = 0; i < 3; ++i) {
        copy.blocks_[i].conv.w = blocks_[i].conv.w.clone(true);
        copy.blocks_[i].conv.b = blocks_[i].conv.b.clone(true);
        copy.blocks_[i].conv.stride = blocks_[i].conv.stride;
        copy.blocks_[i].conv.pad = blocks_[i].conv.pad;
        copy.blocks_[i].bn.gamma = blocks_[i].bn.gamma.clone(true);
        copy.blocks_[i].bn.beta = blocks_[i].bn.beta.clone(true);
        copy.blocks_[i].bn.running_mean = blocks_[i].bn.running_mean;
        copy.blocks_[i].bn.running_var = blocks_[i].bn.running_var;
        copy.blocks_[i].bn.momentum = blocks_[i].bn.momentum;
        copy.blocks_[i].bn.eps = blocks_[i].bn.eps;
    }
    copy.decoder_.w = decoder_.w.clone(true);
    copy.decoder_.b = decoder_.b.clone(true);
    copy.decoder_.stride = decoder_.stride;
    copy.decoder_.pad = decoder_.pad;
    return copy;
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, float lr, float momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
    velocity_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) velocity_[i].assign(params_[i].numel(), 0.0f);
}

void SgdOptimizer::step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto data = params_[i].raw_data();
        auto grad = params_[i].grad();
        auto& vel = velocity_[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
            const float g = grad.empty() ? 0.0f : grad[j];
            vel[j] = momentum_ * vel[j] + g;
            data[j] -= lr_ * vel[j];
        }
    }
}

void SgdOptimizer::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

Tensor stack_batch(const std::vector<Tensor>& images) {
    if (images.empty()) throw DimensionError("stack_batch: empty image list");
    const auto& s = images[0].shape();
    if (s.size() != 3) throw DimensionError("stack_batch: rank-3 images required");
    std::vector<float> data;
    data.reserve(images.size() * images[0].numel());
    for (const auto& img : images) {
        if (img.shape() != s)
            throw DimensionError("stack_batch: mixed shapes " + shape_str(img.shape()) + " vs " +
                                 shape_str(s));
        data.insert(data.end(), img.data().begin(), img.data().end());
    }
    return Tensor::from_data({static_cast<int>(images.size()), s[0], s[1], s[2]}, std::move(data));
}

PretrainResult pretrain_source(SegModel& model, const std::vector<LabeledImage>& crops,
                               const PretrainConfig& cfg) {
    if (crops.empty()) throw ConfigError("pretrain_source: empty dataset");
    SgdOptimizer opt(model.parameters(), cfg.lr, cfg.momentum);
    std::mt19937 rng(cfg.seed);

    PretrainResult result;
    std::vector<std::size_t> order(crops.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<Tensor> images;
            std::vector<std::uint8_t> labels;
            for (std::size_t i = start; i < end; ++i) {
                const auto& crop = crops[order[i]];
                images.push_back(crop.image);
                labels.insert(labels.end(), crop.labels.ids.begin(), crop.labels.ids.end());
            }
            Tensor batch = stack_batch(images);
            auto out = model.forward_batch(batch, /*train_mode=*/true);
            Tensor loss = cross_entropy(out.pred, labels);
            opt.zero_grad();
            loss.backward();
            opt.step();
            epoch_loss += loss.item();
            ++batches;
        }
        result.epoch_loss.push_back(static_cast<float>(epoch_loss / std::max<std::size_t>(1, batches)));
    }
    result.stats = model.bn_stats();
    for (float v : result.stats.var)
        if (v < 0.0f) throw NumericError("pretrain_source: negative running variance");
    return result;
}

}  // namespace pano
