#include "pano/evalmetrics.hpp"

#include <cmath>

#include "pano/errors.hpp"

namespace pano {

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
    if (num_classes < 1) throw ConfigError("ConfusionMatrix: need at least 1 class");
    counts_.assign(static_cast<std::size_t>(k_) * k_, 0);
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw DimensionError("ConfusionMatrix: prediction/ground-truth dims differ");
    for (std::size_t i = 0; i < gt.ids.size(); ++i) {
        const std::uint8_t g = gt.ids[i];
        const std::uint8_t p = pred.ids[i];
        if (g == kIgnoreId) {
            ++ignore_count_;
            continue;
        }
        if (g >= k_ || p >= k_)
            throw DataError("ConfusionMatrix: class id out of range (gt=" + std::to_string(int(g)) +
                            ", pred=" + std::to_string(int(p)) + ", K=" + std::to_string(k_) + ")");
        ++counts_[static_cast<std::size_t>(g) * k_ + p];
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw DimensionError("ConfusionMatrix: merge with different K");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    ignore_count_ += other.ignore_count_;
}

std::uint64_t ConfusionMatrix::total_count() const {
    std::uint64_t t = 0;
    for (auto v : counts_) t += v;
    return t;
}

IouResult miou(const ConfusionMatrix& cm) {
    const int K = cm.num_classes();
    IouResult out;
    out.per_class.assign(K, std::nan(""));
    double sum = 0.0;
    int counted = 0;
    for (int k = 0; k < K; ++k) {
        std::uint64_t row = 0, col = 0;
        for (int j = 0; j < K; ++j) {
            row += cm.at(k, j);
            col += cm.at(j, k);
        }
        const std::uint64_t diag = cm.at(k, k);
        const std::uint64_t denom = row + col - diag;
        if (denom == 0) continue;  // class absent from both; excluded from the mean
        out.per_class[k] = static_cast<double>(diag) / static_cast<double>(denom);
        sum += out.per_class[k];
        ++counted;
    }
    out.mean = counted > 0 ? sum / counted : 0.0;
    return out;
}

LabelMap predict_labels(SegModel& model, const Tensor& image) {
    NoGradGuard ng;
    auto out = model.forward(image, /*train_mode=*/false);
    LabelMap pred;
    pred.h = out.pred.dim(1);
    pred.w = out.pred.dim(2);
    pred.ids = argmax_channel(out.pred);
    return pred;
}

double model_miou(SegModel& model, const std::vector<ErpImage>& data) {
    if (data.empty()) throw ConfigError("model_miou: empty dataset");
    ConfusionMatrix cm(model.num_classes());
    for (const auto& img : data) {
        if (!img.labels) throw DataError("model_miou: image lacks labels");
        cm.accumulate(predict_labels(model, img.pixels), *img.labels);
    }
    return miou(cm).mean;
}

}  // namespace pano
