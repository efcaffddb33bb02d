#pragma once

#include <cstdint>
#include <vector>

#include "pano/model.hpp"
#include "pano/projection.hpp"

namespace pano {

// Rows are ground truth, columns are prediction.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes);

    void accumulate(const LabelMap& pred, const LabelMap& gt);
    void merge(const ConfusionMatrix& other);

    int num_classes() const { return k_; }
    std::uint64_t at(int gt, int pred) const {
        return counts_[static_cast<std::size_t>(gt) * k_ + pred];
    }
    std::uint64_t& at(int gt, int pred) {
        return counts_[static_cast<std::size_t>(gt) * k_ + pred];
    }
    std::uint64_t ignore_count() const { return ignore_count_; }
    std::uint64_t total_count() const;

private:
    int k_;
    std::vector<std::uint64_t> counts_;
    std::uint64_t ignore_count_ = 0;
};

struct IouResult {
    std::vector<double> per_class;  // NaN for classes with empty denominator
    double mean = 0.0;              // over classes with non-empty denominator
};

IouResult miou(const ConfusionMatrix& cm);

// Eval-mode prediction as a label map.
LabelMap predict_labels(SegModel& model, const Tensor& image);

// mIoU of the model over a labeled image set.
double model_miou(SegModel& model, const std::vector<ErpImage>& data);

}  // namespace pano
