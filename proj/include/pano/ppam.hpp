#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pano/tensor.hpp"

namespace pano {

// K x C class-prototype bank. Rows for classes never observed stay zero and
// are excluded from every mean and loss. `counts` tracks how many update
// epochs each class participated in, so each row stays an unbiased running
// mean even when the class skips epochs. `epoch` counts update_global calls.
struct PrototypeBank {
    Tensor protos;                       // [K, C]
    std::vector<std::uint8_t> present;   // per class
    std::vector<std::uint32_t> counts;   // per-class update epochs
    std::uint32_t epoch = 0;

    static PrototypeBank empty(int num_classes, int channels);

    int num_classes() const { return protos.dim(0); }
    int channels() const { return protos.dim(1); }
};

// Per-pixel one-hot argmax of the class logits; ties go to the lowest class
// index. Output is a gradient constant. [K,h,w] -> [K,h,w]
Tensor hard_pseudo_label(const Tensor& logits);

// Masked average pooling of (already upsampled) features under a one-hot
// mask. The bank's protos stay graph-connected to `f_up`.
PrototypeBank bank_from_features(const Tensor& f_up, const Tensor& onehot);

// Per-class presence-aware mean across banks; presence is the OR.
// Output is a constant bank (epoch/counts reset).
PrototypeBank aggregate(const std::vector<PrototypeBank>& banks);

// Two-bank presence-aware mean of the tangent and fixed-FoV prototypes.
PrototypeBank fuse(const PrototypeBank& tau_p, const PrototypeBank& tau_f);

// Iterative global update: classes present this epoch advance their own
// counter c and blend row = (1/c)*new + (1-1/c)*old; absent classes carry
// over unchanged. Bank epoch advances by exactly 1.
PrototypeBank update_global(const PrototypeBank& tau_g_prev, const PrototypeBank& tau_pf);

// Pairwise alignment of the per-slab prototype banks: sum over unordered
// slab pairs of (1/N_joint) * sum_k ||row_a - row_b||^2 over jointly
// present classes. Gradients flow into every member bank.
Tensor loss_sft(const std::vector<PrototypeBank>& ffp_banks);

// Prototype transfer loss: mean over jointly present classes of the
// per-channel mean squared row distance. tau_g is a gradient constant;
// gradients flow into tau_t only. No joint class -> 0 with a warning.
Tensor loss_ppa(const PrototypeBank& tau_g, const PrototypeBank& tau_t);

// Running presence-aware mean across banks within an epoch.
class BankAccumulator {
public:
    void add(const PrototypeBank& bank);
    bool empty() const { return k_ == 0; }
    PrototypeBank mean() const;

private:
    int k_ = 0;
    int c_ = 0;
    std::vector<double> sum_;
    std::vector<std::uint32_t> n_;
};

// Bank file: the tensor wire format followed by one presence byte and one
// u32 counter per class, then the u32 epoch.
void save_bank(const std::string& path, const PrototypeBank& bank);
PrototypeBank load_bank(const std::string& path);

}  // namespace pano
