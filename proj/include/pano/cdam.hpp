#pragma once

#include <vector>

#include "pano/model.hpp"
#include "pano/tensor.hpp"

namespace pano {

// Row-stochastic cross-attention maps: M compares the first feature set
// against the second, M' the reverse.
struct AttentionPair {
    Tensor m;
    Tensor m_prime;
};

// Width-wise reconstruction of per-slab features into one map with the
// ERP feature shape. Gradients flow back into every slab.
Tensor rebuild_features(const std::vector<Tensor>& ffp_feats);

// [C,h,w] -> [N=h*w, C] pixel-major feature matrix.
Tensor flatten_features(const Tensor& f);

// Statistics-anchored alignment: squared L2 distance of per-channel mean
// and biased variance (over batch and spatial dims) of both feature maps
// to the source BN statistics. Accepts [C,h,w] or [N,C,h,w].
Tensor loss_bns(const Tensor& f, const Tensor& f_prime, const BnStats& stats);

// Position-by-position cross affinity: row-softmax of the NxN cross-Gram
// f * f'^T, and the mirror with roles swapped. N above `cap` is refused;
// pool spatially first.
AttentionPair spatial_attention(const Tensor& f, const Tensor& f_prime, int cap = 4096);

// Channel-by-channel cross affinity: row-softmax of the CxC cross-Gram
// f^T * f', and the mirror.
AttentionPair channel_attention(const Tensor& f, const Tensor& f_prime);

// Row-averaged KL divergence sum_col m * (log(m+eps) - log(m'+eps)).
Tensor kl_rows(const Tensor& m, const Tensor& m_prime, float eps = 1e-8f);

// KL(M_sp, M'_sp) + KL(M_ch, M'_ch).
Tensor loss_cda(const AttentionPair& sp, const AttentionPair& ch);

}  // namespace pano
