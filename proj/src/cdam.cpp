#include "pano/cdam.hpp"

#include "pano/errors.hpp"
#include "pano/util.hpp"

namespace pano {

Tensor rebuild_features(const std::vector<Tensor>& ffp_feats) {
    if (ffp_feats.empty()) throw DimensionError("rebuild_features: empty slab list");
    for (const auto& f : ffp_feats)
        if (f.shape() != ffp_feats[0].shape())
            throw DimensionError("rebuild_features: slab shapes differ, " +
                                 shape_str(f.shape()) + " vs " + shape_str(ffp_feats[0].shape()));
    return concat_width(ffp_feats);
}

Tensor flatten_features(const Tensor& f) {
    if (!f.defined() || f.rank() != 3)
        throw DimensionError("flatten_features: rank-3 feature map required");
    const int C = f.dim(0);
    const int N = f.dim(1) * f.dim(2);
    return transpose(reshape(f, {C, N}));
}

Tensor loss_bns(const Tensor& f, const Tensor& f_prime, const BnStats& stats) {
    auto as_batch = [](const Tensor& t) {
        if (t.rank() == 4) return t;
        if (t.rank() == 3) return reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)});
        throw DimensionError("loss_bns: features must be [C,h,w] or [N,C,h,w]");
    };
    Tensor fb = as_batch(f);
    Tensor fpb = as_batch(f_prime);
    const int C = fb.dim(1);
    if (fpb.dim(1) != C || stats.mean.size() != static_cast<std::size_t>(C) ||
        stats.var.size() != static_cast<std::size_t>(C))
        throw DimensionError("loss_bns: channel count mismatch with BN statistics");

    Tensor mu_bar = Tensor::from_data({C}, stats.mean);
    Tensor var_bar = Tensor::from_data({C}, stats.var);
    auto term = [&](const Tensor& x) {
        Tensor dm = sub(channel_mean(x), mu_bar);
        Tensor dv = sub(channel_var(x), var_bar);
        return add(sum(mul(dm, dm)), sum(mul(dv, dv)));
    };
    return add(term(fb), term(fpb));
}

namespace {

void check_nc(const Tensor& f, const Tensor& f_prime, const char* op) {
    if (!f.defined() || !f_prime.defined() || f.rank() != 2 || f_prime.rank() != 2)
        throw DimensionError(std::string(op) + ": rank-2 [N,C] features required");
    if (f.shape() != f_prime.shape())
        throw DimensionError(std::string(op) + ": feature shapes differ, " + shape_str(f.shape()) +
                             " vs " + shape_str(f_prime.shape()));
}

}  // namespace

AttentionPair spatial_attention(const Tensor& f, const Tensor& f_prime, int cap) {
    check_nc(f, f_prime, "spatial_attention");
    const int N = f.dim(0);
    if (N > cap)
        throw ResourceError("spatial_attention: N=" + std::to_string(N) + " exceeds cap " +
                            std::to_string(cap) + "; pool features spatially first");
    AttentionPair out;
    out.m = softmax_rows(matmul(f, transpose(f_prime)));
    out.m_prime = softmax_rows(matmul(f_prime, transpose(f)));
    return out;
}

AttentionPair channel_attention(const Tensor& f, const Tensor& f_prime) {
    check_nc(f, f_prime, "channel_attention");
    AttentionPair out;
    out.m = softmax_rows(matmul(transpose(f), f_prime));
    out.m_prime = softmax_rows(matmul(transpose(f_prime), f));
    return out;
}

Tensor kl_rows(const Tensor& m, const Tensor& m_prime, float eps) {
    if (!m.defined() || !m_prime.defined() || m.rank() != 2 || m.shape() != m_prime.shape())
        throw DimensionError("kl_rows: matching rank-2 inputs required");
    Tensor diff = sub(log(add_scalar(m, eps)), log(add_scalar(m_prime, eps)));
    return mul_scalar(sum(mul(m, diff)), 1.0f / static_cast<float>(m.dim(0)));
}

Tensor loss_cda(const AttentionPair& sp, const AttentionPair& ch) {
    return add(kl_rows(sp.m, sp.m_prime), kl_rows(ch.m, ch.m_prime));
}

}  // namespace pano
