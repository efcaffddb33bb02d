#include "pano/ppam.hpp"

#include <cstring>
#include <fstream>
#include <iostream>

#include "pano/errors.hpp"
#include "pano/serialize.hpp"
#include "pano/util.hpp"

namespace pano {

PrototypeBank PrototypeBank::empty(int num_classes, int channels) {
    PrototypeBank bank;
    bank.protos = Tensor::zeros({num_classes, channels});
    bank.present.assign(num_classes, 0);
    bank.counts.assign(num_classes, 0);
    bank.epoch = 0;
    return bank;
}

Tensor hard_pseudo_label(const Tensor& logits) {
    if (!logits.defined() || logits.rank() != 3)
        throw DimensionError("hard_pseudo_label: logits must be [K,h,w]");
    const int K = logits.dim(0);
    if (K < 2) throw DimensionError("hard_pseudo_label: need at least 2 classes");
    const int h = logits.dim(1), w = logits.dim(2);
    const std::size_t pixels = static_cast<std::size_t>(h) * w;
    const auto ids = argmax_channel(logits);
    Tensor out = Tensor::zeros({K, h, w});
    auto d = out.raw_data();
    for (std::size_t p = 0; p < pixels; ++p) d[ids[p] * pixels + p] = 1.0f;
    return out;
}

PrototypeBank bank_from_features(const Tensor& f_up, const Tensor& onehot) {
    PrototypeBank bank;
    bank.protos = masked_average_pool(f_up, onehot, &bank.present);
    bank.counts.assign(bank.present.size(), 0);
    return bank;
}

namespace {

void check_consistent(const PrototypeBank& a, const PrototypeBank& b, const char* op) {
    if (a.protos.shape() != b.protos.shape())
        throw DimensionError(std::string(op) + ": bank shapes differ, " +
                             shape_str(a.protos.shape()) + " vs " + shape_str(b.protos.shape()));
}

}  // namespace

PrototypeBank aggregate(const std::vector<PrototypeBank>& banks) {
    if (banks.empty()) throw DimensionError("aggregate: empty bank list");
    BankAccumulator acc;
    for (const auto& bank : banks) acc.add(bank);
    return acc.mean();
}

PrototypeBank fuse(const PrototypeBank& tau_p, const PrototypeBank& tau_f) {
    check_consistent(tau_p, tau_f, "fuse");
    return aggregate({tau_p, tau_f});
}

PrototypeBank update_global(const PrototypeBank& tau_g_prev, const PrototypeBank& tau_pf) {
    check_consistent(tau_g_prev, tau_pf, "update_global");
    const int K = tau_g_prev.num_classes(), C = tau_g_prev.channels();
    PrototypeBank out = PrototypeBank::empty(K, C);
    auto dst = out.protos.raw_data();
    auto prev = tau_g_prev.protos.data();
    auto cur = tau_pf.protos.data();
    for (int k = 0; k < K; ++k) {
        if (tau_pf.present[k]) {
            const std::uint32_t c = tau_g_prev.counts[k] + 1;
            out.counts[k] = c;
            out.present[k] = 1;
            const float wnew = 1.0f / static_cast<float>(c);
            for (int j = 0; j < C; ++j)
                dst[static_cast<std::size_t>(k) * C + j] =
                    wnew * cur[static_cast<std::size_t>(k) * C + j] +
                    (1.0f - wnew) * prev[static_cast<std::size_t>(k) * C + j];
        } else {
            out.counts[k] = tau_g_prev.counts[k];
            out.present[k] = tau_g_prev.present[k];
            for (int j = 0; j < C; ++j)
                dst[static_cast<std::size_t>(k) * C + j] = prev[static_cast<std::size_t>(k) * C + j];
        }
    }
    out.epoch = tau_g_prev.epoch + 1;
    return out;
}

namespace {

std::vector<int> joint_classes(const PrototypeBank& a, const PrototypeBank& b) {
    std::vector<int> joint;
    for (int k = 0; k < a.num_classes(); ++k)
        if (a.present[k] && b.present[k]) joint.push_back(k);
    return joint;
}

}  // namespace

Tensor loss_sft(const std::vector<PrototypeBank>& ffp_banks) {
    if (ffp_banks.empty()) throw DimensionError("loss_sft: empty bank list");
    for (const auto& b : ffp_banks) check_consistent(ffp_banks[0], b, "loss_sft");
    Tensor total;
    for (std::size_t a = 0; a < ffp_banks.size(); ++a)
        for (std::size_t b = a + 1; b < ffp_banks.size(); ++b) {
            const auto joint = joint_classes(ffp_banks[a], ffp_banks[b]);
            if (joint.empty()) continue;
            Tensor d = sub(row_select(ffp_banks[a].protos, joint),
                           row_select(ffp_banks[b].protos, joint));
            // (1/N_joint) * sum_k ||d_k||^2
            Tensor term = mul_scalar(sum(mul(d, d)), 1.0f / static_cast<float>(joint.size()));
            total = total.defined() ? add(total, term) : term;
        }
    return total.defined() ? total : Tensor::scalar(0.0f);
}

Tensor loss_ppa(const PrototypeBank& tau_g, const PrototypeBank& tau_t) {
    check_consistent(tau_g, tau_t, "loss_ppa");
    const auto joint = joint_classes(tau_g, tau_t);
    if (joint.empty()) {
        std::cerr << "[pano] warning: loss_ppa has no jointly present class, returning 0\n";
        return Tensor::scalar(0.0f);
    }
    Tensor anchor = row_select(tau_g.protos.detach(), joint);  // global bank is a constant
    Tensor d = sub(row_select(tau_t.protos, joint), anchor);
    const float denom = static_cast<float>(joint.size()) * static_cast<float>(tau_g.channels());
    return mul_scalar(sum(mul(d, d)), 1.0f / denom);
}

void BankAccumulator::add(const PrototypeBank& bank) {
    const int K = bank.num_classes(), C = bank.channels();
    if (k_ == 0) {
        k_ = K;
        c_ = C;
        sum_.assign(static_cast<std::size_t>(K) * C, 0.0);
        n_.assign(K, 0);
    } else if (k_ != K || c_ != C) {
        throw DimensionError("BankAccumulator: inconsistent bank shape");
    }
    auto d = bank.protos.data();
    for (int k = 0; k < K; ++k) {
        if (!bank.present[k]) continue;
        ++n_[k];
        for (int j = 0; j < C; ++j)
            sum_[static_cast<std::size_t>(k) * C + j] += d[static_cast<std::size_t>(k) * C + j];
    }
}

PrototypeBank BankAccumulator::mean() const {
    if (k_ == 0) throw DimensionError("BankAccumulator: no banks added");
    PrototypeBank out = PrototypeBank::empty(k_, c_);
    auto d = out.protos.raw_data();
    for (int k = 0; k < k_; ++k) {
        if (n_[k] == 0) continue;
        out.present[k] = 1;
        for (int j = 0; j < c_; ++j)
            d[static_cast<std::size_t>(k) * c_ + j] =
                static_cast<float>(sum_[static_cast<std::size_t>(k) * c_ + j] / n_[k]);
    }
    return out;
}

namespace {
constexpr char kBankMagic[5] = {'P', 'S', 'F', 'B', '1'};
}

void save_bank(const std::string& path, const PrototypeBank& bank) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kBankMagic, 5);
    write_tensor(os, bank.protos);
    const int K = bank.num_classes();
    os.write(reinterpret_cast<const char*>(bank.present.data()), K);
    for (int k = 0; k < K; ++k) {
        const std::uint32_t c = bank.counts[k];
        const unsigned char b[4] = {static_cast<unsigned char>(c),
                                    static_cast<unsigned char>(c >> 8),
                                    static_cast<unsigned char>(c >> 16),
                                    static_cast<unsigned char>(c >> 24)};
        os.write(reinterpret_cast<const char*>(b), 4);
    }
    const std::uint32_t e = bank.epoch;
    const unsigned char eb[4] = {static_cast<unsigned char>(e), static_cast<unsigned char>(e >> 8),
                                 static_cast<unsigned char>(e >> 16),
                                 static_cast<unsigned char>(e >> 24)};
    os.write(reinterpret_cast<const char*>(eb), 4);
    if (!os) throw IoError("failed to write bank " + path);
}

PrototypeBank load_bank(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, kBankMagic, 5) != 0)
        throw IoError(path + ": bad bank magic, expected PSFB1");
    PrototypeBank bank;
    bank.protos = read_tensor(is);
    if (bank.protos.rank() != 2) throw IoError(path + ": bank tensor must be rank 2");
    const int K = bank.protos.dim(0);
    bank.present.assign(K, 0);
    is.read(reinterpret_cast<char*>(bank.present.data()), K);
    bank.counts.assign(K, 0);
    for (int k = 0; k < K; ++k) {
        unsigned char b[4];
        is.read(reinterpret_cast<char*>(b), 4);
        bank.counts[k] = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                         (static_cast<std::uint32_t>(b[2]) << 16) |
                         (static_cast<std::uint32_t>(b[3]) << 24);
    }
    unsigned char eb[4];
    is.read(reinterpret_cast<char*>(eb), 4);
    if (!is) throw IoError(path + ": truncated bank file");
    bank.epoch = static_cast<std::uint32_t>(eb[0]) | (static_cast<std::uint32_t>(eb[1]) << 8) |
                 (static_cast<std::uint32_t>(eb[2]) << 16) | (static_cast<std::uint32_t>(eb[3]) << 24);
    return bank;
}

}  // namespace pano
