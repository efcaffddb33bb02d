#include <random>

#include "pano/cdam.hpp"
#include "pano/gradcheck.hpp"
#include "pano/model.hpp"
#include "pano/ppam.hpp"
#include "pano/train.hpp"

namespace pano {

namespace {

constexpr double kStep = 1e-3;

Tensor rnd(std::mt19937& rng, std::vector<int> shape, float lo = -1.0f, float hi = 1.0f) {
    return Tensor::uniform(std::move(shape), rng, lo, hi);
}

// Values with magnitude >= 0.2 keep finite differences away from the relu
// kink and log's pole.
Tensor rnd_signed(std::mt19937& rng, std::vector<int> shape) {
    Tensor t = rnd(rng, shape, 0.2f, 1.0f);
    std::bernoulli_distribution flip(0.5);
    for (auto& v : t.raw_data())
        if (flip(rng)) v = -v;
    return t;
}

// Weighted sum turns any op output into a scalar with non-uniform gradient.
Tensor pick(const Tensor& w, const Tensor& y) { return sum(mul(w, y)); }

std::vector<std::uint8_t> random_labels(std::mt19937& rng, std::size_t n, int num_classes,
                                        bool with_ignore) {
    std::uniform_int_distribution<int> dist(0, num_classes - 1);
    std::vector<std::uint8_t> ids(n);
    for (auto& v : ids) v = static_cast<std::uint8_t>(dist(rng));
    if (with_ignore && n > 1) ids[0] = kIgnoreId;
    return ids;
}

Tensor onehot_from_ids(const std::vector<std::uint8_t>& ids, int K, int h, int w) {
    Tensor t = Tensor::zeros({K, h, w});
    auto d = t.raw_data();
    const std::size_t pixels = static_cast<std::size_t>(h) * w;
    for (std::size_t p = 0; p < pixels; ++p) d[ids[p] * pixels + p] = 1.0f;
    return t;
}

PrototypeBank const_bank(std::mt19937& rng, int K, int C, const std::vector<std::uint8_t>& present) {
    PrototypeBank bank = PrototypeBank::empty(K, C);
    bank.protos = rnd(rng, {K, C});
    bank.present = present;
    return bank;
}

}  // namespace

const std::vector<GradCheckCase>& gradcheck_suite() {
    static const std::vector<GradCheckCase> suite = [] {
        std::vector<GradCheckCase> cases;
        auto add_case = [&cases](std::string name, std::function<double(std::mt19937&)> run) {
            cases.push_back({std::move(name), std::move(run)});
        };

        add_case("add", [](std::mt19937& rng) {
            Tensor c = rnd(rng, {4, 5}), w = rnd(rng, {4, 5});
            return grad_check([&](const Tensor& x) { return pick(w, add(x, c)); },
                              rnd(rng, {4, 5}), kStep);
        });
        add_case("sub", [](std::mt19937& rng) {
            Tensor c = rnd(rng, {3, 7}), w = rnd(rng, {3, 7});
            return grad_check([&](const Tensor& x) { return pick(w, sub(c, x)); },
                              rnd(rng, {3, 7}), kStep);
        });
        add_case("mul", [](std::mt19937& rng) {
            Tensor c = rnd(rng, {6}), w = rnd(rng, {6});
            return grad_check([&](const Tensor& x) { return pick(w, mul(x, c)); }, rnd(rng, {6}),
                              kStep);
        });
        add_case("mul_self", [](std::mt19937& rng) {
            Tensor w = rnd(rng, {5, 2});
            return grad_check([&](const Tensor& x) { return pick(w, mul(x, x)); },
                              rnd(rng, {5, 2}), kStep);
        });
        add_case("add_scalar", [](std::mt19937& rng) {
            Tensor w = rnd(rng, {4, 4});
            return grad_check([&](const Tensor& x) { return pick(w, add_scalar(x, 0.7f)); },
                              rnd(rng, {4, 4}), kStep);
        });
        add_case("mul_scalar", [](std::mt19937& rng) {
            Tensor w = rnd(rng, {4, 4});
            return grad_check([&](const Tensor& x) { return pick(w, mul_scalar(x, -1.3f)); },
                              rnd(rng, {4, 4}), kStep);
        });
        add_case("log", [](std::mt19937& rng) {
            Tensor w = rnd(rng, {5, 3});
            return grad_check([&](const Tensor& x) { return pick(w, log(x)); },
                              rnd(rng, {5, 3}, 0.5f, 2.0f), kStep);
        });
        add_case("relu", [](std::mt19937& rng) {
            Tensor w = rnd(rng, {4, 6});
            return grad_check([&](const Tensor& x) { return pick(w, relu(x)); },
                              rnd_signed(rng, {4, 6}), kStep);
        });
        add_case("sum", [](std::mt19937& rng) {
            return grad_check([](const Tensor& x) { return sum(x); }, rnd(rng, {3, 4}), kStep);
        });
        add_case("mean", [](std::mt19937& rng) {
            return grad_check([](const Tensor& x) { return mean(x); }, rnd(rng, {2, 3, 4}), kStep);
        });
        add_case("mse_lhs", [](std::mt19937& rng) {
            Tensor c = rnd(rng, {4, 5});
            return grad_check([&](const Tensor& x) { return mse(x, c); }, rnd(rng, {4, 5}), kStep);
        });
        add_case("mse_rhs", [](std::mt19937& rng) {
            Tensor c = rnd(rng, {4, 5});
            return grad_check([&](const Tensor& x) { return mse(c, x); }, rnd(rng, {4, 5}), kStep);
        });
        add_case("matmul_lhs", [](std::mt19937& rng) {
            Tensor b = rnd(rng, {4, 2}), w = rnd(rng, {3, 2});
            return grad_check([&](const Tensor& x) { return pick(w, matmul(x, b)); },
                              rnd(rng, {3, 4}), kStep);
        });
        add_case("matmul_rhs", [](std::mt19937& rng) {
            Tensor a = rnd(rng, {3, 4}), w = rnd(rng, {3, 2});
            return grad_check([&](const Tensor& x) { return pick(w, matmul(a, x)); },
                              rnd(rng, {4, 2}), kStep);
        });
        add_case("transpose", [](std::mt19937& rng) {
            Tensor w = rnd(rng, {5, 3});
            return grad_check([&](const Tensor& x) { return pick(w, transpose(x)); },
                              rnd(rng, {3, 5}), kStep);
        });
        add_case("reshape", [](std::mt19937& rng) {
            Tensor w = rnd(rng, {12});
            return grad_check([&](const Tensor& x) { return pick(w, reshape(x, {12})); },
                              rnd(rng, {3, 4}), kStep);
        });
        add_case("softmax_rows", [](std::mt19937& rng) {
            Tensor w = rnd(rng, {4, 5});
            return grad_check([&](const Tensor& x) { return pick(w, softmax_rows(x)); },
                              rnd(rng, {4, 5}, -2.0f, 2.0f), kStep);
        });
        add_case("concat_width", [](std::mt19937& rng) {
            Tensor c = rnd(rng, {2, 3, 2}), w = rnd(rng, {2, 3, 5});
            return grad_check(
                [&](const Tensor& x) { return pick(w, concat_width({x, c})); },
                rnd(rng, {2, 3, 3}), kStep);
        });
        add_case("slice_width", [](std::mt19937& rng) {
            Tensor w = rnd(rng, {2, 3, 2});
            return grad_check([&](const Tensor& x) { return pick(w, slice_width(x, 1, 3)); },
                              rnd(rng, {2, 3, 5}), kStep);
        });
        add_case("select_batch", [](std::mt19937& rng) {
            Tensor w = rnd(rng, {2, 3, 3});
            return grad_check([&](const Tensor& x) { return pick(w, select_batch(x, 1)); },
                              rnd(rng, {3, 2, 3, 3}), kStep);
        });
        add_case("row_select", [](std::mt19937& rng) {
            Tensor w = rnd(rng, {3, 4});
            const std::vector<int> rows{0, 2, 2};  // duplicate row accumulates
            return grad_check([&](const Tensor& x) { return pick(w, row_select(x, rows)); },
                              rnd(rng, {4, 4}), kStep);
        });
        add_case("conv2d_input", [](std::mt19937& rng) {
            Tensor k = rnd(rng, {3, 2, 3, 3}), b = rnd(rng, {3}), w = rnd(rng, {1, 3, 3, 3});
            return grad_check([&](const Tensor& x) { return pick(w, conv2d(x, k, b, 2, 1)); },
                              rnd(rng, {1, 2, 6, 6}), kStep);
        });
        add_case("conv2d_weight", [](std::mt19937& rng) {
            Tensor x = rnd(rng, {2, 2, 5, 5}), b = rnd(rng, {3}), w = rnd(rng, {2, 3, 5, 5});
            return grad_check([&](const Tensor& k) { return pick(w, conv2d(x, k, b, 1, 1)); },
                              rnd(rng, {3, 2, 3, 3}), kStep);
        });
        add_case("conv2d_bias", [](std::mt19937& rng) {
            Tensor x = rnd(rng, {1, 2, 4, 4}), k = rnd(rng, {3, 2, 1, 1}), w = rnd(rng, {1, 3, 4, 4});
            return grad_check([&](const Tensor& b) { return pick(w, conv2d(x, k, b, 1, 0)); },
                              rnd(rng, {3}), kStep);
        });
        add_case("upsample_bilinear", [](std::mt19937& rng) {
            Tensor w = rnd(rng, {1, 2, 7, 8});
            return grad_check(
                [&](const Tensor& x) { return pick(w, upsample_bilinear(x, 7, 8)); },
                rnd(rng, {1, 2, 3, 5}), kStep);
        });
        add_case("batchnorm_train_input", [](std::mt19937& rng) {
            Tensor g = rnd(rng, {3}, 0.5f, 1.5f), b = rnd(rng, {3}), w = rnd(rng, {2, 3, 3, 3});
            return grad_check(
                [&](const Tensor& x) {
                    return pick(w, batchnorm2d(x, g, b, {}, {}, /*train_mode=*/true));
                },
                rnd(rng, {2, 3, 3, 3}), kStep);
        });
        add_case("batchnorm_train_affine", [](std::mt19937& rng) {
            Tensor x = rnd(rng, {2, 3, 3, 3}), b = rnd(rng, {3}), w = rnd(rng, {2, 3, 3, 3});
            return grad_check(
                [&](const Tensor& g) {
                    return pick(w, batchnorm2d(x, g, b, {}, {}, /*train_mode=*/true));
                },
                rnd(rng, {3}, 0.5f, 1.5f), kStep);
        });
        add_case("batchnorm_eval_input", [](std::mt19937& rng) {
            Tensor g = rnd(rng, {3}, 0.5f, 1.5f), b = rnd(rng, {3}), w = rnd(rng, {1, 3, 4, 4});
            const std::vector<float> rm{0.1f, -0.2f, 0.3f}, rv{1.2f, 0.8f, 1.5f};
            return grad_check(
                [&](const Tensor& x) {
                    return pick(w, batchnorm2d(x, g, b, rm, rv, /*train_mode=*/false));
                },
                rnd(rng, {1, 3, 4, 4}), kStep);
        });
        add_case("channel_mean", [](std::mt19937& rng) {
            Tensor w = rnd(rng, {3});
            return grad_check([&](const Tensor& x) { return pick(w, channel_mean(x)); },
                              rnd(rng, {2, 3, 3, 4}), kStep);
        });
        add_case("channel_var", [](std::mt19937& rng) {
            Tensor w = rnd(rng, {3});
            return grad_check([&](const Tensor& x) { return pick(w, channel_var(x)); },
                              rnd(rng, {2, 3, 3, 4}), kStep);
        });
        add_case("cross_entropy", [](std::mt19937& rng) {
            const auto ids = random_labels(rng, 16, 3, /*with_ignore=*/true);
            return grad_check([&](const Tensor& x) { return cross_entropy(x, ids); },
                              rnd(rng, {3, 4, 4}, -2.0f, 2.0f), kStep);
        });
        add_case("masked_average_pool", [](std::mt19937& rng) {
            const auto ids = random_labels(rng, 25, 4, /*with_ignore=*/false);
            Tensor mask = onehot_from_ids(ids, 4, 5, 5);
            Tensor w = rnd(rng, {4, 3});
            return grad_check(
                [&](const Tensor& f) { return pick(w, masked_average_pool(f, mask)); },
                rnd(rng, {3, 5, 5}), kStep);
        });

        // ---- pipeline losses ----
        add_case("loss_sup", [](std::mt19937& rng) {
            std::vector<Tensor> slabs;
            for (int i = 0; i < 4; ++i) slabs.push_back(rnd(rng, {3, 4, 2}, -2.0f, 2.0f));
            return grad_check([&](const Tensor& p) { return loss_sup(p, slabs); },
                              rnd(rng, {3, 4, 8}, -2.0f, 2.0f), kStep);
        });
        add_case("loss_ppa", [](std::mt19937& rng) {
            PrototypeBank tau_g = const_bank(rng, 4, 3, {1, 0, 1, 1});
            return grad_check(
                [&](const Tensor& x) {
                    PrototypeBank tau_t = PrototypeBank::empty(4, 3);
                    tau_t.protos = x;
                    tau_t.present = {1, 1, 0, 1};
                    return loss_ppa(tau_g, tau_t);
                },
                rnd(rng, {4, 3}), kStep);
        });
        add_case("loss_ppa_through_map", [](std::mt19937& rng) {
            const auto ids = random_labels(rng, 16, 3, false);
            Tensor mask = onehot_from_ids(ids, 3, 4, 4);
            PrototypeBank tau_g = const_bank(rng, 3, 2, {1, 1, 1});
            return grad_check(
                [&](const Tensor& f) {
                    PrototypeBank tau_t = bank_from_features(f, mask);
                    return loss_ppa(tau_g, tau_t);
                },
                rnd(rng, {2, 4, 4}), kStep);
        });
        add_case("loss_sft", [](std::mt19937& rng) {
            const int K = 3, C = 4;
            const std::vector<std::vector<std::uint8_t>> presence{
                {1, 1, 0}, {1, 0, 1}, {0, 1, 1}, {1, 1, 1}};
            return grad_check(
                [&](const Tensor& x) {
                    std::vector<PrototypeBank> banks;
                    for (int i = 0; i < 4; ++i) {
                        PrototypeBank b = PrototypeBank::empty(K, C);
                        b.protos = row_select(x, {3 * i, 3 * i + 1, 3 * i + 2});
                        b.present = presence[i];
                        banks.push_back(std::move(b));
                    }
                    return loss_sft(banks);
                },
                rnd(rng, {12, C}), kStep);
        });
        add_case("loss_bns_f", [](std::mt19937& rng) {
            Tensor fp = rnd(rng, {4, 3, 3});
            BnStats stats;
            stats.mean.assign(4, 0.1f);
            stats.var.assign(4, 0.9f);
            return grad_check([&](const Tensor& f) { return loss_bns(f, fp, stats); },
                              rnd(rng, {4, 3, 3}), kStep);
        });
        add_case("loss_bns_fprime", [](std::mt19937& rng) {
            Tensor f = rnd(rng, {4, 3, 3});
            BnStats stats;
            stats.mean.assign(4, -0.2f);
            stats.var.assign(4, 1.1f);
            return grad_check([&](const Tensor& fp) { return loss_bns(f, fp, stats); },
                              rnd(rng, {4, 3, 3}), kStep);
        });
        add_case("loss_cda_f", [](std::mt19937& rng) {
            Tensor fp = rnd(rng, {6, 4});
            return grad_check(
                [&](const Tensor& f) {
                    return loss_cda(spatial_attention(f, fp), channel_attention(f, fp));
                },
                rnd(rng, {6, 4}), kStep);
        });
        add_case("loss_cda_fprime", [](std::mt19937& rng) {
            Tensor f = rnd(rng, {6, 4});
            return grad_check(
                [&](const Tensor& fp) {
                    return loss_cda(spatial_attention(f, fp), channel_attention(f, fp));
                },
                rnd(rng, {6, 4}), kStep);
        });
        add_case("loss_total", [](std::mt19937& rng) {
            // Full weighted objective through a tiny model forward.
            const int K = 3, C_feat = 4;
            std::mt19937 mrng(rng());
            auto model = std::make_shared<SegModel>(K, C_feat, mrng);
            const auto pseudo = random_labels(rng, 64, K, false);
            const auto tau_ids = random_labels(rng, 64, K, false);
            Tensor tau_mask = onehot_from_ids(tau_ids, K, 8, 8);
            PrototypeBank tau_g = const_bank(rng, K, C_feat, {1, 1, 1});
            BnStats stats;
            stats.mean.assign(C_feat, 0.0f);
            stats.var.assign(C_feat, 1.0f);
            Tensor fprime = rnd(rng, {C_feat, 1, 1});
            const float lambda = 100.0f, gamma = 0.1f;
            return grad_check(
                [&](const Tensor& x) {
                    auto out = model->forward(x, /*train_mode=*/true, /*update_running=*/false);
                    Tensor sup = cross_entropy(out.pred, pseudo);
                    Tensor up = upsample_bilinear(
                        reshape(out.feat, {1, C_feat, out.feat.dim(1), out.feat.dim(2)}), 8, 8);
                    PrototypeBank tau_t = bank_from_features(select_batch(up, 0), tau_mask);
                    Tensor ppa = loss_ppa(tau_g, tau_t);
                    Tensor bns = loss_bns(out.feat, fprime, stats);
                    Tensor ff = flatten_features(out.feat);
                    Tensor fpf = flatten_features(fprime);
                    Tensor cda = loss_cda(spatial_attention(ff, fpf), channel_attention(ff, fpf));
                    return add(add(sup, mul_scalar(ppa, lambda)),
                               add(bns, mul_scalar(cda, gamma)));
                },
                rnd(rng, {3, 8, 8}, 0.0f, 1.0f), kStep);
        });

        return cases;
    }();
    return suite;
}

}  // namespace pano
