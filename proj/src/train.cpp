#include "pano/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "pano/errors.hpp"
#include "pano/evalmetrics.hpp"
#include "pano/pngio.hpp"

namespace pano {

void AdaptConfig::validate() const {
    if (lambda < 0.0f || gamma < 0.0f)
        throw ConfigError("adapt config: lambda and gamma must be non-negative");
    if (epochs < 1) throw ConfigError("adapt config: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("adapt config: batch_size must be >= 1");
    if (lr_target <= 0.0f || lr_source <= 0.0f)
        throw ConfigError("adapt config: learning rates must be positive");
    ffp_slab_count(ffp_fov);  // throws on unsupported FoV
    layout_from_id(layout);   // throws on unknown layout
    if (attention_cap < 1) throw ConfigError("adapt config: attention_cap must be >= 1");
}

namespace {

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key " + key + ": expected a boolean, got '" + v + "'");
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

void apply_config_entry(AdaptConfig& cfg, const std::string& key, const std::string& value) {
    try {
        if (key == "lambda") cfg.lambda = std::stof(value);
        else if (key == "gamma") cfg.gamma = std::stof(value);
        else if (key == "epochs") cfg.epochs = std::stoi(value);
        else if (key == "batch_size") cfg.batch_size = std::stoi(value);
        else if (key == "lr_target") cfg.lr_target = std::stof(value);
        else if (key == "lr_source") cfg.lr_source = std::stof(value);
        else if (key == "seed") cfg.seed = static_cast<unsigned>(std::stoul(value));
        else if (key == "ffp_fov") cfg.ffp_fov = std::stod(value);
        else if (key == "layout") cfg.layout = value;
        else if (key == "full_erp_pseudo_label") cfg.full_erp_pseudo_label = parse_bool(value, key);
        else if (key == "use_sup") cfg.use_sup = parse_bool(value, key);
        else if (key == "use_ppa") cfg.use_ppa = parse_bool(value, key);
        else if (key == "use_sft") cfg.use_sft = parse_bool(value, key);
        else if (key == "use_cda") cfg.use_cda = parse_bool(value, key);
        else if (key == "use_bns") cfg.use_bns = parse_bool(value, key);
        else if (key == "attention_cap") cfg.attention_cap = std::stoi(value);
        else if (key == "dump_attention") cfg.dump_attention = parse_bool(value, key);
        else throw ConfigError("unknown config key: " + key);
    } catch (const std::invalid_argument&) {
        throw ConfigError("config key " + key + ": cannot parse value '" + value + "'");
    } catch (const std::out_of_range&) {
        throw ConfigError("config key " + key + ": value out of range '" + value + "'");
    }
}

AdaptConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path);
    AdaptConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        apply_config_entry(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
}

std::string config_banner(const AdaptConfig& cfg) {
    std::ostringstream os;
    os << "lambda = " << cfg.lambda << "\n"
       << "gamma = " << cfg.gamma << "\n"
       << "epochs = " << cfg.epochs << "\n"
       << "batch_size = " << cfg.batch_size << "\n"
       << "lr_target = " << cfg.lr_target << "\n"
       << "lr_source = " << cfg.lr_source << "\n"
       << "seed = " << cfg.seed << "\n"
       << "ffp_fov = " << cfg.ffp_fov << "\n"
       << "layout = " << cfg.layout << "\n"
       << "full_erp_pseudo_label = " << (cfg.full_erp_pseudo_label ? "true" : "false") << "\n"
       << "use_sup = " << (cfg.use_sup ? "true" : "false") << "\n"
       << "use_ppa = " << (cfg.use_ppa ? "true" : "false") << "\n"
       << "use_sft = " << (cfg.use_sft ? "true" : "false") << "\n"
       << "use_cda = " << (cfg.use_cda ? "true" : "false") << "\n"
       << "use_bns = " << (cfg.use_bns ? "true" : "false") << "\n"
       << "attention_cap = " << cfg.attention_cap << "\n"
       << "dump_attention = " << (cfg.dump_attention ? "true" : "false") << "\n";
    return os.str();
}

Tensor loss_sup(const Tensor& p_target, const std::vector<Tensor>& ffp_preds) {
    if (!p_target.defined() || p_target.rank() != 3)
        throw DimensionError("loss_sup: target logits must be [K,H,W]");
    Tensor stitched = stitch_ffp(ffp_preds).detach();
    if (stitched.shape() != p_target.shape())
        throw DimensionError("loss_sup: stitched slab logits " + shape_str(stitched.shape()) +
                             " do not match target logits " + shape_str(p_target.shape()));
    const auto pseudo = argmax_channel(stitched);
    return cross_entropy(p_target, pseudo);
}

AdaptState make_adapt_state(const AdaptConfig& cfg, int num_classes, int feat_channels,
                            int erp_h, int erp_w) {
    AdaptState state;
    state.layout = layout_from_id(cfg.layout);
    state.tp_grids = layout_grids(state.layout, erp_h, erp_w);
    state.ffp_slabs = ffp_slab_count(cfg.ffp_fov);
    if (erp_w % state.ffp_slabs != 0 || (erp_w / state.ffp_slabs) % 8 != 0)
        throw ConfigError("adapt: ERP width " + std::to_string(erp_w) + " incompatible with " +
                          std::to_string(state.ffp_slabs) + " slabs of FoV " +
                          std::to_string(cfg.ffp_fov));
    state.tau_g = PrototypeBank::empty(num_classes, feat_channels);
    return state;
}

namespace {

// Per-patch prototype bank from eval-mode source outputs: hard pseudo-label
// the logits, upsample the features to label resolution, pool under the mask.
PrototypeBank patch_bank(const Tensor& logits, const Tensor& feat) {
    Tensor onehot = hard_pseudo_label(logits);
    Tensor up = upsample_bilinear(reshape(feat, {1, feat.dim(0), feat.dim(1), feat.dim(2)}),
                                  logits.dim(1), logits.dim(2));
    return bank_from_features(select_batch(up, 0), onehot);
}

void check_term(const Tensor& t, const char* name) {
    if (!std::isfinite(t.item()))
        throw NumericError(std::string("adapt_step: loss term ") + name + " is non-finite");
}

}  // namespace

StepLosses adapt_step(SegModel& source, SegModel& target, const std::vector<ErpImage>& batch,
                      AdaptState& state, const BnStats& stats, const AdaptConfig& cfg,
                      SgdOptimizer& opt_target, SgdOptimizer& opt_source) {
    if (batch.empty()) throw ConfigError("adapt_step: empty batch");
    const int B = static_cast<int>(batch.size());
    const float inv_b = 1.0f / static_cast<float>(B);

    // Target forward on the whole batch in train mode: its BN adapts to
    // target batch statistics while training.
    std::vector<Tensor> erp_tensors;
    for (const auto& img : batch) erp_tensors.push_back(img.pixels);
    Tensor x = stack_batch(erp_tensors);
    auto target_out = target.forward_batch(x, /*train_mode=*/true);

    Tensor sup_sum, ppa_sum, cda_sum, sft_sum;
    std::vector<Tensor> rebuilt_all;  // constants; batched for the stats loss

    for (int i = 0; i < B; ++i) {
        const ErpImage& erp = batch[i];

        // Tangent-patch extraction is gradient-free: prototypes from this
        // branch act as constants on both models.
        PrototypeBank tau_p;
        {
            NoGradGuard ng;
            std::vector<PrototypeBank> banks;
            for (const auto& grid : state.tp_grids) {
                Tensor patch = project_image(erp.pixels, grid);
                auto out = source.forward(patch, /*train_mode=*/false);
                banks.push_back(patch_bank(out.pred, out.feat));
            }
            tau_p = aggregate(banks);
        }

        // Slab forwards keep the tape: the pairwise prototype loss
        // fine-tunes the source model through them.
        std::vector<Tensor> slabs = split_width(erp.pixels, state.ffp_slabs);
        std::vector<Tensor> slab_preds, slab_feats;
        std::vector<PrototypeBank> slab_banks;
        for (const auto& slab : slabs) {
            auto out = source.forward(slab.detach(), /*train_mode=*/false);
            slab_preds.push_back(out.pred);
            slab_feats.push_back(out.feat);
            if (cfg.use_sft || cfg.use_ppa) slab_banks.push_back(patch_bank(out.pred, out.feat));
        }
        if (cfg.use_sft) {
            Tensor term = loss_sft(slab_banks);
            sft_sum = sft_sum.defined() ? add(sft_sum, term) : term;
        }

        Tensor p_i = select_batch(target_out.pred, i);
        Tensor f_i = select_batch(target_out.feat, i);

        if (cfg.use_sup) {
            Tensor term;
            if (cfg.full_erp_pseudo_label) {
                std::vector<std::uint8_t> pseudo;
                {
                    NoGradGuard ng;
                    auto full = source.forward(erp.pixels, /*train_mode=*/false);
                    pseudo = argmax_channel(full.pred);
                }
                term = cross_entropy(p_i, pseudo);
            } else {
                term = loss_sup(p_i, slab_preds);
            }
            sup_sum = sup_sum.defined() ? add(sup_sum, term) : term;
        }

        // Target prototypes and the prototype transfer loss.
        if (cfg.use_ppa) {
            Tensor onehot_t = hard_pseudo_label(p_i.detach());
            Tensor up = upsample_bilinear(
                reshape(f_i, {1, f_i.dim(0), f_i.dim(1), f_i.dim(2)}), p_i.dim(1), p_i.dim(2));
            PrototypeBank tau_t = bank_from_features(select_batch(up, 0), onehot_t);
            Tensor term = loss_ppa(state.tau_g, tau_t);
            ppa_sum = ppa_sum.defined() ? add(ppa_sum, term) : term;
        }

        // Rebuilt slab features; constants for the target objective.
        std::vector<Tensor> detached_feats;
        for (const auto& f : slab_feats) detached_feats.push_back(f.detach());
        Tensor rebuilt = rebuild_features(detached_feats);
        rebuilt_all.push_back(rebuilt);

        if (cfg.use_cda) {
            Tensor ff = flatten_features(f_i);
            Tensor fp = flatten_features(rebuilt);
            AttentionPair sp = spatial_attention(ff, fp, cfg.attention_cap);
            AttentionPair ch = channel_attention(ff, fp);
            Tensor term = loss_cda(sp, ch);
            cda_sum = cda_sum.defined() ? add(cda_sum, term) : term;
        }

        // Per-image fused prototypes feed the epoch accumulator.
        if (cfg.use_ppa || cfg.use_sft) {
            std::vector<PrototypeBank> detached_banks;
            for (auto& b : slab_banks) {
                PrototypeBank d = b;
                d.protos = b.protos.detach();
                detached_banks.push_back(std::move(d));
            }
            PrototypeBank tau_f =
                detached_banks.empty() ? tau_p : aggregate(detached_banks);
            state.epoch_acc.add(fuse(tau_p, tau_f));
        }
    }

    Tensor bns_term;
    if (cfg.use_bns) {
        Tensor rebuilt_batch = stack_batch(rebuilt_all);
        bns_term = loss_bns(target_out.feat, rebuilt_batch, stats);
    }

    StepLosses losses;
    Tensor total;
    auto add_term = [&total](const Tensor& t) { total = total.defined() ? add(total, t) : t; };

    if (sup_sum.defined()) {
        Tensor t = mul_scalar(sup_sum, inv_b);
        check_term(t, "sup");
        losses.sup = t.item();
        add_term(t);
    }
    if (ppa_sum.defined()) {
        Tensor t = mul_scalar(ppa_sum, inv_b);
        check_term(t, "ppa");
        losses.ppa = t.item();
        add_term(mul_scalar(t, cfg.lambda));
    }
    if (bns_term.defined()) {
        check_term(bns_term, "bns");
        losses.bns = bns_term.item();
        add_term(bns_term);
    }
    if (cda_sum.defined()) {
        Tensor t = mul_scalar(cda_sum, inv_b);
        check_term(t, "cda");
        losses.cda = t.item();
        add_term(mul_scalar(t, cfg.gamma));
    }
    losses.total =
        losses.sup + cfg.lambda * losses.ppa + losses.bns + cfg.gamma * losses.cda;

    if (total.defined()) {
        check_term(total, "total");
        opt_target.zero_grad();
        total.backward();
        opt_target.step();
    }

    // The source step runs after the target step.
    if (sft_sum.defined()) {
        Tensor t = mul_scalar(sft_sum, inv_b);
        check_term(t, "sft");
        losses.sft = t.item();
        opt_source.zero_grad();
        t.backward();
        opt_source.step();
    }
    return losses;
}

AdaptResult adapt(SegModel& source, SegModel& target, const std::vector<ErpImage>& train_data,
                  const std::vector<ErpImage>& eval_data, const BnStats& stats,
                  const AdaptConfig& cfg, const std::string& metrics_csv,
                  const std::string& attention_dir) {
    cfg.validate();
    if (train_data.empty()) throw ConfigError("adapt: empty training set");
    const int H = train_data[0].height(), W = train_data[0].width();
    for (const auto& img : train_data)
        if (img.height() != H || img.width() != W)
            throw DimensionError("adapt: mixed ERP dimensions in training set");

    AdaptState state = make_adapt_state(cfg, target.num_classes(), target.feat_channels(), H, W);
    SgdOptimizer opt_target(target.parameters(), cfg.lr_target);
    SgdOptimizer opt_source(source.parameters(), cfg.lr_source);
    std::mt19937 rng(cfg.seed);

    const std::vector<ErpImage>& scored = eval_data.empty() ? train_data : eval_data;

    AdaptResult result;
    std::vector<std::size_t> order(train_data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        state.epoch_acc = BankAccumulator();
        StepLosses sums;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<ErpImage> batch;
            for (std::size_t i = start; i < end; ++i) batch.push_back(train_data[order[i]]);
            StepLosses l =
                adapt_step(source, target, batch, state, stats, cfg, opt_target, opt_source);
            sums.sup += l.sup;
            sums.ppa += l.ppa;
            sums.sft += l.sft;
            sums.bns += l.bns;
            sums.cda += l.cda;
            sums.total += l.total;
            ++steps;
        }
        if (!state.epoch_acc.empty())
            state.tau_g = update_global(state.tau_g, state.epoch_acc.mean());

        EpochMetrics m;
        m.epoch = epoch;
        const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(1, steps));
        m.mean = {sums.sup * inv, sums.ppa * inv, sums.sft * inv,
                  sums.bns * inv, sums.cda * inv, sums.total * inv};
        m.miou = model_miou(target, scored);
        result.epochs.push_back(m);
    }
    result.tau_g = state.tau_g;

    if (!metrics_csv.empty()) write_metrics_csv(metrics_csv, result.epochs);
    if (cfg.dump_attention && !attention_dir.empty()) {
        std::filesystem::create_directories(attention_dir);
        NoGradGuard ng;
        const ErpImage& sample = train_data[0];
        auto tout = target.forward(sample.pixels, false);
        std::vector<Tensor> slabs = split_width(sample.pixels, state.ffp_slabs);
        std::vector<Tensor> feats;
        for (const auto& slab : slabs)
            feats.push_back(source.forward(slab.detach(), false).feat);
        Tensor ff = flatten_features(tout.feat);
        Tensor fp = flatten_features(rebuild_features(feats));
        AttentionPair sp = spatial_attention(ff, fp, cfg.attention_cap);
        AttentionPair ch = channel_attention(ff, fp);
        namespace fs = std::filesystem;
        write_heatmap_png((fs::path(attention_dir) / "spatial_m.png").string(), sp.m);
        write_heatmap_png((fs::path(attention_dir) / "spatial_m_prime.png").string(), sp.m_prime);
        write_heatmap_png((fs::path(attention_dir) / "channel_m.png").string(), ch.m);
        write_heatmap_png((fs::path(attention_dir) / "channel_m_prime.png").string(), ch.m_prime);
    }
    return result;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& rows) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "epoch,sup,ppa,sft,bns,cda,total,miou\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.epoch,
                      r.mean.sup, r.mean.ppa, r.mean.sft, r.mean.bns, r.mean.cda, r.mean.total,
                      r.miou);
        os << buf;
    }
}

}  // namespace pano
