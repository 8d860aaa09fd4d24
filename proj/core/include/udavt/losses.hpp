#pragma once

#include <optional>
#include <vector>

#include "udavt/params.hpp"
#include "udavt/tensor.hpp"

namespace udavt {

// mean over rows of -log softmax(logits)[label]
template <class S>
TensorT<S> cross_entropy(TensorT<S> logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw PreconditionError("cross_entropy: expects [B,K] logits");
    const int b = logits.dim(0), k = logits.dim(1);
    if (labels.size() != static_cast<size_t>(b))
        throw PreconditionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(b) + " rows");
    std::vector<S> onehot(static_cast<size_t>(b) * k, S(0));
    for (int i = 0; i < b; ++i) {
        if (labels[i] < 0 || labels[i] >= k)
            throw PreconditionError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0," +
                                    std::to_string(k) + ")");
        onehot[static_cast<size_t>(i) * k + labels[i]] = S(1);
    }
    auto mask = TensorT<S>::from_data({b, k}, std::move(onehot));
    auto picked = sum_all(mul(log(softmax(logits)), mask));
    return scalar_mul(picked, static_cast<S>(-1.0 / b));
}

// Target cross-entropy on pseudo-labels, added to every baseline's total.
template <class S>
TensorT<S> target_pseudo_ce(TensorT<S> target_logits, const std::vector<int>& pseudo_labels) {
    return cross_entropy(target_logits, pseudo_labels);
}

// ---------------------------------------------------------------------------
// MMD

// {0.5,1,2,4,8} x median pairwise squared distance of the joint batch.
template <class S>
std::vector<double> mmd_bandwidths(const TensorT<S>& src, const TensorT<S>& tgt) {
    const int d = src.dim(1);
    std::vector<const S*> rows;
    for (int i = 0; i < src.dim(0); ++i) rows.push_back(src.data().data() + static_cast<size_t>(i) * d);
    for (int i = 0; i < tgt.dim(0); ++i) rows.push_back(tgt.data().data() + static_cast<size_t>(i) * d);
    std::vector<double> dists;
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = i + 1; j < rows.size(); ++j) {
            double acc = 0;
            for (int c = 0; c < d; ++c) {
                double diff = static_cast<double>(rows[i][c]) - static_cast<double>(rows[j][c]);
                acc += diff * diff;
            }
            dists.push_back(acc);
        }
    double median = 1.0;
    if (!dists.empty()) {
        size_t mid = (dists.size() - 1) / 2;  // lower median
        std::nth_element(dists.begin(), dists.begin() + static_cast<long>(mid), dists.end());
        median = std::max(dists[mid], 1e-12);
    }
    return {0.5 * median, 1.0 * median, 2.0 * median, 4.0 * median, 8.0 * median};
}

// Biased multi-kernel RBF MMD^2 with fixed bandwidths. The bandwidths are a
// stop-gradient input: the gradient treats them as constants.
template <class S>
TensorT<S> mmd_loss_with_bandwidths(TensorT<S> src, TensorT<S> tgt, std::vector<double> bandwidths) {
    if (src.ndim() != 2 || tgt.ndim() != 2 || src.dim(1) != tgt.dim(1))
        throw PreconditionError("mmd: feature dims differ: " + shape_str(src.shape()) + " vs " +
                                shape_str(tgt.shape()));
    if (src.dim(0) < 1 || tgt.dim(0) < 1) throw PreconditionError("mmd: both batches must be non-empty");
    const int ns = src.dim(0), nt = tgt.dim(0), d = src.dim(1);

    auto kernel = [&bandwidths](const S* x, const S* y, int dim) {
        double dist = 0;
        for (int c = 0; c < dim; ++c) {
            double diff = static_cast<double>(x[c]) - static_cast<double>(y[c]);
            dist += diff * diff;
        }
        double acc = 0;
        for (double bw : bandwidths) acc += std::exp(-dist / bw);
        return acc;
    };
    const S* sp = src.data().data();
    const S* tp = tgt.data().data();
    double kss = 0, ktt = 0, kst = 0;
    for (int i = 0; i < ns; ++i)
        for (int j = 0; j < ns; ++j) kss += kernel(sp + static_cast<size_t>(i) * d, sp + static_cast<size_t>(j) * d, d);
    for (int i = 0; i < nt; ++i)
        for (int j = 0; j < nt; ++j) ktt += kernel(tp + static_cast<size_t>(i) * d, tp + static_cast<size_t>(j) * d, d);
    for (int i = 0; i < ns; ++i)
        for (int j = 0; j < nt; ++j) kst += kernel(sp + static_cast<size_t>(i) * d, tp + static_cast<size_t>(j) * d, d);
    double value = kss / (static_cast<double>(ns) * ns) + ktt / (static_cast<double>(nt) * nt) -
                   2.0 * kst / (static_cast<double>(ns) * nt);

    return make_op<S>(
        {1}, {static_cast<S>(value)}, {src, tgt}, "mmd",
        [ns, nt, d, bandwidths](NodeT<S>& node, GradStoreT<S>& gs) {
            double g = static_cast<double>(gs.grad_of(node)[0]);
            auto& src_in = node.inputs[0];
            auto& tgt_in = node.inputs[1];
            const S* sp = src_in.data().data();
            const S* tp = tgt_in.data().data();
            // d k(x,y) / d x = sum_w exp(-dist/bw) * (-2/bw) * (x - y)
            auto add_pair_grad = [&](std::vector<S>* gx, std::vector<S>* gy, const S* x, const S* y, size_t xi,
                                     size_t yj, double weight) {
                double dist = 0;
                for (int c = 0; c < d; ++c) {
                    double diff = static_cast<double>(x[c]) - static_cast<double>(y[c]);
                    dist += diff * diff;
                }
                double coeff = 0;
                for (double bw : bandwidths) coeff += std::exp(-dist / bw) * (-2.0 / bw);
                coeff *= weight * g;
                for (int c = 0; c < d; ++c) {
                    double diff = static_cast<double>(x[c]) - static_cast<double>(y[c]);
                    if (gx) (*gx)[xi * d + c] += static_cast<S>(coeff * diff);
                    if (gy) (*gy)[yj * d + c] -= static_cast<S>(coeff * diff);
                }
            };
            std::vector<S>* gsrc = src_in.requires_grad() ? &gs.grad_of(*src_in.node()) : nullptr;
            std::vector<S>* gtgt = tgt_in.requires_grad() ? &gs.grad_of(*tgt_in.node()) : nullptr;
            if (gsrc)
                for (int i = 0; i < ns; ++i)
                    for (int j = 0; j < ns; ++j)
                        add_pair_grad(gsrc, gsrc, sp + static_cast<size_t>(i) * d, sp + static_cast<size_t>(j) * d,
                                      static_cast<size_t>(i), static_cast<size_t>(j),
                                      1.0 / (static_cast<double>(ns) * ns));
            if (gtgt)
                for (int i = 0; i < nt; ++i)
                    for (int j = 0; j < nt; ++j)
                        add_pair_grad(gtgt, gtgt, tp + static_cast<size_t>(i) * d, tp + static_cast<size_t>(j) * d,
                                      static_cast<size_t>(i), static_cast<size_t>(j),
                                      1.0 / (static_cast<double>(nt) * nt));
            for (int i = 0; i < ns; ++i)
                for (int j = 0; j < nt; ++j)
                    add_pair_grad(gsrc, gtgt, sp + static_cast<size_t>(i) * d, tp + static_cast<size_t>(j) * d,
                                  static_cast<size_t>(i), static_cast<size_t>(j),
                                  -2.0 / (static_cast<double>(ns) * nt));
        });
}

template <class S>
TensorT<S> mmd_loss(TensorT<S> src, TensorT<S> tgt) {
    return mmd_loss_with_bandwidths(src, tgt, mmd_bandwidths(src, tgt));
}

// ---------------------------------------------------------------------------
// adversarial (gradient reversal + MLP domain classifier)

// Forward identity; backward multiplies the upstream gradient by -scale.
template <class S>
TensorT<S> gradient_reversal(TensorT<S> x, double scale) {
    return make_op<S>(x.shape(), x.data(), {x}, "gradient_reversal",
                      [scale](NodeT<S>& node, GradStoreT<S>& gs) {
                          auto& g = gs.grad_of(node);
                          auto& in = node.inputs[0];
                          if (!in.requires_grad()) return;
                          auto& gi = gs.grad_of(*in.node());
                          for (size_t i = 0; i < g.size(); ++i) gi[i] -= static_cast<S>(scale) * g[i];
                      });
}

template <class S>
void add_domain_head(ParamStoreT<S>& params, int feature_dim, int hidden, Rng rng) {
    params.add("domain_head.w1", trunc_normal_tensor<S>({feature_dim, hidden}, rng.derive("param:domain_head.w1"), 0.02));
    params.add("domain_head.b1", TensorT<S>::zeros({hidden}));
    params.add("domain_head.w2", trunc_normal_tensor<S>({hidden, 2}, rng.derive("param:domain_head.w2"), 0.02));
    params.add("domain_head.b2", TensorT<S>::zeros({2}));
}

template <class S>
TensorT<S> domain_head_forward(ParamStoreT<S>& params, TensorT<S> features) {
    auto affine = [&](TensorT<S> x, const char* w, const char* b) {
        auto y = matmul(x, params.at(w));
        auto ones = TensorT<S>::ones({x.dim(0), 1});
        auto& bt = params.at(b);
        return add(y, matmul(ones, reshape(bt, {1, bt.dim(0)})));
    };
    auto h = gelu(affine(features, "domain_head.w1", "domain_head.b1"));
    return affine(h, "domain_head.w2", "domain_head.b2");
}

// Binary cross-entropy of the domain classifier on reversed features. One
// scalar serves both parties: minimizing it trains the head to separate
// domains while the encoder receives the negated, grl_scale-weighted
// gradient through the reversal.
template <class S>
TensorT<S> adversarial_losses(TensorT<S> features, const std::vector<int>& domain_flags,
                              ParamStoreT<S>& head_params, double grl_scale) {
    auto logits = domain_head_forward(head_params, gradient_reversal(features, grl_scale));
    return cross_entropy(logits, domain_flags);
}

// ---------------------------------------------------------------------------
// classifier-discrepancy pieces

// mean over instances of the L1 distance between the two softmax outputs
template <class S>
TensorT<S> discrepancy_l1(TensorT<S> logits1, TensorT<S> logits2) {
    auto diff = sub(softmax(logits1), softmax(logits2));
    auto abs = add(relu(diff), relu(scalar_mul(diff, S(-1))));
    return mean_axis(sum_axis(abs, 1), 0);
}

// ---------------------------------------------------------------------------
// InfoNCE with multiple cross-domain positives

// Candidate/positive index structure: every instance anchors against the
// other domain only, so same-domain pairs can never enter the loss.
struct InfonceIndexSets {
    struct Anchor {
        bool anchor_is_source;
        int anchor_index;
        std::vector<int> candidates;  // indices into the other domain
        std::vector<int> positives;   // subset of candidates with equal label
    };
    std::vector<Anchor> anchors;
};

inline InfonceIndexSets infonce_index_sets(const std::vector<int>& source_labels,
                                           const std::vector<int>& target_labels) {
    InfonceIndexSets out;
    auto build = [&](bool from_source) {
        const auto& own = from_source ? source_labels : target_labels;
        const auto& other = from_source ? target_labels : source_labels;
        for (size_t a = 0; a < own.size(); ++a) {
            InfonceIndexSets::Anchor anchor;
            anchor.anchor_is_source = from_source;
            anchor.anchor_index = static_cast<int>(a);
            for (size_t c = 0; c < other.size(); ++c) {
                anchor.candidates.push_back(static_cast<int>(c));
                if (other[c] == own[a]) anchor.positives.push_back(static_cast<int>(c));
            }
            out.anchors.push_back(std::move(anchor));
        }
    };
    build(true);
    build(false);
    return out;
}

// Supervised-contrastive form on L2-normalized features: for each anchor,
// -mean over its cross-domain positives of log softmax over all cross-domain
// candidates of sim/tau. Anchors without positives are excluded from the
// mean; with no eligible anchor at all the loss is 0.
template <class S>
TensorT<S> infonce_cross_domain_loss(TensorT<S> z_src, const std::vector<int>& source_labels, TensorT<S> z_tgt,
                                     const std::vector<int>& target_labels, double temperature) {
    if (temperature <= 0) throw ConfigError("infonce: temperature must be > 0");
    if (z_src.ndim() != 2 || z_tgt.ndim() != 2 || z_src.dim(1) != z_tgt.dim(1))
        throw PreconditionError("infonce: feature dims differ: " + shape_str(z_src.shape()) + " vs " +
                                shape_str(z_tgt.shape()));
    const int ns = z_src.dim(0), nt = z_tgt.dim(0), d = z_src.dim(1);
    if (source_labels.size() != static_cast<size_t>(ns) || target_labels.size() != static_cast<size_t>(nt))
        throw PreconditionError("infonce: label counts do not match feature rows");
    constexpr double kClamp = 1e-12;

    auto normalize = [&](const std::vector<S>& z, int n, std::vector<double>& unit, std::vector<double>& norm) {
        unit.resize(static_cast<size_t>(n) * d);
        norm.resize(n);
        for (int i = 0; i < n; ++i) {
            double sq = 0;
            for (int c = 0; c < d; ++c) {
                double v = static_cast<double>(z[static_cast<size_t>(i) * d + c]);
                sq += v * v;
            }
            norm[i] = std::max(std::sqrt(sq), kClamp);
            for (int c = 0; c < d; ++c)
                unit[static_cast<size_t>(i) * d + c] = static_cast<double>(z[static_cast<size_t>(i) * d + c]) / norm[i];
        }
    };
    auto us = std::make_shared<std::vector<double>>();
    auto ut = std::make_shared<std::vector<double>>();
    auto norm_s = std::make_shared<std::vector<double>>();
    auto norm_t = std::make_shared<std::vector<double>>();
    normalize(z_src.data(), ns, *us, *norm_s);
    normalize(z_tgt.data(), nt, *ut, *norm_t);

    auto index = infonce_index_sets(source_labels, target_labels);

    // forward + per-anchor softmax weights saved for backward
    struct AnchorWork {
        bool src;
        int a;
        std::vector<double> softmax;  // over candidates (the whole other domain)
        double inv_positives;
    };
    auto work = std::make_shared<std::vector<AnchorWork>>();
    double loss = 0;
    for (const auto& anchor : index.anchors) {
        if (anchor.positives.empty() || anchor.candidates.empty()) continue;
        const auto& ua = anchor.anchor_is_source ? *us : *ut;
        const auto& uc = anchor.anchor_is_source ? *ut : *us;
        int ncand = static_cast<int>(anchor.candidates.size());
        std::vector<double> sims(ncand);
        double mx = -1e300;
        for (int c = 0; c < ncand; ++c) {
            double dot = 0;
            for (int k = 0; k < d; ++k)
                dot += ua[static_cast<size_t>(anchor.anchor_index) * d + k] * uc[static_cast<size_t>(c) * d + k];
            sims[c] = dot / temperature;
            mx = std::max(mx, sims[c]);
        }
        double denom = 0;
        for (int c = 0; c < ncand; ++c) denom += std::exp(sims[c] - mx);
        double lse = mx + std::log(denom);
        double mean_pos = 0;
        for (int p : anchor.positives) mean_pos += sims[p];
        mean_pos /= static_cast<double>(anchor.positives.size());
        loss += lse - mean_pos;
        AnchorWork w;
        w.src = anchor.anchor_is_source;
        w.a = anchor.anchor_index;
        w.softmax.resize(ncand);
        for (int c = 0; c < ncand; ++c) w.softmax[c] = std::exp(sims[c] - mx) / denom;
        w.inv_positives = 1.0 / static_cast<double>(anchor.positives.size());
        for (int p : anchor.positives) w.softmax[p] -= w.inv_positives;  // now dLoss_a/dsim_c
        work->push_back(std::move(w));
    }
    size_t eligible = work->size();
    if (eligible == 0) return TensorT<S>::scalar(S(0));
    loss /= static_cast<double>(eligible);

    return make_op<S>(
        {1}, {static_cast<S>(loss)}, {z_src, z_tgt}, "infonce",
        [ns, nt, d, temperature, us, ut, norm_s, norm_t, work, eligible](NodeT<S>& node, GradStoreT<S>& gs) {
            double g = static_cast<double>(gs.grad_of(node)[0]) / (static_cast<double>(eligible) * temperature);
            std::vector<double> dus(static_cast<size_t>(ns) * d, 0.0);
            std::vector<double> dut(static_cast<size_t>(nt) * d, 0.0);
            for (const auto& w : *work) {
                auto& dua = w.src ? dus : dut;
                auto& duc = w.src ? dut : dus;
                const auto& ua = w.src ? *us : *ut;
                const auto& uc = w.src ? *ut : *us;
                for (size_t c = 0; c < w.softmax.size(); ++c) {
                    double coeff = g * w.softmax[c];
                    if (coeff == 0) continue;
                    for (int k = 0; k < d; ++k) {
                        dua[static_cast<size_t>(w.a) * d + k] += coeff * uc[c * static_cast<size_t>(d) + k];
                        duc[c * static_cast<size_t>(d) + k] += coeff * ua[static_cast<size_t>(w.a) * d + k];
                    }
                }
            }
            // through the row normalization: dz = (du - (u . du) u) / ||z||
            auto push = [&](TensorT<S>& in, const std::vector<double>& du, const std::vector<double>& unit,
                            const std::vector<double>& norm, int n) {
                if (!in.requires_grad()) return;
                auto& gi = gs.grad_of(*in.node());
                for (int i = 0; i < n; ++i) {
                    double dot = 0;
                    for (int k = 0; k < d; ++k)
                        dot += unit[static_cast<size_t>(i) * d + k] * du[static_cast<size_t>(i) * d + k];
                    for (int k = 0; k < d; ++k)
                        gi[static_cast<size_t>(i) * d + k] += static_cast<S>(
                            (du[static_cast<size_t>(i) * d + k] - dot * unit[static_cast<size_t>(i) * d + k]) /
                            norm[i]);
                }
            };
            push(node.inputs[0], dus, *us, *norm_s, ns);
            push(node.inputs[1], dut, *ut, *norm_t, nt);
        });
}

// ---------------------------------------------------------------------------
// VICReg on pair-matched rows

// invariance (mean squared difference over all entries) + per-side variance
// hinge sum_j max(0, 1 - std_j) + per-side squared off-diagonal covariance
// divided by the feature count, weighted (25, 25, 1). Composed from kernels.
template <class S>
std::optional<TensorT<S>> vicreg_cross_domain_loss(TensorT<S> z_src, TensorT<S> z_tgt) {
    if (z_src.ndim() != 2 || z_tgt.ndim() != 2 || z_src.shape() != z_tgt.shape())
        throw PreconditionError("vicreg: row sets must share shape, got " + shape_str(z_src.shape()) + " vs " +
                                shape_str(z_tgt.shape()));
    const int b = z_src.dim(0), d = z_src.dim(1);
    if (b < 2) return std::nullopt;
    constexpr double kMuInv = 25.0, kMuVar = 25.0, kMuCov = 1.0, kEps = 1e-4;

    auto inv = scalar_mul(sum_all(square(sub(z_src, z_tgt))), static_cast<S>(1.0 / (static_cast<double>(b) * d)));

    std::vector<S> eye(static_cast<size_t>(d) * d, S(0));
    for (int i = 0; i < d; ++i) eye[static_cast<size_t>(i) * d + i] = S(1);
    auto off_mask = sub(TensorT<S>::ones({d, d}), TensorT<S>::from_data({d, d}, std::move(eye)));
    auto ones_col = TensorT<S>::ones({b, 1});
    auto eps_vec = TensorT<S>::full({d}, static_cast<S>(kEps));
    auto one_vec = TensorT<S>::ones({d});

    auto side_terms = [&](TensorT<S> z, TensorT<S>& var_term, TensorT<S>& cov_term) {
        auto mu = mean_axis(z, 0);
        auto centered = sub(z, matmul(ones_col, reshape(mu, {1, d})));
        auto var = scalar_mul(sum_axis(square(centered), 0), static_cast<S>(1.0 / (b - 1)));
        auto stddev = sqrt(add(var, eps_vec));
        var_term = sum_all(relu(sub(one_vec, stddev)));
        auto cov = scalar_mul(matmul(transpose(centered), centered), static_cast<S>(1.0 / (b - 1)));
        cov_term = scalar_mul(sum_all(square(mul(cov, off_mask))), static_cast<S>(1.0 / d));
    };
    TensorT<S> var_s, cov_s, var_t, cov_t;
    side_terms(z_src, var_s, cov_s);
    side_terms(z_tgt, var_t, cov_t);

    auto total = scalar_mul(inv, static_cast<S>(kMuInv));
    total = add(total, scalar_mul(add(var_s, var_t), static_cast<S>(kMuVar)));
    total = add(total, scalar_mul(add(cov_s, cov_t), static_cast<S>(kMuCov)));
    return total;
}

}  // namespace udavt
