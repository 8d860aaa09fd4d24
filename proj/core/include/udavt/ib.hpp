#pragma once

#include <deque>
#include <optional>
#include <vector>

#include "udavt/rng.hpp"
#include "udavt/tensor.hpp"

namespace udavt {

// argmax with ties broken toward the lowest class index
template <class S>
int argmax_row(const S* row, int k) {
    int best = 0;
    for (int j = 1; j < k; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

struct PseudoLabels {
    std::vector<int> labels;
    std::vector<double> confidences;  // softmax max per row
};

template <class S>
PseudoLabels pseudo_label(const TensorT<S>& logits) {
    if (logits.ndim() != 2) throw PreconditionError("pseudo_label: expects [N,K] logits");
    const int n = logits.dim(0), k = logits.dim(1);
    PseudoLabels out;
    out.labels.resize(n);
    out.confidences.resize(n);
    for (int i = 0; i < n; ++i) {
        const S* row = logits.data().data() + static_cast<size_t>(i) * k;
        int best = argmax_row(row, k);
        double mx = static_cast<double>(row[best]);
        double denom = 0;
        for (int j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        out.labels[i] = best;
        out.confidences[i] = 1.0 / denom;
    }
    return out;
}

// FIFO of detached source projections with their labels. Entries never
// re-enter the autodiff graph.
template <class S>
class FeatureQueueT {
  public:
    struct Entry {
        std::vector<S> z;
        int label;
        int epoch_tag;
    };

    explicit FeatureQueueT(int capacity) : capacity_(capacity) {
        if (capacity < 0) throw ConfigError("queue capacity must be >= 0");
    }

    void push(const S* z, int dim, int label, int epoch_tag) {
        if (capacity_ == 0) return;
        entries_.push_back({std::vector<S>(z, z + dim), label, epoch_tag});
        while (entries_.size() > static_cast<size_t>(capacity_)) entries_.pop_front();
    }

    // drop entries older than max_age epochs
    void evict_stale(int current_epoch, int max_age = 2) {
        while (!entries_.empty() && entries_.front().epoch_tag < current_epoch - max_age) entries_.pop_front();
    }

    size_t size() const { return entries_.size(); }
    int capacity() const { return capacity_; }
    const std::deque<Entry>& entries() const { return entries_; }

    std::vector<int> labels() const {
        std::vector<int> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.label);
        return out;
    }

    // [size, dim] constant tensor (no gradient path)
    TensorT<S> as_matrix(int dim) const {
        std::vector<S> data;
        data.reserve(entries_.size() * static_cast<size_t>(dim));
        for (const auto& e : entries_) data.insert(data.end(), e.z.begin(), e.z.end());
        return TensorT<S>::from_data({static_cast<int>(entries_.size()), dim}, std::move(data));
    }

    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& e : entries_) {
            h = fnv1a64(e.z.data(), e.z.size() * sizeof(S), h);
            h = fnv1a64(&e.label, sizeof(e.label), h);
        }
        return h;
    }

  private:
    int capacity_;
    std::deque<Entry> entries_;
};

// Cross-domain pairs matched by label == pseudo-label. source_slot indexes
// the in-batch sources first ([0, n_batch_sources)), then queue entries.
struct PairIndex {
    struct Pair {
        int source_slot;
        int target_slot;
    };
    std::vector<Pair> pairs;
    int n_batch_sources = 0;

    size_t size() const { return pairs.size(); }
    bool source_from_queue(size_t i) const { return pairs[i].source_slot >= n_batch_sources; }
    int queue_index(size_t i) const { return pairs[i].source_slot - n_batch_sources; }
};

// Full cross product restricted to equal label/pseudo-label, in
// deterministic order: source-major, batch sources before queue sources,
// ascending target indices. Targets with confidence below the threshold are
// left out. Empty result is not an error (the IB term is skipped).
inline PairIndex build_pairs(const std::vector<int>& source_labels, const std::vector<int>& queue_labels,
                             const std::vector<int>& target_pseudo_labels,
                             const std::vector<double>* target_confidences = nullptr,
                             double confidence_threshold = 0.0) {
    PairIndex out;
    out.n_batch_sources = static_cast<int>(source_labels.size());
    auto target_ok = [&](size_t j) {
        return !target_confidences || (*target_confidences)[j] >= confidence_threshold;
    };
    int slot = 0;
    for (int label : source_labels) {
        for (size_t j = 0; j < target_pseudo_labels.size(); ++j)
            if (target_pseudo_labels[j] == label && target_ok(j))
                out.pairs.push_back({slot, static_cast<int>(j)});
        ++slot;
    }
    for (int label : queue_labels) {
        for (size_t j = 0; j < target_pseudo_labels.size(); ++j)
            if (target_pseudo_labels[j] == label && target_ok(j))
                out.pairs.push_back({slot, static_cast<int>(j)});
        ++slot;
    }
    return out;
}

// Uniform seeded subsample (order-preserving) once the pair list exceeds cap.
inline PairIndex subsample_pairs(PairIndex idx, size_t cap, Rng rng) {
    if (idx.pairs.size() <= cap) return idx;
    std::vector<size_t> keep(idx.pairs.size());
    for (size_t i = 0; i < keep.size(); ++i) keep[i] = i;
    // partial Fisher-Yates: first cap entries become the sample
    for (size_t i = 0; i < cap; ++i) {
        size_t j = i + static_cast<size_t>(rng.below(keep.size() - i));
        std::swap(keep[i], keep[j]);
    }
    keep.resize(cap);
    std::sort(keep.begin(), keep.end());
    PairIndex out;
    out.n_batch_sources = idx.n_batch_sources;
    out.pairs.reserve(cap);
    for (size_t i : keep) out.pairs.push_back(idx.pairs[i]);
    return out;
}

// Normalized cross-correlation over pair-matched rows (both sides mean
// centred per feature across the B pairs). C_ij pairs source feature i with
// target feature j; denominators below 1e-12 clamp to 1e-12. Returns nullopt
// for B < 2 (centering is degenerate), which callers treat as "skip the IB
// term this step".
template <class S>
std::optional<TensorT<S>> cross_correlation(TensorT<S> z_src, TensorT<S> z_tgt) {
    if (z_src.ndim() != 2 || z_tgt.ndim() != 2 || z_src.shape() != z_tgt.shape())
        throw PreconditionError("cross_correlation: row sets must share shape, got " + shape_str(z_src.shape()) +
                                " vs " + shape_str(z_tgt.shape()));
    const int b = z_src.dim(0), d = z_src.dim(1);
    if (b < 2) return std::nullopt;
    constexpr double kClamp = 1e-12;

    // centred copies and per-column norms
    auto center = [&](const std::vector<S>& z, std::vector<double>& u, std::vector<double>& norm) {
        u.resize(z.size());
        norm.assign(d, 0.0);
        for (int j = 0; j < d; ++j) {
            double mean = 0;
            for (int i = 0; i < b; ++i) mean += static_cast<double>(z[static_cast<size_t>(i) * d + j]);
            mean /= b;
            double sq = 0;
            for (int i = 0; i < b; ++i) {
                double c = static_cast<double>(z[static_cast<size_t>(i) * d + j]) - mean;
                u[static_cast<size_t>(i) * d + j] = c;
                sq += c * c;
            }
            norm[j] = std::max(std::sqrt(sq), kClamp);
        }
    };
    auto us = std::make_shared<std::vector<double>>();
    auto ut = std::make_shared<std::vector<double>>();
    auto ns = std::make_shared<std::vector<double>>();
    auto nt = std::make_shared<std::vector<double>>();
    center(z_src.data(), *us, *ns);
    center(z_tgt.data(), *ut, *nt);

    std::vector<S> c(static_cast<size_t>(d) * d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double dot = 0;
            for (int r = 0; r < b; ++r)
                dot += (*us)[static_cast<size_t>(r) * d + i] * (*ut)[static_cast<size_t>(r) * d + j];
            c[static_cast<size_t>(i) * d + j] = static_cast<S>(dot / ((*ns)[i] * (*nt)[j]));
        }

    return make_op<S>(
        {d, d}, std::move(c), {z_src, z_tgt}, "cross_correlation",
        [b, d, us, ut, ns, nt](NodeT<S>& node, GradStoreT<S>& gs) {
            auto& g = gs.grad_of(node);
            const auto& cv = node.data;
            auto& src_in = node.inputs[0];
            auto& tgt_in = node.inputs[1];
            // d(C_ij)/d(us_col_i) = (ut_col_j/nt_j - C_ij * us_col_i/ns_i) / ns_i, then
            // un-center: subtract the column mean of the accumulated grad.
            auto backprop_side = [&](bool source_side) {
                auto& in = source_side ? src_in : tgt_in;
                if (!in.requires_grad()) return;
                auto& gi = gs.grad_of(*in.node());
                const auto& u_own = source_side ? *us : *ut;
                const auto& u_oth = source_side ? *ut : *us;
                const auto& n_own = source_side ? *ns : *nt;
                const auto& n_oth = source_side ? *nt : *ns;
                std::vector<double> du(static_cast<size_t>(b) * d, 0.0);
                for (int i = 0; i < d; ++i) {
                    double inv_own = 1.0 / n_own[i];
                    for (int j = 0; j < d; ++j) {
                        double gij = source_side ? static_cast<double>(g[static_cast<size_t>(i) * d + j])
                                                 : static_cast<double>(g[static_cast<size_t>(j) * d + i]);
                        if (gij == 0.0) continue;
                        double cij = source_side ? static_cast<double>(cv[static_cast<size_t>(i) * d + j])
                                                 : static_cast<double>(cv[static_cast<size_t>(j) * d + i]);
                        double inv_oth = 1.0 / n_oth[j];
                        for (int r = 0; r < b; ++r) {
                            double uhat_oth = u_oth[static_cast<size_t>(r) * d + j] * inv_oth;
                            double uhat_own = u_own[static_cast<size_t>(r) * d + i] * inv_own;
                            du[static_cast<size_t>(r) * d + i] += gij * inv_own * (uhat_oth - cij * uhat_own);
                        }
                    }
                }
                for (int j = 0; j < d; ++j) {
                    double mean = 0;
                    for (int r = 0; r < b; ++r) mean += du[static_cast<size_t>(r) * d + j];
                    mean /= b;
                    for (int r = 0; r < b; ++r)
                        gi[static_cast<size_t>(r) * d + j] += static_cast<S>(du[static_cast<size_t>(r) * d + j] - mean);
                }
            };
            backprop_side(true);
            backprop_side(false);
        });
}

// Eq-style redundancy-reduction objective: sum_i (1 - C_ii)^2 +
// lambda * sum_{i != j} C_ij^2, composed from kernels so it stays
// differentiable back to the projections.
template <class S>
TensorT<S> ib_loss(TensorT<S> c, double lambda) {
    if (lambda < 0) throw ConfigError("ib_loss: lambda must be >= 0");
    if (c.ndim() != 2 || c.dim(0) != c.dim(1))
        throw PreconditionError("ib_loss: expects square C, got " + shape_str(c.shape()));
    const int d = c.dim(0);
    std::vector<S> eye(static_cast<size_t>(d) * d, S(0));
    for (int i = 0; i < d; ++i) eye[static_cast<size_t>(i) * d + i] = S(1);
    auto identity = TensorT<S>::from_data({d, d}, eye);
    auto off_mask = sub(TensorT<S>::ones({d, d}), identity);
    auto invariance = sum_all(square(mul(sub(identity, c), identity)));
    auto redundancy = sum_all(square(mul(c, off_mask)));
    return add(invariance, scalar_mul(redundancy, static_cast<S>(lambda)));
}

// ce + alpha * ib; a missing IB term (empty pair list this step) contributes 0.
template <class S>
TensorT<S> total_loss(TensorT<S> ce, std::optional<TensorT<S>> ib, double alpha) {
    if (alpha < 0) throw ConfigError("total_loss: alpha must be >= 0");
    if (!ib.has_value()) return ce;
    return add(ce, scalar_mul(*ib, static_cast<S>(alpha)));
}

}  // namespace udavt
