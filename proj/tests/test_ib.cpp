#include <cmath>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "udavt/gradcheck.hpp"
#include "udavt/ib.hpp"

using namespace udavt;

namespace {

// brute-force pairing: double loop over (source ∪ queue) x target
PairIndex brute_pairs(const std::vector<int>& src, const std::vector<int>& queue, const std::vector<int>& tgt) {
    PairIndex out;
    out.n_batch_sources = static_cast<int>(src.size());
    std::vector<int> all(src);
    all.insert(all.end(), queue.begin(), queue.end());
    for (size_t s = 0; s < all.size(); ++s)
        for (size_t t = 0; t < tgt.size(); ++t)
            if (all[s] == tgt[t]) out.pairs.push_back({static_cast<int>(s), static_cast<int>(t)});
    return out;
}

}  // namespace

TEST_CASE("pseudo labels") {
    SUBCASE("argmax with softmax confidence") {
        auto logits = Tensor::from_data({1, 3}, {5.0, 1.0, 1.0});
        auto pl = pseudo_label(logits);
        CHECK(pl.labels[0] == 0);
        auto ref = oracle::softmax_row({5.0, 1.0, 1.0});
        CHECK(pl.confidences[0] == doctest::Approx(ref[0]).epsilon(1e-12));
        CHECK(pl.confidences[0] == doctest::Approx(0.964).epsilon(1e-3));
    }
    SUBCASE("uniform logits tie-break to class 0") {
        auto pl = pseudo_label(Tensor::from_data({1, 4}, {0.7, 0.7, 0.7, 0.7}));
        CHECK(pl.labels[0] == 0);
        CHECK(pl.confidences[0] == doctest::Approx(0.25).epsilon(1e-12));
    }
    SUBCASE("scaled one-hot approaches confidence 1") {
        auto pl = pseudo_label(Tensor::from_data({1, 3}, {0.0, 50.0, 0.0}));
        CHECK(pl.labels[0] == 1);
        CHECK(pl.confidences[0] == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("build_pairs enumerates matching labels deterministically") {
    SUBCASE("worked example") {
        auto idx = build_pairs({0, 1}, {}, {1, 1, 0});
        REQUIRE(idx.size() == 3);
        CHECK(idx.pairs[0].source_slot == 0);
        CHECK(idx.pairs[0].target_slot == 2);
        CHECK(idx.pairs[1].source_slot == 1);
        CHECK(idx.pairs[1].target_slot == 0);
        CHECK(idx.pairs[2].source_slot == 1);
        CHECK(idx.pairs[2].target_slot == 1);
    }
    SUBCASE("disjoint label sets give an empty index") {
        CHECK(build_pairs({0, 0}, {}, {1, 2}).size() == 0);
    }
    SUBCASE("queue entries add one pair per matching target") {
        auto without = build_pairs({1}, {}, {0, 0, 1});
        auto with = build_pairs({1}, {0}, {0, 0, 1});
        CHECK(with.size() == without.size() + 2);  // two label-0 targets
        CHECK(with.source_from_queue(with.size() - 1));
        CHECK(with.queue_index(with.size() - 1) == 0);
    }
    SUBCASE("matches brute force on 100 seeded configurations") {
        for (uint64_t s = 0; s < 100; ++s) {
            Rng rng(s * 31 + 7);
            int k = 2 + static_cast<int>(rng.below(5));
            auto draw = [&](size_t n) {
                std::vector<int> v(n);
                for (auto& x : v) x = static_cast<int>(rng.below(static_cast<uint64_t>(k)));
                return v;
            };
            auto src = draw(rng.below(6));
            auto queue = draw(rng.below(8));
            auto tgt = draw(1 + rng.below(7));
            auto got = build_pairs(src, queue, tgt);
            auto want = brute_pairs(src, queue, tgt);
            REQUIRE(got.size() == want.size());
            for (size_t i = 0; i < got.size(); ++i) {
                CHECK(got.pairs[i].source_slot == want.pairs[i].source_slot);
                CHECK(got.pairs[i].target_slot == want.pairs[i].target_slot);
            }
        }
    }
    SUBCASE("confidence threshold filters targets") {
        std::vector<double> conf = {0.9, 0.2};
        auto idx = build_pairs({0}, {}, {0, 0}, &conf, 0.5);
        REQUIRE(idx.size() == 1);
        CHECK(idx.pairs[0].target_slot == 0);
    }
}

TEST_CASE("pair subsampling is a seeded uniform cap") {
    auto idx = build_pairs({0, 0, 0}, {}, {0, 0, 0, 0});
    REQUIRE(idx.size() == 12);
    auto capped = subsample_pairs(idx, 5, Rng(123));
    CHECK(capped.size() == 5);
    auto again = subsample_pairs(idx, 5, Rng(123));
    for (size_t i = 0; i < capped.size(); ++i) {
        CHECK(capped.pairs[i].source_slot == again.pairs[i].source_slot);
        CHECK(capped.pairs[i].target_slot == again.pairs[i].target_slot);
    }
    CHECK(subsample_pairs(idx, 20, Rng(1)).size() == 12);
}

TEST_CASE("feature queue") {
    FeatureQueueT<double> q(2);
    double a[2] = {1, 2}, b[2] = {3, 4}, c[2] = {5, 6};
    q.push(a, 2, 0, 0);
    q.push(b, 2, 1, 0);
    q.push(c, 2, 2, 1);
    CHECK(q.size() == 2);  // oldest evicted
    CHECK(q.entries().front().label == 1);
    CHECK(q.labels() == std::vector<int>{1, 2});

    SUBCASE("size is min(pushes, capacity)") {
        FeatureQueueT<double> q2(8);
        for (int i = 0; i < 5; ++i) q2.push(a, 2, 0, 0);
        CHECK(q2.size() == 5);
        for (int i = 0; i < 5; ++i) q2.push(a, 2, 0, 0);
        CHECK(q2.size() == 8);
    }
    SUBCASE("stale entries evicted eagerly") {
        FeatureQueueT<double> q3(16);
        q3.push(a, 2, 0, 0);
        q3.push(b, 2, 1, 2);
        q3.push(c, 2, 2, 5);
        q3.evict_stale(5);  // keeps tags >= 3
        CHECK(q3.size() == 1);
        CHECK(q3.entries().front().label == 2);
    }
    SUBCASE("empty queue contributes no pairs") {
        FeatureQueueT<double> q4(4);
        CHECK(build_pairs({0}, q4.labels(), {0}).size() == 1);  // batch pair only
    }
    SUBCASE("queue contents never receive gradient") {
        uint64_t before = q.content_hash();
        auto m = q.as_matrix(2);
        CHECK_FALSE(m.requires_grad());
        auto z = Tensor::from_data({2, 2}, {0.5, 1.5, -2.0, 0.25}, true);
        auto cc = cross_correlation(concat<double>({m, z}, 0), randn_tensor<double>({4, 2}, Rng(3), 1.0));
        backward(ib_loss(*cc, 5e-3));
        CHECK(q.content_hash() == before);
    }
}

TEST_CASE("cross correlation") {
    SUBCASE("identical row sets have unit diagonal") {
        auto z = randn_tensor<double>({6, 4}, Rng(17), 1.0);
        auto c = cross_correlation(z, z.detached());
        REQUIRE(c.has_value());
        for (int i = 0; i < 4; ++i) CHECK(c->data()[i * 4 + i] == doctest::Approx(1.0).epsilon(1e-12));
        for (size_t i = 0; i < c->size(); ++i) {
            CHECK(c->data()[i] <= 1.0 + 1e-6);
            CHECK(c->data()[i] >= -1.0 - 1e-6);
        }
    }
    SUBCASE("constant feature column zeroes its row and column") {
        auto zs = randn_tensor<double>({5, 3}, Rng(18), 1.0);
        for (int i = 0; i < 5; ++i) zs.data()[i * 3 + 1] = 2.5;  // constant column 1
        auto zt = randn_tensor<double>({5, 3}, Rng(19), 1.0);
        auto c = cross_correlation(zs, zt);
        REQUIRE(c.has_value());
        for (int j = 0; j < 3; ++j) CHECK(c->data()[1 * 3 + j] == doctest::Approx(0.0));
    }
    SUBCASE("matches the double-loop oracle") {
        auto zs = randn_tensor<double>({4, 3}, Rng(20), 1.0);
        auto zt = randn_tensor<double>({4, 3}, Rng(21), 1.0);
        auto c = cross_correlation(zs, zt);
        REQUIRE(c.has_value());
        auto ref = oracle::cross_correlation(zs.data(), zt.data(), 4, 3);
        for (size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(c->data()[i] - ref[i]) < 1e-10);
    }
    SUBCASE("fewer than two pairs signals a skip") {
        auto z1 = randn_tensor<double>({1, 3}, Rng(22), 1.0);
        CHECK_FALSE(cross_correlation(z1, z1.detached()).has_value());
    }
}

TEST_CASE("ib loss") {
    const int d = 5;
    std::vector<double> eye(d * d, 0.0);
    for (int i = 0; i < d; ++i) eye[i * d + i] = 1.0;
    CHECK(ib_loss(Tensor::from_data({d, d}, eye), 5e-3).value() == doctest::Approx(0.0));
    CHECK(ib_loss(Tensor::zeros({d, d}), 5e-3).value() == doctest::Approx(static_cast<double>(d)));

    auto c = randn_tensor<double>({d, d}, Rng(23), 0.7);
    double got = ib_loss(c, 5e-3).value();
    double want = oracle::ib_loss(c.data(), d, 5e-3);
    CHECK(std::abs(got - want) < 1e-12);

    CHECK_THROWS_AS(ib_loss(c, -0.1), ConfigError);
}

TEST_CASE("composed correlation + ib loss matches brute force on seeded inputs") {
    for (uint64_t s = 0; s < 25; ++s) {
        Rng rng(s * 13 + 5);
        int b = 2 + static_cast<int>(rng.below(15));
        int d = 1 + static_cast<int>(rng.below(8));
        auto zs = randn_tensor<double>({b, d}, rng.derive("zs"), 1.0);
        auto zt = randn_tensor<double>({b, d}, rng.derive("zt"), 1.0);
        auto c = cross_correlation(zs, zt);
        REQUIRE(c.has_value());
        double got = ib_loss(*c, 5e-3).value();
        double want = oracle::ib_loss(oracle::cross_correlation(zs.data(), zt.data(), b, d), d, 5e-3);
        CHECK(std::abs(got - want) < 1e-10);
    }
}

TEST_CASE("gradient of ib∘cross_correlation matches finite differences") {
    // the 4-pair, 3-feature case plus a couple larger ones
    for (uint64_t s = 0; s < 3; ++s) {
        int b = s == 0 ? 4 : 6 + static_cast<int>(s);
        int d = s == 0 ? 3 : 4;
        auto zs = randn_tensor<double>({b, d}, Rng(100 + s), 1.0);
        auto zt = randn_tensor<double>({b, d}, Rng(200 + s), 1.0);
        for (int side = 0; side < 2; ++side) {
            auto& probe_side = side == 0 ? zs : zt;
            Tensor leaf = probe_side.detached();
            leaf.set_requires_grad(true);
            auto build = [&](Tensor t) {
                auto a = side == 0 ? t : zs;
                auto bb = side == 0 ? zt : t;
                return ib_loss(*cross_correlation(a, bb), 5e-3);
            };
            backward(build(leaf));
            auto fd = finite_difference_grad<double>(
                [&](const Tensor& p) { return build(p).value(); }, probe_side, 1e-5);
            CHECK(max_rel_err(leaf.grad(), fd.data()) < 1e-4);
        }
    }
}

TEST_CASE("loss is invariant to pair order") {
    auto zs = randn_tensor<double>({6, 4}, Rng(31), 1.0);
    auto zt = randn_tensor<double>({6, 4}, Rng(32), 1.0);
    double base = ib_loss(*cross_correlation(zs, zt), 5e-3).value();
    std::vector<int> perm = {3, 0, 5, 1, 4, 2};
    double permuted = ib_loss(*cross_correlation(gather_rows(zs, perm), gather_rows(zt, perm)), 5e-3).value();
    CHECK(permuted == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("ground-truth label mode pairs only truly equal classes") {
    Rng rng(77);
    std::vector<int> src_labels(12), tgt_truth(15);
    for (auto& v : src_labels) v = static_cast<int>(rng.below(4));
    for (auto& v : tgt_truth) v = static_cast<int>(rng.below(4));
    auto idx = build_pairs(src_labels, {}, tgt_truth);  // supervised: pseudo replaced by truth
    for (size_t i = 0; i < idx.size(); ++i)
        CHECK(src_labels[idx.pairs[i].source_slot] == tgt_truth[idx.pairs[i].target_slot]);
}

TEST_CASE("total loss combines ce and ib") {
    auto ce = Tensor::scalar(1.25);
    auto ib = Tensor::scalar(4.0);
    CHECK(total_loss(ce, std::optional<Tensor>(ib), 0.0).value() == doctest::Approx(1.25));
    CHECK(total_loss(ce, std::optional<Tensor>(ib), 0.01).value() == doctest::Approx(1.29));
    CHECK(total_loss(ce, std::optional<Tensor>(), 0.025).value() == doctest::Approx(1.25));
    CHECK_THROWS_AS(total_loss(ce, std::optional<Tensor>(ib), -1.0), ConfigError);
}
