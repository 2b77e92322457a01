#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "w2vc/errors.hpp"
#include "w2vc/losses.hpp"

using namespace w2vc;

namespace {

TensorPtr random_matrix(int R, int C, uint64_t seed, bool requires_grad = false) {
    Rng r(seed);
    auto t = Tensor::make({R, C}, requires_grad);
    for (double& v : t->data) v = r.normal(0.0, 1.0);
    return t;
}

FiniteDiffReport check_grads(const std::function<TensorPtr(Graph&)>& build,
                             const std::vector<TensorPtr>& params, double tol = 1e-6) {
    {
        Graph g;
        auto loss = build(g);
        for (auto& p : params) p->grad.assign(p->data.size(), 0.0);
        g.backward(loss);
    }
    auto f = [&]() {
        Graph g;
        return build(g)->value();
    };
    return finite_diff_check(f, params, 1e-5, tol);
}

}  // namespace

TEST_CASE("cosine_value hand cases") {
    CHECK(cosine_value({2, 0}, {5, 0}) == 1.0);
    CHECK(cosine_value({1, 0}, {-3, 0}) == -1.0);
    CHECK(cosine_value({1, 0}, {0, 2}) == 0.0);
    CHECK(cosine_value({1, 0}, {0.6, 0.8}) == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(cosine_value({0, 0}, {1, 1}) == 0.0);  // zero-norm guard
    CHECK_THROWS_AS(cosine_value({1, 2}, {1, 2, 3}), shape_error);
}

TEST_CASE("negative sampling draws valid distractor sets") {
    Rng r(31);
    auto ns = sample_negatives(10, {2, 5}, 4, r);
    REQUIRE(ns.anchors == std::vector<int>{2, 5});
    REQUIRE(ns.negatives.size() == 2);
    CHECK(ns.skipped == 0);
    for (size_t i = 0; i < 2; ++i) {
        CHECK(ns.negatives[i].size() == 4);
        std::set<int> seen;
        for (int j : ns.negatives[i]) {
            CHECK(j >= 0);
            CHECK(j < 10);
            CHECK(j != ns.anchors[i]);
            seen.insert(j);
        }
        CHECK(seen.size() == 4);  // no repeats
    }
}

TEST_CASE("negative sampling exhausts short utterances deterministically") {
    Rng r(7);
    const auto before = r.state();
    auto ns = sample_negatives(2, {0}, 50, r);
    CHECK(ns.negatives == std::vector<std::vector<int>>{{1}});
    CHECK(r.state() == before);  // no randomness consumed on the exhaustive path

    auto ns5 = sample_negatives(5, {2}, 50, r);
    CHECK(ns5.negatives == std::vector<std::vector<int>>{{0, 1, 3, 4}});
}

TEST_CASE("negative sampling skips single-frame utterances") {
    Rng r(7);
    auto ns = sample_negatives(1, {0}, 4, r);
    CHECK(ns.anchors.empty());
    CHECK(ns.negatives.empty());
    CHECK(ns.skipped == 1);
}

TEST_CASE("negative sampling is uniform and never picks the anchor") {
    const int T = 21, N = 5, draws = 100000;
    Rng r(4242);
    std::vector<int64_t> counts(static_cast<size_t>(T), 0);
    for (int it = 0; it < draws; ++it) {
        auto ns = sample_negatives(T, {7}, N, r);
        for (int j : ns.negatives[0]) ++counts[static_cast<size_t>(j)];
    }
    CHECK(counts[7] == 0);
    const double expected = static_cast<double>(draws) * N / (T - 1);
    double chi2 = 0;
    for (int j = 0; j < T; ++j) {
        if (j == 7) continue;
        const double d = static_cast<double>(counts[static_cast<size_t>(j)]) - expected;
        chi2 += d * d / expected;
    }
    // 19 degrees of freedom; the 0.999 quantile is about 43.8
    CHECK(chi2 < 45.0);
}

TEST_CASE("contrastive loss with indistinguishable candidates is log(N+1)") {
    const int T = 60, D = 5;
    auto cp = random_matrix(T, D, 11);
    auto z_hat = Tensor::make({T, D});
    Rng rv(12);
    std::vector<double> v(D);
    for (double& x : v) x = rv.normal(0.0, 1.0);
    for (int t = 0; t < T; ++t)
        std::copy(v.begin(), v.end(), z_hat->data.begin() + static_cast<size_t>(t) * D);

    Rng r(13);
    auto ns = sample_negatives(T, {10}, 50, r);
    REQUIRE(ns.negatives[0].size() == 50);
    Graph g;
    auto res = contrastive_loss(g, g.constant(cp->shape, cp->data),
                                g.constant(z_hat->shape, z_hat->data), ns, 0.1);
    CHECK(std::abs(res.loss->value() - std::log(51.0)) <= 1e-9);
}

TEST_CASE("contrastive loss with a perfect positive and opposed negatives") {
    const int T = 52, D = 4;
    auto cp = Tensor::make({T, D});
    auto z_hat = Tensor::make({T, D});
    Rng rv(21);
    for (int t = 0; t < T; ++t) {
        std::vector<double> row(D);
        for (double& x : row) x = rv.normal(0.0, 1.0);
        for (int j = 0; j < D; ++j) {
            cp->data[static_cast<size_t>(t) * D + j] = row[static_cast<size_t>(j)];
            z_hat->data[static_cast<size_t>(t) * D + j] = row[static_cast<size_t>(j)];
        }
    }
    // anchor 0: positive is aligned; make every other frame point the other way
    for (int t = 1; t < T; ++t)
        for (int j = 0; j < D; ++j)
            z_hat->data[static_cast<size_t>(t) * D + j] = -cp->data[j];
    NegativeSet ns;
    ns.anchors = {0};
    ns.negatives.emplace_back();
    for (int t = 1; t < 51; ++t) ns.negatives[0].push_back(t);

    Graph g;
    auto res = contrastive_loss(g, g.constant(cp->shape, cp->data),
                                g.constant(z_hat->shape, z_hat->data), ns, 0.1);
    // cos(pos) = 1, cos(neg) = -1, temperature 0.1: log(1 + 50 e^-20)
    const double expected = std::log1p(50.0 * std::exp(-20.0));
    CHECK(std::abs(res.loss->value() - expected) <= 1e-12);
}

TEST_CASE("contrastive loss matches a brute-force oracle") {
    const int T = 10, D = 4;
    const double kappa = 0.2;
    auto cp = random_matrix(T, D, 51);
    auto z_hat = random_matrix(T, D, 52);
    Rng r(53);
    auto ns = sample_negatives(T, {1, 4, 8}, 3, r);

    Graph g;
    auto res = contrastive_loss(g, g.constant(cp->shape, cp->data),
                                g.constant(z_hat->shape, z_hat->data), ns, kappa);

    auto row = [D](const TensorPtr& t, int i) {
        return std::vector<double>(t->data.begin() + static_cast<size_t>(i) * D,
                                   t->data.begin() + static_cast<size_t>(i + 1) * D);
    };
    double oracle = 0;
    for (size_t i = 0; i < ns.anchors.size(); ++i) {
        const int t = ns.anchors[i];
        const double pos = cosine_value(row(cp, t), row(z_hat, t)) / kappa;
        double denom = std::exp(pos);
        for (int j : ns.negatives[i]) denom += std::exp(cosine_value(row(cp, t), row(z_hat, j)) / kappa);
        oracle += std::log(denom) - pos;
    }
    oracle /= static_cast<double>(ns.anchors.size());
    CHECK(std::abs(res.loss->value() - oracle) <= 1e-10);
}

TEST_CASE("contrastive loss ignores candidate magnitudes") {
    const int T = 8, D = 3;
    auto cp = random_matrix(T, D, 61);
    auto z_hat = random_matrix(T, D, 62);
    Rng r(63);
    auto ns = sample_negatives(T, {2, 5}, 4, r);

    auto eval = [&](const std::vector<double>& z_values) {
        Graph g;
        auto res = contrastive_loss(g, g.constant(cp->shape, cp->data),
                                    g.constant(z_hat->shape, z_values), ns, 0.1);
        return res.loss->value();
    };
    const double base = eval(z_hat->data);
    auto scaled = z_hat->data;
    for (int j = 0; j < D; ++j) scaled[static_cast<size_t>(3) * D + j] *= 3.7;  // one candidate row
    CHECK(std::abs(eval(scaled) - base) <= 1e-12);

    auto cp_scaled = cp->data;
    for (int j = 0; j < D; ++j) cp_scaled[static_cast<size_t>(2) * D + j] *= 0.25;  // an anchor row
    Graph g;
    auto res = contrastive_loss(g, g.constant(cp->shape, cp_scaled),
                                g.constant(z_hat->shape, z_hat->data), ns, 0.1);
    CHECK(std::abs(res.loss->value() - base) <= 1e-12);
}

TEST_CASE("contrastive loss flags zero-norm candidates and stays finite") {
    const int T = 6, D = 3;
    auto cp = random_matrix(T, D, 71);
    auto z_hat = random_matrix(T, D, 72);
    for (int j = 0; j < D; ++j) z_hat->data[static_cast<size_t>(4) * D + j] = 0.0;
    NegativeSet ns;
    ns.anchors = {1};
    ns.negatives = {{3, 4}};
    Graph g;
    auto res = contrastive_loss(g, g.constant(cp->shape, cp->data),
                                g.constant(z_hat->shape, z_hat->data), ns, 0.1);
    CHECK(res.zero_norm_pairs == 1);
    CHECK(std::isfinite(res.loss->value()));
}

TEST_CASE("contrastive loss validates its inputs") {
    auto cp = random_matrix(4, 3, 81);
    auto z_hat = random_matrix(4, 3, 82);
    NegativeSet ns;
    ns.anchors = {1};
    ns.negatives = {{0, 2}};
    Graph g;
    auto c = g.constant(cp->shape, cp->data);
    auto z = g.constant(z_hat->shape, z_hat->data);
    CHECK_THROWS_AS(contrastive_loss(g, c, z, ns, 0.0), config_error);
    CHECK_THROWS_AS(contrastive_loss(g, c, z, ns, -1.0), config_error);
    auto z_bad = g.constant({4, 2}, std::vector<double>(8, 0.0));
    CHECK_THROWS_AS(contrastive_loss(g, c, z_bad, ns, 0.1), shape_error);
    NegativeSet ragged;
    ragged.anchors = {1, 2};
    ragged.negatives = {{0, 2}, {0}};
    CHECK_THROWS_AS(contrastive_loss(g, c, z, ragged, 0.1), usage_error);
    NegativeSet self_ref;
    self_ref.anchors = {1};
    self_ref.negatives = {{1, 2}};
    CHECK_THROWS_AS(contrastive_loss(g, c, z, self_ref, 0.1), usage_error);
}

TEST_CASE("contrastive loss over no anchors is zero") {
    auto cp = random_matrix(1, 3, 91);
    Graph g;
    auto c = g.constant(cp->shape, cp->data);
    NegativeSet ns;  // empty: the single-frame case after skipping
    auto res = contrastive_loss(g, c, c, ns, 0.1);
    CHECK(res.loss->value() == 0.0);
}

TEST_CASE("contrastive loss passes a finite-difference check") {
    const int T = 6, D = 3;
    auto cp = random_matrix(T, D, 101, true);
    auto z_hat = random_matrix(T, D, 102, true);
    Rng r(103);
    auto ns = sample_negatives(T, {1, 3}, 2, r);
    auto rep = check_grads(
        [&](Graph& g) { return contrastive_loss(g, cp, z_hat, ns, 0.15).loss; }, {cp, z_hat},
        1e-6);
    CHECK(rep.pass);
}

TEST_CASE("diversity loss at the uniform distribution is zero") {
    const int V = 32;
    Graph g;
    std::vector<TensorPtr> probs = {g.constant({V}, std::vector<double>(V, 1.0 / V)),
                                    g.constant({V}, std::vector<double>(V, 1.0 / V))};
    CHECK(std::abs(diversity_loss(g, probs, V)->value()) <= 1e-12);
}

TEST_CASE("diversity loss at one-hot usage approaches one") {
    const int V = 320;
    Graph g;
    std::vector<double> onehot(V, 0.0);
    onehot[17] = 1.0;
    std::vector<TensorPtr> probs = {g.constant({V}, onehot), g.constant({V}, onehot)};
    CHECK(std::abs(diversity_loss(g, probs, V)->value() - 0.996875) <= 1e-12);  // (V-1)/V
}

TEST_CASE("diversity loss matches an entropy-perplexity oracle") {
    const int V = 12, G = 3;
    Rng r(111);
    Graph g;
    std::vector<TensorPtr> probs;
    double perp_total = 0;
    for (int i = 0; i < G; ++i) {
        std::vector<double> p(V);
        double s = 0;
        for (double& x : p) {
            x = r.uniform(0.01, 1.0);
            s += x;
        }
        for (double& x : p) x /= s;
        double ent = 0;
        for (double x : p) ent -= x * std::log(x);
        perp_total += std::exp(ent);
        probs.push_back(g.constant({V}, p));
    }
    const double oracle = (G * V - perp_total) / (G * V);
    CHECK(std::abs(diversity_loss(g, probs, V)->value() - oracle) <= 1e-12);
}

TEST_CASE("diversity loss grows as usage concentrates") {
    const int V = 8;
    std::vector<double> uniform(V, 1.0 / V), onehot(V, 0.0);
    onehot[2] = 1.0;
    double prev = -1;
    for (int k = 0; k <= 10; ++k) {
        const double lam = k / 10.0;
        std::vector<double> p(V);
        for (int j = 0; j < V; ++j)
            p[static_cast<size_t>(j)] =
                (1 - lam) * uniform[static_cast<size_t>(j)] + lam * onehot[static_cast<size_t>(j)];
        Graph g;
        const double val = diversity_loss(g, {g.constant({V}, p)}, V)->value();
        CHECK(val > prev);
        prev = val;
    }
}

TEST_CASE("diversity loss validates distributions") {
    Graph g;
    CHECK_THROWS_AS(diversity_loss(g, {g.constant({4}, {0.5, 0.4, 0.2, 0.2})}, 4), usage_error);
    CHECK_THROWS_AS(diversity_loss(g, {g.constant({3}, {0.5, 0.3, 0.2})}, 4), shape_error);
    CHECK_THROWS_AS(diversity_loss(g, {}, 4), usage_error);
}

TEST_CASE("diversity loss passes a finite-difference check through softmax") {
    const int V = 6;
    auto logits = random_matrix(1, V, 121, true);
    auto rep = check_grads(
        [&](Graph& g) {
            auto p = g.softmax_rows(logits);
            return diversity_loss(g, {p}, V);
        },
        {logits}, 1e-6);
    CHECK(rep.pass);
}

TEST_CASE("consistency loss hand cases") {
    Graph g;
    auto x = g.constant({2, 2}, {1, 2, 0, 0});
    auto s_same = g.constant({2, 2}, {1, 2, 0, 0});
    CHECK(consistency_loss(g, x, s_same)->value() == 0.0);
    auto s_off = g.constant({2, 2}, {-2, -2, 0, 0});  // residual (3, 4) then (0, 0)
    CHECK(consistency_loss(g, x, s_off)->value() == 2.5);
    auto bad = g.constant({2, 3}, std::vector<double>(6, 0.0));
    CHECK_THROWS_AS(consistency_loss(g, x, bad), shape_error);
}

TEST_CASE("consistency loss passes a finite-difference check") {
    auto x = random_matrix(4, 5, 131);
    auto s = random_matrix(4, 5, 132, true);
    auto rep = check_grads(
        [&](Graph& g) { return consistency_loss(g, g.constant(x->shape, x->data), s); }, {s},
        1e-6);
    CHECK(rep.pass);
}

TEST_CASE("total loss combines the three terms") {
    SUBCASE("plain sum with a raw codebook term") {
        Graph g;
        auto lm = g.constant({1}, {1.0});
        auto lcb = g.constant({1}, {0.6});
        auto lc = g.constant({1}, {2.0});
        auto out = total_loss(g, lm, lcb, false, 1.5, lc, 1);
        CHECK(out.total->value() == 1.0 + 0.6 + 2.0);
        CHECK(out.total->value() == doctest::Approx(3.6).epsilon(1e-15));
        CHECK(out.codebook->value() == 0.6);
    }
    SUBCASE("alpha applies only on the gumbel path") {
        Graph g;
        auto lm = g.constant({1}, {1.0});
        auto raw = g.constant({1}, {0.4});
        auto with_alpha = total_loss(g, lm, raw, true, 1.5, nullptr, 0);
        CHECK(with_alpha.codebook->value() == 1.5 * 0.4);
        auto without = total_loss(g, lm, raw, false, 1.5, nullptr, 0);
        CHECK(without.codebook->value() == 0.4);
    }
    SUBCASE("switching gamma on adds exactly the consistency value") {
        Graph g;
        auto lm = g.constant({1}, {0.731});
        auto lcb = g.constant({1}, {0.217});
        auto lc = g.constant({1}, {1.409});
        auto off = total_loss(g, lm, lcb, false, 1.5, nullptr, 0);
        auto on = total_loss(g, lm, lcb, false, 1.5, lc, 1);
        CHECK(on.total->value() == off.total->value() + lc->value());
        CHECK(off.consistency == nullptr);
    }
    SUBCASE("gamma one requires a consistency term") {
        Graph g;
        auto lm = g.constant({1}, {1.0});
        auto lcb = g.constant({1}, {0.5});
        CHECK_THROWS_AS(total_loss(g, lm, lcb, false, 1.5, nullptr, 1), usage_error);
    }
}
