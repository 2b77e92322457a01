#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "w2vc/rng.hpp"
#include "w2vc/tensor.hpp"

#include <cmath>
#include <vector>

using namespace w2vc;

namespace {

TensorPtr rand_tensor(Rng& rng, std::vector<int> shape, double lo, double hi,
                      const std::string& name) {
    auto t = Tensor::make(std::move(shape), /*requires_grad=*/true);
    for (auto& v : t->data) v = rng.uniform(lo, hi);
    t->name = name;
    return t;
}

// Runs backward once to populate analytic grads, then verifies them against
// central differences of a fresh forward rebuild.
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

} // namespace

TEST_CASE("tensor construction and accessors") {
    auto t = Tensor::make({2, 3});
    CHECK(t->size() == 6);
    CHECK(t->rank() == 2);
    CHECK(t->rows() == 2);
    CHECK(t->cols() == 3);
    CHECK_FALSE(t->is_scalar());

    auto s = Tensor::scalar(4.25);
    CHECK(s->is_scalar());
    CHECK(s->value() == 4.25);

    CHECK_THROWS_AS(Tensor::make({2, 2}, {1.0, 2.0, 3.0}), shape_error);
    CHECK_THROWS_AS(Tensor::make({0}), shape_error);
    CHECK_THROWS_AS(t->value(), shape_error);
    CHECK_THROWS_AS(s->rows(), shape_error);

    t->data[3] = std::nan("");
    CHECK_FALSE(t->all_finite());
}

TEST_CASE("matmul identity and hand cases") {
    Graph g;
    auto I = g.constant({2, 2}, {1, 0, 0, 1});
    auto a = g.constant({2, 2}, {1, 2, 3, 4});
    auto out = g.matmul(I, a);
    CHECK(out->data == std::vector<double>{1, 2, 3, 4});

    auto row = g.constant({1, 2}, {1, 2});
    auto col = g.constant({2, 1}, {3, 4});
    CHECK(g.matmul(row, col)->data == std::vector<double>{11});

    CHECK_THROWS_WITH_AS(g.matmul(col, a), doctest::Contains("[2x1]"), shape_error);
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(11);
    auto a = rand_tensor(rng, {5, 4}, -1, 1, "a");
    auto b = rand_tensor(rng, {4, 3}, -1, 1, "b");
    auto rep = check_grads([&](Graph& g) { return g.sum_all(g.matmul(a, b)); }, {a, b});
    CHECK(rep.pass);
    CHECK(rep.max_rel_err <= 1e-6);
    CHECK(rep.checked > 0);
}

TEST_CASE("matmul_nt equals matmul against a transposed copy") {
    Rng rng(12);
    auto a = rand_tensor(rng, {3, 4}, -1, 1, "a");
    auto b = rand_tensor(rng, {5, 4}, -1, 1, "b");
    Graph g;
    std::vector<double> bt(4 * 5);
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 4; ++c) bt[c * 5 + r] = b->data[r * 4 + c];
    auto ref = g.matmul(a, g.constant({4, 5}, bt));
    auto out = g.matmul_nt(a, b);
    for (size_t i = 0; i < out->data.size(); ++i)
        CHECK(out->data[i] == doctest::Approx(ref->data[i]).epsilon(1e-12));

    auto rep = check_grads([&](Graph& gg) { return gg.sum_all(gg.matmul_nt(a, b)); }, {a, b});
    CHECK(rep.pass);
}

TEST_CASE("softmax symmetry, stability and gradient") {
    Graph g;
    auto u = g.softmax_rows(g.constant({1, 3}, {0, 0, 0}));
    for (double v : u->data) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

    auto s = g.softmax_rows(g.constant({1, 2}, {1000, 0}));
    CHECK(s->all_finite());
    CHECK(std::abs(s->data[0] - 1.0) <= 1e-12);
    CHECK(std::abs(s->data[1] - 0.0) <= 1e-12);

    auto rows = g.softmax_rows(g.constant({2, 3}, {0.3, -1.2, 2.0, 5.0, 5.0, -5.0}));
    for (int r = 0; r < 2; ++r) {
        double sum = rows->data[r * 3] + rows->data[r * 3 + 1] + rows->data[r * 3 + 2];
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }

    auto bad = g.constant({1, 2}, {std::nan(""), 0.0});
    CHECK_THROWS_AS(g.softmax_rows(bad), numeric_error);

    Rng rng(13);
    auto x = rand_tensor(rng, {1, 7}, -2, 2, "x");
    auto w = Tensor::make({1, 7});
    for (auto& v : w->data) v = rng.uniform(-1, 1);
    auto rep = check_grads(
        [&](Graph& gg) {
            return gg.sum_all(gg.mul(gg.softmax_rows(x), gg.constant(w->shape, w->data)));
        },
        {x});
    CHECK(rep.pass);
}

TEST_CASE("layer_norm constant row, two-point row and gradient") {
    Graph g;
    auto gain = g.constant({3}, {1, 1, 1});
    auto bias = g.constant({3}, {0, 0, 0});
    auto flat = g.layer_norm(g.constant({1, 3}, {5, 5, 5}), gain, bias);
    for (double v : flat->data) CHECK(std::abs(v) <= 1e-6);

    auto gain2 = g.constant({2}, {1, 1});
    auto bias2 = g.constant({2}, {0, 0});
    auto two = g.layer_norm(g.constant({1, 2}, {1, 3}), gain2, bias2);
    CHECK(two->data[0] == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(two->data[1] == doctest::Approx(1.0).epsilon(1e-4));

    Rng rng(14);
    auto x = rand_tensor(rng, {3, 4}, -2, 2, "x");
    auto gn = rand_tensor(rng, {4}, 0.5, 1.5, "gain");
    auto bs = rand_tensor(rng, {4}, -0.5, 0.5, "bias");
    auto w = Tensor::make({3, 4});
    for (auto& v : w->data) v = rng.uniform(-1, 1);
    auto rep = check_grads(
        [&](Graph& gg) {
            return gg.sum_all(gg.mul(gg.layer_norm(x, gn, bs), gg.constant(w->shape, w->data)));
        },
        {x, gn, bs});
    CHECK(rep.pass);
}

TEST_CASE("gradient_scale identity forward, linear backward, zero annihilation") {
    Rng rng(15);
    auto x = rand_tensor(rng, {3, 3}, -1, 1, "x");
    auto w = Tensor::make({3, 3});
    for (auto& v : w->data) v = rng.uniform(-1, 1);

    auto run = [&](double factor) {
        Graph g;
        auto y = g.gradient_scale(x, factor);
        CHECK(y->data == x->data);
        auto loss = g.sum_all(g.mul(y, g.constant(w->shape, w->data)));
        x->grad.assign(x->data.size(), 0.0);
        g.backward(loss);
        return x->grad;
    };
    auto g1 = run(1.0);
    auto gs = run(0.1);
    for (size_t i = 0; i < g1.size(); ++i) CHECK(gs[i] == 0.1 * g1[i]);
    auto g0 = run(0.0);
    for (double v : g0) CHECK(v == 0.0);
}

TEST_CASE("backprop of a plain sum gives all-ones gradient") {
    Rng rng(16);
    auto x = rand_tensor(rng, {4, 2}, -1, 1, "x");
    Graph g;
    auto loss = g.sum_all(x);
    x->grad.clear();
    g.backward(loss);
    for (double v : x->grad) CHECK(v == 1.0);
}

TEST_CASE("backprop accumulates across fan-out") {
    Rng rng(17);
    auto x = rand_tensor(rng, {5}, -1, 1, "x");
    auto y = rand_tensor(rng, {5}, -1, 1, "y");
    Graph g;
    auto loss = g.sum_all(g.add(g.mul(x, y), g.mul(x, x)));
    x->grad.clear();
    y->grad.clear();
    g.backward(loss);
    for (int i = 0; i < 5; ++i) {
        CHECK(x->grad[i] == doctest::Approx(y->data[i] + 2 * x->data[i]).epsilon(1e-12));
        CHECK(y->grad[i] == doctest::Approx(x->data[i]).epsilon(1e-12));
    }
}

TEST_CASE("backward rejects a non-scalar loss") {
    Graph g;
    auto x = g.constant({2, 2}, {1, 2, 3, 4});
    CHECK_THROWS_AS(g.backward(x), usage_error);
}

TEST_CASE("repeated backward over one graph is bit-identical") {
    Rng rng(18);
    ParamRegistry reg;
    auto a = reg.add("a", {4, 4});
    auto b = reg.add("b", {4, 4});
    for (auto& v : a->data) v = rng.normal();
    for (auto& v : b->data) v = rng.normal();

    Graph g;
    auto h = g.tanh(g.matmul(a, b));
    auto loss = g.sum_all(g.mul(h, g.matmul(h, b)));

    a->grad.assign(16, 0.0);
    b->grad.assign(16, 0.0);
    g.backward(loss);
    auto ga1 = a->grad, gb1 = b->grad;

    a->grad.assign(16, 0.0);
    b->grad.assign(16, 0.0);
    g.backward(loss);
    CHECK(a->grad == ga1);
    CHECK(b->grad == gb1);
}

TEST_CASE("rebuilding the same graph reproduces gradients bit-exactly") {
    ParamRegistry reg;
    auto a = reg.add("a", {3, 3});
    auto b = reg.add("b", {3, 3});
    Rng rng(19);
    for (auto& v : a->data) v = rng.normal();
    for (auto& v : b->data) v = rng.normal();

    auto run = [&] {
        Graph g;
        auto loss = g.sum_all(g.sigmoid(g.matmul(a, g.tanh(b))));
        a->grad.assign(9, 0.0);
        b->grad.assign(9, 0.0);
        g.backward(loss);
        return std::pair(a->grad, b->grad);
    };
    auto r1 = run();
    auto r2 = run();
    CHECK(r1.first == r2.first);
    CHECK(r1.second == r2.second);
}

TEST_CASE("gradient sink receives the same values as tensor grads") {
    ParamRegistry reg;
    auto a = reg.add("a", {2, 3});
    auto b = reg.add("b", {3, 2});
    Rng rng(20);
    for (auto& v : a->data) v = rng.normal();
    for (auto& v : b->data) v = rng.normal();

    Graph g1;
    auto l1 = g1.sum_all(g1.gelu(g1.matmul(a, b)));
    a->grad.assign(a->data.size(), 0.0);
    b->grad.assign(b->data.size(), 0.0);
    g1.backward(l1);

    GradSink sink(reg.all().size());
    Graph g2;
    auto l2 = g2.sum_all(g2.gelu(g2.matmul(a, b)));
    g2.backward(l2, sink);

    CHECK(l1->value() == l2->value());
    CHECK(sink[0] == a->grad);
    CHECK(sink[1] == b->grad);
}

TEST_CASE("finite_diff_check on a quadratic") {
    auto w = Tensor::make({2}, {1, 2}, true);
    w->name = "w";
    Graph g;
    auto loss = g.sum_all(g.mul(w, w));
    w->grad.assign(2, 0.0);
    g.backward(loss);
    CHECK(w->grad[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(w->grad[1] == doctest::Approx(4.0).epsilon(1e-12));

    auto f = [&] {
        Graph gg;
        return gg.sum_all(gg.mul(w, w))->value();
    };
    auto rep = finite_diff_check(f, {w}, 1e-5, 1e-6);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err <= 1e-8);
    CHECK(rep.checked == 2);
}

TEST_CASE("finite_diff_check on a softmax cross-entropy toy model") {
    Rng rng(21);
    auto W = rand_tensor(rng, {4, 3}, -1, 1, "W");
    auto b = rand_tensor(rng, {3}, -0.1, 0.1, "b");
    auto x = Tensor::make({2, 4});
    for (auto& v : x->data) v = rng.uniform(-1, 1);
    std::vector<int> labels = {2, 0};

    auto rep = check_grads(
        [&](Graph& g) {
            auto logits = g.add_rowvec(g.matmul(g.constant(x->shape, x->data), W), b);
            auto lse = g.logsumexp_rows(logits);
            std::vector<double> onehot(2 * 3, 0.0);
            for (int r = 0; r < 2; ++r) onehot[r * 3 + labels[r]] = 1.0;
            auto picked = g.row_sum(g.mul(logits, g.constant({2, 3}, onehot)));
            return g.scale(g.sum_all(g.sub(lse, picked)), 0.5);
        },
        {W, b});
    CHECK(rep.pass);
    CHECK(rep.max_rel_err <= 1e-6);
}

TEST_CASE("finite_diff_check localizes a corrupted gradient") {
    Rng rng(22);
    auto a = rand_tensor(rng, {3}, 0.5, 1.5, "healthy");
    auto b = rand_tensor(rng, {3}, 0.5, 1.5, "corrupted");
    auto build = [&](Graph& g) { return g.sum_all(g.add(g.mul(a, a), g.mul(b, b))); };
    {
        Graph g;
        auto loss = build(g);
        a->grad.assign(3, 0.0);
        b->grad.assign(3, 0.0);
        g.backward(loss);
    }
    for (auto& v : b->grad) v *= 1.05;
    auto f = [&] {
        Graph g;
        return build(g)->value();
    };
    auto rep = finite_diff_check(f, {a, b}, 1e-5, 1e-6);
    CHECK_FALSE(rep.pass);
    CHECK(rep.worst_param == "corrupted");
    CHECK(rep.per_param_max["healthy"] <= 1e-6);
}

TEST_CASE("finite_diff_check rejects a non-deterministic objective") {
    auto w = Tensor::make({1}, {1.0}, true);
    w->name = "w";
    w->grad.assign(1, 2.0);
    int calls = 0;
    auto f = [&] { return static_cast<double>(++calls); };
    CHECK_THROWS_AS(finite_diff_check(f, {w}, 1e-5, 1e-6), numeric_error);
}

TEST_CASE("structural ops: slice, concat, gather, pick, reshape") {
    Graph g;
    auto a = g.constant({3, 2}, {1, 2, 3, 4, 5, 6});

    CHECK(g.slice_rows(a, 1, 2)->data == std::vector<double>{3, 4, 5, 6});
    CHECK(g.slice_cols(a, 1, 1)->data == std::vector<double>{2, 4, 6});
    CHECK_THROWS_AS(g.slice_rows(a, 2, 2), shape_error);

    auto b = g.constant({1, 2}, {7, 8});
    CHECK(g.concat_rows({a, b})->data == std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
    auto c = g.constant({3, 1}, {9, 10, 11});
    CHECK(g.concat_cols({a, c})->data == std::vector<double>{1, 2, 9, 3, 4, 10, 5, 6, 11});

    CHECK(g.gather_rows(a, {2, 0})->data == std::vector<double>{5, 6, 1, 2});
    CHECK_THROWS_AS(g.gather_rows(a, {3}), shape_error);

    auto p = g.pick_col(a, 0);
    CHECK(p->shape == std::vector<int>{3});
    CHECK(p->data == std::vector<double>{1, 3, 5});

    auto r = g.reshape(a, {2, 3});
    CHECK(r->data == a->data);
    CHECK_THROWS_AS(g.reshape(a, {4, 2}), shape_error);
}

TEST_CASE("gather_rows accumulates gradient for repeated indices") {
    auto a = Tensor::make({3, 2}, {1, 1, 2, 2, 3, 3}, true);
    a->name = "a";
    Graph g;
    auto loss = g.sum_all(g.gather_rows(a, {1, 1, 0}));
    a->grad.clear();
    g.backward(loss);
    CHECK(a->grad == std::vector<double>{1, 1, 2, 2, 0, 0});
}

TEST_CASE("reductions: row_sum, col_mean, sum_all, logsumexp_rows") {
    Graph g;
    auto a = g.constant({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(g.row_sum(a)->data == std::vector<double>{6, 15});
    auto cm = g.col_mean(a)->data;
    CHECK(cm[0] == doctest::Approx(2.5));
    CHECK(cm[1] == doctest::Approx(3.5));
    CHECK(cm[2] == doctest::Approx(4.5));
    CHECK(g.sum_all(a)->value() == 21.0);

    auto lse = g.logsumexp_rows(
        g.constant({1, 3}, {std::log(1.0), std::log(2.0), std::log(3.0)}));
    CHECK(lse->data[0] == doctest::Approx(std::log(6.0)).epsilon(1e-12));

    auto big = g.logsumexp_rows(g.constant({1, 2}, {1000.0, 999.0}));
    CHECK(big->all_finite());
    CHECK(big->data[0] == doctest::Approx(1000.0 + std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
}

TEST_CASE("norm2_rows values and guarded backward at zero") {
    Graph g;
    auto a = Tensor::make({2, 2}, {3, 4, 0, 0}, true);
    a->name = "a";
    auto n = g.norm2_rows(a);
    CHECK(n->data[0] == 5.0);
    CHECK(n->data[1] == 0.0);

    auto loss = g.sum_all(n);
    a->grad.clear();
    g.backward(loss);
    CHECK(a->grad[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(a->grad[1] == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(a->grad[2] == 0.0);
    CHECK(a->grad[3] == 0.0);
}

TEST_CASE("mask_rows routes gradients to the embedding on covered rows") {
    auto a = Tensor::make({3, 2}, {1, 1, 2, 2, 3, 3}, true);
    a->name = "a";
    auto e = Tensor::make({2}, {9, 9}, true);
    e->name = "e";
    Graph g;
    auto m = g.mask_rows(a, {1}, e);
    CHECK(m->data == std::vector<double>{1, 1, 9, 9, 3, 3});

    std::vector<double> w = {1, 2, 3, 4, 5, 6};
    auto loss = g.sum_all(g.mul(m, g.constant({3, 2}, w)));
    a->grad.clear();
    e->grad.clear();
    g.backward(loss);
    CHECK(a->grad == std::vector<double>{1, 2, 0, 0, 5, 6});
    CHECK(e->grad == std::vector<double>{3, 4});
}

TEST_CASE("straight-through copy forwards one value and backwards another path") {
    auto z = Tensor::make({1, 3}, {1, 2, 3}, true);
    z->name = "z";
    Graph g;
    auto q = g.st_copy(z, {10, 20, 30});
    CHECK(q->data == std::vector<double>{10, 20, 30});
    std::vector<double> w = {0.5, -1.0, 2.0};
    auto loss = g.sum_all(g.mul(q, g.constant({1, 3}, w)));
    z->grad.clear();
    g.backward(loss);
    CHECK(z->grad == w);
}

TEST_CASE("hard-forward soft-backward code lookup") {
    auto probs = Tensor::make({2, 3}, {0.2, 0.3, 0.5, 0.6, 0.3, 0.1}, true);
    probs->name = "probs";
    auto codes = Tensor::make({3, 2}, {1, 0, 0, 1, 1, 1}, true);
    codes->name = "codes";
    Graph g;
    auto out = g.st_matmul(probs, codes, {2, 0});
    CHECK(out->data == std::vector<double>{1, 1, 1, 0});

    std::vector<double> w = {1, 2, 3, 4};
    auto loss = g.sum_all(g.mul(out, g.constant({2, 2}, w)));
    probs->grad.clear();
    codes->grad.clear();
    g.backward(loss);
    // backward acts as if out were probs * codes
    std::vector<double> dp_want = {1 * 1 + 2 * 0, 1 * 0 + 2 * 1, 1 * 1 + 2 * 1,
                                   3 * 1 + 4 * 0, 3 * 0 + 4 * 1, 3 * 1 + 4 * 1};
    for (int i = 0; i < 6; ++i) CHECK(probs->grad[i] == doctest::Approx(dp_want[i]));
    std::vector<double> dc_want = {0.2 * 1 + 0.6 * 3, 0.2 * 2 + 0.6 * 4,
                                   0.3 * 1 + 0.3 * 3, 0.3 * 2 + 0.3 * 4,
                                   0.5 * 1 + 0.1 * 3, 0.5 * 2 + 0.1 * 4};
    for (int i = 0; i < 6; ++i) CHECK(codes->grad[i] == doctest::Approx(dc_want[i]));
}

TEST_CASE("detach blocks gradient flow") {
    auto x = Tensor::make({2}, {1, 2}, true);
    x->name = "x";
    Graph g;
    auto d = g.detach(x);
    CHECK_FALSE(d->needs_grad);
    auto loss = g.sum_all(g.add(g.mul(x, x), d));
    x->grad.clear();
    g.backward(loss);
    CHECK(x->grad == std::vector<double>{2, 4});
}

TEST_CASE("non-finite scan names the producing op") {
    Graph g;
    auto a = g.constant({2}, {1, 0});
    auto b = g.constant({2}, {0, 0});
    auto q = g.div(a, b);
    (void)q;
    auto hit = g.find_nonfinite();
    REQUIRE(hit.has_value());
    CHECK(hit->find("div") != std::string::npos);

    Graph clean;
    auto c = clean.tanh(clean.constant({2}, {1, 2}));
    (void)c;
    CHECK_FALSE(clean.find_nonfinite().has_value());
}

TEST_CASE("every elementwise and reduction op passes a finite-difference check") {
    Rng rng(23);
    auto a = rand_tensor(rng, {3, 4}, 0.3, 1.7, "a");
    auto b = rand_tensor(rng, {3, 4}, 0.3, 1.7, "b");
    auto wt = Tensor::make({3, 4});
    for (auto& v : wt->data) v = rng.uniform(-1, 1);

    auto weighted = [&](Graph& g, TensorPtr y) {
        return g.sum_all(g.mul(y, g.constant(wt->shape, wt->data)));
    };
    std::vector<std::pair<const char*, std::function<TensorPtr(Graph&)>>> cases = {
        {"add", [&](Graph& g) { return weighted(g, g.add(a, b)); }},
        {"sub", [&](Graph& g) { return weighted(g, g.sub(a, b)); }},
        {"mul", [&](Graph& g) { return weighted(g, g.mul(a, b)); }},
        {"div", [&](Graph& g) { return weighted(g, g.div(a, b)); }},
        {"scale", [&](Graph& g) { return weighted(g, g.scale(a, -1.7)); }},
        {"add_const", [&](Graph& g) { return weighted(g, g.add_const(a, 2.5)); }},
        {"sigmoid", [&](Graph& g) { return weighted(g, g.sigmoid(a)); }},
        {"tanh", [&](Graph& g) { return weighted(g, g.tanh(a)); }},
        {"exp", [&](Graph& g) { return weighted(g, g.exp(a)); }},
        {"gelu", [&](Graph& g) { return weighted(g, g.gelu(a)); }},
        {"xlogx", [&](Graph& g) { return weighted(g, g.xlogx(a)); }},
        {"clamp_above_threshold", [&](Graph& g) { return weighted(g, g.clamp_min(a, 0.1)); }},
        {"row_sum",
         [&](Graph& g) {
             return g.sum_all(g.mul(g.row_sum(a), g.constant({3}, {0.5, -1.0, 2.0})));
         }},
        {"col_mean",
         [&](Graph& g) {
             return g.sum_all(g.mul(g.col_mean(a), g.constant({4}, {1, -2, 3, -4})));
         }},
        {"logsumexp_rows",
         [&](Graph& g) {
             return g.sum_all(g.mul(g.logsumexp_rows(a), g.constant({3}, {1, 2, 3})));
         }},
        {"norm2_rows",
         [&](Graph& g) {
             return g.sum_all(g.mul(g.norm2_rows(a), g.constant({3}, {1, -1, 0.5})));
         }},
        {"pick_col",
         [&](Graph& g) {
             return g.sum_all(g.mul(g.pick_col(a, 2), g.constant({3}, {1, 2, 3})));
         }},
        {"slice_and_concat",
         [&](Graph& g) {
             auto top = g.slice_rows(a, 0, 1);
             auto rest = g.slice_rows(a, 1, 2);
             auto re = g.concat_rows({rest, top});
             auto left = g.slice_cols(re, 0, 2);
             auto right = g.slice_cols(re, 2, 2);
             return weighted(g, g.concat_cols({right, left}));
         }},
        {"gather_rows",
         [&](Graph& g) {
             auto gth = g.gather_rows(a, {0, 2, 2});
             return g.sum_all(g.mul(gth, g.constant({3, 4}, wt->data)));
         }},
        {"reshape",
         [&](Graph& g) {
             return g.sum_all(g.mul(g.reshape(a, {4, 3}), g.constant({4, 3}, wt->data)));
         }},
        {"add_rowvec",
         [&](Graph& g) {
             auto v = g.slice_rows(b, 0, 1);
             return weighted(g, g.add_rowvec(a, g.reshape(v, {4})));
         }},
        {"mask_rows",
         [&](Graph& g) {
             auto emb = g.reshape(g.slice_rows(b, 1, 1), {4});
             return weighted(g, g.mask_rows(a, {0, 2}, emb));
         }},
    };
    for (auto& [label, build] : cases) {
        CAPTURE(label);
        auto rep = check_grads(build, {a, b});
        CHECK_MESSAGE(rep.pass, label, ": worst ", rep.worst_param, "[", rep.worst_index,
                      "] analytic ", rep.worst_analytic, " numeric ", rep.worst_numeric);
    }
}

TEST_CASE("straight-through ops pass a finite-difference check on their soft path") {
    Rng rng(24);
    auto z = rand_tensor(rng, {2, 3}, -1, 1, "z");
    std::vector<double> offset = {0.3, -0.2, 0.15, -0.4, 0.25, 0.1};
    auto wt = Tensor::make({2, 3});
    for (auto& v : wt->data) v = rng.uniform(-1, 1);

    // forward value frozen as z + offset: the straight-through derivative and
    // the true derivative of this linearization coincide
    auto rep = check_grads(
        [&](Graph& g) {
            std::vector<double> fv(z->data.size());
            for (size_t i = 0; i < fv.size(); ++i) fv[i] = z->data[i] + offset[i];
            return g.sum_all(g.mul(g.st_copy(z, fv), g.constant(wt->shape, wt->data)));
        },
        {z});
    CHECK(rep.pass);

    auto probs = rand_tensor(rng, {3, 4}, 0.1, 0.9, "probs");
    auto codes = rand_tensor(rng, {4, 2}, -1, 1, "codes");
    std::vector<int> hard = {1, 3, 0};
    std::vector<double> base(3 * 2);
    for (int t = 0; t < 3; ++t)
        for (int k = 0; k < 2; ++k) {
            double soft = 0;
            for (int v = 0; v < 4; ++v) soft += probs->data[t * 4 + v] * codes->data[v * 2 + k];
            base[t * 2 + k] = codes->data[hard[t] * 2 + k] - soft;
        }
    auto w2 = Tensor::make({3, 2});
    for (auto& v : w2->data) v = rng.uniform(-1, 1);
    auto rep2 = check_grads(
        [&](Graph& g) {
            auto soft = g.matmul(probs, codes);
            auto lin = g.add(soft, g.constant({3, 2}, base));
            return g.sum_all(g.mul(lin, g.constant(w2->shape, w2->data)));
        },
        {probs, codes});
    CHECK(rep2.pass);

    // and the graph's hard-forward value agrees with the linearization at the base point
    Graph g;
    auto hard_out = g.st_matmul(probs, codes, hard);
    for (int t = 0; t < 3; ++t)
        for (int k = 0; k < 2; ++k)
            CHECK(hard_out->data[t * 2 + k] ==
                  doctest::Approx(codes->data[hard[t] * 2 + k]).epsilon(1e-15));
}

TEST_CASE("parameter registry assigns stable ids and finds by name") {
    ParamRegistry reg;
    auto w1 = reg.add("enc.w", {2, 3});
    auto w2 = reg.add("enc.b", {3});
    CHECK(w1->param_id == 0);
    CHECK(w2->param_id == 1);
    CHECK(w1->requires_grad);
    CHECK(reg.find("enc.b") == w2);
    CHECK(reg.find("missing") == nullptr);
    CHECK(reg.total_size() == 9);
}

TEST_CASE("rng streams are reproducible and state round-trips") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    auto st = a.state();
    std::vector<double> tail;
    for (int i = 0; i < 10; ++i) tail.push_back(a.uniform());
    Rng c(0);
    c.set_state(st);
    for (int i = 0; i < 10; ++i) CHECK(c.uniform() == tail[i]);

    Rng d(43);
    CHECK(d.next_u64() != b.next_u64());

    CHECK(mix_seed(1, "enc.w") == mix_seed(1, "enc.w"));
    CHECK(mix_seed(1, "enc.w") != mix_seed(1, "enc.b"));
    CHECK(mix_seed(1, "enc.w") != mix_seed(2, "enc.w"));
}

TEST_CASE("rng distributions land in range and hit documented moments") {
    Rng rng(7);
    for (int i = 0; i < 1000; ++i) {
        double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        double o = rng.uniform_open();
        CHECK(o > 0.0);
        CHECK(o < 1.0);
        auto k = rng.uniform_int(uint64_t{7});
        CHECK(k < 7);
        auto j = rng.uniform_int(int64_t{-3}, int64_t{3});
        CHECK(j >= -3);
        CHECK(j <= 3);
    }
    double sum = 0, sq = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        double v = rng.normal();
        sum += v;
        sq += v * v;
    }
    CHECK(std::abs(sum / n) < 0.02);
    CHECK(std::abs(sq / n - 1.0) < 0.02);
}
