#include <catch2/catch_amalgamated.hpp>

#include "clseg/ad/graph.hpp"
#include "clseg/core/rng.hpp"
#include "support/finite_diff.hpp"

using clseg::Pcg32;
using clseg::Tensor;
using clseg::ad::Graph;
using clseg::ad::Value;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, Pcg32& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.gaussian() * scale;
    return t;
}

// Checks d(scalar expr)/d(leaf) for every leaf against central differences.
void check_expr(const std::function<Value(Graph<double>&, const std::vector<Value>&)>& build,
                const std::vector<Tensor<double>>& leaves, double tol = 1e-7) {
    // analytic
    Graph<double> g;
    std::vector<Value> vals;
    for (const auto& t : leaves) vals.push_back(g.leaf(t));
    Value root = build(g, vals);
    REQUIRE(g.val(root).numel() == 1);
    g.backward(root);

    // flatten
    std::vector<double> x;
    std::vector<double> analytic;
    for (size_t i = 0; i < leaves.size(); ++i) {
        const auto& gr = g.grad(vals[i]);
        for (size_t j = 0; j < leaves[i].numel(); ++j) {
            x.push_back(leaves[i][j]);
            analytic.push_back(gr[j]);
        }
    }

    auto f = [&](const std::vector<double>& flat) {
        Graph<double> g2;
        std::vector<Value> vs;
        size_t off = 0;
        for (const auto& t : leaves) {
            Tensor<double> c = t;
            for (size_t j = 0; j < c.numel(); ++j) c[j] = flat[off + j];
            off += c.numel();
            vs.push_back(g2.leaf(c, false));
        }
        return g2.val(build(g2, vs))[0];
    };

    auto res = testsupport::check_gradients(f, x, analytic, 1e-5, 1e-4);
    INFO("worst index " << res.worst_index << " analytic " << res.analytic_at_worst << " numeric "
                        << res.numeric_at_worst);
    CHECK(res.max_rel_err < tol);
}

}  // namespace

TEST_CASE("elementwise and reduction gradients") {
    Pcg32 rng(42);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& v) {
            Value s = g.mul(g.add(v[0], v[1]), g.sub(v[0], v[1]));
            return g.mean_all(g.mul(s, s));
        },
        {a, b});
}

TEST_CASE("activation gradients") {
    Pcg32 rng(7);
    auto a = random_tensor({2, 5}, rng);
    check_expr([](Graph<double>& g, const std::vector<Value>& v) { return g.sum_all(g.leaky_relu(v[0], 0.01)); },
               {a});
    check_expr([](Graph<double>& g, const std::vector<Value>& v) { return g.sum_all(g.gelu(v[0])); }, {a});
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& v) {
            Value s = g.softmax_last(v[0]);
            return g.sum_all(g.mul(s, s));
        },
        {a});
}

TEST_CASE("matmul linear gradients") {
    Pcg32 rng(3);
    auto a = random_tensor({4, 3}, rng);
    auto w = random_tensor({3, 5}, rng);
    auto bias = random_tensor({5}, rng);
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& v) {
            return g.mean_all(g.gelu(g.add_rowvec(g.matmul(v[0], v[1]), v[2])));
        },
        {a, w, bias});
}

TEST_CASE("bmm and attention-shaped gradients") {
    Pcg32 rng(9);
    auto q = random_tensor({2, 3, 4}, rng);
    auto k = random_tensor({2, 3, 4}, rng);
    auto v = random_tensor({2, 3, 4}, rng);
    auto temp = Tensor<double>::scalar(2.0);
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& vs) {
            Value logits = g.div_by_scalar(g.bmm(vs[0], vs[1], true), vs[3]);
            Value attn = g.softmax_last(g.mask_diagonal(logits));
            Value out = g.bmm(attn, vs[2]);
            return g.mean_all(g.mul(out, out));
        },
        {q, k, v, temp});
}

TEST_CASE("conv2d gradients") {
    Pcg32 rng(11);
    auto x = random_tensor({2, 3, 5, 6}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng, 0.5);
    auto b = random_tensor({4}, rng, 0.1);
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& v) {
            return g.mean_all(g.leaky_relu(g.conv2d(v[0], v[1], v[2], 1), 0.01));
        },
        {x, w, b}, 1e-6);
}

TEST_CASE("conv 1x1 gradients") {
    Pcg32 rng(13);
    auto x = random_tensor({2, 4, 3, 3}, rng);
    auto w = random_tensor({2, 4, 1, 1}, rng);
    auto b = random_tensor({2}, rng);
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& v) {
            Value y = g.conv2d(v[0], v[1], v[2], 0);
            return g.mean_all(g.mul(y, y));
        },
        {x, w, b});
}

TEST_CASE("transposed conv gradients") {
    Pcg32 rng(17);
    auto x = random_tensor({2, 3, 2, 3}, rng);
    auto w = random_tensor({3, 2, 2, 2}, rng);
    auto b = random_tensor({2}, rng);
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& v) {
            Value y = g.conv_transpose2x2(v[0], v[1], v[2]);
            return g.mean_all(g.mul(y, y));
        },
        {x, w, b});
}

TEST_CASE("pooling and shift gradients") {
    Pcg32 rng(19);
    auto x = random_tensor({2, 2, 4, 4}, rng);
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& v) {
            Value y = g.maxpool2(v[0]);
            return g.sum_all(g.mul(y, y));
        },
        {x});
    check_expr([](Graph<double>& g, const std::vector<Value>& v) { return g.sum_all(g.avgpool2(v[0])); }, {x});
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& v) {
            Value y = g.shift2d(v[0], 2, -1);
            return g.mean_all(g.mul(y, y));
        },
        {x});
}

TEST_CASE("norm gradients") {
    Pcg32 rng(23);
    auto x = random_tensor({2, 3, 4, 4}, rng);
    auto gm = random_tensor({3}, rng);
    auto bt = random_tensor({3}, rng);
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& v) {
            Value y = g.instance_norm(v[0], v[1], v[2]);
            return g.mean_all(g.mul(y, y));
        },
        {x, gm, bt}, 1e-6);

    auto xt = random_tensor({2, 3, 6}, rng);
    auto gl = random_tensor({6}, rng);
    auto bl = random_tensor({6}, rng);
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& v) {
            Value y = g.layer_norm(v[0], v[1], v[2]);
            return g.mean_all(g.mul(y, y));
        },
        {xt, gl, bl}, 1e-6);
}

TEST_CASE("patch and embedding gradients") {
    Pcg32 rng(29);
    auto x = random_tensor({2, 3, 4, 4}, rng);
    auto pos = random_tensor({4, 12}, rng);
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& v) {
            Value tok = g.extract_patches(v[0], 2);  // [2, 4, 12]
            Value y = g.add_pos_embedding(tok, v[1]);
            return g.mean_all(g.mul(y, y));
        },
        {x, pos});
}

TEST_CASE("concat and permute gradients") {
    Pcg32 rng(31);
    auto a = random_tensor({2, 2, 3, 3}, rng);
    auto b = random_tensor({2, 1, 3, 3}, rng);
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& v) {
            Value y = g.concat_channels({v[0], v[1], v[0]});
            return g.mean_all(g.mul(y, y));
        },
        {a, b});
    auto t4 = random_tensor({2, 3, 2, 2}, rng);
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& v) {
            Value y = g.permute_0213(v[0]);
            Value z = g.reshape(y, {2, 2, 3, 2});
            return g.mean_all(g.mul(z, z));
        },
        {t4});
    auto t3 = random_tensor({2, 3, 4}, rng);
    check_expr(
        [](Graph<double>& g, const std::vector<Value>& v) {
            Value y = g.permute_021(v[0]);
            return g.mean_all(g.mul(y, y));
        },
        {t3});
}

TEST_CASE("no-grad graph skips closures") {
    Graph<float> g(false);
    Pcg32 rng(5);
    Tensor<float> t({2, 2});
    for (size_t i = 0; i < 4; ++i) t[i] = static_cast<float>(rng.uniform());
    Value a = g.leaf(t, true);
    Value b = g.mul(a, a);
    CHECK_FALSE(g.requires_grad(b));
}

TEST_CASE("value reuse accumulates gradient") {
    // f(x) = sum(x*x + x*x) -> df/dx = 4x
    Graph<double> g;
    Tensor<double> t({3}, {1.0, -2.0, 0.5});
    Value x = g.leaf(t);
    Value y = g.add(g.mul(x, x), g.mul(x, x));
    g.backward(g.sum_all(y));
    for (int i = 0; i < 3; ++i) CHECK(g.grad(x)[i] == Catch::Approx(4.0 * t[i]));
}
