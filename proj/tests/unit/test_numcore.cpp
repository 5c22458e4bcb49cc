#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "../support/gradcheck.hpp"
#include "stella/numcore/checkpoint.hpp"
#include "stella/numcore/nn.hpp"
#include "stella/numcore/ops.hpp"

using namespace stella;
using namespace stella::nc;
using stella::testing::grad_check;
using stella::testing::random_tensor;

TEST_CASE("softmax examples") {
    auto u = softmax(Tensor::from({4}, {0, 0, 0, 0}), 0);
    for (double v : u.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

    CHECK(softmax(Tensor::from({1}, {123.4}), 0).item() == 1.0);

    auto s = softmax(Tensor::from({2}, {0.0, std::log(2.0)}), 0);
    CHECK(std::abs(s.data()[0] - 1.0 / 3.0) < 1e-15);
    CHECK(std::abs(s.data()[1] - 2.0 / 3.0) < 1e-15);
}

TEST_CASE("softmax errors") {
    CHECK_THROWS_AS(softmax(Tensor::from({2}, {0, 1}), 1), ShapeError);
    CHECK_THROWS_AS(softmax(Tensor::from({2}, {0, NAN}), 0), NumericError);
}

TEST_CASE("softmax slices sum to one on random tensors") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        Shape shape{1 + rng.index(4), 1 + rng.index(5), 1 + rng.index(6)};
        auto t = random_tensor(shape, rng, 1.0 + 9.0 * rng.uniform(), false);
        int axis = static_cast<int>(rng.index(3));
        auto s = sum(softmax(t, axis), axis);
        for (double v : s.data()) REQUIRE(std::abs(v - 1.0) <= 1e-9);
        auto p = softmax(t, axis);
        for (double v : p.data()) REQUIRE((v > 0.0 && v <= 1.0));
    }
}

TEST_CASE("attention_logits examples") {
    auto unit = Tensor::from({1, 1, 1, 4}, {1, 0, 0, 0});
    CHECK(attention_logits(unit, unit, 1.0).item() == 0.5);
    auto other = Tensor::from({1, 1, 1, 4}, {0, 1, 0, 0});
    CHECK(attention_logits(unit, other, 0.3).item() == 0.0);
    CHECK_THROWS(attention_logits(unit, unit, 0.0));
    CHECK_THROWS_AS(attention_logits(unit, Tensor::from({1, 1, 1, 3}, {1, 0, 0}), 1.0), ShapeError);
}

TEST_CASE("attention_logits matches brute-force loop and beta is an exact scale") {
    Rng rng(5);
    const std::size_t B = 2, H = 2, nq = 3, nk = 5, d = 8;
    auto q = random_tensor({B, H, nq, d}, rng, 1.0, false);
    auto k = random_tensor({B, H, nk, d}, rng, 1.0, false);
    auto out = attention_logits(q, k, 0.4);
    auto one = attention_logits(q, k, 1.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t i = 0; i < nq; ++i)
                for (std::size_t j = 0; j < nk; ++j) {
                    double dot = 0;
                    for (std::size_t e = 0; e < d; ++e) dot += q.at({b, h, i, e}) * k.at({b, h, j, e});
                    CHECK(std::abs(out.at({b, h, i, j}) - dot / (0.4 * std::sqrt(8.0))) <= 1e-12);
                    CHECK(out.at({b, h, i, j}) == one.at({b, h, i, j}) / 0.4);
                }
}

TEST_CASE("weighted_mean_pool examples") {
    CHECK(weighted_mean_pool(Tensor::from({3}, {2, 4, 6}), 0).item() == 4.0);
    auto t = Tensor::from({3}, {2, 4, 7});
    CHECK(weighted_mean_pool(t, 0, Tensor::from({3}, {2, 2, 2})).item() ==
          doctest::Approx(weighted_mean_pool(t, 0).item()).epsilon(1e-15));
    CHECK(weighted_mean_pool(Tensor::from({2}, {1, 2}), 0, Tensor::from({2}, {1, 3})).item() == 1.75);
    CHECK_THROWS(weighted_mean_pool(Tensor::from({2}, {1, 2}), 0, Tensor::from({2}, {0, 0})));
    CHECK_THROWS_AS(weighted_mean_pool(Tensor::from({2}, {1, 2}), 2), ShapeError);
}

TEST_CASE("backward examples") {
    auto x = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
    backward(sum_all(x));
    for (double g : x.grad()) CHECK(g == 1.0);

    x.zero_grad();
    backward(sum_all(mul(x, x)));
    auto g = x.grad();
    CHECK(g[0] == 2.0);
    CHECK(g[1] == -4.0);
    CHECK(g[2] == 1.0);

    // repeated calls accumulate on leaves
    backward(sum_all(mul(x, x)));
    CHECK(x.grad()[0] == 4.0);

    CHECK_THROWS_AS(backward(x), ShapeError);

    auto unused = Tensor::from({2}, {1, 2}, true);
    backward(sum_all(x));
    CHECK(unused.grad() == std::vector<double>{0.0, 0.0});
}

TEST_CASE("two-layer net gradient matches finite differences") {
    Rng rng(3);
    auto x = random_tensor({4, 5}, rng);
    auto w1 = random_tensor({5, 6}, rng, 0.5);
    auto b1 = random_tensor({6}, rng, 0.1);
    auto gamma = random_tensor({6}, rng, 0.3);
    auto beta = random_tensor({6}, rng, 0.3);
    auto w2 = random_tensor({6, 3}, rng, 0.5);
    auto target = random_tensor({4, 3}, rng, 1.0, false);
    auto f = [&] {
        auto h = layer_norm(linear(x, w1, b1), gamma, beta, 1e-6);
        auto p = softmax(matmul(gelu(h), w2), -1);
        return mse(p, target);
    };
    auto r = grad_check(f, {x, w1, b1, gamma, beta, w2});
    CHECK(r.max_rel_err <= 1e-5);
}

TEST_CASE("primitive gradients over random seeds") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        auto a = random_tensor({2, 3, 4}, rng);
        auto b = random_tensor({3, 4}, rng);
        auto pos = Tensor::from({2, 3}, {0.5, 1.5, 2.0, 0.7, 3.0, 1.1}, true);
        CHECK(grad_check([&] { return sum_all(mul(add(a, b), sub(a, b))); }, {a, b}).max_rel_err <= 1e-5);
        CHECK(grad_check([&] { return sum_all(div(a, add_scalar(square(b), 1.0))); }, {a, b}).max_rel_err <= 1e-5);
        CHECK(grad_check([&] { return sum_all(mul(log(pos), exp(scale(pos, 0.3)))); }, {pos}).max_rel_err <= 1e-5);
        CHECK(grad_check([&] { return sum_all(mul(sigmoid(a), a)); }, {a}).max_rel_err <= 1e-5);
        CHECK(grad_check([&] { return sum_all(mul(log_softmax(a, 1), softmax(a, 2))); }, {a}).max_rel_err <= 1e-5);
        CHECK(grad_check([&] { return sum_all(mul(l2_normalize(a, -1), b)); }, {a, b}).max_rel_err <= 1e-5);
        CHECK(grad_check(
                  [&] {
                      auto c = concat({a, permute(a, {0, 1, 2})}, 1);
                      auto g = gather_rows(c, {0, 5, 2, 1, 1, 4}, 3);
                      return sum_all(square(index_select(g, 2, {3, 0, 0})));
                  },
                  {a})
                  .max_rel_err <= 1e-5);
        CHECK(grad_check([&] { return sum_all(square(mean(transpose(a, 0, 2), 1))); }, {a}).max_rel_err <= 1e-5);
        auto prob = Tensor::from({4}, {0.2, 0.7, 0.9, 0.4}, true);
        auto y = Tensor::from({4}, {1, 0, 1, 0});
        CHECK(grad_check([&] { return binary_cross_entropy(prob, y); }, {prob}).max_rel_err <= 1e-5);
        auto w = Tensor::from({3}, {0.2, 1.0, 3.0}, true);
        CHECK(grad_check([&] { return sum_all(square(weighted_mean_pool(a, 1, w))); }, {a, w}).max_rel_err <= 1e-5);
    }
}

TEST_CASE("gather then scatter restores gathered positions") {
    Rng rng(2);
    auto x = random_tensor({2, 5, 3}, rng, 1.0, false);
    std::vector<std::size_t> idx{4, 1, 0, 3};
    auto g = gather_rows(x, idx, 2);
    auto restored = scatter_rows(Tensor::zeros({2, 5, 3}), g, idx, 2);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t j = 0; j < 2; ++j)
            for (std::size_t e = 0; e < 3; ++e) {
                auto i = idx[b * 2 + j];
                CHECK(restored.at({b, i, e}) == x.at({b, i, e}));
            }
    CHECK_THROWS_AS(gather_rows(x, {5, 0}, 1), ShapeError);
}

TEST_CASE("overflow is an error") {
    CHECK_THROWS_AS(exp(Tensor::from({1}, {1000.0})), NumericError);
    CHECK_THROWS_AS(log(Tensor::from({1}, {0.0})), NumericError);
}

TEST_CASE("no-grad guard suppresses recording") {
    auto x = Tensor::from({2}, {1, 2}, true);
    {
        NoGradGuard guard;
        CHECK_FALSE(add(x, x).requires_grad());
    }
    CHECK(add(x, x).requires_grad());
}

TEST_CASE("checkpoint round trip is bit exact") {
    Rng rng(9);
    std::vector<NamedTensor> entries{{"a/weight", random_tensor({3, 4}, rng, 1e-300, false)},
                                     {"scalar", Tensor::scalar(-0.0)},
                                     {"ünïcode", Tensor::from({2}, {std::nextafter(1.0, 2.0), 1e308})}};
    std::stringstream ss;
    write_checkpoint(ss, entries);
    auto back = read_checkpoint(ss);
    REQUIRE(back.size() == entries.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].name == entries[i].name);
        CHECK(back[i].tensor.shape() == entries[i].tensor.shape());
        for (std::size_t j = 0; j < back[i].tensor.numel(); ++j) {
            CHECK(std::bit_cast<std::uint64_t>(back[i].tensor.data()[j]) ==
                  std::bit_cast<std::uint64_t>(entries[i].tensor.data()[j]));
        }
    }
    std::stringstream bad("XXXX");
    CHECK_THROWS_AS(read_checkpoint(bad), FormatError);
}

TEST_CASE("checkpoint layout is little-endian u64 framed") {
    std::stringstream ss;
    write_checkpoint(ss, {{"ab", Tensor::from({1}, {1.0})}});
    std::string s = ss.str();
    REQUIRE(s.size() == 4 + 4 + 8 + (8 + 2 + 8 + 8 + 8));
    CHECK(s.substr(0, 4) == "STCK");
    CHECK(static_cast<unsigned char>(s[16]) == 2);  // name length
    CHECK(s.substr(24, 2) == "ab");
    // 1.0 = 0x3FF0000000000000, little-endian: last byte 0x3F
    CHECK(static_cast<unsigned char>(s.back()) == 0x3F);
}

TEST_CASE("transformer block gradient") {
    Rng rng(21);
    ParamStore store;
    TransformerBlock block(store, "blk", 8, 2, 2, 1e-6, rng);
    auto x = random_tensor({2, 3, 8}, rng);
    auto params = store.tensors();
    params.push_back(x);
    Rng pick(1);
    auto r = grad_check([&] { return sum_all(square(block.forward(x))); }, params, 1e-5, 12, &pick);
    CHECK(r.max_rel_err <= 1e-5);
}

TEST_CASE("rng state round trip") {
    Rng a(77);
    a.normal();
    Rng b;
    b.set_state(a.state());
    CHECK(a.next_u64() == b.next_u64());
    CHECK(a.normal() == b.normal());
}
