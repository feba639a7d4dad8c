#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "raddpo/ops.hpp"
#include "raddpo/tape.hpp"
#include "raddpo/tensor.hpp"
#include "testutil.hpp"

using raddpo::ad::Tape;
using raddpo::ad::Tensor;
using testutil::check_gradients;

namespace ops = raddpo::ad;

namespace {

std::mt19937_64 rng_for(uint64_t seed) { return std::mt19937_64(seed); }

} // namespace

TEST_CASE("tensor basics") {
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK(t.ndim() == 2);
    for (size_t i = 0; i < 6; ++i) CHECK(t.at(i) == 0.0);

    Tensor s = Tensor::scalar(4.5);
    CHECK(s.is_scalar());
    CHECK(s.scalar_value() == 4.5);

    CHECK_THROWS_AS(Tensor({2, 0, 3}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
}

TEST_CASE("detached shares storage and drops tracking") {
    Tape tape;
    auto rng = rng_for(1);
    Tensor x = tape.watch(Tensor::randn({3, 2}, rng));
    Tensor d = x.detached();
    CHECK(x.tracked());
    CHECK_FALSE(d.tracked());
    // Bitwise identity: same storage, not a copy.
    CHECK(d.data() == x.data());
    for (size_t i = 0; i < x.size(); ++i) {
        CHECK(d.at(i) == x.at(i));
    }
}

TEST_CASE("elementwise ops match finite differences") {
    auto rng = rng_for(42);
    std::vector<Tensor> inputs = {Tensor::randn({4, 3}, rng), Tensor::randn({4, 3}, rng)};

    SUBCASE("add") {
        auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
            return ops::sum(&t, ops::add(&t, in[0], in[1]));
        });
        CHECK(res.ok);
    }
    SUBCASE("sub") {
        auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
            return ops::sum(&t, ops::sub(&t, in[0], in[1]));
        });
        CHECK(res.ok);
    }
    SUBCASE("mul") {
        auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
            return ops::sum(&t, ops::mul(&t, in[0], in[1]));
        });
        CHECK(res.ok);
    }
    SUBCASE("scale") {
        auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
            return ops::sum(&t, ops::scale(&t, in[0], -2.75));
        });
        CHECK(res.ok);
    }
    SUBCASE("mean") {
        auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
            return ops::mean(&t, ops::mul(&t, in[0], in[1]));
        });
        CHECK(res.ok);
    }
    SUBCASE("mul_constvec") {
        std::vector<double> w = {0.5, -1.0, 2.0, 0.0, 3.0, -0.25, 1.0, 1.5, -2.0, 0.75, 0.1, -0.6};
        auto res = check_gradients(inputs, [w](Tape& t, std::vector<Tensor>& in) {
            return ops::sum(&t, ops::mul_constvec(&t, in[0], w));
        });
        CHECK(res.ok);
    }
}

TEST_CASE("relu gradient away from the kink") {
    auto rng = rng_for(7);
    Tensor x = Tensor::randn({5, 5}, rng);
    // Push values away from zero so the FD step never crosses the kink.
    for (size_t i = 0; i < x.size(); ++i) {
        if (std::abs(x.at(i)) < 0.1) x.at(i) += (x.at(i) >= 0 ? 0.2 : -0.2);
    }
    std::vector<Tensor> inputs = {x};
    auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
        return ops::sum(&t, ops::relu(&t, in[0]));
    });
    CHECK(res.ok);
}

TEST_CASE("exp and log match finite differences") {
    auto rng = rng_for(13);
    Tensor x = Tensor::randn({3, 4}, rng, 0.5);
    std::vector<Tensor> inputs = {x};
    SUBCASE("exp") {
        auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
            return ops::sum(&t, ops::exp(&t, in[0]));
        });
        CHECK(res.ok);
    }
    SUBCASE("log of positive values") {
        for (size_t i = 0; i < inputs[0].size(); ++i) {
            inputs[0].at(i) = std::abs(inputs[0].at(i)) + 0.5;
        }
        auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
            return ops::sum(&t, ops::log(&t, in[0]));
        });
        CHECK(res.ok);
    }
}

TEST_CASE("sub_from_scalar broadcasts and routes both gradients") {
    auto rng = rng_for(21);
    std::vector<Tensor> inputs = {Tensor::scalar(1.5), Tensor::randn({6}, rng)};
    auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
        return ops::sum(&t, ops::mul(&t, ops::sub_from_scalar(&t, in[0], in[1]),
                                     ops::sub_from_scalar(&t, in[0], in[1])));
    });
    CHECK(res.ok);
}

TEST_CASE("reductions: sum, logsumexp") {
    auto rng = rng_for(33);
    std::vector<Tensor> inputs = {Tensor::randn({9}, rng, 2.0)};
    SUBCASE("logsumexp gradient") {
        auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
            return ops::logsumexp(&t, in[0]);
        });
        CHECK(res.ok);
    }
    SUBCASE("logsumexp is stable for large inputs") {
        Tensor big({3}, {1000.0, 1000.0, 1000.0});
        Tensor out = ops::logsumexp(nullptr, big);
        CHECK(out.scalar_value() == doctest::Approx(1000.0 + std::log(3.0)).epsilon(1e-12));
        Tensor small({2}, {-1000.0, -1001.0});
        Tensor out2 = ops::logsumexp(nullptr, small);
        CHECK(std::isfinite(out2.scalar_value()));
    }
}

TEST_CASE("sigmoid and softplus match finite differences and stay stable") {
    auto rng = rng_for(44);
    std::vector<Tensor> inputs = {Tensor::randn({7}, rng, 3.0)};
    SUBCASE("sigmoid") {
        auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
            return ops::sum(&t, ops::sigmoid(&t, in[0]));
        });
        CHECK(res.ok);
    }
    SUBCASE("softplus") {
        auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
            return ops::sum(&t, ops::softplus(&t, in[0]));
        });
        CHECK(res.ok);
    }
    SUBCASE("softplus extremes") {
        Tensor x({2}, {800.0, -800.0});
        Tensor y = ops::softplus(nullptr, x);
        CHECK(y.at(0) == doctest::Approx(800.0).epsilon(1e-12));
        CHECK(y.at(1) == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(std::isfinite(y.at(0)));
        CHECK(std::isfinite(y.at(1)));
    }
}

TEST_CASE("matmul matches finite differences") {
    auto rng = rng_for(55);
    std::vector<Tensor> inputs = {Tensor::randn({3, 4}, rng), Tensor::randn({4, 5}, rng)};
    auto res = check_gradients(
        inputs,
        [](Tape& t, std::vector<Tensor>& in) {
            return ops::sum(&t, ops::matmul(&t, in[0], in[1]));
        },
        1e-6);
    CHECK(res.ok);
    CHECK(res.coords_checked == 32);
}

TEST_CASE("matmul forward oracle") {
    // [DERIVED] 2x2 product computed by hand.
    Tensor a({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor b({2, 2}, {5.0, 6.0, 7.0, 8.0});
    Tensor c = ops::matmul(nullptr, a, b);
    CHECK(c.at(0) == 19.0);
    CHECK(c.at(1) == 22.0);
    CHECK(c.at(2) == 43.0);
    CHECK(c.at(3) == 50.0);
}

TEST_CASE("batched matmuls match finite differences") {
    auto rng = rng_for(66);
    SUBCASE("bmm_nt") {
        std::vector<Tensor> inputs = {Tensor::randn({2, 3, 4}, rng), Tensor::randn({2, 5, 4}, rng)};
        auto res = check_gradients(
            inputs,
            [](Tape& t, std::vector<Tensor>& in) {
                return ops::sum(&t, ops::bmm_nt(&t, in[0], in[1]));
            },
            1e-6);
        CHECK(res.ok);
    }
    SUBCASE("bmm_nn") {
        std::vector<Tensor> inputs = {Tensor::randn({2, 3, 5}, rng), Tensor::randn({2, 5, 4}, rng)};
        auto res = check_gradients(
            inputs,
            [](Tape& t, std::vector<Tensor>& in) {
                return ops::sum(&t, ops::bmm_nn(&t, in[0], in[1]));
            },
            1e-6);
        CHECK(res.ok);
    }
}

TEST_CASE("rows gather scatters gradients to the right rows") {
    auto rng = rng_for(77);
    std::vector<Tensor> inputs = {Tensor::randn({6, 3}, rng)};
    std::vector<int> ids = {4, 0, 4, 2}; // repeated row 4 exercises accumulation
    auto res = check_gradients(inputs, [ids](Tape& t, std::vector<Tensor>& in) {
        Tensor g = ops::rows(&t, in[0], ids);
        return ops::sum(&t, ops::mul(&t, g, g));
    });
    CHECK(res.ok);

    // Unused rows must have exactly zero gradient.
    Tape tape;
    Tensor w = tape.watch(inputs[0]);
    Tensor g = ops::rows(&tape, w, ids);
    tape.backward(ops::sum(&tape, g));
    auto grad = tape.grad_of(w);
    for (size_t j = 0; j < 3; ++j) {
        CHECK(grad[1 * 3 + j] == 0.0);
        CHECK(grad[3 * 3 + j] == 0.0);
        CHECK(grad[5 * 3 + j] == 0.0);
        CHECK(grad[4 * 3 + j] == 2.0); // gathered twice
    }
    CHECK_THROWS_AS(ops::rows(nullptr, inputs[0], {6}), std::invalid_argument);
}

TEST_CASE("select and stack") {
    auto rng = rng_for(88);
    std::vector<Tensor> inputs = {Tensor::randn({8}, rng)};
    std::vector<size_t> idx = {7, 1, 1, 3};
    auto res = check_gradients(inputs, [idx](Tape& t, std::vector<Tensor>& in) {
        Tensor s = ops::select(&t, in[0], idx);
        return ops::sum(&t, ops::mul(&t, s, s));
    });
    CHECK(res.ok);

    SUBCASE("stack of scalars") {
        std::vector<Tensor> sc = {Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor::scalar(-3.0)};
        Tape tape;
        std::vector<Tensor> ws;
        for (auto& s : sc) ws.push_back(tape.watch(s));
        Tensor stk = ops::stack(&tape, ws);
        CHECK(stk.size() == 3);
        CHECK(stk.at(2) == -3.0);
        tape.backward(ops::sum(&tape, ops::mul(&tape, stk, stk)));
        CHECK(tape.grad_of(ws[0])[0] == doctest::Approx(2.0));
        CHECK(tape.grad_of(ws[2])[0] == doctest::Approx(-6.0));
    }
}

TEST_CASE("split_heads and merge_heads are inverse and differentiable") {
    auto rng = rng_for(99);
    Tensor x = Tensor::randn({3, 8}, rng);
    Tensor h = ops::split_heads(nullptr, x, 4);
    CHECK(h.shape() == std::vector<size_t>{4, 3, 2});
    Tensor back = ops::merge_heads(nullptr, h);
    for (size_t i = 0; i < x.size(); ++i) CHECK(back.at(i) == x.at(i));

    std::vector<Tensor> inputs = {x};
    auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
        Tensor hh = ops::split_heads(&t, in[0], 4);
        Tensor m = ops::merge_heads(&t, hh);
        return ops::sum(&t, ops::mul(&t, m, m));
    });
    CHECK(res.ok);
}

TEST_CASE("rmsnorm_rows matches finite differences") {
    auto rng = rng_for(111);
    std::vector<Tensor> inputs = {Tensor::randn({4, 6}, rng)};
    auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
        Tensor y = ops::rmsnorm_rows(&t, in[0]);
        return ops::sum(&t, ops::mul(&t, y, y));
    });
    CHECK(res.ok);

    // Each output row has RMS ~= 1 for inputs well above eps.
    Tensor y = ops::rmsnorm_rows(nullptr, inputs[0]);
    for (size_t r = 0; r < 4; ++r) {
        double ms = 0.0;
        for (size_t j = 0; j < 6; ++j) ms += y.at(r * 6 + j) * y.at(r * 6 + j);
        CHECK(ms / 6.0 == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("log_softmax_rows matches finite differences and normalizes") {
    auto rng = rng_for(123);
    std::vector<Tensor> inputs = {Tensor::randn({3, 7}, rng, 2.0)};
    auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
        Tensor ls = ops::log_softmax_rows(&t, in[0]);
        // Weighted sum picks out a non-trivial cotangent.
        std::vector<double> w(21);
        for (size_t i = 0; i < w.size(); ++i) w[i] = 0.1 * static_cast<double>(i) - 1.0;
        return ops::sum(&t, ops::mul_constvec(&t, ls, w));
    });
    CHECK(res.ok);

    Tensor ls = ops::log_softmax_rows(nullptr, inputs[0]);
    for (size_t r = 0; r < 3; ++r) {
        double se = 0.0;
        for (size_t j = 0; j < 7; ++j) se += std::exp(ls.at(r * 7 + j));
        CHECK(se == doctest::Approx(1.0).epsilon(1e-12));
    }

    // Stability: huge logits must not overflow.
    Tensor big({1, 3}, {1e4, 1e4 - 1.0, 0.0});
    Tensor lsb = ops::log_softmax_rows(nullptr, big);
    for (size_t j = 0; j < 3; ++j) CHECK(std::isfinite(lsb.at(j)));
}

TEST_CASE("masked_softmax_rows honors the mask") {
    auto rng = rng_for(135);
    const double ninf = -std::numeric_limits<double>::infinity();
    Tensor s = Tensor::randn({2, 3, 4}, rng);
    std::vector<double> mask(12, 0.0);
    mask[0 * 4 + 2] = ninf; // query 0 cannot see key 2
    mask[0 * 4 + 3] = ninf;
    mask[1 * 4 + 3] = ninf;

    Tensor p = ops::masked_softmax_rows(nullptr, s, mask);
    for (size_t h = 0; h < 2; ++h) {
        for (size_t t = 0; t < 3; ++t) {
            double rowsum = 0.0;
            for (size_t j = 0; j < 4; ++j) rowsum += p.at((h * 3 + t) * 4 + j);
            CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-12));
        }
        CHECK(p.at((h * 3 + 0) * 4 + 2) == 0.0);
        CHECK(p.at((h * 3 + 0) * 4 + 3) == 0.0);
        CHECK(p.at((h * 3 + 1) * 4 + 3) == 0.0);
    }

    std::vector<Tensor> inputs = {s};
    auto res = check_gradients(inputs, [mask](Tape& t, std::vector<Tensor>& in) {
        Tensor pp = ops::masked_softmax_rows(&t, in[0], mask);
        return ops::sum(&t, ops::mul(&t, pp, pp));
    });
    CHECK(res.ok);
}

TEST_CASE("stop_gradient blocks the backward path but not the forward value") {
    auto rng = rng_for(147);
    Tape tape;
    Tensor x = tape.watch(Tensor::randn({5}, rng));

    // y = sum(x * stop_gradient(x)): forward equals sum(x*x), gradient is x
    // (only the live factor contributes), not 2x.
    Tensor sg = ops::stop_gradient(x);
    CHECK_FALSE(sg.tracked());
    for (size_t i = 0; i < 5; ++i) CHECK(sg.at(i) == x.at(i));

    Tensor y = ops::sum(&tape, ops::mul(&tape, x, sg));
    double expect = 0.0;
    for (size_t i = 0; i < 5; ++i) expect += x.at(i) * x.at(i);
    CHECK(y.scalar_value() == doctest::Approx(expect).epsilon(1e-15));

    tape.backward(y);
    auto g = tape.grad_of(x);
    for (size_t i = 0; i < 5; ++i) {
        CHECK(g[i] == doctest::Approx(x.at(i)).epsilon(1e-12));
    }
}

TEST_CASE("fan-out accumulates gradients") {
    Tape tape;
    Tensor x = tape.watch(Tensor::scalar(3.0));
    // y = x*x + x  => dy/dx = 2x + 1 = 7
    Tensor y = ops::add(&tape, ops::mul(&tape, x, x), x);
    tape.backward(y);
    CHECK(tape.grad_of(x)[0] == doctest::Approx(7.0));
}

TEST_CASE("backward is repeatable and validates its argument") {
    Tape tape;
    Tensor x = tape.watch(Tensor::scalar(2.0));
    Tensor y = ops::mul(&tape, x, x);
    tape.backward(y);
    CHECK(tape.grad_of(x)[0] == doctest::Approx(4.0));
    tape.backward(y); // second call must not double-accumulate
    CHECK(tape.grad_of(x)[0] == doctest::Approx(4.0));

    Tensor vec = tape.watch(Tensor({3}, {1.0, 2.0, 3.0}));
    CHECK_THROWS_AS(tape.backward(vec), std::invalid_argument);
    Tensor untracked = Tensor::scalar(1.0);
    CHECK_THROWS_AS(tape.backward(untracked), std::invalid_argument);
}

TEST_CASE("nodes not on the path to the loss get zero gradient") {
    Tape tape;
    Tensor x = tape.watch(Tensor::scalar(2.0));
    Tensor z = tape.watch(Tensor::scalar(5.0));
    Tensor unused = ops::mul(&tape, z, z); // never feeds the loss
    (void)unused;
    Tensor y = ops::mul(&tape, x, x);
    tape.backward(y);
    CHECK(tape.grad_of(x)[0] == doctest::Approx(4.0));
    CHECK(tape.grad_of(z)[0] == 0.0);
}

TEST_CASE("null tape means pure inference: outputs are untracked") {
    auto rng = rng_for(159);
    Tensor a = Tensor::randn({2, 2}, rng);
    Tensor b = Tensor::randn({2, 2}, rng);
    CHECK_FALSE(ops::matmul(nullptr, a, b).tracked());
    CHECK_FALSE(ops::add(nullptr, a, b).tracked());
    CHECK_FALSE(ops::sum(nullptr, a).tracked());
}

TEST_CASE("composite expression: two-layer network end to end") {
    auto rng = rng_for(171);
    std::vector<Tensor> inputs = {
        Tensor::randn({2, 4}, rng, 0.7), // x
        Tensor::randn({4, 5}, rng, 0.7), // w1
        Tensor::randn({5, 3}, rng, 0.7), // w2
    };
    auto res = check_gradients(inputs, [](Tape& t, std::vector<Tensor>& in) {
        Tensor h = ops::relu(&t, ops::matmul(&t, in[0], in[1]));
        Tensor o = ops::matmul(&t, h, in[2]);
        Tensor ls = ops::log_softmax_rows(&t, o);
        return ops::scale(&t, ops::sum(&t, ops::select(&t, ls, {0, 4})), -0.5);
    });
    CHECK(res.ok);
    CHECK(res.coords_checked == 43);
}
