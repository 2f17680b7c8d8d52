#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "codl/autodiff.hpp"
#include "codl/nn.hpp"

using namespace codl;

namespace {

// Central finite differences against reverse-mode gradients for a scalar
// functional of a set of leaf inputs.
void gradcheck(const std::vector<Tensor>& inputs,
               const std::function<Var(const std::vector<Var>&)>& fn, double h = 1e-5,
               double tol = 1e-6) {
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(Var::leaf(t, true));
    Var loss = fn(leaves);
    REQUIRE(loss.numel() == 1);
    backward(loss);

    for (size_t li = 0; li < leaves.size(); ++li) {
        Tensor base = inputs[li];
        for (int64_t i = 0; i < base.numel(); ++i) {
            Tensor tp = base, tm = base;
            tp[i] += h;
            tm[i] -= h;
            std::vector<Var> lp, lm;
            for (size_t k = 0; k < inputs.size(); ++k) {
                lp.push_back(Var::leaf(k == li ? tp : inputs[k], false));
                lm.push_back(Var::leaf(k == li ? tm : inputs[k], false));
            }
            double fd = (fn(lp).val()[0] - fn(lm).val()[0]) / (2 * h);
            double ad = leaves[li].has_grad() ? leaves[li].grad()[i] : 0.0;
            REQUIRE_THAT(ad, Catch::Matchers::WithinAbs(fd, tol + 1e-4 * std::abs(fd)));
        }
    }
}

Tensor rnd(std::vector<int> shape, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng, scale);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
    gradcheck({rnd({2, 3}, 1), rnd({2, 3}, 2)},
              [](const std::vector<Var>& v) { return mean_all(mul(add(v[0], v[1]), sub(v[0], v[1]))); });
    gradcheck({rnd({7}, 3)}, [](const std::vector<Var>& v) {
        return mean_all(silu(mul_scalar(v[0], 1.7)));
    });
    gradcheck({rnd({7}, 4)}, [](const std::vector<Var>& v) { return mean_all(sigmoid(v[0])); });
    gradcheck({rnd({5}, 5, 0.5)}, [](const std::vector<Var>& v) {
        return sum_all(relu(add_scalar(v[0], 0.1)));
    });
    gradcheck({rnd({6}, 6)}, [](const std::vector<Var>& v) { return mean_all(abs_op(v[0])); });
    gradcheck({rnd({4}, 7)}, [](const std::vector<Var>& v) { return mean_all(square(v[0])); });
}

TEST_CASE("matmul family matches finite differences") {
    gradcheck({rnd({3, 4}, 10), rnd({4, 2}, 11)},
              [](const std::vector<Var>& v) { return mean_all(matmul(v[0], v[1])); });
    gradcheck({rnd({2, 3, 4}, 12), rnd({2, 4, 3}, 13)},
              [](const std::vector<Var>& v) { return mean_all(square(bmm(v[0], v[1]))); });
    gradcheck({rnd({2, 3, 4}, 14), rnd({2, 5, 4}, 15)},
              [](const std::vector<Var>& v) { return mean_all(square(bmm_nt(v[0], v[1]))); });
}

TEST_CASE("broadcast ops match finite differences") {
    gradcheck({rnd({3, 4}, 20), rnd({4}, 21)},
              [](const std::vector<Var>& v) { return mean_all(square(add_rowvec(v[0], v[1]))); });
    gradcheck({rnd({3, 4}, 22), rnd({4}, 23)},
              [](const std::vector<Var>& v) { return mean_all(square(mul_rowvec(v[0], v[1]))); });
    gradcheck({rnd({2, 3, 4}, 24), rnd({2, 4}, 25)}, [](const std::vector<Var>& v) {
        return mean_all(square(mul_bcast_tokens(v[0], v[1])));
    });
    gradcheck({rnd({2, 3, 4}, 26), rnd({2, 4}, 27)}, [](const std::vector<Var>& v) {
        return mean_all(square(add_bcast_tokens(v[0], v[1])));
    });
    gradcheck({rnd({2, 3, 4}, 28), rnd({3, 4}, 29)}, [](const std::vector<Var>& v) {
        return mean_all(square(add_bcast_batch(v[0], v[1])));
    });
    gradcheck({rnd({2, 5, 3}, 30)},
              [](const std::vector<Var>& v) { return mean_all(square(mean_tokens(v[0]))); });
}

TEST_CASE("normalization and softmax match finite differences") {
    gradcheck({rnd({3, 6}, 40)}, [](const std::vector<Var>& v) {
        return mean_all(square(layer_norm_lastdim(v[0])));
    }, 1e-5, 1e-5);
    gradcheck({rnd({2, 3, 4}, 41)}, [](const std::vector<Var>& v) {
        return mean_all(square(softmax_lastdim(v[0])));
    });

    Tensor x = rnd({5, 8}, 42);
    Var sm = softmax_lastdim(Var::leaf(x, false));
    for (int r = 0; r < 5; ++r) {
        double s = 0;
        for (int c = 0; c < 8; ++c) s += sm.val().at2(r, c);
        REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("conv2d matches finite differences") {
    // stride 1, pad 1 (same conv)
    gradcheck({rnd({2, 4, 4, 3}, 50, 0.5), rnd({5, 3, 3, 3}, 51, 0.5), rnd({5}, 52, 0.5)},
              [](const std::vector<Var>& v) {
                  return mean_all(square(conv2d(v[0], v[1], v[2], 1, 1, 1)));
              },
              1e-5, 1e-5);
    // stride 2 downsample
    gradcheck({rnd({1, 6, 6, 2}, 53, 0.5), rnd({4, 3, 3, 2}, 54, 0.5), rnd({4}, 55, 0.5)},
              [](const std::vector<Var>& v) {
                  return mean_all(square(conv2d(v[0], v[1], v[2], 2, 1, 1)));
              },
              1e-5, 1e-5);
    // depthwise (groups = channels)
    gradcheck({rnd({1, 4, 4, 4}, 56, 0.5), rnd({4, 3, 3, 1}, 57, 0.5), rnd({4}, 58, 0.5)},
              [](const std::vector<Var>& v) {
                  return mean_all(square(conv2d(v[0], v[1], v[2], 1, 1, 4)));
              },
              1e-5, 1e-5);
    // grouped conv, 2 groups
    gradcheck({rnd({1, 3, 3, 4}, 59, 0.5), rnd({6, 3, 3, 2}, 60, 0.5), rnd({6}, 61, 0.5)},
              [](const std::vector<Var>& v) {
                  return mean_all(square(conv2d(v[0], v[1], v[2], 1, 1, 2)));
              },
              1e-5, 1e-5);
}

TEST_CASE("conv2d forward matches a hand-computed case") {
    // 1x1 image, 1 channel, k=1: out = w*x + b
    Var x = Var::leaf(Tensor({1, 1, 1, 1}, {2.0}), false);
    Var w = Var::leaf(Tensor({1, 1, 1, 1}, {3.0}), false);
    Var b = Var::leaf(Tensor({1}, {0.5}), false);
    Var y = conv2d(x, w, b, 1, 0, 1);
    REQUIRE(y.val()[0] == 6.5);
}

TEST_CASE("shape ops match finite differences") {
    gradcheck({rnd({2, 3, 4, 5}, 70)}, [](const std::vector<Var>& v) {
        return mean_all(square(permute4(v[0], {0, 2, 1, 3})));
    });
    gradcheck({rnd({2, 12}, 71)}, [](const std::vector<Var>& v) {
        return mean_all(square(reshape(v[0], {2, 3, 4})));
    });
    gradcheck({rnd({2, 3}, 72), rnd({2, 4}, 73)}, [](const std::vector<Var>& v) {
        return mean_all(square(concat_lastdim(v[0], v[1])));
    });
    gradcheck({rnd({3, 8}, 74)}, [](const std::vector<Var>& v) {
        return mean_all(square(slice_lastdim(v[0], 2, 4)));
    });
    gradcheck({rnd({1, 2, 2, 3}, 75)}, [](const std::vector<Var>& v) {
        return mean_all(square(upsample_nearest(v[0], 2)));
    });
    gradcheck({rnd({1, 4, 4, 2}, 76)}, [](const std::vector<Var>& v) {
        return mean_all(square(space_to_depth(v[0], 2)));
    });
    gradcheck({rnd({1, 2, 2, 8}, 77)}, [](const std::vector<Var>& v) {
        return mean_all(square(depth_to_space(v[0], 2)));
    });
}

TEST_CASE("space_to_depth / depth_to_space are inverses") {
    Tensor x = rnd({2, 4, 6, 3}, 78);
    Var v = Var::leaf(x, false);
    Var rt = depth_to_space(space_to_depth(v, 2), 2);
    REQUIRE(max_abs_diff(rt.val(), x) == 0.0);
}

TEST_CASE("embedding lookup gathers and scatters") {
    Tensor table({3, 2}, {1, 2, 3, 4, 5, 6});
    Var tv = Var::leaf(table, true);
    Var e = embedding(tv, {2, 0, 2});
    REQUIRE(e.val().at2(0, 0) == 5);
    REQUIRE(e.val().at2(1, 1) == 2);
    Var loss = sum_all(e);
    backward(loss);
    // row 2 was used twice
    REQUIRE(tv.grad().at2(2, 0) == 2.0);
    REQUIRE(tv.grad().at2(0, 0) == 1.0);
    REQUIRE(tv.grad().at2(1, 0) == 0.0);
}

TEST_CASE("stop_grad blocks the tape") {
    Var x = Var::leaf(Tensor({3}, {1, 2, 3}), true);
    Var y = mean_all(mul(x, stop_grad(x)));
    backward(y);
    // d/dx mean(x * const(x)) = const(x)/3
    REQUIRE_THAT(x.grad()[0], Catch::Matchers::WithinAbs(1.0 / 3, 1e-12));
    REQUIRE_THAT(x.grad()[2], Catch::Matchers::WithinAbs(3.0 / 3, 1e-12));
}

TEST_CASE("straight_through forwards hard value and routes grads to soft") {
    Var soft = Var::leaf(Tensor({2}, {0.3, 0.7}), true);
    Var hard = Var::leaf(Tensor({2}, {0.0, 1.0}), true);
    Var st = straight_through(soft, hard);
    REQUIRE(st.val()[0] == 0.0);
    REQUIRE(st.val()[1] == 1.0);
    Var loss = mean_all(square(st));
    backward(loss);
    REQUIRE(soft.has_grad());
    REQUIRE_THAT(soft.grad()[1], Catch::Matchers::WithinAbs(1.0, 1e-12));
    REQUIRE(!hard.has_grad());
}

TEST_CASE("grad accumulates across uses of the same node") {
    Var x = Var::leaf(Tensor({1}, {2.0}), true);
    Var y = add(mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1 = 5
    backward(y);
    REQUIRE_THAT(x.grad()[0], Catch::Matchers::WithinAbs(5.0, 1e-12));
}

TEST_CASE("Linear and LayerNorm modules gradcheck end to end") {
    Rng rng(99);
    ParamStore ps;
    Linear lin(ps, "lin", 4, 3, rng);
    LayerNorm ln(ps, "ln", 3);
    Tensor x = rnd({2, 4}, 100);
    Var loss = mean_all(square(ln.forward(silu(lin.forward(Var::leaf(x, false))))));
    backward(loss);

    double h = 1e-5;
    for (const auto& [name, p] : ps.entries()) {
        Var pv = p;
        for (int64_t i = 0; i < std::min<int64_t>(pv.numel(), 6); ++i) {
            double orig = pv.val()[i];
            pv.val_mut()[i] = orig + h;
            double fp = mean_all(square(ln.forward(silu(lin.forward(Var::leaf(x, false)))))).val()[0];
            pv.val_mut()[i] = orig - h;
            double fm = mean_all(square(ln.forward(silu(lin.forward(Var::leaf(x, false)))))).val()[0];
            pv.val_mut()[i] = orig;
            double fd = (fp - fm) / (2 * h);
            double ad = pv.has_grad() ? pv.grad()[i] : 0.0;
            REQUIRE_THAT(ad, Catch::Matchers::WithinAbs(fd, 1e-6 + 1e-4 * std::abs(fd)));
        }
    }
}

TEST_CASE("Adam reduces a quadratic") {
    ParamStore ps;
    Var w = ps.add("w", Tensor({2}, {5.0, -3.0}));
    Adam opt(Adam::Options{.lr = 0.1, .clip_norm = 0.0});
    opt.attach(ps);
    for (int i = 0; i < 200; ++i) {
        ps.zero_grads();
        Var loss = mean_all(square(w));
        backward(loss);
        opt.step();
    }
    REQUIRE(std::abs(w.val()[0]) < 0.05);
    REQUIRE(std::abs(w.val()[1]) < 0.05);
}

TEST_CASE("clip keeps global grad norm bounded") {
    ParamStore ps;
    Var w = ps.add("w", Tensor({1}, {100.0}));
    Adam opt(Adam::Options{.lr = 1e-3, .clip_norm = 1.0});
    opt.attach(ps);
    ps.zero_grads();
    Var loss = mean_all(square(w));  // grad = 200
    backward(loss);
    REQUIRE(opt.global_grad_norm() > 100.0);
    double before = w.val()[0];
    opt.step();
    // clipped first Adam step moves by about lr
    REQUIRE(std::abs(w.val()[0] - before) < 2e-3);
}
