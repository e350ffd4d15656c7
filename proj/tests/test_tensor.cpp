#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "oracles.hpp"
#include "sblab/tensor.hpp"

using namespace sblab;

namespace {

Tensor random_tensor(Shape shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("matmul identity and 1x1") {
    Tape tape;
    Val eye = tape.constant(Tensor::from({2, 2}, {1, 0, 0, 1}));
    Val b = tape.constant(Tensor::from({2, 2}, {3, 4, 5, 6}));
    CHECK(tape.value(tape.matmul(eye, b)).data == std::vector<double>{3, 4, 5, 6});

    Val a1 = tape.constant(Tensor::from({1, 1}, {2}));
    Val b1 = tape.constant(Tensor::from({1, 1}, {3}));
    CHECK(tape.value(tape.matmul(a1, b1)).data == std::vector<double>{6});
}

TEST_CASE("matmul matches triple-loop oracle") {
    Tensor a = random_tensor({5, 4}, 11);
    Tensor b = random_tensor({4, 3}, 12);
    Tape tape;
    const Tensor& got = tape.value(tape.matmul(tape.constant(a), tape.constant(b)));
    Tensor want = oracle::matmul(a, b);
    for (size_t i = 0; i < want.data.size(); ++i)
        CHECK(oracle::rel_err(got.data[i], want.data[i]) <= 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tape tape;
    Val a = tape.constant(Tensor({2, 3}));
    Val b = tape.constant(Tensor({2, 3}));
    CHECK_THROWS_WITH_AS(tape.matmul(a, b), doctest::Contains("[2x3]"), DimensionError);
}

TEST_CASE("conv2d identity kernel") {
    Tensor img = random_tensor({1, 5, 5}, 21, 0.0, 1.0);
    Tape tape;
    Val out = tape.conv2d(tape.constant(img), tape.constant(Tensor::from({1, 1, 1, 1}, {1.0})),
                          tape.constant(Tensor({1})));
    CHECK(tape.value(out).data == img.data);
}

TEST_CASE("conv2d all-ones 2x2 kernel over constant image") {
    const double c = 0.37;
    Tape tape;
    Val out = tape.conv2d(tape.constant(Tensor::full({1, 4, 4}, c)),
                          tape.constant(Tensor::full({1, 1, 2, 2}, 1.0)),
                          tape.constant(Tensor({1})));
    for (double v : tape.value(out).data) CHECK(v == doctest::Approx(4 * c).epsilon(1e-14));
    CHECK(tape.value(out).shape == Shape{1, 3, 3});
}

TEST_CASE("conv2d matches direct-summation oracle") {
    Tensor img = random_tensor({1, 6, 6}, 31);
    Tensor k = random_tensor({2, 1, 3, 3}, 32);
    Tensor b = random_tensor({2}, 33);
    Tape tape;
    const Tensor& got =
        tape.value(tape.conv2d(tape.constant(img), tape.constant(k), tape.constant(b)));
    Tensor want = oracle::conv2d(img, k, b);
    CHECK(got.shape == want.shape);
    for (size_t i = 0; i < want.data.size(); ++i)
        CHECK(oracle::rel_err(got.data[i], want.data[i]) <= 1e-12);
}

TEST_CASE("conv2d rejects kernels larger than the input") {
    Tape tape;
    Val img = tape.constant(Tensor({1, 2, 2}));
    Val k = tape.constant(Tensor({1, 1, 3, 3}));
    Val b = tape.constant(Tensor({1}));
    CHECK_THROWS_AS(tape.conv2d(img, k, b), DimensionError);
}

TEST_CASE("relu forward and gradient") {
    Tape tape;
    Tensor x = Tensor::from({3}, {-1, 0, 2});
    Val y = tape.relu(tape.watch(x));
    CHECK(tape.value(y).data == std::vector<double>{0, 0, 2});
    tape.backward(tape.sum(y));
    CHECK(*x.grad == std::vector<double>{0, 0, 1});

    Tensor neg = Tensor::from({3}, {-3, -1, -0.5});
    Tape tape2;
    Val z = tape2.relu(tape2.watch(neg));
    CHECK(tape2.value(z).data == std::vector<double>{0, 0, 0});
    tape2.backward(tape2.sum(z));
    CHECK(*neg.grad == std::vector<double>{0, 0, 0});
}

TEST_CASE("relu gradient matches finite differences away from the kink") {
    Tensor x = random_tensor({6}, 41);
    for (double& v : x.data)
        if (std::abs(v) < 2e-3) v += 0.1;  // stay away from the kink
    auto f = [](const Tensor& t) {
        Tape tape;
        Tensor copy = t;
        return tape.scalar_value(tape.sum(tape.relu(tape.watch(copy))));
    };
    Tensor fd = finite_diff_grad(f, x, 1e-6);
    Tape tape;
    Val y = tape.relu(tape.watch(x));
    tape.backward(tape.sum(y));
    for (size_t i = 0; i < x.data.size(); ++i)
        CHECK(oracle::grads_agree((*x.grad)[i], fd.data[i], 1e-5));
}

TEST_CASE("log_softmax uniform case") {
    Tape tape;
    Val out = tape.log_softmax(tape.constant(Tensor::from({4}, {0, 0, 0, 0})));
    for (double v : tape.value(out).data)
        CHECK(v == doctest::Approx(-std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("log_softmax shift invariance") {
    Tensor z = random_tensor({7}, 51, -3.0, 3.0);
    Tensor zs = z;
    for (double& v : zs.data) v += 17.25;
    Tape tape;
    const Tensor& a = tape.value(tape.log_softmax(tape.constant(z)));
    const Tensor& b = tape.value(tape.log_softmax(tape.constant(zs)));
    for (size_t i = 0; i < a.data.size(); ++i)
        CHECK(std::abs(a.data[i] - b.data[i]) <= 1e-12);
}

TEST_CASE("log_softmax stays finite on extreme logits") {
    Tape tape;
    const Tensor& out = tape.value(tape.log_softmax(tape.constant(Tensor::from({2}, {1000, 0}))));
    CHECK(out.all_finite());
    CHECK(out.data[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(out.data[1] == doctest::Approx(-1000.0).epsilon(1e-12));
}

TEST_CASE("log_softmax rejects empty or mis-ranked input") {
    // Zero-length tensors cannot even be built, so emptiness fails at
    // construction with the same dimension error.
    CHECK_THROWS_AS(Tensor({0}), DimensionError);
    Tape tape;
    CHECK_THROWS_AS(tape.log_softmax(tape.constant(Tensor({2, 2}))), DimensionError);
    // K = 1 is legal and gives log(1) = 0.
    CHECK(tape.value(tape.log_softmax(tape.constant(Tensor::from({1}, {5.0})))).data[0] == 0.0);
}

TEST_CASE("exp(log_softmax) sums to one") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Tensor z = random_tensor({9}, 100 + seed, -50.0, 50.0);
        Tape tape;
        const Tensor& out = tape.value(tape.log_softmax(tape.constant(z)));
        double s = 0.0;
        for (double v : out.data) s += std::exp(v);
        CHECK(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("grad_reverse forward is bit-identical") {
    Tensor x = random_tensor({5}, 61, -10.0, 10.0);
    Tape tape;
    const Tensor& out = tape.value(tape.grad_reverse(tape.watch(x), 0.5));
    CHECK(std::memcmp(out.data.data(), x.data.data(), x.data.size() * sizeof(double)) == 0);
}

TEST_CASE("grad_reverse backward multiplies upstream by -lambda") {
    // loss = sum(grad_reverse(x) * c) makes the upstream gradient equal c.
    Tensor upstream = Tensor::from({2}, {1, -2});
    for (double lambda : {0.0, 0.5, 1.0}) {
        Tensor x = Tensor::from({2}, {0.3, 0.4});
        Tape tape;
        Val rev = tape.grad_reverse(tape.watch(x), lambda);
        tape.backward(tape.sum(tape.mul(rev, tape.constant(upstream))));
        for (size_t i = 0; i < 2; ++i)
            CHECK(std::abs((*x.grad)[i] - (-lambda * upstream.data[i])) <= 1e-12);
    }
    Tensor x = Tensor::from({2}, {0.3, 0.4});
    Tape tape;
    Val rev = tape.grad_reverse(tape.watch(x), 0.5);
    tape.backward(tape.sum(tape.mul(rev, tape.constant(upstream))));
    CHECK((*x.grad)[0] == doctest::Approx(-0.5).epsilon(1e-14));
    CHECK((*x.grad)[1] == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("grad_reverse rejects negative lambda") {
    Tape tape;
    Val x = tape.constant(Tensor::from({1}, {1}));
    CHECK_THROWS_AS(tape.grad_reverse(x, -0.1), ConfigError);
}

TEST_CASE("backward of sum gives ones; of 0*x gives zeros") {
    Tensor x = Tensor::from({3}, {1, 2, 3});
    Tape tape;
    tape.backward(tape.sum(tape.watch(x)));
    CHECK(*x.grad == std::vector<double>{1, 1, 1});

    Tensor y = Tensor::from({3}, {1, 2, 3});
    Tape tape2;
    tape2.backward(tape2.sum(tape2.scale(tape2.watch(y), 0.0)));
    CHECK(*y.grad == std::vector<double>{0, 0, 0});
}

TEST_CASE("backward rejects non-scalar loss") {
    Tape tape;
    Val x = tape.constant(Tensor({3}));
    CHECK_THROWS_AS(tape.backward(x), ContractError);
}

TEST_CASE("two backward passes accumulate exactly twice the gradient") {
    Tensor x = random_tensor({4}, 71);
    Tensor w = random_tensor({4}, 72);
    Tape tape;
    Val loss = tape.sum(tape.mul(tape.watch(x), tape.constant(w)));
    tape.backward(loss);
    std::vector<double> once = *x.grad;
    tape.backward(loss);
    for (size_t i = 0; i < once.size(); ++i) CHECK((*x.grad)[i] == 2.0 * once[i]);
}

TEST_CASE("two-layer network gradient matches finite differences") {
    // x -> relu(x W1 + b1) W2 -> scalar
    Tensor w1 = random_tensor({4, 6}, 81);
    Tensor b1 = random_tensor({6}, 82);
    Tensor w2 = random_tensor({6, 1}, 83);
    Tensor x = random_tensor({1, 4}, 84);

    auto loss_with = [&](const Tensor& w1v, const Tensor& b1v, const Tensor& w2v,
                         Tape* grads_tape, Tensor* w1m, Tensor* b1m, Tensor* w2m) {
        Tape local;
        Tape& tape = grads_tape ? *grads_tape : local;
        Val xv = tape.constant(x);
        Val w1x = w1m ? tape.watch(*w1m) : tape.constant(w1v);
        Val b1x = b1m ? tape.watch(*b1m) : tape.constant(b1v);
        Val w2x = w2m ? tape.watch(*w2m) : tape.constant(w2v);
        Val h = tape.relu(tape.add_rowvec(tape.matmul(xv, w1x), b1x));
        Val out = tape.sum(tape.matmul(h, w2x));
        if (grads_tape) tape.backward(out);
        return tape.scalar_value(out);
    };

    Tape tape;
    Tensor w1m = w1, b1m = b1, w2m = w2;
    loss_with(w1, b1, w2, &tape, &w1m, &b1m, &w2m);
    if (tape.min_relu_margin() < 1e-3) return;  // unlucky draw; kink too close

    Tensor fd_w1 = finite_diff_grad(
        [&](const Tensor& t) { return loss_with(t, b1, w2, nullptr, nullptr, nullptr, nullptr); },
        w1, 1e-6);
    Tensor fd_b1 = finite_diff_grad(
        [&](const Tensor& t) { return loss_with(w1, t, w2, nullptr, nullptr, nullptr, nullptr); },
        b1, 1e-6);
    Tensor fd_w2 = finite_diff_grad(
        [&](const Tensor& t) { return loss_with(w1, b1, t, nullptr, nullptr, nullptr, nullptr); },
        w2, 1e-6);

    for (size_t i = 0; i < w1.data.size(); ++i)
        CHECK(oracle::grads_agree((*w1m.grad)[i], fd_w1.data[i], 1e-5));
    for (size_t i = 0; i < b1.data.size(); ++i)
        CHECK(oracle::grads_agree((*b1m.grad)[i], fd_b1.data[i], 1e-5));
    for (size_t i = 0; i < w2.data.size(); ++i)
        CHECK(oracle::grads_agree((*w2m.grad)[i], fd_w2.data[i], 1e-5));
}

TEST_CASE("sgd_step basic updates") {
    Parameter p("p", Tensor::from({1}, {1.0}));
    p.tensor.grad = std::vector<double>{2.0};
    Parameter* ps[] = {&p};
    sgd_step(ps, 0.1, 0.0, 0.0);
    CHECK(p.tensor.at(0) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK_FALSE(p.tensor.grad.has_value());

    // zero gradient, no decay: parameter untouched
    Parameter q("q", Tensor::from({2}, {0.5, -0.25}));
    q.tensor.grad = std::vector<double>{0.0, 0.0};
    Parameter* qs[] = {&q};
    sgd_step(qs, 0.1, 0.0, 0.0);
    CHECK(q.tensor.data == std::vector<double>{0.5, -0.25});
}

TEST_CASE("sgd_step momentum matches hand-unrolled recurrence") {
    const double lr = 0.05, mom = 0.9, wd = 0.01;
    const double g1 = 0.3, g2 = -0.2;
    double x = 1.5, buf = 0.0;
    // step 1
    buf = mom * buf + g1 + wd * x;
    double x1 = x - lr * buf;
    // step 2
    buf = mom * buf + g2 + wd * x1;
    double x2 = x1 - lr * buf;

    Parameter p("p", Tensor::from({1}, {1.5}));
    Parameter* ps[] = {&p};
    p.tensor.grad = std::vector<double>{g1};
    sgd_step(ps, lr, mom, wd);
    CHECK(std::abs(p.tensor.at(0) - x1) <= 1e-12);
    p.tensor.grad = std::vector<double>{g2};
    sgd_step(ps, lr, mom, wd);
    CHECK(std::abs(p.tensor.at(0) - x2) <= 1e-12);
}

TEST_CASE("sgd_step with missing gradient names the parameter") {
    Parameter p("conv.w", Tensor({2}));
    Parameter* ps[] = {&p};
    CHECK_THROWS_WITH_AS(sgd_step(ps, 0.1, 0.0, 0.0), doctest::Contains("conv.w"), ContractError);
}

TEST_CASE("sgd_step with lr=0 leaves parameters bit-identical") {
    Parameter p("p", random_tensor({8}, 91));
    std::vector<double> before = p.tensor.data;
    p.tensor.grad = std::vector<double>(8, 0.7);
    Parameter* ps[] = {&p};
    sgd_step(ps, 0.0, 0.9, 0.1);
    CHECK(p.tensor.data == before);
}

TEST_CASE("finite_diff_grad on sum of squares and constants") {
    auto sumsq = [](const Tensor& t) {
        double s = 0.0;
        for (double v : t.data) s += v * v;
        return s;
    };
    Tensor x = Tensor::from({2}, {1, 2});
    Tensor g = finite_diff_grad(sumsq, x, 1e-6);
    CHECK(std::abs(g.at(0) - 2.0) <= 1e-6);
    CHECK(std::abs(g.at(1) - 4.0) <= 1e-6);

    Tensor gc = finite_diff_grad([](const Tensor&) { return 3.0; }, x, 1e-6);
    CHECK(gc.data == std::vector<double>{0, 0});
}

TEST_CASE("backward and finite differences agree on a random composite graph") {
    Tensor x = random_tensor({2, 3}, 95);
    auto f = [](const Tensor& t) {
        Tensor copy = t;
        Tape tape;
        Val v = tape.watch(copy);
        Val a = tape.relu(tape.scale(v, 1.7));
        Val b = tape.mul(v, v);
        Val row = tape.reshape(tape.add(a, b), {1, 6});
        Val sm = tape.log_softmax_rows(row);
        return tape.scalar_value(tape.mean(sm));
    };
    Tape tape;
    Tensor copy = x;
    Val v = tape.watch(copy);
    Val a = tape.relu(tape.scale(v, 1.7));
    Val b = tape.mul(v, v);
    Val row = tape.reshape(tape.add(a, b), {1, 6});
    Val sm = tape.log_softmax_rows(row);
    tape.backward(tape.mean(sm));
    if (tape.min_relu_margin() < 1e-3) return;
    Tensor fd = finite_diff_grad(f, x, 1e-6);
    for (size_t i = 0; i < x.data.size(); ++i)
        CHECK(oracle::grads_agree((*copy.grad)[i], fd.data[i], 1e-5));
}

TEST_CASE("entropy helper handles zeros and hand values") {
    std::vector<double> onehot{1, 0, 0, 0};
    CHECK(entropy(onehot) == doctest::Approx(0.0).epsilon(1e-15));
    std::vector<double> half{0.5, 0.5, 0, 0};
    CHECK(entropy(half) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    std::vector<double> uniform(8, 0.125);
    CHECK(entropy(uniform) == doctest::Approx(std::log(8.0)).epsilon(1e-12));
}
