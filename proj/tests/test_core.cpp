#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cstring>

#include "invflow/dense_oracle.hpp"
#include "invflow/errors.hpp"
#include "invflow/inv_conv.hpp"
#include "invflow/masked_kernel.hpp"
#include "invflow/rng.hpp"
#include "invflow/tensor.hpp"
#include "test_util.hpp"

using namespace invflow;
using namespace testutil;

TEST_CASE("tensor construction validates shape and data length") {
    CHECK_THROWS_AS(Tensor3(0, 2, 2), DimensionError);
    CHECK_THROWS_AS(Tensor3(1, -1, 2), DimensionError);
    CHECK_THROWS_AS(Tensor3(1, 2, 2, std::vector<double>(3)), DimensionError);
    const Tensor3 t(2, 3, 4);
    CHECK(t.size() == 24);
    CHECK(t.at(1, 2, 3) == 0.0);
}

TEST_CASE("linear index is channel-minor and refines the spatial partial order") {
    const int c = 3, h = 4, w = 5;
    // Bijection onto [0, C*H*W).
    std::vector<int> seen(static_cast<std::size_t>(c) * h * w, 0);
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) seen[linear_index(ch, i, j, c, w)] += 1;
    CHECK(std::all_of(seen.begin(), seen.end(), [](int n) { return n == 1; }));
    // p <= q componentwise (same channel) implies linear(p) <= linear(q).
    for (int i1 = 0; i1 < h; ++i1)
        for (int j1 = 0; j1 < w; ++j1)
            for (int i2 = i1; i2 < h; ++i2)
                for (int j2 = j1; j2 < w; ++j2)
                    CHECK(linear_index(0, i1, j1, c, w) <= linear_index(0, i2, j2, c, w));
}

TEST_CASE("pad_top_left basic example") {
    Tensor3 x(1, 2, 2, {1, 2, 3, 4});
    const Tensor3 p = pad_top_left(x, 1);
    CHECK(p.channels() == 1);
    CHECK(p.height() == 3);
    CHECK(p.width() == 3);
    const std::vector<double> want = {0, 0, 0, 0, 1, 2, 0, 3, 4};
    CHECK(p.values() == want);
}

TEST_CASE("pad_top_left pad 0 is the identity and pad 2 lands bottom-right") {
    Rng rng(7);
    Tensor3 x(2, 3, 3);
    fill_uniform(x, rng);
    const Tensor3 same = pad_top_left(x, 0);
    CHECK(same.values() == x.values());

    Tensor3 two(2, 1, 1);
    two.at(0, 0, 0) = 5.0;
    two.at(1, 0, 0) = -3.0;
    const Tensor3 p = pad_top_left(two, 2);
    CHECK(p.channels() == 2);
    CHECK(p.height() == 3);
    CHECK(p.width() == 3);
    CHECK(p.at(0, 2, 2) == 5.0);
    CHECK(p.at(1, 2, 2) == -3.0);
    double off_sum = 0.0;
    for (int ch = 0; ch < 2; ++ch)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                if (i != 2 || j != 2) off_sum += std::abs(p.at(ch, i, j));
    CHECK(off_sum == 0.0);
    CHECK_THROWS_AS(pad_top_left(x, -1), ArgumentError);
}

TEST_CASE("vectorize order and roundtrip") {
    Tensor3 single(1, 1, 1, {7});
    CHECK(vectorize(single) == std::vector<double>{7});

    Tensor3 x(2, 1, 2);
    x.at(0, 0, 0) = 1.5;   // a
    x.at(1, 0, 0) = 2.5;   // b
    x.at(0, 0, 1) = -3.0;  // c
    x.at(1, 0, 1) = 4.0;   // d
    CHECK(vectorize(x) == std::vector<double>({1.5, 2.5, -3.0, 4.0}));

    Rng rng(11);
    Tensor3 big(3, 4, 5);
    fill_uniform(big, rng);
    const Tensor3 back = devectorize(vectorize(big), 3, 4, 5);
    CHECK(std::memcmp(back.data(), big.data(), big.size() * sizeof(double)) == 0);

    CHECK_THROWS_AS(devectorize(std::vector<double>(5), 1, 2, 2), DimensionError);
}

TEST_CASE("rng determinism and state restore") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    for (int i = 0; i < 100; ++i) {
        const double u = a.uniform01();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
    a.normal();  // leave a cached spare in flight
    const Rng::State snap = a.state();
    std::vector<double> first;
    for (int i = 0; i < 10; ++i) first.push_back(a.normal());
    a.set_state(snap);
    for (int i = 0; i < 10; ++i) CHECK(a.normal() == first[i]);
}

TEST_CASE("masked kernel structural entries and projection") {
    MaskedKernel k(3, 2);
    CHECK(k.mask_ok());
    // Identity at construction: all free entries zero.
    const Tensor3 probe(3, 2, 2, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    const Tensor3 y = conv_forward(probe, k);
    CHECK(max_abs_diff(y, probe) == 0.0);

    // free_entry: the bottom-right tap is structural on and above the diagonal.
    CHECK(!k.free_entry(0, 0, 1, 1));
    CHECK(!k.free_entry(0, 2, 1, 1));
    CHECK(k.free_entry(2, 0, 1, 1));   // below diagonal: free
    CHECK(k.free_entry(0, 2, 0, 1));   // any other tap: free
    CHECK(k.free_entry(1, 1, 1, 0));

    // Tampering with structural entries is repaired by project().
    k.set(0, 0, 1, 1, 5.0);
    k.set(0, 2, 1, 1, -2.0);
    CHECK(!k.mask_ok());
    k.project();
    CHECK(k.mask_ok());
    CHECK(k.at(0, 0, 1, 1) == 1.0);
    CHECK(k.at(0, 2, 1, 1) == 0.0);

    Rng rng(3);
    const MaskedKernel r = MaskedKernel::random(4, 3, rng);
    CHECK(r.mask_ok());
}

TEST_CASE("dense operator: identity kernel gives the identity matrix") {
    const MaskedKernel k(2, 3);
    const DenseOperator op(k, 3, 3);
    CHECK(op.n() == 18);
    double err = 0.0;
    for (int i = 0; i < op.n(); ++i)
        for (int j = 0; j < op.n(); ++j)
            err = std::max(err, std::abs(op.entry(i, j) - (i == j ? 1.0 : 0.0)));
    CHECK(err == 0.0);
}

TEST_CASE("dense operator row for the C=1 k=2 kernel matches the hand expansion") {
    // Kernel [[a, b], [c, 1]]; on a 2x2 grid the row of output pixel (1,1)
    // against [x00, x01, x10, x11] is [a, b, c, 1].
    const double a = 0.7, b = -0.3, c = 0.45;
    MaskedKernel k(1, 2);
    k.set(0, 0, 0, 0, a);
    k.set(0, 0, 0, 1, b);
    k.set(0, 0, 1, 0, c);
    const DenseOperator op(k, 2, 2);
    const int row = static_cast<int>(linear_index(0, 1, 1, 1, 2));
    CHECK(op.entry(row, 0) == doctest::Approx(a).epsilon(1e-15));
    CHECK(op.entry(row, 1) == doctest::Approx(b).epsilon(1e-15));
    CHECK(op.entry(row, 2) == doctest::Approx(c).epsilon(1e-15));
    CHECK(op.entry(row, 3) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("dense operator is exactly unit lower triangular for 200 random kernels") {
    Rng rng(2024);
    const int cs[] = {1, 2, 4};
    const int ks[] = {1, 2, 3};
    const int hs[] = {2, 4, 6};
    for (int trial = 0; trial < 200; ++trial) {
        const int c = cs[rng.below(3)];
        const int k = ks[rng.below(3)];
        const int h = hs[rng.below(3)];
        const MaskedKernel kernel = MaskedKernel::random(c, k, rng);
        const DenseOperator op(kernel, h, h);
        CHECK(op.above_diagonal_mass() == 0.0);
        CHECK(op.unit_diagonal_error() == 0.0);
    }
}

TEST_CASE("determinant law for relaxed bottom-right weight") {
    // With the mask relaxed to bottom-right scalar w (C=1), det = w^(H*W).
    Rng rng(5);
    for (const double w : {0.5, 1.0, 2.0}) {
        for (int h = 1; h <= 6; ++h) {
            for (int wd = 1; wd <= 6; ++wd) {
                MaskedKernel k = MaskedKernel::random(1, 3, rng, 0.3);
                k.set(0, 0, 2, 2, w);  // deliberately unprojected
                const DenseOperator op(k, h, wd);
                const double want = std::pow(w, h * wd);
                CHECK(std::abs(op.determinant() - want) <=
                      1e-9 * std::max(1.0, std::abs(want)));
            }
        }
    }
}

TEST_CASE("dense operator capacity guard") {
    const MaskedKernel k(1, 3);
    CHECK_THROWS_AS(DenseOperator(k, 65, 64), CapacityError);  // n = 4160
    CHECK_NOTHROW(DenseOperator(k, 64, 64));                   // n = 4096
}

TEST_CASE("dense apply matches conv_forward") {
    Rng rng(6);
    const MaskedKernel k = MaskedKernel::random(2, 3, rng);
    Tensor3 x(2, 4, 4);
    fill_uniform(x, rng);
    const DenseOperator op(k, 4, 4);
    const std::vector<double> via_matrix = op.apply(vectorize(x));
    const Tensor3 via_conv = conv_forward(x, k);
    CHECK(max_abs_diff(via_matrix, vectorize(via_conv)) < 1e-12);
}

TEST_CASE("order compatibility: every dependency pixel precedes its output") {
    // q in Delta(p) means q = p - (di, dj) with (di, dj) != (0, 0), or the
    // same pixel at a lower channel; all must come earlier in linear order.
    const int c = 3, h = 4, w = 4, k = 3;
    for (int a = 0; a < c; ++a)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const std::size_t p = linear_index(a, i, j, c, w);
                for (int b = 0; b < a; ++b)
                    CHECK(linear_index(b, i, j, c, w) < p);
                for (int di = 0; di < k; ++di)
                    for (int dj = 0; dj < k; ++dj) {
                        if (di == 0 && dj == 0) continue;
                        if (i - di < 0 || j - dj < 0) continue;
                        for (int b = 0; b < c; ++b)
                            CHECK(linear_index(b, i - di, j - dj, c, w) < p);
                    }
            }
}
