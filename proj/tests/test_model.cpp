#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "invflow/errors.hpp"
#include "invflow/layers.hpp"
#include "invflow/model.hpp"
#include "invflow/rng.hpp"
#include "invflow/tensor.hpp"
#include "test_util.hpp"

using namespace invflow;
using namespace testutil;

namespace {

constexpr double kLn2Pi = 1.8378770664093454836;

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.levels = 1;
    cfg.steps = 1;
    cfg.hidden = 4;
    cfg.k = 2;
    cfg.channels = 1;
    cfg.height = 4;
    cfg.width = 4;
    cfg.seed = 7;
    return cfg;
}

}  // namespace

TEST_CASE("identity-initialized model is exactly the squeeze permutation") {
    ModelConfig cfg = tiny_config();
    cfg.identity_init = true;
    const FlowModel model(cfg);

    Rng rng(1);
    Tensor3 y(1, 4, 4);
    fill_uniform(y, rng);
    const FlowModel::ForwardResult res = model.model_forward(y);
    CHECK(res.total_logdet == 0.0);
    REQUIRE(res.latents.latents.size() == 1);
    CHECK(max_abs_diff(res.latents.latents[0], squeeze(y)) == 0.0);

    // Log-density of an all-zero input under the permuted standard normal.
    const Tensor3 zero(1, 4, 4);
    CHECK(model.log_prob(zero) == doctest::Approx(-8.0 * kLn2Pi).epsilon(1e-12));
    double ysq = 0.0;
    for (const double v : y.values()) ysq += v * v;
    CHECK(model.log_prob(y) == doctest::Approx(-8.0 * kLn2Pi - 0.5 * ysq).epsilon(1e-10));

    CHECK(max_abs_diff(model.reconstruct(y), y) == 0.0);
}

TEST_CASE("total_logdet matches the numerical jacobian of the forward map") {
    ModelConfig cfg = tiny_config();
    FlowModel model(cfg);
    Rng rng(2);
    model.randomize(rng, 0.3);

    auto f = [&](const std::vector<double>& v) {
        const FlowModel::ForwardResult r = model.model_forward(devectorize(v, 1, 4, 4));
        return vectorize(r.latents.latents[0]);
    };
    Rng rx(3);
    Tensor3 y(1, 4, 4);
    fill_uniform(y, rx);
    const double reported = model.model_forward(y).total_logdet;
    CHECK(std::abs(numerical_logdet(f, vectorize(y)) - reported) < 1e-6);
}

TEST_CASE("latent stack conserves elements across levels and splits") {
    ModelConfig cfg;
    cfg.levels = 2;
    cfg.steps = 2;
    cfg.hidden = 4;
    cfg.k = 2;
    cfg.channels = 4;
    cfg.height = 8;
    cfg.width = 8;
    FlowModel model(cfg);
    Rng rng(4);
    model.randomize(rng, 0.2);

    const auto shapes = model.latent_shapes();
    REQUIRE(shapes.size() == 2);
    CHECK(shapes[0] == std::array<int, 3>{8, 4, 4});
    // The last level has no split, so its entire squeezed tensor is the final
    // latent: 8 kept channels squeeze to 32.
    CHECK(shapes[1] == std::array<int, 3>{32, 2, 2});

    Tensor3 y(4, 8, 8);
    fill_uniform(y, rng);
    const FlowModel::ForwardResult res = model.model_forward(y);
    REQUIRE(res.latents.latents.size() == 2);
    for (std::size_t s = 0; s < shapes.size(); ++s) {
        CHECK(res.latents.latents[s].channels() == shapes[s][0]);
        CHECK(res.latents.latents[s].height() == shapes[s][1]);
        CHECK(res.latents.latents[s].width() == shapes[s][2]);
    }
    CHECK(res.latents.total_elements() == 256);
}

TEST_CASE("log_prob agrees with the brute-force change-of-variables density") {
    // With the unconditional prior every latent is standard normal, so an
    // independent route is: stack all latents, sum their standard-normal
    // densities, and add the numerical log|det| of the full forward map.
    ModelConfig cfg = tiny_config();
    cfg.conditional_split_prior = false;
    FlowModel model(cfg);
    Rng rng(5);
    model.randomize(rng, 0.3);

    auto stacked = [&](const std::vector<double>& v) {
        const FlowModel::ForwardResult r = model.model_forward(devectorize(v, 1, 4, 4));
        std::vector<double> out;
        for (const Tensor3& z : r.latents.latents) {
            const std::vector<double> zz = vectorize(z);
            out.insert(out.end(), zz.begin(), zz.end());
        }
        return out;
    };
    for (int trial = 0; trial < 20; ++trial) {
        Tensor3 y(1, 4, 4);
        fill_uniform(y, rng);
        const FlowModel::ForwardResult res = model.model_forward(y);
        double logp = 0.0;
        for (const Tensor3& z : res.latents.latents) logp += gaussian_logprob(z);
        const double brute = logp + numerical_logdet(stacked, vectorize(y));
        CHECK(std::abs(model.log_prob(y) - brute) < 1e-5);
    }

    // Two levels, so the stack really concatenates a split latent.
    ModelConfig cfg2 = cfg;
    cfg2.levels = 2;
    cfg2.height = 8;
    cfg2.width = 8;
    cfg2.seed = 9;
    FlowModel deep(cfg2);
    deep.randomize(rng, 0.2);
    auto stacked2 = [&](const std::vector<double>& v) {
        const FlowModel::ForwardResult r = deep.model_forward(devectorize(v, 1, 8, 8));
        std::vector<double> out;
        for (const Tensor3& z : r.latents.latents) {
            const std::vector<double> zz = vectorize(z);
            out.insert(out.end(), zz.begin(), zz.end());
        }
        return out;
    };
    for (int trial = 0; trial < 3; ++trial) {
        Tensor3 y(1, 8, 8);
        fill_uniform(y, rng);
        const FlowModel::ForwardResult res = deep.model_forward(y);
        double logp = 0.0;
        for (const Tensor3& z : res.latents.latents) logp += gaussian_logprob(z);
        const double brute = logp + numerical_logdet(stacked2, vectorize(y));
        CHECK(std::abs(deep.log_prob(y) - brute) < 1e-5);
    }
}

TEST_CASE("sampling inverts the forward pass") {
    // Identity model: sample is exactly the unsqueezed standard-normal draw.
    ModelConfig cfg = tiny_config();
    cfg.identity_init = true;
    const FlowModel ident(cfg);
    Rng ra(11), rb(11);
    const Tensor3 x = ident.sample(ra, 1.0);
    Tensor3 z(4, 2, 2);
    for (double& v : z.values()) v = rb.normal();
    CHECK(max_abs_diff(x, unsqueeze(z)) == 0.0);

    // Tiny temperature collapses to the prior mean.
    Rng rc(12);
    CHECK(ident.sample(rc, 1e-12).max_abs() < 1e-11);
    Rng rd(13);
    CHECK_THROWS_AS(ident.sample(rd, 0.0), ArgumentError);

    // Randomized two-level model: decode(manual stack) then forward recovers
    // the stack, and reconstruct(sample) reproduces the sample.
    ModelConfig cfg2;
    cfg2.levels = 2;
    cfg2.steps = 2;
    cfg2.hidden = 4;
    cfg2.k = 3;
    cfg2.channels = 1;
    cfg2.height = 8;
    cfg2.width = 8;
    cfg2.seed = 21;
    FlowModel model(cfg2);
    Rng rng(14);
    model.randomize(rng, 0.2);

    LatentStack stack;
    for (const auto& s : model.latent_shapes()) {
        Tensor3 z2(s[0], s[1], s[2]);
        for (double& v : z2.values()) v = 0.5 * rng.normal();
        stack.latents.push_back(z2);
    }
    const Tensor3 decoded = model.decode(stack);
    const FlowModel::ForwardResult res = model.model_forward(decoded);
    REQUIRE(res.latents.latents.size() == stack.latents.size());
    for (std::size_t s = 0; s < stack.latents.size(); ++s)
        CHECK(max_abs_diff(res.latents.latents[s], stack.latents[s]) < 1e-7);

    Rng re(15);
    const Tensor3 drawn = model.sample(re, 0.8);
    CHECK(max_abs_diff(model.reconstruct(drawn), drawn) < 1e-7);
}

TEST_CASE("reconstruction is exact on many random inputs") {
    ModelConfig cfg;
    cfg.levels = 2;
    cfg.steps = 2;
    cfg.hidden = 4;
    cfg.k = 3;
    cfg.channels = 1;
    cfg.height = 8;
    cfg.width = 8;
    cfg.seed = 31;
    FlowModel model(cfg);
    Rng rng(16);
    model.randomize(rng, 0.25);
    double worst = 0.0;
    for (int trial = 0; trial < 30; ++trial) {
        Tensor3 y(1, 8, 8);
        fill_uniform(y, rng);
        worst = std::max(worst, max_abs_diff(model.reconstruct(y), y));
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("latent interpolation endpoints and identity midpoint") {
    ModelConfig cfg = tiny_config();
    FlowModel model(cfg);
    Rng rng(17);
    model.randomize(rng, 0.3);
    Tensor3 a(1, 4, 4), b(1, 4, 4);
    fill_uniform(a, rng);
    fill_uniform(b, rng);

    const std::vector<Tensor3> path = model.interpolate(a, b, 5);
    REQUIRE(path.size() == 5);
    CHECK(max_abs_diff(path.front(), model.reconstruct(a)) == 0.0);
    CHECK(max_abs_diff(path.back(), model.reconstruct(b)) == 0.0);
    CHECK_THROWS_AS(model.interpolate(a, b, 1), ArgumentError);

    // For the identity (permutation) model the path is pixelwise linear.
    ModelConfig icfg = tiny_config();
    icfg.identity_init = true;
    const FlowModel ident(icfg);
    const std::vector<Tensor3> ipath = ident.interpolate(a, b, 3);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            CHECK(ipath[1].at(0, i, j) ==
                  doctest::Approx(0.5 * (a.at(0, i, j) + b.at(0, i, j))).epsilon(1e-12));
}

TEST_CASE("config validation rejects malformed architectures") {
    ModelConfig cfg = tiny_config();
    cfg.levels = 0;
    CHECK_THROWS_AS(cfg.validate(), ArgumentError);
    cfg = tiny_config();
    cfg.steps = 0;
    CHECK_THROWS_AS(cfg.validate(), ArgumentError);
    cfg = tiny_config();
    cfg.hidden = 0;
    CHECK_THROWS_AS(cfg.validate(), ArgumentError);
    cfg = tiny_config();
    cfg.k = 0;
    CHECK_THROWS_AS(cfg.validate(), ArgumentError);
    cfg = tiny_config();
    cfg.height = 0;
    CHECK_THROWS_AS(cfg.validate(), DimensionError);
    cfg = tiny_config();
    cfg.dtype_bits = 16;
    CHECK_THROWS_AS(cfg.validate(), ArgumentError);
    cfg = tiny_config();
    cfg.levels = 2;
    cfg.height = 6;
    cfg.width = 8;
    CHECK_THROWS_AS(cfg.validate(), DimensionError);
    CHECK_THROWS_AS(FlowModel{cfg}, DimensionError);
    cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("parameter paths are stable, unique and fully scoped") {
    ModelConfig cfg;
    cfg.levels = 2;
    cfg.steps = 2;
    cfg.hidden = 4;
    cfg.k = 2;
    cfg.channels = 1;
    cfg.height = 8;
    cfg.width = 8;
    FlowModel model(cfg);

    std::set<std::string> names;
    std::size_t total = 0;
    model.visit_params([&](const ParamSlot& slot) {
        CHECK(names.insert(slot.name).second);  // no duplicates
        total += slot.len;
    });
    CHECK(names.count("l0/s0/invconv/kernel") == 1);
    CHECK(names.count("l0/s0/actnorm/scale") == 1);
    CHECK(names.count("l0/s0/actnorm/bias") == 1);
    CHECK(names.count("l0/s0/conv1x1/mat") == 1);
    CHECK(names.count("l0/s0/coupling/net/b3") == 1);
    CHECK(names.count("l0/s1/coupling/net/w1") == 1);
    CHECK(names.count("l0/split/prior_w") == 1);
    CHECK(names.count("l1/s1/invconv/kernel") == 1);
    CHECK(names.count("l1/split/prior_w") == 0);  // last level has no split
    CHECK(total > 0);
}

TEST_CASE("shape and finiteness guards") {
    ModelConfig cfg = tiny_config();
    FlowModel model(cfg);
    CHECK_THROWS_AS(model.model_forward(Tensor3(1, 4, 6)), DimensionError);
    CHECK_THROWS_AS(model.log_prob(Tensor3(2, 4, 4)), DimensionError);

    Tensor3 bad(1, 4, 4);
    bad.at(0, 1, 2) = std::nan("");
    CHECK_THROWS_AS(model.log_prob(bad), ArgumentError);

    LatentStack wrong_count;
    CHECK_THROWS_AS(model.decode(wrong_count), DimensionError);
    LatentStack wrong_shape;
    wrong_shape.latents.emplace_back(4, 2, 3);
    CHECK_THROWS_AS(model.decode(wrong_shape), DimensionError);
}

TEST_CASE("32-bit mode reconstructs within single precision") {
    ModelConfig cfg = tiny_config();
    cfg.dtype_bits = 32;
    cfg.k = 3;
    FlowModel model(cfg);
    Rng rng(18);
    model.randomize(rng, 0.2);
    Tensor3 y(1, 4, 4);
    fill_uniform(y, rng, 0.0, 1.0);
    CHECK(max_abs_diff(model.reconstruct(y), y) < 1e-5);
    CHECK(std::isfinite(model.log_prob(y)));
}

TEST_CASE("first_nonfinite_layer pinpoints a poisoned layer") {
    ModelConfig cfg = tiny_config();
    FlowModel model(cfg);
    Rng rng(19);
    model.randomize(rng, 0.2);
    Tensor3 y(1, 4, 4);
    fill_uniform(y, rng);
    CHECK(model.first_nonfinite_layer(y) == "");

    model.visit_params([&](const ParamSlot& slot) {
        if (slot.name == "l0/s0/actnorm/scale") slot.value[0] = std::nan("");
    });
    const std::string culprit = model.first_nonfinite_layer(y);
    CHECK(culprit.find("actnorm") != std::string::npos);

    Tensor3 bad(1, 4, 4);
    bad.at(0, 0, 0) = std::nan("");
    CHECK(model.first_nonfinite_layer(bad) == "input");
}
