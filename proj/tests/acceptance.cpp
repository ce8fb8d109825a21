// Acceptance suite: ten independent checks (A1-A10), one PASS/FAIL line each.
// Exit status is the number of failing checks.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "invflow/bench.hpp"
#include "invflow/checkpoint.hpp"
#include "invflow/data.hpp"
#include "invflow/dense_oracle.hpp"
#include "invflow/errors.hpp"
#include "invflow/inv_conv.hpp"
#include "invflow/layers.hpp"
#include "invflow/model.hpp"
#include "invflow/rng.hpp"
#include "invflow/tensor.hpp"
#include "invflow/train.hpp"
#include "test_util.hpp"

using namespace invflow;
using namespace testutil;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* format, ...) {
    char buf[512];
    va_list args;
    va_start(args, format);
    std::vsnprintf(buf, sizeof(buf), format, args);
    va_end(args);
    return buf;
}

std::vector<double> dump_params(FlowModel& model) {
    std::vector<double> out;
    model.visit_params([&](const ParamSlot& slot) {
        out.insert(out.end(), slot.value, slot.value + slot.len);
    });
    return out;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

// ---------------------------------------------------------------------------

Outcome a1_roundtrip() {
    Rng rng(101);
    const int cs[] = {1, 2, 4}, ks[] = {1, 2, 3}, ms[] = {1, 2, 4, 8, 16};
    double worst = 0.0;
    for (int trial = 0; trial < 500; ++trial) {
        const int c = cs[rng.below(3)], k = ks[rng.below(3)], m = ms[rng.below(5)];
        const MaskedKernel kernel = MaskedKernel::random(c, k, rng);
        Tensor3 x(c, m, m);
        fill_uniform(x, rng);
        const Tensor3 back = conv_inverse(conv_forward(x, kernel), kernel);
        worst = std::max(worst, max_abs_diff(back, x) / std::max(1.0, x.max_abs()));
    }
    return {worst < 1e-9, fmt("500 random roundtrips, max relative error %.2e", worst)};
}

Outcome a2_dense_equivalence() {
    Rng rng(102);
    double worst = 0.0;
    int cases = 0, max_n = 0;
    auto one = [&](int c, int k, int m) {
        const MaskedKernel kernel = MaskedKernel::random(c, k, rng);
        const DenseOperator op(kernel, m, m);
        if (op.above_diagonal_mass() != 0.0 || op.unit_diagonal_error() != 0.0)
            throw StateError("dense operator is not exactly unit lower triangular");
        Tensor3 x(c, m, m), y(c, m, m);
        fill_uniform(x, rng);
        fill_uniform(y, rng);
        // Relative to the result magnitude: back-substitution solutions can
        // grow geometrically with grid distance, so the scale is not O(1).
        const Tensor3 fwd = conv_forward(x, kernel);
        const Tensor3 inv = conv_inverse(y, kernel);
        worst = std::max(worst, max_abs_diff(op.apply(vectorize(x)), vectorize(fwd)) /
                                    std::max(1.0, fwd.max_abs()));
        worst = std::max(worst, max_abs_diff(op.solve(vectorize(y)), vectorize(inv)) /
                                    std::max(1.0, inv.max_abs()));
        ++cases;
        max_n = std::max(max_n, op.n());
    };
    for (const int c : {1, 2, 4})
        for (const int k : {1, 2, 3})
            for (const int m : {2, 4, 8, 16}) one(c, k, m);
    one(1, 3, 64);  // n = 4096, the capacity limit
    return {worst < 1e-9,
            fmt("%d cases up to n=%d, exact triangularity, max error %.2e", cases,
                max_n, worst)};
}

Outcome a3_determinant_theorem() {
    Rng rng(103);
    double worst = 0.0;
    int cases = 0;
    for (const double wv : {0.5, 1.0, 2.0})
        for (const int k : {1, 2, 3})
            for (int h = 1; h <= 6; ++h)
                for (int w = 1; w <= 6; ++w) {
                    MaskedKernel kernel = MaskedKernel::random(1, k, rng, 0.3);
                    kernel.set(0, 0, k - 1, k - 1, wv);  // relaxed diagonal
                    const double det = DenseOperator(kernel, h, w).determinant();
                    const double want = std::pow(wv, h * w);
                    worst = std::max(worst, std::abs(det - want) /
                                                std::max(1.0, std::abs(want)));
                    ++cases;
                }
    return {worst < 1e-9,
            fmt("%d relaxed kernels, det == w^(H*W) within %.2e", cases, worst)};
}

Outcome a4_gradients() {
    Rng rng(104);
    const double eps = 1e-5;
    double worst = 0.0;
    int instances = 0;
    for (int trial = 0; trial < 60; ++trial) {
        const int c = 1 + static_cast<int>(rng.below(4));
        const int k = 1 + static_cast<int>(rng.below(3));
        const int h = 2 + static_cast<int>(rng.below(4));
        const int w = 2 + static_cast<int>(rng.below(4));
        const MaskedKernel kernel = MaskedKernel::random(c, k, rng);
        Tensor3 y(c, h, w), r(c, h, w);
        fill_uniform(y, rng);
        fill_uniform(r, rng);
        auto loss = [&](const Tensor3& yy, const MaskedKernel& kk) {
            const Tensor3 x = conv_inverse(yy, kk);
            double acc = 0.0;
            for (std::size_t e = 0; e < x.size(); ++e)
                acc += r.values()[e] * x.values()[e];
            return acc;
        };
        const Tensor3 gin = grad_input(r, kernel);
        const ConvKernel gw = grad_weights(r, y, kernel);
        for (int probe = 0; probe < 4; ++probe) {
            const std::size_t e = rng.below(y.size());
            Tensor3 yp = y, ym = y;
            yp.values()[e] += eps;
            ym.values()[e] -= eps;
            const double fd = (loss(yp, kernel) - loss(ym, kernel)) / (2 * eps);
            worst = std::max(worst, rel_err(gin.values()[e], fd));
        }
        for (int probe = 0; probe < 4; ++probe) {
            const int a = static_cast<int>(rng.below(c));
            const int b = static_cast<int>(rng.below(c));
            const int ki = static_cast<int>(rng.below(k));
            const int kj = static_cast<int>(rng.below(k));
            if (!kernel.free_entry(a, b, ki, kj)) continue;
            MaskedKernel kp = kernel, km = kernel;
            kp.set(a, b, ki, kj, kernel.at(a, b, ki, kj) + eps);
            km.set(a, b, ki, kj, kernel.at(a, b, ki, kj) - eps);
            const double fd = (loss(y, kp) - loss(y, km)) / (2 * eps);
            worst = std::max(worst, rel_err(gw.at(a, b, ki, kj), fd));
        }
        ++instances;
    }
    if (worst >= 1e-4)
        return {false,
                fmt("kernel gradient FD mismatch %.2e on %d instances", worst, instances)};

    // End-to-end: directional derivative of the NLL through the whole model.
    ModelConfig mc;
    mc.levels = 1;
    mc.steps = 1;
    mc.hidden = 4;
    mc.k = 3;
    mc.channels = 1;
    mc.height = 4;
    mc.width = 4;
    mc.seed = 5;
    FlowModel model(mc);
    model.randomize(rng, 0.25);
    Tensor3 y(1, 4, 4);
    fill_uniform(y, rng, 0.1, 0.9);

    std::vector<double*> values;
    std::vector<MaskedKernel*> masks;
    std::vector<double> direction, grads;
    model.zero_grads();
    const double nll0 = model.forward_backward(y, 1.0);
    model.visit_params([&](const ParamSlot& slot) {
        for (std::size_t e = 0; e < slot.len; ++e) {
            values.push_back(slot.value + e);
            direction.push_back(rng.uniform(-1.0, 1.0));
            grads.push_back(slot.grad[e]);
        }
        if (slot.masked) masks.push_back(slot.masked);
    });
    // Projection zeroes the structural coordinates of each step, consistent
    // with their exact-zero analytic gradients.
    auto nudge = [&](double t) {
        for (std::size_t e = 0; e < values.size(); ++e) *values[e] += t * direction[e];
        for (MaskedKernel* mk : masks) mk->project();
    };
    nudge(eps);
    const double np = -model.log_prob(y);
    nudge(-2 * eps);
    const double nm = -model.log_prob(y);
    nudge(eps);
    const double fd = (np - nm) / (2 * eps);
    double analytic = 0.0;
    for (std::size_t e = 0; e < grads.size(); ++e) analytic += grads[e] * direction[e];
    const double dir_err = rel_err(analytic, fd);
    const bool pass = dir_err < 1e-3 && std::isfinite(nll0);
    return {pass, fmt("%d kernel instances, max FD error %.2e; end-to-end directional "
                      "error %.2e",
                      instances, worst, dir_err)};
}

Outcome a5_layer_jacobians() {
    Rng rng(105);
    double worst = 0.0;
    auto check = [&](const Layer& layer, const Tensor3& x) {
        const int c = x.channels(), h = x.height(), w = x.width();
        auto f = [&](const std::vector<double>& v) {
            double ld = 0.0;
            return vectorize(layer.eval(devectorize(v, c, h, w), ld));
        };
        double reported = 0.0;
        layer.eval(x, reported);
        worst =
            std::max(worst, std::abs(numerical_logdet(f, vectorize(x)) - reported));
        return reported;
    };
    auto nudge = [&](Layer& layer, double amp) {
        layer.visit_params([&](const ParamSlot& slot) {
            for (std::size_t e = 0; e < slot.len; ++e)
                slot.value[e] += rng.uniform(-amp, amp);
            if (slot.masked) slot.masked->project();
        });
    };

    ActNorm an(2);
    an.force_identity();
    for (double& s : an.scale()) s = rng.uniform(0.5, 2.0);
    for (double& b : an.bias()) b = rng.uniform(-0.5, 0.5);
    Tensor3 x2(2, 4, 4);
    fill_uniform(x2, rng);
    check(an, x2);

    Conv1x1 mix(2);
    mix.init_random_rotation(rng);
    check(mix, x2);

    Rng seed_rng(1);
    AffineCoupling cpl(2, 4, false, seed_rng);
    nudge(cpl, 0.3);
    check(cpl, x2);

    QuadCoupling quad(4, 4, seed_rng);
    nudge(quad, 0.3);
    Tensor3 xq(4, 2, 2);
    fill_uniform(xq, rng);
    check(quad, xq);

    InvConvLayer iconv(2, 3);
    nudge(iconv, 0.4);
    const double iconv_ld = check(iconv, x2);
    if (iconv_ld != 0.0) return {false, "inv-conv logdet is not identically zero"};

    SqueezeLayer sq;
    Tensor3 xs(1, 4, 4);
    fill_uniform(xs, rng);
    check(sq, xs);

    // Composition additivity: the summed logdets of a stacked map must match
    // the numerical Jacobian of the whole composition.
    std::vector<Layer*> stack = {&iconv, &an, &mix, &cpl};
    auto composed = [&](const std::vector<double>& v) {
        Tensor3 t = devectorize(v, 2, 2, 2);
        double ld = 0.0;
        for (Layer* layer : stack) t = layer->eval(t, ld);
        return vectorize(t);
    };
    Tensor3 xcomp(2, 2, 2);
    fill_uniform(xcomp, rng);
    double total = 0.0;
    Tensor3 t = xcomp;
    for (Layer* layer : stack) t = layer->eval(t, total);
    const double comp_err =
        std::abs(numerical_logdet(composed, vectorize(xcomp)) - total);
    worst = std::max(worst, comp_err);

    return {worst < 1e-6,
            fmt("6 layer types + 4-layer composition, max |logdet error| %.2e", worst)};
}

Outcome a6_likelihood() {
    ModelConfig mc;
    mc.levels = 1;
    mc.steps = 1;
    mc.hidden = 4;
    mc.k = 2;
    mc.channels = 1;
    mc.height = 4;
    mc.width = 4;
    mc.conditional_split_prior = false;
    mc.seed = 7;
    FlowModel model(mc);
    Rng rng(106);
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
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        Tensor3 y(1, 4, 4);
        fill_uniform(y, rng);
        const FlowModel::ForwardResult res = model.model_forward(y);
        double logp = 0.0;
        for (const Tensor3& z : res.latents.latents) logp += gaussian_logprob(z);
        const double brute = logp + numerical_logdet(stacked, vectorize(y));
        worst = std::max(worst, std::abs(model.log_prob(y) - brute));
    }
    return {worst < 1e-5,
            fmt("20 inputs, max |log_prob - brute force| = %.2e nats", worst)};
}

Outcome a7_training() {
    const Dataset data = synth_dataset("two-gaussians", 64, 1, 8, 8, 7);
    ModelConfig mc;
    mc.levels = 1;
    mc.steps = 2;
    mc.hidden = 8;
    mc.k = 3;
    mc.channels = 1;
    mc.height = 8;
    mc.width = 8;
    mc.seed = 11;
    TrainConfig cfg;
    cfg.lr = 1e-3;
    cfg.batch_size = 16;
    cfg.epochs = 50;
    cfg.seed = 13;

    FlowModel model(mc);
    TrainerState state = make_trainer_state(model, cfg);
    const std::vector<EpochMetrics> hist = train(model, data, cfg, state);
    if (hist.size() != 50) return {false, "unexpected epoch count"};
    for (const EpochMetrics& em : hist)
        if (!std::isfinite(em.nll_nats)) return {false, "non-finite NLL"};
    const double initial = hist.front().nll_nats;
    const double final_nll = hist.back().nll_nats;

    FlowModel rerun(mc);
    TrainerState rerun_state = make_trainer_state(rerun, cfg);
    const std::vector<EpochMetrics> hist2 = train(rerun, data, cfg, rerun_state);
    const bool identical = hist2.back().nll_nats == final_nll &&
                           bitwise_equal(dump_params(model), dump_params(rerun));

    const bool improved = final_nll <= 0.8 * initial;
    return {improved && identical,
            fmt("NLL %.1f -> %.1f nats over 50 epochs (ratio %.2f, need <= 0.80); "
                "rerun bit-identical: %s",
                initial, final_nll, final_nll / initial, identical ? "yes" : "no")};
}

Outcome a8_stage_count() {
    Rng rng(108);
    for (const int m : {1, 2, 4, 8, 16, 32}) {
        const MaskedKernel kernel = MaskedKernel::random(2, 3, rng);
        Tensor3 y(2, m, m);
        fill_uniform(y, rng);
        kernels::SolveStats stats{};
        conv_inverse(y, kernel, &stats);
        if (stats.stages != 2 * m - 1)
            return {false, fmt("m=%d executed %lld stages, expected %d", m,
                               stats.stages, 2 * m - 1)};
        if (count_sequential_stages(m, m) != 2 * m - 1)
            return {false, fmt("count_sequential_stages(%d,%d) wrong", m, m)};
    }
    kernels::SolveStats stats{};
    const MaskedKernel kernel = MaskedKernel::random(1, 2, rng);
    Tensor3 y(1, 4, 7);
    fill_uniform(y, rng);
    conv_inverse(y, kernel, &stats);
    if (stats.stages != 10 || count_sequential_stages(4, 7) != 10)
        return {false, "non-square stage count wrong"};
    return {true, "m x m inverse executes exactly 2m-1 wavefront stages, m up to 32"};
}

Outcome a9_benchmark() {
    const BenchReport inv = bench_inverse({32}, {3}, {1}, 5);
    double dense_s = -1.0, seq_s = -1.0;
    for (const BenchCase& bc : inv.cases) {
        if (bc.skipped) continue;
        if (bc.method == "dense-lu") dense_s = bc.median_s;
        if (bc.method == "sequential-diag") seq_s = bc.median_s;
    }
    if (dense_s <= 0.0 || seq_s <= 0.0)
        return {false, "missing benchmark timings at m=32, k=3, C=1"};
    const double speedup = dense_s / seq_s;

    std::vector<ModelConfig> configs(3);
    configs[0].levels = 1;
    configs[0].steps = 1;
    configs[0].k = 1;
    configs[0].hidden = 16;
    configs[0].channels = 1;
    configs[0].height = 8;
    configs[0].width = 8;
    configs[0].seed = 3;
    configs[1] = configs[0];
    configs[1].levels = 2;
    configs[1].steps = 2;
    configs[1].k = 2;
    configs[1].channels = 2;
    configs[1].height = 16;
    configs[1].width = 16;
    configs[1].seed = 4;
    configs[2] = configs[1];
    configs[2].steps = 4;
    configs[2].k = 3;
    configs[2].seed = 5;
    const BenchReport smp = bench_sampling(configs, 9);
    bool order_ok = true;
    std::string times;
    for (int i = 1; i < 3; ++i) {  // the k >= 2 configs
        double st = -1.0, ft = -1.0;
        for (const BenchCase& bc : smp.cases) {
            if (bc.k != configs[i].k) continue;
            if (bc.method == "sampling-dir") st = bc.median_s;
            if (bc.method == "training-dir") ft = bc.median_s;
        }
        if (st <= 0.0 || ft <= 0.0 || st >= ft) order_ok = false;
        times += fmt("; k=%d ST %.3fms FT %.3fms", configs[i].k, st * 1e3, ft * 1e3);
    }
    return {speedup >= 10.0 && order_ok,
            fmt("sequential %.1fx faster than dense LU at m=32 (need >= 10)%s",
                speedup, times.c_str())};
}

Outcome a10_persistence() {
    // Bit-exact checkpoint roundtrip after real training.
    const Dataset data = synth_dataset("two-gaussians", 16, 1, 8, 8, 17);
    ModelConfig mc;
    mc.levels = 1;
    mc.steps = 1;
    mc.hidden = 4;
    mc.k = 3;
    mc.channels = 1;
    mc.height = 8;
    mc.width = 8;
    mc.seed = 19;
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.epochs = 2;
    cfg.seed = 23;

    FlowModel model(mc);
    TrainerState state = make_trainer_state(model, cfg);
    train(model, data, cfg, state);
    const std::string ck = "acceptance_ckpt.bin";
    save_checkpoint(model, state, ck);
    LoadedCheckpoint loaded = load_checkpoint(ck);
    const bool roundtrip =
        bitwise_equal(dump_params(model), dump_params(loaded.model)) &&
        bitwise_equal(state.adam.m, loaded.state.adam.m) &&
        bitwise_equal(state.adam.v, loaded.state.adam.v) &&
        state.adam.step == loaded.state.adam.step &&
        state.epoch == loaded.state.epoch &&
        state.rng.next_u64() == loaded.state.rng.next_u64();

    // Resume determinism: 2 epochs + 2 resumed == 4 straight.
    TrainConfig cfg4 = cfg;
    cfg4.epochs = 4;
    FlowModel ref(mc);
    TrainerState ref_state = make_trainer_state(ref, cfg4);
    train(ref, data, cfg4, ref_state);
    LoadedCheckpoint resumed = load_checkpoint(ck);
    train(resumed.model, data, cfg4, resumed.state);
    const bool resume_ok = bitwise_equal(dump_params(ref), dump_params(resumed.model));

    // Fuzzed truncation of every ingestion format: FormatError, never a crash.
    int fuzz_cases = 0, fuzz_ok = 0;
    auto expect_format_error = [&](const std::function<void()>& attempt,
                                   bool may_succeed) {
        ++fuzz_cases;
        try {
            attempt();
            if (may_succeed) ++fuzz_ok;
        } catch (const FormatError&) {
            ++fuzz_ok;
        } catch (...) {
            // counted as failure
        }
    };

    std::vector<std::uint8_t> idx = {0x00, 0x00, 0x08, 0x03, 0, 0, 0, 2,
                                     0,    0,    0,    2,    0, 0, 0, 2};
    for (int p = 0; p < 8; ++p) idx.push_back(static_cast<std::uint8_t>(p));
    const std::string tmp = "acceptance_fuzz.bin";
    for (std::size_t len = 0; len <= idx.size(); ++len) {
        write_bytes(tmp, std::vector<std::uint8_t>(idx.begin(), idx.begin() + len));
        expect_format_error([&] { load_idx(tmp); }, len == idx.size());
    }
    std::vector<std::uint8_t> cifar(2 * 3073, 1);
    for (const std::size_t len : {std::size_t(0), std::size_t(1), std::size_t(1000),
                                  std::size_t(3072), std::size_t(3073),
                                  std::size_t(3074), std::size_t(6145)}) {
        write_bytes(tmp, std::vector<std::uint8_t>(cifar.begin(), cifar.begin() + len));
        expect_format_error([&] { load_cifar_bin(tmp); }, len % 3073 == 0);
    }
    const std::vector<std::uint8_t> good = read_bytes(ck);
    for (std::size_t len = 0; len < good.size();
         len += (len < 64 ? 7 : good.size() / 23)) {
        write_bytes(tmp, std::vector<std::uint8_t>(good.begin(), good.begin() + len));
        expect_format_error([&] { load_checkpoint(tmp); }, false);
    }

    std::error_code ec;
    std::filesystem::remove(ck, ec);
    std::filesystem::remove(tmp, ec);
    const bool fuzz_pass = fuzz_cases == fuzz_ok;
    return {roundtrip && resume_ok && fuzz_pass,
            fmt("roundtrip bit-exact: %s; resume matches straight run: %s; "
                "%d/%d fuzz cases handled",
                roundtrip ? "yes" : "no", resume_ok ? "yes" : "no", fuzz_ok,
                fuzz_cases)};
}

}  // namespace

int main() {
    struct Entry {
        const char* id;
        Outcome (*fn)();
    };
    const Entry entries[] = {
        {"A1", a1_roundtrip},    {"A2", a2_dense_equivalence},
        {"A3", a3_determinant_theorem}, {"A4", a4_gradients},
        {"A5", a5_layer_jacobians},     {"A6", a6_likelihood},
        {"A7", a7_training},     {"A8", a8_stage_count},
        {"A9", a9_benchmark},    {"A10", a10_persistence},
    };
    int failures = 0;
    for (const Entry& entry : entries) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = entry.fn();
        } catch (const std::exception& e) {
            out = {false, std::string("unexpected exception: ") + e.what()};
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%-3s %s (%.1fs): %s\n", entry.id, out.pass ? "PASS" : "FAIL", secs,
                    out.detail.c_str());
        std::fflush(stdout);
        if (!out.pass) ++failures;
    }
    return failures;
}
