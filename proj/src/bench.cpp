#include "invflow/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>

#include "invflow/dense_oracle.hpp"
#include "invflow/errors.hpp"
#include "invflow/inv_conv.hpp"
#include "invflow/threads.hpp"

namespace invflow {

namespace {

double time_once(const std::function<void()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count();
}

double median_of(std::vector<double> times) {
    std::sort(times.begin(), times.end());
    const std::size_t mid = times.size() / 2;
    return times.size() % 2 == 1 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
}

double median_time(const std::function<void()>& fn, int repeats) {
    for (int i = 0; i < 2; ++i) fn();  // warm-up
    std::vector<double> times(repeats);
    for (int i = 0; i < repeats; ++i) times[i] = time_once(fn);
    return median_of(times);
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

std::uint64_t checksum_values(const std::vector<double>& values) {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (double v : values) {
        const auto q = static_cast<std::int64_t>(std::llround(v * 1e6));
        auto u = static_cast<std::uint64_t>(q);
        for (int byte = 0; byte < 8; ++byte) {
            h ^= (u >> (8 * byte)) & 0xffULL;
            h *= 1099511628211ULL;
        }
    }
    return h;
}

BenchReport bench_inverse(const std::vector<int>& sizes,
                          const std::vector<int>& kernel_sizes,
                          const std::vector<int>& channels, int repeats,
                          int threads) {
    if (repeats < 1) throw ArgumentError("bench: repeats must be >= 1");
    BenchReport report;
    ThreadPool pool(ThreadPool::resolve_lanes(threads));
    Rng rng(20240901);
    for (int m : sizes)
        for (int k : kernel_sizes)
            for (int c : channels) {
                const MaskedKernel kernel = MaskedKernel::random(c, k, rng, 0.4);
                Tensor3 y(c, m, m);
                for (double& v : y.values()) v = rng.uniform(-1.0, 1.0);

                std::ostringstream label;
                label << "inv-m" << m << "-k" << k << "-c" << c;
                const long long stages = count_sequential_stages(m, m);

                const Tensor3 reference = conv_inverse(y, kernel);
                const std::uint64_t ref_sum = checksum_values(reference.values());

                BenchCase base;
                base.name = label.str();
                base.m = m;
                base.k = k;
                base.c = c;
                base.stages = stages;

                // dense-lu: assemble once, factorize + solve inside the timed
                // region (that is the baseline cost the wavefront replaces).
                BenchCase dense = base;
                const std::size_t n = static_cast<std::size_t>(c) * m * m;
                if (n > 4096) {
                    dense.method = "skipped(dense)";
                    dense.skipped = true;
                } else {
                    const DenseOperator op(kernel, m, m);
                    const std::vector<double> rhs = vectorize(y);
                    const std::vector<double> dx = op.solve(rhs);
                    if (max_abs_diff(dx, reference.values()) >= 1e-9)
                        throw StateError("bench: dense solve disagrees with wavefront");
                    dense.method = "dense-lu";
                    dense.checksum = checksum_values(dx);
                    std::vector<double> sink;
                    dense.median_s =
                        median_time([&] { sink = op.solve(rhs); }, repeats);
                }
                report.cases.push_back(dense);

                BenchCase seq = base;
                seq.method = "sequential-diag";
                Tensor3 sx = reference;
                seq.median_s = median_time([&] { sx = conv_inverse(y, kernel); }, repeats);
                seq.checksum = checksum_values(sx.values());
                if (seq.checksum != ref_sum)
                    throw StateError("bench: sequential checksum mismatch");
                report.cases.push_back(seq);

                BenchCase par = base;
                par.method = "parallel-diag";
                Tensor3 px = reference;
                par.median_s =
                    median_time([&] { px = conv_inverse_parallel(y, kernel, pool); },
                                repeats);
                par.checksum = checksum_values(px.values());
                if (par.checksum != ref_sum)
                    throw StateError("bench: parallel checksum mismatch");
                report.cases.push_back(par);
            }
    return report;
}

BenchReport bench_sampling(const std::vector<ModelConfig>& configs, int repeats) {
    if (repeats < 1) throw ArgumentError("bench: repeats must be >= 1");
    BenchReport report;
    constexpr int kBatch = 4;
    for (const ModelConfig& cfg : configs) {
        FlowModel model(cfg);
        Rng rng(cfg.seed + 17);
        model.randomize(rng, 0.1);

        std::vector<Tensor3> batch;
        for (int i = 0; i < kBatch; ++i) {
            Tensor3 x(cfg.channels, cfg.height, cfg.width);
            for (double& v : x.values()) v = rng.uniform(0.0, 1.0);
            batch.push_back(std::move(x));
        }
        std::vector<LatentStack> stacks;
        for (const Tensor3& x : batch) stacks.push_back(model.model_forward(x).latents);

        std::ostringstream label;
        label << "sample-L" << cfg.levels << "-K" << cfg.steps << "-c" << cfg.channels
              << "-" << cfg.height << "x" << cfg.width << "-k" << cfg.k;

        BenchCase base;
        base.name = label.str();
        base.m = cfg.height;
        base.k = cfg.k;
        base.c = cfg.channels;
        base.stages = count_sequential_stages(cfg.height, cfg.width);

        BenchCase st = base;
        st.method = "sampling-dir";
        BenchCase ft = base;
        ft.method = "training-dir";
        std::vector<double> sink_st, sink_ft;
        const auto run_st = [&] {
            for (const LatentStack& s : stacks) sink_st = model.decode(s).values();
        };
        const auto run_ft = [&] {
            for (const Tensor3& x : batch)
                sink_ft = model.model_forward(x).latents.latents.back().values();
        };
        // Interleave the two directions per repeat so slow drifts in machine
        // load (turbo, steal time) land on both medians equally.
        for (int i = 0; i < 2; ++i) {
            run_st();
            run_ft();
        }
        std::vector<double> times_st(repeats), times_ft(repeats);
        for (int i = 0; i < repeats; ++i) {
            times_st[i] = time_once(run_st);
            times_ft[i] = time_once(run_ft);
        }
        st.median_s = median_of(times_st);
        st.checksum = checksum_values(sink_st);
        report.cases.push_back(st);
        ft.median_s = median_of(times_ft);
        ft.checksum = checksum_values(sink_ft);
        report.cases.push_back(ft);
    }
    return report;
}

std::string BenchReport::to_csv() const {
    std::ostringstream out;
    out << "case,m,k,C,method,median_s,checksum\n";
    for (const BenchCase& c : cases) {
        out << c.name << "," << c.m << "," << c.k << "," << c.c << "," << c.method
            << ",";
        out.precision(9);
        out << (c.skipped ? 0.0 : c.median_s) << "," << c.checksum << "\n";
    }
    return out.str();
}

std::string BenchReport::to_table() const {
    std::ostringstream out;
    out << "case                     method           median_s     stages  checksum\n";
    for (const BenchCase& c : cases) {
        out.setf(std::ios::left);
        out.width(25);
        out << c.name;
        out.width(17);
        out << c.method;
        out.unsetf(std::ios::left);
        out.precision(6);
        out.setf(std::ios::fixed);
        out.width(10);
        if (c.skipped)
            out << "-";
        else
            out << c.median_s;
        out.unsetf(std::ios::fixed);
        out.width(9);
        out << c.stages << "  ";
        out << std::hex << c.checksum << std::dec << "\n";
    }
    // Per-shape speedups of the wavefront over dense LU.
    for (std::size_t i = 0; i + 1 < cases.size(); ++i) {
        if (cases[i].method != "dense-lu") continue;
        for (std::size_t j = i + 1;
             j < cases.size() && cases[j].name == cases[i].name; ++j) {
            if (cases[j].method != "sequential-diag" || cases[j].median_s <= 0.0)
                continue;
            out << cases[i].name << ": sequential-diag speedup over dense-lu = ";
            out.precision(1);
            out.setf(std::ios::fixed);
            out << cases[i].median_s / cases[j].median_s << "x\n";
            out.unsetf(std::ios::fixed);
        }
    }
    return out.str();
}

}  // namespace invflow
