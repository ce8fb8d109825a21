// invflow: normalizing-flow CLI with an exactly invertible convolution core.
// Subcommands: train, sample, reconstruct, interpolate, bench, oracle-check.
// Exit codes: 0 success, 1 usage/state error, 2 data/format error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "invflow/bench.hpp"
#include "invflow/checkpoint.hpp"
#include "invflow/data.hpp"
#include "invflow/dense_oracle.hpp"
#include "invflow/errors.hpp"
#include "invflow/image_io.hpp"
#include "invflow/inv_conv.hpp"
#include "invflow/kernels.hpp"
#include "invflow/model.hpp"
#include "invflow/train.hpp"

namespace {

using namespace invflow;

void apply_simd_flag(const std::string& simd) {
    if (simd == "scalar")
        kernels::set_backend(kernels::Backend::Scalar);
    else if (simd == "avx2")
        kernels::set_backend(kernels::Backend::Avx2);
    else if (simd == "auto")
        kernels::set_backend(kernels::Backend::Auto);
    else
        throw ArgumentError("--simd must be scalar, avx2, or auto");
}

struct DataOptions {
    std::string spec = "synth:two-gaussians";
    int n_images = 256;
    int channels = 1, height = 8, width = 8;
    std::uint64_t seed = 0;
};

Dataset load_data(const DataOptions& opt) {
    const auto colon = opt.spec.find(':');
    const std::string kind = opt.spec.substr(0, colon);
    const std::string arg =
        colon == std::string::npos ? std::string() : opt.spec.substr(colon + 1);
    if (kind == "synth")
        return synth_dataset(arg, opt.n_images, opt.channels, opt.height, opt.width,
                             opt.seed);
    if (kind == "idx") return load_idx(arg);
    if (kind == "cifar") return load_cifar_bin(arg);
    throw ArgumentError("--data must be synth:two-gaussians, synth:checkerboard, "
                        "idx:PATH, or cifar:PATH");
}

/// Deterministic quantization-bin center, for reconstruct/interpolate inputs.
Tensor3 to_model_space(const Tensor3& img) {
    Tensor3 y = img;
    for (double& v : y.values()) v = (v + 0.5) / 256.0;
    return y;
}

void add_data_flags(CLI::App* cmd, DataOptions& opt) {
    cmd->add_option("--data", opt.spec,
                    "Dataset: synth:two-gaussians | synth:checkerboard | idx:PATH | "
                    "cifar:PATH");
    cmd->add_option("--n-images", opt.n_images, "Synthetic dataset size");
    cmd->add_option("--image-channels", opt.channels, "Synthetic image channels");
    cmd->add_option("--image-height", opt.height, "Synthetic image height");
    cmd->add_option("--image-width", opt.width, "Synthetic image width");
}

// ---------------------------------------------------------------------------

int cli_main(int argc, char** argv) {
    CLI::App app{"invflow: invertible-convolution normalizing flow"};
    app.require_subcommand(1);

    std::string simd = "auto";
    app.add_option("--simd", simd, "Kernel backend: scalar | avx2 | auto")
        ->envname("INVFLOW_SIMD");

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "Maximum-likelihood training");
    DataOptions train_data;
    add_data_flags(train_cmd, train_data);
    ModelConfig mc;
    TrainConfig tc;
    std::string coupling = "affine";
    std::string metrics_path, ckpt_path, resume_path;
    std::uint64_t seed = 0;
    train_cmd->add_option("--levels", mc.levels, "Flow levels (L)");
    train_cmd->add_option("--steps", mc.steps, "Steps per level (K)");
    train_cmd->add_option("--coupling", coupling, "affine | quad");
    train_cmd->add_option("--hidden", mc.hidden, "Coupling subnet width");
    train_cmd->add_option("--k", mc.k, "Invertible-conv kernel size");
    train_cmd->add_option("--epochs", tc.epochs, "Total epochs");
    train_cmd->add_option("--batch", tc.batch_size, "Batch size");
    train_cmd->add_option("--lr", tc.lr, "Learning rate");
    train_cmd->add_option("--clip", tc.clip_norm, "Gradient-clip max norm");
    train_cmd->add_option("--dtype", tc.dtype_bits, "32 or 64")
        ->check(CLI::IsMember({32, 64}));
    train_cmd->add_option("--seed", seed, "Seed (model init, shuffling, dequant)");
    train_cmd->add_option("--metrics", metrics_path,
                          "CSV sink: epoch,nll_nats,bpd,seconds per epoch");
    train_cmd->add_option("--checkpoint", ckpt_path, "Write checkpoint here at the end");
    train_cmd->add_option("--resume", resume_path, "Continue from this checkpoint");

    // ---- sample ----
    auto* sample_cmd = app.add_subcommand("sample", "Draw images from a checkpoint");
    std::string s_ckpt, s_out = "samples.pgm";
    int s_n = 1;
    double s_temp = 1.0;
    std::uint64_t s_seed = 0;
    sample_cmd->add_option("--checkpoint", s_ckpt, "Model checkpoint")->required();
    sample_cmd->add_option("--n", s_n, "Number of samples");
    sample_cmd->add_option("--temperature", s_temp, "Prior temperature");
    sample_cmd->add_option("--seed", s_seed, "Sampling seed");
    sample_cmd->add_option("--out", s_out, "Output image (PGM/PPM)");

    // ---- reconstruct ----
    auto* rec_cmd = app.add_subcommand("reconstruct",
                                       "Roundtrip data through the flow");
    DataOptions rec_data;
    add_data_flags(rec_cmd, rec_data);
    std::string r_ckpt, r_out;
    int r_n = 4;
    rec_cmd->add_option("--checkpoint", r_ckpt, "Model checkpoint")->required();
    rec_cmd->add_option("--n", r_n, "Images to roundtrip");
    rec_cmd->add_option("--out", r_out, "Montage (originals above reconstructions)");

    // ---- interpolate ----
    auto* itp_cmd = app.add_subcommand("interpolate",
                                       "Latent-space interpolation between two images");
    DataOptions itp_data;
    add_data_flags(itp_cmd, itp_data);
    std::string i_ckpt, i_out = "interp.pgm";
    int i_a = 0, i_b = 1, i_steps = 8;
    itp_cmd->add_option("--checkpoint", i_ckpt, "Model checkpoint")->required();
    itp_cmd->add_option("--index-a", i_a, "First image index");
    itp_cmd->add_option("--index-b", i_b, "Second image index");
    itp_cmd->add_option("--steps", i_steps, "Interpolation steps (>= 2)");
    itp_cmd->add_option("--out", i_out, "Montage of decoded frames");

    // ---- bench ----
    auto* bench_cmd = app.add_subcommand("bench", "Inverse/sampling benchmarks");
    std::string b_mode = "inverse", b_csv;
    std::vector<int> b_sizes{8, 16, 32};
    std::vector<int> b_ks{1, 2, 3};
    std::vector<int> b_channels{1};
    int b_repeats = 5, b_threads = 0, b_hidden = 16;
    bench_cmd->add_option("--mode", b_mode, "inverse | sampling");
    bench_cmd->add_option("--sizes", b_sizes, "Spatial sides m (m x m inputs)");
    bench_cmd->add_option("--ks", b_ks, "Kernel sizes");
    bench_cmd->add_option("--channels", b_channels, "Channel counts");
    bench_cmd->add_option("--repeats", b_repeats, "Timed repeats (median reported)");
    bench_cmd->add_option("--threads", b_threads,
                          "Lanes for parallel-diag (0 = INVFLOW_THREADS or 1)");
    bench_cmd->add_option("--hidden", b_hidden, "Subnet width for sampling mode");
    bench_cmd->add_option("--csv", b_csv, "Write the report CSV here");

    // ---- oracle-check ----
    auto* oracle_cmd = app.add_subcommand(
        "oracle-check", "Roundtrip + gradient self-check against tolerances");
    int o_trials = 200;
    std::uint64_t o_seed = 0;
    oracle_cmd->add_option("--trials", o_trials, "Roundtrip trials");
    oracle_cmd->add_option("--seed", o_seed, "Trial seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help or the usage message
        return code == 0 ? 0 : 1;
    }

    try {
        apply_simd_flag(simd);

        if (*train_cmd) {
            train_data.seed = seed + 1;  // dataset stream distinct from training
            const Dataset data = load_data(train_data);
            if (data.images.empty()) throw ArgumentError("train: dataset is empty");
            mc.coupling = coupling == "quad" ? CouplingKind::quad : CouplingKind::affine;
            if (coupling != "affine" && coupling != "quad")
                throw ArgumentError("--coupling must be affine or quad");
            mc.channels = data.images[0].channels();
            mc.height = data.images[0].height();
            mc.width = data.images[0].width();
            mc.seed = seed;
            mc.dtype_bits = tc.dtype_bits;
            tc.seed = seed;

            std::optional<FlowModel> model;
            TrainerState state;
            if (!resume_path.empty()) {
                LoadedCheckpoint lc = load_checkpoint(resume_path);
                model.emplace(std::move(lc.model));
                state = std::move(lc.state);
            } else {
                model.emplace(mc);
                state = make_trainer_state(*model, tc);
            }

            std::ofstream metrics;
            if (!metrics_path.empty()) {
                metrics.open(metrics_path, std::ios::trunc);
                if (!metrics)
                    throw FormatError("cannot open metrics file: " + metrics_path);
            }
            const ProgressSink sink = [&](const EpochMetrics& em) {
                std::ostringstream line;
                line.precision(12);
                line << em.epoch << "," << em.nll_nats << "," << em.bpd << ","
                     << em.seconds;
                std::cout << "epoch " << em.epoch << ": nll " << em.nll_nats
                          << " nats, " << em.bpd << " bpd, " << em.seconds << " s\n";
                if (metrics) metrics << line.str() << "\n";
            };
            train(*model, data, tc, state, sink);
            if (metrics) metrics.flush();
            if (!ckpt_path.empty()) {
                save_checkpoint(*model, state, ckpt_path);
                std::cout << "checkpoint written to " << ckpt_path << "\n";
            }
            return 0;
        }

        if (*sample_cmd) {
            LoadedCheckpoint lc = load_checkpoint(s_ckpt);
            if (s_n < 1) throw ArgumentError("sample: --n must be >= 1");
            Rng rng(s_seed);
            std::vector<Tensor3> frames;
            for (int i = 0; i < s_n; ++i) frames.push_back(lc.model.sample(rng, s_temp));
            write_image(s_n == 1 ? frames[0] : montage(frames), s_out);
            std::cout << "wrote " << s_n << " sample(s) to " << s_out << "\n";
            return 0;
        }

        if (*rec_cmd) {
            LoadedCheckpoint lc = load_checkpoint(r_ckpt);
            const Dataset data = load_data(rec_data);
            if (data.images.empty()) throw ArgumentError("reconstruct: dataset is empty");
            const int n = std::min<int>(r_n, static_cast<int>(data.images.size()));
            std::vector<Tensor3> panels;
            double max_err = 0.0;
            for (int i = 0; i < n; ++i) {
                const Tensor3 y = to_model_space(data.images[i]);
                const Tensor3 recon = lc.model.reconstruct(y);
                for (std::size_t e = 0; e < y.size(); ++e)
                    max_err = std::max(max_err,
                                       std::abs(y.values()[e] - recon.values()[e]));
                panels.push_back(y);
                panels.push_back(recon);
            }
            std::cout.precision(3);
            std::cout << "max reconstruction error over " << n << " image(s): "
                      << std::scientific << max_err << "\n";
            if (!r_out.empty()) {
                std::vector<Tensor3> grid;
                for (int i = 0; i < n; ++i) grid.push_back(panels[2 * i]);      // originals
                for (int i = 0; i < n; ++i) grid.push_back(panels[2 * i + 1]);  // recons
                write_image(montage(grid, n), r_out);
                std::cout << "montage written to " << r_out << "\n";
            }
            return 0;
        }

        if (*itp_cmd) {
            LoadedCheckpoint lc = load_checkpoint(i_ckpt);
            const Dataset data = load_data(itp_data);
            const int n = static_cast<int>(data.images.size());
            if (i_a < 0 || i_a >= n || i_b < 0 || i_b >= n)
                throw ArgumentError("interpolate: image index out of range");
            const std::vector<Tensor3> frames =
                lc.model.interpolate(to_model_space(data.images[i_a]),
                                     to_model_space(data.images[i_b]), i_steps);
            write_image(montage(frames, i_steps), i_out);
            std::cout << "wrote " << i_steps << " frames to " << i_out << "\n";
            return 0;
        }

        if (*bench_cmd) {
            BenchReport report;
            if (b_mode == "inverse") {
                report = bench_inverse(b_sizes, b_ks, b_channels, b_repeats, b_threads);
            } else if (b_mode == "sampling") {
                std::vector<ModelConfig> cfgs;
                ModelConfig a;
                a.levels = 1; a.steps = 1; a.k = 1; a.hidden = b_hidden;
                a.channels = 1; a.height = 8; a.width = 8; a.seed = 3;
                cfgs.push_back(a);
                ModelConfig b = a;
                b.levels = 2; b.steps = 2; b.k = 2; b.channels = 2;
                b.height = 16; b.width = 16; b.seed = 4;
                cfgs.push_back(b);
                ModelConfig c = b;
                c.steps = 4; c.k = 3; c.seed = 5;
                cfgs.push_back(c);
                report = bench_sampling(cfgs, b_repeats);
                for (std::size_t i = 0; i + 1 < report.cases.size(); i += 2) {
                    const BenchCase& st = report.cases[i];
                    const BenchCase& ft = report.cases[i + 1];
                    std::cout << st.name << ": ST " << st.median_s << " s, FT "
                              << ft.median_s << " s -> "
                              << (st.median_s < ft.median_s ? "ST < FT" : "ST >= FT")
                              << "\n";
                }
            } else {
                throw ArgumentError("--mode must be inverse or sampling");
            }
            std::cout << report.to_table();
            if (!b_csv.empty()) {
                std::ofstream f(b_csv, std::ios::trunc);
                if (!f) throw FormatError("cannot open CSV file: " + b_csv);
                f << report.to_csv();
            }
            return 0;
        }

        if (*oracle_cmd) {
            if (o_trials < 1) throw ArgumentError("oracle-check: trials must be >= 1");
            Rng rng(o_seed + 99);
            const int cs[] = {1, 2, 4};
            const int ks[] = {1, 2, 3};
            const int ms[] = {1, 2, 4, 8, 16};
            double max_round = 0.0;
            for (int t = 0; t < o_trials; ++t) {
                const int c = cs[rng.below(3)];
                const int k = ks[rng.below(3)];
                const int m = ms[rng.below(5)];
                const MaskedKernel kernel = MaskedKernel::random(c, k, rng);
                Tensor3 x(c, m, m);
                for (double& v : x.values()) v = rng.uniform(-1.0, 1.0);
                const Tensor3 back = conv_inverse(conv_forward(x, kernel), kernel);
                double err = 0.0;
                for (std::size_t e = 0; e < x.size(); ++e)
                    err = std::max(err, std::abs(back.values()[e] - x.values()[e]));
                max_round = std::max(max_round, err / std::max(1.0, x.max_abs()));
            }

            const int grad_trials = std::max(5, o_trials / 10);
            const double eps = 1e-5;
            double max_grad = 0.0;
            for (int t = 0; t < grad_trials; ++t) {
                const int c = cs[rng.below(3)];
                const int k = ks[rng.below(3)];
                const int m = 2 + static_cast<int>(rng.below(5));
                MaskedKernel kernel = MaskedKernel::random(c, k, rng);
                Tensor3 y(c, m, m), g(c, m, m);
                for (double& v : y.values()) v = rng.uniform(-1.0, 1.0);
                for (double& v : g.values()) v = rng.uniform(-1.0, 1.0);
                const auto loss = [&](const Tensor3& yy, const MaskedKernel& kk) {
                    const Tensor3 x = conv_inverse(yy, kk);
                    double s = 0.0;
                    for (std::size_t e = 0; e < x.size(); ++e)
                        s += g.values()[e] * x.values()[e];
                    return s;
                };
                const Tensor3 gy = grad_input(g, kernel);
                for (int probe = 0; probe < 5; ++probe) {
                    const std::size_t e = rng.below(y.size());
                    Tensor3 yp = y, ym = y;
                    yp.values()[e] += eps;
                    ym.values()[e] -= eps;
                    const double fd = (loss(yp, kernel) - loss(ym, kernel)) / (2 * eps);
                    const double an = gy.values()[e];
                    max_grad = std::max(
                        max_grad, std::abs(an - fd) / std::max({1.0, std::abs(an),
                                                                std::abs(fd)}));
                }
                const ConvKernel gw = grad_weights(g, y, kernel);
                for (int probe = 0; probe < 5; ++probe) {
                    const int a = static_cast<int>(rng.below(c));
                    const int b = static_cast<int>(rng.below(c));
                    const int ki = static_cast<int>(rng.below(k));
                    const int kj = static_cast<int>(rng.below(k));
                    if (!kernel.free_entry(a, b, ki, kj)) continue;
                    MaskedKernel kp = kernel, km = kernel;
                    kp.set(a, b, ki, kj, kernel.at(a, b, ki, kj) + eps);
                    km.set(a, b, ki, kj, kernel.at(a, b, ki, kj) - eps);
                    const double fd = (loss(y, kp) - loss(y, km)) / (2 * eps);
                    const double an = gw.at(a, b, ki, kj);
                    max_grad = std::max(
                        max_grad, std::abs(an - fd) / std::max({1.0, std::abs(an),
                                                                std::abs(fd)}));
                }
            }

            std::cout.precision(3);
            std::cout << std::scientific;
            std::cout << "max roundtrip relative error: " << max_round
                      << " (tolerance 1e-09)\n";
            std::cout << "max gradient relative error:  " << max_grad
                      << " (tolerance 1e-04)\n";
            const bool ok = max_round < 1e-9 && max_grad < 1e-4;
            std::cout << (ok ? "oracle-check PASS\n" : "oracle-check FAIL\n");
            return ok ? 0 : 1;
        }

        return 0;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) { return cli_main(argc, argv); }
