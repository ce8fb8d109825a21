#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "invflow/data.hpp"
#include "invflow/model.hpp"
#include "invflow/rng.hpp"

namespace invflow {

struct TrainConfig {
    double lr = 1e-3;
    int batch_size = 32;
    int epochs = 1;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double clip_norm = 50.0;  // global-norm gradient clip
    std::uint64_t seed = 0;
    int dtype_bits = 64;

    void validate() const;
};

/// Adam moments laid out in parameter-registry order (concatenated slots).
struct AdamState {
    long long step = 0;
    std::vector<double> m, v;
};

/// Everything the training loop mutates besides the model itself; this is
/// what a checkpoint restores for exact resume.
struct TrainerState {
    AdamState adam;
    Rng rng{0};
    int epoch = 0;  // completed epochs
};

/// Fresh state: zero moments sized to the model's registry, rng seeded from
/// the config.
TrainerState make_trainer_state(FlowModel& model, const TrainConfig& cfg);

/// One bias-corrected Adam update over every registered parameter, followed
/// by masked-kernel re-projection. Structural entries receive exact-zero
/// gradients, so only free parameters move.
void adam_step(FlowModel& model, AdamState& state, const TrainConfig& cfg);

/// Scales all gradients so their global L2 norm is at most max_norm; returns
/// the pre-clip norm.
double clip_grad_norm(FlowModel& model, double max_norm);

struct EpochMetrics {
    int epoch;
    double nll_nats;  // mean over the epoch's examples
    double bpd;
    double seconds;
};

using ProgressSink = std::function<void(const EpochMetrics&)>;

/// Minimizes mean NLL with per-example backprop and Adam. Runs epochs
/// [state.epoch, cfg.epochs); initializes actnorm from the first images if
/// needed. Deterministic given (seed, state): a resumed run continues the
/// exact trajectory of an uninterrupted one. Throws StateError naming the
/// first non-finite layer if the loss goes NaN.
std::vector<EpochMetrics> train(FlowModel& model, const Dataset& data,
                                const TrainConfig& cfg, TrainerState& state,
                                const ProgressSink& sink = nullptr);

}  // namespace invflow
