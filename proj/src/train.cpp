#include "invflow/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "invflow/errors.hpp"

namespace invflow {

void TrainConfig::validate() const {
    if (!(lr >= 0.0)) throw ArgumentError("train: lr must be >= 0");
    if (batch_size < 1) throw ArgumentError("train: batch size must be >= 1");
    if (epochs < 1) throw ArgumentError("train: epochs must be >= 1");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
        throw ArgumentError("train: betas must lie in (0, 1)");
    if (!(eps > 0.0)) throw ArgumentError("train: eps must be positive");
    if (!(clip_norm > 0.0)) throw ArgumentError("train: clip norm must be positive");
    if (dtype_bits != 32 && dtype_bits != 64)
        throw ArgumentError("train: dtype must be 32 or 64");
}

namespace {

std::size_t param_count(FlowModel& model) {
    std::size_t n = 0;
    model.visit_params([&](const ParamSlot& s) { n += s.len; });
    return n;
}

}  // namespace

TrainerState make_trainer_state(FlowModel& model, const TrainConfig& cfg) {
    TrainerState st;
    const std::size_t n = param_count(model);
    st.adam.m.assign(n, 0.0);
    st.adam.v.assign(n, 0.0);
    st.rng.reseed(cfg.seed);
    return st;
}

void adam_step(FlowModel& model, AdamState& state, const TrainConfig& cfg) {
    if (state.m.size() != param_count(model) || state.v.size() != state.m.size())
        throw StateError("adam: moment size does not match the parameter registry");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    std::size_t off = 0;
    model.visit_params([&](const ParamSlot& slot) {
        for (std::size_t i = 0; i < slot.len; ++i) {
            const double g = slot.grad[i];
            double& m = state.m[off + i];
            double& v = state.v[off + i];
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            slot.value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        off += slot.len;
        if (slot.masked) slot.masked->project();
    });
}

double clip_grad_norm(FlowModel& model, double max_norm) {
    double sq = 0.0;
    model.visit_params([&](const ParamSlot& slot) {
        for (std::size_t i = 0; i < slot.len; ++i) sq += slot.grad[i] * slot.grad[i];
    });
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        model.visit_params([&](const ParamSlot& slot) {
            for (std::size_t i = 0; i < slot.len; ++i) slot.grad[i] *= scale;
        });
    }
    return norm;
}

std::vector<EpochMetrics> train(FlowModel& model, const Dataset& data,
                                const TrainConfig& cfg, TrainerState& state,
                                const ProgressSink& sink) {
    cfg.validate();
    if (data.images.empty()) throw ArgumentError("train: dataset is empty");
    const ModelConfig& mc = model.config();
    for (const Tensor3& img : data.images)
        if (img.channels() != mc.channels || img.height() != mc.height ||
            img.width() != mc.width)
            throw DimensionError("train: dataset shape does not match the model");
    const std::size_t n = data.images.size();
    const std::size_t d =
        static_cast<std::size_t>(mc.channels) * mc.height * mc.width;

    if (!model.actnorm_ready()) {
        const std::size_t init_n = std::min<std::size_t>(n, 64);
        std::vector<Tensor3> init_batch;
        init_batch.reserve(init_n);
        for (std::size_t i = 0; i < init_n; ++i)
            init_batch.push_back(dequantize(data.images[i], state.rng));
        model.init_actnorm(init_batch);
    }

    std::vector<EpochMetrics> history;
    std::vector<std::size_t> order(n);
    for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[state.rng.below(i)]);

        double nll_sum = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t stop = std::min(n, start + cfg.batch_size);
            const double scale = 1.0 / static_cast<double>(stop - start);
            model.zero_grads();
            for (std::size_t i = start; i < stop; ++i) {
                const Tensor3 x = dequantize(data.images[order[i]], state.rng);
                const double nll = model.forward_backward(x, scale);
                if (!std::isfinite(nll)) {
                    std::ostringstream msg;
                    msg << "train: non-finite loss at epoch " << epoch
                        << "; first non-finite layer output: ";
                    const std::string where = model.first_nonfinite_layer(x);
                    msg << (where.empty() ? "(loss only)" : where);
                    throw StateError(msg.str());
                }
                nll_sum += nll;
            }
            clip_grad_norm(model, cfg.clip_norm);
            adam_step(model, state.adam, cfg);
        }

        const auto t1 = std::chrono::steady_clock::now();
        EpochMetrics em;
        em.epoch = epoch;
        em.nll_nats = nll_sum / static_cast<double>(n);
        em.bpd = bits_per_dim(em.nll_nats, d);
        em.seconds = std::chrono::duration<double>(t1 - t0).count();
        history.push_back(em);
        if (sink) sink(em);
        state.epoch = epoch + 1;
    }
    return history;
}

}  // namespace invflow
