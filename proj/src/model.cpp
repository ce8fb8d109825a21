#include "invflow/model.hpp"

#include <algorithm>
#include <cmath>

#include "invflow/errors.hpp"

namespace invflow {

namespace {

int pow2(int e) { return 1 << e; }

}  // namespace

void ModelConfig::validate() const {
    if (levels < 1) throw ArgumentError("config: levels must be >= 1");
    if (steps < 1) throw ArgumentError("config: steps must be >= 1");
    if (hidden < 1) throw ArgumentError("config: hidden must be >= 1");
    if (k < 1) throw ArgumentError("config: kernel size must be >= 1");
    if (channels < 1 || height < 1 || width < 1)
        throw DimensionError("config: input shape must be positive");
    if (dtype_bits != 32 && dtype_bits != 64)
        throw ArgumentError("config: dtype_bits must be 32 or 64");
    if (height % pow2(levels) != 0 || width % pow2(levels) != 0)
        throw DimensionError("config: H and W must be divisible by 2^levels");
    int c = channels;
    for (int l = 0; l < levels; ++l) {
        c *= 4;  // squeeze
        if (coupling == CouplingKind::affine && c % 2 != 0)
            throw DimensionError("config: affine coupling needs even channels at every level");
        if (coupling == CouplingKind::quad && c % 4 != 0)
            throw DimensionError("config: quad coupling needs channels divisible by 4");
        if (l < levels - 1) {
            if (c % 2 != 0) throw DimensionError("config: split needs even channels");
            c /= 2;
        }
    }
}

std::size_t LatentStack::total_elements() const {
    std::size_t n = 0;
    for (const Tensor3& t : latents) n += t.size();
    return n;
}

FlowModel::FlowModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const Precision prec = cfg_.dtype_bits == 32 ? Precision::f32 : Precision::f64;
    int c = cfg_.channels;
    levels_.resize(cfg_.levels);
    for (int l = 0; l < cfg_.levels; ++l) {
        Level& level = levels_[l];
        c *= 4;
        level.layers.push_back(std::make_unique<SqueezeLayer>());
        for (int s = 0; s < cfg_.steps; ++s) {
            level.layers.push_back(std::make_unique<InvConvLayer>(c, cfg_.k, prec));
            level.layers.push_back(std::make_unique<IdentityActivation>());
            auto act = std::make_unique<ActNorm>(c);
            if (cfg_.identity_init) act->force_identity();
            level.layers.push_back(std::move(act));
            auto mix = std::make_unique<Conv1x1>(c);
            if (!cfg_.identity_init) mix->init_random_rotation(rng);
            level.layers.push_back(std::move(mix));
            if (cfg_.coupling == CouplingKind::affine)
                level.layers.push_back(std::make_unique<AffineCoupling>(
                    c, cfg_.hidden, s % 2 == 1, rng, prec));
            else
                level.layers.push_back(
                    std::make_unique<QuadCoupling>(c, cfg_.hidden, rng, prec));
        }
        if (l < cfg_.levels - 1) {
            level.split = std::make_unique<SplitLayer>(
                c, cfg_.conditional_split_prior, rng, prec);
            c /= 2;
        }
    }
}

std::string FlowModel::layer_prefix(int level, std::size_t layer_idx) const {
    if (layer_idx == 0) return "l" + std::to_string(level) + "/squeeze";
    const std::size_t s = (layer_idx - 1) / 5;
    return "l" + std::to_string(level) + "/s" + std::to_string(s);
}

void FlowModel::check_input(const Tensor3& y) const {
    if (y.channels() != cfg_.channels || y.height() != cfg_.height ||
        y.width() != cfg_.width)
        throw DimensionError("model: input shape mismatch");
}

FlowModel::ForwardResult FlowModel::model_forward(const Tensor3& y) const {
    check_input(y);
    ForwardResult res;
    res.total_logdet = 0.0;
    Tensor3 x = y;
    for (const Level& level : levels_) {
        for (const auto& layer : level.layers) x = layer->eval(x, res.total_logdet);
        if (level.split) {
            SplitLayer::Out out = level.split->eval(x);
            res.latents.latents.push_back(std::move(out.z));
            x = std::move(out.kept);
        }
    }
    res.latents.latents.push_back(std::move(x));
    return res;
}

double FlowModel::log_prob(const Tensor3& y) const {
    check_input(y);
    if (!y.all_finite()) throw ArgumentError("log_prob: input is not finite");
    double logdet = 0.0, logp = 0.0;
    Tensor3 x = y;
    for (const Level& level : levels_) {
        for (const auto& layer : level.layers) x = layer->eval(x, logdet);
        if (level.split) {
            SplitLayer::Out out = level.split->eval(x);
            logp += out.logprob;
            x = std::move(out.kept);
        }
    }
    logp += gaussian_logprob(x);
    return logp + logdet;
}

Tensor3 FlowModel::decode(const LatentStack& latents) const {
    const auto shapes = latent_shapes();
    if (latents.latents.size() != shapes.size())
        throw DimensionError("decode: latent count mismatch");
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        const Tensor3& t = latents.latents[i];
        if (t.channels() != shapes[i][0] || t.height() != shapes[i][1] ||
            t.width() != shapes[i][2])
            throw DimensionError("decode: latent shape mismatch");
    }
    Tensor3 x = latents.latents.back();
    for (int l = cfg_.levels - 1; l >= 0; --l) {
        const Level& level = levels_[l];
        if (level.split) x = level.split->inverse(x, latents.latents[l]);
        for (auto it = level.layers.rbegin(); it != level.layers.rend(); ++it)
            x = (*it)->inverse(x);
    }
    return x;
}

Tensor3 FlowModel::sample(Rng& rng, double temperature) const {
    if (!(temperature > 0.0)) throw ArgumentError("sample: temperature must be > 0");
    const auto shapes = latent_shapes();
    const auto& fs = shapes.back();
    Tensor3 x(fs[0], fs[1], fs[2]);
    for (double& v : x.values()) v = temperature * rng.normal();
    for (int l = cfg_.levels - 1; l >= 0; --l) {
        const Level& level = levels_[l];
        if (level.split) {
            const Tensor3 z = level.split->sample_z(x, rng, temperature);
            x = level.split->inverse(x, z);
        }
        for (auto it = level.layers.rbegin(); it != level.layers.rend(); ++it)
            x = (*it)->inverse(x);
    }
    return x;
}

Tensor3 FlowModel::reconstruct(const Tensor3& y) const {
    return decode(model_forward(y).latents);
}

std::vector<Tensor3> FlowModel::interpolate(const Tensor3& y_a, const Tensor3& y_b,
                                            int steps) const {
    if (steps < 2) throw ArgumentError("interpolate: steps must be >= 2");
    const ForwardResult fa = model_forward(y_a);
    const ForwardResult fb = model_forward(y_b);
    std::vector<Tensor3> frames;
    frames.reserve(steps);
    for (int s = 0; s < steps; ++s) {
        const double t = static_cast<double>(s) / (steps - 1);
        LatentStack mix;
        for (std::size_t i = 0; i < fa.latents.latents.size(); ++i) {
            Tensor3 zi = fa.latents.latents[i];
            const Tensor3& zb = fb.latents.latents[i];
            for (std::size_t e = 0; e < zi.size(); ++e)
                zi.values()[e] = (1.0 - t) * zi.values()[e] + t * zb.values()[e];
            mix.latents.push_back(std::move(zi));
        }
        frames.push_back(decode(mix));
    }
    return frames;
}

double FlowModel::forward_backward(const Tensor3& y, double grad_scale) {
    check_input(y);
    double logdet = 0.0, logp = 0.0;
    Tensor3 x = y;
    for (Level& level : levels_) {
        for (const auto& layer : level.layers) x = layer->forward_train(x, logdet);
        if (level.split) {
            SplitLayer::Out out = level.split->forward_train(x);
            logp += out.logprob;
            x = std::move(out.kept);
        }
    }
    const double final_lp = gaussian_logprob(x);
    const double nll = -(logp + final_lp + logdet);

    // L = grad_scale * NLL. The final latent's standard-normal density pulls
    // dL/dz = grad_scale * z; every logdet/logprob term carries -grad_scale.
    const double coeff = -grad_scale;
    Tensor3 g = x;
    for (double& v : g.values()) v *= grad_scale;
    for (auto lit = levels_.rbegin(); lit != levels_.rend(); ++lit) {
        if (lit->split) g = lit->split->backward(g, coeff);
        for (auto it = lit->layers.rbegin(); it != lit->layers.rend(); ++it)
            g = (*it)->backward(g, coeff);
    }
    return nll;
}

void FlowModel::zero_grads() {
    visit_params([](const ParamSlot& s) { std::fill(s.grad, s.grad + s.len, 0.0); });
}

void FlowModel::visit_params(const ParamVisitor& visitor) {
    for (int l = 0; l < cfg_.levels; ++l) {
        Level& level = levels_[l];
        for (std::size_t i = 0; i < level.layers.size(); ++i) {
            const std::string prefix = layer_prefix(l, i);
            level.layers[i]->visit_params([&](const ParamSlot& slot) {
                ParamSlot named = slot;
                named.name = prefix + "/" + slot.name;
                visitor(named);
            });
        }
        if (level.split)
            level.split->visit_params("l" + std::to_string(l) + "/split", visitor);
    }
}

void FlowModel::init_actnorm(const std::vector<Tensor3>& batch) {
    if (batch.empty()) throw ArgumentError("init_actnorm: empty batch");
    for (const Tensor3& b : batch) check_input(b);
    std::vector<Tensor3> cur = batch;
    double scratch = 0.0;
    for (Level& level : levels_) {
        for (const auto& layer : level.layers) {
            if (auto* an = dynamic_cast<ActNorm*>(layer.get());
                an != nullptr && !an->initialized())
                an->init_from_batch(cur);
            for (Tensor3& t : cur) t = layer->eval(t, scratch);
        }
        if (level.split)
            for (Tensor3& t : cur) t = level.split->eval(t).kept;
    }
}

void FlowModel::force_actnorm_identity() {
    for (Level& level : levels_)
        for (const auto& layer : level.layers)
            if (auto* an = dynamic_cast<ActNorm*>(layer.get())) an->force_identity();
}

void FlowModel::mark_actnorm_initialized() {
    for (Level& level : levels_)
        for (const auto& layer : level.layers)
            if (auto* an = dynamic_cast<ActNorm*>(layer.get())) an->mark_initialized();
}

bool FlowModel::actnorm_ready() const {
    for (const Level& level : levels_)
        for (const auto& layer : level.layers)
            if (auto* an = dynamic_cast<const ActNorm*>(layer.get());
                an != nullptr && !an->initialized())
                return false;
    return true;
}

void FlowModel::randomize(Rng& rng, double amp) {
    force_actnorm_identity();
    visit_params([&](const ParamSlot& slot) {
        for (std::size_t i = 0; i < slot.len; ++i)
            slot.value[i] += rng.uniform(-amp, amp);
        if (slot.masked) slot.masked->project();
    });
}

std::vector<std::array<int, 3>> FlowModel::latent_shapes() const {
    std::vector<std::array<int, 3>> shapes;
    int c = cfg_.channels, h = cfg_.height, w = cfg_.width;
    for (int l = 0; l < cfg_.levels; ++l) {
        c *= 4;
        h /= 2;
        w /= 2;
        if (l < cfg_.levels - 1) {
            shapes.push_back({c / 2, h, w});
            c /= 2;
        }
    }
    shapes.push_back({c, h, w});
    return shapes;
}

std::string FlowModel::first_nonfinite_layer(const Tensor3& y) const {
    if (!y.all_finite()) return "input";
    double scratch = 0.0;
    Tensor3 x = y;
    for (int l = 0; l < cfg_.levels; ++l) {
        const Level& level = levels_[l];
        for (std::size_t i = 0; i < level.layers.size(); ++i) {
            x = level.layers[i]->eval(x, scratch);
            if (!x.all_finite() || !std::isfinite(scratch))
                return layer_prefix(l, i) + "/" + level.layers[i]->kind();
            }
        if (level.split) {
            SplitLayer::Out out = level.split->eval(x);
            if (!out.kept.all_finite() || !out.z.all_finite() ||
                !std::isfinite(out.logprob))
                return "l" + std::to_string(l) + "/split";
            x = std::move(out.kept);
        }
    }
    return "";
}

}  // namespace invflow
