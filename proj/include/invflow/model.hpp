#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "invflow/layers.hpp"
#include "invflow/rng.hpp"
#include "invflow/tensor.hpp"

namespace invflow {

enum class CouplingKind { affine, quad };

/// Architecture description. Every model built from the same config and seed
/// is bit-identical.
struct ModelConfig {
    int levels = 1;  // L
    int steps = 1;   // K, flow steps per level
    CouplingKind coupling = CouplingKind::affine;
    int hidden = 64;  // coupling subnet width
    int k = 3;        // invertible-conv kernel size
    int channels = 1, height = 8, width = 8;  // input shape (C0, H0, W0)
    bool conditional_split_prior = true;
    std::uint64_t seed = 0;
    int dtype_bits = 64;  // 64 (exactness contract) or 32 (throughput)
    /// true: couplings zero-init, actnorm forced to identity, 1x1 identity,
    /// inv-conv identity mask — the whole model is a fixed permutation.
    bool identity_init = false;

    void validate() const;  // throws ArgumentError / DimensionError
};

/// One latent tensor per split plus the final latent (last entry). Flows are
/// bijections, so the element counts always add up to C0*H0*W0.
struct LatentStack {
    std::vector<Tensor3> latents;
    std::size_t total_elements() const;
};

/// The multi-scale flow model: per level a squeeze, K steps of
/// (inv-conv -> activation slot -> actnorm -> 1x1 conv -> coupling), and a
/// split between levels. The training direction runs the exact conv solve;
/// sampling runs the fast direct convolution.
class FlowModel {
public:
    explicit FlowModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }

    struct ForwardResult {
        LatentStack latents;
        double total_logdet;
    };

    /// Training-direction pass y -> latents (pure; layers are not mutated).
    ForwardResult model_forward(const Tensor3& y) const;

    /// Exact log-density in nats: split/final Gaussian log-densities plus the
    /// accumulated logdet.
    double log_prob(const Tensor3& y) const;

    /// Draws all latents ~ N(mu, (temperature*sigma)^2) and decodes.
    Tensor3 sample(Rng& rng, double temperature = 1.0) const;

    /// Inverse model: latents -> input space.
    Tensor3 decode(const LatentStack& latents) const;

    Tensor3 reconstruct(const Tensor3& y) const;

    /// Linear interpolation in latent space at `steps` equally spaced t in
    /// [0, 1], decoded; steps >= 2.
    std::vector<Tensor3> interpolate(const Tensor3& y_a, const Tensor3& y_b,
                                     int steps) const;

    /// One training example: accumulates parameter gradients of
    /// grad_scale * NLL(y) and returns the (unscaled) NLL in nats.
    double forward_backward(const Tensor3& y, double grad_scale);

    void zero_grads();
    void visit_params(const ParamVisitor& visitor);

    /// Data-dependent actnorm init: each actnorm sees the batch as transformed
    /// by everything before it and normalizes it to zero mean / unit variance.
    void init_actnorm(const std::vector<Tensor3>& batch);
    void force_actnorm_identity();
    /// Marks all actnorms initialized without touching their values (used
    /// when parameters are restored from a checkpoint).
    void mark_actnorm_initialized();
    bool actnorm_ready() const;

    /// Test helper: perturbs every free parameter by uniform(-amp, amp)
    /// (actnorm forced to identity first) and re-projects masked kernels.
    void randomize(Rng& rng, double amp);

    /// Shapes of the latents in stack order, (C, H, W) each.
    std::vector<std::array<int, 3>> latent_shapes() const;

    /// Runs eval and reports the path of the first layer whose output is not
    /// finite ("" when everything is finite). Used for NaN diagnostics.
    std::string first_nonfinite_layer(const Tensor3& y) const;

private:
    struct Level {
        std::vector<std::unique_ptr<Layer>> layers;  // squeeze + 5 per step
        std::unique_ptr<SplitLayer> split;           // null on the last level
    };

    std::string layer_prefix(int level, std::size_t layer_idx) const;
    void check_input(const Tensor3& y) const;

    ModelConfig cfg_;
    std::vector<Level> levels_;
};

}  // namespace invflow
