#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "invflow/inv_conv.hpp"
#include "invflow/masked_kernel.hpp"
#include "invflow/rng.hpp"
#include "invflow/tensor.hpp"

namespace invflow {

enum class Precision { f64, f32 };

/// One registered parameter array. `masked` is set when the slot is a masked
/// convolution kernel that must be re-projected after every optimizer write.
struct ParamSlot {
    std::string name;
    double* value;
    double* grad;
    std::size_t len;
    MaskedKernel* masked = nullptr;
};

using ParamVisitor = std::function<void(const ParamSlot&)>;

/// Invertible building block. `eval` is the training-direction map (pure,
/// safe to call concurrently); `forward_train` additionally records what
/// `backward` needs. `backward` turns dL/d(output) into dL/d(input) and
/// accumulates parameter gradients; logdet_coeff is dL/d(logdet), which is
/// -grad_scale when minimizing NLL.
class Layer {
public:
    virtual ~Layer() = default;
    virtual std::string kind() const = 0;
    virtual Tensor3 eval(const Tensor3& x, double& logdet) const = 0;
    virtual Tensor3 inverse(const Tensor3& y) const = 0;
    virtual Tensor3 forward_train(const Tensor3& x, double& logdet) = 0;
    virtual Tensor3 backward(const Tensor3& grad_out, double logdet_coeff) = 0;
    virtual void visit_params(const ParamVisitor& visitor) { (void)visitor; }
    void zero_grads();
};

// ---------------------------------------------------------------------------

/// Per-channel affine y = scale*x + bias with data-dependent initialization.
class ActNorm final : public Layer {
public:
    explicit ActNorm(int channels);

    /// Sets bias = -mean/std, scale = 1/std per channel over the batch
    /// (population std; degenerate std < 1e-6 treated as 1).
    void init_from_batch(const std::vector<Tensor3>& batch);
    void force_identity();
    bool initialized() const { return initialized_; }

    std::string kind() const override { return "actnorm"; }
    Tensor3 eval(const Tensor3& x, double& logdet) const override;
    Tensor3 inverse(const Tensor3& y) const override;
    Tensor3 forward_train(const Tensor3& x, double& logdet) override;
    Tensor3 backward(const Tensor3& grad_out, double logdet_coeff) override;
    void visit_params(const ParamVisitor& visitor) override;

    std::vector<double>& scale() { return scale_; }
    std::vector<double>& bias() { return bias_; }
    void mark_initialized() { initialized_ = true; }

private:
    std::vector<double> scale_, bias_, gscale_, gbias_;
    bool initialized_ = false;
    Tensor3 x_;  // forward_train cache
};

// ---------------------------------------------------------------------------

/// Per-pixel channel mixing y = A x with logdet H*W*ln|det A|.
class Conv1x1 final : public Layer {
public:
    explicit Conv1x1(int channels);  // identity
    void init_random_rotation(Rng& rng);

    std::string kind() const override { return "conv1x1"; }
    Tensor3 eval(const Tensor3& x, double& logdet) const override;
    Tensor3 inverse(const Tensor3& y) const override;
    Tensor3 forward_train(const Tensor3& x, double& logdet) override;
    Tensor3 backward(const Tensor3& grad_out, double logdet_coeff) override;
    void visit_params(const ParamVisitor& visitor) override;

    std::vector<double>& matrix() { return mat_; }  // C*C row-major

private:
    // Recomputes the LU-derived inverse and logdet when mat_ changed since the
    // last call; throws SingularError at |det| <= 1e-12. The optimizer writes
    // the matrix through raw slot pointers, so staleness is detected by value.
    // Callers must hold cache_mu_.
    void refresh_cache() const;

    int c_;
    std::vector<double> mat_, gmat_;
    Tensor3 x_;

    struct InvCache {
        std::vector<double> key, inv;  // key: copy of mat_ the cache was built from
        double logdet = 0.0;
    };
    mutable InvCache cache_;
    mutable std::mutex cache_mu_;  // keeps concurrent eval/inverse safe
};

// ---------------------------------------------------------------------------

/// One convolution stage of a coupling subnet: same-size conv plus bias.
struct ConvStage {
    ConvKernel w;
    std::vector<double> b;
    ConvKernel gw;
    std::vector<double> gb;
    int pad = 0;

    ConvStage() = default;
    ConvStage(int c_out, int c_in, int k, int pad_);

    Tensor3 apply(const Tensor3& x, Precision prec) const;
    /// Accumulates gw/gb from (cached input, upstream grad); returns dL/dx.
    Tensor3 backward(const Tensor3& x_in, const Tensor3& grad_out, Precision prec);
};

/// conv3x3 -> ReLU -> conv1x1 -> ReLU -> conv3x3, the last stage
/// zero-initialized so a fresh subnet outputs identically 0. Output channel
/// count is 2*target: (shift f, raw log-scale g).
class CouplingSubnet {
public:
    CouplingSubnet() = default;
    CouplingSubnet(int c_in, int c_out, int hidden, Rng& rng);

    Tensor3 eval(const Tensor3& x, Precision prec) const;
    Tensor3 forward_train(const Tensor3& x, Precision prec);
    Tensor3 backward(const Tensor3& grad_out, Precision prec);
    void visit_params(const std::string& prefix, const ParamVisitor& visitor);

private:
    ConvStage s1_, s2_, s3_;
    Tensor3 x_, pre1_, h1_, pre2_, h2_;  // forward_train caches
};

// ---------------------------------------------------------------------------

/// Two-block affine coupling: passive half unchanged, active half mapped to
/// (x + f(passive)) * exp(clamp(g(passive), -8, 8)). permute_flag=true makes
/// the second half passive.
class AffineCoupling final : public Layer {
public:
    AffineCoupling(int channels, int hidden, bool permute_flag, Rng& rng,
                   Precision prec = Precision::f64);

    std::string kind() const override { return "coupling"; }
    Tensor3 eval(const Tensor3& x, double& logdet) const override;
    Tensor3 inverse(const Tensor3& y) const override;
    Tensor3 forward_train(const Tensor3& x, double& logdet) override;
    Tensor3 backward(const Tensor3& grad_out, double logdet_coeff) override;
    void visit_params(const ParamVisitor& visitor) override;

private:
    int c_;
    bool permute_;
    Precision prec_;
    CouplingSubnet net_;
    Tensor3 passive_, active_, f_, graw_;  // caches
};

/// Four-block autoregressive coupling: block t+1 is transformed conditioned
/// on the concatenation of the original blocks 1..t.
class QuadCoupling final : public Layer {
public:
    QuadCoupling(int channels, int hidden, Rng& rng, Precision prec = Precision::f64);

    std::string kind() const override { return "quad"; }
    Tensor3 eval(const Tensor3& x, double& logdet) const override;
    Tensor3 inverse(const Tensor3& y) const override;
    Tensor3 forward_train(const Tensor3& x, double& logdet) override;
    Tensor3 backward(const Tensor3& grad_out, double logdet_coeff) override;
    void visit_params(const ParamVisitor& visitor) override;

private:
    int c_;
    Precision prec_;
    CouplingSubnet nets_[3];
    Tensor3 xblk_[4], f_[3], graw_[3];  // caches
};

// ---------------------------------------------------------------------------

/// Space-to-channel permutation (C,H,W) -> (4C,H/2,W/2); each 2x2 spatial
/// block becomes 4 channels in (TL, TR, BL, BR) order. Volume preserving.
class SqueezeLayer final : public Layer {
public:
    std::string kind() const override { return "squeeze"; }
    Tensor3 eval(const Tensor3& x, double& logdet) const override;
    Tensor3 inverse(const Tensor3& y) const override;
    Tensor3 forward_train(const Tensor3& x, double& logdet) override;
    Tensor3 backward(const Tensor3& grad_out, double logdet_coeff) override;
};

Tensor3 squeeze(const Tensor3& x);
Tensor3 unsqueeze(const Tensor3& y);

/// The flow step's activation slot. An invertible elementwise activation
/// could drop in here; the default is the identity (logdet 0).
class IdentityActivation final : public Layer {
public:
    std::string kind() const override { return "activation"; }
    Tensor3 eval(const Tensor3& x, double& logdet) const override {
        logdet += 0.0;
        return x;
    }
    Tensor3 inverse(const Tensor3& y) const override { return y; }
    Tensor3 forward_train(const Tensor3& x, double& logdet) override {
        logdet += 0.0;
        return x;
    }
    Tensor3 backward(const Tensor3& grad_out, double) override { return grad_out; }
};

// ---------------------------------------------------------------------------

/// The invertible convolution as a flow layer. Training direction applies
/// conv_inverse (this is the "inverse flow" orientation); sampling applies
/// the fast conv_forward. logdet is identically 0 either way.
class InvConvLayer final : public Layer {
public:
    InvConvLayer(int channels, int k, Precision prec = Precision::f64);

    std::string kind() const override { return "invconv"; }
    Tensor3 eval(const Tensor3& y, double& logdet) const override;
    Tensor3 inverse(const Tensor3& x) const override;
    Tensor3 forward_train(const Tensor3& y, double& logdet) override;
    Tensor3 backward(const Tensor3& grad_out, double logdet_coeff) override;
    void visit_params(const ParamVisitor& visitor) override;

    MaskedKernel& kernel() { return kernel_; }
    const MaskedKernel& kernel() const { return kernel_; }

private:
    MaskedKernel kernel_;
    ConvKernel gw_;
    Precision prec_;
    Tensor3 xout_;  // cached conv_inverse result, needed for the weight grad
};

// ---------------------------------------------------------------------------

/// Between-level factor-out: keeps the first half of the channels, scores the
/// second half under a conditional diagonal Gaussian whose (mean, log-std)
/// come from a zero-initialized 3x3 convolution of the kept half. A flag
/// forces the standard normal instead.
class SplitLayer {
public:
    SplitLayer(int channels, bool conditional, Rng& rng, Precision prec = Precision::f64);

    struct Out {
        Tensor3 kept;
        Tensor3 z;
        double logprob;
    };

    Out eval(const Tensor3& x) const;
    Out forward_train(const Tensor3& x);
    /// Reassembles x from (kept, z).
    Tensor3 inverse(const Tensor3& kept, const Tensor3& z) const;
    /// Draws z ~ N(mu(kept), (temperature*sigma(kept))^2).
    Tensor3 sample_z(const Tensor3& kept, Rng& rng, double temperature) const;
    /// grad_kept is dL/d(kept); returns dL/dx including the prior's pull on
    /// both halves. logdet_coeff is dL/d(logprob).
    Tensor3 backward(const Tensor3& grad_kept, double logdet_coeff);
    void visit_params(const std::string& prefix, const ParamVisitor& visitor);

    int channels() const { return c_; }

private:
    struct PriorParams {
        Tensor3 mean;
        Tensor3 lnsigma;  // clamped
        Tensor3 raw;      // pre-clamp, for the straight-through mask
    };
    PriorParams prior(const Tensor3& kept) const;

    int c_;
    bool conditional_;
    Precision prec_;
    ConvStage net_;                     // (C, C/2, 3x3), zero-init
    Tensor3 kept_, z_;                  // caches
    PriorParams pp_;
};

/// Elementwise diagonal-Gaussian log density sum: log N(z; mu, exp(lnsigma)).
double gaussian_logprob(const Tensor3& z, const Tensor3& mean, const Tensor3& lnsigma);
/// Standard-normal variant.
double gaussian_logprob(const Tensor3& z);

}  // namespace invflow
