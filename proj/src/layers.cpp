#include "invflow/layers.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "invflow/errors.hpp"
#include "invflow/kernels.hpp"

namespace invflow {

namespace {

constexpr double kLogScaleClamp = 8.0;
const double kLn2Pi = std::log(2.0 * std::numbers::pi);

double clamp_ls(double v) { return std::clamp(v, -kLogScaleClamp, kLogScaleClamp); }
bool clamp_open(double v) { return v > -kLogScaleClamp && v < kLogScaleClamp; }

Tensor3 channel_slice(const Tensor3& x, int c0, int c1) {
    Tensor3 out(c1 - c0, x.height(), x.width());
    for (int i = 0; i < x.height(); ++i)
        for (int j = 0; j < x.width(); ++j)
            for (int c = c0; c < c1; ++c) out.at(c - c0, i, j) = x.at(c, i, j);
    return out;
}

void channel_assign(Tensor3& dst, int c0, const Tensor3& src) {
    for (int i = 0; i < src.height(); ++i)
        for (int j = 0; j < src.width(); ++j)
            for (int c = 0; c < src.channels(); ++c) dst.at(c0 + c, i, j) = src.at(c, i, j);
}

void channel_add(Tensor3& dst, int c0, const Tensor3& src) {
    for (int i = 0; i < src.height(); ++i)
        for (int j = 0; j < src.width(); ++j)
            for (int c = 0; c < src.channels(); ++c) dst.at(c0 + c, i, j) += src.at(c, i, j);
}

// Channel-transposed, spatially flipped kernel: the convolution with it (and
// complementary padding) is the adjoint of the original convolution.
ConvKernel transpose_kernel(const ConvKernel& w) {
    ConvKernel t(w.c_in, w.c_out, w.k);
    for (int a = 0; a < w.c_out; ++a)
        for (int b = 0; b < w.c_in; ++b)
            for (int ki = 0; ki < w.k; ++ki)
                for (int kj = 0; kj < w.k; ++kj)
                    t.at(b, a, w.k - 1 - ki, w.k - 1 - kj) = w.at(a, b, ki, kj);
    return t;
}

std::vector<float> to_f32(const std::vector<double>& v) {
    return std::vector<float>(v.begin(), v.end());
}

// Convolution through the f32 kernels: inputs and weights are demoted once,
// the accumulation runs in single precision, and the result is promoted back.
Tensor3 conv_f32(const Tensor3& x, const ConvKernel& w, int pad) {
    const std::vector<float> xf = to_f32(x.values());
    const std::vector<float> wf = to_f32(w.w);
    std::vector<float> yf(static_cast<std::size_t>(w.c_out) * x.height() * x.width());
    kernels::conv2d_scalar<float>(xf.data(), x.channels(), x.height(), x.width(),
                                  wf.data(), w.c_out, w.k, pad, pad, yf.data());
    return Tensor3(w.c_out, x.height(), x.width(),
                   std::vector<double>(yf.begin(), yf.end()));
}

Tensor3 conv_any(const Tensor3& x, const ConvKernel& w, int pad, Precision prec) {
    if (x.channels() != w.c_in) throw DimensionError("conv stage: channel mismatch");
    if (prec == Precision::f32) return conv_f32(x, w, pad);
    Tensor3 y(w.c_out, x.height(), x.width());
    kernels::conv2d(x.data(), x.channels(), x.height(), x.width(), w.w.data(), w.c_out,
                    w.k, pad, pad, y.data());
    return y;
}

}  // namespace

void Layer::zero_grads() {
    visit_params([](const ParamSlot& s) { std::fill(s.grad, s.grad + s.len, 0.0); });
}

// ---------------------------------------------------------------------------
// ActNorm
// ---------------------------------------------------------------------------

ActNorm::ActNorm(int channels)
    : scale_(channels, 1.0),
      bias_(channels, 0.0),
      gscale_(channels, 0.0),
      gbias_(channels, 0.0) {}

void ActNorm::init_from_batch(const std::vector<Tensor3>& batch) {
    if (batch.empty()) throw ArgumentError("actnorm init: empty batch");
    const int c = static_cast<int>(scale_.size());
    const double n =
        static_cast<double>(batch.size()) * batch[0].height() * batch[0].width();
    for (int ch = 0; ch < c; ++ch) {
        double mean = 0.0;
        for (const Tensor3& x : batch)
            for (int i = 0; i < x.height(); ++i)
                for (int j = 0; j < x.width(); ++j) mean += x.at(ch, i, j);
        mean /= n;
        double var = 0.0;
        for (const Tensor3& x : batch)
            for (int i = 0; i < x.height(); ++i)
                for (int j = 0; j < x.width(); ++j) {
                    const double d = x.at(ch, i, j) - mean;
                    var += d * d;
                }
        double std = std::sqrt(var / n);  // population std
        if (std < 1e-6) std = 1.0;
        scale_[ch] = 1.0 / std;
        bias_[ch] = -mean / std;
    }
    initialized_ = true;
}

void ActNorm::force_identity() {
    std::fill(scale_.begin(), scale_.end(), 1.0);
    std::fill(bias_.begin(), bias_.end(), 0.0);
    initialized_ = true;
}

Tensor3 ActNorm::eval(const Tensor3& x, double& logdet) const {
    if (!initialized_) throw StateError("actnorm used before initialization");
    if (x.channels() != static_cast<int>(scale_.size()))
        throw DimensionError("actnorm: channel mismatch");
    Tensor3 y(x.channels(), x.height(), x.width());
    double ld = 0.0;
    for (int c = 0; c < x.channels(); ++c) {
        for (int i = 0; i < x.height(); ++i)
            for (int j = 0; j < x.width(); ++j)
                y.at(c, i, j) = scale_[c] * x.at(c, i, j) + bias_[c];
        ld += std::log(std::abs(scale_[c]));
    }
    logdet += static_cast<double>(x.height()) * x.width() * ld;
    return y;
}

Tensor3 ActNorm::inverse(const Tensor3& y) const {
    if (!initialized_) throw StateError("actnorm used before initialization");
    Tensor3 x(y.channels(), y.height(), y.width());
    for (int c = 0; c < y.channels(); ++c)
        for (int i = 0; i < y.height(); ++i)
            for (int j = 0; j < y.width(); ++j)
                x.at(c, i, j) = (y.at(c, i, j) - bias_[c]) / scale_[c];
    return x;
}

Tensor3 ActNorm::forward_train(const Tensor3& x, double& logdet) {
    x_ = x;
    return eval(x, logdet);
}

Tensor3 ActNorm::backward(const Tensor3& grad_out, double logdet_coeff) {
    const double hw = static_cast<double>(grad_out.height()) * grad_out.width();
    Tensor3 gx(grad_out.channels(), grad_out.height(), grad_out.width());
    for (int c = 0; c < grad_out.channels(); ++c) {
        double gs = 0.0, gb = 0.0;
        for (int i = 0; i < grad_out.height(); ++i)
            for (int j = 0; j < grad_out.width(); ++j) {
                const double g = grad_out.at(c, i, j);
                gx.at(c, i, j) = scale_[c] * g;
                gs += g * x_.at(c, i, j);
                gb += g;
            }
        gscale_[c] += gs + logdet_coeff * hw / scale_[c];
        gbias_[c] += gb;
    }
    return gx;
}

void ActNorm::visit_params(const ParamVisitor& visitor) {
    visitor({"actnorm/scale", scale_.data(), gscale_.data(), scale_.size(), nullptr});
    visitor({"actnorm/bias", bias_.data(), gbias_.data(), bias_.size(), nullptr});
}

// ---------------------------------------------------------------------------
// Conv1x1
// ---------------------------------------------------------------------------

Conv1x1::Conv1x1(int channels) : c_(channels), mat_(channels * channels, 0.0),
                                 gmat_(channels * channels, 0.0) {
    for (int i = 0; i < c_; ++i) mat_[i * c_ + i] = 1.0;
}

void Conv1x1::init_random_rotation(Rng& rng) {
    Eigen::MatrixXd a(c_, c_);
    for (int i = 0; i < c_; ++i)
        for (int j = 0; j < c_; ++j) a(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ();
    // Fix the sign convention so the factorization is unique.
    Eigen::VectorXd diag = qr.matrixQR().diagonal();
    for (int i = 0; i < c_; ++i)
        if (diag(i) < 0) q.col(i) = -q.col(i);
    for (int i = 0; i < c_; ++i)
        for (int j = 0; j < c_; ++j) mat_[i * c_ + j] = q(i, j);
}

void Conv1x1::refresh_cache() const {
    if (cache_.key == mat_) return;
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
        a(mat_.data(), c_, c_);
    Eigen::PartialPivLU<
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
        lu(a);
    const double det = lu.determinant();
    if (std::abs(det) <= 1e-12)
        throw SingularError("conv1x1: |det| <= 1e-12, matrix is not invertible");
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> inv =
        lu.inverse();
    cache_.inv.assign(inv.data(), inv.data() + static_cast<std::size_t>(c_) * c_);
    cache_.logdet = std::log(std::abs(det));
    cache_.key = mat_;
}

Tensor3 Conv1x1::eval(const Tensor3& x, double& logdet) const {
    if (x.channels() != c_) throw DimensionError("conv1x1: channel mismatch");
    double ld;
    {
        std::lock_guard<std::mutex> lock(cache_mu_);
        refresh_cache();
        ld = cache_.logdet;
    }
    Tensor3 y(c_, x.height(), x.width());
    kernels::conv2d(x.data(), c_, x.height(), x.width(), mat_.data(), c_, 1, 0, 0,
                    y.data());
    logdet += static_cast<double>(x.height()) * x.width() * ld;
    return y;
}

Tensor3 Conv1x1::inverse(const Tensor3& y) const {
    if (y.channels() != c_) throw DimensionError("conv1x1: channel mismatch");
    Tensor3 x(c_, y.height(), y.width());
    std::lock_guard<std::mutex> lock(cache_mu_);
    refresh_cache();
    kernels::conv2d(y.data(), c_, y.height(), y.width(), cache_.inv.data(), c_, 1,
                    0, 0, x.data());
    return x;
}

Tensor3 Conv1x1::forward_train(const Tensor3& x, double& logdet) {
    x_ = x;
    return eval(x, logdet);
}

Tensor3 Conv1x1::backward(const Tensor3& grad_out, double logdet_coeff) {
    const int h = grad_out.height(), w = grad_out.width();
    // dL/dx = A^T g
    std::vector<double> at(static_cast<std::size_t>(c_) * c_);
    for (int i = 0; i < c_; ++i)
        for (int j = 0; j < c_; ++j) at[i * c_ + j] = mat_[j * c_ + i];
    Tensor3 gx(c_, h, w);
    kernels::conv2d(grad_out.data(), c_, h, w, at.data(), c_, 1, 0, 0, gx.data());
    // dL/dA = sum_p g x^T + coeff * H*W * A^{-T}
    std::vector<double> gw(static_cast<std::size_t>(c_) * c_);
    kernels::conv2d_weight_grad(x_.data(), c_, h, w, grad_out.data(), c_, 1, 0, 0,
                                gw.data());
    std::lock_guard<std::mutex> lock(cache_mu_);
    refresh_cache();
    const double hw = static_cast<double>(h) * w;
    for (int i = 0; i < c_; ++i)
        for (int j = 0; j < c_; ++j)
            gmat_[i * c_ + j] +=
                gw[i * c_ + j] + logdet_coeff * hw * cache_.inv[j * c_ + i];
    return gx;
}

void Conv1x1::visit_params(const ParamVisitor& visitor) {
    visitor({"conv1x1/mat", mat_.data(), gmat_.data(), mat_.size(), nullptr});
}

// ---------------------------------------------------------------------------
// ConvStage / CouplingSubnet
// ---------------------------------------------------------------------------

ConvStage::ConvStage(int c_out, int c_in, int k, int pad_)
    : w(c_out, c_in, k), b(c_out, 0.0), gw(c_out, c_in, k), gb(c_out, 0.0), pad(pad_) {}

Tensor3 ConvStage::apply(const Tensor3& x, Precision prec) const {
    Tensor3 y = conv_any(x, w, pad, prec);
    for (int c = 0; c < y.channels(); ++c)
        for (int i = 0; i < y.height(); ++i)
            for (int j = 0; j < y.width(); ++j) y.at(c, i, j) += b[c];
    return y;
}

Tensor3 ConvStage::backward(const Tensor3& x_in, const Tensor3& grad_out, Precision prec) {
    for (int c = 0; c < grad_out.channels(); ++c) {
        double acc = 0.0;
        for (int i = 0; i < grad_out.height(); ++i)
            for (int j = 0; j < grad_out.width(); ++j) acc += grad_out.at(c, i, j);
        gb[c] += acc;
    }
    ConvKernel dw(w.c_out, w.c_in, w.k);
    if (prec == Precision::f32) {
        const std::vector<float> xf = to_f32(x_in.values());
        const std::vector<float> gf = to_f32(grad_out.values());
        // f32 mode keeps the correlation in double here: the weight-gradient
        // kernel is double-only and this path is already off the exactness
        // contract, so promote the inputs instead of duplicating the kernel.
        Tensor3 xq(x_in.channels(), x_in.height(), x_in.width(),
                   std::vector<double>(xf.begin(), xf.end()));
        Tensor3 gq(grad_out.channels(), grad_out.height(), grad_out.width(),
                   std::vector<double>(gf.begin(), gf.end()));
        kernels::conv2d_weight_grad(xq.data(), w.c_in, x_in.height(), x_in.width(),
                                    gq.data(), w.c_out, w.k, pad, pad, dw.w.data());
    } else {
        kernels::conv2d_weight_grad(x_in.data(), w.c_in, x_in.height(), x_in.width(),
                                    grad_out.data(), w.c_out, w.k, pad, pad, dw.w.data());
    }
    for (std::size_t i = 0; i < dw.w.size(); ++i) gw.w[i] += dw.w[i];
    return conv_any(grad_out, transpose_kernel(w), w.k - 1 - pad, prec);
}

namespace {

void init_hidden_stage(ConvStage& s, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.w.c_in) * s.w.k * s.w.k);
    for (double& v : s.w.w) v = rng.uniform(-bound, bound);
}

}  // namespace

CouplingSubnet::CouplingSubnet(int c_in, int c_out, int hidden, Rng& rng)
    : s1_(hidden, c_in, 3, 1), s2_(hidden, hidden, 1, 0), s3_(c_out, hidden, 3, 1) {
    init_hidden_stage(s1_, rng);
    init_hidden_stage(s2_, rng);
    // s3_ stays zero-initialized: a fresh subnet outputs identically 0.
}

namespace {

Tensor3 relu(const Tensor3& x) {
    Tensor3 y = x;
    for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
    return y;
}

Tensor3 relu_backward(const Tensor3& pre, const Tensor3& g) {
    Tensor3 gx = g;
    for (std::size_t i = 0; i < gx.values().size(); ++i)
        if (pre.values()[i] <= 0.0) gx.values()[i] = 0.0;
    return gx;
}

}  // namespace

Tensor3 CouplingSubnet::eval(const Tensor3& x, Precision prec) const {
    const Tensor3 h1 = relu(s1_.apply(x, prec));
    const Tensor3 h2 = relu(s2_.apply(h1, prec));
    return s3_.apply(h2, prec);
}

Tensor3 CouplingSubnet::forward_train(const Tensor3& x, Precision prec) {
    x_ = x;
    pre1_ = s1_.apply(x, prec);
    h1_ = relu(pre1_);
    pre2_ = s2_.apply(h1_, prec);
    h2_ = relu(pre2_);
    return s3_.apply(h2_, prec);
}

Tensor3 CouplingSubnet::backward(const Tensor3& grad_out, Precision prec) {
    const Tensor3 g2 = relu_backward(pre2_, s3_.backward(h2_, grad_out, prec));
    const Tensor3 g1 = relu_backward(pre1_, s2_.backward(h1_, g2, prec));
    return s1_.backward(x_, g1, prec);
}

void CouplingSubnet::visit_params(const std::string& prefix, const ParamVisitor& v) {
    v({prefix + "/w1", s1_.w.w.data(), s1_.gw.w.data(), s1_.w.w.size(), nullptr});
    v({prefix + "/b1", s1_.b.data(), s1_.gb.data(), s1_.b.size(), nullptr});
    v({prefix + "/w2", s2_.w.w.data(), s2_.gw.w.data(), s2_.w.w.size(), nullptr});
    v({prefix + "/b2", s2_.b.data(), s2_.gb.data(), s2_.b.size(), nullptr});
    v({prefix + "/w3", s3_.w.w.data(), s3_.gw.w.data(), s3_.w.w.size(), nullptr});
    v({prefix + "/b3", s3_.b.data(), s3_.gb.data(), s3_.b.size(), nullptr});
}

// ---------------------------------------------------------------------------
// AffineCoupling
// ---------------------------------------------------------------------------

AffineCoupling::AffineCoupling(int channels, int hidden, bool permute_flag, Rng& rng,
                               Precision prec)
    : c_(channels), permute_(permute_flag), prec_(prec) {
    if (channels % 2 != 0)
        throw DimensionError("affine coupling requires an even channel count");
    net_ = CouplingSubnet(channels / 2, channels, hidden, rng);
}

Tensor3 AffineCoupling::eval(const Tensor3& x, double& logdet) const {
    if (x.channels() != c_) throw DimensionError("coupling: channel mismatch");
    const int half = c_ / 2;
    const int p0 = permute_ ? half : 0;
    const int a0 = permute_ ? 0 : half;
    const Tensor3 passive = channel_slice(x, p0, p0 + half);
    const Tensor3 active = channel_slice(x, a0, a0 + half);
    const Tensor3 out = net_.eval(passive, prec_);
    const Tensor3 f = channel_slice(out, 0, half);
    const Tensor3 graw = channel_slice(out, half, c_);
    Tensor3 yact(half, x.height(), x.width());
    double ld = 0.0;
    for (std::size_t e = 0; e < yact.values().size(); ++e) {
        const double g = clamp_ls(graw.values()[e]);
        yact.values()[e] = (active.values()[e] + f.values()[e]) * std::exp(g);
        ld += g;
    }
    logdet += ld;
    Tensor3 y(c_, x.height(), x.width());
    channel_assign(y, p0, passive);
    channel_assign(y, a0, yact);
    return y;
}

Tensor3 AffineCoupling::inverse(const Tensor3& y) const {
    if (y.channels() != c_) throw DimensionError("coupling: channel mismatch");
    const int half = c_ / 2;
    const int p0 = permute_ ? half : 0;
    const int a0 = permute_ ? 0 : half;
    const Tensor3 passive = channel_slice(y, p0, p0 + half);
    const Tensor3 yact = channel_slice(y, a0, a0 + half);
    const Tensor3 out = net_.eval(passive, prec_);
    const Tensor3 f = channel_slice(out, 0, half);
    const Tensor3 graw = channel_slice(out, half, c_);
    Tensor3 active(half, y.height(), y.width());
    for (std::size_t e = 0; e < active.values().size(); ++e) {
        const double g = clamp_ls(graw.values()[e]);
        active.values()[e] = yact.values()[e] * std::exp(-g) - f.values()[e];
    }
    Tensor3 x(c_, y.height(), y.width());
    channel_assign(x, p0, passive);
    channel_assign(x, a0, active);
    return x;
}

Tensor3 AffineCoupling::forward_train(const Tensor3& x, double& logdet) {
    if (x.channels() != c_) throw DimensionError("coupling: channel mismatch");
    const int half = c_ / 2;
    const int p0 = permute_ ? half : 0;
    const int a0 = permute_ ? 0 : half;
    passive_ = channel_slice(x, p0, p0 + half);
    active_ = channel_slice(x, a0, a0 + half);
    const Tensor3 out = net_.forward_train(passive_, prec_);
    f_ = channel_slice(out, 0, half);
    graw_ = channel_slice(out, half, c_);
    Tensor3 yact(half, x.height(), x.width());
    double ld = 0.0;
    for (std::size_t e = 0; e < yact.values().size(); ++e) {
        const double g = clamp_ls(graw_.values()[e]);
        yact.values()[e] = (active_.values()[e] + f_.values()[e]) * std::exp(g);
        ld += g;
    }
    logdet += ld;
    Tensor3 y(c_, x.height(), x.width());
    channel_assign(y, p0, passive_);
    channel_assign(y, a0, yact);
    return y;
}

Tensor3 AffineCoupling::backward(const Tensor3& grad_out, double logdet_coeff) {
    const int half = c_ / 2;
    const int p0 = permute_ ? half : 0;
    const int a0 = permute_ ? 0 : half;
    const Tensor3 gpassive_direct = channel_slice(grad_out, p0, p0 + half);
    const Tensor3 gyact = channel_slice(grad_out, a0, a0 + half);
    Tensor3 gactive(half, grad_out.height(), grad_out.width());
    Tensor3 gf(half, grad_out.height(), grad_out.width());
    Tensor3 gg(half, grad_out.height(), grad_out.width());
    for (std::size_t e = 0; e < gactive.values().size(); ++e) {
        const double g = clamp_ls(graw_.values()[e]);
        const double eg = std::exp(g);
        const double gy = gyact.values()[e];
        gactive.values()[e] = gy * eg;
        // y = (x + f) e^g: df requires gy*e^g; dg adds the logdet's pull.
        gf.values()[e] = gy * eg;
        double gge = gy * eg * (active_.values()[e] + f_.values()[e]) + logdet_coeff;
        if (!clamp_open(graw_.values()[e])) gge = 0.0;
        gg.values()[e] = gge;
    }
    Tensor3 gnet_out(c_, grad_out.height(), grad_out.width());
    channel_assign(gnet_out, 0, gf);
    channel_assign(gnet_out, half, gg);
    const Tensor3 gpassive_net = net_.backward(gnet_out, prec_);
    Tensor3 gx(c_, grad_out.height(), grad_out.width());
    channel_assign(gx, p0, gpassive_direct);
    channel_add(gx, p0, gpassive_net);
    channel_assign(gx, a0, gactive);
    return gx;
}

void AffineCoupling::visit_params(const ParamVisitor& visitor) {
    net_.visit_params("coupling/net", visitor);
}

// ---------------------------------------------------------------------------
// QuadCoupling
// ---------------------------------------------------------------------------

QuadCoupling::QuadCoupling(int channels, int hidden, Rng& rng, Precision prec)
    : c_(channels), prec_(prec) {
    if (channels % 4 != 0)
        throw DimensionError("quad coupling requires channels divisible by 4");
    const int q = channels / 4;
    for (int t = 0; t < 3; ++t)
        nets_[t] = CouplingSubnet((t + 1) * q, 2 * q, hidden, rng);
}

Tensor3 QuadCoupling::eval(const Tensor3& x, double& logdet) const {
    if (x.channels() != c_) throw DimensionError("quad coupling: channel mismatch");
    const int q = c_ / 4;
    Tensor3 y(c_, x.height(), x.width());
    channel_assign(y, 0, channel_slice(x, 0, q));
    double ld = 0.0;
    for (int t = 1; t <= 3; ++t) {
        const Tensor3 cond = channel_slice(x, 0, t * q);
        const Tensor3 out = nets_[t - 1].eval(cond, prec_);
        const Tensor3 f = channel_slice(out, 0, q);
        const Tensor3 graw = channel_slice(out, q, 2 * q);
        const Tensor3 blk = channel_slice(x, t * q, (t + 1) * q);
        Tensor3 yblk(q, x.height(), x.width());
        for (std::size_t e = 0; e < yblk.values().size(); ++e) {
            const double g = clamp_ls(graw.values()[e]);
            yblk.values()[e] = (blk.values()[e] + f.values()[e]) * std::exp(g);
            ld += g;
        }
        channel_assign(y, t * q, yblk);
    }
    logdet += ld;
    return y;
}

Tensor3 QuadCoupling::inverse(const Tensor3& y) const {
    if (y.channels() != c_) throw DimensionError("quad coupling: channel mismatch");
    const int q = c_ / 4;
    Tensor3 x(c_, y.height(), y.width());
    channel_assign(x, 0, channel_slice(y, 0, q));
    // Blocks come back in order 2,3,4, each conditioned on already-recovered
    // earlier blocks.
    for (int t = 1; t <= 3; ++t) {
        const Tensor3 cond = channel_slice(x, 0, t * q);
        const Tensor3 out = nets_[t - 1].eval(cond, prec_);
        const Tensor3 f = channel_slice(out, 0, q);
        const Tensor3 graw = channel_slice(out, q, 2 * q);
        const Tensor3 yblk = channel_slice(y, t * q, (t + 1) * q);
        Tensor3 blk(q, y.height(), y.width());
        for (std::size_t e = 0; e < blk.values().size(); ++e) {
            const double g = clamp_ls(graw.values()[e]);
            blk.values()[e] = yblk.values()[e] * std::exp(-g) - f.values()[e];
        }
        channel_assign(x, t * q, blk);
    }
    return x;
}

Tensor3 QuadCoupling::forward_train(const Tensor3& x, double& logdet) {
    if (x.channels() != c_) throw DimensionError("quad coupling: channel mismatch");
    const int q = c_ / 4;
    Tensor3 y(c_, x.height(), x.width());
    for (int t = 0; t < 4; ++t) xblk_[t] = channel_slice(x, t * q, (t + 1) * q);
    channel_assign(y, 0, xblk_[0]);
    double ld = 0.0;
    for (int t = 1; t <= 3; ++t) {
        const Tensor3 cond = channel_slice(x, 0, t * q);
        const Tensor3 out = nets_[t - 1].forward_train(cond, prec_);
        f_[t - 1] = channel_slice(out, 0, q);
        graw_[t - 1] = channel_slice(out, q, 2 * q);
        Tensor3 yblk(q, x.height(), x.width());
        for (std::size_t e = 0; e < yblk.values().size(); ++e) {
            const double g = clamp_ls(graw_[t - 1].values()[e]);
            yblk.values()[e] = (xblk_[t].values()[e] + f_[t - 1].values()[e]) * std::exp(g);
            ld += g;
        }
        channel_assign(y, t * q, yblk);
    }
    logdet += ld;
    return y;
}

Tensor3 QuadCoupling::backward(const Tensor3& grad_out, double logdet_coeff) {
    const int q = c_ / 4;
    Tensor3 gx(c_, grad_out.height(), grad_out.width());
    channel_assign(gx, 0, channel_slice(grad_out, 0, q));
    // Each output block is a leaf: its (f, g) gradients depend only on the
    // incoming grad, so the three subnets can be unwound independently, each
    // scattering into the prefix of original blocks that fed it.
    for (int t = 3; t >= 1; --t) {
        const Tensor3 gyblk = channel_slice(grad_out, t * q, (t + 1) * q);
        Tensor3 gblk(q, grad_out.height(), grad_out.width());
        Tensor3 gf(q, grad_out.height(), grad_out.width());
        Tensor3 gg(q, grad_out.height(), grad_out.width());
        for (std::size_t e = 0; e < gblk.values().size(); ++e) {
            const double g = clamp_ls(graw_[t - 1].values()[e]);
            const double eg = std::exp(g);
            const double gy = gyblk.values()[e];
            gblk.values()[e] = gy * eg;
            gf.values()[e] = gy * eg;
            double gge = gy * eg * (xblk_[t].values()[e] + f_[t - 1].values()[e]) +
                         logdet_coeff;
            if (!clamp_open(graw_[t - 1].values()[e])) gge = 0.0;
            gg.values()[e] = gge;
        }
        // Accumulate: blocks 1..t-1 also receive conditioning gradients from
        // the later nets, so an assign here would clobber them.
        channel_add(gx, t * q, gblk);
        Tensor3 gnet_out(2 * q, grad_out.height(), grad_out.width());
        channel_assign(gnet_out, 0, gf);
        channel_assign(gnet_out, q, gg);
        const Tensor3 gcond = nets_[t - 1].backward(gnet_out, prec_);
        channel_add(gx, 0, gcond);
    }
    return gx;
}

void QuadCoupling::visit_params(const ParamVisitor& visitor) {
    nets_[0].visit_params("quad/net1", visitor);
    nets_[1].visit_params("quad/net2", visitor);
    nets_[2].visit_params("quad/net3", visitor);
}

// ---------------------------------------------------------------------------
// Squeeze
// ---------------------------------------------------------------------------

Tensor3 squeeze(const Tensor3& x) {
    if (x.height() % 2 != 0 || x.width() % 2 != 0)
        throw DimensionError("squeeze requires even H and W");
    const int c = x.channels();
    Tensor3 y(4 * c, x.height() / 2, x.width() / 2);
    for (int s = 0; s < 4; ++s)  // TL, TR, BL, BR
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < y.height(); ++i)
                for (int j = 0; j < y.width(); ++j)
                    y.at(ch + c * s, i, j) = x.at(ch, 2 * i + s / 2, 2 * j + s % 2);
    return y;
}

Tensor3 unsqueeze(const Tensor3& y) {
    if (y.channels() % 4 != 0)
        throw DimensionError("unsqueeze requires channels divisible by 4");
    const int c = y.channels() / 4;
    Tensor3 x(c, y.height() * 2, y.width() * 2);
    for (int s = 0; s < 4; ++s)
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < y.height(); ++i)
                for (int j = 0; j < y.width(); ++j)
                    x.at(ch, 2 * i + s / 2, 2 * j + s % 2) = y.at(ch + c * s, i, j);
    return x;
}

Tensor3 SqueezeLayer::eval(const Tensor3& x, double& logdet) const {
    logdet += 0.0;  // volume-preserving permutation
    return squeeze(x);
}

Tensor3 SqueezeLayer::inverse(const Tensor3& y) const { return unsqueeze(y); }

Tensor3 SqueezeLayer::forward_train(const Tensor3& x, double& logdet) {
    return eval(x, logdet);
}

Tensor3 SqueezeLayer::backward(const Tensor3& grad_out, double) {
    return unsqueeze(grad_out);
}

// ---------------------------------------------------------------------------
// InvConvLayer
// ---------------------------------------------------------------------------

InvConvLayer::InvConvLayer(int channels, int k, Precision prec)
    : kernel_(channels, k), gw_(channels, channels, k), prec_(prec) {}

namespace {

Tensor3 masked_solve_f32(const Tensor3& y, const MaskedKernel& kernel) {
    const std::vector<float> yf = to_f32(y.values());
    const std::vector<float> wf = to_f32(kernel.weights());
    std::vector<float> xf(yf.size());
    kernels::masked_conv_solve_scalar<float>(yf.data(), y.channels(), y.height(),
                                             y.width(), wf.data(), kernel.ksize(),
                                             xf.data());
    return Tensor3(y.channels(), y.height(), y.width(),
                   std::vector<double>(xf.begin(), xf.end()));
}

Tensor3 masked_forward_f32(const Tensor3& x, const MaskedKernel& kernel) {
    const std::vector<float> xf = to_f32(x.values());
    const std::vector<float> wf = to_f32(kernel.weights());
    std::vector<float> yf(xf.size());
    kernels::masked_conv_forward_scalar<float>(xf.data(), x.channels(), x.height(),
                                               x.width(), wf.data(), kernel.ksize(),
                                               yf.data());
    return Tensor3(x.channels(), x.height(), x.width(),
                   std::vector<double>(yf.begin(), yf.end()));
}

}  // namespace

Tensor3 InvConvLayer::eval(const Tensor3& y, double& logdet) const {
    logdet += invflow::logdet(kernel_, y.height(), y.width());
    if (prec_ == Precision::f32) return masked_solve_f32(y, kernel_);
    return conv_inverse(y, kernel_);
}

Tensor3 InvConvLayer::inverse(const Tensor3& x) const {
    if (prec_ == Precision::f32) return masked_forward_f32(x, kernel_);
    return conv_forward(x, kernel_);
}

Tensor3 InvConvLayer::forward_train(const Tensor3& y, double& logdet) {
    xout_ = eval(y, logdet);
    return xout_;
}

Tensor3 InvConvLayer::backward(const Tensor3& grad_out, double) {
    // logdet is identically 0, so the only flows are dL/dy = M^{-T} dL/dx and
    // the weight correlation against the cached solve output.
    const Tensor3 u = grad_input(grad_out, kernel_);
    const ConvKernel dw = grad_weights_from(u, xout_, kernel_);
    for (std::size_t i = 0; i < gw_.w.size(); ++i) gw_.w[i] += dw.w[i];
    return u;
}

void InvConvLayer::visit_params(const ParamVisitor& visitor) {
    visitor({"invconv/kernel", kernel_.weights().data(), gw_.w.data(),
             kernel_.weights().size(), &kernel_});
}

// ---------------------------------------------------------------------------
// SplitLayer
// ---------------------------------------------------------------------------

double gaussian_logprob(const Tensor3& z, const Tensor3& mean, const Tensor3& lnsigma) {
    double lp = 0.0;
    for (std::size_t e = 0; e < z.values().size(); ++e) {
        const double ls = lnsigma.values()[e];
        const double d = (z.values()[e] - mean.values()[e]) * std::exp(-ls);
        lp += -0.5 * kLn2Pi - ls - 0.5 * d * d;
    }
    return lp;
}

double gaussian_logprob(const Tensor3& z) {
    double lp = 0.0;
    for (const double v : z.values()) lp += -0.5 * kLn2Pi - 0.5 * v * v;
    return lp;
}

SplitLayer::SplitLayer(int channels, bool conditional, Rng& rng, Precision prec)
    : c_(channels), conditional_(conditional), prec_(prec),
      net_(channels, channels / 2, 3, 1) {
    (void)rng;  // the prior net is zero-initialized: standard normal at start
    if (channels % 2 != 0) throw DimensionError("split requires an even channel count");
}

SplitLayer::PriorParams SplitLayer::prior(const Tensor3& kept) const {
    PriorParams pp;
    if (!conditional_) {
        pp.mean = Tensor3(c_ / 2, kept.height(), kept.width());
        pp.lnsigma = pp.mean;
        pp.raw = pp.mean;
        return pp;
    }
    const Tensor3 out = net_.apply(kept, prec_);
    pp.mean = channel_slice(out, 0, c_ / 2);
    pp.raw = channel_slice(out, c_ / 2, c_);
    pp.lnsigma = pp.raw;
    for (double& v : pp.lnsigma.values()) v = clamp_ls(v);
    return pp;
}

SplitLayer::Out SplitLayer::eval(const Tensor3& x) const {
    if (x.channels() != c_) throw DimensionError("split: channel mismatch");
    Out out;
    out.kept = channel_slice(x, 0, c_ / 2);
    out.z = channel_slice(x, c_ / 2, c_);
    const PriorParams pp = prior(out.kept);
    out.logprob = gaussian_logprob(out.z, pp.mean, pp.lnsigma);
    return out;
}

SplitLayer::Out SplitLayer::forward_train(const Tensor3& x) {
    Out out = eval(x);
    kept_ = out.kept;
    z_ = out.z;
    pp_ = prior(kept_);
    return out;
}

Tensor3 SplitLayer::inverse(const Tensor3& kept, const Tensor3& z) const {
    if (kept.channels() != c_ / 2 || z.channels() != c_ / 2)
        throw DimensionError("split inverse: channel mismatch");
    Tensor3 x(c_, kept.height(), kept.width());
    channel_assign(x, 0, kept);
    channel_assign(x, c_ / 2, z);
    return x;
}

Tensor3 SplitLayer::sample_z(const Tensor3& kept, Rng& rng, double temperature) const {
    const PriorParams pp = prior(kept);
    Tensor3 z(c_ / 2, kept.height(), kept.width());
    for (std::size_t e = 0; e < z.values().size(); ++e)
        z.values()[e] = pp.mean.values()[e] +
                        temperature * std::exp(pp.lnsigma.values()[e]) * rng.normal();
    return z;
}

Tensor3 SplitLayer::backward(const Tensor3& grad_kept, double logdet_coeff) {
    const int half = c_ / 2;
    Tensor3 gz(half, grad_kept.height(), grad_kept.width());
    Tensor3 gkept = grad_kept;
    Tensor3 gmean(half, grad_kept.height(), grad_kept.width());
    Tensor3 gls_half(half, grad_kept.height(), grad_kept.width());
    for (std::size_t e = 0; e < gz.values().size(); ++e) {
        const double ls = pp_.lnsigma.values()[e];
        const double inv_var = std::exp(-2.0 * ls);
        const double d = z_.values()[e] - pp_.mean.values()[e];
        // log N = -ln sigma - d^2/(2 sigma^2) + const
        gz.values()[e] = logdet_coeff * (-d * inv_var);
        if (conditional_) {
            gmean.values()[e] = logdet_coeff * (d * inv_var);
            double gls = logdet_coeff * (-1.0 + d * d * inv_var);
            if (!clamp_open(pp_.raw.values()[e])) gls = 0.0;
            gls_half.values()[e] = gls;
        }
    }
    if (conditional_) {
        Tensor3 gprior_out(c_, grad_kept.height(), grad_kept.width());
        channel_assign(gprior_out, 0, gmean);
        channel_assign(gprior_out, half, gls_half);
        const Tensor3 gk = net_.backward(kept_, gprior_out, prec_);
        for (std::size_t e = 0; e < gkept.values().size(); ++e)
            gkept.values()[e] += gk.values()[e];
    }
    Tensor3 gx(c_, grad_kept.height(), grad_kept.width());
    channel_assign(gx, 0, gkept);
    channel_assign(gx, half, gz);
    return gx;
}

void SplitLayer::visit_params(const std::string& prefix, const ParamVisitor& visitor) {
    if (!conditional_) return;
    visitor({prefix + "/prior_w", net_.w.w.data(), net_.gw.w.data(), net_.w.w.size(),
             nullptr});
    visitor({prefix + "/prior_b", net_.b.data(), net_.gb.data(), net_.b.size(), nullptr});
}

}  // namespace invflow
