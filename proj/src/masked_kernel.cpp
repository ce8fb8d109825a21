#include "invflow/masked_kernel.hpp"

#include "invflow/errors.hpp"

namespace invflow {

ConvKernel::ConvKernel(int c_out_, int c_in_, int k_)
    : c_out(c_out_), c_in(c_in_), k(k_) {
    if (c_out <= 0 || c_in <= 0 || k <= 0)
        throw DimensionError("ConvKernel: dimensions must be positive");
    w.assign(static_cast<std::size_t>(c_out) * c_in * k * k, 0.0);
}

MaskedKernel::MaskedKernel(int channels, int k) : kernel_(channels, channels, k) {
    project();
}

MaskedKernel MaskedKernel::random(int channels, int k, Rng& rng, double scale) {
    MaskedKernel m(channels, k);
    for (int a = 0; a < channels; ++a)
        for (int b = 0; b < channels; ++b)
            for (int ki = 0; ki < k; ++ki)
                for (int kj = 0; kj < k; ++kj)
                    if (m.free_entry(a, b, ki, kj))
                        m.kernel_.at(a, b, ki, kj) = rng.uniform(-scale, scale);
    return m;
}

void MaskedKernel::project() {
    const int c = kernel_.c_out;
    const int last = kernel_.k - 1;
    for (int a = 0; a < c; ++a) {
        kernel_.at(a, a, last, last) = 1.0;
        for (int b = a + 1; b < c; ++b) kernel_.at(a, b, last, last) = 0.0;
    }
}

bool MaskedKernel::mask_ok() const {
    const int c = kernel_.c_out;
    const int last = kernel_.k - 1;
    for (int a = 0; a < c; ++a) {
        if (kernel_.at(a, a, last, last) != 1.0) return false;
        for (int b = a + 1; b < c; ++b)
            if (kernel_.at(a, b, last, last) != 0.0) return false;
    }
    return true;
}

bool MaskedKernel::free_entry(int a, int b, int ki, int kj) const {
    const int last = kernel_.k - 1;
    return !(ki == last && kj == last && b >= a);
}

}  // namespace invflow
