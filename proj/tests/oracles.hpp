// Independent reference implementations used as test oracles. These must not
// call the autodiff engine's kernels.
#pragma once

#include <cmath>
#include <vector>

#include "sblab/tensor.hpp"

namespace oracle {

// Naive triple-loop matrix product.
inline sblab::Tensor matmul(const sblab::Tensor& a, const sblab::Tensor& b) {
    int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    sblab::Tensor out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
            out.at(i, j) = s;
        }
    return out;
}

// Direct-summation valid cross-correlation with bias.
inline sblab::Tensor conv2d(const sblab::Tensor& input, const sblab::Tensor& kernels,
                            const sblab::Tensor& bias) {
    int cin = input.shape[0], h = input.shape[1], w = input.shape[2];
    int cout = kernels.shape[0], kh = kernels.shape[2], kw = kernels.shape[3];
    int oh = h - kh + 1, ow = w - kw + 1;
    sblab::Tensor out({cout, oh, ow});
    for (int oc = 0; oc < cout; ++oc)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double s = bias.at(oc);
                for (int ic = 0; ic < cin; ++ic)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx)
                            s += input.at(ic, oy + ky, ox + kx) * kernels.at(oc, ic, ky, kx);
                out.at(oc, oy, ox) = s;
            }
    return out;
}

inline double rel_err(double a, double b) {
    double denom = std::max(std::abs(a), std::abs(b));
    if (denom == 0.0) return 0.0;
    return std::abs(a - b) / denom;
}

// Gradient agreement: relative error with an absolute floor for near-zero
// coordinates (finite differences bottom out around 1e-10 in f64).
inline bool grads_agree(double analytic, double numeric, double rel_tol, double abs_floor = 1e-7) {
    if (std::abs(analytic - numeric) <= abs_floor) return true;
    return rel_err(analytic, numeric) <= rel_tol;
}

}  // namespace oracle
