#include <Eigen/Core>

#include <algorithm>
#include <mutex>

#include "istd/ops.hpp"

namespace istd {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// GEMM blocking follows the cache sizes Eigen detects; pinning them keeps the summation order,
// and therefore the bits, identical from machine to machine.
void pin_gemm_blocking() {
    static std::once_flag once;
    std::call_once(once, [] { Eigen::setCpuCacheSizes(32 * 1024, 256 * 1024, 2 * 1024 * 1024); });
}

struct ConvGeometry {
    int c_in, h, w;
    int k, stride, pad;
    int ho, wo;
};

// Output columns [lo, hi) read an input column inside [0, w).
inline void valid_range(const ConvGeometry& g, int kx, int& lo, int& hi) {
    const int off = kx - g.pad;
    lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
    hi = g.w - off <= 0 ? 0 : std::min(g.wo, (g.w - off - 1) / g.stride + 1);
    lo = std::min(lo, hi);
}

// col is (c * k * k) x (ho * wo), rows ordered (channel, ky, kx).
template <typename T>
void im2col(const T* src, int channels, const ConvGeometry& g, T* col) {
    const int plane_out = g.ho * g.wo;
    for (int c = 0; c < channels; ++c) {
        const T* chan = src + static_cast<std::size_t>(c) * g.h * g.w;
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                T* row = col + (static_cast<std::size_t>(c) * g.k * g.k + ky * g.k + kx) * plane_out;
                int lo, hi;
                valid_range(g, kx, lo, hi);
                const int off = kx - g.pad;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    T* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.wo, T(0));
                        continue;
                    }
                    const T* line = chan + static_cast<std::size_t>(iy) * g.w + off;
                    std::fill(dst, dst + lo, T(0));
                    if (g.stride == 1) {
                        std::copy(line + lo, line + hi, dst + lo);
                    } else {
                        for (int ox = lo; ox < hi; ++ox) dst[ox] = line[ox * g.stride];
                    }
                    std::fill(dst + hi, dst + g.wo, T(0));
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, int channels, const ConvGeometry& g, T* dst) {
    const int plane_out = g.ho * g.wo;
    for (int c = 0; c < channels; ++c) {
        T* chan = dst + static_cast<std::size_t>(c) * g.h * g.w;
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                const T* row = col + (static_cast<std::size_t>(c) * g.k * g.k + ky * g.k + kx) * plane_out;
                int lo, hi;
                valid_range(g, kx, lo, hi);
                const int off = kx - g.pad;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    T* line = chan + static_cast<std::size_t>(iy) * g.w + off;
                    const T* src = row + oy * g.wo;
                    for (int ox = lo; ox < hi; ++ox) line[ox * g.stride] += src[ox];
                }
            }
        }
    }
}

bool is_pointwise(const ConvGeometry& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt) {
    pin_gemm_blocking();
    const Shape& xs = input.shape();
    const Shape& ws = weight.shape();
    if (opt.groups < 1 || opt.stride < 1 || opt.padding < 0) {
        throw ValueError("conv2d: stride/groups must be >= 1 and padding >= 0");
    }
    if (ws.h != ws.w) throw ShapeError("conv2d: kernel must be square, got " + ws.str());
    if (xs.c % opt.groups != 0 || ws.n % opt.groups != 0) {
        throw ShapeError("conv2d: channels (in " + std::to_string(xs.c) + ", out " + std::to_string(ws.n) +
                         ") not divisible by groups " + std::to_string(opt.groups));
    }
    if (ws.c * opt.groups != xs.c) {
        throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels but weight " + ws.str() +
                         " expects " + std::to_string(ws.c * opt.groups));
    }
    if (bias.defined() && (bias.numel() != static_cast<std::size_t>(ws.n))) {
        throw ShapeError("conv2d: bias " + bias.shape().str() + " does not match " + std::to_string(ws.n) +
                         " output channels");
    }
    const int k = ws.h;
    const int ho = (xs.h + 2 * opt.padding - k) / opt.stride + 1;
    const int wo = (xs.w + 2 * opt.padding - k) / opt.stride + 1;
    if (xs.h + 2 * opt.padding < k || xs.w + 2 * opt.padding < k) {
        throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " + xs.str());
    }

    const int groups = opt.groups;
    const int cin_g = xs.c / groups;
    const int cout_g = ws.n / groups;
    const ConvGeometry geo{cin_g, xs.h, xs.w, k, opt.stride, opt.padding, ho, wo};
    const int kk = cin_g * k * k;
    const int plane_out = ho * wo;
    const std::size_t plane_in = xs.plane();

    const Shape out_shape{xs.n, ws.n, ho, wo};
    std::vector<T> out(out_shape.numel());
    std::vector<T> col(is_pointwise(geo) ? 0 : static_cast<std::size_t>(kk) * plane_out);
    const T* x = input.data().data();
    const T* wt = weight.data().data();

    for (int n = 0; n < xs.n; ++n) {
        for (int g = 0; g < groups; ++g) {
            const T* src = x + (static_cast<std::size_t>(n) * xs.c + static_cast<std::size_t>(g) * cin_g) * plane_in;
            const T* colp = src;
            if (!is_pointwise(geo)) {
                im2col(src, cin_g, geo, col.data());
                colp = col.data();
            }
            T* dst = out.data() + (static_cast<std::size_t>(n) * ws.n + static_cast<std::size_t>(g) * cout_g) * plane_out;
            ConstMapMat<T> wmat(wt + static_cast<std::size_t>(g) * cout_g * kk, cout_g, kk);
            ConstMapMat<T> cmat(colp, kk, plane_out);
            MapMat<T> omat(dst, cout_g, plane_out);
            omat.noalias() = wmat * cmat;
        }
        if (bias.defined()) {
            const T* b = bias.data().data();
            for (int c = 0; c < ws.n; ++c) {
                T* dst = out.data() + (static_cast<std::size_t>(n) * ws.n + c) * plane_out;
                for (int i = 0; i < plane_out; ++i) dst[i] += b[c];
            }
        }
    }

    std::vector<Tensor<T>> inputs{input, weight};
    if (bias.defined()) inputs.push_back(bias);
    const bool has_bias = bias.defined();
    return Tensor<T>::from_op(
        out_shape, std::move(out), std::move(inputs), "conv2d", [=](Node<T>& self) {
            Node<T>& xn = *self.inputs[0];
            Node<T>& wn = *self.inputs[1];
            const T* gy = self.grad.data();
            std::vector<T> colb(is_pointwise(geo) ? 0 : static_cast<std::size_t>(kk) * plane_out);
            std::vector<T> dcol(is_pointwise(geo) ? 0 : static_cast<std::size_t>(kk) * plane_out);
            for (int n = 0; n < xs.n; ++n) {
                for (int g = 0; g < groups; ++g) {
                    const std::size_t in_off =
                        (static_cast<std::size_t>(n) * xs.c + static_cast<std::size_t>(g) * cin_g) * plane_in;
                    const T* gyp = gy + (static_cast<std::size_t>(n) * ws.n + static_cast<std::size_t>(g) * cout_g) * plane_out;
                    ConstMapMat<T> gmat(gyp, cout_g, plane_out);
                    if (wn.requires_grad) {
                        const T* colp = xn.value.data() + in_off;
                        if (!is_pointwise(geo)) {
                            im2col(colp, cin_g, geo, colb.data());
                            colp = colb.data();
                        }
                        ConstMapMat<T> cmat(colp, kk, plane_out);
                        MapMat<T> gw(wn.grad.data() + static_cast<std::size_t>(g) * cout_g * kk, cout_g, kk);
                        gw.noalias() += gmat * cmat.transpose();
                    }
                    if (xn.requires_grad) {
                        ConstMapMat<T> wmat(wn.value.data() + static_cast<std::size_t>(g) * cout_g * kk, cout_g, kk);
                        if (is_pointwise(geo)) {
                            MapMat<T> gx(xn.grad.data() + in_off, kk, plane_out);
                            gx.noalias() += wmat.transpose() * gmat;
                        } else {
                            MapMat<T> dc(dcol.data(), kk, plane_out);
                            dc.noalias() = wmat.transpose() * gmat;
                            col2im(dcol.data(), cin_g, geo, xn.grad.data() + in_off);
                        }
                    }
                }
                if (has_bias && self.inputs[2]->requires_grad) {
                    T* gb = self.inputs[2]->grad.data();
                    for (int c = 0; c < ws.n; ++c) {
                        const T* gyp = gy + (static_cast<std::size_t>(n) * ws.n + c) * plane_out;
                        T acc = 0;
                        for (int i = 0; i < plane_out; ++i) acc += gyp[i];
                        gb[c] += acc;
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& weight, int stride, int padding) {
    const Shape& ws = weight.shape();
    if (ws.c != 1 || ws.n != input.shape().c) {
        throw ShapeError("depthwise_conv2d: weight " + ws.str() + " does not match " +
                         std::to_string(input.shape().c) + " input channels (expected (c, 1, k, k))");
    }
    return conv2d(input, weight, Tensor<T>{}, Conv2dOptions{stride, padding, input.shape().c});
}

template Tensor<float> conv2d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, Conv2dOptions);
template Tensor<double> conv2d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, Conv2dOptions);
template Tensor<float> depthwise_conv2d(const Tensor<float>&, const Tensor<float>&, int, int);
template Tensor<double> depthwise_conv2d(const Tensor<double>&, const Tensor<double>&, int, int);

}  // namespace istd
