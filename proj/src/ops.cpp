#include <algorithm>
#include <cmath>

#include "istd/ops.hpp"

namespace istd {

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormOptions opt,
                      BnMode mode, RunningStats<T>& stats) {
    if (!(opt.eps > 0.0)) throw ValueError("batchnorm2d: eps must be > 0");
    const Shape s = input.shape();
    const auto channels = static_cast<std::size_t>(s.c);
    if (gamma.numel() != channels || beta.numel() != channels) {
        throw ShapeError("batchnorm2d: gamma/beta length must equal " + std::to_string(s.c) + " channels");
    }
    if (stats.mean.size() != channels || stats.var.size() != channels) {
        throw ShapeError("batchnorm2d: running statistics sized for a different channel count");
    }
    const std::size_t plane = s.plane();
    const std::size_t count = static_cast<std::size_t>(s.n) * plane;
    const T* x = input.data().data();
    const T* g = gamma.data().data();
    const T* b = beta.data().data();

    std::vector<T> mean(channels), inv_std(channels);
    if (mode == BnMode::train) {
        for (std::size_t c = 0; c < channels; ++c) {
            T acc = 0;
            for (int n = 0; n < s.n; ++n) {
                const T* p = x + (static_cast<std::size_t>(n) * channels + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) acc += p[i];
            }
            const T mu = acc / static_cast<T>(count);
            T sq = 0;
            for (int n = 0; n < s.n; ++n) {
                const T* p = x + (static_cast<std::size_t>(n) * channels + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mu) * (p[i] - mu);
            }
            const T var = sq / static_cast<T>(count);
            mean[c] = mu;
            inv_std[c] = T(1) / std::sqrt(var + static_cast<T>(opt.eps));
            const T m = static_cast<T>(opt.momentum);
            const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
            stats.mean[c] = (T(1) - m) * stats.mean[c] + m * mu;
            stats.var[c] = (T(1) - m) * stats.var[c] + m * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < channels; ++c) {
            mean[c] = stats.mean[c];
            inv_std[c] = T(1) / std::sqrt(stats.var[c] + static_cast<T>(opt.eps));
        }
    }

    std::vector<T> out(s.numel());
    for (int n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * plane;
            const T scale = g[c] * inv_std[c];
            const T shift = b[c] - mean[c] * scale;
            for (std::size_t i = 0; i < plane; ++i) out[off + i] = x[off + i] * scale + shift;
        }
    }

    return Tensor<T>::from_op(
        s, std::move(out), {input, gamma, beta}, "batchnorm2d",
        [s, mean = std::move(mean), inv_std = std::move(inv_std), mode](Node<T>& self) {
            const Node<T>& xn = *self.inputs[0];
            const Node<T>& gn = *self.inputs[1];
            const std::size_t channels = static_cast<std::size_t>(s.c);
            const std::size_t plane = s.plane();
            const T count = static_cast<T>(static_cast<std::size_t>(s.n) * plane);
            const T* gy = self.grad.data();
            const T* x = xn.value.data();
            for (std::size_t c = 0; c < channels; ++c) {
                T sum_gy = 0, sum_gy_xhat = 0;
                for (int n = 0; n < s.n; ++n) {
                    const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        const T xhat = (x[off + i] - mean[c]) * inv_std[c];
                        sum_gy += gy[off + i];
                        sum_gy_xhat += gy[off + i] * xhat;
                    }
                }
                if (self.inputs[1]->requires_grad) self.inputs[1]->grad[c] += sum_gy_xhat;
                if (self.inputs[2]->requires_grad) self.inputs[2]->grad[c] += sum_gy;
                if (!self.inputs[0]->requires_grad) continue;
                T* gx = self.inputs[0]->grad.data();
                const T gam = gn.value[c];
                for (int n = 0; n < s.n; ++n) {
                    const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * plane;
                    if (mode == BnMode::eval) {
                        for (std::size_t i = 0; i < plane; ++i) gx[off + i] += gy[off + i] * gam * inv_std[c];
                    } else {
                        for (std::size_t i = 0; i < plane; ++i) {
                            const T xhat = (x[off + i] - mean[c]) * inv_std[c];
                            gx[off + i] +=
                                gam * inv_std[c] * (gy[off + i] - sum_gy / count - xhat * sum_gy_xhat / count);
                        }
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, int kernel, int stride) {
    if (kernel < 1 || stride < 1) throw ValueError("maxpool2d: kernel and stride must be >= 1");
    const Shape s = input.shape();
    if (kernel > s.h || kernel > s.w) {
        throw ShapeError("maxpool2d: window " + std::to_string(kernel) + " larger than input " + s.str());
    }
    const int ho = (s.h - kernel) / stride + 1;
    const int wo = (s.w - kernel) / stride + 1;
    const Shape os{s.n, s.c, ho, wo};
    std::vector<T> out(os.numel());
    std::vector<std::size_t> argmax(os.numel());
    const T* x = input.data().data();
    std::size_t o = 0;
    for (int nc = 0; nc < s.n * s.c; ++nc) {
        const std::size_t base = static_cast<std::size_t>(nc) * s.plane();
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox, ++o) {
                std::size_t best = base + static_cast<std::size_t>(oy * stride) * s.w + ox * stride;
                for (int ky = 0; ky < kernel; ++ky) {
                    for (int kx = 0; kx < kernel; ++kx) {
                        const std::size_t idx = base + static_cast<std::size_t>(oy * stride + ky) * s.w + ox * stride + kx;
                        if (x[idx] > x[best]) best = idx;
                    }
                }
                out[o] = x[best];
                argmax[o] = best;
            }
        }
    }
    return Tensor<T>::from_op(os, std::move(out), {input}, "maxpool2d",
                              [argmax = std::move(argmax)](Node<T>& self) {
                                  T* gx = self.inputs[0]->grad.data();
                                  for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += self.grad[i];
                              });
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& input) {
    const Shape s = input.shape();
    const Shape os{s.n, s.c, s.h * 2, s.w * 2};
    std::vector<T> out(os.numel());
    const T* x = input.data().data();
    for (int nc = 0; nc < s.n * s.c; ++nc) {
        const T* src = x + static_cast<std::size_t>(nc) * s.plane();
        T* dst = out.data() + static_cast<std::size_t>(nc) * os.plane();
        for (int y = 0; y < os.h; ++y) {
            for (int xx = 0; xx < os.w; ++xx) dst[y * os.w + xx] = src[(y / 2) * s.w + xx / 2];
        }
    }
    return Tensor<T>::from_op(os, std::move(out), {input}, "upsample_nearest2x", [s, os](Node<T>& self) {
        T* gx = self.inputs[0]->grad.data();
        for (int nc = 0; nc < s.n * s.c; ++nc) {
            const T* gy = self.grad.data() + static_cast<std::size_t>(nc) * os.plane();
            T* dst = gx + static_cast<std::size_t>(nc) * s.plane();
            for (int y = 0; y < os.h; ++y) {
                for (int xx = 0; xx < os.w; ++xx) dst[(y / 2) * s.w + xx / 2] += gy[y * os.w + xx];
            }
        }
    });
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> inputs) {
    if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
    const Shape first = inputs[0].shape();
    int channels = 0;
    for (const auto& t : inputs) {
        const Shape& s = t.shape();
        if (s.n != first.n || s.h != first.h || s.w != first.w) {
            throw ShapeError("concat_channels: " + s.str() + " does not match " + first.str() + " in n, h, w");
        }
        channels += s.c;
    }
    const Shape os{first.n, channels, first.h, first.w};
    std::vector<T> out(os.numel());
    const std::size_t plane = first.plane();
    std::vector<int> offsets;
    int off = 0;
    for (const auto& t : inputs) {
        const int c = t.shape().c;
        for (int n = 0; n < first.n; ++n) {
            std::copy_n(t.data().data() + static_cast<std::size_t>(n) * c * plane, static_cast<std::size_t>(c) * plane,
                        out.data() + (static_cast<std::size_t>(n) * channels + off) * plane);
        }
        offsets.push_back(off);
        off += c;
    }
    return Tensor<T>::from_op(
        os, std::move(out), std::vector<Tensor<T>>(inputs.begin(), inputs.end()), "concat_channels",
        [os, plane, offsets = std::move(offsets)](Node<T>& self) {
            for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                Node<T>& in = *self.inputs[i];
                if (!in.requires_grad) continue;
                const int c = in.shape.c;
                for (int n = 0; n < os.n; ++n) {
                    const T* src = self.grad.data() + (static_cast<std::size_t>(n) * os.c + offsets[i]) * plane;
                    T* dst = in.grad.data() + static_cast<std::size_t>(n) * c * plane;
                    for (std::size_t j = 0; j < static_cast<std::size_t>(c) * plane; ++j) dst[j] += src[j];
                }
            }
        });
}

namespace {
template <typename T>
T logistic(T v) {
    const T e = std::exp(-std::abs(v));
    return (v >= 0 ? T(1) : e) / (T(1) + e);
}
}  // namespace

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
    std::vector<T> out(input.numel());
    const auto x = input.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = logistic(x[i]);
    return Tensor<T>::from_op(input.shape(), std::move(out), {input}, "sigmoid", [](Node<T>& self) {
        T* gx = self.inputs[0]->grad.data();
        for (std::size_t i = 0; i < self.value.size(); ++i) {
            const T y = self.value[i];
            gx[i] += self.grad[i] * y * (T(1) - y);
        }
    });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& input) {
    std::vector<T> out(input.numel());
    std::vector<T> sig(input.numel());
    const auto x = input.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        sig[i] = logistic(x[i]);
        out[i] = x[i] * sig[i];
    }
    return Tensor<T>::from_op(input.shape(), std::move(out), {input}, "silu", [sig = std::move(sig)](Node<T>& self) {
        const T* x = self.inputs[0]->value.data();
        T* gx = self.inputs[0]->grad.data();
        for (std::size_t i = 0; i < self.value.size(); ++i) {
            const T s = sig[i];
            gx[i] += self.grad[i] * s * (T(1) + x[i] * (T(1) - s));
        }
    });
}

std::vector<int> channel_shuffle_permutation(int channels, int groups) {
    if (groups < 1 || channels % groups != 0) {
        throw ShapeError("channel_shuffle: " + std::to_string(channels) + " channels not divisible by " +
                         std::to_string(groups) + " groups");
    }
    const int per = channels / groups;
    std::vector<int> src(static_cast<std::size_t>(channels));
    for (int g = 0; g < groups; ++g) {
        for (int j = 0; j < per; ++j) src[static_cast<std::size_t>(j * groups + g)] = g * per + j;
    }
    return src;
}

template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& input, int groups) {
    const Shape s = input.shape();
    const std::vector<int> src = channel_shuffle_permutation(s.c, groups);
    const std::size_t plane = s.plane();
    std::vector<T> out(s.numel());
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            std::copy_n(input.data().data() + (static_cast<std::size_t>(n) * s.c + src[c]) * plane, plane,
                        out.data() + (static_cast<std::size_t>(n) * s.c + c) * plane);
        }
    }
    return Tensor<T>::from_op(s, std::move(out), {input}, "channel_shuffle", [s, src, plane](Node<T>& self) {
        T* gx = self.inputs[0]->grad.data();
        for (int n = 0; n < s.n; ++n) {
            for (int c = 0; c < s.c; ++c) {
                const T* gy = self.grad.data() + (static_cast<std::size_t>(n) * s.c + c) * plane;
                T* dst = gx + (static_cast<std::size_t>(n) * s.c + src[c]) * plane;
                for (std::size_t i = 0; i < plane; ++i) dst[i] += gy[i];
            }
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
    T acc = 0;
    for (const T v : input.data()) acc += v;
    return Tensor<T>::from_op(Shape{}, std::vector<T>{acc}, {input}, "sum", [](Node<T>& self) {
        const T g = self.grad[0];
        for (T& v : self.inputs[0]->grad) v += g;
    });
}

namespace {
void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (!(a == b)) throw ShapeError(std::string(op) + ": shapes " + a.str() + " and " + b.str() + " differ");
}
}  // namespace

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, "mul", [](Node<T>& self) {
        Node<T>& an = *self.inputs[0];
        Node<T>& bn = *self.inputs[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (an.requires_grad) an.grad[i] += self.grad[i] * bn.value[i];
            if (bn.requires_grad) bn.grad[i] += self.grad[i] * an.value[i];
        }
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, "add", [](Node<T>& self) {
        for (auto& in : self.inputs) {
            if (!in->requires_grad) continue;
            for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
        }
    });
}

#define ISTD_INSTANTIATE_OPS(T)                                                                                  \
    template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormOptions,      \
                                   BnMode, RunningStats<T>&);                                                    \
    template Tensor<T> maxpool2d(const Tensor<T>&, int, int);                                                    \
    template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                                     \
    template Tensor<T> concat_channels(std::span<const Tensor<T>>);                                              \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                                \
    template Tensor<T> silu(const Tensor<T>&);                                                                   \
    template Tensor<T> channel_shuffle(const Tensor<T>&, int);                                                   \
    template Tensor<T> sum(const Tensor<T>&);                                                                    \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                  \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);

ISTD_INSTANTIATE_OPS(float)
ISTD_INSTANTIATE_OPS(double)

}  // namespace istd
