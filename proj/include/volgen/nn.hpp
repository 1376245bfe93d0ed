#pragma once

// Layer building blocks over the autodiff engine. Layers own their parameter
// Vars; networks register those Vars by name for optimizers and checkpoints.

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "volgen/autodiff.hpp"
#include "volgen/rng.hpp"

namespace volgen {

template <typename T>
struct ParamRef {
    std::string name;
    Var<T> var;
};

template <typename T>
struct BufferRef {
    std::string name;
    std::shared_ptr<Tensor<T>> tensor;
};

// Base for parameterized networks: name-keyed registry of trainable
// parameters and non-trainable buffers (running statistics).
template <typename T>
class Net {
public:
    std::vector<ParamRef<T>>& parameters() { return params_; }
    const std::vector<ParamRef<T>>& parameters() const { return params_; }
    std::vector<BufferRef<T>>& buffers() { return buffers_; }
    const std::vector<BufferRef<T>>& buffers() const { return buffers_; }

    void zero_grad() {
        for (auto& p : params_) p.var.zero_grad();
    }

    Var<T> register_param(const std::string& name, Tensor<T> init) {
        Var<T> v = Var<T>::leaf(std::move(init), /*requires_grad=*/true);
        params_.push_back({name, v});
        return v;
    }
    std::shared_ptr<Tensor<T>> register_buffer(const std::string& name, Tensor<T> init) {
        auto b = std::make_shared<Tensor<T>>(std::move(init));
        buffers_.push_back({name, b});
        return b;
    }

    static Tensor<T> normal_init(const Shape& shape, Rng& rng, T stddev) {
        Tensor<T> t(shape);
        for (auto& x : t.data) x = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

private:
    std::vector<ParamRef<T>> params_;
    std::vector<BufferRef<T>> buffers_;
};

constexpr double kWeightInitStd = 0.02;
constexpr double kBatchNormEps = 1e-5;
constexpr double kBatchNormMomentum = 0.1;

template <typename T>
struct Conv3dLayer {
    Var<T> w;  // (Cout, Cin, k, k, k)
    Var<T> b;  // (Cout)
    ConvSpec cs{};

    Conv3dLayer() = default;
    Conv3dLayer(Net<T>& net, const std::string& name, std::int64_t cin, std::int64_t cout,
                ConvSpec spec, Rng& rng)
        : cs(spec) {
        std::int64_t k = spec.kernel;
        w = net.register_param(name + ".weight",
                         Net<T>::normal_init({cout, cin, k, k, k}, rng, T(kWeightInitStd)));
        b = net.register_param(name + ".bias", Tensor<T>({cout}));
    }

    Var<T> operator()(const Var<T>& x) const { return add_channel(conv3d(x, w, cs), b); }
};

template <typename T>
struct LinearLayer {
    Var<T> w;  // (out, in)
    Var<T> b;  // (out)

    LinearLayer() = default;
    LinearLayer(Net<T>& net, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng) {
        w = net.register_param(name + ".weight", Net<T>::normal_init({out, in}, rng, T(kWeightInitStd)));
        b = net.register_param(name + ".bias", Tensor<T>({out}));
    }

    // x: (N, in) -> (N, out)
    Var<T> operator()(const Var<T>& x) const { return add_channel(matmul(x, w, false, true), b); }
};

// Batch normalization over the channel dim of (N, C, ...) tensors, composed
// from taped primitives so second-order gradients come for free. Training
// mode normalizes by batch statistics and updates running buffers; eval mode
// uses the running buffers.
template <typename T>
struct BatchNormLayer {
    Var<T> gamma, beta;                            // (C)
    std::shared_ptr<Tensor<T>> running_mean, running_var;  // (C)

    BatchNormLayer() = default;
    BatchNormLayer(Net<T>& net, const std::string& name, std::int64_t c) {
        gamma = net.register_param(name + ".weight", Tensor<T>::full({c}, T(1)));
        beta = net.register_param(name + ".bias", Tensor<T>({c}));
        running_mean = net.register_buffer(name + ".running_mean", Tensor<T>({c}));
        running_var = net.register_buffer(name + ".running_var", Tensor<T>::full({c}, T(1)));
    }

    Var<T> operator()(const Var<T>& x, bool training) const {
        if (training) {
            std::int64_t n = x.shape()[0], c = x.shape()[1];
            std::int64_t count = x.value().numel() / c;
            Var<T> mu = mean_channel(x);
            Var<T> xc = sub_channel(x, mu);
            Var<T> var = mean_channel(square(xc));
            {
                // Running-statistic update sits outside the graph; variance
                // is stored unbiased as is conventional.
                T m = T(kBatchNormMomentum);
                T bessel = count > 1 ? T(count) / T(count - 1) : T(1);
                const T* pm = mu.value().ptr();
                const T* pv = var.value().ptr();
                for (std::int64_t i = 0; i < c; ++i) {
                    running_mean->data[i] = (T(1) - m) * running_mean->data[i] + m * pm[i];
                    running_var->data[i] =
                        (T(1) - m) * running_var->data[i] + m * bessel * pv[i];
                }
                (void)n;
            }
            Var<T> inv = recip(sqrt_(add_scalar(var, T(kBatchNormEps))));
            return add_channel(mul_channel(mul_channel(xc, inv), gamma), beta);
        }
        Var<T> rm = Var<T>::constant(*running_mean);
        Tensor<T> inv_t = *running_var;
        for (auto& v : inv_t.data) v = T(1) / std::sqrt(v + T(kBatchNormEps));
        Var<T> inv = Var<T>::constant(std::move(inv_t));
        return add_channel(mul_channel(mul_channel(sub_channel(x, rm), inv), gamma), beta);
    }
};

}  // namespace volgen
