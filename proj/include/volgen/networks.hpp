#pragma once

// The four networks: generator G, discriminator D, encoder E, and code
// discriminator C. D and E share one topology (five 4^3 convolutions) and
// differ only in the final layer's output channels. G mirrors the critic
// scheme with nearest-neighbor upscales and 3^3 convolutions; C is a
// three-layer MLP over latent codes.

#include <string>

#include "volgen/config.hpp"
#include "volgen/nn.hpp"

namespace volgen {

// Five-layer convolution stack mapping (N,1,V,V,V) to (N,out_ch,1,1,1):
// layers 1-4 use kernel 4, stride 2, padding 1 (each halves the extent);
// layer 5 collapses the remaining (V/16)^3 block with a full-size kernel.
// LeakyReLU after layers 1-4; batch normalization after layers 2-4 only.
template <typename T>
class ConvCritic : public Net<T> {
public:
    ConvCritic(const ModelConfig& mc, std::int64_t volume_size, std::int64_t out_channels,
               Rng& rng)
        : volume_(volume_size), out_channels_(out_channels), slope_(T(mc.leaky_slope)) {
        if (volume_size < 16 || (volume_size & (volume_size - 1)) != 0)
            throw ConfigError("volume_size must be a power of two >= 16");
        const auto& ch = mc.d_channels;
        ConvSpec half{4, 2, 1};
        conv_[0] = Conv3dLayer<T>(*this, "conv1", 1, ch[0], half, rng);
        conv_[1] = Conv3dLayer<T>(*this, "conv2", ch[0], ch[1], half, rng);
        conv_[2] = Conv3dLayer<T>(*this, "conv3", ch[1], ch[2], half, rng);
        conv_[3] = Conv3dLayer<T>(*this, "conv4", ch[2], ch[3], half, rng);
        int last = static_cast<int>(volume_size / 16);
        conv_[4] = Conv3dLayer<T>(*this, "conv5", ch[3], out_channels, {last, 1, 0}, rng);
        bn_[0] = BatchNormLayer<T>(*this, "bn2", ch[1]);
        bn_[1] = BatchNormLayer<T>(*this, "bn3", ch[2]);
        bn_[2] = BatchNormLayer<T>(*this, "bn4", ch[3]);
    }

    // -> (N, out_channels)
    Var<T> forward(const Var<T>& x, bool training) const {
        const Shape& s = x.shape();
        if (s.size() != 5 || s[1] != 1 || s[2] != volume_ || s[3] != volume_ || s[4] != volume_)
            throw DataError("critic input must be (N,1," + std::to_string(volume_) + "^3), got " +
                            shape_str(s));
        Var<T> h = leaky_relu(conv_[0](x), slope_);
        h = leaky_relu(bn_[0](conv_[1](h), training), slope_);
        h = leaky_relu(bn_[1](conv_[2](h), training), slope_);
        h = leaky_relu(bn_[2](conv_[3](h), training), slope_);
        h = conv_[4](h);
        return reshape(h, {s[0], out_channels_});
    }

    std::int64_t volume() const { return volume_; }

private:
    std::int64_t volume_;
    std::int64_t out_channels_;
    T slope_;
    Conv3dLayer<T> conv_[5];
    BatchNormLayer<T> bn_[3];
};

template <typename T>
class Discriminator : public ConvCritic<T> {
public:
    Discriminator(const ModelConfig& mc, std::int64_t volume_size, Rng& rng)
        : ConvCritic<T>(mc, volume_size, 1, rng) {}

    // -> (N) critic scores, unbounded
    Var<T> forward(const Var<T>& x, bool training) const {
        Var<T> h = ConvCritic<T>::forward(x, training);
        return reshape(h, {h.shape()[0]});
    }
};

template <typename T>
class Encoder : public ConvCritic<T> {
public:
    Encoder(const ModelConfig& mc, std::int64_t volume_size, std::int64_t latent_size, Rng& rng)
        : ConvCritic<T>(mc, volume_size, latent_size, rng) {}

    // -> (N, latent_size) deterministic codes z_e
    Var<T> forward(const Var<T>& x, bool training) const {
        return ConvCritic<T>::forward(x, training);
    }
};

// Affine projection of z to base_channels x (V/16)^3, then four stages of
// [nearest-neighbor 2x upscale -> 3^3 conv -> batch norm -> ReLU] with
// channels halving each stage, then a final 3^3 convolution to one channel
// under tanh.
template <typename T>
class Generator : public Net<T> {
public:
    Generator(const ModelConfig& mc, std::int64_t volume_size, std::int64_t latent_size, Rng& rng)
        : volume_(volume_size), latent_(latent_size), base_(mc.g_base_channels) {
        if (volume_size < 16 || (volume_size & (volume_size - 1)) != 0)
            throw ConfigError("volume_size must be a power of two >= 16");
        v0_ = volume_size / 16;
        fc_ = LinearLayer<T>(*this, "fc", latent_size, base_ * v0_ * v0_ * v0_, rng);
        ConvSpec same{3, 1, 1};
        std::int64_t c = base_;
        for (int i = 0; i < 4; ++i) {
            std::string tag = std::to_string(i + 1);
            conv_[i] = Conv3dLayer<T>(*this, "conv" + tag, c, c / 2, same, rng);
            bn_[i] = BatchNormLayer<T>(*this, "bn" + tag, c / 2);
            c /= 2;
        }
        out_conv_ = Conv3dLayer<T>(*this, "conv5", c, 1, same, rng);
    }

    // z: (N, latent) -> (N,1,V,V,V) in (-1,1)
    Var<T> forward(const Var<T>& z, bool training) const {
        const Shape& s = z.shape();
        if (s.size() != 2 || s[1] != latent_)
            throw DataError("generator input must be (N," + std::to_string(latent_) + "), got " +
                            shape_str(s));
        Var<T> h = reshape(fc_(z), {s[0], base_, v0_, v0_, v0_});
        for (int i = 0; i < 4; ++i)
            h = relu(bn_[i](conv_[i](nn_upsample2(h)), training));
        return tanh_(out_conv_(h));
    }

    std::int64_t latent_size() const { return latent_; }
    std::int64_t volume() const { return volume_; }

private:
    std::int64_t volume_, latent_, base_, v0_;
    LinearLayer<T> fc_;
    Conv3dLayer<T> conv_[4];
    BatchNormLayer<T> bn_[4];
    Conv3dLayer<T> out_conv_;
};

// Three fully-connected layers latent -> H -> H -> 1 with batch norm and
// LeakyReLU between them; no terminal activation.
template <typename T>
class CodeDiscriminator : public Net<T> {
public:
    CodeDiscriminator(const ModelConfig& mc, std::int64_t latent_size, Rng& rng)
        : latent_(latent_size), slope_(T(mc.leaky_slope)) {
        std::int64_t h = mc.code_hidden_width;
        fc1_ = LinearLayer<T>(*this, "fc1", latent_size, h, rng);
        bn1_ = BatchNormLayer<T>(*this, "bn1", h);
        fc2_ = LinearLayer<T>(*this, "fc2", h, h, rng);
        bn2_ = BatchNormLayer<T>(*this, "bn2", h);
        fc3_ = LinearLayer<T>(*this, "fc3", h, 1, rng);
    }

    // z: (N, latent) -> (N) critic scores
    Var<T> forward(const Var<T>& z, bool training) const {
        const Shape& s = z.shape();
        if (s.size() != 2 || s[1] != latent_)
            throw DataError("code discriminator input must be (N," + std::to_string(latent_) +
                            "), got " + shape_str(s));
        Var<T> h = leaky_relu(bn1_(fc1_(z), training), slope_);
        h = leaky_relu(bn2_(fc2_(h), training), slope_);
        Var<T> out = fc3_(h);
        return reshape(out, {s[0]});
    }

private:
    std::int64_t latent_;
    T slope_;
    LinearLayer<T> fc1_, fc2_, fc3_;
    BatchNormLayer<T> bn1_, bn2_;
};

// The four networks drawn from one stream in a fixed order (G, D, E, C) so a
// seed pins every parameter.
template <typename T>
struct ModelParams {
    Generator<T> g;
    Discriminator<T> d;
    Encoder<T> e;
    CodeDiscriminator<T> c;
};

template <typename T>
ModelParams<T> init_params(const ModelConfig& mc, const TrainConfig& tc, Rng& rng) {
    mc.validate();
    tc.validate();
    return ModelParams<T>{Generator<T>(mc, tc.volume_size, tc.latent_size, rng),
                          Discriminator<T>(mc, tc.volume_size, rng),
                          Encoder<T>(mc, tc.volume_size, tc.latent_size, rng),
                          CodeDiscriminator<T>(mc, tc.latent_size, rng)};
}

}  // namespace volgen
