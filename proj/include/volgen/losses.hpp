#pragma once

// Adversarial objectives: the WGAN-GP discriminator/generator pair with two
// fake populations (reconstructed and random-generated), the code-space
// critic pair, and the cross-entropy baseline losses.

#include <utility>

#include "volgen/autodiff.hpp"
#include "volgen/rng.hpp"

namespace volgen {

template <typename T>
struct LossBundle {
    T l_d = 0, l_g = 0, l_e = 0, l_c = 0, l_eg = 0;
    T gp_d = 0, gp_c = 0, recon_l1 = 0;
};

template <typename T>
Var<T> one_minus(const Var<T>& x) {
    return sub_scalar(neg(x), T(-1));
}

// E_xhat[(||grad_xhat critic(xhat)||_2 - 1)^2] with xhat = eps*real +
// (1-eps)*fake, eps ~ U[0,1] drawn per sample and shared across that
// sample's elements. The result stays differentiable with respect to the
// critic's parameters (the gradient is taken with create_graph).
template <typename T, typename Critic>
Var<T> gradient_penalty(Critic&& critic, const Var<T>& real, const Var<T>& fake, Rng& rng) {
    if (!same_shape(real.shape(), fake.shape()))
        throw DataError("gradient_penalty: real/fake shape mismatch " + shape_str(real.shape()) +
                        " vs " + shape_str(fake.shape()));
    const Tensor<T>& rv = real.value();
    const Tensor<T>& fv = fake.value();
    std::int64_t n = rv.shape[0];
    std::int64_t inner = rv.numel() / n;
    Tensor<T> xh(rv.shape);
    for (std::int64_t i = 0; i < n; ++i) {
        T eps = static_cast<T>(rng.uniform());
        const T* pr = rv.ptr() + i * inner;
        const T* pf = fv.ptr() + i * inner;
        T* po = xh.ptr() + i * inner;
        for (std::int64_t j = 0; j < inner; ++j) po[j] = eps * pr[j] + (T(1) - eps) * pf[j];
    }
    Var<T> x_hat = Var<T>::leaf(std::move(xh), /*requires_grad=*/true);
    Var<T> scores = critic(x_hat);
    // A critic ignoring its input has zero gradient everywhere: (0-1)^2 = 1.
    if (!scores.requires_grad()) return Var<T>::scalar(T(1));
    Var<T> g = grad_wrt(sum_all(scores), x_hat, /*create_graph=*/true);
    if (!g.value().all_finite()) throw Error("non-finite gradient in gradient_penalty");
    Var<T> norms = sqrt_(sum_per_sample(square(g)));
    return mean_all(square(sub_scalar(norms, T(1))));
}

// Eq. 1: mean D(G(z_e)) + mean D(G(z_r)) - 2 mean D(x_real) + lambda1 * gp.
template <typename T>
Var<T> loss_discriminator(const Var<T>& d_real, const Var<T>& d_fake_rand,
                          const Var<T>& d_fake_rec, const Var<T>& gp, T lambda1) {
    return add(add(mean_all(d_fake_rec), mean_all(d_fake_rand)),
               add(scale(mean_all(d_real), T(-2)), scale(gp, lambda1)));
}

// Eq. 2: -mean D(G(z_e)) - mean D(G(z_r)) + lambda2 * mean |x_real - x_rec|.
template <typename T>
Var<T> loss_generator(const Var<T>& d_fake_rand, const Var<T>& d_fake_rec, const Var<T>& x_real,
                      const Var<T>& x_rec, T lambda2) {
    Var<T> recon = mean_all(abs_(sub(x_real, x_rec)));
    return add(add(neg(mean_all(d_fake_rec)), neg(mean_all(d_fake_rand))), scale(recon, lambda2));
}

// Eq. 3 over latent codes: z_e is the fake population, z_r the real one.
template <typename T>
Var<T> loss_code_discriminator(const Var<T>& c_fake, const Var<T>& c_real, const Var<T>& gp,
                               T lambda1) {
    return add(sub(mean_all(c_fake), mean_all(c_real)), scale(gp, lambda1));
}

template <typename T>
Var<T> loss_encoder(const Var<T>& c_fake) {
    return neg(mean_all(c_fake));
}

// Cross-entropy baseline pair on sigmoid probabilities, clamped away from
// {0,1} before the logs.
template <typename T>
std::pair<Var<T>, Var<T>> loss_vanilla_gan(const Var<T>& d_real, const Var<T>& d_fake) {
    const T lo = T(1e-7), hi = T(1) - T(1e-7);
    Var<T> pr = clamp(d_real, lo, hi);
    Var<T> pf = clamp(d_fake, lo, hi);
    Var<T> d_loss = neg(add(mean_all(log_(pr)), mean_all(log_(one_minus(pf)))));
    Var<T> g_loss = neg(mean_all(log_(pf)));
    return {d_loss, g_loss};
}

}  // namespace volgen
