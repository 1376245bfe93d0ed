#pragma once

// Training loop: joint encoder-generator updates followed by discriminator
// and code-discriminator updates, Adam optimization, checkpointing, sample
// generation, and the evaluation entry point.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "volgen/config.hpp"
#include "volgen/errors.hpp"
#include "volgen/metrics.hpp"
#include "volgen/networks.hpp"
#include "volgen/rng.hpp"
#include "volgen/volume_data.hpp"

namespace volgen {

inline constexpr double kAdamEps = 1e-8;

template <typename T>
struct AdamState {
    long long t = 0;
    std::vector<Tensor<T>> m, v;
};

template <typename T>
AdamState<T> make_adam_state(const std::vector<ParamRef<T>>& params) {
    AdamState<T> st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& p : params) {
        st.m.emplace_back(p.var.shape());
        st.v.emplace_back(p.var.shape());
    }
    return st;
}

// p -= lr * m̂ / (√v̂ + eps), bias-corrected; parameters without a gradient
// this round are left untouched.
template <typename T>
void adam_step(std::vector<ParamRef<T>>& params, AdamState<T>& st, T lr, T beta1, T beta2) {
    if (st.m.size() != params.size())
        throw Error("optimizer state does not match parameter list");
    ++st.t;
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1), st.t));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2), st.t));
    for (size_t i = 0; i < params.size(); ++i) {
        const Tensor<T>* g = params[i].var.grad();
        if (!g) continue;
        Tensor<T>& p = params[i].var.value_mut();
        T* mp = st.m[i].ptr();
        T* vp = st.v[i].ptr();
        T* pp = p.ptr();
        const T* gp = g->ptr();
        for (std::int64_t j = 0; j < p.numel(); ++j) {
            mp[j] = beta1 * mp[j] + (T(1) - beta1) * gp[j];
            vp[j] = beta2 * vp[j] + (T(1) - beta2) * gp[j] * gp[j];
            T mhat = mp[j] / bc1;
            T vhat = vp[j] / bc2;
            pp[j] -= lr * mhat / (std::sqrt(vhat) + static_cast<T>(kAdamEps));
        }
    }
}

struct StepReport {
    long long step = 0;
    double l_eg = 0.0;
    double l_d = 0.0;
    double l_c = 0.0;
    double recon_l1 = 0.0;
    double gp_d = 0.0;
    double gp_c = 0.0;
    double wall_time = 0.0;  // seconds
};

struct TrainState {
    Config cfg;
    ModelParams<float> params;
    AdamState<float> opt_g, opt_d, opt_e, opt_c;
    long long global_step = 0;
    Rng rng{0};  // latent draws and gradient-penalty blends

    // batch stream snapshot, maintained by train_loop for exact resume
    std::string data_rng_state;
    std::vector<std::int64_t> data_perm;
    std::int64_t data_cursor = 0;

    // instrumented update counters (diagnostics, not serialized)
    long long eg_updates_done = 0;
    long long d_updates_done = 0;
    long long c_updates_done = 0;
};

TrainState init_state(const Config& cfg);

// One full training step on `batch` (shape (B,1,V,V,V)): eg_updates_per_step
// combined encoder-generator updates, one discriminator update, one code-
// discriminator update (mode-dependent). Throws DivergenceError on a
// non-finite loss.
StepReport train_step(TrainState& s, const Tensor<float>& batch, Rng& rng);

// Single full-model phases (one update each), exposed so update isolation can
// be asserted by parameter diffing; train_step composes these in the
// alpha-wgan-gp mode. gen_only confines the EG update to generator parameters.
void eg_phase(TrainState& s, const Tensor<float>& batch, Rng& rng, StepReport& rep,
              bool gen_only = false);
void d_phase(TrainState& s, const Tensor<float>& batch, Rng& rng, StepReport& rep);
void c_phase(TrainState& s, const Tensor<float>& batch, Rng& rng, StepReport& rep);

// Runs train_step until global_step reaches total_steps, streaming shuffled
// augmented batches, appending one row per step to out_dir/train_log.tsv and
// writing checkpoints every checkpoint_interval steps plus at completion.
void train_loop(TrainState& s, const Dataset& data, const std::string& out_dir,
                const std::function<void(const StepReport&)>& on_step = {});

// Checkpoint directory: manifest.json plus little-endian float32 blobs with
// shape headers; each blob's CRC-32 is recorded in the manifest.
void save_checkpoint(const TrainState& s, const std::string& path);
TrainState load_checkpoint(const std::string& path);

std::vector<Tensor<float>> generate_samples(const TrainState& s, std::int64_t n, Rng& rng);

// One generator volume per call, evaluation mode; the state must outlive the
// returned sampler.
Sampler generator_sampler(const TrainState& s);

MetricReport evaluate_generator(const TrainState& s, const Dataset& real, std::int64_t trials,
                                std::int64_t B, std::int64_t pairs, std::uint64_t seed);

const char* train_log_header();
std::string format_step_row(const StepReport& r);

}  // namespace volgen
