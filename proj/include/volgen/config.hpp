#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace volgen {

enum class TrainMode {
    AlphaWganGp,    // full model: E/G joint updates, Wasserstein critics, gradient penalty
    AlphaGanVanilla,  // ablation: cross-entropy adversarial losses, no penalty
    WganGpOnly,     // ablation: plain WGAN-GP, encoder and code critic never updated
};

std::string to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& s);

// Experiment hyperparameters. Immutable after load; shared read-only.
struct TrainConfig {
    int latent_size = 1000;
    int volume_size = 64;   // cubic edge length; power of two >= 16
    int batch_size = 4;
    double learning_rate = 0.0002;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.999;
    double lambda1 = 10.0;  // gradient-penalty weight
    double lambda2 = 10.0;  // reconstruction weight
    int eg_updates_per_step = 2;
    int d_updates_per_step = 1;
    int c_updates_per_step = 1;
    long long total_steps = 1000;
    TrainMode mode = TrainMode::AlphaWganGp;
    std::uint64_t seed = 42;
    long long checkpoint_interval = 500;
    // Second and later EG sub-updates touch generator parameters only.
    bool second_eg_update_generator_only = false;
    // Penalize the critic on both fake populations instead of the random branch only.
    bool gp_on_both_fakes = false;

    void validate() const;  // throws ConfigError naming the offending key
};

// Network topology knobs. The critic channel list covers layers 1-4; the
// fifth layer closes the remaining (V/16)^3 extent to a single voxel.
struct ModelConfig {
    std::array<int, 4> d_channels = {64, 128, 256, 512};
    int g_base_channels = 512;  // must be divisible by 16 (four halvings then the output head)
    int code_hidden_width = 4096;
    double leaky_slope = 0.2;

    void validate() const;
};

struct Config {
    TrainConfig train;
    ModelConfig model;
};

// Flat key=value text file; '#' starts a comment; unknown keys are rejected.
// Omitted keys keep their defaults. VOLGEN_SEED in the environment overrides
// the seed (and only the seed).
Config load_config(const std::string& path);
Config parse_config_text(const std::string& text);  // same rules, from a string
void save_config(const Config& cfg, const std::string& path);
std::string config_to_text(const Config& cfg);

}  // namespace volgen
