#pragma once

// Evaluation suite: batch-wise linear-kernel MMD², volumetric MS-SSIM
// diversity, and PCA projection export.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "volgen/rng.hpp"
#include "volgen/tensor.hpp"
#include "volgen/volume_data.hpp"

namespace volgen {

// Draws one volume; the passed stream is the only randomness source, so a
// fixed seed reproduces every metric exactly.
using Sampler = std::function<Tensor<float>(Rng&)>;

// Flattened (B,N) batches of generated and real samples.
struct MetricBatch {
    Tensor<double> g;
    Tensor<double> r;
};

struct MetricReport {
    double mmd_mean = 0.0;
    double mmd_std = 0.0;
    double msssim_mean = 0.0;
    std::int64_t n_trials = 0;
    std::int64_t n_pairs = 0;
    std::uint64_t seed = 0;
};

// (1/B²)·(Σ g·gᵀ + Σ r·rᵀ − 2 Σ g·rᵀ), the batch-wise linear-kernel MMD².
// Algebraically equals ‖mean(g) − mean(r)‖².
double mmd2_batchwise(const MetricBatch& m);

struct MmdResult {
    double mean = 0.0;
    double stddev = 0.0;
};

// Per trial: B fresh sampler draws vs B distinct uniformly-drawn real volumes.
MmdResult mmd_score(const Sampler& sampler, const Dataset& real, std::int64_t trials,
                    std::int64_t B, Rng& rng);

// Single-scale SSIM mean with a 3D Gaussian window (size 7, σ 1.5); inputs
// are shifted from [-1,1] to [0,2] and scored with dynamic range 2.
double ssim_pair(const Tensor<float>& x, const Tensor<float>& y);

// Volumetric MS-SSIM over a 2× average-pool pyramid: 3 scales with weights
// (0.2, 0.3, 0.5) below edge 128, the standard 5 scales at or above it.
double ms_ssim_pair(const Tensor<float>& x, const Tensor<float>& y);

// Mean ms_ssim_pair over `pairs` independently drawn sample pairs. High
// values mean the sampler keeps producing near-identical volumes.
double ms_ssim_diversity(const Sampler& sampler, std::int64_t pairs, Rng& rng);

// Principal components of a set of flattened volumes. Components whose
// variance is negligible relative to the leading one are zeroed.
struct PcaModel {
    std::vector<double> mean;
    std::vector<std::vector<double>> components;  // k rows, unit norm or zero
    std::vector<double> eigenvalues;              // descending
};

PcaModel pca_fit(const std::vector<const Tensor<float>*>& fit_set, int k);
std::vector<double> pca_transform(const PcaModel& m, const Tensor<float>& v);

struct PcaRow {
    std::string population;  // "real" | "generated"
    std::vector<double> coords;
};

// Fits on the real volumes (or the union when combined_fit) and projects
// both populations, real rows first.
std::vector<PcaRow> pca_project(const Dataset& real, const std::vector<Tensor<float>>& generated,
                                int k = 2, bool combined_fit = false);
void write_pca_table(const std::string& path, const std::vector<PcaRow>& rows);

// Human-readable table; MMD shown ×10⁻⁴ as in the usual reporting convention.
std::string metric_report_table(const MetricReport& rep);
// Machine-readable JSON with unscaled values.
std::string metric_report_json(const MetricReport& rep);

}  // namespace volgen
