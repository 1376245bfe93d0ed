#pragma once

// Volumetric data path: NIfTI-1 ingestion, trimming/resizing/normalization,
// augmentation, synthetic phantoms, and the shuffled batch stream.

#include <string>
#include <vector>

#include "volgen/rng.hpp"
#include "volgen/tensor.hpp"

namespace volgen {

// Arbitrary-shape volume straight off disk, prior to preprocessing.
struct RawVolume {
    Tensor<float> voxels;  // rank-3 (D,H,W)
    std::string source_id;
};

// A preprocessed cubic volume lives in a plain rank-3 tensor with every
// value in [-1,1]; validate_volume enforces that contract.
void validate_volume(const Tensor<float>& v, std::int64_t expect_size = 0);

struct Dataset {
    std::vector<Tensor<float>> volumes;
    std::string provenance;  // "phantom" | "nifti"

    std::int64_t size() const { return static_cast<std::int64_t>(volumes.size()); }
    std::int64_t volume_size() const { return volumes.empty() ? 0 : volumes[0].shape[0]; }
};

// NIfTI-1, plain or gzipped, single 3-D image, any common scalar type.
RawVolume load_nifti(const std::string& path);
void save_nifti(const std::string& path, const Tensor<float>& voxels);

RawVolume trim_zero_planes(const RawVolume& v);
RawVolume resize_trilinear(const RawVolume& v, std::int64_t target);
Tensor<float> normalize_to_unit_range(const RawVolume& v);

// Full pipeline: load -> trim -> resize -> normalize.
Tensor<float> preprocess_volume(const std::string& path, std::int64_t volume_size);

// Deterministic core: mirror along the left-right (first) axis and/or apply
// a global intensity factor, clamped back to [-1,1].
Tensor<float> apply_augment(const Tensor<float>& x, bool flip, float factor);
// Randomized wrapper: flip with probability 1/2, factor ~ U[0.9, 1.1].
Tensor<float> augment(const Tensor<float>& x, Rng& rng);

Tensor<float> make_phantom(Rng& rng, std::int64_t volume_size);

// Loads every *.nii / *.nii.gz under dir in lexicographic order and runs the
// preprocessing pipeline.
Dataset load_dataset(const std::string& dir, std::int64_t volume_size);

// Shuffled epochs of (B,1,V,V,V) batches; the trailing incomplete batch of
// an epoch is dropped. State is (rng, permutation, cursor) and is exposed so
// a checkpoint can resume the stream exactly.
class BatchIterator {
public:
    BatchIterator(const Dataset& d, std::int64_t batch, Rng rng, bool augment_flag);

    Tensor<float> next();

    std::string rng_state() const { return rng_.state(); }
    const std::vector<std::int64_t>& permutation() const { return perm_; }
    std::int64_t cursor() const { return cursor_; }
    void restore(const std::string& rng_state, std::vector<std::int64_t> perm,
                 std::int64_t cursor);

private:
    void reshuffle();

    const Dataset* data_;
    std::int64_t batch_;
    bool augment_;
    Rng rng_;
    std::vector<std::int64_t> perm_;
    std::int64_t cursor_ = 0;
};

}  // namespace volgen
