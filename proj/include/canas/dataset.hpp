#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "canas/micronet.hpp"

namespace canas {

struct DatasetSpec {
    enum class Kind { Synthetic, File };
    Kind kind = Kind::Synthetic;
    // synthetic task parameters
    int classes = 8;
    int train_count = 512;
    int eval_count = 128;
    double noise = 0.25;
    std::uint64_t seed = 1;
    // file-backed dataset
    std::string path;
};

// In-memory labelled image set at one base resolution. Training batches are
// drawn i.i.d. from the train split; eval batches are a fixed ordered split.
class Dataset {
public:
    // Gaussian-cluster images: one smooth random pattern per class plus
    // i.i.d. pixel noise. Deterministic in (spec.seed, channels, resolution).
    static Dataset synthetic(const DatasetSpec& spec, int channels, int base_resolution);
    static Dataset from_file(const std::string& path);
    void save(const std::string& path) const;

    int channels() const { return channels_; }
    int base_resolution() const { return resolution_; }
    int classes() const { return classes_; }
    int train_count() const { return static_cast<int>(train_labels_.size()); }
    int eval_count() const { return static_cast<int>(eval_labels_.size()); }

    Batch train_batch(int batch_size, RngStream& rng) const;
    std::vector<Batch> eval_batches(int batch_size) const;

private:
    int channels_ = 0;
    int resolution_ = 0;
    int classes_ = 0;
    Tensor train_images_;  // [N, C, R, R]
    std::vector<int> train_labels_;
    Tensor eval_images_;
    std::vector<int> eval_labels_;
};

// Bilinear resize to the subnet's resolution (half-pixel-center sampling);
// identity when the size already matches.
Tensor resize_images(const Tensor& images, int out_resolution);
Batch resize_batch(const Batch& batch, int out_resolution);

}  // namespace canas
