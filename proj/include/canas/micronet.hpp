#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "canas/arch_space.hpp"
#include "canas/tensor.hpp"

namespace canas {

// Ordered name -> tensor store. Order is fixed by the architecture walk,
// which keeps serialization and gradient merging deterministic.
struct NamedTensors {
    std::vector<std::string> names;
    std::vector<Tensor> tensors;

    std::size_t size() const { return names.size(); }
    int index_of(const std::string& name) const;
    Tensor& operator[](std::size_t i) { return tensors[i]; }
    const Tensor& operator[](std::size_t i) const { return tensors[i]; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    std::int64_t total_elements() const;

    void rebuild_index();

private:
    std::unordered_map<std::string, int> index_;
};

// Full-size shared parameters; every subnet slices leading sub-tensors.
struct SupernetWeights {
    NamedTensors params;
    std::int64_t param_count() const { return params.total_elements(); }
};

// Per-parameter active extents (prefix slices along every elastic axis),
// aligned with the SupernetWeights parameter order.
struct SliceMap {
    std::vector<std::string> names;
    std::vector<std::vector<int>> extents;

    std::size_t size() const { return names.size(); }
};

SupernetWeights build_supernet(const SpaceSpec& space, RngStream& init_rng);

SliceMap slice_map(const SpaceSpec& space, const SubnetConfig& cfg);

// Per-axis minimum of the two slice maps; never empty (the stem and head
// are shared by every pair of subnets).
SliceMap shared_params(const SpaceSpec& space, const SubnetConfig& a, const SubnetConfig& b);

struct Batch {
    Tensor images;            // [B, C, H, W]
    std::vector<int> labels;  // class ids, size B
    int size() const { return images.shape.empty() ? 0 : images.shape[0]; }
};

struct ForwardCache;  // opaque; defined in micronet.cpp

struct ForwardResult {
    Tensor logits;  // [B, classes]
    std::shared_ptr<ForwardCache> cache;
};

// Runs the subnet sliced out of the shared weights. Batch spatial size must
// equal cfg.resolution. Pass with_cache = false for inference-only calls.
ForwardResult forward(const SupernetWeights& weights, const SpaceSpec& space,
                      const SubnetConfig& cfg, const Batch& batch, bool with_cache = true);

struct BackwardResult {
    double loss = 0.0;      // mean cross-entropy over the batch
    NamedTensors grads;     // full-size; exactly zero outside the active slices
};

BackwardResult backward(const SupernetWeights& weights, const SpaceSpec& space,
                        const SubnetConfig& cfg, const ForwardCache& cache,
                        const std::vector<int>& labels);

// Mean cross-entropy of already-computed logits (no gradient).
double cross_entropy(const Tensor& logits, const std::vector<int>& labels);

struct SgdOptions {
    double lr = 0.05;
    double momentum = 0.9;
};

// Momentum buffers aligned with the weights; zero-initialized on first use.
struct OptimizerState {
    NamedTensors velocity;
};

void apply_update(SupernetWeights& weights, const NamedTensors& grads, OptimizerState& state,
                  const SgdOptions& opt);

// grads += addend (same layout).
void accumulate(NamedTensors& grads, const NamedTensors& addend);
NamedTensors zeros_like(const NamedTensors& params);

}  // namespace canas
