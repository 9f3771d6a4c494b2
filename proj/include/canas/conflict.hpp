#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "canas/ladder.hpp"
#include "canas/micronet.hpp"
#include "canas/trainer.hpp"

namespace canas {

struct CosineResult {
    double cosine = 0.0;
    bool zero_norm = false;  // either restricted gradient had zero norm
};

// Cosine similarity of the two subnets' gradients on the same batch,
// restricted to their shared parameter region. The canonical batch is at
// the space's base resolution and is resized per subnet.
CosineResult grad_cosine(const SupernetWeights& weights, const SpaceSpec& space,
                         const SubnetConfig& a, const SubnetConfig& b, const Batch& batch);

// Same restriction and cosine over precomputed full-size gradients.
CosineResult gradient_cosine(const SpaceSpec& space, const NamedTensors& grad_a,
                             const NamedTensors& grad_b, const SubnetConfig& a,
                             const SubnetConfig& b);

struct SweepSubnet {
    std::vector<int> genome;
    double mflops = 0.0;
    double target = 0.0;
};

struct GapBucket {
    double gap_lo = 0.0;
    double gap_hi = 0.0;
    double mean_cosine = 0.0;
    int pairs = 0;
};

struct GoodVsRandom {
    double mean_good = 0.0;
    double mean_random = 0.0;
    int n = 0;
    int k_top = 0;
    double level_mflops = 0.0;
};

struct SimilarityReport {
    std::vector<SweepSubnet> subnets;
    std::vector<std::vector<double>> cosine;  // symmetric, unit diagonal
    std::vector<GapBucket> buckets;
    double pearson_gap_vs_cosine = 0.0;  // over off-diagonal pairs
    int zero_norm_pairs = 0;
    std::optional<GoodVsRandom> good_vs_random;
};

nlohmann::json to_json(const SimilarityReport& report);
// Plot-ready rows: flops_gap,cosine per off-diagonal pair.
std::string to_csv(const SimilarityReport& report);

// Samples n subnets near each FLOPs target (relative band, rejection with
// the same fallback rule as level sampling), computes all pairwise cosines
// on one batch, buckets them by FLOPs gap and fits the gap/similarity
// correlation. Throws on unreachable targets when strict.
SimilarityReport similarity_sweep(const SupernetWeights& weights, const SpaceSpec& space,
                                  const std::vector<double>& targets_mflops, int n_per_target,
                                  double band, const Batch& batch, RngStream& rng,
                                  bool strict_targets = true);

// Samples n same-level subnets, ranks them by evaluation loss, and compares
// the mean pairwise gradient cosine of the k_top best against the whole set.
GoodVsRandom good_vs_random(const SupernetWeights& weights, const SpaceSpec& space,
                            double level_mflops, double band, int n, int k_top,
                            const std::vector<Batch>& eval_batches, const Batch& grad_batch,
                            RngStream& rng);

}  // namespace canas
