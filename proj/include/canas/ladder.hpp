#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "canas/arch_space.hpp"

namespace canas {

// Ordered complexity levels C_1..C_K in MFLOPs with a relative tolerance
// band. Level j contains flops f iff |f - C_j| <= band * C_j.
struct ComplexityLadder {
    std::vector<double> levels;
    double band = 0.10;

    std::size_t size() const { return levels.size(); }
    bool contains(std::size_t j, double mflops) const;
    double lo(std::size_t j) const { return levels[j] * (1.0 - band); }
    double hi(std::size_t j) const { return levels[j] * (1.0 + band); }
};

std::vector<std::string> validate(const ComplexityLadder& ladder);

// Index of the level whose band contains `mflops`; nullopt when out of band.
// Bands are disjoint by construction, so at most one level matches.
std::optional<std::size_t> level_of(double mflops, const ComplexityLadder& ladder);

// The N hierarchical smallest subnets, FLOPs strictly increasing;
// element 0 is always min_subnet of the space.
struct HssSet {
    std::vector<SubnetConfig> subnets;
    std::vector<double> mflops;

    std::size_t size() const { return subnets.size(); }
};

struct LadderState {
    std::size_t current_level = 0;
    std::int64_t step_count = 0;
};

// Moves to a uniformly chosen in-range index from {i-1, i, i+1}.
std::size_t next_level(const ComplexityLadder& ladder, LadderState& state, RngStream& rng);

struct LevelSample {
    SubnetConfig cfg;
    double mflops = 0.0;
    bool fallback = false;  // rejection exhausted; nearest-found candidate returned
    int attempts = 0;
};

inline constexpr int kLevelSampleMaxAttempts = 200;

// Rejection-samples a uniform subnet whose FLOPs land in level j's band.
// After max_attempts rejections the nearest-found candidate is returned with
// fallback = true; a training step never fails here.
LevelSample sample_at_level(const SpaceSpec& space, const ComplexityLadder& ladder, std::size_t j,
                            RngStream& rng, int max_attempts = kLevelSampleMaxAttempts);

// The HSS member with the smallest FLOPs strictly greater than target_mflops;
// when no member is larger, the largest member (smallest remaining gap).
const SubnetConfig& nearest_min(const HssSet& hss, double target_mflops);
std::size_t nearest_min_index(const HssSet& hss, double target_mflops);

// Element 0 is min_subnet; each later element is rejection-sampled into
// `band` around its target and then frozen. Targets must be increasing and
// the first target must admit the min subnet (min FLOPs <= target*(1+band)).
// Throws std::runtime_error on exhaustion or bad targets.
HssSet build_hss(const SpaceSpec& space, const std::vector<double>& targets_mflops, double band,
                 RngStream& rng, int max_attempts = 5000);

}  // namespace canas
