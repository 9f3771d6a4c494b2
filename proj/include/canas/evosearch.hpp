#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "canas/flops.hpp"
#include "canas/micronet.hpp"
#include "canas/trainer.hpp"

namespace canas {

// Linear per-layer latency model: sum over layers of
// (coefficient[kind] * layer MFLOPs + overhead[kind]), scaled by an
// optional per-resolution multiplier. A table-based stand-in for richer
// kernel-level predictors, behind the same interface.
struct DeviceProfile {
    std::string name;
    std::map<StageKind, double> ms_per_mflop;
    std::map<StageKind, double> overhead_ms;
    std::map<int, double> resolution_multiplier;  // missing resolution: 1.0

    double multiplier_for(int resolution) const;
};

DeviceProfile parse_device_profile(const std::string& text);
DeviceProfile load_device_profile(const std::string& path);

double predict_latency(const DeviceProfile& profile, const SpaceSpec& space,
                       const SubnetConfig& cfg);

struct Constraint {
    enum class Kind { LatencyMs, MFlops } kind = Kind::LatencyMs;
    double limit = 0.0;
};

struct SearchConfig {
    Constraint constraint;
    int population = 64;
    double parent_fraction = 0.25;
    double mutation_rate = 0.1;
    int budget = 5000;  // total distinct evaluate() calls
    std::uint64_t seed = 0;
};

struct SearchResult {
    SubnetConfig best;
    std::vector<int> best_genome;
    double fitness = 0.0;      // top-1 accuracy
    double loss = 0.0;
    double latency_ms = 0.0;
    double mflops = 0.0;
    std::vector<double> history;  // best fitness per generation, nondecreasing
    int evaluations = 0;
    bool feasible = true;
};

nlohmann::json to_json(const SearchResult& result);

// OFA-style constrained evolution over a trained supernet: constraint-
// rejected uniform seeding, elitist parent selection by accuracy (ties by
// loss, then FLOPs, then genome), mutation/crossover children deduplicated
// against everything already evaluated, uniform-unexplored refill when the
// operators stall. Every evaluated candidate satisfies the constraint and
// evaluate() is called at most `budget` times (cached per genome).
SearchResult search(const SupernetWeights& weights, const SpaceSpec& space,
                    const DeviceProfile& profile, const SearchConfig& config,
                    const std::vector<Batch>& eval_batches);

// Independent searches per constraint; infeasible constraints are reported
// in the result rather than aborting the sweep.
std::vector<SearchResult> pareto_sweep(const SupernetWeights& weights, const SpaceSpec& space,
                                       const DeviceProfile& profile, const SearchConfig& base,
                                       const std::vector<double>& limits,
                                       const std::vector<Batch>& eval_batches);

std::string sweep_csv(const std::vector<SearchResult>& results);

}  // namespace canas
