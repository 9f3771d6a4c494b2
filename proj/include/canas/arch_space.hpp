#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "canas/rng.hpp"

namespace canas {

using BigUint = boost::multiprecision::cpp_int;

inline constexpr int kSubnetSchemaVersion = 1;

enum class StageKind { ConvStem, MBv2, MBv3, Transformer, MBPool };

const char* to_string(StageKind kind);
std::optional<StageKind> stage_kind_from(const std::string& name);

// One row of a search-space table. For conv stages `kernel_or_vscale`
// holds kernel sizes; for transformer stages it holds V-scale ratios.
struct StageSpec {
    StageKind kind = StageKind::MBv2;
    int depth_min = 1;
    int depth_max = 1;
    int channel_min = 8;
    int channel_max = 8;
    int channel_step = 8;
    std::vector<int> kernel_or_vscale{3};
    std::vector<int> expansion{1};
    int stride = 1;

    std::vector<int> channel_choices() const;
    bool fixed_depth() const { return kind == StageKind::ConvStem || kind == StageKind::MBPool; }
};

struct SpaceSpec {
    std::string name;
    std::vector<StageSpec> stages;
    std::vector<int> resolutions;
    int in_channels = 3;
    int num_classes = 1000;
    int head_dim = 16;        // attention head size; ViT channel step must equal this
    int qk_dim = 16;          // per-head query/key dimension
    double flops_per_mac = 2.0;

    // Canonical space-file text; also the hashing domain.
    std::string serialize() const;
    std::uint64_t hash() const;
};

// A concrete subnet. Per-layer lists have exactly `depth` entries.
struct StageConfig {
    int depth = 1;
    int channels = 0;
    std::vector<int> kernel_or_vscale;
    std::vector<int> expansion;
    bool operator==(const StageConfig&) const = default;
};

struct SubnetConfig {
    std::vector<StageConfig> stages;
    int resolution = 0;
    bool operator==(const SubnetConfig&) const = default;
};

// Returns every invariant violation found (empty means valid).
std::vector<std::string> validate(const SpaceSpec& space);
std::vector<std::string> validate_config(const SpaceSpec& space, const SubnetConfig& cfg);

// Space files. parse_space throws std::runtime_error on malformed input;
// structural problems are reported by validate().
SpaceSpec parse_space(const std::string& text);
SpaceSpec load_space(const std::string& path);

SubnetConfig sample_uniform(const SpaceSpec& space, RngStream& rng);
SubnetConfig min_subnet(const SpaceSpec& space);
SubnetConfig max_subnet(const SpaceSpec& space);

// Each dimension is independently resampled with probability `rate`.
// When a depth mutation grows a stage, new layer slots are drawn uniformly.
SubnetConfig mutate(const SpaceSpec& space, const SubnetConfig& cfg, double rate, RngStream& rng);

// Uniform per-dimension mix of two parents. The stage depth comes from one
// parent; per-layer slots are inherited positionally, with the other parent
// contributing only where both parents have the position.
SubnetConfig crossover(const SpaceSpec& space, const SubnetConfig& a, const SubnetConfig& b,
                       RngStream& rng);

// Fixed-length genome of choice indices: [resolution, then per stage:
// depth, channels, depth_max kernel slots, depth_max expansion slots].
// Inactive layer slots carry sentinel index 0.
std::vector<int> encode(const SpaceSpec& space, const SubnetConfig& cfg);
SubnetConfig decode(const SpaceSpec& space, const std::vector<int>& genome);
std::size_t genome_length(const SpaceSpec& space);

// "<space-name> <schema-version> <genome ints...>"
std::string serialize_subnet(const SpaceSpec& space, const SubnetConfig& cfg);
SubnetConfig parse_subnet(const SpaceSpec& space, const std::string& text);

// Two counting conventions coexist:
//  - PerStageChoices: kernel/expansion chosen once per stage. This is the
//    convention published subnet counts for spaces like the bundled one
//    follow, and the headline number reported by the CLI.
//  - PerLayerChoices: every active layer picks kernel/expansion freely,
//    i.e. the number of distinct SubnetConfig values.
enum class CountingConvention { PerStageChoices, PerLayerChoices };

struct Cardinality {
    BigUint exact;
    double log10 = 0.0;
};

Cardinality cardinality(const SpaceSpec& space,
                        CountingConvention convention = CountingConvention::PerStageChoices);

}  // namespace canas
