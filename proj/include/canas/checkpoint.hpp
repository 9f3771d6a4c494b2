#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "canas/ladder.hpp"
#include "canas/micronet.hpp"
#include "canas/perfsample.hpp"

namespace canas {

// Everything a run needs to continue exactly where it stopped. The space
// file and run config are embedded so a checkpoint is self-contained.
struct TrainerSnapshot {
    std::uint64_t space_hash = 0;
    std::string space_text;
    std::string config_text;
    std::int64_t step = 0;
    NamedTensors weights;
    NamedTensors momentum;  // empty until the first update
    LadderState ladder_state;
    std::array<std::uint64_t, 4> sampler_rng{};
    std::array<std::uint64_t, 4> data_rng{};
    std::vector<std::vector<int>> hss_genomes;
    std::vector<double> hss_mflops;
    std::size_t bank_capacity = 0;
    // per level: (genome, loss, step_seen)
    std::vector<std::vector<std::tuple<std::vector<int>, double, std::int64_t>>> bank_levels;
};

void save_checkpoint(const std::string& path, const TrainerSnapshot& snapshot);
TrainerSnapshot load_checkpoint(const std::string& path);

}  // namespace canas
