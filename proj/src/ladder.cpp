#include "canas/ladder.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "canas/flops.hpp"

namespace canas {

bool ComplexityLadder::contains(std::size_t j, double mflops) const {
    return mflops >= lo(j) && mflops <= hi(j);
}

std::vector<std::string> validate(const ComplexityLadder& ladder) {
    std::vector<std::string> errs;
    if (ladder.levels.size() < 2) errs.push_back("ladder needs at least 2 levels");
    if (!(ladder.band > 0.0 && ladder.band < 0.5)) errs.push_back("band must be in (0, 0.5)");
    for (std::size_t i = 0; i < ladder.levels.size(); ++i) {
        if (ladder.levels[i] <= 0.0) errs.push_back("levels must be positive");
        if (i > 0 && ladder.levels[i] <= ladder.levels[i - 1])
            errs.push_back("levels must be strictly increasing");
        if (i > 0 && ladder.levels[i - 1] * (1.0 + ladder.band) >=
                         ladder.levels[i] * (1.0 - ladder.band))
            errs.push_back("adjacent level bands overlap");
    }
    return errs;
}

std::optional<std::size_t> level_of(double mflops, const ComplexityLadder& ladder) {
    for (std::size_t j = 0; j < ladder.levels.size(); ++j)
        if (ladder.contains(j, mflops)) return j;
    return std::nullopt;
}

std::size_t next_level(const ComplexityLadder& ladder, LadderState& state, RngStream& rng) {
    const std::size_t i = state.current_level;
    std::vector<std::size_t> options;
    if (i > 0) options.push_back(i - 1);
    options.push_back(i);
    if (i + 1 < ladder.size()) options.push_back(i + 1);
    const std::size_t j = options[rng.uniform_index(options.size())];
    state.current_level = j;
    state.step_count += 1;
    return j;
}

LevelSample sample_at_level(const SpaceSpec& space, const ComplexityLadder& ladder, std::size_t j,
                            RngStream& rng, int max_attempts) {
    LevelSample best;
    double best_gap = std::numeric_limits<double>::infinity();
    for (int attempt = 1; attempt <= max_attempts; ++attempt) {
        SubnetConfig cand = sample_uniform(space, rng);
        const double mflops = subnet_mflops(space, cand);
        if (ladder.contains(j, mflops))
            return LevelSample{std::move(cand), mflops, false, attempt};
        const double gap = std::abs(mflops - ladder.levels[j]);
        if (gap < best_gap) {
            best_gap = gap;
            best.cfg = std::move(cand);
            best.mflops = mflops;
        }
    }
    best.fallback = true;
    best.attempts = max_attempts;
    return best;
}

std::size_t nearest_min_index(const HssSet& hss, double target_mflops) {
    if (hss.subnets.empty()) throw std::runtime_error("nearest_min: empty HSS set");
    for (std::size_t n = 0; n < hss.size(); ++n)
        if (hss.mflops[n] > target_mflops) return n;
    return hss.size() - 1;
}

const SubnetConfig& nearest_min(const HssSet& hss, double target_mflops) {
    return hss.subnets[nearest_min_index(hss, target_mflops)];
}

HssSet build_hss(const SpaceSpec& space, const std::vector<double>& targets_mflops, double band,
                 RngStream& rng, int max_attempts) {
    if (targets_mflops.empty()) throw std::runtime_error("build_hss: no targets");
    for (std::size_t i = 1; i < targets_mflops.size(); ++i)
        if (targets_mflops[i] <= targets_mflops[i - 1])
            throw std::runtime_error("build_hss: targets must be increasing");

    HssSet hss;
    SubnetConfig smallest = min_subnet(space);
    const double min_mflops = subnet_mflops(space, smallest);
    if (min_mflops > targets_mflops.front() * (1.0 + band))
        throw std::runtime_error("build_hss: first target does not admit the min subnet");
    hss.subnets.push_back(std::move(smallest));
    hss.mflops.push_back(min_mflops);

    for (std::size_t i = 1; i < targets_mflops.size(); ++i) {
        const double target = targets_mflops[i];
        bool found = false;
        for (int attempt = 0; attempt < max_attempts && !found; ++attempt) {
            SubnetConfig cand = sample_uniform(space, rng);
            const double mflops = subnet_mflops(space, cand);
            if (std::abs(mflops - target) <= band * target && mflops > hss.mflops.back()) {
                hss.subnets.push_back(std::move(cand));
                hss.mflops.push_back(mflops);
                found = true;
            }
        }
        if (!found)
            throw std::runtime_error("build_hss: exhausted sampling for target " +
                                     std::to_string(target) + " MFLOPs");
    }
    return hss;
}

}  // namespace canas
