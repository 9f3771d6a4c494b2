#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "canas/ladder.hpp"

namespace canas {

struct BankEntry {
    SubnetConfig cfg;
    double loss = 0.0;
    std::int64_t step_seen = 0;
};

// Per-level bounded store of the best-seen subnets by mini-batch loss.
// Entries are replaced worst-performing-first; duplicate configs update
// their loss in place so the uniform bank draw stays unskewed.
class MemoryBank {
public:
    MemoryBank() = default;
    MemoryBank(std::size_t num_levels, std::size_t capacity)
        : levels_(num_levels), capacity_(capacity) {}

    std::size_t num_levels() const { return levels_.size(); }
    std::size_t capacity() const { return capacity_; }
    const std::vector<BankEntry>& entries(std::size_t level) const { return levels_.at(level); }

    // Returns true when membership or a stored loss changed.
    bool update(std::size_t level, const SubnetConfig& cfg, double loss, std::int64_t step);

    // Minimum-loss entry of a level (the anchor), if any.
    const BankEntry* min_loss_entry(std::size_t level) const;

    // Mutable access for checkpoint restore.
    std::vector<std::vector<BankEntry>>& levels() { return levels_; }
    const std::vector<std::vector<BankEntry>>& levels() const { return levels_; }
    void reset(std::size_t num_levels, std::size_t capacity);

private:
    std::vector<std::vector<BankEntry>> levels_;
    std::size_t capacity_ = 8;
};

inline constexpr std::size_t kDefaultBankCapacity = 8;

struct QSchedule {
    double q0 = 0.2;
    double q_max = 0.8;
};

// Linear ramp from q0 at step 0 to q_max at total_steps.
double q_at(const QSchedule& schedule, std::int64_t step, std::int64_t total_steps);

struct PreferenceDecision {
    bool accept = false;
    double phi_width = 0.0;  // FLOPs(anchor with candidate's transformer widths) - FLOPs(anchor)
    double phi_depth = 0.0;  // FLOPs(anchor with candidate's transformer depths) - FLOPs(anchor)
};

// Accepts candidates whose transformer stages spend FLOPs on width rather
// than depth relative to the anchor: accept iff phi_width >= phi_depth.
// Only transformer-stage widths/depths are swapped; every other dimension
// comes from the anchor in both constructs. When the candidate is deeper
// than the anchor, extra layers inherit the anchor's last-layer choices.
PreferenceDecision preference_check(const SpaceSpec& space, const SubnetConfig& anchor,
                                    const SubnetConfig& cand);

enum class SampleSource { FromBank, Explored };

struct MixtureSample {
    SubnetConfig cfg;
    double mflops = 0.0;
    SampleSource source = SampleSource::Explored;
    int pref_rejections = 0;
    bool pref_exhausted = false;
    bool level_fallback = false;
};

inline constexpr int kMaxPreferenceAttempts = 10;

// Level-banded draw filtered by the path preference rule. Without an anchor
// this is exactly sample_at_level; with one, rejected draws are resampled up
// to max_pref_attempts and the last draw is then accepted with a flag.
MixtureSample preference_filtered_sample(const SpaceSpec& space, const ComplexityLadder& ladder,
                                         std::size_t level, const SubnetConfig* anchor,
                                         RngStream& rng,
                                         int max_pref_attempts = kMaxPreferenceAttempts);

// Exploration/exploitation mixture: with probability q (and a non-empty
// bank level) a uniform draw from the bank; otherwise an explored subnet
// filtered by the preference rule anchored at the bank's min-loss entry.
MixtureSample sample_mixture(const SpaceSpec& space, const ComplexityLadder& ladder,
                             std::size_t level, const MemoryBank& bank, double q, RngStream& rng);

}  // namespace canas
