#include "canas/perfsample.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "canas/flops.hpp"

namespace canas {

void MemoryBank::reset(std::size_t num_levels, std::size_t capacity) {
    levels_.assign(num_levels, {});
    capacity_ = capacity;
}

bool MemoryBank::update(std::size_t level, const SubnetConfig& cfg, double loss,
                        std::int64_t step) {
    if (!std::isfinite(loss)) return false;
    auto& entries = levels_.at(level);
    for (BankEntry& e : entries) {
        if (e.cfg == cfg) {
            const bool changed = e.loss != loss;
            e.loss = loss;
            e.step_seen = step;
            return changed;
        }
    }
    if (entries.size() < capacity_) {
        entries.push_back({cfg, loss, step});
        return true;
    }
    auto worst = std::max_element(entries.begin(), entries.end(),
                                  [](const BankEntry& a, const BankEntry& b) { return a.loss < b.loss; });
    if (loss < worst->loss) {
        *worst = {cfg, loss, step};
        return true;
    }
    return false;
}

const BankEntry* MemoryBank::min_loss_entry(std::size_t level) const {
    const auto& entries = levels_.at(level);
    if (entries.empty()) return nullptr;
    return &*std::min_element(entries.begin(), entries.end(),
                              [](const BankEntry& a, const BankEntry& b) { return a.loss < b.loss; });
}

double q_at(const QSchedule& schedule, std::int64_t step, std::int64_t total_steps) {
    if (total_steps <= 0) return schedule.q0;
    const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps),
                                   0.0, 1.0);
    return schedule.q0 + (schedule.q_max - schedule.q0) * frac;
}

namespace {

// Copies the candidate's per-layer choices positionally onto the anchor's,
// resized to new_depth; positions past the donor's depth repeat its last entry.
std::vector<int> resize_choices(const std::vector<int>& donor, int new_depth) {
    std::vector<int> out(static_cast<std::size_t>(new_depth));
    for (int l = 0; l < new_depth; ++l)
        out[l] = donor[std::min<std::size_t>(l, donor.size() - 1)];
    return out;
}

}  // namespace

PreferenceDecision preference_check(const SpaceSpec& space, const SubnetConfig& anchor,
                                    const SubnetConfig& cand) {
    SubnetConfig width_swapped = anchor;  // candidate's transformer widths, anchor's depths
    SubnetConfig depth_swapped = anchor;  // candidate's transformer depths, anchor's widths
    for (std::size_t s = 0; s < space.stages.size(); ++s) {
        if (space.stages[s].kind != StageKind::Transformer) continue;
        width_swapped.stages[s].channels = cand.stages[s].channels;
        StageConfig& ds = depth_swapped.stages[s];
        ds.depth = cand.stages[s].depth;
        ds.kernel_or_vscale = resize_choices(anchor.stages[s].kernel_or_vscale, ds.depth);
        ds.expansion = resize_choices(anchor.stages[s].expansion, ds.depth);
    }
    PreferenceDecision out;
    const double base = subnet_mflops(space, anchor);
    out.phi_width = subnet_mflops(space, width_swapped) - base;
    out.phi_depth = subnet_mflops(space, depth_swapped) - base;
    out.accept = out.phi_width >= out.phi_depth;
    return out;
}

MixtureSample preference_filtered_sample(const SpaceSpec& space, const ComplexityLadder& ladder,
                                         std::size_t level, const SubnetConfig* anchor,
                                         RngStream& rng, int max_pref_attempts) {
    MixtureSample out;
    out.source = SampleSource::Explored;
    for (int attempt = 0;; ++attempt) {
        LevelSample draw = sample_at_level(space, ladder, level, rng);
        out.cfg = std::move(draw.cfg);
        out.mflops = draw.mflops;
        out.level_fallback = out.level_fallback || draw.fallback;
        if (anchor == nullptr) return out;
        if (preference_check(space, *anchor, out.cfg).accept) return out;
        out.pref_rejections += 1;
        if (attempt + 1 >= max_pref_attempts) {
            out.pref_exhausted = true;
            return out;
        }
    }
}

MixtureSample sample_mixture(const SpaceSpec& space, const ComplexityLadder& ladder,
                             std::size_t level, const MemoryBank& bank, double q, RngStream& rng) {
    const auto& entries = bank.entries(level);
    const double u = rng.uniform01();
    if (u < q && !entries.empty()) {
        MixtureSample out;
        out.cfg = entries[rng.uniform_index(entries.size())].cfg;
        out.mflops = subnet_mflops(space, out.cfg);
        out.source = SampleSource::FromBank;
        return out;
    }
    const BankEntry* anchor = bank.min_loss_entry(level);
    return preference_filtered_sample(space, ladder, level, anchor ? &anchor->cfg : nullptr, rng);
}

}  // namespace canas
