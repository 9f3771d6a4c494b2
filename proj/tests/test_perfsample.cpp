#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "canas/flops.hpp"
#include "canas/perfsample.hpp"
#include "support/fixtures.hpp"

using namespace canas;
using canas::testing::micro_space;

namespace {

// Levels sit in the bulk of the micro space's uniform FLOPs distribution,
// so rejection sampling at every level has a healthy acceptance rate.
ComplexityLadder micro_ladder(const SpaceSpec&) {
    return ComplexityLadder{{0.5, 0.8, 1.2, 1.8}, 0.10};
}

// Distinct configs for scripted bank scenarios.
std::vector<SubnetConfig> distinct_configs(const SpaceSpec& space, std::size_t n) {
    std::vector<SubnetConfig> out;
    RngStream rng(99);
    while (out.size() < n) {
        auto cfg = sample_uniform(space, rng);
        if (std::find(out.begin(), out.end(), cfg) == out.end()) out.push_back(std::move(cfg));
    }
    return out;
}

}  // namespace

TEST_CASE("bank worst-performing replacement matches the scripted scenario") {
    const auto space = micro_space();
    const auto cfgs = distinct_configs(space, 3);
    MemoryBank bank(1, 2);

    CHECK(bank.update(0, cfgs[0], 0.9, 1));
    CHECK(bank.update(0, cfgs[1], 1.2, 2));
    REQUIRE(bank.entries(0).size() == 2);

    SUBCASE("candidate better than the worst replaces it") {
        CHECK(bank.update(0, cfgs[2], 1.0, 3));
        REQUIRE(bank.entries(0).size() == 2);
        for (const auto& e : bank.entries(0)) CHECK(e.loss != 1.2);
    }
    SUBCASE("candidate worse than everything is dropped") {
        CHECK(!bank.update(0, cfgs[2], 1.5, 3));
        REQUIRE(bank.entries(0).size() == 2);
    }
    SUBCASE("duplicate config updates loss in place") {
        CHECK(bank.update(0, cfgs[0], 0.8, 3));
        REQUIRE(bank.entries(0).size() == 2);
        bool found = false;
        for (const auto& e : bank.entries(0))
            if (e.cfg == cfgs[0]) {
                CHECK(e.loss == 0.8);
                CHECK(e.step_seen == 3);
                found = true;
            }
        CHECK(found);
    }
}

TEST_CASE("bank equals the k-smallest-losses oracle over a random script") {
    const auto space = micro_space();
    const auto cfgs = distinct_configs(space, 40);
    MemoryBank bank(1, 8);
    RngStream rng(3);
    std::vector<double> seen;
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
        const double loss = 0.5 + 2.0 * rng.uniform01();
        bank.update(0, cfgs[i], loss, static_cast<std::int64_t>(i));
        seen.push_back(loss);
    }
    auto sorted = seen;
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> bank_losses;
    for (const auto& e : bank.entries(0)) bank_losses.push_back(e.loss);
    std::sort(bank_losses.begin(), bank_losses.end());
    REQUIRE(bank_losses.size() == 8);
    for (std::size_t i = 0; i < 8; ++i) CHECK(bank_losses[i] == doctest::Approx(sorted[i]));
}

TEST_CASE("bank max loss is nonincreasing once at capacity") {
    const auto space = micro_space();
    const auto cfgs = distinct_configs(space, 64);
    MemoryBank bank(1, 4);
    RngStream rng(5);
    double prev_max = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
        bank.update(0, cfgs[i], rng.uniform01(), static_cast<std::int64_t>(i));
        CHECK(bank.entries(0).size() <= 4);
        if (bank.entries(0).size() == 4) {
            double mx = 0;
            for (const auto& e : bank.entries(0)) mx = std::max(mx, e.loss);
            CHECK(mx <= prev_max);
            prev_max = mx;
        }
    }
}

TEST_CASE("non-finite losses are rejected") {
    const auto space = micro_space();
    MemoryBank bank(1, 2);
    CHECK(!bank.update(0, min_subnet(space), std::nan(""), 0));
    CHECK(bank.entries(0).empty());
}

TEST_CASE("q schedule: starts at 0.2, linear, monotone") {
    const QSchedule q;
    CHECK(q_at(q, 0, 1000) == doctest::Approx(0.2));
    CHECK(q_at(q, 1000, 1000) == doctest::Approx(0.8));
    CHECK(q_at(q, 500, 1000) == doctest::Approx(0.5));
    double prev = -1;
    for (int s = 0; s <= 100; ++s) {
        const double v = q_at(q, s, 100);
        CHECK(v >= prev);
        prev = v;
    }
}

TEST_CASE("preference_check fixtures: identical, wider, deeper") {
    const auto space = micro_space();
    SubnetConfig anchor = min_subnet(space);
    anchor.resolution = 24;
    // give the anchor some headroom in transformer stages
    anchor.stages[3].channels = 8;
    anchor.stages[3].depth = 2;
    anchor.stages[3].kernel_or_vscale = {1, 1};
    anchor.stages[3].expansion = {1, 1};
    REQUIRE(validate_config(space, anchor).empty());

    SUBCASE("identical candidate: phi terms are exactly zero, accepted") {
        const auto d = preference_check(space, anchor, anchor);
        CHECK(d.phi_width == 0.0);
        CHECK(d.phi_depth == 0.0);
        CHECK(d.accept);
    }
    SUBCASE("one transformer stage wider by a step: accepted") {
        auto cand = anchor;
        cand.stages[3].channels += space.stages[3].channel_step;
        const auto d = preference_check(space, anchor, cand);
        // oracle: rebuild the width-swapped construct by hand
        auto swapped = anchor;
        swapped.stages[3].channels = cand.stages[3].channels;
        const double phi = subnet_mflops(space, swapped) - subnet_mflops(space, anchor);
        CHECK(d.phi_width == doctest::Approx(phi));
        CHECK(d.phi_depth == 0.0);
        CHECK(d.phi_width > 0.0);
        CHECK(d.accept);
    }
    SUBCASE("one transformer stage deeper by one: rejected") {
        auto cand = anchor;
        cand.stages[3].depth += 1;
        cand.stages[3].kernel_or_vscale.push_back(1);
        cand.stages[3].expansion.push_back(1);
        const auto d = preference_check(space, anchor, cand);
        auto swapped = anchor;
        swapped.stages[3].depth = cand.stages[3].depth;
        swapped.stages[3].kernel_or_vscale.push_back(anchor.stages[3].kernel_or_vscale.back());
        swapped.stages[3].expansion.push_back(anchor.stages[3].expansion.back());
        const double phi = subnet_mflops(space, swapped) - subnet_mflops(space, anchor);
        CHECK(d.phi_depth == doctest::Approx(phi));
        CHECK(d.phi_width == 0.0);
        CHECK(d.phi_depth > 0.0);
        CHECK(!d.accept);
    }
    SUBCASE("CNN-stage changes do not move either phi") {
        auto cand = anchor;
        cand.stages[1].channels = 16;
        cand.stages[2].depth = 2;
        cand.stages[2].kernel_or_vscale = {5, 5};
        cand.stages[2].expansion = {3, 3};
        const auto d = preference_check(space, anchor, cand);
        CHECK(d.phi_width == 0.0);
        CHECK(d.phi_depth == 0.0);
        CHECK(d.accept);
    }
}

TEST_CASE("preference decisions are invariant under FLOPs-convention rescaling") {
    auto space = micro_space();
    RngStream rng(21);
    for (int i = 0; i < 30; ++i) {
        const auto anchor = sample_uniform(space, rng);
        const auto cand = sample_uniform(space, rng);
        space.flops_per_mac = 2.0;
        const auto d2 = preference_check(space, anchor, cand);
        space.flops_per_mac = 1.0;
        const auto d1 = preference_check(space, anchor, cand);
        CHECK(d1.accept == d2.accept);
        CHECK(d2.phi_width == doctest::Approx(2.0 * d1.phi_width));
        CHECK(d2.phi_depth == doctest::Approx(2.0 * d1.phi_depth));
    }
}

TEST_CASE("sample_mixture: q=0 explores, q=1 exploits uniformly, empty bank degrades") {
    const auto space = micro_space();
    const auto ladder = micro_ladder(space);
    const std::size_t level = 1;

    MemoryBank empty_bank(ladder.size(), 8);
    RngStream rng(31);
    for (int i = 0; i < 20; ++i) {
        const auto s = sample_mixture(space, ladder, level, empty_bank, 1.0, rng);
        CHECK(s.source == SampleSource::Explored);
    }

    // fill a bank level with 4 in-band entries
    MemoryBank bank(ladder.size(), 8);
    RngStream fill(32);
    int added = 0;
    while (added < 4) {
        const auto s = sample_at_level(space, ladder, level, fill);
        if (!s.fallback && bank.update(level, s.cfg, fill.uniform01(), added)) ++added;
    }

    RngStream draw(33);
    std::map<std::vector<int>, int> counts;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const auto s = sample_mixture(space, ladder, level, bank, 1.0, draw);
        REQUIRE(s.source == SampleSource::FromBank);
        counts[encode(space, s.cfg)]++;
    }
    REQUIRE(counts.size() == 4);
    for (const auto& [genome, c] : counts) CHECK(std::abs(c - n / 4) < 200);

    for (int i = 0; i < 50; ++i) {
        const auto s = sample_mixture(space, ladder, level, bank, 0.0, draw);
        CHECK(s.source == SampleSource::Explored);
    }
}

TEST_CASE("sample_mixture branch frequency converges to q") {
    const auto space = micro_space();
    const auto ladder = micro_ladder(space);
    const std::size_t level = 0;
    MemoryBank bank(ladder.size(), 8);
    RngStream fill(41);
    int added = 0;
    while (added < 3) {
        const auto s = sample_at_level(space, ladder, level, fill);
        if (!s.fallback && bank.update(level, s.cfg, fill.uniform01(), added)) ++added;
    }
    const double q = 0.35;
    RngStream draw(42);
    int from_bank = 0;
    const int n = 8000;
    for (int i = 0; i < n; ++i)
        if (sample_mixture(space, ladder, level, bank, q, draw).source == SampleSource::FromBank)
            ++from_bank;
    const double sigma = std::sqrt(n * q * (1 - q));
    CHECK(std::abs(from_bank - n * q) < 3.0 * sigma);
}

TEST_CASE("preference_filtered_sample without an anchor equals sample_at_level") {
    const auto space = micro_space();
    const auto ladder = micro_ladder(space);
    RngStream a(51), b(51);
    for (int i = 0; i < 20; ++i) {
        const auto direct = sample_at_level(space, ladder, 2, a);
        const auto filtered = preference_filtered_sample(space, ladder, 2, nullptr, b);
        CHECK(direct.cfg == filtered.cfg);
        CHECK(filtered.pref_rejections == 0);
    }
}

TEST_CASE("preference_filtered_sample outputs satisfy the rule or carry the exhausted flag") {
    const auto space = micro_space();
    const auto ladder = micro_ladder(space);
    RngStream rng(52);
    const auto anchor_draw = sample_at_level(space, ladder, 1, rng);
    const SubnetConfig anchor = anchor_draw.cfg;
    int exhausted = 0;
    for (int i = 0; i < 100; ++i) {
        const auto s = preference_filtered_sample(space, ladder, 1, &anchor, rng);
        if (s.pref_exhausted)
            ++exhausted;
        else
            CHECK(preference_check(space, anchor, s.cfg).accept);
        CHECK(s.pref_rejections <= kMaxPreferenceAttempts);
    }
    CHECK(exhausted < 100);  // some draws must succeed
}
