#include <doctest.h>

#include <map>
#include <set>

#include "canas/arch_space.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace canas;
using canas::testing::table1_space;
using canas::testing::toy_space;

namespace {

SpaceSpec tiny_space() {
    // one searchable stage, depth {1,2}, 1 channel, 2 kernels, 1 expansion
    return parse_space(R"(
space tiny
in_channels 3
classes 8
head_dim 8
qk_dim 8
resolutions 16
stage ConvStem depth 1 1 channels 8 8 8 kernel 3 expansion 1 stride 2
stage MBv2 depth 1 2 channels 8 8 8 kernel 3 5 expansion 1 stride 1
stage MBPool depth 1 1 channels 16 16 8 expansion 1 stride 1
)");
}

}  // namespace

TEST_CASE("bundled table-1 space validates") {
    const auto space = table1_space();
    CHECK(validate(space).empty());
    CHECK(space.stages.size() == 9);
    CHECK(space.resolutions.size() == 6);
}

TEST_CASE("channel step mismatch is reported") {
    auto space = table1_space();
    space.stages[4].channel_step = 7;  // transformer stage, head size 16
    const auto errs = validate(space);
    REQUIRE(!errs.empty());
    bool found = false;
    for (const auto& e : errs)
        if (e.find("step mismatch") != std::string::npos) found = true;
    CHECK(found);
}

TEST_CASE("empty resolutions is reported") {
    auto space = table1_space();
    space.resolutions.clear();
    CHECK(!validate(space).empty());
}

TEST_CASE("space file round-trips through serialize/parse") {
    const auto space = table1_space();
    const auto again = parse_space(space.serialize());
    CHECK(again.serialize() == space.serialize());
    CHECK(again.hash() == space.hash());
}

TEST_CASE("min and max subnets hit the published table-1 bounds") {
    const auto space = table1_space();
    const auto mn = min_subnet(space);
    const auto mx = max_subnet(space);
    CHECK(mn.resolution == 128);
    CHECK(mx.resolution == 256);

    const std::vector<int> want_min_depth{1, 1, 2, 2, 1, 1, 1, 1, 1};
    const std::vector<int> want_max_depth{1, 2, 5, 6, 5, 6, 6, 6, 1};
    const std::vector<int> want_min_ch{16, 16, 16, 16, 48, 80, 144, 160, 1984};
    for (std::size_t s = 0; s < space.stages.size(); ++s) {
        CHECK(mn.stages[s].depth == want_min_depth[s]);
        CHECK(mx.stages[s].depth == want_max_depth[s]);
        CHECK(mn.stages[s].channels == want_min_ch[s]);
    }
    CHECK(mx.stages[4].channels == 96);
    CHECK(mx.stages[7].channels == 320);
    CHECK(validate_config(space, mn).empty());
    CHECK(validate_config(space, mx).empty());
}

TEST_CASE("sample_uniform is deterministic per seed and always valid") {
    const auto space = table1_space();
    RngStream a(123), b(123);
    for (int i = 0; i < 50; ++i) {
        const auto ca = sample_uniform(space, a);
        const auto cb = sample_uniform(space, b);
        CHECK(ca == cb);
        CHECK(validate_config(space, ca).empty());
    }
}

TEST_CASE("uniform sampling hits two-choice dimensions evenly") {
    const auto space = tiny_space();
    RngStream rng(9);
    int depth1 = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const auto cfg = sample_uniform(space, rng);
        if (cfg.stages[1].depth == 1) ++depth1;
    }
    const double freq = static_cast<double>(depth1) / n;
    CHECK(freq > 0.45);
    CHECK(freq < 0.55);
}

TEST_CASE("degenerate single-choice space yields the unique subnet") {
    auto space = tiny_space();
    space.stages[1].depth_max = 1;
    space.stages[1].kernel_or_vscale = {3};
    RngStream rng(4);
    const auto cfg = sample_uniform(space, rng);
    CHECK(cfg == min_subnet(space));
    CHECK(cfg == max_subnet(space));
}

TEST_CASE("mutate: rate 0 is identity, rate 1 reproducible") {
    const auto space = table1_space();
    RngStream rng(10);
    const auto cfg = sample_uniform(space, rng);
    auto unchanged = mutate(space, cfg, 0.0, rng);
    CHECK(unchanged == cfg);

    RngStream m1(77), m2(77);
    CHECK(mutate(space, cfg, 1.0, m1) == mutate(space, cfg, 1.0, m2));
}

TEST_CASE("mutate on a single-choice space is identity at any rate") {
    auto space = tiny_space();
    space.stages[1].depth_min = space.stages[1].depth_max = 2;
    space.stages[1].kernel_or_vscale = {3};
    space.stages[1].channel_min = space.stages[1].channel_max = 8;
    const auto cfg = min_subnet(space);
    RngStream rng(1);
    CHECK(mutate(space, cfg, 1.0, rng) == cfg);
}

TEST_CASE("crossover of identical parents is the parent") {
    const auto space = table1_space();
    RngStream rng(31);
    const auto x = sample_uniform(space, rng);
    CHECK(crossover(space, x, x, rng) == x);
}

TEST_CASE("crossover children are always valid") {
    const auto space = table1_space();
    RngStream rng(32);
    for (int i = 0; i < 1000; ++i) {
        const auto a = sample_uniform(space, rng);
        const auto b = sample_uniform(space, rng);
        const auto child = crossover(space, a, b, rng);
        CHECK(validate_config(space, child).empty());
    }
}

TEST_CASE("crossover is deterministic per seed") {
    const auto space = table1_space();
    RngStream s(8);
    const auto a = sample_uniform(space, s);
    const auto b = sample_uniform(space, s);
    RngStream c1(55), c2(55);
    CHECK(crossover(space, a, b, c1) == crossover(space, a, b, c2));
}

TEST_CASE("encode/decode round-trips on 10k random configs") {
    const auto space = table1_space();
    RngStream rng(71);
    for (int i = 0; i < 10000; ++i) {
        const auto cfg = sample_uniform(space, rng);
        CHECK(decode(space, encode(space, cfg)) == cfg);
    }
}

TEST_CASE("subnet serialization round-trips with header checks") {
    const auto space = table1_space();
    RngStream rng(72);
    const auto cfg = sample_uniform(space, rng);
    const auto text = serialize_subnet(space, cfg);
    CHECK(parse_subnet(space, text) == cfg);
    CHECK_THROWS(parse_subnet(space, "otherspace 1 0 0 0"));
}

TEST_CASE("min/max dominate every sampled dimension") {
    const auto space = table1_space();
    const auto mn = min_subnet(space);
    const auto mx = max_subnet(space);
    RngStream rng(73);
    for (int i = 0; i < 500; ++i) {
        const auto cfg = sample_uniform(space, rng);
        CHECK(mn.resolution <= cfg.resolution);
        CHECK(cfg.resolution <= mx.resolution);
        for (std::size_t s = 0; s < space.stages.size(); ++s) {
            CHECK(mn.stages[s].depth <= cfg.stages[s].depth);
            CHECK(cfg.stages[s].depth <= mx.stages[s].depth);
            CHECK(mn.stages[s].channels <= cfg.stages[s].channels);
            CHECK(cfg.stages[s].channels <= mx.stages[s].channels);
            for (int l = 0; l < cfg.stages[s].depth; ++l) {
                CHECK(mn.stages[s].kernel_or_vscale[0] <= cfg.stages[s].kernel_or_vscale[l]);
                CHECK(cfg.stages[s].kernel_or_vscale[l] <= mx.stages[s].kernel_or_vscale[0]);
            }
        }
    }
}

TEST_CASE("hand-counted cardinality: depth {1,2} with 2 kernels gives 2+4") {
    const auto space = tiny_space();
    // per-layer: stem 1, MBv2 sums 2 + 4, pool 1, one channel, one resolution
    const auto card = cardinality(space, CountingConvention::PerLayerChoices);
    CHECK(card.exact == 6);
    // per-stage: depths x kernels = 2 * 2
    CHECK(cardinality(space, CountingConvention::PerStageChoices).exact == 4);
}

TEST_CASE("cardinality matches brute-force enumeration on tiny spaces") {
    const SpaceSpec spaces[] = {tiny_space(), toy_space(), [] {
        auto s = toy_space();
        s.stages[1].depth_max = 3;
        s.stages[1].expansion = {1, 2};
        return s;
    }()};
    for (const auto& space : spaces) {
        REQUIRE(validate(space).empty());
        const auto pl = cardinality(space, CountingConvention::PerLayerChoices);
        const auto ps = cardinality(space, CountingConvention::PerStageChoices);
        CHECK(pl.exact == canas::testing::count_per_layer(space));
        CHECK(ps.exact == canas::testing::count_per_stage(space));
    }
}

TEST_CASE("enumerated configs are distinct and decode-stable on the toy space") {
    const auto space = toy_space();
    std::set<std::vector<int>> genomes;
    canas::testing::enumerate_per_layer(space, [&](const SubnetConfig& cfg) {
        genomes.insert(encode(space, cfg));
    });
    const auto card = cardinality(space, CountingConvention::PerLayerChoices);
    CHECK(card.exact == BigUint(genomes.size()));
}

TEST_CASE("table-1 cardinality matches the published subnet count") {
    const auto space = table1_space();
    const auto card = cardinality(space);
    CHECK(card.log10 > 16.0);
    CHECK(card.log10 < 19.0);
    // 1.09e17 at two significant figures
    const BigUint lo("108500000000000000"), hi("109500000000000000");
    CHECK(card.exact >= lo);
    CHECK(card.exact <= hi);
}
