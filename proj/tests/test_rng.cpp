#include <doctest.h>

#include "canas/rng.hpp"

using canas::RngStream;

TEST_CASE("same seed yields identical streams") {
    RngStream a(42), b(42);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("state round-trips through save/restore") {
    RngStream a(7);
    for (int i = 0; i < 13; ++i) a.next_u64();
    const auto st = a.state();
    const auto expect = a.next_u64();
    RngStream b(0);
    b.set_state(st);
    CHECK(b.next_u64() == expect);
}

TEST_CASE("uniform01 stays in [0,1) and covers the range") {
    RngStream rng(3);
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < 20000; ++i) {
        const double u = rng.uniform01();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
    }
    CHECK(lo < 0.01);
    CHECK(hi > 0.99);
}

TEST_CASE("uniform_int covers bounds uniformly") {
    RngStream rng(11);
    int counts[4] = {0, 0, 0, 0};
    for (int i = 0; i < 40000; ++i) {
        const int v = rng.uniform_int(2, 5);
        REQUIRE(v >= 2);
        REQUIRE(v <= 5);
        counts[v - 2]++;
    }
    for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

TEST_CASE("normal has roughly unit variance") {
    RngStream rng(5);
    double sum = 0, sq = 0;
    const int n = 50000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.05);
}
