// Drives the installed binary through std::system and checks exact exit
// codes and artifact contents.

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "support/fixtures.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kCli = CANAS_CLI_PATH;

struct RunOut {
    int exit_code;
    std::string output;
};

RunOut run(const std::string& args) {
    const auto out_file = fs::temp_directory_path() / "canas_cli_out.txt";
    const std::string cmd = kCli + " " + args + " > " + out_file.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunOut r;
    r.exit_code = WEXITSTATUS(status);
    std::ifstream in(out_file);
    std::ostringstream os;
    os << in.rdbuf();
    r.output = os.str();
    return r;
}

std::string sandbox() {
    static std::string dir = [] {
        const auto p = fs::temp_directory_path() / "canas_cli_sandbox";
        fs::remove_all(p);
        fs::create_directories(p);
        return p.string();
    }();
    return dir;
}

std::string write_tiny_config(const char* name, int seed) {
    const std::string path = sandbox() + "/" + name;
    std::ofstream os(path);
    os << "mode = \"elastic\"\n"
       << "space = \"" << canas::testing::source_path("spaces/micro.space") << "\"\n"
       << "total_steps = 8\nbatch_size = 4\nlr = 0.01\nseed = " << seed << "\n"
       << "ladder = [0.5, 0.8, 1.2, 1.8]\nband = 0.10\nhss_targets = [0.15, 0.45]\n"
       << "checkpoint_every = 4\neval_batch_size = 8\n"
       << "dataset = \"synthetic\"\ndata_classes = 8\ndata_train = 32\ndata_eval = 16\n"
       << "data_seed = 5\n";
    return path;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

}  // namespace

TEST_CASE("space: valid file exits 0, malformed input exits 2") {
    auto ok = run("space " + canas::testing::source_path("spaces/elasticvit.space"));
    CHECK(ok.exit_code == 0);
    CHECK(ok.output.find("valid") != std::string::npos);

    const std::string bad = sandbox() + "/bad.space";
    std::ofstream(bad) << "space broken\nresolutions\n";  // empty resolutions
    CHECK(run("space " + bad).exit_code == 2);
    CHECK(run("space /definitely/missing").exit_code == 2);
}

TEST_CASE("space --json emits machine-readable output") {
    auto r = run("space --json " + canas::testing::source_path("spaces/micro.space"));
    REQUIRE(r.exit_code == 0);
    const auto j = nlohmann::json::parse(r.output);
    CHECK(j["valid"] == true);
    CHECK(j["min_mflops"].get<double>() > 0.0);
}

TEST_CASE("flops: selection flags and errors") {
    const std::string space = canas::testing::source_path("spaces/micro.space");
    auto r = run("flops --space " + space + " --max --json");
    REQUIRE(r.exit_code == 0);
    const auto j = nlohmann::json::parse(r.output);
    CHECK(j["total_mflops"].get<double>() > 1.0);
    CHECK(run("flops --space " + space).exit_code == 2);          // no subnet selected
    CHECK(run("flops --space " + space + " --subnet \"wrong 1 0\"").exit_code == 2);
}

TEST_CASE("usage errors exit 1") {
    CHECK(run("definitely-not-a-subcommand").exit_code == 1);
    CHECK(run("").exit_code == 1);
}

TEST_CASE("train is reproducible; seed override changes the trace") {
    const auto cfg = write_tiny_config("t.cfg", 3);
    const std::string a = sandbox() + "/runA", b = sandbox() + "/runB", c = sandbox() + "/runC";
    REQUIRE(run("train --config " + cfg + " --out " + a).exit_code == 0);
    REQUIRE(run("train --config " + cfg + " --out " + b).exit_code == 0);
    CHECK(slurp(a + "/metrics.jsonl") == slurp(b + "/metrics.jsonl"));
    CHECK(fs::exists(a + "/manifest.json"));
    CHECK(fs::exists(a + "/checkpoint-8.bin"));

    REQUIRE(run("train --config " + cfg + " --seed 99 --out " + c).exit_code == 0);
    CHECK(slurp(a + "/metrics.jsonl") != slurp(c + "/metrics.jsonl"));
}

TEST_CASE("resume continues the trace exactly") {
    const auto cfg = write_tiny_config("t2.cfg", 11);
    const std::string full = sandbox() + "/full", cont = sandbox() + "/cont";
    REQUIRE(run("train --config " + cfg + " --out " + full).exit_code == 0);
    REQUIRE(run("train --resume " + full + "/checkpoint-4.bin --out " + cont).exit_code == 0);
    std::istringstream fa(slurp(full + "/metrics.jsonl"));
    std::vector<std::string> full_lines;
    for (std::string l; std::getline(fa, l);) full_lines.push_back(l);
    std::istringstream fb(slurp(cont + "/metrics.jsonl"));
    std::vector<std::string> cont_lines;
    for (std::string l; std::getline(fb, l);) cont_lines.push_back(l);
    REQUIRE(full_lines.size() == 8);
    REQUIRE(cont_lines.size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(cont_lines[i] == full_lines[4 + i]);
}

TEST_CASE("bank, analyze and search work against a trained checkpoint") {
    const auto cfg = write_tiny_config("t3.cfg", 7);
    const std::string dir = sandbox() + "/tools";
    REQUIRE(run("train --config " + cfg + " --out " + dir).exit_code == 0);
    const std::string ckpt = dir + "/checkpoint-8.bin";

    auto bank = run("bank --checkpoint " + ckpt);
    REQUIRE(bank.exit_code == 0);
    const auto bj = nlohmann::json::parse(bank.output);
    CHECK(bj["capacity"].get<int>() == 8);
    CHECK(bj["levels"].is_array());

    const std::string report = sandbox() + "/report.json";
    auto an = run("analyze --checkpoint " + ckpt + " --n 4 --top 2 --out " + report + " --csv");
    REQUIRE(an.exit_code == 0);
    const auto rj = nlohmann::json::parse(slurp(report));
    CHECK(rj.contains("pearson_gap_vs_cosine"));
    CHECK(rj["good_vs_random"]["k_top"] == 2);
    CHECK(fs::exists(report + ".manifest.json"));
    CHECK(fs::exists(sandbox() + "/report.csv"));

    const std::string result = sandbox() + "/result.json";
    auto se = run("search --checkpoint " + ckpt + " --device " +
                  canas::testing::source_path("devices/neutral.device") +
                  " --mflops 1.0 --budget 12 --population 6 --out " + result);
    REQUIRE(se.exit_code == 0);
    const auto sj = nlohmann::json::parse(slurp(result));
    CHECK(sj["feasible"] == true);
    CHECK(sj["mflops"].get<double>() <= 1.0);
    CHECK(sj["evaluations"].get<int>() <= 12);
    CHECK(fs::exists(result + ".manifest.json"));

    CHECK(run("analyze --checkpoint missing.bin --out x.json").exit_code == 2);
    CHECK(run("search --checkpoint " + ckpt + " --device nope.dev --mflops 1 --out y.json")
              .exit_code == 2);
    // both constraint kinds at once is a usage/config error
    CHECK(run("search --checkpoint " + ckpt + " --device " +
              canas::testing::source_path("devices/neutral.device") +
              " --mflops 1 --latency-ms 1 --out z.json")
              .exit_code == 2);
}

TEST_CASE("an effectively unbounded latency limit returns a near-max subnet") {
    const auto cfg = write_tiny_config("t5.cfg", 21);
    const std::string dir = sandbox() + "/unbounded";
    REQUIRE(run("train --config " + cfg + " --out " + dir).exit_code == 0);
    const std::string out = sandbox() + "/unbounded.json";
    auto r = run("search --checkpoint " + dir + "/checkpoint-8.bin --device " +
                 canas::testing::source_path("devices/neutral.device") +
                 " --latency-ms 1e9 --budget 16 --population 8 --out " + out);
    REQUIRE(r.exit_code == 0);
    const auto j = nlohmann::json::parse(slurp(out));
    CHECK(j["feasible"] == true);
    // nothing is excluded, so the winner can be anywhere in the space
    CHECK(j["latency_ms"].get<double>() < 1e9);
    CHECK(j["fitness"].get<double>() >= 0.0);
}

TEST_CASE("search reports infeasible constraints as a runtime failure") {
    const auto cfg = write_tiny_config("t4.cfg", 13);
    const std::string dir = sandbox() + "/infeasible";
    REQUIRE(run("train --config " + cfg + " --out " + dir).exit_code == 0);
    const std::string out = sandbox() + "/inf.json";
    auto r = run("search --checkpoint " + dir + "/checkpoint-8.bin --device " +
                 canas::testing::source_path("devices/neutral.device") +
                 " --mflops 0.0001 --budget 8 --population 4 --out " + out);
    // the sweep completes and reports infeasibility in the artifact
    REQUIRE(r.exit_code == 0);
    const auto j = nlohmann::json::parse(slurp(out));
    CHECK(j["feasible"] == false);
}
