#include "canas/evosearch.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "canas/manifest.hpp"

namespace canas {

double DeviceProfile::multiplier_for(int resolution) const {
    const auto it = resolution_multiplier.find(resolution);
    return it == resolution_multiplier.end() ? 1.0 : it->second;
}

DeviceProfile parse_device_profile(const std::string& text) {
    DeviceProfile profile;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key)) continue;
        auto fail = [&](const std::string& what) -> void {
            throw std::runtime_error("device profile line " + std::to_string(line_no) + ": " + what);
        };
        if (key == "device") {
            if (!(ls >> profile.name)) fail("missing name");
        } else if (key == "coeff") {
            std::string kind_name, overhead_kw;
            double coeff = 0, overhead = 0;
            if (!(ls >> kind_name >> coeff >> overhead_kw >> overhead) || overhead_kw != "overhead")
                fail("expected: coeff <kind> <ms-per-mflop> overhead <ms>");
            const auto kind = stage_kind_from(kind_name);
            if (!kind) fail("unknown stage kind '" + kind_name + "'");
            if (coeff < 0 || overhead < 0) fail("coefficients must be >= 0");
            profile.ms_per_mflop[*kind] = coeff;
            profile.overhead_ms[*kind] = overhead;
        } else if (key == "resmul") {
            int res = 0;
            double mul = 0;
            if (!(ls >> res >> mul)) fail("expected: resmul <resolution> <multiplier>");
            profile.resolution_multiplier[res] = mul;
        } else {
            fail("unknown key '" + key + "'");
        }
    }
    if (profile.ms_per_mflop.empty())
        throw std::runtime_error("device profile covers no block kinds");
    return profile;
}

DeviceProfile load_device_profile(const std::string& path) {
    return parse_device_profile(read_file(path));
}

double predict_latency(const DeviceProfile& profile, const SpaceSpec& space,
                       const SubnetConfig& cfg) {
    const FlopsBreakdown bd = subnet_flops(space, cfg);
    double ms = 0.0;
    for (const LayerFlops& layer : bd.layers) {
        const auto coeff = profile.ms_per_mflop.find(layer.kind);
        if (coeff == profile.ms_per_mflop.end())
            throw std::runtime_error(std::string("device profile lacks block kind ") +
                                     to_string(layer.kind));
        const auto overhead = profile.overhead_ms.find(layer.kind);
        ms += coeff->second * layer.mflops +
              (overhead == profile.overhead_ms.end() ? 0.0 : overhead->second);
    }
    return ms * profile.multiplier_for(cfg.resolution);
}

// ---------------------------------------------------------------------------
// Evolutionary search
// ---------------------------------------------------------------------------

namespace {

struct Evaluated {
    double fitness = 0.0;
    double loss = 0.0;
    double latency_ms = 0.0;
    double mflops = 0.0;
};

struct Ranked {
    std::vector<int> genome;
    Evaluated eval;
};

// accuracy desc, loss asc, FLOPs asc, genome asc
bool better(const Ranked& a, const Ranked& b) {
    if (a.eval.fitness != b.eval.fitness) return a.eval.fitness > b.eval.fitness;
    if (a.eval.loss != b.eval.loss) return a.eval.loss < b.eval.loss;
    if (a.eval.mflops != b.eval.mflops) return a.eval.mflops < b.eval.mflops;
    return a.genome < b.genome;
}

}  // namespace

SearchResult search(const SupernetWeights& weights, const SpaceSpec& space,
                    const DeviceProfile& profile, const SearchConfig& config,
                    const std::vector<Batch>& eval_batches) {
    if (config.population < 1 || config.budget < config.population)
        throw std::runtime_error("search: need budget >= population >= 1");
    if (!(config.parent_fraction > 0 && config.parent_fraction <= 1))
        throw std::runtime_error("search: parent_fraction must be in (0, 1]");

    auto satisfies = [&](const SubnetConfig& cfg, double* latency_out, double* mflops_out) {
        const double mflops = subnet_mflops(space, cfg);
        const double latency = predict_latency(profile, space, cfg);
        if (latency_out) *latency_out = latency;
        if (mflops_out) *mflops_out = mflops;
        return config.constraint.kind == Constraint::Kind::LatencyMs
                   ? latency <= config.constraint.limit
                   : mflops <= config.constraint.limit;
    };
    if (!satisfies(min_subnet(space), nullptr, nullptr))
        throw std::runtime_error("search: constraint infeasible even for the min subnet");

    RngStream rng(config.seed);
    std::map<std::vector<int>, Evaluated> cache;
    int evaluations = 0;

    auto evaluate_new = [&](const SubnetConfig& cfg, const std::vector<int>& genome) -> Evaluated {
        Evaluated e;
        satisfies(cfg, &e.latency_ms, &e.mflops);
        const EvalResult r = evaluate(weights, space, cfg, eval_batches);
        e.fitness = r.accuracy;
        e.loss = r.mean_loss;
        cache.emplace(genome, e);
        evaluations += 1;
        return e;
    };

    // uniform constraint-satisfying sample not seen before; nullopt when the
    // attempt budget runs out (tiny spaces eventually exhaust)
    auto fresh_uniform = [&](int attempts) -> std::optional<SubnetConfig> {
        for (int i = 0; i < attempts; ++i) {
            SubnetConfig cfg = sample_uniform(space, rng);
            if (!satisfies(cfg, nullptr, nullptr)) continue;
            if (cache.count(encode(space, cfg))) continue;
            return cfg;
        }
        return std::nullopt;
    };

    std::vector<Ranked> population;
    auto admit = [&](const SubnetConfig& cfg) {
        const auto genome = encode(space, cfg);
        const Evaluated e = evaluate_new(cfg, genome);
        population.push_back({genome, e});
    };

    while (static_cast<int>(population.size()) < config.population &&
           evaluations < config.budget) {
        const auto cfg = fresh_uniform(2000);
        if (!cfg) break;
        admit(*cfg);
    }
    if (population.empty()) throw std::runtime_error("search: could not seed the population");

    SearchResult result;
    auto record_best = [&] {
        std::stable_sort(population.begin(), population.end(), better);
        const Ranked& top = population.front();
        if (result.history.empty() || top.eval.fitness >= result.history.back()) {
            result.best_genome = top.genome;
            result.fitness = top.eval.fitness;
            result.loss = top.eval.loss;
            result.latency_ms = top.eval.latency_ms;
            result.mflops = top.eval.mflops;
        }
        result.history.push_back(result.history.empty()
                                     ? top.eval.fitness
                                     : std::max(result.history.back(), top.eval.fitness));
    };
    record_best();

    while (evaluations < config.budget) {
        const int parents =
            std::max(1, static_cast<int>(population.size() * config.parent_fraction));
        std::vector<Ranked> next(population.begin(), population.begin() + parents);

        bool stalled = false;
        int produced = 0;
        while (static_cast<int>(next.size()) < config.population &&
               evaluations < config.budget) {
            std::optional<SubnetConfig> child;
            for (int attempt = 0; attempt < 64 && !child; ++attempt) {
                const Ranked& pa = next[rng.uniform_index(static_cast<std::size_t>(parents))];
                SubnetConfig cand;
                if (rng.next_u64() & 1u) {
                    cand = mutate(space, decode(space, pa.genome), config.mutation_rate, rng);
                } else {
                    const Ranked& pb = next[rng.uniform_index(static_cast<std::size_t>(parents))];
                    cand = crossover(space, decode(space, pa.genome), decode(space, pb.genome), rng);
                }
                if (satisfies(cand, nullptr, nullptr) && !cache.count(encode(space, cand)))
                    child = std::move(cand);
            }
            if (!child) child = fresh_uniform(2000);  // operators stalled; explore uniformly
            if (!child) {
                stalled = true;  // nothing unexplored within the constraint
                break;
            }
            const auto genome = encode(space, *child);
            next.push_back({genome, evaluate_new(*child, genome)});
            produced += 1;
        }
        population = std::move(next);
        record_best();
        if (stalled && produced == 0) break;
    }

    result.best = decode(space, result.best_genome);
    result.evaluations = evaluations;
    result.feasible = true;
    return result;
}

std::vector<SearchResult> pareto_sweep(const SupernetWeights& weights, const SpaceSpec& space,
                                       const DeviceProfile& profile, const SearchConfig& base,
                                       const std::vector<double>& limits,
                                       const std::vector<Batch>& eval_batches) {
    std::vector<SearchResult> results;
    for (std::size_t i = 0; i < limits.size(); ++i) {
        SearchConfig cfg = base;
        cfg.constraint.limit = limits[i];
        cfg.seed = base.seed + i;
        try {
            results.push_back(search(weights, space, profile, cfg, eval_batches));
        } catch (const std::exception&) {
            SearchResult r;
            r.feasible = false;
            r.latency_ms = limits[i];
            results.push_back(std::move(r));
        }
    }
    return results;
}

nlohmann::json to_json(const SearchResult& r) {
    return nlohmann::json{{"genome", r.best_genome}, {"fitness", r.fitness},
                          {"loss", r.loss},          {"latency_ms", r.latency_ms},
                          {"mflops", r.mflops},      {"history", r.history},
                          {"evaluations", r.evaluations}, {"feasible", r.feasible}};
}

std::string sweep_csv(const std::vector<SearchResult>& results) {
    std::ostringstream os;
    os << "latency_ms,mflops,fitness,loss,feasible\n";
    for (const auto& r : results)
        os << r.latency_ms << ',' << r.mflops << ',' << r.fitness << ',' << r.loss << ','
           << (r.feasible ? 1 : 0) << '\n';
    return os.str();
}

}  // namespace canas
