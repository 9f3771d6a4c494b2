#include "canas/conflict.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "canas/dataset.hpp"
#include "canas/flops.hpp"

namespace canas {

namespace {

NamedTensors subnet_gradient(const SupernetWeights& weights, const SpaceSpec& space,
                             const SubnetConfig& cfg, const Batch& batch) {
    const Batch resized = resize_batch(batch, cfg.resolution);
    const auto fwd = forward(weights, space, cfg, resized);
    return backward(weights, space, cfg, *fwd.cache, resized.labels).grads;
}

// Dot products over the prefix region given by `ext`, for both gradients.
void restricted_dot(const Tensor& ga, const Tensor& gb, const std::vector<int>& ext, double& dot,
                    double& na, double& nb) {
    for (int e : ext)
        if (e == 0) return;
    const auto& fs = ga.shape;
    const std::size_t rank = fs.size();
    std::vector<std::size_t> strides(rank, 1);
    for (std::size_t d = rank - 1; d > 0; --d) strides[d - 1] = strides[d] * fs[d];
    std::vector<int> idx(rank, 0);
    const int last = ext.back();
    while (true) {
        std::size_t base = 0;
        for (std::size_t d = 0; d + 1 < rank; ++d) base += idx[d] * strides[d];
        for (int k = 0; k < last; ++k) {
            const double x = ga.data[base + k], y = gb.data[base + k];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        std::size_t d = rank - 1;
        bool done = true;
        while (d > 0) {
            --d;
            if (++idx[d] < ext[d]) {
                done = false;
                break;
            }
            idx[d] = 0;
        }
        if (done) break;
    }
}

}  // namespace

CosineResult gradient_cosine(const SpaceSpec& space, const NamedTensors& ga,
                             const NamedTensors& gb, const SubnetConfig& a,
                             const SubnetConfig& b) {
    const SliceMap shared = shared_params(space, a, b);
    double dot = 0, na = 0, nb = 0;
    for (std::size_t p = 0; p < ga.size(); ++p)
        restricted_dot(ga[p], gb[p], shared.extents[p], dot, na, nb);
    CosineResult out;
    if (na == 0.0 || nb == 0.0) {
        out.zero_norm = true;
        return out;
    }
    out.cosine = dot / (std::sqrt(na) * std::sqrt(nb));
    return out;
}

CosineResult grad_cosine(const SupernetWeights& weights, const SpaceSpec& space,
                         const SubnetConfig& a, const SubnetConfig& b, const Batch& batch) {
    const NamedTensors ga = subnet_gradient(weights, space, a, batch);
    const NamedTensors gb = subnet_gradient(weights, space, b, batch);
    return gradient_cosine(space, ga, gb, a, b);
}

SimilarityReport similarity_sweep(const SupernetWeights& weights, const SpaceSpec& space,
                                  const std::vector<double>& targets_mflops, int n_per_target,
                                  double band, const Batch& batch, RngStream& rng,
                                  bool strict_targets) {
    SimilarityReport report;
    std::vector<SubnetConfig> cfgs;
    for (double target : targets_mflops) {
        const ComplexityLadder one{{target}, band};
        for (int i = 0; i < n_per_target; ++i) {
            const LevelSample s = sample_at_level(space, one, 0, rng);
            if (s.fallback && strict_targets)
                throw std::runtime_error("similarity_sweep: target " + std::to_string(target) +
                                         " MFLOPs is unreachable");
            cfgs.push_back(s.cfg);
            report.subnets.push_back({encode(space, s.cfg), s.mflops, target});
        }
    }

    const std::size_t n = cfgs.size();
    std::vector<NamedTensors> grads;
    grads.reserve(n);
    for (const auto& cfg : cfgs) grads.push_back(subnet_gradient(weights, space, cfg, batch));

    report.cosine.assign(n, std::vector<double>(n, 0.0));
    std::vector<double> gaps, cosines;
    for (std::size_t i = 0; i < n; ++i) {
        report.cosine[i][i] = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const auto r = gradient_cosine(space, grads[i], grads[j], cfgs[i], cfgs[j]);
            if (r.zero_norm) report.zero_norm_pairs += 1;
            report.cosine[i][j] = report.cosine[j][i] = r.cosine;
            gaps.push_back(std::abs(report.subnets[i].mflops - report.subnets[j].mflops));
            cosines.push_back(r.cosine);
        }
    }

    if (!gaps.empty()) {
        const double max_gap = *std::max_element(gaps.begin(), gaps.end());
        const int num_buckets = 5;
        const double width = max_gap > 0 ? max_gap / num_buckets : 1.0;
        for (int k = 0; k < num_buckets; ++k) {
            GapBucket b;
            b.gap_lo = k * width;
            b.gap_hi = (k + 1) * width;
            double sum = 0;
            for (std::size_t i = 0; i < gaps.size(); ++i) {
                const bool in = gaps[i] >= b.gap_lo && (gaps[i] < b.gap_hi || k == num_buckets - 1);
                if (in) {
                    sum += cosines[i];
                    b.pairs += 1;
                }
            }
            if (b.pairs > 0) b.mean_cosine = sum / b.pairs;
            report.buckets.push_back(b);
        }
        // two-pass Pearson over (gap, cosine)
        double mg = 0, mc = 0;
        for (std::size_t i = 0; i < gaps.size(); ++i) {
            mg += gaps[i];
            mc += cosines[i];
        }
        mg /= gaps.size();
        mc /= gaps.size();
        double sgc = 0, sgg = 0, scc = 0;
        for (std::size_t i = 0; i < gaps.size(); ++i) {
            sgc += (gaps[i] - mg) * (cosines[i] - mc);
            sgg += (gaps[i] - mg) * (gaps[i] - mg);
            scc += (cosines[i] - mc) * (cosines[i] - mc);
        }
        report.pearson_gap_vs_cosine = (sgg > 0 && scc > 0) ? sgc / std::sqrt(sgg * scc) : 0.0;
    }
    return report;
}

GoodVsRandom good_vs_random(const SupernetWeights& weights, const SpaceSpec& space,
                            double level_mflops, double band, int n, int k_top,
                            const std::vector<Batch>& eval_batches, const Batch& grad_batch,
                            RngStream& rng) {
    if (k_top < 1 || k_top > n) throw std::runtime_error("good_vs_random: need 1 <= k_top <= n");
    const ComplexityLadder one{{level_mflops}, band};
    std::vector<SubnetConfig> cfgs;
    for (int i = 0; i < n; ++i) {
        const LevelSample s = sample_at_level(space, one, 0, rng);
        if (s.fallback)
            throw std::runtime_error("good_vs_random: level is unreachable");
        cfgs.push_back(s.cfg);
    }

    std::vector<double> losses(cfgs.size());
    for (std::size_t i = 0; i < cfgs.size(); ++i)
        losses[i] = evaluate(weights, space, cfgs[i], eval_batches).mean_loss;

    std::vector<std::size_t> order(cfgs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return losses[a] < losses[b]; });

    std::vector<NamedTensors> grads;
    grads.reserve(cfgs.size());
    for (const auto& cfg : cfgs) grads.push_back(subnet_gradient(weights, space, cfg, grad_batch));

    auto mean_pairwise = [&](const std::vector<std::size_t>& members) {
        double sum = 0;
        int pairs = 0;
        for (std::size_t i = 0; i < members.size(); ++i)
            for (std::size_t j = i + 1; j < members.size(); ++j) {
                const auto r = gradient_cosine(space, grads[members[i]], grads[members[j]],
                                               cfgs[members[i]], cfgs[members[j]]);
                sum += r.cosine;
                pairs += 1;
            }
        return pairs > 0 ? sum / pairs : 0.0;
    };

    GoodVsRandom out;
    out.n = n;
    out.k_top = k_top;
    out.level_mflops = level_mflops;
    const std::vector<std::size_t> top(order.begin(), order.begin() + k_top);
    out.mean_good = mean_pairwise(top);
    out.mean_random = mean_pairwise(order);
    return out;
}

nlohmann::json to_json(const SimilarityReport& r) {
    nlohmann::json subnets = nlohmann::json::array();
    for (const auto& s : r.subnets)
        subnets.push_back({{"genome", s.genome}, {"mflops", s.mflops}, {"target", s.target}});
    nlohmann::json buckets = nlohmann::json::array();
    for (const auto& b : r.buckets)
        buckets.push_back({{"gap_lo", b.gap_lo},
                           {"gap_hi", b.gap_hi},
                           {"mean_cosine", b.mean_cosine},
                           {"pairs", b.pairs}});
    nlohmann::json j{{"subnets", std::move(subnets)},
                     {"cosine", r.cosine},
                     {"buckets", std::move(buckets)},
                     {"pearson_gap_vs_cosine", r.pearson_gap_vs_cosine},
                     {"zero_norm_pairs", r.zero_norm_pairs}};
    if (r.good_vs_random) {
        j["good_vs_random"] = {{"mean_good", r.good_vs_random->mean_good},
                               {"mean_random", r.good_vs_random->mean_random},
                               {"n", r.good_vs_random->n},
                               {"k_top", r.good_vs_random->k_top},
                               {"level_mflops", r.good_vs_random->level_mflops}};
    }
    return j;
}

std::string to_csv(const SimilarityReport& r) {
    std::ostringstream os;
    os << "flops_gap,cosine\n";
    for (std::size_t i = 0; i < r.subnets.size(); ++i)
        for (std::size_t j = i + 1; j < r.subnets.size(); ++j)
            os << std::abs(r.subnets[i].mflops - r.subnets[j].mflops) << ',' << r.cosine[i][j]
               << '\n';
    return os.str();
}

}  // namespace canas
