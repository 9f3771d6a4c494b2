#include "canas/arch_space.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "canas/manifest.hpp"

namespace canas {

const char* to_string(StageKind kind) {
    switch (kind) {
        case StageKind::ConvStem: return "ConvStem";
        case StageKind::MBv2: return "MBv2";
        case StageKind::MBv3: return "MBv3";
        case StageKind::Transformer: return "Transformer";
        case StageKind::MBPool: return "MBPool";
    }
    return "?";
}

std::optional<StageKind> stage_kind_from(const std::string& name) {
    if (name == "ConvStem") return StageKind::ConvStem;
    if (name == "MBv2") return StageKind::MBv2;
    if (name == "MBv3") return StageKind::MBv3;
    if (name == "Transformer") return StageKind::Transformer;
    if (name == "MBPool") return StageKind::MBPool;
    return std::nullopt;
}

std::vector<int> StageSpec::channel_choices() const {
    std::vector<int> out;
    for (int c = channel_min; c <= channel_max; c += channel_step) out.push_back(c);
    return out;
}

// ---------------------------------------------------------------------------
// Space file format
// ---------------------------------------------------------------------------

std::string SpaceSpec::serialize() const {
    std::ostringstream os;
    os << "space " << name << "\n";
    os << "in_channels " << in_channels << "\n";
    os << "classes " << num_classes << "\n";
    os << "head_dim " << head_dim << "\n";
    os << "qk_dim " << qk_dim << "\n";
    os << "flops_per_mac " << flops_per_mac << "\n";
    os << "resolutions";
    for (int r : resolutions) os << ' ' << r;
    os << "\n";
    for (const StageSpec& st : stages) {
        os << "stage " << to_string(st.kind)
           << " depth " << st.depth_min << ' ' << st.depth_max
           << " channels " << st.channel_min << ' ' << st.channel_max << ' ' << st.channel_step
           << (st.kind == StageKind::Transformer ? " vscale" : " kernel");
        for (int v : st.kernel_or_vscale) os << ' ' << v;
        os << " expansion";
        for (int v : st.expansion) os << ' ' << v;
        os << " stride " << st.stride << "\n";
    }
    return os.str();
}

std::uint64_t SpaceSpec::hash() const { return fnv1a64(serialize()); }

namespace {

[[noreturn]] void parse_fail(std::size_t line_no, const std::string& what) {
    throw std::runtime_error("space file line " + std::to_string(line_no) + ": " + what);
}

int to_int(const std::string& tok, std::size_t line_no) {
    try {
        std::size_t pos = 0;
        int v = std::stoi(tok, &pos);
        if (pos != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        parse_fail(line_no, "expected integer, got '" + tok + "'");
    }
}

}  // namespace

SpaceSpec parse_space(const std::string& text) {
    SpaceSpec space;
    space.flops_per_mac = 2.0;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line.erase(hash_pos);
        std::istringstream ls(line);
        std::vector<std::string> tok;
        for (std::string t; ls >> t;) tok.push_back(t);
        if (tok.empty()) continue;
        const std::string& key = tok[0];
        if (key == "space") {
            if (tok.size() != 2) parse_fail(line_no, "space takes one name");
            space.name = tok[1];
        } else if (key == "in_channels") {
            space.in_channels = to_int(tok.at(1), line_no);
        } else if (key == "classes") {
            space.num_classes = to_int(tok.at(1), line_no);
        } else if (key == "head_dim") {
            space.head_dim = to_int(tok.at(1), line_no);
        } else if (key == "qk_dim") {
            space.qk_dim = to_int(tok.at(1), line_no);
        } else if (key == "flops_per_mac") {
            space.flops_per_mac = std::stod(tok.at(1));
        } else if (key == "resolutions") {
            for (std::size_t i = 1; i < tok.size(); ++i)
                space.resolutions.push_back(to_int(tok[i], line_no));
        } else if (key == "stage") {
            auto kind = stage_kind_from(tok.at(1));
            if (!kind) parse_fail(line_no, "unknown stage kind '" + tok.at(1) + "'");
            StageSpec st;
            st.kind = *kind;
            st.kernel_or_vscale.clear();
            st.expansion.clear();
            std::size_t i = 2;
            while (i < tok.size()) {
                const std::string& field = tok[i];
                if (field == "depth") {
                    st.depth_min = to_int(tok.at(i + 1), line_no);
                    st.depth_max = to_int(tok.at(i + 2), line_no);
                    i += 3;
                } else if (field == "channels") {
                    st.channel_min = to_int(tok.at(i + 1), line_no);
                    st.channel_max = to_int(tok.at(i + 2), line_no);
                    st.channel_step = to_int(tok.at(i + 3), line_no);
                    i += 4;
                } else if (field == "kernel" || field == "vscale") {
                    ++i;
                    while (i < tok.size() && (std::isdigit(static_cast<unsigned char>(tok[i][0]))))
                        st.kernel_or_vscale.push_back(to_int(tok[i++], line_no));
                } else if (field == "expansion") {
                    ++i;
                    while (i < tok.size() && (std::isdigit(static_cast<unsigned char>(tok[i][0]))))
                        st.expansion.push_back(to_int(tok[i++], line_no));
                } else if (field == "stride") {
                    st.stride = to_int(tok.at(i + 1), line_no);
                    i += 2;
                } else {
                    parse_fail(line_no, "unknown stage field '" + field + "'");
                }
            }
            if (st.expansion.empty()) st.expansion = {1};
            if (st.kernel_or_vscale.empty()) st.kernel_or_vscale = {st.kind == StageKind::Transformer ? 1 : 3};
            space.stages.push_back(std::move(st));
        } else {
            parse_fail(line_no, "unknown key '" + key + "'");
        }
    }
    return space;
}

SpaceSpec load_space(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open space file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_space(buf.str());
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

std::vector<std::string> validate(const SpaceSpec& space) {
    std::vector<std::string> errs;
    auto err = [&](const std::string& m) { errs.push_back(m); };

    if (space.stages.empty()) err("space has no stages");
    if (space.resolutions.empty()) err("resolutions empty");
    for (std::size_t i = 0; i < space.resolutions.size(); ++i) {
        if (space.resolutions[i] <= 0) err("resolution must be positive");
        if (i > 0 && space.resolutions[i] <= space.resolutions[i - 1])
            err("resolutions must be strictly increasing");
    }
    if (space.in_channels < 1) err("in_channels must be >= 1");
    if (space.num_classes < 2) err("classes must be >= 2");
    if (space.head_dim < 1) err("head_dim must be >= 1");
    if (space.qk_dim < 1) err("qk_dim must be >= 1");
    if (!(space.flops_per_mac > 0)) err("flops_per_mac must be positive");

    for (std::size_t s = 0; s < space.stages.size(); ++s) {
        const StageSpec& st = space.stages[s];
        const std::string tag = "stage " + std::to_string(s) + " (" + to_string(st.kind) + "): ";
        if (st.depth_min < 1) err(tag + "depth min must be >= 1");
        if (st.depth_min > st.depth_max) err(tag + "depth min > max");
        if (st.fixed_depth() && (st.depth_min != 1 || st.depth_max != 1))
            err(tag + "fixed depth 1 required");
        if (st.channel_min < 1 || st.channel_min > st.channel_max)
            err(tag + "bad channel range");
        if (st.channel_step <= 0)
            err(tag + "channel step must be positive");
        else if ((st.channel_max - st.channel_min) % st.channel_step != 0)
            err(tag + "step mismatch: channel step does not divide (max - min)");
        if (st.kernel_or_vscale.empty()) err(tag + "empty kernel/vscale choices");
        if (st.expansion.empty()) err(tag + "empty expansion choices");
        for (int v : st.kernel_or_vscale)
            if (v < 1) err(tag + "kernel/vscale choices must be >= 1");
        for (int v : st.expansion)
            if (v < 1) err(tag + "expansion choices must be >= 1");
        if (st.stride != 1 && st.stride != 2) err(tag + "stride must be 1 or 2");
        if (st.kind == StageKind::Transformer) {
            if (st.channel_step != space.head_dim)
                err(tag + "step mismatch: transformer channel step must equal head size " +
                    std::to_string(space.head_dim));
            if (st.channel_min % space.head_dim != 0)
                err(tag + "transformer channels must be head-size multiples");
        } else {
            for (int k : st.kernel_or_vscale)
                if (k % 2 == 0) err(tag + "conv kernel sizes must be odd");
        }
    }
    if (!space.stages.empty()) {
        if (space.stages.front().kind != StageKind::ConvStem)
            err("first stage must be ConvStem");
        if (space.stages.back().kind != StageKind::MBPool)
            err("last stage must be MBPool");
        for (std::size_t s = 1; s + 1 < space.stages.size(); ++s) {
            StageKind k = space.stages[s].kind;
            if (k == StageKind::ConvStem || k == StageKind::MBPool)
                err("ConvStem/MBPool allowed only at the ends");
        }
        const StageSpec& pool = space.stages.back();
        if (pool.kind == StageKind::MBPool && pool.channel_min != pool.channel_max)
            err("MBPool channels must be fixed");
    }
    return errs;
}

std::vector<std::string> validate_config(const SpaceSpec& space, const SubnetConfig& cfg) {
    std::vector<std::string> errs;
    auto err = [&](const std::string& m) { errs.push_back(m); };
    if (cfg.stages.size() != space.stages.size()) {
        err("stage count mismatch");
        return errs;
    }
    if (std::find(space.resolutions.begin(), space.resolutions.end(), cfg.resolution) ==
        space.resolutions.end())
        err("resolution not in space");
    for (std::size_t s = 0; s < space.stages.size(); ++s) {
        const StageSpec& st = space.stages[s];
        const StageConfig& sc = cfg.stages[s];
        const std::string tag = "stage " + std::to_string(s) + ": ";
        if (sc.depth < st.depth_min || sc.depth > st.depth_max) err(tag + "depth out of range");
        const auto channels = st.channel_choices();
        if (std::find(channels.begin(), channels.end(), sc.channels) == channels.end())
            err(tag + "channels not a choice");
        if (sc.kernel_or_vscale.size() != static_cast<std::size_t>(sc.depth) ||
            sc.expansion.size() != static_cast<std::size_t>(sc.depth)) {
            err(tag + "per-layer list size != depth");
            continue;
        }
        for (int v : sc.kernel_or_vscale)
            if (std::find(st.kernel_or_vscale.begin(), st.kernel_or_vscale.end(), v) ==
                st.kernel_or_vscale.end())
                err(tag + "kernel/vscale not a choice");
        for (int v : sc.expansion)
            if (std::find(st.expansion.begin(), st.expansion.end(), v) == st.expansion.end())
                err(tag + "expansion not a choice");
    }
    return errs;
}

// ---------------------------------------------------------------------------
// Sampling and extremes
// ---------------------------------------------------------------------------

namespace {

template <typename PickDepth, typename PickChannel, typename PickChoice, typename PickRes>
SubnetConfig build_config(const SpaceSpec& space, PickDepth pick_depth, PickChannel pick_channel,
                          PickChoice pick_choice, PickRes pick_res) {
    SubnetConfig cfg;
    cfg.resolution = pick_res(space.resolutions);
    cfg.stages.reserve(space.stages.size());
    for (const StageSpec& st : space.stages) {
        StageConfig sc;
        sc.depth = pick_depth(st);
        sc.channels = pick_channel(st);
        sc.kernel_or_vscale.reserve(sc.depth);
        sc.expansion.reserve(sc.depth);
        for (int l = 0; l < sc.depth; ++l) {
            sc.kernel_or_vscale.push_back(pick_choice(st.kernel_or_vscale));
            sc.expansion.push_back(pick_choice(st.expansion));
        }
        cfg.stages.push_back(std::move(sc));
    }
    return cfg;
}

}  // namespace

SubnetConfig sample_uniform(const SpaceSpec& space, RngStream& rng) {
    return build_config(
        space,
        [&](const StageSpec& st) { return rng.uniform_int(st.depth_min, st.depth_max); },
        [&](const StageSpec& st) {
            const auto choices = st.channel_choices();
            return choices[rng.uniform_index(choices.size())];
        },
        [&](const std::vector<int>& choices) { return choices[rng.uniform_index(choices.size())]; },
        [&](const std::vector<int>& res) { return res[rng.uniform_index(res.size())]; });
}

SubnetConfig min_subnet(const SpaceSpec& space) {
    return build_config(
        space, [](const StageSpec& st) { return st.depth_min; },
        [](const StageSpec& st) { return st.channel_min; },
        [](const std::vector<int>& choices) { return *std::min_element(choices.begin(), choices.end()); },
        [](const std::vector<int>& res) { return res.front(); });
}

SubnetConfig max_subnet(const SpaceSpec& space) {
    return build_config(
        space, [](const StageSpec& st) { return st.depth_max; },
        [](const StageSpec& st) { return st.channel_max; },
        [](const std::vector<int>& choices) { return *std::max_element(choices.begin(), choices.end()); },
        [](const std::vector<int>& res) { return res.back(); });
}

SubnetConfig mutate(const SpaceSpec& space, const SubnetConfig& cfg, double rate, RngStream& rng) {
    SubnetConfig out = cfg;
    auto hit = [&]() { return rng.uniform01() < rate; };
    if (hit()) out.resolution = space.resolutions[rng.uniform_index(space.resolutions.size())];
    for (std::size_t s = 0; s < space.stages.size(); ++s) {
        const StageSpec& st = space.stages[s];
        StageConfig& sc = out.stages[s];
        if (hit()) {
            const int new_depth = rng.uniform_int(st.depth_min, st.depth_max);
            sc.kernel_or_vscale.resize(new_depth);
            sc.expansion.resize(new_depth);
            for (int l = sc.depth; l < new_depth; ++l) {
                sc.kernel_or_vscale[l] = st.kernel_or_vscale[rng.uniform_index(st.kernel_or_vscale.size())];
                sc.expansion[l] = st.expansion[rng.uniform_index(st.expansion.size())];
            }
            sc.depth = new_depth;
        }
        if (hit()) {
            const auto choices = st.channel_choices();
            sc.channels = choices[rng.uniform_index(choices.size())];
        }
        for (int l = 0; l < sc.depth; ++l) {
            if (hit())
                sc.kernel_or_vscale[l] = st.kernel_or_vscale[rng.uniform_index(st.kernel_or_vscale.size())];
            if (hit())
                sc.expansion[l] = st.expansion[rng.uniform_index(st.expansion.size())];
        }
    }
    return out;
}

SubnetConfig crossover(const SpaceSpec& space, const SubnetConfig& a, const SubnetConfig& b,
                       RngStream& rng) {
    if (a.stages.size() != b.stages.size() || a.stages.size() != space.stages.size())
        throw std::runtime_error("crossover: configs from different spaces");
    auto coin = [&]() { return rng.next_u64() & 1u; };
    SubnetConfig out;
    out.resolution = coin() ? a.resolution : b.resolution;
    out.stages.resize(space.stages.size());
    for (std::size_t s = 0; s < space.stages.size(); ++s) {
        const StageConfig& pa = a.stages[s];
        const StageConfig& pb = b.stages[s];
        const StageConfig& depth_donor = coin() ? pa : pb;
        const StageConfig& other = (&depth_donor == &pa) ? pb : pa;
        StageConfig& sc = out.stages[s];
        sc.depth = depth_donor.depth;
        sc.channels = coin() ? pa.channels : pb.channels;
        sc.kernel_or_vscale.resize(sc.depth);
        sc.expansion.resize(sc.depth);
        for (int l = 0; l < sc.depth; ++l) {
            const bool other_has = l < other.depth;
            sc.kernel_or_vscale[l] = (other_has && coin()) ? other.kernel_or_vscale[l]
                                                           : depth_donor.kernel_or_vscale[l];
            sc.expansion[l] = (other_has && coin()) ? other.expansion[l] : depth_donor.expansion[l];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Genome encoding
// ---------------------------------------------------------------------------

namespace {

int index_of(const std::vector<int>& choices, int value, const char* what) {
    const auto it = std::find(choices.begin(), choices.end(), value);
    if (it == choices.end())
        throw std::runtime_error(std::string("encode: value not a ") + what + " choice");
    return static_cast<int>(it - choices.begin());
}

}  // namespace

std::size_t genome_length(const SpaceSpec& space) {
    std::size_t n = 1;  // resolution
    for (const StageSpec& st : space.stages)
        n += 2 + 2 * static_cast<std::size_t>(st.depth_max);
    return n;
}

std::vector<int> encode(const SpaceSpec& space, const SubnetConfig& cfg) {
    std::vector<int> g;
    g.reserve(genome_length(space));
    g.push_back(index_of(space.resolutions, cfg.resolution, "resolution"));
    for (std::size_t s = 0; s < space.stages.size(); ++s) {
        const StageSpec& st = space.stages[s];
        const StageConfig& sc = cfg.stages[s];
        g.push_back(sc.depth - st.depth_min);
        g.push_back(index_of(st.channel_choices(), sc.channels, "channel"));
        for (int l = 0; l < st.depth_max; ++l)
            g.push_back(l < sc.depth ? index_of(st.kernel_or_vscale, sc.kernel_or_vscale[l], "kernel/vscale") : 0);
        for (int l = 0; l < st.depth_max; ++l)
            g.push_back(l < sc.depth ? index_of(st.expansion, sc.expansion[l], "expansion") : 0);
    }
    return g;
}

SubnetConfig decode(const SpaceSpec& space, const std::vector<int>& genome) {
    if (genome.size() != genome_length(space))
        throw std::runtime_error("decode: genome length mismatch");
    auto pick = [](const std::vector<int>& choices, int idx, const char* what) {
        if (idx < 0 || idx >= static_cast<int>(choices.size()))
            throw std::runtime_error(std::string("decode: index out of range for ") + what);
        return choices[idx];
    };
    SubnetConfig cfg;
    std::size_t pos = 0;
    cfg.resolution = pick(space.resolutions, genome[pos++], "resolution");
    for (const StageSpec& st : space.stages) {
        StageConfig sc;
        sc.depth = st.depth_min + genome[pos++];
        if (sc.depth < st.depth_min || sc.depth > st.depth_max)
            throw std::runtime_error("decode: depth out of range");
        sc.channels = pick(st.channel_choices(), genome[pos++], "channel");
        sc.kernel_or_vscale.resize(sc.depth);
        sc.expansion.resize(sc.depth);
        for (int l = 0; l < st.depth_max; ++l) {
            const int idx = genome[pos++];
            if (l < sc.depth) sc.kernel_or_vscale[l] = pick(st.kernel_or_vscale, idx, "kernel/vscale");
        }
        for (int l = 0; l < st.depth_max; ++l) {
            const int idx = genome[pos++];
            if (l < sc.depth) sc.expansion[l] = pick(st.expansion, idx, "expansion");
        }
        cfg.stages.push_back(std::move(sc));
    }
    return cfg;
}

std::string serialize_subnet(const SpaceSpec& space, const SubnetConfig& cfg) {
    std::ostringstream os;
    os << space.name << ' ' << kSubnetSchemaVersion;
    for (int v : encode(space, cfg)) os << ' ' << v;
    return os.str();
}

SubnetConfig parse_subnet(const SpaceSpec& space, const std::string& text) {
    std::istringstream is(text);
    std::string name;
    int version = 0;
    if (!(is >> name >> version)) throw std::runtime_error("subnet string: missing header");
    if (name != space.name)
        throw std::runtime_error("subnet string: space name '" + name + "' != '" + space.name + "'");
    if (version != kSubnetSchemaVersion)
        throw std::runtime_error("subnet string: unsupported schema version");
    std::vector<int> genome;
    for (int v; is >> v;) genome.push_back(v);
    return decode(space, genome);
}

// ---------------------------------------------------------------------------
// Cardinality
// ---------------------------------------------------------------------------

Cardinality cardinality(const SpaceSpec& space, CountingConvention convention) {
    BigUint total = 1;
    for (const StageSpec& st : space.stages) {
        const BigUint channels = static_cast<int>(st.channel_choices().size());
        const BigUint per_layer =
            BigUint(static_cast<int>(st.kernel_or_vscale.size())) * static_cast<int>(st.expansion.size());
        BigUint stage_count = 0;
        if (convention == CountingConvention::PerLayerChoices) {
            // sum over depths of per-layer products, active layers only
            BigUint pow = 1;
            for (int d = 1; d <= st.depth_max; ++d) {
                pow *= per_layer;
                if (d >= st.depth_min) stage_count += pow;
            }
        } else {
            stage_count = BigUint(st.depth_max - st.depth_min + 1) * per_layer;
        }
        total *= stage_count * channels;
    }
    total *= static_cast<int>(space.resolutions.size());

    Cardinality out;
    out.exact = total;
    out.log10 = static_cast<double>(boost::multiprecision::log10(
        boost::multiprecision::cpp_bin_float_50(total)));
    return out;
}

}  // namespace canas
