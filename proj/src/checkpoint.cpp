#include "canas/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace canas {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'N', 'A', 'S', 'C', 'K', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF64 = 0;

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw std::runtime_error("checkpoint truncated");
    return v;
}

void put_string(std::ostream& os, const std::string& s) {
    put<std::uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
    const auto n = get<std::uint64_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw std::runtime_error("checkpoint truncated");
    return s;
}

void put_genome(std::ostream& os, const std::vector<int>& g) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(g.size()));
    for (int v : g) put<std::int32_t>(os, v);
}

std::vector<int> get_genome(std::istream& is) {
    const auto n = get<std::uint32_t>(is);
    std::vector<int> g(n);
    for (auto& v : g) v = get<std::int32_t>(is);
    return g;
}

void put_tensors(std::ostream& os, const NamedTensors& t) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.size()));
    for (std::size_t i = 0; i < t.size(); ++i) {
        put_string(os, t.names[i]);
        put<std::uint8_t>(os, kDtypeF64);
        put<std::uint32_t>(os, static_cast<std::uint32_t>(t[i].shape.size()));
        for (int d : t[i].shape) put<std::int64_t>(os, d);
        os.write(reinterpret_cast<const char*>(t[i].ptr()),
                 t[i].numel() * static_cast<std::streamsize>(sizeof(Scalar)));
    }
}

NamedTensors get_tensors(std::istream& is) {
    NamedTensors t;
    const auto count = get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        t.names.push_back(get_string(is));
        if (get<std::uint8_t>(is) != kDtypeF64)
            throw std::runtime_error("checkpoint: unsupported tensor dtype");
        const auto ndim = get<std::uint32_t>(is);
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = static_cast<int>(get<std::int64_t>(is));
        Tensor tensor(shape);
        is.read(reinterpret_cast<char*>(tensor.ptr()),
                tensor.numel() * static_cast<std::streamsize>(sizeof(Scalar)));
        if (!is) throw std::runtime_error("checkpoint truncated");
        t.tensors.push_back(std::move(tensor));
    }
    t.rebuild_index();
    return t;
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainerSnapshot& s) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
        os.write(kMagic, sizeof kMagic);
        put<std::uint32_t>(os, kVersion);
        put<std::uint64_t>(os, s.space_hash);
        put_string(os, s.space_text);
        put_string(os, s.config_text);
        put<std::int64_t>(os, s.step);
        put<std::uint64_t>(os, s.ladder_state.current_level);
        put<std::int64_t>(os, s.ladder_state.step_count);
        for (auto v : s.sampler_rng) put<std::uint64_t>(os, v);
        for (auto v : s.data_rng) put<std::uint64_t>(os, v);
        put_tensors(os, s.weights);
        put_tensors(os, s.momentum);
        put<std::uint32_t>(os, static_cast<std::uint32_t>(s.hss_genomes.size()));
        for (std::size_t i = 0; i < s.hss_genomes.size(); ++i) {
            put_genome(os, s.hss_genomes[i]);
            put<double>(os, s.hss_mflops[i]);
        }
        put<std::uint64_t>(os, s.bank_capacity);
        put<std::uint32_t>(os, static_cast<std::uint32_t>(s.bank_levels.size()));
        for (const auto& level : s.bank_levels) {
            put<std::uint32_t>(os, static_cast<std::uint32_t>(level.size()));
            for (const auto& [genome, loss, step_seen] : level) {
                put_genome(os, genome);
                put<double>(os, loss);
                put<std::int64_t>(os, step_seen);
            }
        }
        if (!os.flush()) throw std::runtime_error("checkpoint write failed: " + path);
    }
    fs::rename(tmp, target);
}

TrainerSnapshot load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    if (get<std::uint32_t>(is) != kVersion)
        throw std::runtime_error("unsupported checkpoint version");
    TrainerSnapshot s;
    s.space_hash = get<std::uint64_t>(is);
    s.space_text = get_string(is);
    s.config_text = get_string(is);
    s.step = get<std::int64_t>(is);
    s.ladder_state.current_level = get<std::uint64_t>(is);
    s.ladder_state.step_count = get<std::int64_t>(is);
    for (auto& v : s.sampler_rng) v = get<std::uint64_t>(is);
    for (auto& v : s.data_rng) v = get<std::uint64_t>(is);
    s.weights = get_tensors(is);
    s.momentum = get_tensors(is);
    const auto hss_n = get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < hss_n; ++i) {
        s.hss_genomes.push_back(get_genome(is));
        s.hss_mflops.push_back(get<double>(is));
    }
    s.bank_capacity = get<std::uint64_t>(is);
    const auto levels = get<std::uint32_t>(is);
    s.bank_levels.resize(levels);
    for (auto& level : s.bank_levels) {
        const auto n = get<std::uint32_t>(is);
        for (std::uint32_t i = 0; i < n; ++i) {
            auto genome = get_genome(is);
            const double loss = get<double>(is);
            const auto step_seen = get<std::int64_t>(is);
            level.emplace_back(std::move(genome), loss, step_seen);
        }
    }
    return s;
}

}  // namespace canas
