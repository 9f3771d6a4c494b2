#include "canas/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace canas {

namespace {

// Upsample a coarse [C, g, g] grid to [C, r, r]; the class patterns stay
// smooth so nearby pixels carry correlated signal.
void upsample_pattern(const std::vector<Scalar>& coarse, int channels, int grid, Scalar* out,
                      int res) {
    const double scale = static_cast<double>(grid) / res;
    for (int c = 0; c < channels; ++c) {
        const Scalar* src = coarse.data() + static_cast<std::size_t>(c) * grid * grid;
        Scalar* dst = out + static_cast<std::size_t>(c) * res * res;
        for (int y = 0; y < res; ++y) {
            const double sy = std::clamp((y + 0.5) * scale - 0.5, 0.0, grid - 1.0);
            const int y0 = static_cast<int>(sy);
            const int y1 = std::min(y0 + 1, grid - 1);
            const double fy = sy - y0;
            for (int x = 0; x < res; ++x) {
                const double sx = std::clamp((x + 0.5) * scale - 0.5, 0.0, grid - 1.0);
                const int x0 = static_cast<int>(sx);
                const int x1 = std::min(x0 + 1, grid - 1);
                const double fx = sx - x0;
                dst[y * res + x] = (1 - fy) * ((1 - fx) * src[y0 * grid + x0] + fx * src[y0 * grid + x1]) +
                                   fy * ((1 - fx) * src[y1 * grid + x0] + fx * src[y1 * grid + x1]);
            }
        }
    }
}

void fill_split(Tensor& images, std::vector<int>& labels, int count, int classes, int channels,
                int res, double noise, const std::vector<std::vector<Scalar>>& patterns,
                RngStream& rng) {
    images = Tensor({count, channels, res, res});
    labels.resize(count);
    const std::size_t stride = static_cast<std::size_t>(channels) * res * res;
    std::vector<Scalar> base(stride);
    for (int i = 0; i < count; ++i) {
        const int label = i % classes;
        labels[i] = label;
        upsample_pattern(patterns[label], channels, 4, base.data(), res);
        Scalar* dst = images.ptr() + i * stride;
        for (std::size_t k = 0; k < stride; ++k) dst[k] = base[k] + noise * rng.normal();
    }
}

constexpr char kMagic[8] = {'C', 'A', 'N', 'A', 'S', 'D', 'S', '1'};

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw std::runtime_error("dataset file truncated");
    return v;
}

}  // namespace

Dataset Dataset::synthetic(const DatasetSpec& spec, int channels, int base_resolution) {
    if (spec.classes < 2 || spec.train_count < 1 || spec.eval_count < 1)
        throw std::runtime_error("synthetic dataset: bad spec");
    Dataset ds;
    ds.channels_ = channels;
    ds.resolution_ = base_resolution;
    ds.classes_ = spec.classes;

    RngStream rng(spec.seed);
    constexpr int kGrid = 4;
    constexpr double kAmplitude = 1.5;
    std::vector<std::vector<Scalar>> patterns(spec.classes);
    for (auto& p : patterns) {
        p.resize(static_cast<std::size_t>(channels) * kGrid * kGrid);
        for (Scalar& v : p) v = kAmplitude * rng.normal();
    }
    fill_split(ds.train_images_, ds.train_labels_, spec.train_count, spec.classes, channels,
               base_resolution, spec.noise, patterns, rng);
    fill_split(ds.eval_images_, ds.eval_labels_, spec.eval_count, spec.classes, channels,
               base_resolution, spec.noise, patterns, rng);
    return ds;
}

Batch Dataset::train_batch(int batch_size, RngStream& rng) const {
    Batch batch;
    batch.images = Tensor({batch_size, channels_, resolution_, resolution_});
    batch.labels.resize(batch_size);
    const std::size_t stride = static_cast<std::size_t>(channels_) * resolution_ * resolution_;
    for (int i = 0; i < batch_size; ++i) {
        const std::size_t pick = rng.uniform_index(train_labels_.size());
        std::copy_n(train_images_.ptr() + pick * stride, stride, batch.images.ptr() + i * stride);
        batch.labels[i] = train_labels_[pick];
    }
    return batch;
}

std::vector<Batch> Dataset::eval_batches(int batch_size) const {
    std::vector<Batch> out;
    const std::size_t stride = static_cast<std::size_t>(channels_) * resolution_ * resolution_;
    for (int start = 0; start < eval_count(); start += batch_size) {
        const int n = std::min(batch_size, eval_count() - start);
        Batch b;
        b.images = Tensor({n, channels_, resolution_, resolution_});
        b.labels.assign(eval_labels_.begin() + start, eval_labels_.begin() + start + n);
        std::copy_n(eval_images_.ptr() + start * stride, static_cast<std::size_t>(n) * stride,
                    b.images.ptr());
        out.push_back(std::move(b));
    }
    return out;
}

void Dataset::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write dataset: " + path);
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, 1);
    put<std::int32_t>(os, train_count());
    put<std::int32_t>(os, eval_count());
    put<std::int32_t>(os, channels_);
    put<std::int32_t>(os, resolution_);
    put<std::int32_t>(os, classes_);
    os.write(reinterpret_cast<const char*>(train_images_.ptr()),
             train_images_.numel() * static_cast<std::streamsize>(sizeof(Scalar)));
    for (int l : train_labels_) put<std::int32_t>(os, l);
    os.write(reinterpret_cast<const char*>(eval_images_.ptr()),
             eval_images_.numel() * static_cast<std::streamsize>(sizeof(Scalar)));
    for (int l : eval_labels_) put<std::int32_t>(os, l);
}

Dataset Dataset::from_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open dataset: " + path);
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw std::runtime_error("not a dataset file: " + path);
    if (get<std::uint32_t>(is) != 1) throw std::runtime_error("unsupported dataset version");
    Dataset ds;
    const int train_n = get<std::int32_t>(is);
    const int eval_n = get<std::int32_t>(is);
    ds.channels_ = get<std::int32_t>(is);
    ds.resolution_ = get<std::int32_t>(is);
    ds.classes_ = get<std::int32_t>(is);
    if (train_n < 0 || eval_n < 0 || ds.channels_ <= 0 || ds.resolution_ <= 0 || ds.classes_ < 2)
        throw std::runtime_error("corrupt dataset header");
    auto read_split = [&](Tensor& images, std::vector<int>& labels, int n) {
        images = Tensor({n, ds.channels_, ds.resolution_, ds.resolution_});
        is.read(reinterpret_cast<char*>(images.ptr()),
                images.numel() * static_cast<std::streamsize>(sizeof(Scalar)));
        if (!is) throw std::runtime_error("dataset file truncated");
        labels.resize(n);
        for (int i = 0; i < n; ++i) {
            labels[i] = get<std::int32_t>(is);
            if (labels[i] < 0 || labels[i] >= ds.classes_)
                throw std::runtime_error("dataset label out of range");
        }
    };
    read_split(ds.train_images_, ds.train_labels_, train_n);
    read_split(ds.eval_images_, ds.eval_labels_, eval_n);
    return ds;
}

Tensor resize_images(const Tensor& images, int out_resolution) {
    const int B = images.shape[0], C = images.shape[1], H = images.shape[2], W = images.shape[3];
    if (H == out_resolution && W == out_resolution) return images;
    Tensor out({B, C, out_resolution, out_resolution});
    const double sy = static_cast<double>(H) / out_resolution;
    const double sx = static_cast<double>(W) / out_resolution;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const Scalar* src = images.ptr() + (static_cast<std::size_t>(b) * C + c) * H * W;
            Scalar* dst = out.ptr() + (static_cast<std::size_t>(b) * C + c) * out_resolution *
                                          out_resolution;
            for (int y = 0; y < out_resolution; ++y) {
                const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, H - 1.0);
                const int y0 = static_cast<int>(fy);
                const int y1 = std::min(y0 + 1, H - 1);
                const double wy = fy - y0;
                for (int x = 0; x < out_resolution; ++x) {
                    const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, W - 1.0);
                    const int x0 = static_cast<int>(fx);
                    const int x1 = std::min(x0 + 1, W - 1);
                    const double wx = fx - x0;
                    dst[y * out_resolution + x] =
                        (1 - wy) * ((1 - wx) * src[y0 * W + x0] + wx * src[y0 * W + x1]) +
                        wy * ((1 - wx) * src[y1 * W + x0] + wx * src[y1 * W + x1]);
                }
            }
        }
    return out;
}

Batch resize_batch(const Batch& batch, int out_resolution) {
    Batch out;
    out.images = resize_images(batch.images, out_resolution);
    out.labels = batch.labels;
    return out;
}

}  // namespace canas
