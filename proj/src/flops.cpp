#include "canas/flops.hpp"

#include <stdexcept>
#include <string>

namespace canas {

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

double se_flops(int channels, const FlopsOptions& opt) {
    // two FC layers c -> c/4 -> c on pooled features; pooling itself excluded
    return opt.per_mac * channels * (channels / 4.0) * 2.0;
}

}  // namespace

double conv_flops(int h, int w, int cin, int cout, int k, int stride, int groups,
                  const FlopsOptions& opt) {
    if (h <= 0 || w <= 0 || cin <= 0 || cout <= 0 || k <= 0 || stride <= 0 || groups <= 0)
        throw std::runtime_error("conv_flops: non-positive argument");
    if (cin % groups != 0 || cout % groups != 0)
        throw std::runtime_error("conv_flops: channels not divisible by groups");
    const double h_out = ceil_div(h, stride);
    const double w_out = ceil_div(w, stride);
    return opt.per_mac * h_out * w_out * cout * (static_cast<double>(k) * k * cin / groups);
}

double mbconv_flops(StageKind kind, int h, int w, int cin, int cout, int k, int expansion,
                    int stride, const FlopsOptions& opt) {
    if (kind != StageKind::MBv2 && kind != StageKind::MBv3)
        throw std::runtime_error("mbconv_flops: kind must be MBv2 or MBv3");
    const int mid = expansion * cin;
    double total = 0.0;
    if (expansion != 1) total += conv_flops(h, w, cin, mid, 1, 1, 1, opt);
    total += conv_flops(h, w, mid, mid, k, stride, mid, opt);  // depthwise
    const int h2 = ceil_div(h, stride);
    const int w2 = ceil_div(w, stride);
    if (kind == StageKind::MBv3) total += se_flops(mid, opt);
    total += conv_flops(h2, w2, mid, cout, 1, 1, 1, opt);
    // residual adds, half a MAC each so the whole cost scales with per_mac
    if (stride == 1 && cin == cout) total += opt.per_mac * 0.5 * h2 * w2 * cout;
    return total;
}

double attention_flops(int h, int w, int channels, int vscale, int head_dim, int qk_dim,
                       const FlopsOptions& opt) {
    if (channels % head_dim != 0)
        throw std::runtime_error("attention_flops: channels not divisible by head_dim");
    const double tokens = static_cast<double>(h) * w;
    const double d = channels;
    const double qk_total = static_cast<double>(channels / head_dim) * qk_dim;
    const double v_width = static_cast<double>(vscale) * channels;
    double macs = 0.0;
    macs += tokens * d * (2.0 * qk_total + v_width);  // Q, K, V projections
    macs += tokens * tokens * qk_total;               // attention scores
    macs += tokens * tokens * v_width;                // attention-weighted V
    macs += tokens * v_width * d;                     // output projection
    return opt.per_mac * macs;
}

double mlp_flops(int h, int w, int channels, int expansion, const FlopsOptions& opt) {
    const double tokens = static_cast<double>(h) * w;
    const double hidden = static_cast<double>(expansion) * channels;
    return opt.per_mac * tokens * channels * hidden * 2.0;
}

FlopsBreakdown subnet_flops(const SpaceSpec& space, const SubnetConfig& cfg) {
    {
        const auto errs = validate_config(space, cfg);
        if (!errs.empty()) throw std::runtime_error("subnet_flops: invalid config: " + errs.front());
    }
    const FlopsOptions opt{space.flops_per_mac};
    FlopsBreakdown bd;
    bd.stage_mflops.resize(space.stages.size(), 0.0);
    bd.stage_out_size.resize(space.stages.size(), 0);

    int size = cfg.resolution;
    int prev_channels = space.in_channels;
    for (std::size_t s = 0; s < space.stages.size(); ++s) {
        const StageSpec& st = space.stages[s];
        const StageConfig& sc = cfg.stages[s];
        double stage_flops = 0.0;
        auto layer = [&](int l, double flops) {
            bd.layers.push_back({static_cast<int>(s), l, st.kind, flops / 1e6});
            stage_flops += flops;
        };
        switch (st.kind) {
            case StageKind::ConvStem: {
                layer(0, conv_flops(size, size, prev_channels, sc.channels,
                                    sc.kernel_or_vscale[0], st.stride, 1, opt));
                size = ceil_div(size, st.stride);
                prev_channels = sc.channels;
                break;
            }
            case StageKind::MBv2:
            case StageKind::MBv3: {
                for (int l = 0; l < sc.depth; ++l) {
                    const int stride = l == 0 ? st.stride : 1;
                    const int cin = l == 0 ? prev_channels : sc.channels;
                    layer(l, mbconv_flops(st.kind, size, size, cin, sc.channels,
                                          sc.kernel_or_vscale[l], sc.expansion[l], stride, opt));
                    size = ceil_div(size, stride);
                }
                prev_channels = sc.channels;
                break;
            }
            case StageKind::Transformer: {
                // stage-entry MBv3 transition: applies stride and channel change
                layer(-1, mbconv_flops(StageKind::MBv3, size, size, prev_channels, sc.channels, 3,
                                       kVitEntryExpansion, st.stride, opt));
                size = ceil_div(size, st.stride);
                for (int l = 0; l < sc.depth; ++l) {
                    double f = attention_flops(size, size, sc.channels, sc.kernel_or_vscale[l],
                                               space.head_dim, space.qk_dim, opt);
                    f += mlp_flops(size, size, sc.channels, sc.expansion[l], opt);
                    layer(l, f);
                }
                prev_channels = sc.channels;
                break;
            }
            case StageKind::MBPool: {
                // global average pool -> 1x1 conv to pool width -> classifier
                const double fc1 = opt.per_mac * prev_channels * sc.channels;
                const double fc2 = opt.per_mac * sc.channels * space.num_classes;
                layer(0, fc1 + fc2);
                size = 1;
                prev_channels = sc.channels;
                break;
            }
        }
        bd.stage_mflops[s] = stage_flops / 1e6;
        bd.stage_out_size[s] = size;
        bd.total_mflops += stage_flops / 1e6;
    }
    return bd;
}

double subnet_mflops(const SpaceSpec& space, const SubnetConfig& cfg) {
    return subnet_flops(space, cfg).total_mflops;
}

}  // namespace canas
