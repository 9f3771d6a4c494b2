#pragma once

#include <vector>

#include "canas/arch_space.hpp"

namespace canas {

// Cost convention: 1 multiply-accumulate = `per_mac` FLOPs, default 2.
// Published subnet sizes for some spaces are MAC counts; such spaces set
// flops_per_mac 1 in their space file and subnet_flops picks that up.
struct FlopsOptions {
    double per_mac = 2.0;
};

// Block-level costs return raw FLOPs (not MFLOPs).

// Dense/grouped/depthwise convolution, SAME padding, h_out = ceil(h/stride).
double conv_flops(int h, int w, int cin, int cout, int k, int stride, int groups,
                  const FlopsOptions& opt = {});

// Inverted residual: expand 1x1 (skipped when expansion == 1), depthwise kxk,
// project 1x1; MBv3 adds squeeze-excite on the expanded channels; residual
// adds counted when stride == 1 and cin == cout.
double mbconv_flops(StageKind kind, int h, int w, int cin, int cout, int k, int expansion,
                    int stride, const FlopsOptions& opt = {});

// Multi-head self-attention over T = h*w tokens with elastic V width.
// qk_total = (channels / head_dim) * qk_dim, v_width = vscale * channels:
//   projections 2T*d*(2*qk_total + v_width) + scores 2T^2*qk_total
//   + context 2T^2*v_width + output 2T*v_width*d   (at per_mac = 2)
double attention_flops(int h, int w, int channels, int vscale, int head_dim, int qk_dim,
                       const FlopsOptions& opt = {});

// Two pointwise layers: 2*h*w*c*(e*c) each direction.
double mlp_flops(int h, int w, int channels, int expansion, const FlopsOptions& opt = {});

struct LayerFlops {
    int stage = 0;
    int layer = 0;           // -1 marks a stage-entry downsample/transition block
    StageKind kind = StageKind::MBv2;
    double mflops = 0.0;
};

struct FlopsBreakdown {
    std::vector<double> stage_mflops;   // one entry per stage
    std::vector<int> stage_out_size;    // spatial size after each stage
    std::vector<LayerFlops> layers;
    double total_mflops = 0.0;
};

// Walks the stages, threading spatial size by ceil-division at stride-2
// layers. Transformer stages start with an MBv3 transition block (kernel 3,
// expansion 4) that applies the stage stride and channel change. The MBPool
// head is global average pool + 1x1 conv to the pool width + classifier.
// Uses space.flops_per_mac. Throws std::runtime_error on an invalid config.
FlopsBreakdown subnet_flops(const SpaceSpec& space, const SubnetConfig& cfg);

double subnet_mflops(const SpaceSpec& space, const SubnetConfig& cfg);

// Expansion ratio of the fixed transformer-stage transition block.
inline constexpr int kVitEntryExpansion = 4;

}  // namespace canas
