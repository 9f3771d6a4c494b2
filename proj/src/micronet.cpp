#include "canas/micronet.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "canas/flops.hpp"

namespace canas {

// ---------------------------------------------------------------------------
// NamedTensors
// ---------------------------------------------------------------------------

void NamedTensors::rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < names.size(); ++i) index_[names[i]] = static_cast<int>(i);
}

int NamedTensors::index_of(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("unknown parameter: " + name);
    return it->second;
}

Tensor& NamedTensors::at(const std::string& name) { return tensors[index_of(name)]; }
const Tensor& NamedTensors::at(const std::string& name) const { return tensors[index_of(name)]; }

std::int64_t NamedTensors::total_elements() const {
    std::int64_t n = 0;
    for (const Tensor& t : tensors) n += t.numel();
    return n;
}

NamedTensors zeros_like(const NamedTensors& params) {
    NamedTensors out;
    out.names = params.names;
    out.tensors.reserve(params.size());
    for (const Tensor& t : params.tensors) out.tensors.emplace_back(t.shape);
    out.rebuild_index();
    return out;
}

void accumulate(NamedTensors& grads, const NamedTensors& addend) {
    if (grads.size() != addend.size()) throw std::runtime_error("accumulate: layout mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        Tensor& g = grads[i];
        const Tensor& a = addend[i];
        for (std::size_t k = 0; k < g.data.size(); ++k) g.data[k] += a.data[k];
    }
}

// ---------------------------------------------------------------------------
// Architecture walk: one source of truth for parameter names, max shapes and
// per-config active extents (prefix slices).
// ---------------------------------------------------------------------------

namespace {

struct ParamDef {
    std::string name;
    std::vector<int> shape;    // full size, from space maxima
    std::vector<int> active;   // prefix extents for a config (== shape when no config)
    double init_std = 0.0;     // 0 means init to zero
    bool init_one = false;     // per-channel scale vectors start at 1
};

int max_of(const std::vector<int>& v) { return *std::max_element(v.begin(), v.end()); }

int se_hidden(int mid) { return std::max(1, mid / 4); }

// Variance-preserving fan-in factor for layers feeding hard-swish
// (E[hswish(z)^2] ~= 0.34 for z ~ N(0,1)); plain 1/fan elsewhere.
constexpr double kHswishGain = 2.94;

struct MbDims {
    int cin_max, cin_act;
    int cout_max, cout_act;
    int e_max, e_act;
    int k_max, k_act;
    bool active = true;  // false for depth-inactive layers: all extents zero
};

void emit_mb_unit(const std::string& prefix, bool mbv3, const MbDims& d,
                  const std::function<void(const ParamDef&)>& fn) {
    const int mid_max = d.e_max * d.cin_max;
    const int mid_act = d.active ? d.e_act * d.cin_act : 0;
    const int cin_act = d.active ? d.cin_act : 0;
    const int cout_act = d.active ? d.cout_act : 0;
    const int k_act = d.active ? d.k_act : 0;
    auto act_std = [](int fan_in) { return std::sqrt(kHswishGain / fan_in); };
    auto lin_std = [](int fan_in) { return std::sqrt(1.0 / fan_in); };

    if (d.e_max > 1) {
        fn({prefix + "exp.w", {mid_max, d.cin_max, 1, 1},
            {d.e_act > 1 ? mid_act : 0, d.e_act > 1 ? cin_act : 0, d.e_act > 1 ? 1 : 0,
             d.e_act > 1 ? 1 : 0},
            act_std(d.cin_max)});
        fn({prefix + "exp.scale", {mid_max}, {d.e_act > 1 ? mid_act : 0}, 0.0, true});
        fn({prefix + "exp.bias", {mid_max}, {d.e_act > 1 ? mid_act : 0}});
    }
    fn({prefix + "dw.w", {mid_max, 1, d.k_max, d.k_max},
        {mid_act, d.active ? 1 : 0, k_act, k_act}, act_std(d.k_max * d.k_max)});
    fn({prefix + "dw.scale", {mid_max}, {mid_act}, 0.0, true});
    fn({prefix + "dw.bias", {mid_max}, {mid_act}});
    if (mbv3) {
        const int hid_max = se_hidden(mid_max);
        const int hid_act = d.active ? se_hidden(mid_act) : 0;
        fn({prefix + "se.fc1.w", {hid_max, mid_max}, {hid_act, mid_act}, act_std(mid_max)});
        fn({prefix + "se.fc1.b", {hid_max}, {hid_act}});
        fn({prefix + "se.fc2.w", {mid_max, hid_max}, {mid_act, hid_act}, lin_std(hid_max)});
        fn({prefix + "se.fc2.b", {mid_max}, {mid_act}});
    }
    fn({prefix + "proj.w", {d.cout_max, mid_max, 1, 1},
        {cout_act, mid_act, d.active ? 1 : 0, d.active ? 1 : 0}, lin_std(mid_max)});
    fn({prefix + "proj.scale", {d.cout_max}, {cout_act}, 0.0, true});
    fn({prefix + "proj.bias", {d.cout_max}, {cout_act}});
}

// cfg may be null: active extents then equal the full shapes.
void walk_params(const SpaceSpec& space, const SubnetConfig* cfg,
                 const std::function<void(const ParamDef&)>& emit) {
    auto fn = [&](ParamDef def) {
        if (cfg == nullptr) def.active = def.shape;
        emit(def);
    };

    int prev_c_max = space.in_channels;
    int prev_c_act = space.in_channels;
    for (std::size_t s = 0; s < space.stages.size(); ++s) {
        const StageSpec& st = space.stages[s];
        const int c_max = st.channel_max;
        const int c_act = cfg ? cfg->stages[s].channels : c_max;
        const int depth_act = cfg ? cfg->stages[s].depth : st.depth_max;
        const std::string sp = "s" + std::to_string(s) + ".";
        switch (st.kind) {
            case StageKind::ConvStem: {
                const int k_max = max_of(st.kernel_or_vscale);
                const int k_act = cfg ? cfg->stages[s].kernel_or_vscale[0] : k_max;
                fn({sp + "conv.w", {c_max, prev_c_max, k_max, k_max},
                    {c_act, prev_c_act, k_act, k_act},
                    std::sqrt(kHswishGain / (prev_c_max * k_max * k_max))});
                fn({sp + "scale", {c_max}, {c_act}, 0.0, true});
                fn({sp + "bias", {c_max}, {c_act}});
                break;
            }
            case StageKind::MBv2:
            case StageKind::MBv3: {
                const bool mbv3 = st.kind == StageKind::MBv3;
                for (int l = 0; l < st.depth_max; ++l) {
                    MbDims d;
                    d.cin_max = l == 0 ? prev_c_max : c_max;
                    d.cin_act = l == 0 ? prev_c_act : c_act;
                    d.cout_max = c_max;
                    d.cout_act = c_act;
                    d.e_max = max_of(st.expansion);
                    d.k_max = max_of(st.kernel_or_vscale);
                    if (cfg) {
                        d.active = l < depth_act;
                        d.e_act = d.active ? cfg->stages[s].expansion[l] : 0;
                        d.k_act = d.active ? cfg->stages[s].kernel_or_vscale[l] : 0;
                    } else {
                        d.active = true;
                        d.e_act = d.e_max;
                        d.k_act = d.k_max;
                    }
                    emit_mb_unit(sp + "l" + std::to_string(l) + ".", mbv3, d, fn);
                }
                break;
            }
            case StageKind::Transformer: {
                // entry transition block: fixed kernel 3, fixed expansion
                MbDims ed;
                ed.cin_max = prev_c_max;
                ed.cin_act = prev_c_act;
                ed.cout_max = c_max;
                ed.cout_act = c_act;
                ed.e_max = kVitEntryExpansion;
                ed.e_act = kVitEntryExpansion;
                ed.k_max = 3;
                ed.k_act = 3;
                emit_mb_unit(sp + "entry.", true, ed, fn);

                const int hd = space.head_dim;
                const int heads_max = c_max / hd;
                const int heads_act = c_act / hd;
                const int v_max = max_of(st.kernel_or_vscale);
                const int e_max = max_of(st.expansion);
                for (int l = 0; l < st.depth_max; ++l) {
                    const bool active = l < depth_act;
                    const int v_act = active && cfg ? cfg->stages[s].kernel_or_vscale[l] : v_max;
                    const int e_act = active && cfg ? cfg->stages[s].expansion[l] : e_max;
                    const int h_act = active ? heads_act : 0;
                    const int c_a = active ? c_act : 0;
                    const std::string lp = sp + "l" + std::to_string(l) + ".attn.";
                    const double proj_std = std::sqrt(1.0 / c_max);
                    fn({lp + "q.w", {heads_max, space.qk_dim, c_max},
                        {h_act, active ? space.qk_dim : 0, c_a}, proj_std});
                    fn({lp + "k.w", {heads_max, space.qk_dim, c_max},
                        {h_act, active ? space.qk_dim : 0, c_a}, proj_std});
                    fn({lp + "v.w", {heads_max, v_max * hd, c_max},
                        {h_act, active ? v_act * hd : 0, c_a}, proj_std});
                    // residual branches have no normalization; a small output
                    // projection keeps deep stacks near-identity at init
                    fn({lp + "out.w", {c_max, heads_max, v_max * hd},
                        {c_a, h_act, active ? v_act * hd : 0},
                        0.1 * std::sqrt(1.0 / (heads_max * v_max * hd))});
                    fn({lp + "out.b", {c_max}, {c_a}});
                    const std::string mp = sp + "l" + std::to_string(l) + ".mlp.";
                    fn({mp + "fc1.w", {e_max * c_max, c_max}, {active ? e_act * c_act : 0, c_a},
                        std::sqrt(kHswishGain / c_max)});
                    fn({mp + "fc1.b", {e_max * c_max}, {active ? e_act * c_act : 0}});
                    fn({mp + "fc2.w", {c_max, e_max * c_max}, {c_a, active ? e_act * c_act : 0},
                        0.1 * std::sqrt(1.0 / (e_max * c_max))});
                    fn({mp + "fc2.b", {c_max}, {c_a}});
                }
                break;
            }
            case StageKind::MBPool: {
                const int pool_c = st.channel_max;  // fixed width, validated
                fn({"head.fc1.w", {pool_c, prev_c_max}, {pool_c, prev_c_act},
                    std::sqrt(kHswishGain / prev_c_max)});
                fn({"head.fc1.b", {pool_c}, {pool_c}});
                fn({"head.fc2.w", {space.num_classes, pool_c}, {space.num_classes, pool_c},
                    std::sqrt(1.0 / pool_c)});
                fn({"head.fc2.b", {space.num_classes}, {space.num_classes}});
                break;
            }
        }
        prev_c_max = c_max;
        prev_c_act = c_act;
    }
}

}  // namespace

SupernetWeights build_supernet(const SpaceSpec& space, RngStream& init_rng) {
    SupernetWeights w;
    walk_params(space, nullptr, [&](const ParamDef& def) {
        Tensor t(def.shape);
        if (def.init_one) {
            std::fill(t.data.begin(), t.data.end(), 1.0);
        } else if (def.init_std > 0.0) {
            for (Scalar& v : t.data) v = def.init_std * init_rng.normal();
        }
        w.params.names.push_back(def.name);
        w.params.tensors.push_back(std::move(t));
    });
    w.params.rebuild_index();
    return w;
}

SliceMap slice_map(const SpaceSpec& space, const SubnetConfig& cfg) {
    SliceMap sm;
    walk_params(space, &cfg, [&](const ParamDef& def) {
        sm.names.push_back(def.name);
        sm.extents.push_back(def.active);
    });
    return sm;
}

SliceMap shared_params(const SpaceSpec& space, const SubnetConfig& a, const SubnetConfig& b) {
    SliceMap sa = slice_map(space, a);
    const SliceMap sb = slice_map(space, b);
    for (std::size_t i = 0; i < sa.extents.size(); ++i)
        for (std::size_t d = 0; d < sa.extents[i].size(); ++d)
            sa.extents[i][d] = std::min(sa.extents[i][d], sb.extents[i][d]);
    return sa;
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace {

Tensor slice_prefix(const Tensor& full, const std::vector<int>& ext) {
    Tensor out(ext);
    if (out.data.empty()) return out;
    const auto& fs = full.shape;
    const std::size_t rank = fs.size();
    // odometer over the output, mapping to the leading region of `full`
    std::vector<int> idx(rank, 0);
    std::vector<std::size_t> strides(rank, 1);
    for (std::size_t d = rank - 1; d > 0; --d) strides[d - 1] = strides[d] * fs[d];
    const int last = ext.back();
    std::size_t out_pos = 0;
    while (true) {
        std::size_t src = 0;
        for (std::size_t d = 0; d + 1 < rank; ++d) src += idx[d] * strides[d];
        std::copy_n(full.data.begin() + src, last, out.data.begin() + out_pos);
        out_pos += last;
        // increment odometer over all but the last axis
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
    return out;
}

void add_into_prefix(Tensor& full, const std::vector<int>& ext, const Tensor& grad) {
    if (grad.data.empty()) return;
    const auto& fs = full.shape;
    const std::size_t rank = fs.size();
    std::vector<std::size_t> strides(rank, 1);
    for (std::size_t d = rank - 1; d > 0; --d) strides[d - 1] = strides[d] * fs[d];
    std::vector<int> idx(rank, 0);
    const int last = ext.back();
    std::size_t g_pos = 0;
    while (true) {
        std::size_t dst = 0;
        for (std::size_t d = 0; d + 1 < rank; ++d) dst += idx[d] * strides[d];
        for (int k = 0; k < last; ++k) full.data[dst + k] += grad.data[g_pos + k];
        g_pos += last;
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

int ceil_div(int a, int b) { return (a + b - 1) / b; }

// SAME-padded convolution, weight layout [cout, cin/groups, k, k].
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int groups) {
    const int B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Cout = w.shape[0], CinG = w.shape[1], K = w.shape[2];
    const int Ho = ceil_div(H, stride), Wo = ceil_div(W, stride);
    const int pad_h = std::max((Ho - 1) * stride + K - H, 0) / 2;
    const int pad_w = std::max((Wo - 1) * stride + K - W, 0) / 2;
    const int cout_per_g = Cout / groups;
    Tensor y({B, Cout, Ho, Wo});
    for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < Cout; ++oc) {
            const int ic0 = (oc / cout_per_g) * CinG;
            const Scalar* woc = w.ptr() + static_cast<std::size_t>(oc) * CinG * K * K;
            for (int oh = 0; oh < Ho; ++oh) {
                for (int ow = 0; ow < Wo; ++ow) {
                    Scalar acc = 0;
                    for (int ic = 0; ic < CinG; ++ic) {
                        const Scalar* xc =
                            x.ptr() + ((static_cast<std::size_t>(b) * Cin + ic0 + ic) * H) * W;
                        const Scalar* wc = woc + static_cast<std::size_t>(ic) * K * K;
                        for (int kh = 0; kh < K; ++kh) {
                            const int ih = oh * stride - pad_h + kh;
                            if (ih < 0 || ih >= H) continue;
                            for (int kw = 0; kw < K; ++kw) {
                                const int iw = ow * stride - pad_w + kw;
                                if (iw < 0 || iw >= W) continue;
                                acc += xc[static_cast<std::size_t>(ih) * W + iw] * wc[kh * K + kw];
                            }
                        }
                    }
                    y.data[((static_cast<std::size_t>(b) * Cout + oc) * Ho + oh) * Wo + ow] = acc;
                }
            }
        }
    }
    return y;
}

void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, int stride, int groups,
                     Tensor& dx, Tensor& dw) {
    const int B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Cout = w.shape[0], CinG = w.shape[1], K = w.shape[2];
    const int Ho = dy.shape[2], Wo = dy.shape[3];
    const int pad_h = std::max((Ho - 1) * stride + K - H, 0) / 2;
    const int pad_w = std::max((Wo - 1) * stride + K - W, 0) / 2;
    const int cout_per_g = Cout / groups;
    dx = Tensor({B, Cin, H, W});
    dw = Tensor(w.shape);
    for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < Cout; ++oc) {
            const int ic0 = (oc / cout_per_g) * CinG;
            const Scalar* woc = w.ptr() + static_cast<std::size_t>(oc) * CinG * K * K;
            Scalar* dwoc = dw.ptr() + static_cast<std::size_t>(oc) * CinG * K * K;
            for (int oh = 0; oh < Ho; ++oh) {
                for (int ow = 0; ow < Wo; ++ow) {
                    const Scalar g =
                        dy.data[((static_cast<std::size_t>(b) * Cout + oc) * Ho + oh) * Wo + ow];
                    if (g == 0.0) continue;
                    for (int ic = 0; ic < CinG; ++ic) {
                        const std::size_t xbase =
                            ((static_cast<std::size_t>(b) * Cin + ic0 + ic) * H) * W;
                        const Scalar* wc = woc + static_cast<std::size_t>(ic) * K * K;
                        Scalar* dwc = dwoc + static_cast<std::size_t>(ic) * K * K;
                        for (int kh = 0; kh < K; ++kh) {
                            const int ih = oh * stride - pad_h + kh;
                            if (ih < 0 || ih >= H) continue;
                            for (int kw = 0; kw < K; ++kw) {
                                const int iw = ow * stride - pad_w + kw;
                                if (iw < 0 || iw >= W) continue;
                                const std::size_t xi = xbase + static_cast<std::size_t>(ih) * W + iw;
                                dx.data[xi] += g * wc[kh * K + kw];
                                dwc[kh * K + kw] += g * x.data[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

void scale_bias(Tensor& x, const Tensor& scale, const Tensor& bias) {
    const int B = x.shape[0], C = x.shape[1];
    const std::size_t hw = x.data.size() / (static_cast<std::size_t>(B) * C);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            Scalar* p = x.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
            const Scalar s = scale.data[c], o = bias.data[c];
            for (std::size_t i = 0; i < hw; ++i) p[i] = p[i] * s + o;
        }
}

// dx (in place over dy), plus per-channel dscale/dbias; needs the conv output
// that fed the affine (pre), not the affine output.
void scale_bias_backward(const Tensor& pre, const Tensor& scale, Tensor& dy, Tensor& dscale,
                         Tensor& dbias) {
    const int B = pre.shape[0], C = pre.shape[1];
    const std::size_t hw = pre.data.size() / (static_cast<std::size_t>(B) * C);
    dscale = Tensor(scale.shape);
    dbias = Tensor(scale.shape);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(b) * C + c) * hw;
            Scalar ds = 0, db = 0;
            const Scalar s = scale.data[c];
            for (std::size_t i = 0; i < hw; ++i) {
                const Scalar g = dy.data[base + i];
                ds += g * pre.data[base + i];
                db += g;
                dy.data[base + i] = g * s;
            }
            dscale.data[c] += ds;
            dbias.data[c] += db;
        }
}

// Hard-swish: 0 for x <= -3, x for x >= 3, x(x+3)/6 between. The derivative
// at the knots takes the right-hand limit.
Scalar hswish(Scalar x) {
    if (x <= -3.0) return 0.0;
    if (x >= 3.0) return x;
    return x * (x + 3.0) / 6.0;
}

Scalar hswish_grad(Scalar x) {
    if (x < -3.0) return 0.0;
    if (x >= 3.0) return 1.0;
    return (2.0 * x + 3.0) / 6.0;
}

Tensor hswish_fwd(const Tensor& x) {
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = hswish(x.data[i]);
    return y;
}

void hswish_bwd(const Tensor& pre, Tensor& dy) {
    for (std::size_t i = 0; i < dy.data.size(); ++i) dy.data[i] *= hswish_grad(pre.data[i]);
}

// y[b,o] = W[o,i] x[b,i] + bias[o]; x is any [N, in] matrix.
Tensor fc(const Tensor& x, const Tensor& w, const Tensor* bias) {
    const int N = x.shape[0], In = x.shape[1], Out = w.shape[0];
    Tensor y({N, Out});
    for (int n = 0; n < N; ++n) {
        const Scalar* xr = x.ptr() + static_cast<std::size_t>(n) * In;
        Scalar* yr = y.ptr() + static_cast<std::size_t>(n) * Out;
        for (int o = 0; o < Out; ++o) {
            const Scalar* wr = w.ptr() + static_cast<std::size_t>(o) * In;
            Scalar acc = bias ? bias->data[o] : 0.0;
            for (int i = 0; i < In; ++i) acc += wr[i] * xr[i];
            yr[o] = acc;
        }
    }
    return y;
}

void fc_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dx, Tensor& dw,
                 Tensor* dbias) {
    const int N = x.shape[0], In = x.shape[1], Out = w.shape[0];
    dx = Tensor({N, In});
    dw = Tensor(w.shape);
    for (int n = 0; n < N; ++n) {
        const Scalar* xr = x.ptr() + static_cast<std::size_t>(n) * In;
        const Scalar* gr = dy.ptr() + static_cast<std::size_t>(n) * Out;
        Scalar* dxr = dx.ptr() + static_cast<std::size_t>(n) * In;
        for (int o = 0; o < Out; ++o) {
            const Scalar g = gr[o];
            if (g == 0.0) continue;
            const Scalar* wr = w.ptr() + static_cast<std::size_t>(o) * In;
            Scalar* dwr = dw.ptr() + static_cast<std::size_t>(o) * In;
            for (int i = 0; i < In; ++i) {
                dxr[i] += g * wr[i];
                dwr[i] += g * xr[i];
            }
            if (dbias) dbias->data[o] += g;
        }
    }
}

// ---------------------------------------------------------------------------
// Block caches
// ---------------------------------------------------------------------------

struct ConvUnitCache {
    Tensor in;        // conv input
    Tensor conv_out;  // pre scale/bias
    Tensor sb_out;    // pre activation (when the unit has one)
};

struct MbCache {
    Tensor in;
    bool has_expand = false;
    ConvUnitCache exp;
    Tensor exp_act;  // expand activation output (depthwise input)
    ConvUnitCache dw;
    Tensor dw_act;   // depthwise activation output
    bool has_se = false;
    Tensor se_pooled, se_fc1_out, se_fc1_act, se_gate;
    Tensor proj_in;  // dw_act (or gated copy when SE present)
    Tensor proj_out; // pre scale/bias
    bool residual = false;
};

struct AttnCache {
    Tensor x_tokens;  // [B, T, C]
    Tensor q, k, v;   // [B, H, T, dq] / [B, H, T, dv]
    Tensor attn;      // [B, H, T, T] softmax rows
    Tensor ctx;       // [B, H, T, dv]
    Tensor attn_res;  // tokens after attention residual (MLP input)
    Tensor fc1_out;
    Tensor fc1_act;
};

struct StageCacheImpl {
    std::vector<MbCache> mb;       // conv-stage layers
    bool has_entry = false;
    MbCache entry;                 // transformer transition block
    std::vector<AttnCache> attn;   // transformer layers
};

}  // namespace

struct ForwardCache {
    SubnetConfig cfg;
    ConvUnitCache stem;
    std::vector<StageCacheImpl> stages;
    Tensor head_in;      // [B, C, H, W] into the pool
    Tensor head_pooled;  // [B, C]
    Tensor head_fc1_out;
    Tensor head_fc1_act;
    Tensor logits;
};

namespace {

// Slice accessor bound to one (weights, config) pair.
struct SlicedWeights {
    const NamedTensors& params;
    SliceMap sm;

    explicit SlicedWeights(const NamedTensors& p, const SpaceSpec& space, const SubnetConfig& cfg)
        : params(p), sm(slice_map(space, cfg)) {}

    Tensor operator()(const std::string& name) const {
        const int i = params.index_of(name);
        return slice_prefix(params[i], sm.extents[i]);
    }
    const std::vector<int>& extents(const std::string& name) const {
        return sm.extents[params.index_of(name)];
    }
};

struct GradSink {
    const NamedTensors& params;
    const SliceMap& sm;
    NamedTensors& grads;

    void add(const std::string& name, const Tensor& g) {
        const int i = params.index_of(name);
        add_into_prefix(grads[i], sm.extents[i], g);
    }
};

Tensor to_tokens(const Tensor& x) {  // [B,C,H,W] -> [B,T,C]
    const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int T = H * W;
    Tensor y({B, T, C});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const Scalar* src = x.ptr() + (static_cast<std::size_t>(b) * C + c) * T;
            for (int t = 0; t < T; ++t)
                y.data[(static_cast<std::size_t>(b) * T + t) * C + c] = src[t];
        }
    return y;
}

Tensor from_tokens(const Tensor& y, int H, int W) {  // [B,T,C] -> [B,C,H,W]
    const int B = y.shape[0], T = y.shape[1], C = y.shape[2];
    Tensor x({B, C, H, W});
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < C; ++c)
                x.data[(static_cast<std::size_t>(b) * C + c) * T + t] =
                    y.data[(static_cast<std::size_t>(b) * T + t) * C + c];
    return x;
}

// MB block forward. `e_act` and `k_act` come from the config; `se` marks MBv3.
Tensor mb_forward(const SlicedWeights& w, const std::string& prefix, bool se, int e_act,
                  int stride, const Tensor& x, MbCache& cache) {
    cache.in = x;
    cache.has_se = se;
    const int cin = x.shape[1];
    cache.has_expand = e_act > 1;

    const Tensor* dw_in = &x;
    if (cache.has_expand) {
        cache.exp.in = x;
        cache.exp.conv_out = conv2d(x, w(prefix + "exp.w"), 1, 1);
        cache.exp.sb_out = cache.exp.conv_out;
        scale_bias(cache.exp.sb_out, w(prefix + "exp.scale"), w(prefix + "exp.bias"));
        cache.exp_act = hswish_fwd(cache.exp.sb_out);
        dw_in = &cache.exp_act;
    }
    const int mid = dw_in->shape[1];

    cache.dw.in = *dw_in;
    cache.dw.conv_out = conv2d(*dw_in, w(prefix + "dw.w"), stride, mid);
    cache.dw.sb_out = cache.dw.conv_out;
    scale_bias(cache.dw.sb_out, w(prefix + "dw.scale"), w(prefix + "dw.bias"));
    cache.dw_act = hswish_fwd(cache.dw.sb_out);

    const Tensor* proj_in = &cache.dw_act;
    if (se) {
        const int B = cache.dw_act.shape[0];
        const int Hs = cache.dw_act.shape[2], Ws = cache.dw_act.shape[3];
        const Scalar inv = 1.0 / (static_cast<Scalar>(Hs) * Ws);
        cache.se_pooled = Tensor({B, mid});
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < mid; ++c) {
                const Scalar* p =
                    cache.dw_act.ptr() + (static_cast<std::size_t>(b) * mid + c) * Hs * Ws;
                Scalar s = 0;
                for (int i = 0; i < Hs * Ws; ++i) s += p[i];
                cache.se_pooled.at2(b, c) = s * inv;
            }
        const Tensor fc1b = w(prefix + "se.fc1.b");
        cache.se_fc1_out = fc(cache.se_pooled, w(prefix + "se.fc1.w"), &fc1b);
        cache.se_fc1_act = hswish_fwd(cache.se_fc1_out);
        const Tensor fc2b = w(prefix + "se.fc2.b");
        Tensor gate = fc(cache.se_fc1_act, w(prefix + "se.fc2.w"), &fc2b);
        // gate = 2*sigmoid: unit mean at init, since no normalization follows
        for (Scalar& v : gate.data) v = 2.0 / (1.0 + std::exp(-v));
        cache.se_gate = std::move(gate);
        Tensor gated = cache.dw_act;
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < mid; ++c) {
                Scalar* p = gated.ptr() + (static_cast<std::size_t>(b) * mid + c) * Hs * Ws;
                const Scalar g = cache.se_gate.at2(b, c);
                for (int i = 0; i < Hs * Ws; ++i) p[i] *= g;
            }
        cache.proj_in = std::move(gated);
        proj_in = &cache.proj_in;
    } else {
        cache.proj_in = cache.dw_act;
        proj_in = &cache.proj_in;
    }

    cache.proj_out = conv2d(*proj_in, w(prefix + "proj.w"), 1, 1);
    Tensor out = cache.proj_out;
    scale_bias(out, w(prefix + "proj.scale"), w(prefix + "proj.bias"));

    cache.residual = stride == 1 && cin == out.shape[1];
    if (cache.residual)
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += x.data[i];
    return out;
}

// Returns the gradient w.r.t. the block input.
Tensor mb_backward(const SlicedWeights& w, GradSink& sink, const std::string& prefix,
                   const MbCache& cache, int stride, Tensor dy) {
    Tensor dx_residual;
    if (cache.residual) dx_residual = dy;  // identity path

    // projection affine + conv
    Tensor dscale, dbias;
    scale_bias_backward(cache.proj_out, w(prefix + "proj.scale"), dy, dscale, dbias);
    sink.add(prefix + "proj.scale", dscale);
    sink.add(prefix + "proj.bias", dbias);
    Tensor d_proj_in, d_proj_w;
    conv2d_backward(cache.proj_in, w(prefix + "proj.w"), dy, 1, 1, d_proj_in, d_proj_w);
    sink.add(prefix + "proj.w", d_proj_w);

    Tensor d_dw_act;
    if (cache.has_se) {
        const int B = cache.dw_act.shape[0], mid = cache.dw_act.shape[1];
        const int Hs = cache.dw_act.shape[2], Ws = cache.dw_act.shape[3];
        d_dw_act = Tensor(cache.dw_act.shape);
        Tensor d_gate({B, mid});
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < mid; ++c) {
                const std::size_t base = (static_cast<std::size_t>(b) * mid + c) *
                                         static_cast<std::size_t>(Hs) * Ws;
                const Scalar g = cache.se_gate.at2(b, c);
                Scalar dg = 0;
                for (int i = 0; i < Hs * Ws; ++i) {
                    d_dw_act.data[base + i] = d_proj_in.data[base + i] * g;
                    dg += d_proj_in.data[base + i] * cache.dw_act.data[base + i];
                }
                d_gate.at2(b, c) = dg;
            }
        // gate = 2*sigmoid(z): dgate/dz = gate * (1 - gate/2)
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < mid; ++c) {
                const Scalar g2 = cache.se_gate.at2(b, c);
                d_gate.at2(b, c) *= g2 * (1.0 - 0.5 * g2);
            }
        Tensor d_fc1_act, d_fc2_w;
        Tensor d_fc2_b({mid});
        fc_backward(cache.se_fc1_act, w(prefix + "se.fc2.w"), d_gate, d_fc1_act, d_fc2_w, &d_fc2_b);
        sink.add(prefix + "se.fc2.w", d_fc2_w);
        sink.add(prefix + "se.fc2.b", d_fc2_b);
        hswish_bwd(cache.se_fc1_out, d_fc1_act);
        Tensor d_pooled, d_fc1_w;
        Tensor d_fc1_b({cache.se_fc1_out.shape[1]});
        fc_backward(cache.se_pooled, w(prefix + "se.fc1.w"), d_fc1_act, d_pooled, d_fc1_w, &d_fc1_b);
        sink.add(prefix + "se.fc1.w", d_fc1_w);
        sink.add(prefix + "se.fc1.b", d_fc1_b);
        const Scalar inv = 1.0 / (static_cast<Scalar>(Hs) * Ws);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < mid; ++c) {
                const std::size_t base = (static_cast<std::size_t>(b) * mid + c) *
                                         static_cast<std::size_t>(Hs) * Ws;
                const Scalar dz = d_pooled.at2(b, c) * inv;
                for (int i = 0; i < Hs * Ws; ++i) d_dw_act.data[base + i] += dz;
            }
    } else {
        d_dw_act = std::move(d_proj_in);
    }

    hswish_bwd(cache.dw.sb_out, d_dw_act);
    scale_bias_backward(cache.dw.conv_out, w(prefix + "dw.scale"), d_dw_act, dscale, dbias);
    sink.add(prefix + "dw.scale", dscale);
    sink.add(prefix + "dw.bias", dbias);
    const int mid = cache.dw.in.shape[1];
    Tensor d_dw_in, d_dw_w;
    conv2d_backward(cache.dw.in, w(prefix + "dw.w"), d_dw_act, stride, mid, d_dw_in, d_dw_w);
    sink.add(prefix + "dw.w", d_dw_w);

    Tensor dx;
    if (cache.has_expand) {
        hswish_bwd(cache.exp.sb_out, d_dw_in);
        scale_bias_backward(cache.exp.conv_out, w(prefix + "exp.scale"), d_dw_in, dscale, dbias);
        sink.add(prefix + "exp.scale", dscale);
        sink.add(prefix + "exp.bias", dbias);
        Tensor d_exp_w;
        conv2d_backward(cache.exp.in, w(prefix + "exp.w"), d_dw_in, 1, 1, dx, d_exp_w);
        sink.add(prefix + "exp.w", d_exp_w);
    } else {
        dx = std::move(d_dw_in);
    }

    if (cache.residual)
        for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dx_residual.data[i];
    return dx;
}

// Transformer layer: pre-norm-free attention + MLP, both with residuals.
Tensor attn_layer_forward(const SlicedWeights& w, const SpaceSpec& space, const std::string& lp,
                          const Tensor& x, AttnCache& cache) {
    const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int T = H * W;
    const int heads = C / space.head_dim;
    const int dq = space.qk_dim;

    cache.x_tokens = to_tokens(x);
    const Tensor wq = w(lp + "attn.q.w"), wk = w(lp + "attn.k.w"), wv = w(lp + "attn.v.w");
    const int dv = wv.shape[1];

    auto project = [&](const Tensor& wmat, int dout) {
        Tensor out({B, heads, T, dout});
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h)
                for (int t = 0; t < T; ++t) {
                    const Scalar* xr = cache.x_tokens.ptr() + (static_cast<std::size_t>(b) * T + t) * C;
                    Scalar* yr = out.ptr() +
                                 ((static_cast<std::size_t>(b) * heads + h) * T + t) * dout;
                    for (int d = 0; d < dout; ++d) {
                        const Scalar* wr = wmat.ptr() + (static_cast<std::size_t>(h) * dout + d) * C;
                        Scalar acc = 0;
                        for (int c = 0; c < C; ++c) acc += wr[c] * xr[c];
                        yr[d] = acc;
                    }
                }
        return out;
    };
    cache.q = project(wq, dq);
    cache.k = project(wk, dq);
    cache.v = project(wv, dv);

    const Scalar inv_sqrt = 1.0 / std::sqrt(static_cast<Scalar>(dq));
    cache.attn = Tensor({B, heads, T, T});
    cache.ctx = Tensor({B, heads, T, dv});
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h) {
            const std::size_t qbase = (static_cast<std::size_t>(b) * heads + h) * T;
            for (int t = 0; t < T; ++t) {
                const Scalar* qr = cache.q.ptr() + (qbase + t) * dq;
                Scalar* ar = cache.attn.ptr() + (qbase + t) * T;
                Scalar mx = -1e300;
                for (int u = 0; u < T; ++u) {
                    const Scalar* kr = cache.k.ptr() + (qbase + u) * dq;
                    Scalar acc = 0;
                    for (int d = 0; d < dq; ++d) acc += qr[d] * kr[d];
                    ar[u] = acc * inv_sqrt;
                    mx = std::max(mx, ar[u]);
                }
                Scalar denom = 0;
                for (int u = 0; u < T; ++u) {
                    ar[u] = std::exp(ar[u] - mx);
                    denom += ar[u];
                }
                const Scalar inv_denom = 1.0 / denom;
                Scalar* cr = cache.ctx.ptr() + (qbase + t) * dv;
                for (int u = 0; u < T; ++u) {
                    ar[u] *= inv_denom;
                    const Scalar* vr = cache.v.ptr() + (qbase + u) * dv;
                    const Scalar a = ar[u];
                    for (int d = 0; d < dv; ++d) cr[d] += a * vr[d];
                }
            }
        }

    const Tensor wout = w(lp + "attn.out.w");  // [C, heads, dv]
    const Tensor bout = w(lp + "attn.out.b");
    cache.attn_res = cache.x_tokens;
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) {
            Scalar* yr = cache.attn_res.ptr() + (static_cast<std::size_t>(b) * T + t) * C;
            for (int c = 0; c < C; ++c) {
                const Scalar* wr = wout.ptr() + static_cast<std::size_t>(c) * heads * dv;
                Scalar acc = bout.data[c];
                for (int h = 0; h < heads; ++h) {
                    const Scalar* cr =
                        cache.ctx.ptr() + ((static_cast<std::size_t>(b) * heads + h) * T + t) * dv;
                    const Scalar* whr = wr + static_cast<std::size_t>(h) * dv;
                    for (int d = 0; d < dv; ++d) acc += whr[d] * cr[d];
                }
                yr[c] += acc;
            }
        }

    // MLP over tokens
    Tensor flat = cache.attn_res;
    flat.shape = {B * T, C};
    const Tensor b1 = w(lp + "mlp.fc1.b");
    cache.fc1_out = fc(flat, w(lp + "mlp.fc1.w"), &b1);
    cache.fc1_act = hswish_fwd(cache.fc1_out);
    const Tensor b2 = w(lp + "mlp.fc2.b");
    Tensor mlp_out = fc(cache.fc1_act, w(lp + "mlp.fc2.w"), &b2);

    Tensor y = cache.attn_res;  // residual
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += mlp_out.data[i];
    return from_tokens(y, H, W);
}

Tensor attn_layer_backward(const SlicedWeights& w, GradSink& sink, const SpaceSpec& space,
                           const std::string& lp, const AttnCache& cache, const Tensor& dy_spatial) {
    const int H = dy_spatial.shape[2], W = dy_spatial.shape[3];
    const int B = cache.x_tokens.shape[0], T = cache.x_tokens.shape[1], C = cache.x_tokens.shape[2];
    const int heads = C / space.head_dim;
    const int dq = space.qk_dim;
    const int dv = cache.v.shape[3];

    Tensor dy = to_tokens(dy_spatial);  // [B, T, C]

    // MLP backward; residual splits dy into the MLP path and the skip path
    Tensor flat_dy = dy;
    flat_dy.shape = {B * T, C};
    Tensor d_fc1_act, d_fc2_w;
    Tensor d_fc2_b({C});
    fc_backward(cache.fc1_act, w(lp + "mlp.fc2.w"), flat_dy, d_fc1_act, d_fc2_w, &d_fc2_b);
    sink.add(lp + "mlp.fc2.w", d_fc2_w);
    sink.add(lp + "mlp.fc2.b", d_fc2_b);
    hswish_bwd(cache.fc1_out, d_fc1_act);
    Tensor flat_attn_res = cache.attn_res;
    flat_attn_res.shape = {B * T, C};
    Tensor d_attn_res, d_fc1_w;
    Tensor d_fc1_b({cache.fc1_out.shape[1]});
    fc_backward(flat_attn_res, w(lp + "mlp.fc1.w"), d_fc1_act, d_attn_res, d_fc1_w, &d_fc1_b);
    sink.add(lp + "mlp.fc1.w", d_fc1_w);
    sink.add(lp + "mlp.fc1.b", d_fc1_b);
    d_attn_res.shape = {B, T, C};
    for (std::size_t i = 0; i < d_attn_res.data.size(); ++i) d_attn_res.data[i] += dy.data[i];

    // output projection backward
    const Tensor wout = w(lp + "attn.out.w");
    Tensor d_wout(wout.shape);
    Tensor d_bout({C});
    Tensor d_ctx(cache.ctx.shape);
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) {
            const Scalar* gr = d_attn_res.ptr() + (static_cast<std::size_t>(b) * T + t) * C;
            for (int c = 0; c < C; ++c) {
                const Scalar g = gr[c];
                if (g == 0.0) continue;
                d_bout.data[c] += g;
                const std::size_t wbase = static_cast<std::size_t>(c) * heads * dv;
                for (int h = 0; h < heads; ++h) {
                    const std::size_t cbase =
                        ((static_cast<std::size_t>(b) * heads + h) * T + t) * dv;
                    for (int d = 0; d < dv; ++d) {
                        d_wout.data[wbase + h * dv + d] += g * cache.ctx.data[cbase + d];
                        d_ctx.data[cbase + d] += g * wout.data[wbase + h * dv + d];
                    }
                }
            }
        }
    sink.add(lp + "attn.out.w", d_wout);
    sink.add(lp + "attn.out.b", d_bout);

    // attention core backward
    Tensor d_q(cache.q.shape), d_k(cache.k.shape), d_v(cache.v.shape);
    const Scalar inv_sqrt = 1.0 / std::sqrt(static_cast<Scalar>(dq));
    std::vector<Scalar> d_attn_row(static_cast<std::size_t>(T));
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h) {
            const std::size_t base = (static_cast<std::size_t>(b) * heads + h) * T;
            for (int t = 0; t < T; ++t) {
                const Scalar* ar = cache.attn.ptr() + (base + t) * T;
                const Scalar* dcr = d_ctx.ptr() + (base + t) * dv;
                // dA = dctx . V^T ; dV += A^T dctx
                Scalar dot = 0;
                for (int u = 0; u < T; ++u) {
                    const Scalar* vr = cache.v.ptr() + (base + u) * dv;
                    Scalar da = 0;
                    Scalar* dvr = d_v.ptr() + (base + u) * dv;
                    const Scalar a = ar[u];
                    for (int d = 0; d < dv; ++d) {
                        da += dcr[d] * vr[d];
                        dvr[d] += a * dcr[d];
                    }
                    d_attn_row[u] = da;
                    dot += da * a;
                }
                // softmax backward then scaled-dot backward
                const Scalar* qr = cache.q.ptr() + (base + t) * dq;
                Scalar* dqr = d_q.ptr() + (base + t) * dq;
                for (int u = 0; u < T; ++u) {
                    const Scalar ds = ar[u] * (d_attn_row[u] - dot) * inv_sqrt;
                    if (ds == 0.0) continue;
                    const Scalar* kr = cache.k.ptr() + (base + u) * dq;
                    Scalar* dkr = d_k.ptr() + (base + u) * dq;
                    for (int d = 0; d < dq; ++d) {
                        dqr[d] += ds * kr[d];
                        dkr[d] += ds * qr[d];
                    }
                }
            }
        }

    // projection backward into tokens and weights
    Tensor dx_tokens = d_attn_res;  // residual skip into the attention input
    auto project_bwd = [&](const Tensor& dproj, const std::string& name, int dout) {
        const Tensor wmat = w(name);
        Tensor dwmat(wmat.shape);
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h)
                for (int t = 0; t < T; ++t) {
                    const Scalar* gr =
                        dproj.ptr() + ((static_cast<std::size_t>(b) * heads + h) * T + t) * dout;
                    const Scalar* xr =
                        cache.x_tokens.ptr() + (static_cast<std::size_t>(b) * T + t) * C;
                    Scalar* dxr = dx_tokens.ptr() + (static_cast<std::size_t>(b) * T + t) * C;
                    for (int d = 0; d < dout; ++d) {
                        const Scalar g = gr[d];
                        if (g == 0.0) continue;
                        const Scalar* wr = wmat.ptr() + (static_cast<std::size_t>(h) * dout + d) * C;
                        Scalar* dwr = dwmat.ptr() + (static_cast<std::size_t>(h) * dout + d) * C;
                        for (int c = 0; c < C; ++c) {
                            dxr[c] += g * wr[c];
                            dwr[c] += g * xr[c];
                        }
                    }
                }
        sink.add(name, dwmat);
    };
    project_bwd(d_q, lp + "attn.q.w", dq);
    project_bwd(d_k, lp + "attn.k.w", dq);
    project_bwd(d_v, lp + "attn.v.w", dv);

    return from_tokens(dx_tokens, H, W);
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward / backward over the whole subnet
// ---------------------------------------------------------------------------

ForwardResult forward(const SupernetWeights& weights, const SpaceSpec& space,
                      const SubnetConfig& cfg, const Batch& batch, bool with_cache) {
    if (batch.images.shape.size() != 4 || batch.images.shape[2] != cfg.resolution ||
        batch.images.shape[3] != cfg.resolution || batch.images.shape[1] != space.in_channels)
        throw std::runtime_error("forward: batch shape does not match the subnet resolution");

    const SlicedWeights w(weights.params, space, cfg);
    auto cache = std::make_shared<ForwardCache>();
    cache->cfg = cfg;
    cache->stages.resize(space.stages.size());

    Tensor x = batch.images;
    for (std::size_t s = 0; s < space.stages.size(); ++s) {
        const StageSpec& st = space.stages[s];
        const StageConfig& sc = cfg.stages[s];
        const std::string sp = "s" + std::to_string(s) + ".";
        StageCacheImpl& scache = cache->stages[s];
        switch (st.kind) {
            case StageKind::ConvStem: {
                ConvUnitCache& cu = cache->stem;
                cu.in = x;
                cu.conv_out = conv2d(x, w(sp + "conv.w"), st.stride, 1);
                cu.sb_out = cu.conv_out;
                scale_bias(cu.sb_out, w(sp + "scale"), w(sp + "bias"));
                x = hswish_fwd(cu.sb_out);
                break;
            }
            case StageKind::MBv2:
            case StageKind::MBv3: {
                scache.mb.resize(sc.depth);
                for (int l = 0; l < sc.depth; ++l) {
                    const int stride = l == 0 ? st.stride : 1;
                    x = mb_forward(w, sp + "l" + std::to_string(l) + ".",
                                   st.kind == StageKind::MBv3, sc.expansion[l], stride, x,
                                   scache.mb[l]);
                }
                break;
            }
            case StageKind::Transformer: {
                scache.has_entry = true;
                x = mb_forward(w, sp + "entry.", true, kVitEntryExpansion, st.stride, x,
                               scache.entry);
                scache.attn.resize(sc.depth);
                for (int l = 0; l < sc.depth; ++l)
                    x = attn_layer_forward(w, space, sp + "l" + std::to_string(l) + ".", x,
                                           scache.attn[l]);
                break;
            }
            case StageKind::MBPool: {
                cache->head_in = x;
                const int B = x.shape[0], C = x.shape[1];
                const int HW = x.shape[2] * x.shape[3];
                const Scalar inv = 1.0 / static_cast<Scalar>(HW);
                cache->head_pooled = Tensor({B, C});
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < C; ++c) {
                        const Scalar* p = x.ptr() + (static_cast<std::size_t>(b) * C + c) *
                                                        static_cast<std::size_t>(HW);
                        Scalar acc = 0;
                        for (int i = 0; i < HW; ++i) acc += p[i];
                        cache->head_pooled.at2(b, c) = acc * inv;
                    }
                const Tensor b1 = w("head.fc1.b");
                cache->head_fc1_out = fc(cache->head_pooled, w("head.fc1.w"), &b1);
                cache->head_fc1_act = hswish_fwd(cache->head_fc1_out);
                const Tensor b2 = w("head.fc2.b");
                cache->logits = fc(cache->head_fc1_act, w("head.fc2.w"), &b2);
                break;
            }
        }
    }

    ForwardResult result;
    result.logits = cache->logits;
    if (with_cache) result.cache = std::move(cache);
    return result;
}

double cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    const int B = logits.shape[0], C = logits.shape[1];
    double loss = 0.0;
    for (int b = 0; b < B; ++b) {
        const Scalar* row = logits.ptr() + static_cast<std::size_t>(b) * C;
        Scalar mx = row[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        Scalar denom = 0;
        for (int c = 0; c < C; ++c) denom += std::exp(row[c] - mx);
        loss += -(row[labels[b]] - mx - std::log(denom));
    }
    return loss / B;
}

BackwardResult backward(const SupernetWeights& weights, const SpaceSpec& space,
                        const SubnetConfig& cfg, const ForwardCache& cache,
                        const std::vector<int>& labels) {
    const SlicedWeights w(weights.params, space, cfg);
    BackwardResult result;
    result.grads = zeros_like(weights.params);
    GradSink sink{weights.params, w.sm, result.grads};

    const Tensor& logits = cache.logits;
    const int B = logits.shape[0], C = logits.shape[1];
    result.loss = cross_entropy(logits, labels);

    // d loss / d logits = (softmax - onehot) / B
    Tensor dlogits({B, C});
    for (int b = 0; b < B; ++b) {
        const Scalar* row = logits.ptr() + static_cast<std::size_t>(b) * C;
        Scalar* drow = dlogits.ptr() + static_cast<std::size_t>(b) * C;
        Scalar mx = row[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        Scalar denom = 0;
        for (int c = 0; c < C; ++c) denom += std::exp(row[c] - mx);
        for (int c = 0; c < C; ++c) drow[c] = std::exp(row[c] - mx) / denom / B;
        drow[labels[b]] -= 1.0 / B;
    }

    // head backward
    Tensor d_fc1_act, d_fc2_w;
    Tensor d_fc2_b({C});
    fc_backward(cache.head_fc1_act, w("head.fc2.w"), dlogits, d_fc1_act, d_fc2_w, &d_fc2_b);
    sink.add("head.fc2.w", d_fc2_w);
    sink.add("head.fc2.b", d_fc2_b);
    hswish_bwd(cache.head_fc1_out, d_fc1_act);
    Tensor d_pooled, d_fc1_w;
    Tensor d_fc1_b({cache.head_fc1_out.shape[1]});
    fc_backward(cache.head_pooled, w("head.fc1.w"), d_fc1_act, d_pooled, d_fc1_w, &d_fc1_b);
    sink.add("head.fc1.w", d_fc1_w);
    sink.add("head.fc1.b", d_fc1_b);

    const Tensor& head_in = cache.head_in;
    const int Ch = head_in.shape[1];
    const int HW = head_in.shape[2] * head_in.shape[3];
    Tensor dx(head_in.shape);
    const Scalar inv = 1.0 / static_cast<Scalar>(HW);
    for (int b = 0; b < head_in.shape[0]; ++b)
        for (int c = 0; c < Ch; ++c) {
            const Scalar g = d_pooled.at2(b, c) * inv;
            Scalar* p = dx.ptr() +
                        (static_cast<std::size_t>(b) * Ch + c) * static_cast<std::size_t>(HW);
            for (int i = 0; i < HW; ++i) p[i] = g;
        }

    // stages in reverse, skipping the MBPool head (already handled)
    for (std::size_t si = space.stages.size() - 1; si-- > 0;) {
        const StageSpec& st = space.stages[si];
        const StageConfig& sc = cfg.stages[si];
        const std::string sp = "s" + std::to_string(si) + ".";
        const StageCacheImpl& scache = cache.stages[si];
        switch (st.kind) {
            case StageKind::ConvStem: {
                hswish_bwd(cache.stem.sb_out, dx);
                Tensor dscale, dbias;
                scale_bias_backward(cache.stem.conv_out, w(sp + "scale"), dx, dscale, dbias);
                sink.add(sp + "scale", dscale);
                sink.add(sp + "bias", dbias);
                Tensor d_in, d_w;
                conv2d_backward(cache.stem.in, w(sp + "conv.w"), dx, st.stride, 1, d_in, d_w);
                sink.add(sp + "conv.w", d_w);
                dx = std::move(d_in);  // gradient w.r.t. the input image; unused
                break;
            }
            case StageKind::MBv2:
            case StageKind::MBv3: {
                for (int l = sc.depth - 1; l >= 0; --l)
                    dx = mb_backward(w, sink, sp + "l" + std::to_string(l) + ".", scache.mb[l],
                                     l == 0 ? st.stride : 1, std::move(dx));
                break;
            }
            case StageKind::Transformer: {
                for (int l = sc.depth - 1; l >= 0; --l)
                    dx = attn_layer_backward(w, sink, space, sp + "l" + std::to_string(l) + ".",
                                             scache.attn[l], dx);
                dx = mb_backward(w, sink, sp + "entry.", scache.entry, st.stride, std::move(dx));
                break;
            }
            case StageKind::MBPool:
                break;
        }
    }
    return result;
}

void apply_update(SupernetWeights& weights, const NamedTensors& grads, OptimizerState& state,
                  const SgdOptions& opt) {
    if (state.velocity.size() == 0) state.velocity = zeros_like(weights.params);
    for (std::size_t i = 0; i < weights.params.size(); ++i) {
        Tensor& wt = weights.params[i];
        Tensor& v = state.velocity[i];
        const Tensor& g = grads[i];
        for (std::size_t k = 0; k < wt.data.size(); ++k) {
            v.data[k] = opt.momentum * v.data[k] + g.data[k];
            wt.data[k] -= opt.lr * v.data[k];
        }
    }
}

}  // namespace canas
