#include "callosum/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "callosum/errors.hpp"
#include "callosum/kernels.hpp"
#include "callosum/rng.hpp"

namespace callosum {

namespace {

namespace K = callosum::kernels;

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool starts_with(const std::string& s, const std::string& prefix) {
    return s.rfind(prefix, 0) == 0;
}

std::string dims_text(const std::vector<int64_t>& dims) {
    std::string out = "[";
    for (size_t i = 0; i < dims.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(dims[i]);
    }
    return out + "]";
}

template <typename T>
void add_bias_rows(T* y, const T* bias, int rows, int d) {
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) y[static_cast<size_t>(r) * d + j] += bias[j];
}

template <typename T>
void col_sums_into(const T* dy, int rows, int d, T* out) {
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) out[j] += dy[static_cast<size_t>(r) * d + j];
}

// y = x * W^T + b, x (rows, din), W (dout, din)
template <typename T>
void linear_fwd(const T* x, const T* w, const T* bias, T* y, int rows, int dout, int din) {
    K::gemm_nt(x, w, y, rows, dout, din, false);
    if (bias) add_bias_rows(y, bias, rows, dout);
}

template <typename T>
void linear_bwd(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db, int rows, int dout, int din) {
    if (dx) K::gemm_nn(dy, w, dx, rows, din, dout, false);
    K::gemm_tn(dy, x, dw, dout, din, rows, true);
    if (db) col_sums_into(dy, rows, dout, db);
}

constexpr double kLnEps = 1e-6;

template <typename T>
void ln_fwd(const T* x, const T* w, const T* b, int rows, int d,
            T* xhat, T* invstd, T* out) {
    for (int r = 0; r < rows; ++r) {
        const T* xr = x + static_cast<size_t>(r) * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += xr[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + kLnEps);
        invstd[r] = static_cast<T>(is);
        T* xh = xhat + static_cast<size_t>(r) * d;
        T* o = out + static_cast<size_t>(r) * d;
        for (int j = 0; j < d; ++j) {
            xh[j] = static_cast<T>((xr[j] - mean) * is);
            o[j] = xh[j] * w[j] + b[j];
        }
    }
}

template <typename T>
void ln_bwd(const T* dy, const T* xhat, const T* invstd, const T* w,
            int rows, int d, T* dx, T* dw, T* db) {
    for (int r = 0; r < rows; ++r) {
        const T* dyr = dy + static_cast<size_t>(r) * d;
        const T* xh = xhat + static_cast<size_t>(r) * d;
        T* dxr = dx + static_cast<size_t>(r) * d;
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(dyr[j]) * w[j];
            m1 += dxh;
            m2 += dxh * xh[j];
        }
        m1 /= d;
        m2 /= d;
        for (int j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(dyr[j]) * w[j];
            dxr[j] = static_cast<T>(invstd[r] * (dxh - m1 - xh[j] * m2));
        }
        for (int j = 0; j < d; ++j) {
            dw[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
        }
    }
}

template <typename T>
void gelu_fwd(const T* x, T* y, size_t n) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (size_t i = 0; i < n; ++i) {
        const double v = x[i];
        y[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
}

template <typename T>
void gelu_bwd(const T* x, const T* dy, T* dx, size_t n) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (size_t i = 0; i < n; ++i) {
        const double v = x[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        dx[i] = static_cast<T>(dy[i] * (cdf + v * pdf));
    }
}

template <typename T>
void softmax_rows(T* x, int rows, int d) {
    for (int r = 0; r < rows; ++r) {
        T* xr = x + static_cast<size_t>(r) * d;
        T mx = xr[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            xr[j] = static_cast<T>(std::exp(static_cast<double>(xr[j]) - mx));
            s += xr[j];
        }
        const double inv = 1.0 / s;
        for (int j = 0; j < d; ++j) xr[j] = static_cast<T>(xr[j] * inv);
    }
}

template <typename T>
void relu_inplace(T* x, size_t n) {
    for (size_t i = 0; i < n; ++i) x[i] = x[i] > T(0) ? x[i] : T(0);
}

// d(in) given post-ReLU activation: mask where activation stayed positive.
template <typename T>
void relu_bwd_inplace(const T* act, T* d, size_t n) {
    for (size_t i = 0; i < n; ++i)
        if (!(act[i] > T(0))) d[i] = T(0);
}

// 3x3 convolution, pad 1, single item. in (cin,hw), w (cout, cin*9), out (cout,hw).
template <typename T>
void im2col3(const T* in, int cin, int h, int w, std::vector<T>& cols) {
    const size_t hw = static_cast<size_t>(h) * w;
    cols.assign(static_cast<size_t>(cin) * 9 * hw, T(0));
    for (int ci = 0; ci < cin; ++ci) {
        const T* plane = in + static_cast<size_t>(ci) * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                T* row = cols.data() + (static_cast<size_t>(ci) * 9 + ky * 3 + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    for (int x = 0; x < w; ++x) {
                        const int sx = x + kx - 1;
                        if (sx < 0 || sx >= w) continue;
                        row[static_cast<size_t>(y) * w + x] = plane[static_cast<size_t>(sy) * w + sx];
                    }
                }
            }
        }
    }
}

template <typename T>
void conv3_fwd(const T* in, const T* w, const T* bias, T* out,
               int cin, int cout, int h, int wd, std::vector<T>& cols) {
    const int hw = h * wd;
    im2col3(in, cin, h, wd, cols);
    K::gemm_nn(w, cols.data(), out, cout, hw, cin * 9, false);
    for (int co = 0; co < cout; ++co)
        for (int i = 0; i < hw; ++i) out[static_cast<size_t>(co) * hw + i] += bias[co];
}

template <typename T>
void conv3_bwd(const T* in, const T* w, const T* dout, T* din, T* dw, T* db,
               int cin, int cout, int h, int wd, std::vector<T>& cols, std::vector<T>& dcols) {
    const int hw = h * wd;
    const int kk = cin * 9;
    im2col3(in, cin, h, wd, cols);
    K::gemm_nt(dout, cols.data(), dw, cout, kk, hw, true);
    for (int co = 0; co < cout; ++co) {
        double s = 0.0;
        for (int i = 0; i < hw; ++i) s += dout[static_cast<size_t>(co) * hw + i];
        db[co] += static_cast<T>(s);
    }
    if (!din) return;
    dcols.assign(static_cast<size_t>(kk) * hw, T(0));
    K::gemm_tn(w, dout, dcols.data(), kk, hw, cout, false);
    std::fill(din, din + static_cast<size_t>(cin) * hw, T(0));
    for (int ci = 0; ci < cin; ++ci) {
        T* plane = din + static_cast<size_t>(ci) * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const T* row = dcols.data() + (static_cast<size_t>(ci) * 9 + ky * 3 + kx) * static_cast<size_t>(hw);
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    for (int x = 0; x < wd; ++x) {
                        const int sx = x + kx - 1;
                        if (sx < 0 || sx >= wd) continue;
                        plane[static_cast<size_t>(sy) * wd + sx] += row[static_cast<size_t>(y) * wd + x];
                    }
                }
            }
        }
    }
}

// 1x1 convolution, single item. w (cout, cin).
template <typename T>
void conv1_fwd(const T* in, const T* w, const T* bias, T* out, int cin, int cout, int hw) {
    K::gemm_nn(w, in, out, cout, hw, cin, false);
    for (int co = 0; co < cout; ++co)
        for (int i = 0; i < hw; ++i) out[static_cast<size_t>(co) * hw + i] += bias[co];
}

template <typename T>
void conv1_bwd(const T* in, const T* w, const T* dout, T* din, T* dw, T* db,
               int cin, int cout, int hw) {
    K::gemm_nt(dout, in, dw, cout, cin, hw, true);
    for (int co = 0; co < cout; ++co) {
        double s = 0.0;
        for (int i = 0; i < hw; ++i) s += dout[static_cast<size_t>(co) * hw + i];
        db[co] += static_cast<T>(s);
    }
    if (din) K::gemm_tn(w, dout, din, cin, hw, cout, false);
}

// Transposed 2x2 stride-2 convolution, single item. w (cin, cout, 2, 2):
// out[co, 2y+ky, 2x+kx] = bias[co] + sum_ci in[ci,y,x] * w[ci,co,ky,kx].
template <typename T>
void convt2_fwd(const T* in, const T* w, const T* bias, T* out,
                int cin, int cout, int h, int wd,
                std::vector<T>& wk, std::vector<T>& outk) {
    const int hw = h * wd;
    const int oh = 2 * h, ow = 2 * wd;
    wk.resize(static_cast<size_t>(cin) * cout);
    outk.resize(static_cast<size_t>(cout) * hw);
    for (int ky = 0; ky < 2; ++ky) {
        for (int kx = 0; kx < 2; ++kx) {
            for (int ci = 0; ci < cin; ++ci)
                for (int co = 0; co < cout; ++co)
                    wk[static_cast<size_t>(ci) * cout + co] =
                        w[((static_cast<size_t>(ci) * cout + co) * 2 + ky) * 2 + kx];
            K::gemm_tn(wk.data(), in, outk.data(), cout, hw, cin, false);
            for (int co = 0; co < cout; ++co) {
                const T* src = outk.data() + static_cast<size_t>(co) * hw;
                T* dst = out + static_cast<size_t>(co) * oh * ow;
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < wd; ++x)
                        dst[static_cast<size_t>(2 * y + ky) * ow + (2 * x + kx)] =
                            src[static_cast<size_t>(y) * wd + x] + bias[co];
            }
        }
    }
}

template <typename T>
void convt2_bwd(const T* in, const T* w, const T* dout, T* din, T* dw, T* db,
                int cin, int cout, int h, int wd,
                std::vector<T>& wk, std::vector<T>& doutk, std::vector<T>& dwk) {
    const int hw = h * wd;
    const int oh = 2 * h, ow = 2 * wd;
    wk.resize(static_cast<size_t>(cin) * cout);
    doutk.resize(static_cast<size_t>(cout) * hw);
    dwk.resize(static_cast<size_t>(cin) * cout);
    bool first = true;
    for (int ky = 0; ky < 2; ++ky) {
        for (int kx = 0; kx < 2; ++kx) {
            for (int co = 0; co < cout; ++co) {
                const T* src = dout + static_cast<size_t>(co) * oh * ow;
                T* dst = doutk.data() + static_cast<size_t>(co) * hw;
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < wd; ++x)
                        dst[static_cast<size_t>(y) * wd + x] =
                            src[static_cast<size_t>(2 * y + ky) * ow + (2 * x + kx)];
            }
            K::gemm_nt(in, doutk.data(), dwk.data(), cin, cout, hw, false);
            for (int ci = 0; ci < cin; ++ci)
                for (int co = 0; co < cout; ++co)
                    dw[((static_cast<size_t>(ci) * cout + co) * 2 + ky) * 2 + kx] +=
                        dwk[static_cast<size_t>(ci) * cout + co];
            if (din) {
                for (int ci = 0; ci < cin; ++ci)
                    for (int co = 0; co < cout; ++co)
                        wk[static_cast<size_t>(ci) * cout + co] =
                            w[((static_cast<size_t>(ci) * cout + co) * 2 + ky) * 2 + kx];
                K::gemm_nn(wk.data(), doutk.data(), din, cin, hw, cout, !first);
            }
            first = false;
        }
    }
    for (int co = 0; co < cout; ++co) {
        double s = 0.0;
        const T* src = dout + static_cast<size_t>(co) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) s += src[i];
        db[co] += static_cast<T>(s);
    }
}

double catmull_rom(double t) {
    t = std::abs(t);
    if (t <= 1.0) return 1.5 * t * t * t - 2.5 * t * t + 1.0;
    if (t < 2.0) return -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0;
    return 0.0;
}

// src (gs, gs, d) -> dst (gd, gd, d), bicubic with clamped borders.
void resample_pos_grid(const float* src, int gs, float* dst, int gd, int d) {
    const auto clampi = [&](int v) { return std::min(std::max(v, 0), gs - 1); };
    for (int gy = 0; gy < gd; ++gy) {
        const double sy = (gy + 0.5) * gs / gd - 0.5;
        const int iy = static_cast<int>(std::floor(sy));
        const double fy = sy - iy;
        double wy[4];
        for (int i = 0; i < 4; ++i) wy[i] = catmull_rom(fy - (i - 1));
        for (int gx = 0; gx < gd; ++gx) {
            const double sx = (gx + 0.5) * gs / gd - 0.5;
            const int ix = static_cast<int>(std::floor(sx));
            const double fx = sx - ix;
            double wx[4];
            for (int j = 0; j < 4; ++j) wx[j] = catmull_rom(fx - (j - 1));
            for (int c = 0; c < d; ++c) {
                double acc = 0.0;
                for (int i = 0; i < 4; ++i) {
                    const int ry = clampi(iy - 1 + i);
                    for (int j = 0; j < 4; ++j) {
                        const int rx = clampi(ix - 1 + j);
                        acc += wy[i] * wx[j] * src[(static_cast<size_t>(ry) * gs + rx) * d + c];
                    }
                }
                dst[(static_cast<size_t>(gy) * gd + gx) * d + c] = static_cast<float>(acc);
            }
        }
    }
}

} // namespace

void EncoderConfig::validate() const {
    if (input_px <= 0) throw UsageError("input_px must be positive");
    if (token_patch_px != 16)
        throw UsageError("token_patch_px must be 16: the decoder reaches input resolution "
                         "through exactly four 2x upsampling stages");
    if (input_px % token_patch_px != 0)
        throw UsageError("input_px " + std::to_string(input_px) + " is not divisible by token_patch_px " +
                         std::to_string(token_patch_px));
    if (in_channels != 1 && in_channels != 3)
        throw UsageError("in_channels must be 1 or 3, got " + std::to_string(in_channels));
    if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
        throw UsageError("embed_dim " + std::to_string(embed_dim) + " must be a positive multiple of heads " +
                         std::to_string(heads));
    if (depth <= 0) throw UsageError("depth must be positive");
    if (mlp_ratio <= 0) throw UsageError("mlp_ratio must be positive");
    if (decoder_base <= 0) throw UsageError("decoder_base must be positive");
    const std::vector<int> taps = effective_taps();
    if (taps.size() != 4)
        throw UsageError("tap_layers must list exactly 4 block indices, got " + std::to_string(taps.size()));
    for (size_t i = 0; i < taps.size(); ++i) {
        if (taps[i] < 1 || taps[i] > depth)
            throw UsageError("tap layer " + std::to_string(taps[i]) + " is outside [1, depth=" +
                             std::to_string(depth) + "]");
        if (i > 0 && taps[i] <= taps[i - 1])
            throw UsageError("tap_layers must be strictly increasing");
    }
}

std::vector<int> EncoderConfig::effective_taps() const {
    if (!tap_layers.empty()) return tap_layers;
    std::vector<int> t(4);
    for (int k = 1; k <= 4; ++k) t[k - 1] = depth * k / 4;
    return t;
}

std::string EncoderConfig::to_json() const {
    nlohmann::ordered_json j;
    j["input_px"] = input_px;
    j["token_patch_px"] = token_patch_px;
    j["in_channels"] = in_channels;
    j["embed_dim"] = embed_dim;
    j["depth"] = depth;
    j["heads"] = heads;
    j["mlp_ratio"] = mlp_ratio;
    j["tap_layers"] = effective_taps();
    j["decoder_base"] = decoder_base;
    return j.dump();
}

EncoderConfig EncoderConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("encoder config is not valid json: ") + e.what());
    }
    if (!j.is_object()) throw DataError("encoder config must be a json object");
    EncoderConfig c;
    const auto get_int = [&](const char* key, int& slot) {
        if (!j.contains(key)) return;
        if (!j[key].is_number_integer()) throw DataError(std::string("config key '") + key + "' must be an integer");
        slot = j[key].get<int>();
    };
    get_int("input_px", c.input_px);
    get_int("token_patch_px", c.token_patch_px);
    get_int("in_channels", c.in_channels);
    get_int("embed_dim", c.embed_dim);
    get_int("depth", c.depth);
    get_int("heads", c.heads);
    get_int("mlp_ratio", c.mlp_ratio);
    get_int("decoder_base", c.decoder_base);
    if (j.contains("tap_layers")) {
        if (!j["tap_layers"].is_array()) throw DataError("config key 'tap_layers' must be an array");
        c.tap_layers.clear();
        for (const auto& v : j["tap_layers"]) {
            if (!v.is_number_integer()) throw DataError("tap_layers entries must be integers");
            c.tap_layers.push_back(v.get<int>());
        }
    }
    try {
        c.validate();
    } catch (const UsageError& e) {
        throw DataError(std::string("encoder config invalid: ") + e.what());
    }
    return c;
}

std::string LoadReport::summary() const {
    std::ostringstream o;
    o << "surgery import: loaded " << loaded.size() << " tensors, discarded " << discarded.size()
      << " (prompt encoder / mask decoder / neck), " << missing.size()
      << " checkpoint tensors without a model slot, " << fresh.size() << " parameters initialized fresh";
    if (pos_resampled) o << "; positional embedding resampled to the configured grid";
    return o.str();
}

template <typename T>
struct SegModelT<T>::Impl {
    EncoderConfig cfg;
    int S = 0, P = 0, Cin = 0, G = 0, N = 0, D = 0, nh = 0, hd = 0, H = 0;
    int c0 = 0, c1 = 0, c2 = 0, c3 = 0, c4 = 0;
    std::vector<int> taps;
    std::vector<Param> ps;
    std::unordered_map<std::string, size_t> idx;

    Param& add(const std::string& name, std::vector<int64_t> dims) {
        Param p;
        p.name = name;
        p.dims = std::move(dims);
        int64_t n = 1;
        for (int64_t d : p.dims) n *= d;
        p.w.assign(static_cast<size_t>(n), T(0));
        p.g.assign(static_cast<size_t>(n), T(0));
        idx.emplace(name, ps.size());
        ps.push_back(std::move(p));
        return ps.back();
    }

    Param& at(const std::string& name) {
        auto it = idx.find(name);
        if (it == idx.end()) throw UsageError("no parameter named '" + name + "'");
        return ps[it->second];
    }
    const Param& at(const std::string& name) const {
        auto it = idx.find(name);
        if (it == idx.end()) throw UsageError("no parameter named '" + name + "'");
        return ps[it->second];
    }
    const T* w(const std::string& n) const { return at(n).w.data(); }
    T* g(const std::string& n) { return at(n).g.data(); }

    void build(const EncoderConfig& c) {
        c.validate();
        cfg = c;
        S = c.input_px;
        P = c.token_patch_px;
        Cin = c.in_channels;
        G = S / P;
        N = G * G;
        D = c.embed_dim;
        nh = c.heads;
        hd = D / nh;
        H = c.mlp_ratio * D;
        c1 = c.decoder_base;
        c0 = c.decoder_base;
        c2 = 2 * c1;
        c3 = 4 * c1;
        c4 = 8 * c1;
        taps = c.effective_taps();

        add("image_encoder.patch_embed.proj.weight", {D, Cin, P, P});
        add("image_encoder.patch_embed.proj.bias", {D});
        add("image_encoder.pos_embed", {G, G, D});
        for (int i = 0; i < c.depth; ++i) {
            const std::string b = "image_encoder.blocks." + std::to_string(i) + ".";
            add(b + "norm1.weight", {D});
            add(b + "norm1.bias", {D});
            add(b + "attn.qkv.weight", {3 * D, D});
            add(b + "attn.qkv.bias", {3 * D});
            add(b + "attn.proj.weight", {D, D});
            add(b + "attn.proj.bias", {D});
            add(b + "norm2.weight", {D});
            add(b + "norm2.bias", {D});
            add(b + "mlp.lin1.weight", {H, D});
            add(b + "mlp.lin1.bias", {H});
            add(b + "mlp.lin2.weight", {D, H});
            add(b + "mlp.lin2.bias", {D});
        }
        add("decoder.bottleneck.weight", {c4, D});
        add("decoder.bottleneck.bias", {c4});
        add("decoder.skip3.0.weight", {D, c3, 2, 2});
        add("decoder.skip3.0.bias", {c3});
        add("decoder.skip2.0.weight", {D, c2, 2, 2});
        add("decoder.skip2.0.bias", {c2});
        add("decoder.skip2.1.weight", {c2, c2, 2, 2});
        add("decoder.skip2.1.bias", {c2});
        add("decoder.skip1.0.weight", {D, c1, 2, 2});
        add("decoder.skip1.0.bias", {c1});
        add("decoder.skip1.1.weight", {c1, c1, 2, 2});
        add("decoder.skip1.1.bias", {c1});
        add("decoder.skip1.2.weight", {c1, c1, 2, 2});
        add("decoder.skip1.2.bias", {c1});
        add("decoder.up1.weight", {c4, c3, 2, 2});
        add("decoder.up1.bias", {c3});
        add("decoder.up2.weight", {c3, c2, 2, 2});
        add("decoder.up2.bias", {c2});
        add("decoder.up3.weight", {c2, c1, 2, 2});
        add("decoder.up3.bias", {c1});
        add("decoder.up4.weight", {c1, c0, 2, 2});
        add("decoder.up4.bias", {c0});
        add("decoder.fuse1.weight", {c3, 2 * c3, 3, 3});
        add("decoder.fuse1.bias", {c3});
        add("decoder.fuse2.weight", {c2, 2 * c2, 3, 3});
        add("decoder.fuse2.bias", {c2});
        add("decoder.fuse3.weight", {c1, 2 * c1, 3, 3});
        add("decoder.fuse3.bias", {c1});
        add("decoder.fuse4.weight", {c0, c0, 3, 3});
        add("decoder.fuse4.bias", {c0});
        add("decoder.head.weight", {2, c0});
        add("decoder.head.bias", {2});
    }

    void init(uint64_t seed) {
        Rng rng(seed);
        for (Param& p : ps) {
            if (ends_with(p.name, ".bias")) {
                // Small positive bias ahead of each decoder ReLU avoids dead
                // units and exact-zero plateaus at initialization.
                if (starts_with(p.name, "decoder.") && p.name != "decoder.head.bias")
                    std::fill(p.w.begin(), p.w.end(), T(0.01));
                continue;
            }
            if (p.name.find("norm1.weight") != std::string::npos ||
                p.name.find("norm2.weight") != std::string::npos) {
                std::fill(p.w.begin(), p.w.end(), T(1));
                continue;
            }
            double sd = 0.02;
            if (starts_with(p.name, "decoder.")) {
                int64_t fan_in = 0;
                if (p.dims.size() == 2) fan_in = p.dims[1];
                else if (p.dims.size() == 4 && p.dims[2] == 3) fan_in = p.dims[1] * 9;
                else fan_in = p.dims[0] * 4;
                sd = std::sqrt(2.0 / static_cast<double>(fan_in));
            }
            for (T& v : p.w) v = static_cast<T>(rng.normal(0.0, sd));
        }
    }

    struct LnCache {
        std::vector<T> xhat, out, invstd;
    };
    struct BlockCache {
        std::vector<T> x_in;
        LnCache ln1;
        std::vector<T> qkv, att, ctx, x_mid;
        LnCache ln2;
        std::vector<T> h1, gelu;
    };
    struct Cache {
        int b = 0;
        std::vector<T> input;   // (B,Cin,S,S)
        std::vector<T> patches; // (B*N, Cin*P*P)
        std::vector<BlockCache> blocks;
        std::vector<T> final_out; // (B,N,D)
        // decoder, all (B, c, side, side)
        std::vector<T> tap[4];
        std::vector<T> bott;
        std::vector<T> s3_0, s2_0, s2_1, s1_0, s1_1, s1_2;
        std::vector<T> up1, cat1, f1;
        std::vector<T> up2, cat2, f2;
        std::vector<T> up3, cat3, f3;
        std::vector<T> up4, f4;
        std::vector<T> z, p;
    };

    void tokens_to_feat(const T* tok, T* feat, int b) const {
        for (int bi = 0; bi < b; ++bi)
            for (int n = 0; n < N; ++n)
                for (int d = 0; d < D; ++d)
                    feat[(static_cast<size_t>(bi) * D + d) * N + n] =
                        tok[(static_cast<size_t>(bi) * N + n) * D + d];
    }

    void feat_to_tokens_add(const T* feat, T* tok, int b) const {
        for (int bi = 0; bi < b; ++bi)
            for (int n = 0; n < N; ++n)
                for (int d = 0; d < D; ++d)
                    tok[(static_cast<size_t>(bi) * N + n) * D + d] +=
                        feat[(static_cast<size_t>(bi) * D + d) * N + n];
    }

    void attention_fwd(BlockCache& bc, int b) const {
        const double alpha = 1.0 / std::sqrt(static_cast<double>(hd));
        bc.att.assign(static_cast<size_t>(b) * nh * N * N, T(0));
        bc.ctx.assign(static_cast<size_t>(b) * N * D, T(0));
        const int tasks = b * nh;
        K::parallel_for(0, static_cast<size_t>(tasks), std::min(K::default_workers(), tasks),
                        [&](size_t t0, size_t t1) {
            std::vector<T> q(static_cast<size_t>(N) * hd), k(q.size()), v(q.size());
            for (size_t t = t0; t < t1; ++t) {
                const int bi = static_cast<int>(t) / nh;
                const int head = static_cast<int>(t) % nh;
                const T* qkv = bc.qkv.data() + static_cast<size_t>(bi) * N * 3 * D;
                for (int n = 0; n < N; ++n) {
                    const T* row = qkv + static_cast<size_t>(n) * 3 * D;
                    for (int j = 0; j < hd; ++j) {
                        q[static_cast<size_t>(n) * hd + j] = static_cast<T>(row[head * hd + j] * alpha);
                        k[static_cast<size_t>(n) * hd + j] = row[D + head * hd + j];
                        v[static_cast<size_t>(n) * hd + j] = row[2 * D + head * hd + j];
                    }
                }
                T* att = bc.att.data() + t * static_cast<size_t>(N) * N;
                K::gemm_nt(q.data(), k.data(), att, N, N, hd, false);
                softmax_rows(att, N, N);
                std::vector<T> ctxh(static_cast<size_t>(N) * hd);
                K::gemm_nn(att, v.data(), ctxh.data(), N, hd, N, false);
                T* ctx = bc.ctx.data() + static_cast<size_t>(bi) * N * D;
                for (int n = 0; n < N; ++n)
                    for (int j = 0; j < hd; ++j)
                        ctx[static_cast<size_t>(n) * D + head * hd + j] = ctxh[static_cast<size_t>(n) * hd + j];
            }
        });
    }

    void attention_bwd(const BlockCache& bc, const T* dctx, T* dqkv, int b) const {
        const double alpha = 1.0 / std::sqrt(static_cast<double>(hd));
        std::fill(dqkv, dqkv + static_cast<size_t>(b) * N * 3 * D, T(0));
        const int tasks = b * nh;
        K::parallel_for(0, static_cast<size_t>(tasks), std::min(K::default_workers(), tasks),
                        [&](size_t t0, size_t t1) {
            std::vector<T> qs(static_cast<size_t>(N) * hd), k(qs.size()), v(qs.size());
            std::vector<T> dctxh(qs.size()), dv(qs.size()), dqs(qs.size()), dk(qs.size());
            std::vector<T> datt(static_cast<size_t>(N) * N), ds(datt.size());
            for (size_t t = t0; t < t1; ++t) {
                const int bi = static_cast<int>(t) / nh;
                const int head = static_cast<int>(t) % nh;
                const T* qkv = bc.qkv.data() + static_cast<size_t>(bi) * N * 3 * D;
                for (int n = 0; n < N; ++n) {
                    const T* row = qkv + static_cast<size_t>(n) * 3 * D;
                    for (int j = 0; j < hd; ++j) {
                        qs[static_cast<size_t>(n) * hd + j] = static_cast<T>(row[head * hd + j] * alpha);
                        k[static_cast<size_t>(n) * hd + j] = row[D + head * hd + j];
                        v[static_cast<size_t>(n) * hd + j] = row[2 * D + head * hd + j];
                    }
                    const T* drow = dctx + (static_cast<size_t>(bi) * N + n) * D;
                    for (int j = 0; j < hd; ++j)
                        dctxh[static_cast<size_t>(n) * hd + j] = drow[head * hd + j];
                }
                const T* att = bc.att.data() + t * static_cast<size_t>(N) * N;
                K::gemm_tn(att, dctxh.data(), dv.data(), N, hd, N, false);
                K::gemm_nt(dctxh.data(), v.data(), datt.data(), N, N, hd, false);
                for (int r = 0; r < N; ++r) {
                    const T* ar = att + static_cast<size_t>(r) * N;
                    const T* dr = datt.data() + static_cast<size_t>(r) * N;
                    double rowdot = 0.0;
                    for (int c = 0; c < N; ++c) rowdot += static_cast<double>(dr[c]) * ar[c];
                    T* sr = ds.data() + static_cast<size_t>(r) * N;
                    for (int c = 0; c < N; ++c)
                        sr[c] = static_cast<T>(ar[c] * (static_cast<double>(dr[c]) - rowdot));
                }
                K::gemm_nn(ds.data(), k.data(), dqs.data(), N, hd, N, false);
                K::gemm_tn(ds.data(), qs.data(), dk.data(), N, hd, N, false);
                T* dq_rows = dqkv + static_cast<size_t>(bi) * N * 3 * D;
                for (int n = 0; n < N; ++n) {
                    T* row = dq_rows + static_cast<size_t>(n) * 3 * D;
                    for (int j = 0; j < hd; ++j) {
                        row[head * hd + j] = static_cast<T>(dqs[static_cast<size_t>(n) * hd + j] * alpha);
                        row[D + head * hd + j] = dk[static_cast<size_t>(n) * hd + j];
                        row[2 * D + head * hd + j] = dv[static_cast<size_t>(n) * hd + j];
                    }
                }
            }
        });
    }

    void forward(const T* gray, int b, Cache& c) const {
        if (b <= 0) throw UsageError("batch size must be positive");
        c.b = b;
        const size_t ss = static_cast<size_t>(S) * S;
        c.input.resize(static_cast<size_t>(b) * Cin * ss);
        for (int bi = 0; bi < b; ++bi)
            for (int ci = 0; ci < Cin; ++ci)
                std::memcpy(c.input.data() + (static_cast<size_t>(bi) * Cin + ci) * ss,
                            gray + static_cast<size_t>(bi) * ss, ss * sizeof(T));

        const int kk = Cin * P * P;
        c.patches.resize(static_cast<size_t>(b) * N * kk);
        for (int bi = 0; bi < b; ++bi) {
            const T* img = c.input.data() + static_cast<size_t>(bi) * Cin * ss;
            for (int gy = 0; gy < G; ++gy)
                for (int gx = 0; gx < G; ++gx) {
                    T* row = c.patches.data() +
                             (static_cast<size_t>(bi) * N + static_cast<size_t>(gy) * G + gx) * kk;
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int py = 0; py < P; ++py)
                            for (int px = 0; px < P; ++px)
                                row[(static_cast<size_t>(ci) * P + py) * P + px] =
                                    img[static_cast<size_t>(ci) * ss +
                                        static_cast<size_t>(gy * P + py) * S + (gx * P + px)];
                }
        }

        const int rows = b * N;
        c.blocks.assign(static_cast<size_t>(cfg.depth), BlockCache{});
        std::vector<T> x(static_cast<size_t>(rows) * D);
        linear_fwd(c.patches.data(), w("image_encoder.patch_embed.proj.weight"),
                   w("image_encoder.patch_embed.proj.bias"), x.data(), rows, D, kk);
        const T* pos = w("image_encoder.pos_embed");
        for (int bi = 0; bi < b; ++bi)
            for (int n = 0; n < N; ++n)
                for (int d = 0; d < D; ++d)
                    x[(static_cast<size_t>(bi) * N + n) * D + d] += pos[static_cast<size_t>(n) * D + d];

        for (int i = 0; i < cfg.depth; ++i) {
            BlockCache& bc = c.blocks[static_cast<size_t>(i)];
            const std::string pre = "image_encoder.blocks." + std::to_string(i) + ".";
            bc.x_in = x;
            bc.ln1.xhat.resize(x.size());
            bc.ln1.out.resize(x.size());
            bc.ln1.invstd.resize(static_cast<size_t>(rows));
            ln_fwd(bc.x_in.data(), w(pre + "norm1.weight"), w(pre + "norm1.bias"), rows, D,
                   bc.ln1.xhat.data(), bc.ln1.invstd.data(), bc.ln1.out.data());
            bc.qkv.resize(static_cast<size_t>(rows) * 3 * D);
            linear_fwd(bc.ln1.out.data(), w(pre + "attn.qkv.weight"), w(pre + "attn.qkv.bias"),
                       bc.qkv.data(), rows, 3 * D, D);
            attention_fwd(bc, b);
            bc.x_mid.resize(x.size());
            linear_fwd(bc.ctx.data(), w(pre + "attn.proj.weight"), w(pre + "attn.proj.bias"),
                       bc.x_mid.data(), rows, D, D);
            for (size_t j = 0; j < x.size(); ++j) bc.x_mid[j] += bc.x_in[j];

            bc.ln2.xhat.resize(x.size());
            bc.ln2.out.resize(x.size());
            bc.ln2.invstd.resize(static_cast<size_t>(rows));
            ln_fwd(bc.x_mid.data(), w(pre + "norm2.weight"), w(pre + "norm2.bias"), rows, D,
                   bc.ln2.xhat.data(), bc.ln2.invstd.data(), bc.ln2.out.data());
            bc.h1.resize(static_cast<size_t>(rows) * H);
            linear_fwd(bc.ln2.out.data(), w(pre + "mlp.lin1.weight"), w(pre + "mlp.lin1.bias"),
                       bc.h1.data(), rows, H, D);
            bc.gelu.resize(bc.h1.size());
            gelu_fwd(bc.h1.data(), bc.gelu.data(), bc.h1.size());
            linear_fwd(bc.gelu.data(), w(pre + "mlp.lin2.weight"), w(pre + "mlp.lin2.bias"),
                       x.data(), rows, D, H);
            for (size_t j = 0; j < x.size(); ++j) x[j] += bc.x_mid[j];

            for (size_t ti = 0; ti < taps.size(); ++ti) {
                if (taps[ti] == i + 1) {
                    c.tap[ti].resize(static_cast<size_t>(b) * D * N);
                    tokens_to_feat(x.data(), c.tap[ti].data(), b);
                }
            }
        }
        c.final_out = std::move(x);

        decoder_fwd(c, b);
    }

    void decoder_fwd(Cache& c, int b) const {
        const int g1 = G, g2 = 2 * G, g4 = 4 * G, g8 = 8 * G, g16 = 16 * G;
        const size_t n1 = static_cast<size_t>(g1) * g1, n2 = static_cast<size_t>(g2) * g2,
                     n4 = static_cast<size_t>(g4) * g4, n8 = static_cast<size_t>(g8) * g8,
                     n16 = static_cast<size_t>(g16) * g16;
        c.bott.resize(static_cast<size_t>(b) * c4 * n1);
        c.s3_0.resize(static_cast<size_t>(b) * c3 * n2);
        c.s2_0.resize(static_cast<size_t>(b) * c2 * n2);
        c.s2_1.resize(static_cast<size_t>(b) * c2 * n4);
        c.s1_0.resize(static_cast<size_t>(b) * c1 * n2);
        c.s1_1.resize(static_cast<size_t>(b) * c1 * n4);
        c.s1_2.resize(static_cast<size_t>(b) * c1 * n8);
        c.up1.resize(static_cast<size_t>(b) * c3 * n2);
        c.cat1.resize(static_cast<size_t>(b) * 2 * c3 * n2);
        c.f1.resize(static_cast<size_t>(b) * c3 * n2);
        c.up2.resize(static_cast<size_t>(b) * c2 * n4);
        c.cat2.resize(static_cast<size_t>(b) * 2 * c2 * n4);
        c.f2.resize(static_cast<size_t>(b) * c2 * n4);
        c.up3.resize(static_cast<size_t>(b) * c1 * n8);
        c.cat3.resize(static_cast<size_t>(b) * 2 * c1 * n8);
        c.f3.resize(static_cast<size_t>(b) * c1 * n8);
        c.up4.resize(static_cast<size_t>(b) * c0 * n16);
        c.f4.resize(static_cast<size_t>(b) * c0 * n16);
        c.z.resize(static_cast<size_t>(b) * 2 * n16);
        c.p.resize(c.z.size());

        K::parallel_for(0, static_cast<size_t>(b), std::min(K::default_workers(), b),
                        [&](size_t b0, size_t b1) {
            std::vector<T> wk, outk, cols;
            for (size_t bi = b0; bi < b1; ++bi) {
                const T* t3 = c.tap[3].data() + bi * D * n1;
                const T* t2 = c.tap[2].data() + bi * D * n1;
                const T* t1 = c.tap[1].data() + bi * D * n1;
                const T* t0 = c.tap[0].data() + bi * D * n1;

                T* bott = c.bott.data() + bi * c4 * n1;
                conv1_fwd(t3, w("decoder.bottleneck.weight"), w("decoder.bottleneck.bias"),
                          bott, D, c4, static_cast<int>(n1));
                relu_inplace(bott, static_cast<size_t>(c4) * n1);

                T* s3 = c.s3_0.data() + bi * c3 * n2;
                convt2_fwd(t2, w("decoder.skip3.0.weight"), w("decoder.skip3.0.bias"), s3,
                           D, c3, g1, g1, wk, outk);
                relu_inplace(s3, static_cast<size_t>(c3) * n2);

                T* s20 = c.s2_0.data() + bi * c2 * n2;
                convt2_fwd(t1, w("decoder.skip2.0.weight"), w("decoder.skip2.0.bias"), s20,
                           D, c2, g1, g1, wk, outk);
                relu_inplace(s20, static_cast<size_t>(c2) * n2);
                T* s21 = c.s2_1.data() + bi * c2 * n4;
                convt2_fwd(s20, w("decoder.skip2.1.weight"), w("decoder.skip2.1.bias"), s21,
                           c2, c2, g2, g2, wk, outk);
                relu_inplace(s21, static_cast<size_t>(c2) * n4);

                T* s10 = c.s1_0.data() + bi * c1 * n2;
                convt2_fwd(t0, w("decoder.skip1.0.weight"), w("decoder.skip1.0.bias"), s10,
                           D, c1, g1, g1, wk, outk);
                relu_inplace(s10, static_cast<size_t>(c1) * n2);
                T* s11 = c.s1_1.data() + bi * c1 * n4;
                convt2_fwd(s10, w("decoder.skip1.1.weight"), w("decoder.skip1.1.bias"), s11,
                           c1, c1, g2, g2, wk, outk);
                relu_inplace(s11, static_cast<size_t>(c1) * n4);
                T* s12 = c.s1_2.data() + bi * c1 * n8;
                convt2_fwd(s11, w("decoder.skip1.2.weight"), w("decoder.skip1.2.bias"), s12,
                           c1, c1, g4, g4, wk, outk);
                relu_inplace(s12, static_cast<size_t>(c1) * n8);

                T* up1 = c.up1.data() + bi * c3 * n2;
                convt2_fwd(bott, w("decoder.up1.weight"), w("decoder.up1.bias"), up1,
                           c4, c3, g1, g1, wk, outk);
                T* cat1 = c.cat1.data() + bi * 2 * c3 * n2;
                std::memcpy(cat1, up1, static_cast<size_t>(c3) * n2 * sizeof(T));
                std::memcpy(cat1 + static_cast<size_t>(c3) * n2, s3, static_cast<size_t>(c3) * n2 * sizeof(T));
                T* f1 = c.f1.data() + bi * c3 * n2;
                conv3_fwd(cat1, w("decoder.fuse1.weight"), w("decoder.fuse1.bias"), f1,
                          2 * c3, c3, g2, g2, cols);
                relu_inplace(f1, static_cast<size_t>(c3) * n2);

                T* up2 = c.up2.data() + bi * c2 * n4;
                convt2_fwd(f1, w("decoder.up2.weight"), w("decoder.up2.bias"), up2,
                           c3, c2, g2, g2, wk, outk);
                T* cat2 = c.cat2.data() + bi * 2 * c2 * n4;
                std::memcpy(cat2, up2, static_cast<size_t>(c2) * n4 * sizeof(T));
                std::memcpy(cat2 + static_cast<size_t>(c2) * n4, s21, static_cast<size_t>(c2) * n4 * sizeof(T));
                T* f2 = c.f2.data() + bi * c2 * n4;
                conv3_fwd(cat2, w("decoder.fuse2.weight"), w("decoder.fuse2.bias"), f2,
                          2 * c2, c2, g4, g4, cols);
                relu_inplace(f2, static_cast<size_t>(c2) * n4);

                T* up3 = c.up3.data() + bi * c1 * n8;
                convt2_fwd(f2, w("decoder.up3.weight"), w("decoder.up3.bias"), up3,
                           c2, c1, g4, g4, wk, outk);
                T* cat3 = c.cat3.data() + bi * 2 * c1 * n8;
                std::memcpy(cat3, up3, static_cast<size_t>(c1) * n8 * sizeof(T));
                std::memcpy(cat3 + static_cast<size_t>(c1) * n8, s12, static_cast<size_t>(c1) * n8 * sizeof(T));
                T* f3 = c.f3.data() + bi * c1 * n8;
                conv3_fwd(cat3, w("decoder.fuse3.weight"), w("decoder.fuse3.bias"), f3,
                          2 * c1, c1, g8, g8, cols);
                relu_inplace(f3, static_cast<size_t>(c1) * n8);

                T* up4 = c.up4.data() + bi * c0 * n16;
                convt2_fwd(f3, w("decoder.up4.weight"), w("decoder.up4.bias"), up4,
                           c1, c0, g8, g8, wk, outk);
                T* f4 = c.f4.data() + bi * c0 * n16;
                conv3_fwd(up4, w("decoder.fuse4.weight"), w("decoder.fuse4.bias"), f4,
                          c0, c0, g16, g16, cols);
                relu_inplace(f4, static_cast<size_t>(c0) * n16);

                T* z = c.z.data() + bi * 2 * n16;
                conv1_fwd(f4, w("decoder.head.weight"), w("decoder.head.bias"), z,
                          c0, 2, static_cast<int>(n16));
                T* p = c.p.data() + bi * 2 * n16;
                for (size_t j = 0; j < 2 * n16; ++j)
                    p[j] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(z[j]))));
            }
        });
    }

    void backward(const Cache& c, const std::vector<T>& dz) {
        const int b = c.b;
        const int g1 = G, g2 = 2 * G, g4 = 4 * G, g8 = 8 * G, g16 = 16 * G;
        const size_t n1 = static_cast<size_t>(g1) * g1, n2 = static_cast<size_t>(g2) * g2,
                     n4 = static_cast<size_t>(g4) * g4, n8 = static_cast<size_t>(g8) * g8,
                     n16 = static_cast<size_t>(g16) * g16;

        std::vector<T> dtap[4];
        for (auto& t : dtap) t.assign(static_cast<size_t>(b) * D * n1, T(0));

        std::vector<T> wk, outk, dwk, cols, dcols;
        std::vector<T> df4(static_cast<size_t>(c0) * n16), dup4(df4.size());
        std::vector<T> df3(static_cast<size_t>(c1) * n8), dcat3(2 * df3.size());
        std::vector<T> df2(static_cast<size_t>(c2) * n4), dcat2(2 * df2.size());
        std::vector<T> df1(static_cast<size_t>(c3) * n2), dcat1(2 * df1.size());
        std::vector<T> dbott(static_cast<size_t>(c4) * n1);
        std::vector<T> ds12(static_cast<size_t>(c1) * n8), ds11(static_cast<size_t>(c1) * n4),
                       ds10(static_cast<size_t>(c1) * n2);
        std::vector<T> ds21(static_cast<size_t>(c2) * n4), ds20(static_cast<size_t>(c2) * n2);
        std::vector<T> ds3(static_cast<size_t>(c3) * n2);

        for (int bi = 0; bi < b; ++bi) {
            const T* dzb = dz.data() + static_cast<size_t>(bi) * 2 * n16;
            const T* f4 = c.f4.data() + static_cast<size_t>(bi) * c0 * n16;
            conv1_bwd(f4, w("decoder.head.weight"), dzb, df4.data(),
                      g("decoder.head.weight"), g("decoder.head.bias"), c0, 2, static_cast<int>(n16));
            relu_bwd_inplace(f4, df4.data(), df4.size());

            const T* up4 = c.up4.data() + static_cast<size_t>(bi) * c0 * n16;
            conv3_bwd(up4, w("decoder.fuse4.weight"), df4.data(), dup4.data(),
                      g("decoder.fuse4.weight"), g("decoder.fuse4.bias"),
                      c0, c0, g16, g16, cols, dcols);

            const T* f3 = c.f3.data() + static_cast<size_t>(bi) * c1 * n8;
            convt2_bwd(f3, w("decoder.up4.weight"), dup4.data(), df3.data(),
                       g("decoder.up4.weight"), g("decoder.up4.bias"),
                       c1, c0, g8, g8, wk, outk, dwk);
            relu_bwd_inplace(f3, df3.data(), df3.size());

            const T* cat3 = c.cat3.data() + static_cast<size_t>(bi) * 2 * c1 * n8;
            conv3_bwd(cat3, w("decoder.fuse3.weight"), df3.data(), dcat3.data(),
                      g("decoder.fuse3.weight"), g("decoder.fuse3.bias"),
                      2 * c1, c1, g8, g8, cols, dcols);
            std::memcpy(ds12.data(), dcat3.data() + static_cast<size_t>(c1) * n8,
                        static_cast<size_t>(c1) * n8 * sizeof(T));

            const T* f2 = c.f2.data() + static_cast<size_t>(bi) * c2 * n4;
            convt2_bwd(f2, w("decoder.up3.weight"), dcat3.data(), df2.data(),
                       g("decoder.up3.weight"), g("decoder.up3.bias"),
                       c2, c1, g4, g4, wk, outk, dwk);
            relu_bwd_inplace(f2, df2.data(), df2.size());

            const T* cat2 = c.cat2.data() + static_cast<size_t>(bi) * 2 * c2 * n4;
            conv3_bwd(cat2, w("decoder.fuse2.weight"), df2.data(), dcat2.data(),
                      g("decoder.fuse2.weight"), g("decoder.fuse2.bias"),
                      2 * c2, c2, g4, g4, cols, dcols);
            std::memcpy(ds21.data(), dcat2.data() + static_cast<size_t>(c2) * n4,
                        static_cast<size_t>(c2) * n4 * sizeof(T));

            const T* f1 = c.f1.data() + static_cast<size_t>(bi) * c3 * n2;
            convt2_bwd(f1, w("decoder.up2.weight"), dcat2.data(), df1.data(),
                       g("decoder.up2.weight"), g("decoder.up2.bias"),
                       c3, c2, g2, g2, wk, outk, dwk);
            relu_bwd_inplace(f1, df1.data(), df1.size());

            const T* cat1 = c.cat1.data() + static_cast<size_t>(bi) * 2 * c3 * n2;
            conv3_bwd(cat1, w("decoder.fuse1.weight"), df1.data(), dcat1.data(),
                      g("decoder.fuse1.weight"), g("decoder.fuse1.bias"),
                      2 * c3, c3, g2, g2, cols, dcols);
            std::memcpy(ds3.data(), dcat1.data() + static_cast<size_t>(c3) * n2,
                        static_cast<size_t>(c3) * n2 * sizeof(T));

            const T* bott = c.bott.data() + static_cast<size_t>(bi) * c4 * n1;
            convt2_bwd(bott, w("decoder.up1.weight"), dcat1.data(), dbott.data(),
                       g("decoder.up1.weight"), g("decoder.up1.bias"),
                       c4, c3, g1, g1, wk, outk, dwk);
            relu_bwd_inplace(bott, dbott.data(), dbott.size());
            const T* t3 = c.tap[3].data() + static_cast<size_t>(bi) * D * n1;
            conv1_bwd(t3, w("decoder.bottleneck.weight"), dbott.data(),
                      dtap[3].data() + static_cast<size_t>(bi) * D * n1,
                      g("decoder.bottleneck.weight"), g("decoder.bottleneck.bias"),
                      D, c4, static_cast<int>(n1));

            const T* s12 = c.s1_2.data() + static_cast<size_t>(bi) * c1 * n8;
            relu_bwd_inplace(s12, ds12.data(), ds12.size());
            const T* s11 = c.s1_1.data() + static_cast<size_t>(bi) * c1 * n4;
            convt2_bwd(s11, w("decoder.skip1.2.weight"), ds12.data(), ds11.data(),
                       g("decoder.skip1.2.weight"), g("decoder.skip1.2.bias"),
                       c1, c1, g4, g4, wk, outk, dwk);
            relu_bwd_inplace(s11, ds11.data(), ds11.size());
            const T* s10 = c.s1_0.data() + static_cast<size_t>(bi) * c1 * n2;
            convt2_bwd(s10, w("decoder.skip1.1.weight"), ds11.data(), ds10.data(),
                       g("decoder.skip1.1.weight"), g("decoder.skip1.1.bias"),
                       c1, c1, g2, g2, wk, outk, dwk);
            relu_bwd_inplace(s10, ds10.data(), ds10.size());
            const T* t0 = c.tap[0].data() + static_cast<size_t>(bi) * D * n1;
            convt2_bwd(t0, w("decoder.skip1.0.weight"), ds10.data(),
                       dtap[0].data() + static_cast<size_t>(bi) * D * n1,
                       g("decoder.skip1.0.weight"), g("decoder.skip1.0.bias"),
                       D, c1, g1, g1, wk, outk, dwk);

            const T* s21 = c.s2_1.data() + static_cast<size_t>(bi) * c2 * n4;
            relu_bwd_inplace(s21, ds21.data(), ds21.size());
            const T* s20 = c.s2_0.data() + static_cast<size_t>(bi) * c2 * n2;
            convt2_bwd(s20, w("decoder.skip2.1.weight"), ds21.data(), ds20.data(),
                       g("decoder.skip2.1.weight"), g("decoder.skip2.1.bias"),
                       c2, c2, g2, g2, wk, outk, dwk);
            relu_bwd_inplace(s20, ds20.data(), ds20.size());
            const T* t1 = c.tap[1].data() + static_cast<size_t>(bi) * D * n1;
            convt2_bwd(t1, w("decoder.skip2.0.weight"), ds20.data(),
                       dtap[1].data() + static_cast<size_t>(bi) * D * n1,
                       g("decoder.skip2.0.weight"), g("decoder.skip2.0.bias"),
                       D, c2, g1, g1, wk, outk, dwk);

            const T* s3f = c.s3_0.data() + static_cast<size_t>(bi) * c3 * n2;
            relu_bwd_inplace(s3f, ds3.data(), ds3.size());
            const T* t2 = c.tap[2].data() + static_cast<size_t>(bi) * D * n1;
            convt2_bwd(t2, w("decoder.skip3.0.weight"), ds3.data(),
                       dtap[2].data() + static_cast<size_t>(bi) * D * n1,
                       g("decoder.skip3.0.weight"), g("decoder.skip3.0.bias"),
                       D, c3, g1, g1, wk, outk, dwk);
        }

        const int rows = b * N;
        std::vector<T> dx(static_cast<size_t>(rows) * D, T(0));
        std::vector<T> dtmp(dx.size()), dqkv(static_cast<size_t>(rows) * 3 * D);
        std::vector<T> dh1(static_cast<size_t>(rows) * H), dgelu(dh1.size()), dctx(dx.size());
        for (int i = cfg.depth - 1; i >= 0; --i) {
            for (size_t ti = 0; ti < taps.size(); ++ti)
                if (taps[ti] == i + 1) feat_to_tokens_add(dtap[ti].data(), dx.data(), b);

            const BlockCache& bc = c.blocks[static_cast<size_t>(i)];
            const std::string pre = "image_encoder.blocks." + std::to_string(i) + ".";

            // x_out = x_mid + mlp(ln2(x_mid)); dx currently holds d(x_out)
            linear_bwd(bc.gelu.data(), w(pre + "mlp.lin2.weight"), dx.data(), dgelu.data(),
                       g(pre + "mlp.lin2.weight"), g(pre + "mlp.lin2.bias"), rows, D, H);
            gelu_bwd(bc.h1.data(), dgelu.data(), dh1.data(), dh1.size());
            linear_bwd(bc.ln2.out.data(), w(pre + "mlp.lin1.weight"), dh1.data(), dtmp.data(),
                       g(pre + "mlp.lin1.weight"), g(pre + "mlp.lin1.bias"), rows, H, D);
            {
                std::vector<T> dmid(dx.size());
                ln_bwd(dtmp.data(), bc.ln2.xhat.data(), bc.ln2.invstd.data(), w(pre + "norm2.weight"),
                       rows, D, dmid.data(), g(pre + "norm2.weight"), g(pre + "norm2.bias"));
                for (size_t j = 0; j < dx.size(); ++j) dx[j] += dmid[j];
            }

            // x_mid = x_in + proj(attn(ln1(x_in))); dx holds d(x_mid)
            linear_bwd(bc.ctx.data(), w(pre + "attn.proj.weight"), dx.data(), dctx.data(),
                       g(pre + "attn.proj.weight"), g(pre + "attn.proj.bias"), rows, D, D);
            attention_bwd(bc, dctx.data(), dqkv.data(), b);
            linear_bwd(bc.ln1.out.data(), w(pre + "attn.qkv.weight"), dqkv.data(), dtmp.data(),
                       g(pre + "attn.qkv.weight"), g(pre + "attn.qkv.bias"), rows, 3 * D, D);
            {
                std::vector<T> din(dx.size());
                ln_bwd(dtmp.data(), bc.ln1.xhat.data(), bc.ln1.invstd.data(), w(pre + "norm1.weight"),
                       rows, D, din.data(), g(pre + "norm1.weight"), g(pre + "norm1.bias"));
                for (size_t j = 0; j < dx.size(); ++j) dx[j] += din[j];
            }
        }

        T* dpos = g("image_encoder.pos_embed");
        for (int bi = 0; bi < b; ++bi)
            for (int n = 0; n < N; ++n)
                for (int d = 0; d < D; ++d)
                    dpos[static_cast<size_t>(n) * D + d] += dx[(static_cast<size_t>(bi) * N + n) * D + d];
        linear_bwd(c.patches.data(), w("image_encoder.patch_embed.proj.weight"), dx.data(),
                   static_cast<T*>(nullptr), g("image_encoder.patch_embed.proj.weight"),
                   g("image_encoder.patch_embed.proj.bias"), rows, D, Cin * P * P);
    }

    double bce(const std::vector<T>& p, const uint8_t* targets, int b, double eps,
               std::vector<T>* dz) const {
        const size_t n16 = static_cast<size_t>(S) * S;
        const double total = static_cast<double>(b) * 2.0 * static_cast<double>(n16);
        if (dz) dz->assign(p.size(), T(0));
        double loss = 0.0;
        for (int bi = 0; bi < b; ++bi) {
            for (size_t i = 0; i < n16; ++i) {
                const uint8_t cls = targets[static_cast<size_t>(bi) * n16 + i];
                if (cls > 2)
                    throw UsageError("target class " + std::to_string(static_cast<int>(cls)) +
                                     " is outside {0,1,2}");
                for (int ch = 0; ch < 2; ++ch) {
                    const double t = (cls == ch + 1) ? 1.0 : 0.0;
                    const size_t at = (static_cast<size_t>(bi) * 2 + ch) * n16 + i;
                    const double pv = p[at];
                    const double pc = std::min(std::max(pv, eps), 1.0 - eps);
                    loss -= t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc);
                    if (dz && pv >= eps && pv <= 1.0 - eps)
                        (*dz)[at] = static_cast<T>((pv - t) / total);
                }
            }
        }
        return loss / total;
    }
};

template <typename T>
SegModelT<T>::SegModelT(const EncoderConfig& cfg, uint64_t seed) : impl_(new Impl) {
    impl_->build(cfg);
    impl_->init(seed);
}

template <typename T>
SegModelT<T>::~SegModelT() = default;
template <typename T>
SegModelT<T>::SegModelT(SegModelT&&) noexcept = default;
template <typename T>
SegModelT<T>& SegModelT<T>::operator=(SegModelT&&) noexcept = default;

template <typename T>
const EncoderConfig& SegModelT<T>::config() const {
    return impl_->cfg;
}

template <typename T>
std::vector<typename SegModelT<T>::Param>& SegModelT<T>::params() {
    return impl_->ps;
}

template <typename T>
const std::vector<typename SegModelT<T>::Param>& SegModelT<T>::params() const {
    return impl_->ps;
}

template <typename T>
typename SegModelT<T>::Param* SegModelT<T>::find_param(const std::string& name) {
    auto it = impl_->idx.find(name);
    return it == impl_->idx.end() ? nullptr : &impl_->ps[it->second];
}

template <typename T>
int64_t SegModelT<T>::parameter_count() const {
    int64_t n = 0;
    for (const Param& p : impl_->ps) n += p.count();
    return n;
}

template <typename T>
void SegModelT<T>::zero_grad() {
    for (Param& p : impl_->ps) std::fill(p.g.begin(), p.g.end(), T(0));
}

template <typename T>
void SegModelT<T>::predict(const T* gray, int b, std::vector<T>& probs) const {
    typename Impl::Cache c;
    impl_->forward(gray, b, c);
    probs = std::move(c.p);
}

template <typename T>
double SegModelT<T>::loss_only(const T* gray, const uint8_t* target_classes, int b,
                               double clamp_eps) const {
    typename Impl::Cache c;
    impl_->forward(gray, b, c);
    return impl_->bce(c.p, target_classes, b, clamp_eps, nullptr);
}

template <typename T>
double SegModelT<T>::forward_backward(const T* gray, const uint8_t* target_classes, int b,
                                      double clamp_eps) {
    typename Impl::Cache c;
    impl_->forward(gray, b, c);
    std::vector<T> dz;
    const double loss = impl_->bce(c.p, target_classes, b, clamp_eps, &dz);
    impl_->backward(c, dz);
    return loss;
}

template class SegModelT<float>;
template class SegModelT<double>;

uint8_t to_class(float p_axon, float p_myelin, float threshold) {
    if (!(threshold > 0.0f && threshold < 1.0f))
        throw UsageError("detection threshold must lie in (0,1)");
    if (p_axon < threshold && p_myelin < threshold) return kClassBackground;
    return p_axon > p_myelin ? kClassAxon : kClassMyelin;
}

ClassMask to_class_mask(const std::vector<float>& probs, int width, int height, float threshold) {
    if (width <= 0 || height <= 0) throw UsageError("mask dimensions must be positive");
    const size_t plane = static_cast<size_t>(width) * height;
    if (probs.size() != 2 * plane)
        throw UsageError("probability buffer holds " + std::to_string(probs.size()) +
                         " values, expected 2*" + std::to_string(plane));
    ClassMask mask(width, height);
    for (size_t i = 0; i < plane; ++i)
        mask.values[i] = to_class(probs[i], probs[plane + i], threshold);
    return mask;
}

void save_snapshot(const SegModel& model, const std::filesystem::path& path,
                   const std::string& extra_meta_json) {
    nlohmann::ordered_json meta;
    meta["kind"] = "seg-snapshot";
    meta["config"] = nlohmann::ordered_json::parse(model.config().to_json());
    if (!extra_meta_json.empty()) {
        nlohmann::json extra;
        try {
            extra = nlohmann::json::parse(extra_meta_json);
        } catch (const nlohmann::json::exception& e) {
            throw UsageError(std::string("extra snapshot meta is not valid json: ") + e.what());
        }
        if (!extra.is_object()) throw UsageError("extra snapshot meta must be a json object");
        for (const auto& [key, value] : extra.items()) {
            if (key == "kind" || key == "config")
                throw UsageError("extra snapshot meta may not override '" + key + "'");
            meta[key] = value;
        }
    }
    Checkpoint ckpt;
    ckpt.meta_json = meta.dump();
    for (const auto& p : model.params()) {
        Tensor& t = ckpt.add(p.name, p.dims);
        for (size_t i = 0; i < p.w.size(); ++i) t.values[i] = p.w[i];
    }
    save_checkpoint(ckpt, path);
}

namespace {

EncoderConfig config_from_meta(const std::string& meta_json, const std::string& origin) {
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_json);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("snapshot meta in '" + origin + "' is not valid json: " + e.what());
    }
    if (!meta.is_object() || !meta.contains("config"))
        throw DataError("snapshot '" + origin + "' carries no embedded encoder config");
    return EncoderConfig::from_json(meta["config"].dump());
}

} // namespace

EncoderConfig snapshot_config(const std::filesystem::path& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    return config_from_meta(ckpt.meta_json, path.string());
}

SegModel load_snapshot(const std::filesystem::path& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    const EncoderConfig cfg = config_from_meta(ckpt.meta_json, path.string());
    SegModel model(cfg, 0);
    for (auto& p : model.params()) {
        const Tensor* t = ckpt.find(p.name);
        if (!t) throw DataError("snapshot '" + path.string() + "' is missing tensor '" + p.name + "'");
        if (t->dims != p.dims)
            throw DataError("snapshot tensor '" + p.name + "' has dims " + dims_text(t->dims) +
                            " but the embedded config implies " + dims_text(p.dims));
        for (size_t i = 0; i < p.w.size(); ++i) p.w[i] = t->values[i];
    }
    return model;
}

SegModel surgery_import(const Checkpoint& ckpt, const EncoderConfig& requested, uint64_t seed,
                        LoadReport* report) {
    EncoderConfig cfg = requested;
    cfg.validate();

    const Tensor* pe = ckpt.find("image_encoder.patch_embed.proj.weight");
    if (pe) {
        if (pe->dims.size() != 4)
            throw DataError("checkpoint patch embedding has rank " + std::to_string(pe->dims.size()) +
                            ", expected 4");
        if (pe->dims[0] != cfg.embed_dim)
            throw DataError("checkpoint embed_dim " + std::to_string(pe->dims[0]) +
                            " differs from configured embed_dim " + std::to_string(cfg.embed_dim));
        if (pe->dims[2] != cfg.token_patch_px || pe->dims[3] != cfg.token_patch_px)
            throw DataError("checkpoint token patch " + std::to_string(pe->dims[2]) + "x" +
                            std::to_string(pe->dims[3]) + " differs from configured " +
                            std::to_string(cfg.token_patch_px));
        cfg.in_channels = static_cast<int>(pe->dims[1]);
        cfg.validate();
    }
    const Tensor* pos = ckpt.find("image_encoder.pos_embed");
    if (pos) {
        if (pos->dims.empty() || pos->dims.back() != cfg.embed_dim)
            throw DataError("checkpoint embed_dim " +
                            std::to_string(pos->dims.empty() ? 0 : pos->dims.back()) +
                            " (positional embedding) differs from configured embed_dim " +
                            std::to_string(cfg.embed_dim));
    }

    SegModel model(cfg, seed);
    LoadReport rep;
    std::set<std::string> loaded_names;

    for (const Tensor& t : ckpt.tensors) {
        if (starts_with(t.name, "prompt_encoder.") || starts_with(t.name, "mask_decoder.") ||
            starts_with(t.name, "image_encoder.neck.")) {
            rep.discarded.push_back(t.name);
            continue;
        }
        SegModel::Param* p = starts_with(t.name, "image_encoder.") ? model.find_param(t.name) : nullptr;
        if (!p) {
            rep.missing.push_back(t.name);
            continue;
        }
        if (t.name == "image_encoder.pos_embed") {
            std::vector<int64_t> dims = t.dims;
            if (dims.size() == 4 && dims[0] == 1) dims.erase(dims.begin());
            if (dims.size() != 3 || dims[0] != dims[1] || dims[2] != cfg.embed_dim)
                throw DataError("checkpoint pos_embed has dims " + dims_text(t.dims) +
                                ", expected a square token grid by embed_dim " +
                                std::to_string(cfg.embed_dim));
            const int gs = static_cast<int>(dims[0]);
            const int gd = cfg.grid_side();
            if (gs == gd) {
                for (size_t i = 0; i < p->w.size(); ++i) p->w[i] = t.values[i];
            } else {
                std::vector<float> dst(static_cast<size_t>(gd) * gd * cfg.embed_dim);
                resample_pos_grid(t.values.data(), gs, dst.data(), gd, cfg.embed_dim);
                for (size_t i = 0; i < p->w.size(); ++i) p->w[i] = dst[i];
                rep.pos_resampled = true;
            }
        } else {
            if (t.dims != p->dims)
                throw DataError("checkpoint tensor '" + t.name + "' has dims " + dims_text(t.dims) +
                                " but the model expects " + dims_text(p->dims));
            for (size_t i = 0; i < p->w.size(); ++i) p->w[i] = t.values[i];
        }
        rep.loaded.push_back(t.name);
        loaded_names.insert(t.name);
    }

    if (rep.loaded.empty())
        throw DataError("checkpoint provides no image encoder tensors usable for surgery");
    for (const auto& p : model.params())
        if (!loaded_names.count(p.name)) rep.fresh.push_back(p.name);
    if (report) *report = rep;
    return model;
}

} // namespace callosum
