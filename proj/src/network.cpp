#include "micd/network.hpp"

#include "micd/error.hpp"
#include "micd/rng.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace micd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

constexpr double kNormEps = 1e-5;
constexpr int kLevels = 4;

enum class Kind { Conv3, Down, Up };

struct BlockSpec {
    const char* name;
    Kind kind;
    int cin;
    int cout;
};

// Block order is also the parameter order: three tensors per block, then the head.
enum Block : std::size_t {
    kEnc1, kDown1, kEnc2, kDown2, kEnc3, kDown3, kEnc4,
    kDec4, kUp3, kDec3, kUp2, kDec2, kUp1, kDec1,
    kNumBlocks
};

std::array<BlockSpec, kNumBlocks> block_specs(const NetworkConfig& cfg)
{
    const int b = cfg.base_channels;
    return {{
        {"enc1", Kind::Conv3, cfg.in_channels, b},
        {"down1", Kind::Down, b, 2 * b},
        {"enc2", Kind::Conv3, 2 * b, 2 * b},
        {"down2", Kind::Down, 2 * b, 4 * b},
        {"enc3", Kind::Conv3, 4 * b, 4 * b},
        {"down3", Kind::Down, 4 * b, 8 * b},
        {"enc4", Kind::Conv3, 8 * b, 8 * b},
        {"dec4", Kind::Conv3, 8 * b, 8 * b},
        {"up3", Kind::Up, 8 * b, 4 * b},
        {"dec3", Kind::Conv3, 8 * b, 4 * b},
        {"up2", Kind::Up, 4 * b, 2 * b},
        {"dec2", Kind::Conv3, 4 * b, 2 * b},
        {"up1", Kind::Up, 2 * b, b},
        {"dec1", Kind::Conv3, 2 * b, b},
    }};
}

constexpr std::size_t weight_index(std::size_t block) { return 3 * block; }
constexpr std::size_t gamma_index(std::size_t block) { return 3 * block + 1; }
constexpr std::size_t beta_index(std::size_t block) { return 3 * block + 2; }
constexpr std::size_t kHeadWeight = 3 * kNumBlocks;
constexpr std::size_t kHeadBias = 3 * kNumBlocks + 1;

std::vector<int> weight_shape(const BlockSpec& s)
{
    switch (s.kind) {
    case Kind::Conv3:
        return {3, 3, 3, s.cin, s.cout};
    case Kind::Down:
        return {2, 2, 2, s.cin, s.cout};
    case Kind::Up:
        return {s.cin, 2, 2, 2, s.cout};
    }
    return {};
}

std::size_t shape_numel(const std::vector<int>& shape)
{
    std::size_t n = 1;
    for (int d : shape)
        n *= static_cast<std::size_t>(d);
    return n;
}

Dims half(Dims d) { return {d.d / 2, d.h / 2, d.w / 2}; }
Dims twice(Dims d) { return {d.d * 2, d.h * 2, d.w * 2}; }

// ---- 3x3x3 convolution, zero padding 1, no bias -------------------------------
//
// Input and output are embedded in a one-voxel zero border. On the padded grid a
// tap is a constant flat offset, so every tap is one GEMM over a contiguous
// range of padded voxels. Border positions inside the range are computed and
// thrown away.

struct PaddedGrid {
    Dims inner;
    int pd, ph, pw;
    std::size_t lo, count;

    explicit PaddedGrid(Dims d) : inner(d), pd(d.d + 2), ph(d.h + 2), pw(d.w + 2)
    {
        lo = static_cast<std::size_t>(ph * pw + pw + 1);
        const std::size_t hi = (static_cast<std::size_t>(d.d) * ph + static_cast<std::size_t>(d.h)) * pw +
                               static_cast<std::size_t>(d.w) + 1;
        count = hi - lo;
    }
    std::size_t total() const { return static_cast<std::size_t>(pd) * ph * pw; }
    std::ptrdiff_t offset(int dz, int dy, int dx) const
    {
        return static_cast<std::ptrdiff_t>(dz) * ph * pw + static_cast<std::ptrdiff_t>(dy) * pw + dx;
    }

    std::vector<double> embed(std::span<const double> src, int ch) const
    {
        std::vector<double> buf(total() * static_cast<std::size_t>(ch), 0.0);
        const auto row = static_cast<std::size_t>(inner.w) * ch;
        for (int z = 0; z < inner.d; ++z) {
            for (int y = 0; y < inner.h; ++y) {
                const std::size_t s = inner.index(z, y, 0) * ch;
                const std::size_t t = ((static_cast<std::size_t>(z + 1) * ph + static_cast<std::size_t>(y + 1)) * pw + 1) * ch;
                std::copy_n(src.data() + s, row, buf.data() + t);
            }
        }
        return buf;
    }

    void extract(const std::vector<double>& buf, int ch, std::span<double> dst) const
    {
        const auto row = static_cast<std::size_t>(inner.w) * ch;
        for (int z = 0; z < inner.d; ++z) {
            for (int y = 0; y < inner.h; ++y) {
                const std::size_t s = ((static_cast<std::size_t>(z + 1) * ph + static_cast<std::size_t>(y + 1)) * pw + 1) * ch;
                std::copy_n(buf.data() + s, row, dst.data() + inner.index(z, y, 0) * ch);
            }
        }
    }
};

void conv3_forward(const FeatureMap& in, const std::vector<double>& w, int cout, FeatureMap& out)
{
    const int cin = in.channels;
    const PaddedGrid g(in.dims);
    const auto in_pad = g.embed(in.data, cin);
    std::vector<double> out_pad(g.total() * static_cast<std::size_t>(cout), 0.0);
    const auto n = static_cast<Eigen::Index>(g.count);

    MatMap o(out_pad.data() + g.lo * cout, n, cout);
    int t = 0;
    for (int dz = -1; dz <= 1; ++dz) {
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx, ++t) {
                const auto src = static_cast<std::ptrdiff_t>(g.lo) + g.offset(dz, dy, dx);
                ConstMatMap x(in_pad.data() + src * cin, n, cin);
                ConstMatMap wt(w.data() + static_cast<std::size_t>(t) * cin * cout, cin, cout);
                o.noalias() += x * wt;
            }
        }
    }
    out = FeatureMap::zeros(in.dims, cout);
    g.extract(out_pad, cout, out.data);
}

void conv3_backward(const FeatureMap& in, const std::vector<double>& w, int cout, std::span<const double> grad_out,
                    std::vector<double>& grad_w, std::vector<double>* grad_in)
{
    const int cin = in.channels;
    const PaddedGrid g(in.dims);
    const auto in_pad = g.embed(in.data, cin);
    const auto gout_pad = g.embed(grad_out, cout);
    std::vector<double> gin_pad;
    if (grad_in)
        gin_pad.assign(g.total() * static_cast<std::size_t>(cin), 0.0);
    const auto n = static_cast<Eigen::Index>(g.count);

    ConstMatMap go(gout_pad.data() + g.lo * cout, n, cout);
    int t = 0;
    for (int dz = -1; dz <= 1; ++dz) {
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx, ++t) {
                const auto src = static_cast<std::ptrdiff_t>(g.lo) + g.offset(dz, dy, dx);
                const std::size_t wofs = static_cast<std::size_t>(t) * cin * cout;
                ConstMatMap x(in_pad.data() + src * cin, n, cin);
                MatMap gw(grad_w.data() + wofs, cin, cout);
                gw.noalias() += x.transpose() * go;
                if (grad_in) {
                    ConstMatMap wt(w.data() + wofs, cin, cout);
                    MatMap gx(gin_pad.data() + src * cin, n, cin);
                    gx.noalias() += go * wt.transpose();
                }
            }
        }
    }
    if (grad_in) {
        grad_in->assign(in.dims.voxels() * static_cast<std::size_t>(cin), 0.0);
        g.extract(gin_pad, cin, *grad_in);
    }
}


// ---- 2x2x2 stride-2 convolution (down) and its transpose (up) -----------------
//
// Both are a permutation between a fine grid and "8 sub-voxels per coarse voxel"
// columns, followed by a GEMM.

// fine (channels ch) <-> coarse columns (8 * ch), tap t = (a * 2 + b) * 2 + c.
template <typename F>
void for_each_subvoxel(Dims coarse, F&& f)
{
    const Dims fine = twice(coarse);
    for (int z = 0; z < coarse.d; ++z)
        for (int y = 0; y < coarse.h; ++y)
            for (int x = 0; x < coarse.w; ++x) {
                const std::size_t cv = coarse.index(z, y, x);
                int t = 0;
                for (int a = 0; a < 2; ++a)
                    for (int b = 0; b < 2; ++b)
                        for (int c = 0; c < 2; ++c, ++t)
                            f(cv, t, fine.index(2 * z + a, 2 * y + b, 2 * x + c));
            }
}

std::vector<double> fine_to_columns(std::span<const double> fine, Dims coarse, int ch)
{
    std::vector<double> cols(coarse.voxels() * 8 * static_cast<std::size_t>(ch));
    for_each_subvoxel(coarse, [&](std::size_t cv, int t, std::size_t fv) {
        std::copy_n(fine.data() + fv * ch, ch, cols.data() + (cv * 8 + static_cast<std::size_t>(t)) * ch);
    });
    return cols;
}

void columns_to_fine(const std::vector<double>& cols, Dims coarse, int ch, std::span<double> fine)
{
    for_each_subvoxel(coarse, [&](std::size_t cv, int t, std::size_t fv) {
        std::copy_n(cols.data() + (cv * 8 + static_cast<std::size_t>(t)) * ch, ch, fine.data() + fv * ch);
    });
}

void down_forward(const FeatureMap& in, const std::vector<double>& w, int cout, FeatureMap& out)
{
    const int cin = in.channels;
    const Dims coarse = half(in.dims);
    const auto cols = fine_to_columns(in.data, coarse, cin);
    out = FeatureMap::zeros(coarse, cout);
    const auto n = static_cast<Eigen::Index>(coarse.voxels());
    MatMap(out.data.data(), n, cout).noalias() =
        ConstMatMap(cols.data(), n, 8 * cin) * ConstMatMap(w.data(), 8 * cin, cout);
}

void down_backward(const FeatureMap& in, const std::vector<double>& w, int cout, std::span<const double> grad_out,
                   std::vector<double>& grad_w, std::vector<double>& grad_in)
{
    const int cin = in.channels;
    const Dims coarse = half(in.dims);
    const auto cols = fine_to_columns(in.data, coarse, cin);
    const auto n = static_cast<Eigen::Index>(coarse.voxels());
    ConstMatMap go(grad_out.data(), n, cout);
    MatMap(grad_w.data(), 8 * cin, cout).noalias() += ConstMatMap(cols.data(), n, 8 * cin).transpose() * go;
    std::vector<double> gcols(cols.size());
    MatMap(gcols.data(), n, 8 * cin).noalias() = go * ConstMatMap(w.data(), 8 * cin, cout).transpose();
    grad_in.assign(in.data.size(), 0.0);
    columns_to_fine(gcols, coarse, cin, grad_in);
}

void up_forward(const FeatureMap& in, const std::vector<double>& w, int cout, FeatureMap& out)
{
    const int cin = in.channels;
    const auto n = static_cast<Eigen::Index>(in.dims.voxels());
    std::vector<double> cols(static_cast<std::size_t>(n) * 8 * cout);
    MatMap(cols.data(), n, 8 * cout).noalias() =
        ConstMatMap(in.data.data(), n, cin) * ConstMatMap(w.data(), cin, 8 * cout);
    out = FeatureMap::zeros(twice(in.dims), cout);
    columns_to_fine(cols, in.dims, cout, out.data);
}

void up_backward(const FeatureMap& in, const std::vector<double>& w, int cout, std::span<const double> grad_out,
                 std::vector<double>& grad_w, std::vector<double>& grad_in)
{
    const int cin = in.channels;
    const auto n = static_cast<Eigen::Index>(in.dims.voxels());
    const auto gcols = fine_to_columns(grad_out, in.dims, cout);
    ConstMatMap gc(gcols.data(), n, 8 * cout);
    MatMap(grad_w.data(), cin, 8 * cout).noalias() += ConstMatMap(in.data.data(), n, cin).transpose() * gc;
    grad_in.assign(in.data.size(), 0.0);
    MatMap(grad_in.data(), n, cin).noalias() = gc * ConstMatMap(w.data(), cin, 8 * cout).transpose();
}

// ---- instance norm + ELU -------------------------------------------------------

// Normalizes `pre` in place into the block output; statistics per channel over
// the spatial extent of this single image.
void norm_elu_forward(FeatureMap& pre, const std::vector<double>& gamma, const std::vector<double>& beta,
                      ForwardCache::Block& blk)
{
    const int ch = pre.channels;
    const std::size_t n = pre.dims.voxels();
    std::vector<double> mean(ch, 0.0), var(ch, 0.0);
    for (std::size_t v = 0; v < n; ++v)
        for (int c = 0; c < ch; ++c)
            mean[c] += pre.data[v * ch + c];
    for (int c = 0; c < ch; ++c)
        mean[c] /= static_cast<double>(n);
    for (std::size_t v = 0; v < n; ++v)
        for (int c = 0; c < ch; ++c) {
            const double d = pre.data[v * ch + c] - mean[c];
            var[c] += d * d;
        }
    blk.inv_std.resize(ch);
    for (int c = 0; c < ch; ++c)
        blk.inv_std[c] = 1.0 / std::sqrt(var[c] / static_cast<double>(n) + kNormEps);

    blk.xhat.resize(pre.data.size());
    for (std::size_t v = 0; v < n; ++v)
        for (int c = 0; c < ch; ++c) {
            const std::size_t i = v * ch + c;
            const double xh = (pre.data[i] - mean[c]) * blk.inv_std[c];
            blk.xhat[i] = xh;
            const double z = gamma[c] * xh + beta[c];
            pre.data[i] = z > 0.0 ? z : std::expm1(z);
        }
}

// grad_y: dL/d(block output). Returns dL/d(pre-norm activations).
std::vector<double> norm_elu_backward(const ForwardCache::Block& blk, const std::vector<double>& gamma,
                                      std::span<const double> grad_y, std::vector<double>& grad_gamma,
                                      std::vector<double>& grad_beta)
{
    const int ch = blk.output.channels;
    const std::size_t n = blk.output.dims.voxels();
    std::vector<double> dxhat(grad_y.size());
    std::vector<double> sum_d(ch, 0.0), sum_dx(ch, 0.0);
    for (std::size_t v = 0; v < n; ++v)
        for (int c = 0; c < ch; ++c) {
            const std::size_t i = v * ch + c;
            const double y = blk.output.data[i];
            const double dz = grad_y[i] * (y > 0.0 ? 1.0 : y + 1.0);
            grad_gamma[c] += dz * blk.xhat[i];
            grad_beta[c] += dz;
            dxhat[i] = dz * gamma[c];
            sum_d[c] += dxhat[i];
            sum_dx[c] += dxhat[i] * blk.xhat[i];
        }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t v = 0; v < n; ++v)
        for (int c = 0; c < ch; ++c) {
            const std::size_t i = v * ch + c;
            dxhat[i] = blk.inv_std[c] * (dxhat[i] - inv_n * sum_d[c] - inv_n * blk.xhat[i] * sum_dx[c]);
        }
    return dxhat;
}

FeatureMap concat_channels(const FeatureMap& a, const FeatureMap& b)
{
    FeatureMap out = FeatureMap::zeros(a.dims, a.channels + b.channels);
    for (std::size_t v = 0; v < a.dims.voxels(); ++v) {
        std::copy_n(a.data.data() + v * a.channels, a.channels, out.data.data() + v * out.channels);
        std::copy_n(b.data.data() + v * b.channels, b.channels, out.data.data() + v * out.channels + a.channels);
    }
    return out;
}

void split_channels(std::span<const double> g, Dims dims, int ca, int cb, std::vector<double>& ga, std::vector<double>& gb)
{
    ga.assign(dims.voxels() * ca, 0.0);
    gb.assign(dims.voxels() * cb, 0.0);
    const int ct = ca + cb;
    for (std::size_t v = 0; v < dims.voxels(); ++v) {
        std::copy_n(g.data() + v * ct, ca, ga.data() + v * ca);
        std::copy_n(g.data() + v * ct + ca, cb, gb.data() + v * cb);
    }
}

void add_into(std::vector<double>& dst, std::span<const double> src)
{
    if (src.empty())
        return;
    if (dst.empty()) {
        dst.assign(src.begin(), src.end());
        return;
    }
    for (std::size_t i = 0; i < dst.size(); ++i)
        dst[i] += src[i];
}

const std::vector<double>& values(const ParamVector& p, std::size_t i) { return p.tensors[i].values; }

void run_block(const ParamVector& params, std::size_t idx, const BlockSpec& spec, FeatureMap input,
               ForwardCache::Block& blk)
{
    FeatureMap pre;
    switch (spec.kind) {
    case Kind::Conv3:
        conv3_forward(input, values(params, weight_index(idx)), spec.cout, pre);
        break;
    case Kind::Down:
        down_forward(input, values(params, weight_index(idx)), spec.cout, pre);
        break;
    case Kind::Up:
        up_forward(input, values(params, weight_index(idx)), spec.cout, pre);
        break;
    }
    norm_elu_forward(pre, values(params, gamma_index(idx)), values(params, beta_index(idx)), blk);
    blk.output = std::move(pre);
    blk.input = std::move(input);
}

// Returns dL/d(block input).
std::vector<double> block_backward(const ParamVector& params, std::size_t idx, const BlockSpec& spec,
                                   const ForwardCache::Block& blk, std::span<const double> grad_y, ParamVector& grad,
                                   bool need_input_grad)
{
    auto dpre = norm_elu_backward(blk, values(params, gamma_index(idx)), grad_y, grad.tensors[gamma_index(idx)].values,
                                  grad.tensors[beta_index(idx)].values);
    std::vector<double> gin;
    auto& gw = grad.tensors[weight_index(idx)].values;
    const auto& w = values(params, weight_index(idx));
    switch (spec.kind) {
    case Kind::Conv3:
        conv3_backward(blk.input, w, spec.cout, dpre, gw, need_input_grad ? &gin : nullptr);
        break;
    case Kind::Down:
        down_backward(blk.input, w, spec.cout, dpre, gw, gin);
        break;
    case Kind::Up:
        up_backward(blk.input, w, spec.cout, dpre, gw, gin);
        break;
    }
    return gin;
}

std::string padding_hint(Dims d)
{
    auto pad = [](int n) { return (8 - n % 8) % 8; };
    std::ostringstream os;
    os << "input dims " << to_string(d) << " must be multiples of 8 on every axis; pad by (" << pad(d.d) << ", "
       << pad(d.h) << ", " << pad(d.w) << ") voxels to " << to_string({d.d + pad(d.d), d.h + pad(d.h), d.w + pad(d.w)});
    return os.str();
}

void check_params(const ParamVector& params)
{
    params.config.validate();
    const auto specs = block_specs(params.config);
    if (params.tensors.size() != 3 * kNumBlocks + 2)
        throw ShapeError("parameter vector has " + std::to_string(params.tensors.size()) + " tensors, expected " +
                         std::to_string(3 * kNumBlocks + 2));
    for (std::size_t i = 0; i < kNumBlocks; ++i) {
        if (params.tensors[weight_index(i)].numel() != shape_numel(weight_shape(specs[i])))
            throw ShapeError(std::string("parameter shape mismatch in block ") + specs[i].name);
    }
}

} // namespace

void NetworkConfig::validate() const
{
    if (in_channels != 1)
        throw Error("network in_channels must be 1");
    if (num_classes < 2 || num_classes > 256)
        throw Error("network num_classes must be in [2, 256]");
    if (base_channels < 1)
        throw Error("network base_channels must be >= 1");
}

std::size_t ParamVector::numel() const noexcept
{
    std::size_t n = 0;
    for (const auto& t : tensors)
        n += t.numel();
    return n;
}

const NamedTensor* ParamVector::find(const std::string& name) const
{
    for (const auto& t : tensors)
        if (t.name == name)
            return &t;
    return nullptr;
}

bool ParamVector::same_layout(const ParamVector& other) const
{
    if (!(config == other.config) || tensors.size() != other.tensors.size())
        return false;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (tensors[i].name != other.tensors[i].name || tensors[i].shape != other.tensors[i].shape ||
            tensors[i].values.size() != other.tensors[i].values.size())
            return false;
    }
    return true;
}

ParamVector ParamVector::zeros_like() const
{
    ParamVector z = *this;
    for (auto& t : z.tensors)
        std::fill(t.values.begin(), t.values.end(), 0.0);
    return z;
}

double& ParamVector::flat(std::size_t i)
{
    for (auto& t : tensors) {
        if (i < t.numel())
            return t.values[i];
        i -= t.numel();
    }
    throw Error("flat parameter index out of range");
}

double ParamVector::flat(std::size_t i) const
{
    return const_cast<ParamVector&>(*this).flat(i);
}

void ParamVector::axpy(double scale, const ParamVector& other)
{
    if (!same_layout(other))
        throw ShapeError("axpy: parameter layouts differ");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        auto& dst = tensors[i].values;
        const auto& src = other.tensors[i].values;
        for (std::size_t j = 0; j < dst.size(); ++j)
            dst[j] += scale * src[j];
    }
}

OutputGrad OutputGrad::zeros_like(const ForwardOutput& out)
{
    OutputGrad g;
    g.logits.assign(out.logits.size(), 0.0);
    for (int k = 0; k < kDecoderStages; ++k)
        g.features[k].assign(out.decoder_features[k].size(), 0.0);
    return g;
}

ParamVector init_network(const NetworkConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    ParamVector p;
    p.config = cfg;
    Rng rng(derive_seed(seed, "network-init"));
    for (const auto& s : block_specs(cfg)) {
        const auto shape = weight_shape(s);
        const int fan_in = s.kind == Kind::Conv3 ? 27 * s.cin : s.kind == Kind::Down ? 8 * s.cin : s.cin;
        const double stddev = std::sqrt(2.0 / fan_in);
        NamedTensor w{std::string(s.name) + ".weight", shape, std::vector<double>(shape_numel(shape))};
        for (auto& v : w.values)
            v = stddev * rng.normal();
        p.tensors.push_back(std::move(w));
        p.tensors.push_back({std::string(s.name) + ".gamma", {s.cout}, std::vector<double>(s.cout, 1.0)});
        p.tensors.push_back({std::string(s.name) + ".beta", {s.cout}, std::vector<double>(s.cout, 0.0)});
    }
    const int b = cfg.base_channels;
    NamedTensor hw{"head.weight", {b, cfg.num_classes}, std::vector<double>(static_cast<std::size_t>(b) * cfg.num_classes)};
    const double stddev = std::sqrt(1.0 / b);
    for (auto& v : hw.values)
        v = stddev * rng.normal();
    p.tensors.push_back(std::move(hw));
    p.tensors.push_back({"head.bias", {cfg.num_classes}, std::vector<double>(cfg.num_classes, 0.0)});
    return p;
}

ForwardOutput forward(const ParamVector& params, const Volume& x)
{
    ForwardCache cache;
    return forward(params, x, cache);
}

ForwardOutput forward(const ParamVector& params, const Volume& x, ForwardCache& cache)
{
    check_params(params);
    if (!x.dims.positive() || x.data.size() != x.dims.voxels())
        throw ShapeError("forward: malformed input volume");
    if (x.dims.d % 8 || x.dims.h % 8 || x.dims.w % 8)
        throw ShapeError(padding_hint(x.dims));

    const auto specs = block_specs(params.config);
    cache.blocks.assign(kNumBlocks, {});
    auto& B = cache.blocks;

    FeatureMap in = FeatureMap::zeros(x.dims, 1);
    std::copy(x.data.begin(), x.data.end(), in.data.begin());

    run_block(params, kEnc1, specs[kEnc1], std::move(in), B[kEnc1]);
    run_block(params, kDown1, specs[kDown1], B[kEnc1].output, B[kDown1]);
    run_block(params, kEnc2, specs[kEnc2], B[kDown1].output, B[kEnc2]);
    run_block(params, kDown2, specs[kDown2], B[kEnc2].output, B[kDown2]);
    run_block(params, kEnc3, specs[kEnc3], B[kDown2].output, B[kEnc3]);
    run_block(params, kDown3, specs[kDown3], B[kEnc3].output, B[kDown3]);
    run_block(params, kEnc4, specs[kEnc4], B[kDown3].output, B[kEnc4]);
    run_block(params, kDec4, specs[kDec4], B[kEnc4].output, B[kDec4]);
    run_block(params, kUp3, specs[kUp3], B[kDec4].output, B[kUp3]);
    run_block(params, kDec3, specs[kDec3], concat_channels(B[kUp3].output, B[kEnc3].output), B[kDec3]);
    run_block(params, kUp2, specs[kUp2], B[kDec3].output, B[kUp2]);
    run_block(params, kDec2, specs[kDec2], concat_channels(B[kUp2].output, B[kEnc2].output), B[kDec2]);
    run_block(params, kUp1, specs[kUp1], B[kDec2].output, B[kUp1]);
    run_block(params, kDec1, specs[kDec1], concat_channels(B[kUp1].output, B[kEnc1].output), B[kDec1]);

    ForwardOutput out;
    const std::array<std::size_t, kDecoderStages> taps{kDec1, kDec2, kDec3, kDec4};
    for (int k = 0; k < kDecoderStages; ++k) {
        out.decoder_features[k] = B[taps[k]].output;
        out.decoder_features[k].stage = k + 1;
    }

    const int b = params.config.base_channels;
    const int c = params.config.num_classes;
    const auto n = static_cast<Eigen::Index>(x.dims.voxels());
    out.logits = FeatureMap::zeros(x.dims, c);
    MatMap logits(out.logits.data.data(), n, c);
    logits.noalias() = ConstMatMap(B[kDec1].output.data.data(), n, b) * ConstMatMap(values(params, kHeadWeight).data(), b, c);
    const Eigen::Map<const Eigen::RowVectorXd> bias(values(params, kHeadBias).data(), c);
    logits.rowwise() += bias;
    return out;
}

void backward(const ParamVector& params, const ForwardCache& cache, const OutputGrad& grad_out, ParamVector& grad)
{
    check_params(params);
    if (cache.blocks.size() != kNumBlocks)
        throw Error("backward: forward cache is empty");
    if (!grad.same_layout(params))
        throw ShapeError("backward: gradient layout differs from parameters");

    const auto specs = block_specs(params.config);
    const auto& B = cache.blocks;
    const int b = params.config.base_channels;
    const int c = params.config.num_classes;
    const Dims full = B[kDec1].output.dims;
    const auto n = static_cast<Eigen::Index>(full.voxels());

    // Output gradient per block, accumulated from consumers.
    std::array<std::vector<double>, kNumBlocks> gy;

    if (!grad_out.logits.empty()) {
        if (grad_out.logits.size() != static_cast<std::size_t>(n) * c)
            throw ShapeError("backward: logit gradient length mismatch");
        ConstMatMap gl(grad_out.logits.data(), n, c);
        MatMap(grad.tensors[kHeadWeight].values.data(), b, c).noalias() +=
            ConstMatMap(B[kDec1].output.data.data(), n, b).transpose() * gl;
        Eigen::Map<Eigen::RowVectorXd>(grad.tensors[kHeadBias].values.data(), c) += gl.colwise().sum();
        gy[kDec1].assign(static_cast<std::size_t>(n) * b, 0.0);
        MatMap(gy[kDec1].data(), n, b).noalias() = gl * ConstMatMap(values(params, kHeadWeight).data(), b, c).transpose();
    }
    const std::array<std::size_t, kDecoderStages> taps{kDec1, kDec2, kDec3, kDec4};
    for (int k = 0; k < kDecoderStages; ++k) {
        const auto& g = grad_out.features[k];
        if (g.empty())
            continue;
        if (g.size() != B[taps[k]].output.size())
            throw ShapeError("backward: feature gradient length mismatch at stage " + std::to_string(k + 1));
        add_into(gy[taps[k]], g);
    }

    auto zero_if_empty = [&](std::size_t i) {
        if (gy[i].empty())
            gy[i].assign(B[i].output.size(), 0.0);
    };

    // Decoder with skip splits: dec_k input = [up output | encoder output].
    struct Stage {
        std::size_t dec, up, skip, below;
    };
    const std::array<Stage, 3> stages{{{kDec1, kUp1, kEnc1, kDec2}, {kDec2, kUp2, kEnc2, kDec3}, {kDec3, kUp3, kEnc3, kDec4}}};
    for (const auto& s : stages) {
        zero_if_empty(s.dec);
        const auto gin = block_backward(params, s.dec, specs[s.dec], B[s.dec], gy[s.dec], grad, true);
        std::vector<double> g_up, g_skip;
        split_channels(gin, B[s.dec].input.dims, B[s.up].output.channels, B[s.skip].output.channels, g_up, g_skip);
        add_into(gy[s.skip], g_skip);
        const auto g_below = block_backward(params, s.up, specs[s.up], B[s.up], g_up, grad, true);
        add_into(gy[s.below], g_below);
    }

    zero_if_empty(kDec4);
    add_into(gy[kEnc4], block_backward(params, kDec4, specs[kDec4], B[kDec4], gy[kDec4], grad, true));
    add_into(gy[kDown3], block_backward(params, kEnc4, specs[kEnc4], B[kEnc4], gy[kEnc4], grad, true));
    add_into(gy[kEnc3], block_backward(params, kDown3, specs[kDown3], B[kDown3], gy[kDown3], grad, true));
    add_into(gy[kDown2], block_backward(params, kEnc3, specs[kEnc3], B[kEnc3], gy[kEnc3], grad, true));
    add_into(gy[kEnc2], block_backward(params, kDown2, specs[kDown2], B[kDown2], gy[kDown2], grad, true));
    add_into(gy[kDown1], block_backward(params, kEnc2, specs[kEnc2], B[kEnc2], gy[kEnc2], grad, true));
    add_into(gy[kEnc1], block_backward(params, kDown1, specs[kDown1], B[kDown1], gy[kDown1], grad, true));
    block_backward(params, kEnc1, specs[kEnc1], B[kEnc1], gy[kEnc1], grad, false);
}

GradientResult gradients(const ParamVector& params, const Volume& x, const OutputLoss& output_loss,
                         const ParamLoss& param_loss)
{
    GradientResult r{0.0, params.zeros_like()};
    if (output_loss) {
        ForwardCache cache;
        const auto out = forward(params, x, cache);
        auto g = OutputGrad::zeros_like(out);
        const double value = output_loss(out, g);
        if (!std::isfinite(value))
            throw NumericError("gradients: loss is not finite");
        r.loss += value;
        backward(params, cache, g, r.grad);
    }
    if (param_loss) {
        auto g = params.zeros_like();
        const double value = param_loss(params, g);
        if (!std::isfinite(value))
            throw NumericError("gradients: parameter loss is not finite");
        r.loss += value;
        r.grad.axpy(1.0, g);
    }
    return r;
}

} // namespace micd
