#include "micd/data.hpp"

#include "micd/error.hpp"
#include "micd/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace micd {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'M', 'V', 'O', 'L'};

class ByteWriter {
public:
    void u16(std::uint16_t v)
    {
        bytes.push_back(static_cast<std::uint8_t>(v));
        bytes.push_back(static_cast<std::uint8_t>(v >> 8));
    }
    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i)
            bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

    std::vector<std::uint8_t> bytes;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}

    std::uint16_t u16()
    {
        need(2, "u16");
        const auto v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32()
    {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) const
    {
        if (pos_ + n > bytes_.size())
            throw FormatError(std::string("volume file truncated reading ") + what + " at offset " + std::to_string(pos_));
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

ByteWriter header(VoxelType type, Dims dims, Spacing spacing)
{
    if (!dims.positive())
        throw ShapeError("cannot encode volume with dims " + to_string(dims));
    ByteWriter w;
    w.bytes.insert(w.bytes.end(), std::begin(kMagic), std::end(kMagic));
    w.u16(kVolumeFileVersion);
    w.u16(static_cast<std::uint16_t>(type));
    w.u32(static_cast<std::uint32_t>(dims.d));
    w.u32(static_cast<std::uint32_t>(dims.h));
    w.u32(static_cast<std::uint32_t>(dims.w));
    w.f32(spacing.z);
    w.f32(spacing.y);
    w.f32(spacing.x);
    return w;
}

std::vector<std::uint8_t> read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes)
{
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw FormatError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw FormatError("write failed for " + path.string());
}

} // namespace

std::vector<std::uint8_t> encode_volume(const Volume& v)
{
    v.validate();
    auto w = header(VoxelType::F32Image, v.dims, v.spacing);
    w.bytes.reserve(kVolumeHeaderBytes + 4 * v.data.size());
    for (float x : v.data)
        w.f32(x);
    return std::move(w.bytes);
}

std::vector<std::uint8_t> encode_volume(const LabelMap& y, Spacing spacing)
{
    y.validate();
    auto w = header(VoxelType::U8Label, y.dims, spacing);
    w.bytes.insert(w.bytes.end(), y.data.begin(), y.data.end());
    return std::move(w.bytes);
}

DecodedVolume decode_volume(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
        throw FormatError("bad magic at offset 0: expected \"MVOL\"");
    ByteReader r(bytes.subspan(4));
    const auto version = r.u16();
    if (version != kVolumeFileVersion)
        throw FormatError("unsupported volume file version " + std::to_string(version) + " at offset 4");
    const auto dtype = r.u16();
    Dims dims;
    dims.d = static_cast<int>(r.u32());
    dims.h = static_cast<int>(r.u32());
    dims.w = static_cast<int>(r.u32());
    Spacing spacing;
    spacing.z = r.f32();
    spacing.y = r.f32();
    spacing.x = r.f32();
    if (!dims.positive())
        throw FormatError("non-positive dims " + to_string(dims) + " at offset 8");
    if (!(spacing.z > 0 && spacing.y > 0 && spacing.x > 0))
        throw FormatError("non-positive spacing at offset 20");

    std::size_t elem = 0;
    if (dtype == static_cast<std::uint16_t>(VoxelType::F32Image))
        elem = 4;
    else if (dtype == static_cast<std::uint16_t>(VoxelType::U8Label))
        elem = 1;
    else
        throw FormatError("unknown dtype code " + std::to_string(dtype) + " at offset 6");

    const std::size_t expected = dims.voxels() * elem;
    if (r.remaining() != expected)
        throw FormatError("payload at offset " + std::to_string(kVolumeHeaderBytes) + " has " +
                          std::to_string(r.remaining()) + " bytes, expected " + std::to_string(expected));

    if (elem == 4) {
        Volume v = Volume::zeros(dims, spacing);
        for (auto& x : v.data)
            x = r.f32();
        v.validate();
        return {std::move(v), spacing};
    }
    LabelMap y = LabelMap::zeros(dims, 2);
    std::copy(bytes.begin() + kVolumeHeaderBytes, bytes.end(), y.data.begin());
    const int max_label = y.data.empty() ? 0 : *std::max_element(y.data.begin(), y.data.end());
    y.num_classes = std::max(2, max_label + 1);
    return {std::move(y), spacing};
}

void write_volume(const fs::path& path, const Volume& v) { write_file(path, encode_volume(v)); }

void write_volume(const fs::path& path, const LabelMap& y, Spacing spacing) { write_file(path, encode_volume(y, spacing)); }

DecodedVolume read_volume(const fs::path& path)
{
    const auto bytes = read_file(path);
    try {
        return decode_volume(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

Volume read_image(const fs::path& path)
{
    auto d = read_volume(path);
    if (!std::holds_alternative<Volume>(d.value))
        throw FormatError(path.string() + ": expected an f32 image volume");
    return std::get<Volume>(std::move(d.value));
}

LabelMap read_label(const fs::path& path, int num_classes)
{
    auto d = read_volume(path);
    if (!std::holds_alternative<LabelMap>(d.value))
        throw FormatError(path.string() + ": expected a u8 label volume");
    auto y = std::get<LabelMap>(std::move(d.value));
    if (y.num_classes > num_classes)
        throw FormatError(path.string() + ": contains label " + std::to_string(y.num_classes - 1) + " but only " +
                          std::to_string(num_classes) + " classes are configured");
    y.num_classes = num_classes;
    return y;
}

// ---- manifest ----

std::string to_string(SplitTag tag)
{
    switch (tag) {
    case SplitTag::Labeled:
        return "labeled";
    case SplitTag::Unlabeled:
        return "unlabeled";
    case SplitTag::Val:
        return "val";
    }
    return "?";
}

SplitTag parse_split_tag(const std::string& s)
{
    if (s == "labeled")
        return SplitTag::Labeled;
    if (s == "unlabeled")
        return SplitTag::Unlabeled;
    if (s == "val")
        return SplitTag::Val;
    throw FormatError("unknown split tag '" + s + "'");
}

void SplitManifest::validate() const
{
    std::set<std::string> train_images, val_images;
    for (const auto& e : entries) {
        if (e.image.empty())
            throw FormatError("manifest entry with empty image path");
        if ((e.tag == SplitTag::Labeled || e.tag == SplitTag::Val) && !e.label)
            throw FormatError("manifest entry '" + e.image + "' tagged " + to_string(e.tag) + " has no label");
        auto& bucket = e.tag == SplitTag::Val ? val_images : train_images;
        if (!bucket.insert(e.image).second)
            throw FormatError("manifest lists '" + e.image + "' twice");
    }
    for (const auto& img : train_images) {
        if (val_images.count(img))
            throw FormatError("image '" + img + "' appears in both train and val splits");
    }
}

std::size_t SplitManifest::count(SplitTag tag) const
{
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [tag](const ManifestEntry& e) { return e.tag == tag; }));
}

fs::path SplitManifest::resolve(const std::string& p) const
{
    const fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
}

SplitManifest read_manifest(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw FormatError("cannot open manifest " + path.string());
    SplitManifest m;
    m.base_dir = path.parent_path();
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty() || line[0] == '#')
            continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, '\t'))
            fields.push_back(f);
        if (fields.size() < 2 || fields.size() > 3)
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected <tag>\\t<image>\\t[label]");
        ManifestEntry e;
        try {
            e.tag = parse_split_tag(fields[0]);
        } catch (const FormatError& err) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + err.what());
        }
        e.image = fields[1];
        if (fields.size() == 3 && !fields[2].empty())
            e.label = fields[2];
        m.entries.push_back(std::move(e));
    }
    m.validate();
    return m;
}

void write_manifest(const fs::path& path, const SplitManifest& manifest)
{
    manifest.validate();
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw FormatError("cannot open " + path.string() + " for writing");
    for (const auto& e : manifest.entries) {
        out << to_string(e.tag) << '\t' << e.image;
        if (e.label)
            out << '\t' << *e.label;
        out << '\n';
    }
    if (!out)
        throw FormatError("write failed for " + path.string());
}

SplitManifest split_dataset(const SplitManifest& manifest, double labeled_fraction, std::uint64_t seed)
{
    if (!(labeled_fraction > 0.0 && labeled_fraction < 1.0))
        throw Error("labeled fraction must lie in (0, 1)");
    manifest.validate();
    std::vector<std::size_t> train;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        if (manifest.entries[i].tag != SplitTag::Val)
            train.push_back(i);
    }
    const auto n_labeled = static_cast<std::size_t>(std::floor(labeled_fraction * static_cast<double>(train.size())));
    if (n_labeled == 0)
        throw Error("labeled fraction " + std::to_string(labeled_fraction) + " of " + std::to_string(train.size()) +
                    " train volumes yields no labeled volume");

    Rng rng(derive_seed(seed, "split"));
    rng.shuffle(train.begin(), train.end());

    SplitManifest out = manifest;
    for (std::size_t k = 0; k < train.size(); ++k) {
        auto& e = out.entries[train[k]];
        if (k < n_labeled) {
            if (!e.label)
                throw Error("cannot tag '" + e.image + "' as labeled: manifest has no label for it");
            e.tag = SplitTag::Labeled;
        } else {
            e.tag = SplitTag::Unlabeled;
        }
    }
    return out;
}

std::vector<Sample> load_split(const SplitManifest& manifest, SplitTag tag, int num_classes)
{
    std::vector<Sample> out;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        const auto& e = manifest.entries[i];
        if (e.tag != tag)
            continue;
        Sample s;
        s.id = i;
        s.image = read_image(manifest.resolve(e.image));
        if (tag != SplitTag::Unlabeled) {
            if (!e.label)
                throw FormatError("entry '" + e.image + "' has no label");
            s.label = read_label(manifest.resolve(*e.label), num_classes);
            if (s.label->dims != s.image.dims)
                throw ShapeError("label dims " + to_string(s.label->dims) + " differ from image dims " +
                                 to_string(s.image.dims) + " for '" + e.image + "'");
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---- synthetic generator ----

void SynthSpec::validate() const
{
    if (num_volumes < 1)
        throw Error("synthetic dataset needs at least one train volume");
    if (num_val < 0)
        throw Error("val volume count must be >= 0");
    if (!dims.positive())
        throw Error("synthetic dims must be positive");
    if (num_classes < 2 || num_classes > 255)
        throw Error("synthetic num_classes must be in [2, 255]");
    if (!(decay > 0.0 && decay < 1.0))
        throw Error("class frequency decay must lie in (0, 1)");
    if (!(foreground_fraction > 0.0 && foreground_fraction < 1.0))
        throw Error("foreground fraction must lie in (0, 1)");
    if (!(noise_sigma >= 0.0))
        throw Error("noise sigma must be >= 0");

    // Every ellipsoid must be at least one voxel in radius and fit in the grid.
    double norm = 0.0;
    for (int c = 1; c < num_classes; ++c)
        norm += std::pow(decay, c - 1);
    const double fg = foreground_fraction * static_cast<double>(dims.voxels());
    const double r_max = std::cbrt(3.0 * fg / norm / (4.0 * std::numbers::pi)) * std::exp(0.25);
    const double r_min = std::cbrt(3.0 * fg * std::pow(decay, num_classes - 2) / norm / (4.0 * std::numbers::pi)) *
                         std::exp(-0.25);
    const int min_dim = std::min({dims.d, dims.h, dims.w});
    if (r_min < 1.0 || 2.0 * r_max >= static_cast<double>(min_dim))
        throw Error("dims " + to_string(dims) + " are too small to place " + std::to_string(num_classes - 1) +
                    " ellipsoids");
}

SynthCase generate_case(const SynthSpec& spec, int index)
{
    spec.validate();
    Rng rng(derive_seed(spec.seed, "synthetic-case", index));
    const Dims dims = spec.dims;
    const int nc = spec.num_classes;

    double norm = 0.0;
    for (int c = 1; c < nc; ++c)
        norm += std::pow(spec.decay, c - 1);
    const double fg = spec.foreground_fraction * static_cast<double>(dims.voxels());

    SynthCase out{Volume::zeros(dims), LabelMap::zeros(dims, nc)};

    // Larger classes first; rarer classes are painted over them.
    for (int c = 1; c < nc; ++c) {
        const double target = fg * std::pow(spec.decay, c - 1) / norm;
        const double r_eq = std::cbrt(3.0 * target / (4.0 * std::numbers::pi));
        double e[3];
        for (auto& v : e)
            v = rng.uniform(-0.25, 0.25);
        const double mean_e = (e[0] + e[1] + e[2]) / 3.0;
        double axis[3];
        for (int i = 0; i < 3; ++i)
            axis[i] = r_eq * std::exp(e[i] - mean_e);
        const int extent[3] = {dims.d, dims.h, dims.w};
        double center[3];
        for (int i = 0; i < 3; ++i) {
            const double lo = axis[i] - 0.5;
            const double hi = static_cast<double>(extent[i]) - 0.5 - axis[i];
            center[i] = lo < hi ? rng.uniform(lo, hi) : 0.5 * (extent[i] - 1);
        }
        for (int z = 0; z < dims.d; ++z)
            for (int y = 0; y < dims.h; ++y)
                for (int x = 0; x < dims.w; ++x) {
                    const double qz = (z - center[0]) / axis[0];
                    const double qy = (y - center[1]) / axis[1];
                    const double qx = (x - center[2]) / axis[2];
                    if (qz * qz + qy * qy + qx * qx <= 1.0)
                        out.label.at(z, y, x) = static_cast<std::uint8_t>(c);
                }
    }

    // Per-volume contrast jitter keeps levels separated: level_c in c/(C-1) +- 0.05.
    std::vector<double> level(nc, 0.0);
    for (int c = 1; c < nc; ++c)
        level[c] = static_cast<double>(c) / (nc - 1) + rng.uniform(-0.05, 0.05);
    for (std::size_t v = 0; v < dims.voxels(); ++v) {
        double value = level[out.label.data[v]];
        if (spec.noise_sigma > 0.0)
            value += spec.noise_sigma * rng.normal();
        out.image.data[v] = static_cast<float>(value);
    }
    return out;
}

SplitManifest generate_synthetic(const SynthSpec& spec, const fs::path& out_dir)
{
    spec.validate();
    fs::create_directories(out_dir / "images");
    fs::create_directories(out_dir / "labels");
    SplitManifest m;
    m.base_dir = out_dir;
    const int total = spec.num_volumes + spec.num_val;
    for (int i = 0; i < total; ++i) {
        const auto c = generate_case(spec, i);
        char name[32];
        std::snprintf(name, sizeof name, "case_%03d.mvol", i);
        const std::string image = std::string("images/") + name;
        const std::string label = std::string("labels/") + name;
        write_volume(out_dir / image, c.image);
        write_volume(out_dir / label, c.label, c.image.spacing);
        m.entries.push_back({i < spec.num_volumes ? SplitTag::Labeled : SplitTag::Val, image, label});
    }
    write_manifest(out_dir / "manifest.tsv", m);
    return m;
}

} // namespace micd
