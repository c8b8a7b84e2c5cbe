#include "micd/data.hpp"
#include "micd/error.hpp"
#include "micd/rng.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

using namespace micd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    const auto p = fs::temp_directory_path() / ("micd_test_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<std::uint8_t> slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

SplitManifest train_manifest(int n)
{
    SplitManifest m;
    for (int i = 0; i < n; ++i)
        m.entries.push_back({SplitTag::Labeled, "img" + std::to_string(i), "lab" + std::to_string(i)});
    m.entries.push_back({SplitTag::Val, "val0", "vlab0"});
    return m;
}

} // namespace

TEST_CASE("volume container round trip")
{
    Rng rng(1);
    Volume v = Volume::zeros({3, 4, 5}, {0.5f, 1.25f, 2.0f});
    for (auto& x : v.data)
        x = static_cast<float>(rng.normal());
    const auto bytes = encode_volume(v);
    CHECK(bytes.size() == kVolumeHeaderBytes + 4 * 60);
    const auto back = decode_volume(bytes);
    const auto& w = std::get<Volume>(back.value);
    CHECK(w.dims == v.dims);
    CHECK(w.spacing == v.spacing);
    CHECK(w.data == v.data);
    CHECK(encode_volume(w) == bytes);

    LabelMap y = LabelMap::zeros({2, 2, 2}, 4);
    for (auto& x : y.data)
        x = static_cast<std::uint8_t>(rng.below(4));
    y.data[0] = 3;
    const auto lb = encode_volume(y, {2.0f, 2.0f, 2.0f});
    const auto ly = std::get<LabelMap>(decode_volume(lb).value);
    CHECK(ly.data == y.data);
    CHECK(ly.num_classes == 4);
    CHECK(decode_volume(lb).spacing == Spacing{2.0f, 2.0f, 2.0f});
}

TEST_CASE("a 2x2x2 f32 file is 64 bytes with the documented header")
{
    auto v = Volume::zeros({2, 2, 2});
    v.data[1] = 1.0f;
    const auto b = encode_volume(v);
    CHECK(b.size() == 64);
    CHECK(std::string(b.begin(), b.begin() + 4) == "MVOL");
    CHECK(b[4] == 1);
    CHECK(b[5] == 0);
    CHECK(b[6] == 1);
    CHECK(b[8] == 2);
    // Second voxel (x = 1) holds 1.0f = 0x3f800000, little-endian.
    CHECK(b[36] == 0x00);
    CHECK(b[39] == 0x3f);
    CHECK(b[38] == 0x80);
}

TEST_CASE("corrupt volume files are rejected with an offset")
{
    const auto good = encode_volume(Volume::zeros({2, 2, 2}));
    auto truncated = good;
    truncated.pop_back();
    CHECK_THROWS_AS(decode_volume(truncated), FormatError);

    auto magic = good;
    magic[0] = 'X';
    try {
        decode_volume(magic);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
    }

    auto dtype = good;
    dtype[6] = 9;
    try {
        decode_volume(dtype);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("offset 6") != std::string::npos);
    }

    auto version = good;
    version[4] = 2;
    CHECK_THROWS_AS(decode_volume(version), FormatError);

    const std::vector<std::uint8_t> tiny{'M', 'V', 'O', 'L', 1};
    CHECK_THROWS_AS(decode_volume(tiny), FormatError);
}

TEST_CASE("file round trip and label class check")
{
    const auto dir = scratch("files");
    auto y = LabelMap::zeros({2, 2, 2}, 3);
    y.data[5] = 2;
    write_volume(dir / "y.mvol", y);
    CHECK(read_label(dir / "y.mvol", 3).data == y.data);
    CHECK_THROWS_AS(read_label(dir / "y.mvol", 2), FormatError);
    CHECK_THROWS_AS(read_image(dir / "y.mvol"), FormatError);
    CHECK_THROWS_AS(read_volume(dir / "missing.mvol"), FormatError);
}

TEST_CASE("split_dataset")
{
    const auto m10 = train_manifest(10);
    const auto s = split_dataset(m10, 0.5, 3);
    CHECK(s.count(SplitTag::Labeled) == 5);
    CHECK(s.count(SplitTag::Unlabeled) == 5);
    CHECK(s.count(SplitTag::Val) == 1);
    CHECK(s.entries.back().tag == SplitTag::Val);
    CHECK(split_dataset(m10, 0.5, 3).entries == s.entries);

    CHECK(split_dataset(train_manifest(40), 0.05, 1).count(SplitTag::Labeled) == 2);
    CHECK(split_dataset(train_manifest(12), 0.25, 7).count(SplitTag::Labeled) == 3);

    // Every train image lands in exactly one of labeled / unlabeled.
    std::set<std::string> seen;
    for (const auto& e : s.entries)
        if (e.tag != SplitTag::Val)
            CHECK(seen.insert(e.image).second);
    CHECK(seen.size() == 10);

    CHECK_THROWS_AS(split_dataset(m10, 0.05, 1), Error);
    CHECK_THROWS_AS(split_dataset(m10, 0.0, 1), Error);
    CHECK_THROWS_AS(split_dataset(m10, 1.0, 1), Error);
}

TEST_CASE("manifest text round trip and validation")
{
    const auto dir = scratch("manifest");
    auto m = split_dataset(train_manifest(4), 0.5, 2);
    write_manifest(dir / "m.tsv", m);
    const auto back = read_manifest(dir / "m.tsv");
    CHECK(back.entries == m.entries);
    CHECK(back.base_dir == dir);
    CHECK(back.resolve("a/b.mvol") == dir / "a/b.mvol");

    SplitManifest bad;
    bad.entries.push_back({SplitTag::Labeled, "x", std::nullopt});
    CHECK_THROWS_AS(bad.validate(), FormatError);
    bad.entries = {{SplitTag::Unlabeled, "x", std::nullopt}, {SplitTag::Val, "x", "y"}};
    CHECK_THROWS_AS(bad.validate(), FormatError);

    std::ofstream(dir / "broken.tsv") << "labelled\ta\tb\n";
    CHECK_THROWS_AS(read_manifest(dir / "broken.tsv"), FormatError);
}

TEST_CASE("unlabeled samples never load their label")
{
    const auto dir = scratch("unlabeled");
    write_volume(dir / "a.mvol", Volume::zeros({2, 2, 2}));
    write_volume(dir / "la.mvol", LabelMap::zeros({2, 2, 2}, 2));
    SplitManifest m;
    m.base_dir = dir;
    m.entries = {{SplitTag::Labeled, "a.mvol", "la.mvol"}, {SplitTag::Unlabeled, "a2.mvol", "does-not-exist.mvol"}};
    write_volume(dir / "a2.mvol", Volume::zeros({2, 2, 2}));
    const auto u = load_split(m, SplitTag::Unlabeled, 2);
    REQUIRE(u.size() == 1);
    CHECK(!u[0].label);
    CHECK(u[0].id == 1);
    const auto l = load_split(m, SplitTag::Labeled, 2);
    CHECK(l[0].label);
}

TEST_CASE("synthetic generator")
{
    SynthSpec spec;
    spec.num_volumes = 3;
    spec.num_val = 1;
    spec.dims = {24, 24, 24};
    spec.seed = 5;
    const auto d1 = scratch("synth1");
    const auto d2 = scratch("synth2");
    const auto m1 = generate_synthetic(spec, d1);
    generate_synthetic(spec, d2);
    CHECK(m1.count(SplitTag::Labeled) == 3);
    CHECK(m1.count(SplitTag::Val) == 1);
    for (const auto& e : m1.entries) {
        CHECK(slurp(d1 / e.image) == slurp(d2 / e.image));
        CHECK(slurp(d1 / *e.label) == slurp(d2 / *e.label));
    }
    CHECK(slurp(d1 / "manifest.tsv") == slurp(d2 / "manifest.tsv"));

    spec.dims = {4, 4, 4};
    CHECK_THROWS_AS(generate_synthetic(spec, scratch("synth3")), Error);
}

TEST_CASE("synthetic class shares decrease with class index")
{
    SynthSpec spec;
    spec.seed = 9;
    std::vector<std::size_t> counts(spec.num_classes, 0);
    for (int i = 0; i < 20; ++i) {
        const auto c = generate_case(spec, i);
        for (auto v : c.label.data)
            ++counts[v];
    }
    for (int c = 2; c < spec.num_classes; ++c)
        CHECK(counts[c] < counts[c - 1]);
    for (int c = 1; c < spec.num_classes; ++c)
        CHECK(counts[c] > 0);
}

TEST_CASE("noise-free volumes are piecewise constant per class")
{
    SynthSpec spec;
    spec.noise_sigma = 0.0;
    spec.seed = 4;
    for (int i = 0; i < 5; ++i) {
        const auto c = generate_case(spec, i);
        std::vector<std::set<float>> levels(spec.num_classes);
        for (std::size_t v = 0; v < c.image.data.size(); ++v)
            levels[c.label.data[v]].insert(c.image.data[v]);
        CHECK(levels[0] == std::set<float>{0.0f});
        for (int k = 1; k < spec.num_classes; ++k) {
            REQUIRE(levels[k].size() == 1);
            // Foreground is brighter than background and ordered by class.
            CHECK(*levels[k].begin() > *levels[k - 1].begin());
        }
    }
}
