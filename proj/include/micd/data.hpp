#pragma once

#include "micd/volume.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace micd {

// ---- Volume container ----------------------------------------------------------
//
// Layout, all little-endian:
//   0  "MVOL"
//   4  u16 version (1)
//   6  u16 dtype (1 = f32 image, 2 = u8 label)
//   8  u32 D, u32 H, u32 W
//   20 f32 sz, f32 sy, f32 sx
//   32 payload, x fastest

inline constexpr std::uint16_t kVolumeFileVersion = 1;
inline constexpr std::size_t kVolumeHeaderBytes = 32;

enum class VoxelType : std::uint16_t { F32Image = 1, U8Label = 2 };

std::vector<std::uint8_t> encode_volume(const Volume& v);
std::vector<std::uint8_t> encode_volume(const LabelMap& y, Spacing spacing = {});

struct DecodedVolume {
    std::variant<Volume, LabelMap> value;
    Spacing spacing;
};

// Label maps get num_classes = max(2, max label + 1).
DecodedVolume decode_volume(std::span<const std::uint8_t> bytes);

void write_volume(const std::filesystem::path& path, const Volume& v);
void write_volume(const std::filesystem::path& path, const LabelMap& y, Spacing spacing = {});
DecodedVolume read_volume(const std::filesystem::path& path);

Volume read_image(const std::filesystem::path& path);
// Rejects labels >= num_classes.
LabelMap read_label(const std::filesystem::path& path, int num_classes);

// ---- Split manifest -------------------------------------------------------------

enum class SplitTag { Labeled, Unlabeled, Val };

std::string to_string(SplitTag tag);
SplitTag parse_split_tag(const std::string& s);

struct ManifestEntry {
    SplitTag tag = SplitTag::Labeled;
    std::string image;
    std::optional<std::string> label;

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

// Text form: one "<tag>\t<image>\t[label]" line per entry. Relative paths
// resolve against the manifest's directory.
struct SplitManifest {
    std::vector<ManifestEntry> entries;
    std::filesystem::path base_dir;

    void validate() const;
    std::size_t count(SplitTag tag) const;
    std::filesystem::path resolve(const std::string& p) const;
};

SplitManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const SplitManifest& manifest);

// Retags the train entries (labeled + unlabeled): floor(fraction * N_train)
// become labeled, the rest unlabeled. Val entries are untouched.
SplitManifest split_dataset(const SplitManifest& manifest, double labeled_fraction, std::uint64_t seed);

// ---- Samples ----------------------------------------------------------------------

struct Sample {
    std::size_t id = 0; // index of the entry in its manifest
    Volume image;
    std::optional<LabelMap> label;
};

// Loads every entry with the given tag. Labels are read only for labeled and
// val entries; unlabeled samples never see their label file.
std::vector<Sample> load_split(const SplitManifest& manifest, SplitTag tag, int num_classes);

// ---- Synthetic data -----------------------------------------------------------------

// Random ellipsoids per foreground class on a zero background, class c having
// expected share proportional to decay^(c-1). Class c is rendered at its own
// intensity plus Gaussian noise.
struct SynthSpec {
    int num_volumes = 12; // train volumes
    int num_val = 4;
    Dims dims{32, 32, 32};
    int num_classes = 5;
    double decay = 0.35;
    double foreground_fraction = 0.3;
    double noise_sigma = 0.15;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SynthCase {
    Volume image;
    LabelMap label;
};

// Case `index` of the stream defined by spec.seed; independent of other cases.
SynthCase generate_case(const SynthSpec& spec, int index);

// Writes images/ and labels/ plus manifest.tsv under out_dir. Train volumes
// are tagged labeled; the val volumes follow them.
SplitManifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir);

} // namespace micd
