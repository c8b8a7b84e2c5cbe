#pragma once

#include "micd/config.hpp"
#include "micd/network.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace micd {

// Named-tensor container:
//   "MCKP", u32 version, u64 header length, JSON header, f64 payload (LE).
// The header holds the iteration counter, the config echo and a manifest of
// {name, shape, offset, count} per tensor.
struct Checkpoint {
    long iteration = 0;
    ConfigMap config;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Appends `params` with every name prefixed by `prefix` + ".".
void add_params(Checkpoint& ckpt, const std::string& prefix, const ParamVector& params);

// Extracts the tensors under `prefix` into the layout of `expected`. Throws
// CheckpointError listing every missing or mis-shaped tensor.
ParamVector extract_params(const Checkpoint& ckpt, const std::string& prefix, const ParamVector& expected);

} // namespace micd
