#include "micd/checkpoint.hpp"

#include "micd/error.hpp"

#include <json.hpp>

#include <bit>
#include <fstream>
#include <iterator>
#include <sstream>

namespace micd {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[4] = {'M', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(std::span<const std::uint8_t> b, std::size_t pos)
{
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(b[pos + i]) << (8 * i);
    return v;
}

std::string shape_string(const std::vector<int>& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

} // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const
{
    for (const auto& t : tensors)
        if (t.name == name)
            return &t;
    return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt)
{
    Json header;
    header["iteration"] = ckpt.iteration;
    Json cfg = Json::object();
    for (const auto& [k, v] : ckpt.config.values())
        cfg[k] = v;
    header["config"] = cfg;
    Json manifest = Json::array();
    std::uint64_t offset = 0;
    for (const auto& t : ckpt.tensors) {
        manifest.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", t.values.size()}});
        offset += t.values.size();
    }
    header["tensors"] = manifest;
    const std::string text = header.dump();

    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<std::uint8_t>(kVersion >> (8 * i)));
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.reserve(out.size() + 8 * offset);
    for (const auto& t : ckpt.tensors)
        for (double v : t.values)
            put_u64(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 16 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
        throw CheckpointError("not a checkpoint: bad magic");
    std::uint32_t version = 0;
    for (int i = 0; i < 4; ++i)
        version |= static_cast<std::uint32_t>(bytes[4 + i]) << (8 * i);
    if (version != kVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const auto header_len = get_u64(bytes, 8);
    if (header_len > bytes.size() - 16)
        throw CheckpointError("checkpoint truncated inside the header");

    Json header;
    try {
        header = Json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }

    Checkpoint ckpt;
    const std::size_t payload = 16 + header_len;
    try {
        ckpt.iteration = header.at("iteration").get<long>();
        for (const auto& [k, v] : header.at("config").items())
            ckpt.config.set(k, v.get<std::string>());
        std::uint64_t expected_offset = 0;
        for (const auto& entry : header.at("tensors")) {
            NamedTensor t;
            t.name = entry.at("name").get<std::string>();
            t.shape = entry.at("shape").get<std::vector<int>>();
            const auto offset = entry.at("offset").get<std::uint64_t>();
            const auto count = entry.at("count").get<std::uint64_t>();
            std::uint64_t shape_count = 1;
            for (int d : t.shape)
                shape_count *= static_cast<std::uint64_t>(d);
            if (offset != expected_offset || count != shape_count)
                throw CheckpointError("tensor '" + t.name + "' has an inconsistent manifest entry");
            if (payload + 8 * (offset + count) > bytes.size())
                throw CheckpointError("checkpoint truncated inside tensor '" + t.name + "'");
            t.values.resize(count);
            for (std::uint64_t i = 0; i < count; ++i)
                t.values[i] = std::bit_cast<double>(get_u64(bytes, payload + 8 * (offset + i)));
            expected_offset += count;
            ckpt.tensors.push_back(std::move(t));
        }
        if (payload + 8 * expected_offset != bytes.size())
            throw CheckpointError("checkpoint has trailing bytes after the payload");
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    }
    return ckpt;
}

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt)
{
    const auto bytes = encode_checkpoint(ckpt);
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw CheckpointError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw CheckpointError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw CheckpointError("cannot open checkpoint " + path.string());
    const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    try {
        return decode_checkpoint(bytes);
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

void add_params(Checkpoint& ckpt, const std::string& prefix, const ParamVector& params)
{
    for (const auto& t : params.tensors)
        ckpt.tensors.push_back({prefix + "." + t.name, t.shape, t.values});
}

ParamVector extract_params(const Checkpoint& ckpt, const std::string& prefix, const ParamVector& expected)
{
    ParamVector out = expected;
    std::ostringstream diff;
    int problems = 0;
    for (auto& t : out.tensors) {
        const std::string name = prefix + "." + t.name;
        const auto* found = ckpt.find(name);
        if (!found) {
            diff << "  missing  " << name << " expected " << shape_string(t.shape) << '\n';
            ++problems;
        } else if (found->shape != t.shape) {
            diff << "  shape    " << name << " expected " << shape_string(t.shape) << " found "
                 << shape_string(found->shape) << '\n';
            ++problems;
        } else {
            t.values = found->values;
        }
    }
    if (problems)
        throw CheckpointError("checkpoint does not match the network layout (" + std::to_string(problems) +
                              " tensors):\n" + diff.str());
    return out;
}

} // namespace micd
