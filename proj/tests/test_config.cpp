#include "micd/checkpoint.hpp"
#include "micd/config.hpp"
#include "micd/error.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

using namespace micd;

TEST_CASE("config text parsing")
{
    const auto cfg = ConfigMap::parse("# comment\n\n train.iters = 200 \nmask.ratio=0.5 # trailing\n");
    CHECK(cfg.values().size() == 2);
    CHECK(*cfg.get("train.iters") == "200");
    CHECK(*cfg.get("mask.ratio") == "0.5");
    CHECK(!cfg.get("absent"));
    CHECK(ConfigMap::parse(cfg.dump()) == cfg);
    CHECK(cfg.dump() == "mask.ratio = 0.5\ntrain.iters = 200\n");

    try {
        ConfigMap::parse("a = 1\nnot a pair\n", "x.cfg");
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("x.cfg:2") != std::string::npos);
    }
    CHECK_THROWS_AS(ConfigMap::parse(" = 3"), FormatError);
    CHECK_THROWS_AS(ConfigMap::load("/nonexistent/micd.cfg"), FormatError);
}

TEST_CASE("merge overrides")
{
    auto base = ConfigMap::parse("a = 1\nb = 2");
    base.merge(ConfigMap::parse("b = 3\nc = 4"));
    CHECK(*base.get("a") == "1");
    CHECK(*base.get("b") == "3");
    CHECK(*base.get("c") == "4");
}

TEST_CASE("typed values")
{
    CHECK(parse_double("k", "0.25") == 0.25);
    CHECK(parse_double("k", "1e-3") == 1e-3);
    CHECK(parse_long("k", "-12") == -12);
    CHECK(parse_bool("k", "on"));
    CHECK(!parse_bool("k", "false"));
    CHECK_THROWS_AS(parse_double("k", "0.2x"), FormatError);
    CHECK_THROWS_AS(parse_long("k", "1.5"), FormatError);
    try {
        parse_bool("mcpc.enabled", "maybe");
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("mcpc.enabled") != std::string::npos);
    }
}

TEST_CASE("format_double round trips")
{
    for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5, 0.99, std::nextafter(1.0, 2.0)})
        CHECK(parse_double("k", format_double(v)) == v);
    CHECK(format_double(0.5) == "0.5");
}

namespace {

Checkpoint sample_checkpoint()
{
    Checkpoint c;
    c.iteration = 42;
    c.config.set("train.iters", "100");
    c.tensors.push_back({"a", {2, 3}, {1, 2, 3, 4, 5, 6}});
    c.tensors.push_back({"b", {1}, {std::numeric_limits<double>::denorm_min()}});
    c.tensors.push_back({"empty", {0}, {}});
    return c;
}

} // namespace

TEST_CASE("checkpoint encode and decode")
{
    const auto c = sample_checkpoint();
    const auto bytes = encode_checkpoint(c);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MCKP");
    const auto back = decode_checkpoint(bytes);
    CHECK(back.iteration == 42);
    CHECK(back.config == c.config);
    REQUIRE(back.tensors.size() == 3);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(back.tensors[i] == c.tensors[i]);
    CHECK(encode_checkpoint(back) == bytes);
    CHECK(back.find("b") != nullptr);
    CHECK(back.find("zzz") == nullptr);

    const auto path = std::filesystem::temp_directory_path() / "micd_test_config" / "c.mckp";
    write_checkpoint(path, c);
    CHECK(encode_checkpoint(read_checkpoint(path)) == bytes);
}

TEST_CASE("corrupt checkpoints are rejected")
{
    const auto bytes = encode_checkpoint(sample_checkpoint());

    auto magic = bytes;
    magic[1] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(magic), CheckpointError);

    auto version = bytes;
    version[4] = 7;
    CHECK_THROWS_AS(decode_checkpoint(version), CheckpointError);

    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    CHECK_THROWS_AS(decode_checkpoint(truncated), CheckpointError);

    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint(trailing), CheckpointError);

    auto header = bytes;
    header[16] = '!';
    CHECK_THROWS_AS(decode_checkpoint(header), CheckpointError);

    CHECK_THROWS_AS(read_checkpoint("/nonexistent/x.mckp"), CheckpointError);
}

TEST_CASE("extract_params reports every mismatch")
{
    const auto small = init_network({1, 2, 2}, 1);
    Checkpoint c;
    add_params(c, "student_a", small);
    CHECK(extract_params(c, "student_a", small) == small);

    const auto wider = init_network({1, 3, 2}, 1);
    try {
        extract_params(c, "student_a", wider);
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("does not match the network layout") != std::string::npos);
        CHECK(msg.find("shape") != std::string::npos);
    }
    try {
        extract_params(c, "student_b", small);
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("missing  student_b.") != std::string::npos);
        CHECK(msg.find("(" + std::to_string(small.tensors.size()) + " tensors)") != std::string::npos);
    }
}
