#include "micd/cli.hpp"
#include "micd/checkpoint.hpp"
#include "micd/config.hpp"
#include "micd/data.hpp"

#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

using namespace micd;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result cli(std::vector<std::string> args)
{
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name)
{
    const auto p = fs::temp_directory_path() / ("micd_test_cli_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<nlohmann::json> records(const fs::path& p)
{
    std::ifstream in(p);
    std::vector<nlohmann::json> out;
    for (std::string l; std::getline(in, l);)
        out.push_back(nlohmann::json::parse(l));
    return out;
}

// Small dataset shared by the tests below.
fs::path small_data()
{
    static const fs::path dir = [] {
        const auto d = scratch("data");
        const auto r = cli({"gen-data", "--out", d.string(), "--volumes", "4", "--val", "1", "--labeled-frac", "0.5",
                            "--dims", "16", "--classes", "3", "--seed", "2"});
        REQUIRE(r.code == kExitOk);
        return d;
    }();
    return dir / "manifest.tsv";
}

std::vector<std::string> train_args(const fs::path& out, std::vector<std::string> extra = {})
{
    std::vector<std::string> a{"train",         "--manifest", small_data().string(), "--out", out.string(), "--classes",
                               "3",             "--base-channels", "2", "--set", "mask.patch_edge=2"};
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
}

} // namespace

TEST_CASE("gen-data writes a split dataset")
{
    const auto d = scratch("gen");
    const auto r = cli({"gen-data", "--out", d.string(), "--volumes", "12", "--val", "4", "--dims", "24"});
    REQUIRE(r.code == kExitOk);
    CHECK(r.out.find("3 labeled, 9 unlabeled, 4 val") != std::string::npos);
    const auto m = read_manifest(d / "manifest.tsv");
    CHECK(m.entries.size() == 16);

    const auto d2 = scratch("gen2");
    cli({"gen-data", "--out", d2.string(), "--volumes", "12", "--val", "4", "--dims", "24"});
    CHECK(slurp(d / "manifest.tsv") == slurp(d2 / "manifest.tsv"));
    for (const auto& e : m.entries)
        CHECK(slurp(d / e.image) == slurp(d2 / e.image));
}

TEST_CASE("usage errors exit with code 2")
{
    CHECK(cli({"gen-data"}).code == kExitUsage);
    CHECK(cli({}).code == kExitUsage);
    CHECK(cli({"frobnicate"}).code == kExitUsage);
    CHECK(cli({"--help"}).code == kExitOk);
    CHECK(cli({"gen-data", "--out", scratch("bad").string(), "--dims", "3x4"}).code == kExitUsage);

    const auto out = scratch("nomanifest");
    const auto r = cli({"train", "--out", out.string(), "--iters", "1"});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("manifest") != std::string::npos);
    CHECK(cli({"train", "--out", out.string(), "--manifest", "/nonexistent/m.tsv"}).code == kExitUsage);
    CHECK(cli(train_args(out, {"--set", "no.such.key=1"})).code == kExitUsage);
    CHECK(cli(train_args(out, {"--mcpc-direction", "sideways"})).code == kExitUsage);
}

TEST_CASE("train writes one loss record per iteration and honours module flags")
{
    const auto out = scratch("train");
    const auto r = cli(train_args(out, {"--iters", "3"}));
    REQUIRE(r.code == kExitOk);
    const auto recs = records(out / "loss.jsonl");
    REQUIRE(recs.size() == 3);
    CHECK(recs[0]["iter"] == 0);
    CHECK(recs[0]["cps"].get<double>() > 0.0);
    CHECK(fs::exists(out / "checkpoint_final.mckp"));

    const auto off = scratch("train_off");
    REQUIRE(cli(train_args(off, {"--iters", "2", "--no-mcpc", "--no-cfc", "--no-cmd"})).code == kExitOk);
    for (const auto& rec : records(off / "loss.jsonl")) {
        CHECK(rec["cps"] == 0.0);
        CHECK(rec["con"] == 0.0);
        CHECK(rec["dis"] == 0.0);
    }
    const auto echo = ConfigMap::load(off / "config.cfg");
    CHECK(*echo.get("mcpc.enabled") == "false");
}

TEST_CASE("explicit flags override --set, which overrides the config file")
{
    const auto dir = scratch("precedence");
    fs::create_directories(dir);
    std::ofstream(dir / "run.cfg") << "train.iters = 5\ntrain.seed = 7\nmask.ratio = 0.3\n";
    const auto out = dir / "run";
    const auto r = cli(train_args(out, {"--config", (dir / "run.cfg").string(), "--set", "train.iters=4", "--set",
                                        "mask.ratio=0.2", "--iters", "2"}));
    REQUIRE(r.code == kExitOk);
    const auto echo = ConfigMap::load(out / "config.cfg");
    CHECK(*echo.get("train.iters") == "2");
    CHECK(*echo.get("mask.ratio") == "0.2");
    CHECK(*echo.get("train.seed") == "7");
    CHECK(records(out / "loss.jsonl").size() == 2);
}

TEST_CASE("eval is deterministic and rejects a mismatched network")
{
    const auto out = scratch("eval");
    REQUIRE(cli(train_args(out, {"--iters", "1"})).code == kExitOk);
    const auto ckpt = (out / "checkpoint_final.mckp").string();
    const std::vector<std::string> args{"eval", "--checkpoint", ckpt, "--manifest", small_data().string()};
    const auto r1 = cli(args);
    const auto r2 = cli(args);
    REQUIRE(r1.code == kExitOk);
    CHECK(r1.out == r2.out);
    CHECK(r1.out.find("Avg.Dice") != std::string::npos);
    CHECK(r1.out.find("\"avg_dice\":") != std::string::npos);

    auto report_args = args;
    report_args.insert(report_args.end(), {"--report", (out / "report.json").string(), "--branch", "b"});
    REQUIRE(cli(report_args).code == kExitOk);
    const auto report = nlohmann::json::parse(slurp(out / "report.json"));
    CHECK(report["per_class_dice"].size() == 2);

    auto bad = args;
    bad.insert(bad.end(), {"--classes", "4"});
    const auto r3 = cli(bad);
    CHECK(r3.code == kExitCheckpoint);
    CHECK(r3.err.find("does not match the network layout") != std::string::npos);
    CHECK(cli({"eval", "--checkpoint", "/nonexistent.mckp", "--manifest", small_data().string()}).code ==
          kExitCheckpoint);
}

TEST_CASE("ablate over one module trains two runs")
{
    const auto out = scratch("ablate");
    std::vector<std::string> args{"ablate",  "--manifest", small_data().string(), "--out", out.string(),
                                  "--iters", "1",          "--classes",           "3",   "--base-channels",
                                  "2",       "--subset",   "mcpc",                "--set", "mask.patch_edge=2"};
    const auto r = cli(args);
    REQUIRE(r.code == kExitOk);
    const auto table = nlohmann::json::parse(slurp(out / "ablation.json"));
    REQUIRE(table.size() == 2);
    CHECK(table[0]["mcpc"] == false);
    CHECK(table[1]["mcpc"] == true);
    CHECK(table[0]["status"] == "ok");
    CHECK(fs::exists(out / "run_mcpc0" / "loss.jsonl"));
    const auto off = records(out / "run_mcpc0" / "loss.jsonl");
    CHECK(off[0]["cps"] == 0.0);
    // Modules outside the subset stay off in every row.
    CHECK(off[0]["con"] == 0.0);
    CHECK(records(out / "run_mcpc1" / "loss.jsonl")[0]["dis"] == 0.0);

    args[args.size() - 3] = "mcpc,bogus";
    CHECK(cli(args).code == kExitUsage);
}
