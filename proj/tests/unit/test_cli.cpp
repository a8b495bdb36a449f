#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"
#include "stepsep/cli.hpp"

using namespace stepsep;
using nlohmann::json;

namespace {

struct Run {
    int status;
    std::string out;
    std::string err;
};

Run run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int status = cli::run(args, out, err);
    return {status, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("config merging rejects unknown keys and wrong types") {
    const auto base = cli::defaults("refine");
    CHECK(cli::merge_config(base, {{"steps", 3}}, "t")["steps"] == 3);
    CHECK_THROWS(cli::merge_config(base, {{"stepz", 3}}, "t"));
    CHECK_THROWS(cli::merge_config(base, {{"steps", "three"}}, "t"));
    CHECK_THROWS(cli::merge_config(base, {{"steps", -1}}, "t"));
    CHECK_THROWS(cli::defaults("nope"));
}

TEST_CASE("synth then refine writes estimates, traces and a summary") {
    oracle::TempDir dir("cli");
    const auto corpus = (dir / "corpus").string();
    const auto out = (dir / "out").string();
    REQUIRE(run({"synth", "tone_noise", "--count", "2", "--seed", "4", "--out", corpus}).status == 0);
    CHECK(std::filesystem::exists(dir / "corpus/tone_noise_1/noise.wav"));

    const auto r = run({"refine", corpus, "--out", out, "--steps", "3", "--ratios", "4", "--eval-metric", "si_snr",
                        "--eval-metric", "sdr", "--checkpoints", "0,1,3", "--no-timing"});
    INFO(r.err);
    REQUIRE(r.status == 0);
    const auto summary = json::parse(slurp(dir / "out/summary.json"));
    CHECK(summary["checkpoints"] == json::array({0, 1, 3}));
    CHECK(summary["problems"].size() == 2);
    CHECK(summary["problems"][0]["model_calls"] == 1 + 3 * 4);
    CHECK(summary["aggregate_mean"]["sdr"].size() == 3);
    CHECK(summary["config"]["steps"] == 3);
    CHECK(r.out.find("MEAN") != std::string::npos);

    std::ifstream trace(dir / "out/tone_noise_0/trace.jsonl");
    std::string first;
    std::getline(trace, first);
    CHECK(json::parse(first)["config"]["ratios"] == 4);
    std::size_t steps = 0;
    for (std::string line; std::getline(trace, line);) ++steps;
    CHECK(steps == 4);
    CHECK(json::parse(read_wav_comment(dir / "out/tone_noise_0/estimate.wav"))["steps"] == 3);
}

TEST_CASE("config file values are overridden by flags and reruns are byte-identical") {
    oracle::TempDir dir("cfg");
    const auto corpus = (dir / "corpus").string();
    REQUIRE(run({"synth", "tone_noise", "--count", "1", "--out", corpus}).status == 0);
    {
        std::ofstream(dir / "cfg.json") << R"({"steps": 9, "ratios": 3, "trace_format": "csv", "timing": false})";
    }
    const auto a = (dir / "a").string();
    const auto b = (dir / "b").string();
    REQUIRE(run({"refine", corpus, "--config", (dir / "cfg.json").string(), "--steps", "2", "--out", a}).status == 0);
    REQUIRE(run({"refine", corpus, "--config", (dir / "cfg.json").string(), "--steps", "2", "--out", b}).status == 0);
    const auto csv = slurp(dir / "a/tone_noise_0/trace.csv");
    CHECK(csv.rfind("# ", 0) == 0);
    CHECK(csv.find("\"steps\":2") != std::string::npos);
    // The header embeds the output path; everything after it must match byte for byte.
    const auto body = [](const std::string& text) { return text.substr(text.find('\n')); };
    CHECK(body(csv) == body(slurp(dir / "b/tone_noise_0/trace.csv")));
    CHECK(slurp(dir / "a/tone_noise_0/estimate.wav").size() > 44);
    CHECK(load_wav(dir / "a/tone_noise_0/estimate.wav") == load_wav(dir / "b/tone_noise_0/estimate.wav"));

    {
        std::ofstream(dir / "bad.json") << R"({"stepz": 9})";
    }
    const auto bad = run({"refine", corpus, "--config", (dir / "bad.json").string(), "--out", a});
    CHECK(bad.status == 2);
    CHECK(bad.err.find("stepz") != std::string::npos);
}

TEST_CASE("usage errors exit with status 2") {
    CHECK(run({}).status == 2);
    CHECK(run({"refine", "--steps"}).status == 2);
    CHECK(run({"refine", "x.wav"}).status == 2);  // no --out
    CHECK(run({"theory", "nonsense"}).status == 2);
    CHECK(run({"refine", "/no/such/input", "--out", "/tmp/x"}).status == 1);
}

TEST_CASE("refine stops on a failing problem, flushes partial results and exits non-zero") {
    oracle::TempDir dir("partial");
    const auto corpus = (dir / "corpus").string();
    REQUIRE(run({"synth", "tone_noise", "--count", "2", "--out", corpus}).status == 0);
    const auto r = run({"refine", corpus, "--out", (dir / "out").string(), "--steps", "1", "--ratios", "2", "--model",
                        "external", "--model-arg", std::string("command=") + STEPSEP_FIXTURE_CHILD + " crash"});
    CHECK(r.status == 1);
    CHECK(r.err.find("deliberate failure") != std::string::npos);
    const auto summary = json::parse(slurp(dir / "out/summary.json"));
    CHECK(summary["errors"].size() == 1);
}

TEST_CASE("external model and metric through the CLI") {
    oracle::TempDir dir("ext");
    const auto corpus = (dir / "corpus").string();
    REQUIRE(run({"synth", "tone_noise", "--count", "1", "--out", corpus}).status == 0);
    const auto r = run({"refine", corpus, "--out", (dir / "out").string(), "--steps", "2", "--ratios", "3", "--model",
                        "external", "--model-arg", std::string("command=") + STEPSEP_FIXTURE_CHILD + " gain 0.5",
                        "--eval-metric", std::string("external:") + STEPSEP_FIXTURE_CHILD + " metric 7.5"});
    INFO(r.err);
    REQUIRE(r.status == 0);
    const auto summary = json::parse(slurp(dir / "out/summary.json"));
    const std::string key = std::string("external:") + STEPSEP_FIXTURE_CHILD + " metric 7.5";
    CHECK(summary["problems"][0]["metrics"][key][0] == 7.5);
}

TEST_CASE("eval on a song directory reports csdr and usdr") {
    oracle::TempDir dir("eval");
    const auto songs = (dir / "songs").string();
    REQUIRE(run({"synth", "chunk_sdr_fixture", "--count", "3", "--out", songs}).status == 0);
    const auto r = run({"eval", "--songs", songs});
    REQUIRE(r.status == 0);
    const auto j = json::parse(r.out);
    const auto manifest = json::parse(slurp(dir / "songs/manifest.json"));
    std::vector<double> medians;
    for (const auto& p : manifest["problems"]) medians.push_back(p["median_sdr_db"]);
    std::sort(medians.begin(), medians.end());
    CHECK(j["csdr"].get<double>() == doctest::Approx(medians[1]).epsilon(1e-6));
    CHECK(j.contains("usdr"));
}

TEST_CASE("theory suites exit 0 on success and 1 when the asserted property fails") {
    oracle::TempDir dir("theory");
    const auto report = (dir / "r.json").string();
    CHECK(run({"theory", "ddbm", "--count", "20", "--out", report}).status == 0);
    CHECK(json::parse(slurp(report))["pass"] == true);
    CHECK(run({"theory", "score"}).status == 0);
    CHECK(run({"theory", "thm1", "--problems", "2", "--steps", "3", "--ratios", "3"}).status == 0);
    CHECK(run({"theory", "thm2", "--trials", "300"}).status == 0);
    const auto bad = run({"theory", "thm2", "--trials", "300", "--lf", "0.01"});
    CHECK(bad.status == 1);
    CHECK(bad.err.find("L_f") != std::string::npos);
}
