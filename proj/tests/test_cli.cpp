#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <string>

#include "dctext/io.hpp"

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(DCTEXT_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

const std::string kSrc = DCTEXT_SOURCE_DIR;

}  // namespace

TEST_CASE("missing config exits 1") {
    CHECK(run_cli("run --config /nonexistent/nowhere.json") == 1);
}

TEST_CASE("malformed json exits 1") {
    const std::string path = "/tmp/dctext_cli_bad.json";
    std::ofstream(path) << "{not json";
    CHECK(run_cli("run --config " + path) == 1);
}

TEST_CASE("unknown config key exits 1") {
    const std::string path = "/tmp/dctext_cli_unknown.json";
    std::ofstream(path) << R"({"seed":1,"bogus":2})";
    CHECK(run_cli("run --config " + path) == 1);
}

TEST_CASE("overlapping boxes exit 2") {
    CHECK(run_cli("run --config " + kSrc + "/configs/overlap_invalid.json") == 2);
}

TEST_CASE("schedule overflow exits 2") {
    CHECK(run_cli("run --config " + kSrc + "/configs/demo.json --override schedule.T=3 "
                  "--override outputs.dir=/tmp/dctext_cli_overflow") == 2);
}

TEST_CASE("bad sweep name exits 2") {
    CHECK(run_cli("ablate --config " + kSrc + "/configs/demo.json --sweep bogus") == 2);
}

TEST_CASE("demo run succeeds and writes artifacts") {
    const std::string out = "/tmp/dctext_cli_demo";
    std::system(("rm -rf " + out).c_str());
    CHECK(run_cli("run --config " + kSrc + "/configs/demo.json --override outputs.dir=" + out +
                  " --dump-masks --trace") == 0);
    CHECK(std::ifstream(out + "/final.pgm").good());
    CHECK(std::ifstream(out + "/final.dclat").good());
    CHECK(std::ifstream(out + "/manifest.json").good());
    CHECK(std::ifstream(out + "/trace.json").good());
    CHECK(std::ifstream(out + "/snapshot_init.dclat").good());
    CHECK(std::ifstream(out + "/snapshot_expn.dclat").good());

    const dctext::AttentionMask focus = dctext::load_mask(out + "/mask_focus.dcmask");
    CHECK(focus.kind == dctext::MaskKind::Focus);
    CHECK(focus.size() == 6 + 256);  // 1+1 textual + 4 global tokens, 16x16 patches

    const dctext::Latent lat = dctext::load_latent(out + "/final.dclat");
    CHECK(lat.height == 16);
}

TEST_CASE("ablate drop sweep lists the full mask and the four drops") {
    const std::string out = "/tmp/dctext_cli_ablate.csv";
    const int code = run_cli("ablate --config " + kSrc + "/configs/demo.json --sweep drop --out " +
                             out + " --override schedule.T=8");
    REQUIRE(code == 0);
    std::ifstream f(out);
    std::string line;
    std::getline(f, line);
    CHECK(line == "variant,T_init,T_focus,T_expn,drop,region_accuracy,flops_total");
    int rows = 0;
    bool has_pi_to_rc = false;
    while (std::getline(f, line)) {
        ++rows;
        has_pi_to_rc = has_pi_to_rc || line.find("wo_pi_to_rc") != std::string::npos;
    }
    CHECK(rows == 5);
    CHECK(has_pi_to_rc);
}
