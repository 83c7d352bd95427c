#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "moiie/data.hpp"

// Exercises the installed command-line surface end to end.

TEST_SUITE_BEGIN("cli");

namespace {

namespace fs = std::filesystem;

#ifndef MOIIE_CLI_PATH
#define MOIIE_CLI_PATH "moiie"
#endif

struct CmdResult {
    int exit_code;
    std::string output;  // stdout + stderr
};

CmdResult run_cli(const std::string& args, const std::string& tag) {
    const fs::path out = fs::temp_directory_path() / ("moiie_cli_" + tag + ".out");
    const std::string cmd = std::string(MOIIE_CLI_PATH) + " " + args + " > " + out.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(out.string());
    std::stringstream ss;
    ss << in.rdbuf();
    fs::remove(out);
    return {WEXITSTATUS(status), ss.str()};
}

struct Workspace {
    fs::path dir;
    explicit Workspace(const std::string& tag) : dir(fs::temp_directory_path() / ("moiie_ws_" + tag)) {
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Workspace() { fs::remove_all(dir); }
    std::string path(const std::string& rel) const { return (dir / rel).string(); }
};

void write_tiny_config(const std::string& path, const std::string& extra = "") {
    std::ofstream out(path);
    out << "d = 16\nn_layers = 2\nn_heads = 2\nmax_seq = 24\nseed = 11\ndtype = f64\n"
           "placement = interleaved\ntotal_steps = 4\nbatch_size = 4\nlog_every = 1\n"
           "train_sizes = 24,18,18\neval_sizes = 8,6,6\ndata_seed = 3\n"
        << extra;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
    CHECK(run_cli("definitely-not-a-command", "unknown").exit_code == 2);
    CmdResult help = run_cli("--help", "help");
    CHECK(help.exit_code == 0);
    CHECK(help.output.find("gen-data") != std::string::npos);
    CHECK(run_cli("train --stage 3 --config x --out y", "badstage").exit_code == 2);
}

TEST_CASE("config errors exit with code 3 and name the key") {
    Workspace ws("cfgerr");
    {
        std::ofstream out(ws.path("bad.cfg"));
        out << "mystery_knob = 7\n";
    }
    CmdResult r = run_cli("train --config " + ws.path("bad.cfg") + " --stage 1 --out " + ws.path("runs"),
                          "badkey");
    CHECK(r.exit_code == 3);
    CHECK(r.output.find("mystery_knob") != std::string::npos);
}

TEST_CASE("gen-data writes loadable train and eval files") {
    Workspace ws("gendata");
    CmdResult r = run_cli("gen-data --out " + ws.path("data") + " --seed 5 --sizes 12,9,9", "gen");
    REQUIRE(r.exit_code == 0);
    moiie::Dataset train = moiie::load_dataset_jsonl(ws.path("data/train.jsonl"));
    CHECK(train.size() == 30);
    moiie::Dataset eval = moiie::load_dataset_jsonl(ws.path("data/eval.jsonl"));
    CHECK(eval.size() > 0);
}

TEST_CASE("training pipeline and deterministic evaluation") {
    Workspace ws("pipeline");
    write_tiny_config(ws.path("tiny.cfg"));
    const std::string base = " --config " + ws.path("tiny.cfg") + " --out " + ws.path("runs");

    CmdResult s2_no_init = run_cli("train" + base + " --stage 2 --variant moiie", "noinit");
    CHECK(s2_no_init.exit_code == 2);

    CmdResult s1 = run_cli("train" + base + " --stage 1", "s1");
    REQUIRE(s1.exit_code == 0);
    std::istringstream ss(s1.output);
    std::string key, ckpt;
    ss >> key >> ckpt;  // "run_dir <path>"
    ss >> key >> ckpt;  // "checkpoint <path>"
    REQUIRE(key == "checkpoint");

    CmdResult s2 = run_cli("train" + base + " --stage 2 --variant moiie --init " + ckpt, "s2");
    REQUIRE(s2.exit_code == 0);
    std::istringstream s2s(s2.output);
    std::string k2, ckpt2;
    s2s >> k2 >> ckpt2 >> k2 >> ckpt2;

    CmdResult e1 = run_cli("eval --ckpt " + ckpt2 + " --data " + ws.path("runs"), "e_missing");
    CHECK(e1.exit_code == 3);  // no eval.jsonl in the runs dir

    REQUIRE(run_cli("gen-data --out " + ws.path("data") + " --seed 3 --sizes 8,6,6", "gen2").exit_code == 0);
    CmdResult ea = run_cli("eval --ckpt " + ckpt2 + " --data " + ws.path("data"), "ea");
    CmdResult eb = run_cli("eval --ckpt " + ckpt2 + " --data " + ws.path("data"), "eb");
    REQUIRE(ea.exit_code == 0);
    CHECK(ea.output == eb.output);

    CmdResult rs = run_cli(
        "route-stats --ckpt " + ckpt2 + " --data " + ws.path("data") + " --out " + ws.path("trace.csv"),
        "rs");
    REQUIRE(rs.exit_code == 0);
    std::ifstream trace(ws.path("trace.csv"));
    std::string header;
    std::getline(trace, header);
    CHECK(header == "layer,modality,expert_id,expert_group,activation_fraction,mean_gate_prob");
}

TEST_CASE("alpha sweep runs all three weights into one report") {
    Workspace ws("sweep");
    write_tiny_config(ws.path("tiny.cfg"));
    CmdResult r = run_cli(
        "ablate --sweep alpha --config " + ws.path("tiny.cfg") + " --out " + ws.path("runs"), "ablate");
    REQUIRE(r.exit_code == 0);
    std::ifstream in(ws.path("runs/report_alpha.txt"));
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string report = ss.str();
    CHECK(report.find("alpha_0 ") != std::string::npos);
    CHECK(report.find("alpha_0.001") != std::string::npos);
    CHECK(report.find("alpha_0.01") != std::string::npos);
    CHECK(report.find("depth trend") != std::string::npos);
}

TEST_SUITE_END();
