#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "coattn/encoders.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string out;
};

RunResult run_cli(const std::string& args) {
    std::string out_file = "/tmp/coattn_cli_out.txt";
    std::string cmd = std::string(COATTN_CLI_PATH) + " " + args + " > " + out_file + " 2>&1";
    int rc = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    std::ifstream is(out_file);
    std::stringstream ss;
    ss << is.rdbuf();
    r.out = ss.str();
    return r;
}

// micro architecture the CLI can train in milliseconds
json micro_model_json() {
    json m;
    m["d"] = 8;
    m["heads"] = 2;
    m["depth"] = 1;
    m["ffn_width"] = 16;
    m["fusion_width"] = 16;
    m["frames"] = 2;
    m["frame_size"] = 8;
    m["audio_samples"] = 64;
    m["audio_layers"] = json::array(
        {{{"type", "conv"}, {"out", 4}, {"kernel", {9, 1, 1}}, {"stride", {16, 1, 1}}, {"pad", {4, 0, 0}}}});
    m["visual_layers"] = json::array(
        {{{"type", "conv"}, {"out", 4}, {"kernel", {2, 4, 4}}, {"stride", {2, 4, 4}}, {"pad", {0, 0, 0}}}});
    return m;
}

json micro_data_json() {
    json d;
    d["frames"] = 2;
    d["frame_size"] = 8;
    d["audio_samples"] = 64;
    return d;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path);
    os << j.dump(2);
}

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::path("/tmp") / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

} // namespace

TEST_CASE("cli: unknown flag exits 1 without outputs") {
    fs::path dir = fs::path("/tmp/coattn_cli_noout");
    fs::remove_all(dir);
    RunResult r = run_cli("--bogus-flag gen-data --out " + dir.string());
    CHECK(r.exit_code == 1);
    CHECK(!fs::exists(dir));
}

TEST_CASE("cli: no subcommand exits 1") {
    RunResult r = run_cli("");
    CHECK(r.exit_code == 1);
}

TEST_CASE("cli: gradcheck prints a small max error and exits 0") {
    fs::path dir = fresh_dir("coattn_cli_grad");
    RunResult r = run_cli("gradcheck --out " + dir.string());
    CHECK(r.exit_code == 0);
    double v = atof(r.out.c_str());
    CHECK(v > 0.0);
    CHECK(v < 1e-4);
}

TEST_CASE("cli: gen-data writes splits and echoes the effective config") {
    fs::path dir = fresh_dir("coattn_cli_gen");
    fs::path cfg = dir / "in.json";
    json c;
    c["data"] = micro_data_json();
    c["data"]["train_count"] = 6;
    c["data"]["val_count"] = 3;
    write_json(cfg, c);
    RunResult r = run_cli("gen-data --config " + cfg.string() + " --seed 5 --out " + dir.string());
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(dir / "train.avsd"));
    CHECK(fs::exists(dir / "val.avsd"));
    CHECK(!fs::exists(dir / "test.avsd"));
    CHECK(fs::exists(dir / "config.json"));
    std::ifstream is(dir / "config.json");
    json echo = json::parse(is);
    CHECK(echo["seed"] == 5);
    CHECK(echo["subcommand"] == "gen-data");
}

TEST_CASE("cli: unknown config keys are rejected") {
    fs::path dir = fresh_dir("coattn_cli_badkey");
    fs::path cfg = dir / "in.json";
    json c;
    c["data"] = micro_data_json();
    c["data"]["train_count"] = 4;
    c["data"]["bogus"] = 1;
    write_json(cfg, c);
    RunResult r = run_cli("gen-data --config " + cfg.string() + " --out " + dir.string());
    CHECK(r.exit_code == 2);
    CHECK(r.out.find("unknown key") != std::string::npos);
}

TEST_CASE("cli: train, eval, localize pipeline with reproducible eval output") {
    fs::path dir = fresh_dir("coattn_cli_pipe");
    // data
    fs::path gen_cfg = dir / "gen.json";
    json g;
    g["data"] = micro_data_json();
    g["data"]["train_count"] = 12;
    g["data"]["val_count"] = 6;
    write_json(gen_cfg, g);
    REQUIRE(run_cli("gen-data --config " + gen_cfg.string() + " --seed 3 --out " + dir.string())
                .exit_code == 0);

    // train
    fs::path train_cfg = dir / "train.json";
    json t;
    t["model"] = micro_model_json();
    t["data"] = {{"train_path", (dir / "train.avsd").string()},
                 {"val_path", (dir / "val.avsd").string()}};
    t["train"] = {{"max_steps", 6}, {"batch_size", 4}, {"eval_every", 3}};
    write_json(train_cfg, t);
    fs::path run1 = dir / "run1";
    RunResult tr =
        run_cli("train-pretext --config " + train_cfg.string() + " --seed 4 --out " + run1.string());
    CHECK(tr.exit_code == 0);
    CHECK(fs::exists(run1 / "checkpoint.ckpt"));
    CHECK(fs::exists(run1 / "report.json"));
    CHECK(fs::exists(run1 / "config.json"));

    // eval twice: identical accuracy lines
    fs::path eval_cfg = dir / "eval.json";
    json e;
    e["model"] = micro_model_json();
    e["eval"] = {{"checkpoint", (run1 / "checkpoint.ckpt").string()},
                 {"dataset", (dir / "val.avsd").string()}};
    write_json(eval_cfg, e);
    RunResult e1 = run_cli("eval-sync --config " + eval_cfg.string() + " --out " +
                           (dir / "eval1").string());
    // a run's echoed config is itself a runnable config reproducing the output
    RunResult e2 = run_cli("eval-sync --config " + (dir / "eval1" / "config.json").string() +
                           " --out " + (dir / "eval2").string());
    CHECK(e1.exit_code == 0);
    CHECK(e2.exit_code == 0);
    CHECK(e1.out == e2.out);
    double acc = atof(e1.out.c_str());
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    CHECK(e1.out.find('.') != std::string::npos); // single decimal line

    // localize writes pgm/ppm heatmaps
    fs::path loc_cfg = dir / "loc.json";
    json l;
    l["model"] = micro_model_json();
    l["localize"] = {{"checkpoint", (run1 / "checkpoint.ckpt").string()},
                     {"dataset", (dir / "val.avsd").string()},
                     {"count", 2},
                     {"frame_index", 1},
                     {"layer", 0}};
    write_json(loc_cfg, l);
    fs::path locdir = dir / "loc";
    RunResult lo = run_cli("localize --config " + loc_cfg.string() + " --out " + locdir.string());
    CHECK(lo.exit_code == 0);
    CHECK(fs::exists(locdir / "cam_0000.pgm"));
    CHECK(fs::exists(locdir / "cam_0000.ppm"));
    CHECK(fs::exists(locdir / "attn_0001_h1.pgm"));

    // failure mid-run removes partial outputs (bad frame index after config echo)
    fs::path locbad = dir / "locbad";
    RunResult lb = run_cli("localize --config " + loc_cfg.string() + " --set localize.frame_index=99 --out " +
                           locbad.string());
    CHECK(lb.exit_code == 2);
    CHECK(!fs::exists(locbad / "config.json"));
    CHECK(!fs::exists(locbad / "cam_0000.pgm"));
}

TEST_CASE("cli: ablate writes the CSV grid") {
    fs::path dir = fresh_dir("coattn_cli_ablate");
    fs::path cfg = dir / "ablate.json";
    json c;
    c["model"] = micro_model_json();
    c["data"] = micro_data_json();
    c["ablate"] = {{"depths", {1, 2}}, {"heads", {2, 4}}, {"train_count", 8}, {"val_count", 4}};
    c["train"] = {{"max_steps", 2}, {"batch_size", 4}, {"eval_every", 2}};
    write_json(cfg, c);
    RunResult r = run_cli("ablate --config " + cfg.string() + " --out " + dir.string());
    CHECK(r.exit_code == 0);
    std::ifstream csv(dir / "ablation.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "variant,L,A,params,val_acc,steps,seconds");
    int rows = 0;
    while (std::getline(csv, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 4);
}

TEST_CASE("cli: finetune subcommand trains a classifier") {
    fs::path dir = fresh_dir("coattn_cli_ft");
    fs::path cfg = dir / "ft.json";
    json c;
    c["model"] = micro_model_json();
    c["finetune"] = {{"n_classes", 4}, {"head_width", 8}, {"max_steps", 4},
                     {"batch_size", 4},  {"train_count", 8}, {"val_count", 4}};
    write_json(cfg, c);
    RunResult r = run_cli("finetune --config " + cfg.string() + " --out " + dir.string());
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(dir / "classifier.ckpt"));
    CHECK(fs::exists(dir / "report.json"));
}

TEST_CASE("cli: --set overrides reach the effective config") {
    fs::path dir = fresh_dir("coattn_cli_set");
    fs::path cfg = dir / "in.json";
    json c;
    c["data"] = micro_data_json();
    c["data"]["train_count"] = 2;
    write_json(cfg, c);
    RunResult r = run_cli("gen-data --config " + cfg.string() +
                          " --set data.train_count=5 --out " + dir.string());
    CHECK(r.exit_code == 0);
    std::ifstream is(dir / "config.json");
    json echo = json::parse(is);
    CHECK(echo["data"]["train_count"] == 5);
    CHECK(r.out.find("5 samples") != std::string::npos);
}
