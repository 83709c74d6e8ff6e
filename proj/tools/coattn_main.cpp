// coattn: synthetic audio-visual synchronization workbench.
// Subcommands: gen-data, train-pretext, eval-sync, localize, finetune,
// gradcheck, ablate. Exit codes: 0 ok, 1 usage error, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "coattn/data.hpp"
#include "coattn/encoders.hpp"
#include "coattn/serialize.hpp"
#include "coattn/tasks.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace coattn;

namespace {

struct RunContext {
    json config;
    uint64_t seed = 1;
    fs::path out_dir;
    std::vector<fs::path> created; // removed when the run fails

    fs::path out(const std::string& name) {
        fs::path p = out_dir / name;
        created.push_back(p);
        return p;
    }

    void cleanup_partial() {
        for (const fs::path& p : created) {
            std::error_code ec;
            fs::remove(p, ec);
        }
    }
};

void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const std::string& k : allowed)
            if (it.key() == k) ok = true;
        if (!ok) throw ConfigMismatch("unknown key '" + it.key() + "' in " + where);
    }
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path);
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigMismatch("bad config json: " + std::string(e.what()));
    }
}

// --set a.b.c=value, value parsed as json when possible
void apply_override(json& cfg, const std::string& kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigMismatch("--set expects key=value, got " + kv);
    std::string path = kv.substr(0, eq), value = kv.substr(eq + 1);
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;
    }
    json* node = &cfg;
    size_t at = 0;
    while (true) {
        size_t dot = path.find('.', at);
        std::string key = path.substr(at, dot == std::string::npos ? std::string::npos : dot - at);
        if (key.empty()) throw ConfigMismatch("bad --set path: " + path);
        if (dot == std::string::npos) {
            (*node)[key] = parsed;
            return;
        }
        node = &(*node)[key];
        at = dot + 1;
    }
}

ModelConfig parse_model(const json& cfg) {
    if (!cfg.contains("model")) return ModelConfig::desk();
    return model_config_from_json(cfg.at("model").dump());
}

DataGenConfig parse_gen(const json& j, uint64_t default_seed, const std::string& where) {
    check_keys(j,
               {"train_path", "val_path", "test_path", "train_count", "val_count", "test_count",
                "duration_units", "min_sources", "max_sources", "event_rate", "noise_level",
                "cell_grid", "seed", "frames", "frame_size", "audio_samples", "clip_units",
                "burst_units", "materialize"},
               where);
    DataGenConfig g;
    g.seed = j.value("seed", default_seed);
    g.duration_units = j.value("duration_units", g.duration_units);
    g.min_sources = j.value("min_sources", g.min_sources);
    g.max_sources = j.value("max_sources", g.max_sources);
    g.event_rate = j.value("event_rate", g.event_rate);
    g.noise_level = j.value("noise_level", g.noise_level);
    g.cell_grid = j.value("cell_grid", g.cell_grid);
    g.clip.frames = j.value("frames", g.clip.frames);
    g.clip.frame_size = j.value("frame_size", g.clip.frame_size);
    g.clip.audio_samples = j.value("audio_samples", g.clip.audio_samples);
    g.clip.clip_units = j.value("clip_units", g.clip.clip_units);
    g.clip.burst_units = j.value("burst_units", g.clip.burst_units);
    return g;
}

TrainConfig parse_train(const json& cfg, uint64_t seed) {
    TrainConfig t;
    t.seed = seed;
    t.opt.kind = OptKind::sgd_momentum;
    t.opt.learning_rate = 0.01;
    t.opt.momentum = 0.9;
    t.opt.weight_decay = 1e-5;
    if (!cfg.contains("train")) return t;
    const json& j = cfg.at("train");
    check_keys(j,
               {"max_steps", "batch_size", "learning_rate", "momentum", "weight_decay",
                "eval_every", "early_stop_train_acc", "lr_halving_interval", "decay_biases"},
               "train");
    t.max_steps = j.value("max_steps", t.max_steps);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.opt.learning_rate = j.value("learning_rate", t.opt.learning_rate);
    t.opt.momentum = j.value("momentum", t.opt.momentum);
    t.opt.weight_decay = j.value("weight_decay", t.opt.weight_decay);
    t.opt.decay_biases = j.value("decay_biases", false);
    t.eval_every = j.value("eval_every", t.eval_every);
    t.early_stop_train_acc = j.value("early_stop_train_acc", t.early_stop_train_acc);
    t.lr_halving_interval = j.value("lr_halving_interval", t.lr_halving_interval);
    return t;
}

// dataset from a path or a generation spec
SyncDataset resolve_dataset(const json& data, const std::string& path_key,
                            const std::string& count_key, uint64_t seed, uint64_t salt) {
    if (data.contains(path_key)) return read_dataset(data.at(path_key).get<std::string>());
    int64_t count = data.value(count_key, int64_t{0});
    if (count <= 0) throw ConfigMismatch("data needs either " + path_key + " or " + count_key);
    DataGenConfig g = parse_gen(data, seed, "data");
    g.seed = mix_seed(g.seed, salt);
    return SyncDataset::lazy(g, count);
}

// The echoed config is itself a valid run config: re-running a subcommand
// with DIR/config.json reproduces the run (the seed rides along).
void write_effective_config(RunContext& ctx, const std::string& subcommand) {
    json echo = ctx.config;
    echo["subcommand"] = subcommand;
    echo["seed"] = ctx.seed;
    std::ofstream os(ctx.out("config.json"));
    os << echo.dump(2) << "\n";
    if (!os) throw IoError("cannot write effective config");
}

// ---- subcommands ----

int cmd_gen_data(RunContext& ctx) {
    const json& data = ctx.config.contains("data") ? ctx.config.at("data") : json::object();
    DataGenConfig g = parse_gen(data, ctx.seed, "data");
    write_effective_config(ctx, "gen-data");
    struct Split {
        const char* count_key;
        const char* file;
        uint64_t salt;
    };
    const Split splits[] = {{"train_count", "train.avsd", 0x7a11},
                            {"val_count", "val.avsd", 0x7a12},
                            {"test_count", "test.avsd", 0x7a13}};
    bool wrote = false;
    for (const Split& s : splits) {
        int64_t count = data.value(s.count_key, int64_t{0});
        if (count <= 0) continue;
        DataGenConfig gs = g;
        gs.seed = mix_seed(g.seed, s.salt);
        write_dataset(ctx.out(s.file).string(), SyncDataset::lazy(gs, count));
        wrote = true;
        std::cout << s.file << ": " << count << " samples\n";
    }
    if (!wrote) throw ConfigMismatch("gen-data: no split counts given");
    return 0;
}

int cmd_train_pretext(RunContext& ctx) {
    if (!ctx.config.contains("data")) throw ConfigMismatch("train-pretext needs a data section");
    ModelConfig mc = parse_model(ctx.config);
    TrainConfig tc = parse_train(ctx.config, ctx.seed);
    const json& data = ctx.config.at("data");
    SyncDataset train = resolve_dataset(data, "train_path", "train_count", ctx.seed, 0x7a11);
    SyncDataset val = data.contains("val_path") || data.value("val_count", int64_t{0}) > 0
                          ? resolve_dataset(data, "val_path", "val_count", ctx.seed, 0x7a12)
                          : SyncDataset::materialized({});
    write_effective_config(ctx, "train-pretext");
    tc.checkpoint_path = ctx.out("checkpoint.ckpt").string();
    TrainReport report = train_pretext(train, val, mc, tc);
    std::ofstream os(ctx.out("report.json"));
    os << train_report_to_json(report) << "\n";
    if (!os) throw IoError("cannot write report.json");
    std::cout << "steps " << report.steps_run << " final_loss "
              << (report.losses.empty() ? 0.0 : report.losses.back()) << " best_val "
              << report.best_val_acc << "\n";
    return 0;
}

int cmd_eval_sync(RunContext& ctx) {
    if (!ctx.config.contains("eval")) throw ConfigMismatch("eval-sync needs an eval section");
    const json& ev = ctx.config.at("eval");
    check_keys(ev, {"checkpoint", "dataset"}, "eval");
    ModelConfig mc = parse_model(ctx.config);
    AvsModel model = AvsModel::init(mc, ctx.seed);
    load_checkpoint(ev.at("checkpoint").get<std::string>(), model.params(), model.config_hash());
    SyncDataset ds = read_dataset(ev.at("dataset").get<std::string>());
    write_effective_config(ctx, "eval-sync");
    double acc = evaluate_sync(ds, model);
    std::printf("%.6f\n", acc);
    return 0;
}

int cmd_localize(RunContext& ctx) {
    if (!ctx.config.contains("localize")) throw ConfigMismatch("localize needs a localize section");
    const json& lo = ctx.config.at("localize");
    check_keys(lo, {"checkpoint", "dataset", "count", "frame_index", "layer"}, "localize");
    ModelConfig mc = parse_model(ctx.config);
    AvsModel model = AvsModel::init(mc, ctx.seed);
    load_checkpoint(lo.at("checkpoint").get<std::string>(), model.params(), model.config_hash());
    SyncDataset ds = read_dataset(lo.at("dataset").get<std::string>());
    int64_t count = std::min<int64_t>(ds.size(), lo.value("count", int64_t{8}));
    int64_t frame_index = lo.value("frame_index", mc.frames / 2);
    int64_t layer = lo.value("layer", int64_t{0});
    write_effective_config(ctx, "localize");
    for (int64_t i = 0; i < count; ++i) {
        SyncSample s = ds.get(i);
        Heatmap cam = cam_heatmap(s, model, frame_index);
        char name[64];
        // pgm carries the grid, ppm the overlay on the frame
        std::snprintf(name, sizeof(name), "cam_%04lld.pgm", static_cast<long long>(i));
        write_pgm(ctx.out(name).string(), normalized01(cam.grid));
        Tensor frame = slice(s.frames, 0, frame_index, frame_index + 1);
        frame = reshape(frame, {mc.frame_size, mc.frame_size, 3});
        std::snprintf(name, sizeof(name), "cam_%04lld.ppm", static_cast<long long>(i));
        write_ppm_overlay(ctx.out(name).string(), frame, cam.upsampled);
        std::vector<Heatmap> heads = attention_heatmaps(s, model, layer, -1);
        for (size_t h = 0; h < heads.size(); ++h) {
            std::snprintf(name, sizeof(name), "attn_%04lld_h%zu.pgm", static_cast<long long>(i), h);
            write_pgm(ctx.out(name).string(), normalized01(heads[h].grid));
        }
    }
    std::cout << "wrote heatmaps for " << count << " samples\n";
    return 0;
}

int cmd_finetune(RunContext& ctx) {
    if (!ctx.config.contains("finetune")) throw ConfigMismatch("finetune needs a finetune section");
    const json& ft = ctx.config.at("finetune");
    check_keys(ft,
               {"pretext_checkpoint", "n_classes", "head_width", "max_steps", "batch_size",
                "learning_rate", "lr_halving_interval", "eval_every", "vision_only", "train_count",
                "val_count", "event_rate", "noise_level", "seed"},
               "finetune");
    ModelConfig mc = parse_model(ctx.config);
    FinetuneConfig fc;
    fc.seed = ft.value("seed", ctx.seed);
    fc.n_classes = ft.value("n_classes", fc.n_classes);
    fc.head_width = ft.value("head_width", fc.head_width);
    fc.max_steps = ft.value("max_steps", fc.max_steps);
    fc.batch_size = ft.value("batch_size", fc.batch_size);
    fc.lr_halving_interval = ft.value("lr_halving_interval", fc.lr_halving_interval);
    fc.eval_every = ft.value("eval_every", fc.eval_every);
    fc.vision_only = ft.value("vision_only", false);
    fc.opt.kind = OptKind::adam;
    fc.opt.learning_rate = ft.value("learning_rate", 3e-4);
    fc.opt.weight_decay = 0.0;

    ActionGenConfig ag;
    ag.n_classes = static_cast<int>(fc.n_classes);
    ag.seed = mix_seed(fc.seed, 0xac7);
    ag.event_rate = ft.value("event_rate", ag.event_rate);
    ag.noise_level = ft.value("noise_level", ag.noise_level);
    ag.clip.frames = mc.frames;
    ag.clip.frame_size = mc.frame_size;
    ag.clip.audio_samples = mc.audio_samples;
    ActionDataset train = ActionDataset::lazy(ag, ft.value("train_count", int64_t{96}));
    ActionGenConfig agv = ag;
    agv.seed = mix_seed(fc.seed, 0xac8);
    ActionDataset val = ActionDataset::lazy(agv, ft.value("val_count", int64_t{48}));

    write_effective_config(ctx, "finetune");
    fc.checkpoint_path = ctx.out("classifier.ckpt").string();
    std::string pre = ft.value("pretext_checkpoint", std::string{});
    TrainReport report = finetune_classifier(train, val, mc, pre, fc);
    std::ofstream os(ctx.out("report.json"));
    os << train_report_to_json(report) << "\n";
    if (!os) throw IoError("cannot write report.json");
    std::cout << "steps " << report.steps_run << " best_val " << report.best_val_acc << "\n";
    return 0;
}

int cmd_gradcheck(RunContext& ctx) {
    // micro model: tiny extents, d=8, m=2; checks every parameter of the full graph
    ModelConfig mc = ModelConfig::desk();
    mc.d = 8;
    mc.heads = 2;
    mc.depth = 1;
    mc.ffn_width = 16;
    mc.fusion_width = 16;
    mc.dropout = 0.0;
    mc.frames = 2;
    mc.frame_size = 8;
    mc.audio_samples = 64;
    mc.audio_layers = {};
    mc.visual_layers = {};
    {
        EncoderLayer a;
        a.kind = EncoderLayer::Kind::conv;
        a.conv = Conv3dSpec{4, {9, 1, 1}, {16, 1, 1}, {4, 0, 0}, true};
        mc.audio_layers.push_back(a);
        EncoderLayer v;
        v.kind = EncoderLayer::Kind::conv;
        v.conv = Conv3dSpec{4, {2, 4, 4}, {2, 4, 4}, {0, 0, 0}, true};
        mc.visual_layers.push_back(v);
    }
    AvsModel model = AvsModel::init(mc, ctx.seed);
    std::mt19937_64 rng(mix_seed(ctx.seed, 0x9c));
    Tensor audio = randn({2, mc.audio_samples, 2}, rng, 0.5);
    Tensor frames = rand_uniform({2, mc.frames, mc.frame_size, mc.frame_size, 3}, rng);
    std::vector<int64_t> labels = {0, 1};
    auto loss_fn = [&]() {
        AvsForwardOut out = model.forward(audio, frames, Mode::eval);
        return cross_entropy_logits(out.logits, labels);
    };
    double worst = 0.0;
    for (const ParamEntry& e : model.params().entries())
        worst = std::max(worst, grad_check_param(loss_fn, e.tensor, 1e-5));
    std::printf("%.3e\n", worst);
    return worst < 1e-4 ? 0 : 2;
}

int cmd_ablate(RunContext& ctx) {
    const json& ab = ctx.config.contains("ablate") ? ctx.config.at("ablate") : json::object();
    check_keys(ab, {"depths", "heads", "variants", "train_count", "val_count"}, "ablate");
    std::vector<int64_t> depths = ab.value("depths", std::vector<int64_t>{1, 2});
    std::vector<int64_t> heads = ab.value("heads", std::vector<int64_t>{4, 8, 16});
    std::vector<std::string> variants = ab.value("variants", std::vector<std::string>{"cma"});
    ModelConfig base = parse_model(ctx.config);
    TrainConfig tc = parse_train(ctx.config, ctx.seed);
    const json data = ctx.config.contains("data") ? ctx.config.at("data") : json::object();
    int64_t train_count = ab.value("train_count", int64_t{64});
    int64_t val_count = ab.value("val_count", int64_t{32});
    DataGenConfig g = parse_gen(data, ctx.seed, "data");
    DataGenConfig gt = g, gv = g;
    gt.seed = mix_seed(g.seed, 0x7a11);
    gv.seed = mix_seed(g.seed, 0x7a12);
    SyncDataset train = SyncDataset::lazy(gt, train_count);
    SyncDataset val = SyncDataset::lazy(gv, val_count);

    write_effective_config(ctx, "ablate");
    std::ofstream csv(ctx.out("ablation.csv"));
    if (!csv) throw IoError("cannot write ablation.csv");
    csv << "variant,L,A,params,val_acc,steps,seconds\n";
    for (const std::string& vn : variants)
        for (int64_t L : depths)
            for (int64_t A : heads) {
                ModelConfig mc = base;
                mc.variant = variant_from_name(vn);
                mc.depth = L;
                mc.heads = A;
                TrainConfig run = tc;
                run.checkpoint_path.clear();
                TrainReport r = train_pretext(train, val, mc, run);
                csv << vn << "," << L << "," << A << "," << count_params(mc.attention_config())
                    << "," << r.best_val_acc << "," << r.steps_run << "," << r.wall_seconds
                    << "\n";
                std::cout << vn << " L=" << L << " A=" << A << " val=" << r.best_val_acc << "\n";
            }
    if (!csv) throw IoError("ablation.csv write failed");
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"co-attention audio-visual synchronization workbench"};
    app.require_subcommand(1);
    app.fallthrough(); // global flags may follow the subcommand

    std::string config_path, out_dir = "run";
    uint64_t seed = 1;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "config file (json)");
    app.add_option("--seed", seed, "run seed");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--set", overrides, "override config key, dotted path key=value");

    auto* gen = app.add_subcommand("gen-data", "write synthetic dataset files");
    auto* train = app.add_subcommand("train-pretext", "train the synchronization model");
    auto* eval = app.add_subcommand("eval-sync", "print synchronization accuracy");
    auto* loc = app.add_subcommand("localize", "write CAM / attention heatmaps");
    auto* fine = app.add_subcommand("finetune", "downstream classification");
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    auto* abl = app.add_subcommand("ablate", "sweep the (variant, L, A) grid");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    RunContext ctx;
    try {
        ctx.config = load_config(config_path);
        for (const std::string& kv : overrides) apply_override(ctx.config, kv);
        check_keys(ctx.config,
                   {"model", "data", "train", "eval", "localize", "finetune", "ablate", "seed",
                    "subcommand"},
                   "run config");
        ctx.seed = ctx.config.value("seed", seed);
        ctx.out_dir = out_dir;
        fs::create_directories(ctx.out_dir);

        if (gen->parsed()) return cmd_gen_data(ctx);
        if (train->parsed()) return cmd_train_pretext(ctx);
        if (eval->parsed()) return cmd_eval_sync(ctx);
        if (loc->parsed()) return cmd_localize(ctx);
        if (fine->parsed()) return cmd_finetune(ctx);
        if (grad->parsed()) return cmd_gradcheck(ctx);
        if (abl->parsed()) return cmd_ablate(ctx);
        std::cerr << "no subcommand\n";
        return 1;
    } catch (const std::exception& e) {
        ctx.cleanup_partial();
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
