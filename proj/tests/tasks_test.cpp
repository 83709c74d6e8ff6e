#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "coattn/serialize.hpp"
#include "coattn/tasks.hpp"

using namespace coattn;

namespace {

// model and matching data small enough for training loops inside unit tests
ModelConfig micro_model() {
    ModelConfig mc = ModelConfig::desk();
    mc.d = 8;
    mc.heads = 2;
    mc.depth = 1;
    mc.ffn_width = 16;
    mc.fusion_width = 16;
    mc.frames = 2;
    mc.frame_size = 8;
    mc.audio_samples = 64;
    mc.audio_layers.clear();
    mc.visual_layers.clear();
    EncoderLayer a;
    a.conv = Conv3dSpec{4, {9, 1, 1}, {16, 1, 1}, {4, 0, 0}, true};
    mc.audio_layers.push_back(a);
    EncoderLayer v;
    v.conv = Conv3dSpec{4, {2, 4, 4}, {2, 4, 4}, {0, 0, 0}, true};
    mc.visual_layers.push_back(v);
    return mc;
}

DataGenConfig micro_data(uint64_t seed) {
    DataGenConfig g;
    g.seed = seed;
    g.clip.frames = 2;
    g.clip.frame_size = 8;
    g.clip.audio_samples = 64;
    return g;
}

ActionGenConfig micro_actions(uint64_t seed) {
    ActionGenConfig g;
    g.seed = seed;
    g.clip.frames = 2;
    g.clip.frame_size = 8;
    g.clip.audio_samples = 64;
    return g;
}

} // namespace

TEST_CASE("evaluate_sync_with: perfect, inverted, ties, logit-shift invariance") {
    SyncDataset ds = SyncDataset::lazy(micro_data(31), 24);
    auto perfect = [](const SyncSample& s) {
        return std::array<double, 2>{s.label == 0 ? 1.0 : 0.0, s.label == 1 ? 1.0 : 0.0};
    };
    CHECK(evaluate_sync_with(ds, perfect) == doctest::Approx(1.0));

    auto inverted = [](const SyncSample& s) {
        return std::array<double, 2>{s.label == 1 ? 1.0 : 0.0, s.label == 0 ? 1.0 : 0.0};
    };
    CHECK(evaluate_sync_with(ds, inverted) == doctest::Approx(0.0));

    // equal logits predict class 0
    auto tie = [](const SyncSample&) { return std::array<double, 2>{0.7, 0.7}; };
    double base_rate = 0.0;
    for (int64_t i = 0; i < ds.size(); ++i) base_rate += ds.get(i).label == 0 ? 1.0 : 0.0;
    base_rate /= ds.size();
    CHECK(evaluate_sync_with(ds, tie) == doctest::Approx(base_rate));

    // adding a constant to both logits never changes the argmax
    auto biased = [&](const SyncSample& s) {
        auto z = perfect(s);
        return std::array<double, 2>{z[0] + 123.0, z[1] + 123.0};
    };
    CHECK(evaluate_sync_with(ds, biased) == evaluate_sync_with(ds, perfect));
}

TEST_CASE("evaluate_sync: random-init desk model sits near chance on balanced data") {
    DataGenConfig g;
    g.seed = 404;
    SyncDataset ds = SyncDataset::lazy(g, 400);
    AvsModel model = AvsModel::init(ModelConfig::desk(), 999);
    double acc = evaluate_sync(ds, model);
    CHECK(acc > 0.45);
    CHECK(acc < 0.55);
}

TEST_CASE("train_pretext: lr=0 leaves parameters bit-identical") {
    SyncDataset train = SyncDataset::lazy(micro_data(41), 12);
    AvsModel model = AvsModel::init(micro_model(), 42);
    std::vector<std::vector<double>> before;
    for (const ParamEntry& e : model.params().entries()) before.push_back(*e.tensor.data);
    TrainConfig tc;
    tc.max_steps = 6;
    tc.batch_size = 4;
    tc.eval_every = 100;
    tc.seed = 42;
    tc.opt.learning_rate = 0.0;
    tc.opt.weight_decay = 0.0;
    train_pretext(train, SyncDataset::materialized({}), model, tc);
    size_t pi = 0;
    for (const ParamEntry& e : model.params().entries()) {
        const std::vector<double>& now = *e.tensor.data;
        for (size_t i = 0; i < now.size(); ++i) CHECK(now[i] == before[pi][i]);
        ++pi;
    }
}

TEST_CASE("train_pretext: identical seeds reproduce the loss curve bit-for-bit") {
    SyncDataset train = SyncDataset::lazy(micro_data(51), 16);
    SyncDataset val = SyncDataset::lazy(micro_data(52), 8);
    TrainConfig tc;
    tc.max_steps = 12;
    tc.batch_size = 4;
    tc.eval_every = 6;
    tc.seed = 5;
    TrainReport r1 = train_pretext(train, val, micro_model(), tc);
    TrainReport r2 = train_pretext(train, val, micro_model(), tc);
    REQUIRE(r1.losses.size() == r2.losses.size());
    for (size_t i = 0; i < r1.losses.size(); ++i) CHECK(r1.losses[i] == r2.losses[i]);
    REQUIRE(r1.val_acc.size() == r2.val_acc.size());
    for (size_t i = 0; i < r1.val_acc.size(); ++i)
        CHECK(r1.val_acc[i].second == r2.val_acc[i].second);
}

TEST_CASE("train_pretext: diverging loss raises DivergenceDetected") {
    SyncDataset train = SyncDataset::lazy(micro_data(61), 8);
    AvsModel model = AvsModel::init(micro_model(), 6);
    TrainConfig tc;
    tc.max_steps = 40;
    tc.batch_size = 4;
    tc.seed = 6;
    // the decay term ramps the update until parameters overflow to inf,
    // after which the forward pass produces a NaN loss
    tc.opt.learning_rate = 1e308;
    tc.opt.weight_decay = 1e-5;
    CHECK_THROWS_AS(train_pretext(train, SyncDataset::materialized({}), model, tc),
                    DivergenceDetected);
}

TEST_CASE("train report json round trip") {
    TrainReport r;
    r.losses = {0.7, 0.6, 0.5};
    r.train_acc = {{2, 0.75}};
    r.val_acc = {{2, 0.5}, {4, 0.625}};
    r.wall_seconds = 1.25;
    r.checkpoint_path = "x.ckpt";
    r.config_hash = "abc";
    r.seed = 9;
    r.best_val_acc = 0.625;
    r.steps_run = 4;
    TrainReport b = train_report_from_json(train_report_to_json(r));
    CHECK(b.losses == r.losses);
    CHECK(b.train_acc == r.train_acc);
    CHECK(b.val_acc == r.val_acc);
    CHECK(b.wall_seconds == r.wall_seconds);
    CHECK(b.checkpoint_path == r.checkpoint_path);
    CHECK(b.config_hash == r.config_hash);
    CHECK(b.seed == r.seed);
    CHECK(b.best_val_acc == r.best_val_acc);
    CHECK(b.steps_run == r.steps_run);
    CHECK_THROWS_AS(train_report_from_json("not json"), CorruptFile);
}

TEST_CASE("cam_heatmap: degenerate input zeros, range, classifier-scale invariance") {
    ModelConfig mc = micro_model();
    mc.positional = Positional::none; // constant input -> constant tokens -> constant grid
    AvsModel flat = AvsModel::init(mc, 71);
    SyncSample constant;
    constant.audio = zeros({64, 2});
    constant.frames = full({2, 8, 8, 3}, 0.5);
    constant.label = 1;
    Heatmap zero_map = cam_heatmap(constant, flat, 0);
    for (double v : *zero_map.upsampled.data) CHECK(v == 0.0);

    ModelConfig mp = micro_model();
    AvsModel model = AvsModel::init(mp, 72);
    SyncSample s = generate_sample(micro_data(73), 0);
    Heatmap hm = cam_heatmap(s, model, 1);
    REQUIRE(hm.upsampled.shape == Shape{8, 8});
    for (double v : *hm.upsampled.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }

    // uniform positive scaling of the final classifier weights
    AvsModel scaled = AvsModel::init(mp, 72);
    for (double& v : *scaled.params().find("fusion.w2")->tensor.data) v *= 3.7;
    Heatmap hs = cam_heatmap(s, scaled, 1);
    for (int64_t i = 0; i < hm.upsampled.numel(); ++i)
        CHECK((*hs.upsampled.data)[i] == doctest::Approx((*hm.upsampled.data)[i]).epsilon(1e-9));

    CHECK_THROWS_AS(cam_heatmap(s, model, 99), AxisOutOfRange);

    ModelConfig flat_pool = micro_model();
    flat_pool.fusion_pool = FusionPool::flatten;
    AvsModel no_gap = AvsModel::init(flat_pool, 74);
    CHECK_THROWS_AS(cam_heatmap(s, no_gap, 0), NoGapPathway);
}

TEST_CASE("attention_heatmaps: per-head normalization, head count, VGA wiring check") {
    ModelConfig mc = micro_model();
    SyncSample s = generate_sample(micro_data(81), 1);

    AvsModel cma = AvsModel::init(mc, 82);
    std::vector<Heatmap> maps = attention_heatmaps(s, cma, 0, -1);
    CHECK(maps.size() == 2); // one per head
    for (const Heatmap& hm : maps) {
        double sum = 0.0;
        for (double v : *hm.grid.data) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-6); // mean of softmax rows, time-summed
    }
    CHECK(attention_heatmaps(s, cma, 0, 1).size() == 1);
    CHECK_THROWS_AS(attention_heatmaps(s, cma, 0, 5), AxisOutOfRange);
    CHECK_THROWS_AS(attention_heatmaps(s, cma, 3, -1), NoAttentionRecord);

    ModelConfig am = mc;
    am.variant = Variant::AGA;
    AvsModel aga = AvsModel::init(am, 83);
    CHECK(attention_heatmaps(s, aga, 0, -1).size() == 2);

    // a pure-VGA model has no direction with visual keys
    ModelConfig vm = mc;
    vm.variant = Variant::VGA;
    AvsModel vga = AvsModel::init(vm, 84);
    CHECK_THROWS_AS(attention_heatmaps(s, vga, 0, -1), NoAttentionRecord);
}

TEST_CASE("pointing_hit: 3x3 cell neighborhood semantics") {
    Heatmap hm;
    hm.upsampled = zeros({32, 32});
    // put the argmax in cell (1, 2) of a 4x4 grid: pixel (12, 20)
    (*hm.upsampled.data)[12 * 32 + 20] = 1.0;
    CHECK(pointing_hit(hm, 1, 2, 4));
    CHECK(pointing_hit(hm, 0, 1, 4));
    CHECK(pointing_hit(hm, 2, 3, 4));
    CHECK(!pointing_hit(hm, 3, 0, 4));
    CHECK(!pointing_hit(hm, 1, 0, 4));
}

TEST_CASE("pgm and ppm writers produce well-formed images") {
    Tensor gray = zeros({4, 6});
    for (int64_t i = 0; i < 24; ++i) (*gray.data)[i] = i / 23.0;
    write_pgm("/tmp/coattn_test.pgm", gray);
    std::ifstream pgm("/tmp/coattn_test.pgm", std::ios::binary);
    std::string magic, dims;
    std::getline(pgm, magic);
    CHECK(magic == "P5");
    std::getline(pgm, dims);
    CHECK(dims == "6 4");
    std::getline(pgm, dims);
    CHECK(dims == "255");
    std::string payload((std::istreambuf_iterator<char>(pgm)), std::istreambuf_iterator<char>());
    REQUIRE(payload.size() == 24);
    CHECK(static_cast<unsigned char>(payload[0]) == 0);
    CHECK(static_cast<unsigned char>(payload[23]) == 255);

    Tensor frame = full({4, 6, 3}, 0.2);
    write_ppm_overlay("/tmp/coattn_test.ppm", frame, gray);
    std::ifstream ppm("/tmp/coattn_test.ppm", std::ios::binary);
    std::getline(ppm, magic);
    CHECK(magic == "P6");
    std::getline(ppm, dims);
    std::getline(ppm, dims);
    std::string rgb((std::istreambuf_iterator<char>(ppm)), std::istreambuf_iterator<char>());
    REQUIRE(rgb.size() == 72);
    // red channel carries the blended heat, green/blue only the frame
    CHECK(static_cast<unsigned char>(rgb[71]) == static_cast<unsigned char>(std::lround(0.1 * 255)));
    CHECK(static_cast<unsigned char>(rgb[69]) ==
          static_cast<unsigned char>(std::lround((0.5 * 0.2 + 0.5) * 255)));
    std::remove("/tmp/coattn_test.pgm");
    std::remove("/tmp/coattn_test.ppm");
}

TEST_CASE("action samples: labels in range, deterministic, class count validated") {
    ActionGenConfig g = micro_actions(91);
    LabeledClip a = generate_action_sample(g, 0);
    LabeledClip b = generate_action_sample(g, 0);
    CHECK(a.label == b.label);
    for (int64_t i = 0; i < a.frames.numel(); ++i)
        CHECK((*a.frames.data)[i] == (*b.frames.data)[i]);
    for (int64_t i = 0; i < 32; ++i) {
        LabeledClip c = generate_action_sample(g, i);
        CHECK(c.label >= 0);
        CHECK(c.label < g.n_classes);
    }
    ActionGenConfig bad = g;
    bad.n_classes = 1;
    CHECK_THROWS_AS(generate_action_sample(bad, 0), ConfigMismatch);
}

TEST_CASE("classifier model: head shapes, vision-only mode, n_classes validation") {
    ModelConfig mc = micro_model();
    CHECK_THROWS_AS(ClassifierModel::init(mc, 1, 16, 5), ConfigMismatch);

    ClassifierModel m = ClassifierModel::init(mc, 4, 16, 5);
    std::mt19937_64 rng(6);
    Tensor audio = randn({2, 64, 2}, rng, 0.3);
    Tensor frames = rand_uniform({2, 2, 8, 8, 3}, rng);
    Tensor logits = m.forward(audio, frames, Mode::eval, nullptr);
    REQUIRE(logits.shape == Shape{2, 4});
    for (double v : *logits.data) CHECK(std::isfinite(v));

    // vision-only: audio activations zeroed, still finite
    Tensor vlogits = m.forward(audio, frames, Mode::eval, nullptr, /*vision_only=*/true);
    REQUIRE(vlogits.shape == Shape{2, 4});
    for (double v : *vlogits.data) CHECK(std::isfinite(v));
    // and the audio input no longer matters
    Tensor other = m.forward(scale(audio, 5.0), frames, Mode::eval, nullptr, true);
    for (int64_t i = 0; i < 8; ++i)
        CHECK((*vlogits.data)[i] == doctest::Approx((*other.data)[i]).epsilon(1e-12));

    // the pretext fusion head is not part of the fine-tuned parameter set
    for (const ParamEntry& e : m.params().entries())
        CHECK(e.name.rfind("fusion.", 0) != 0);
}

TEST_CASE("finetune_classifier: runs, reports, rejects n_classes < 2") {
    ActionDataset train = ActionDataset::lazy(micro_actions(101), 16);
    ActionDataset val = ActionDataset::lazy(micro_actions(102), 8);
    FinetuneConfig fc;
    fc.n_classes = 4;
    fc.head_width = 16;
    fc.max_steps = 8;
    fc.batch_size = 4;
    fc.eval_every = 4;
    fc.seed = 11;
    fc.opt.kind = OptKind::adam;
    fc.opt.learning_rate = 3e-4;
    TrainReport r = finetune_classifier(train, val, micro_model(), "", fc);
    CHECK(r.steps_run == 8);
    CHECK(r.losses.size() == 8);
    CHECK(r.best_val_acc >= 0.0);

    FinetuneConfig bad = fc;
    bad.n_classes = 1;
    CHECK_THROWS_AS(finetune_classifier(train, val, micro_model(), "", bad), ConfigMismatch);
}

TEST_CASE("subclip_offsets: n=25 over slack 48 gives the even grid") {
    std::vector<int64_t> offsets = subclip_offsets(48, 25);
    REQUIRE(offsets.size() == 25);
    for (int64_t i = 0; i < 25; ++i) CHECK(offsets[i] == 2 * i);
    CHECK(subclip_offsets(0, 25) == std::vector<int64_t>{0});
}

TEST_CASE("predict_video: single-window identity, constant-content invariance, averaging") {
    ModelConfig mc = micro_model();
    ClassifierModel m = ClassifierModel::init(mc, 3, 16, 7);

    // exactly one subclip long: equals the single forward's softmax
    LabeledClip clip;
    std::mt19937_64 rng(8);
    clip.audio = randn({64, 2}, rng, 0.3);
    clip.frames = rand_uniform({2, 8, 8, 3}, rng);
    std::vector<double> probs = predict_video(clip, m, 25);
    Tensor single = softmax_lastdim(
        m.forward(reshape(clip.audio, {1, 64, 2}), reshape(clip.frames, {1, 2, 8, 8, 3}),
                  Mode::eval, nullptr));
    REQUIRE(probs.size() == 3);
    double psum = 0.0;
    for (int64_t c = 0; c < 3; ++c) {
        CHECK(probs[c] == doctest::Approx((*single.data)[c]).epsilon(1e-12));
        psum += probs[c];
    }
    CHECK(psum == doctest::Approx(1.0).epsilon(1e-9));

    // constant content: every subclip identical, average equals any one of them
    LabeledClip constant;
    constant.audio = full({64 * 3, 2}, 0.1);
    constant.frames = full({6, 8, 8, 3}, 0.4);
    std::vector<double> avg = predict_video(constant, m, 5);
    LabeledClip one;
    one.audio = full({64, 2}, 0.1);
    one.frames = full({2, 8, 8, 3}, 0.4);
    std::vector<double> single2 = predict_video(one, m, 1);
    for (int64_t c = 0; c < 3; ++c) CHECK(avg[c] == doctest::Approx(single2[c]).epsilon(1e-9));

    // averaging matches an independent recomputation over the same offsets
    LabeledClip longer;
    std::mt19937_64 rng2(9);
    longer.audio = randn({64 * 2, 2}, rng2, 0.3);
    longer.frames = rand_uniform({4, 8, 8, 3}, rng2);
    std::vector<double> got = predict_video(longer, m, 3);
    std::vector<double> want(3, 0.0);
    for (int64_t off : subclip_offsets(2, 3)) {
        Tensor fa = slice(longer.audio, 0, off * 32, off * 32 + 64);
        Tensor fv = slice(longer.frames, 0, off, off + 2);
        Tensor sm = softmax_lastdim(m.forward(reshape(fa, {1, 64, 2}),
                                              reshape(fv, {1, 2, 8, 8, 3}), Mode::eval, nullptr));
        for (int64_t c = 0; c < 3; ++c) want[c] += (*sm.data)[c];
    }
    for (int64_t c = 0; c < 3; ++c) CHECK(got[c] == doctest::Approx(want[c] / 3.0).epsilon(1e-12));

    // too short
    LabeledClip tiny;
    tiny.audio = full({32, 2}, 0.0);
    tiny.frames = full({1, 8, 8, 3}, 0.0);
    CHECK_THROWS_AS(predict_video(tiny, m, 25), TooShort);
}

TEST_CASE("finetune improves over scratch with a pretrained trunk" * doctest::skip(false)) {
    // covered at realistic scale behind the slow gate; here: wiring smoke only
    ActionGenConfig two = micro_actions(111);
    two.n_classes = 2;
    ActionDataset train = ActionDataset::lazy(two, 12);
    FinetuneConfig fc;
    fc.n_classes = 2;
    fc.head_width = 8;
    fc.max_steps = 4;
    fc.batch_size = 4;
    fc.seed = 3;
    fc.opt.kind = OptKind::adam;
    ClassifierModel out;
    ActionGenConfig two_val = micro_actions(112);
    two_val.n_classes = 2;
    TrainReport r = finetune_classifier(train, ActionDataset::lazy(two_val, 4),
                                        micro_model(), "", fc, &out);
    CHECK(out.n_classes() == 2);
    CHECK(r.steps_run == 4);
}
