#include "coattn/tasks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "coattn/serialize.hpp"

namespace coattn {

// ---- report json ----

std::string train_report_to_json(const TrainReport& r) {
    nlohmann::json j;
    j["losses"] = r.losses;
    nlohmann::json ta = nlohmann::json::array(), va = nlohmann::json::array();
    for (const auto& [s, a] : r.train_acc) ta.push_back({s, a});
    for (const auto& [s, a] : r.val_acc) va.push_back({s, a});
    j["train_acc"] = ta;
    j["val_acc"] = va;
    j["wall_seconds"] = r.wall_seconds;
    j["checkpoint_path"] = r.checkpoint_path;
    j["config_hash"] = r.config_hash;
    j["seed"] = r.seed;
    j["best_val_acc"] = r.best_val_acc;
    j["steps_run"] = r.steps_run;
    return j.dump(2);
}

TrainReport train_report_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile("bad train report: " + std::string(e.what()));
    }
    TrainReport r;
    r.losses = j.at("losses").get<std::vector<double>>();
    for (const auto& e : j.at("train_acc")) r.train_acc.emplace_back(e[0], e[1]);
    for (const auto& e : j.at("val_acc")) r.val_acc.emplace_back(e[0], e[1]);
    r.wall_seconds = j.at("wall_seconds").get<double>();
    r.checkpoint_path = j.at("checkpoint_path").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.seed = j.at("seed").get<uint64_t>();
    r.best_val_acc = j.at("best_val_acc").get<double>();
    r.steps_run = j.at("steps_run").get<int64_t>();
    return r;
}

// ---- evaluation ----

double evaluate_sync_with(const SyncDataset& ds,
                          const std::function<std::array<double, 2>(const SyncSample&)>& logits_fn) {
    if (ds.size() == 0) throw EmptyDataset("evaluate_sync on empty set");
    int64_t hits = 0;
    for (int64_t i = 0; i < ds.size(); ++i) {
        SyncSample s = ds.get(i);
        std::array<double, 2> z = logits_fn(s);
        int pred = z[1] > z[0] ? 1 : 0; // tie predicts class 0
        hits += pred == s.label ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

double evaluate_sync(const SyncDataset& ds, const AvsModel& model) {
    if (ds.size() == 0) throw EmptyDataset("evaluate_sync on empty set");
    int64_t hits = 0;
    const int64_t chunk = 16;
    for (int64_t at = 0; at < ds.size(); at += chunk) {
        int64_t end = std::min(ds.size(), at + chunk);
        std::vector<int64_t> idx(end - at);
        for (int64_t i = at; i < end; ++i) idx[i - at] = i;
        BatchTensors b = collect_batch(ds, idx);
        AvsForwardOut out = model.forward(b.audio, b.frames, Mode::eval);
        const double* z = out.logits.ptr();
        for (int64_t i = 0; i < end - at; ++i) {
            int pred = z[i * 2 + 1] > z[i * 2] ? 1 : 0;
            hits += pred == b.labels[i] ? 1 : 0;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

// ---- pretext training ----

namespace {

double eval_subset(const SyncDataset& ds, const AvsModel& model, int64_t cap) {
    if (ds.size() <= cap) return evaluate_sync(ds, model);
    std::vector<SyncSample> head;
    head.reserve(cap);
    for (int64_t i = 0; i < cap; ++i) head.push_back(ds.get(i));
    return evaluate_sync(SyncDataset::materialized(std::move(head)), model);
}

} // namespace

TrainReport train_pretext(const SyncDataset& train_set, const SyncDataset& val_set,
                          AvsModel& model, const TrainConfig& cfg) {
    if (train_set.size() == 0) throw EmptyDataset("empty training set");
    auto t0 = std::chrono::steady_clock::now();

    Optimizer opt(cfg.opt);
    double base_lr = cfg.opt.learning_rate;
    std::mt19937_64 dropout_rng(mix_seed(cfg.seed, 0xd409));

    TrainReport report;
    report.seed = cfg.seed;
    report.config_hash = model.config_hash();
    report.checkpoint_path = cfg.checkpoint_path;
    report.best_val_acc = -1.0;

    int64_t step = 0, epoch = 0;
    bool stop = false;
    while (!stop && step < cfg.max_steps) {
        auto batches =
            make_batches(train_set.size(), cfg.batch_size, mix_seed(cfg.seed, 0xbacc), epoch, true);
        if (batches.empty())
            throw EmptyDataset("training set smaller than one batch");
        for (const auto& idx : batches) {
            if (step >= cfg.max_steps) break;
            BatchTensors b = collect_batch(train_set, idx);
            model.params().zero_grad();
            double loss_value;
            {
                Tape tape;
                AvsForwardOut out = model.forward(b.audio, b.frames, Mode::train, &dropout_rng);
                Tensor loss = cross_entropy_logits(out.logits, b.labels);
                loss_value = loss.item();
                if (!std::isfinite(loss_value))
                    throw DivergenceDetected("loss is not finite at step " + std::to_string(step));
                backward(loss);
            }
            if (cfg.lr_halving_interval > 0)
                opt.config().learning_rate =
                    base_lr * std::pow(0.5, static_cast<double>(step / cfg.lr_halving_interval));
            opt.step(model.params());
            report.losses.push_back(loss_value);
            ++step;

            bool last_step = step >= cfg.max_steps;
            if (step % cfg.eval_every == 0 || last_step) {
                double tacc = eval_subset(train_set, model, 256);
                report.train_acc.emplace_back(step, tacc);
                if (val_set.size() > 0) {
                    double vacc = evaluate_sync(val_set, model);
                    report.val_acc.emplace_back(step, vacc);
                    if (vacc > report.best_val_acc) {
                        report.best_val_acc = vacc;
                        if (!cfg.checkpoint_path.empty())
                            save_checkpoint(cfg.checkpoint_path, model.params(),
                                            model.config_hash());
                    }
                }
                if (cfg.early_stop_train_acc > 0.0 && tacc >= cfg.early_stop_train_acc) {
                    stop = true;
                    break;
                }
            }
        }
        ++epoch;
    }
    if (!cfg.checkpoint_path.empty() && report.best_val_acc < 0.0)
        save_checkpoint(cfg.checkpoint_path, model.params(), model.config_hash());
    report.steps_run = step;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

TrainReport train_pretext(const SyncDataset& train_set, const SyncDataset& val_set,
                          const ModelConfig& model_cfg, const TrainConfig& cfg) {
    AvsModel model = AvsModel::init(model_cfg, cfg.seed);
    return train_pretext(train_set, val_set, model, cfg);
}

// ---- heatmaps ----

Tensor bilinear_upsample(const Tensor& grid, int64_t out_h, int64_t out_w) {
    if (grid.rank() != 2) throw ShapeMismatch("upsample expects a 2-D grid");
    int64_t gh = grid.shape[0], gw = grid.shape[1];
    Tensor out = zeros({out_h, out_w});
    const double* gp = grid.ptr();
    double* op = out.ptr();
    double sy = static_cast<double>(gh) / static_cast<double>(out_h);
    double sx = static_cast<double>(gw) / static_cast<double>(out_w);
    for (int64_t y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int64_t y0 = static_cast<int64_t>(std::floor(fy));
        double wy = fy - y0;
        int64_t y0c = std::clamp<int64_t>(y0, 0, gh - 1), y1c = std::clamp<int64_t>(y0 + 1, 0, gh - 1);
        for (int64_t x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int64_t x0 = static_cast<int64_t>(std::floor(fx));
            double wx = fx - x0;
            int64_t x0c = std::clamp<int64_t>(x0, 0, gw - 1),
                    x1c = std::clamp<int64_t>(x0 + 1, 0, gw - 1);
            op[y * out_w + x] = (1 - wy) * ((1 - wx) * gp[y0c * gw + x0c] + wx * gp[y0c * gw + x1c]) +
                                wy * ((1 - wx) * gp[y1c * gw + x0c] + wx * gp[y1c * gw + x1c]);
        }
    }
    return out;
}

Tensor normalized01(const Tensor& t) {
    Tensor out = t.clone();
    double lo = (*out.data)[0], hi = (*out.data)[0];
    for (double v : *out.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi - lo < 1e-15) {
        std::fill(out.data->begin(), out.data->end(), 0.0);
        return out;
    }
    for (double& v : *out.data) v = (v - lo) / (hi - lo);
    return out;
}

namespace {

void normalize01_inplace(Tensor& t) { t = normalized01(t); }

Heatmap finish_heatmap(Tensor grid, int64_t out_h, int64_t out_w, std::string source) {
    Heatmap hm;
    hm.upsampled = bilinear_upsample(grid, out_h, out_w);
    normalize01_inplace(hm.upsampled);
    hm.grid = std::move(grid);
    hm.source = std::move(source);
    return hm;
}

} // namespace

Heatmap cam_heatmap(const SyncSample& sample, const AvsModel& model, int64_t frame_index) {
    const ModelConfig& cfg = model.config();
    if (cfg.fusion_pool != FusionPool::gap)
        throw NoGapPathway("fusion head was configured without the GAP pathway");
    if (frame_index < 0 || frame_index >= cfg.frames)
        throw AxisOutOfRange("frame index " + std::to_string(frame_index));

    Tensor audio = reshape(sample.audio, {1, sample.audio.shape[0], sample.audio.shape[1]});
    Tensor frames = reshape(sample.frames, {1, sample.frames.shape[0], sample.frames.shape[1],
                                            sample.frames.shape[2], sample.frames.shape[3]});
    AvsForwardOut out = model.forward(audio, frames, Mode::eval);

    auto g = cfg.visual_grid();
    int64_t tg = g[0], hg = g[1], wg = g[2], d = cfg.d;
    const Tensor& hv = out.hidden.visual; // [1, T_v, d]
    if (hv.shape[1] != tg * hg * wg)
        throw ShapeMismatch("visual tokens no longer match the encoder grid (variant reshapes the stream)");

    // relu activation pattern of the first fusion layer for this sample
    Tensor pa = mean_axis(out.hidden.audio, 1);
    Tensor pv = mean_axis(out.hidden.visual, 1);
    Tensor cat = concat({pa, pv}, 1);
    const FusionWeights& fw = model.fusion();
    Tensor pre = linear(cat, fw.w1, fw.b1); // [1, F]
    int64_t F = pre.shape[1];

    // w[c] = sum_j W1[d + c, j] * active[j] * W2[j, sync]
    const double* w1 = fw.w1.ptr(); // [2d, F]
    const double* w2 = fw.w2.ptr(); // [F, 2]
    const double* prep = pre.ptr();
    std::vector<double> wc(d, 0.0);
    for (int64_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (int64_t j = 0; j < F; ++j)
            if (prep[j] > 0.0) acc += w1[(d + c) * F + j] * w2[j * 2 + 1];
        wc[c] = acc;
    }

    int64_t t_idx = frame_index * tg / cfg.frames;
    Tensor grid = zeros({hg, wg});
    const double* hvp = hv.ptr();
    double* gp = grid.ptr();
    for (int64_t y = 0; y < hg; ++y)
        for (int64_t x = 0; x < wg; ++x) {
            int64_t token = (t_idx * hg + y) * wg + x;
            double acc = 0.0;
            for (int64_t c = 0; c < d; ++c) acc += wc[c] * hvp[token * d + c];
            gp[y * wg + x] = acc > 0.0 ? acc : 0.0; // relu
        }
    return finish_heatmap(std::move(grid), cfg.frame_size, cfg.frame_size, "cam");
}

std::vector<Heatmap> attention_heatmaps(const SyncSample& sample, const AvsModel& model,
                                        int64_t layer, int64_t head) {
    const ModelConfig& cfg = model.config();
    Tensor audio = reshape(sample.audio, {1, sample.audio.shape[0], sample.audio.shape[1]});
    Tensor frames = reshape(sample.frames, {1, sample.frames.shape[0], sample.frames.shape[1],
                                            sample.frames.shape[2], sample.frames.shape[3]});
    AvsForwardOut out = model.forward(audio, frames, Mode::eval, nullptr, /*record=*/true);

    const AttnRecordEntry* entry = nullptr;
    for (const AttnRecordEntry& e : out.record)
        if (e.layer == layer && e.visual_keys && (e.stage == "cma_a" || e.stage == "aga"))
            entry = &e;
    if (!entry)
        throw NoAttentionRecord("no audio-guided direction with visual keys at layer " +
                                std::to_string(layer));

    auto g = cfg.visual_grid();
    int64_t tg = g[0], hg = g[1], wg = g[2];
    const Tensor& w = entry->per_head_weights; // [m, 1, n_q, n_k]
    int64_t m = w.shape[0], nq = w.shape[2], nk = w.shape[3];
    if (nk != tg * hg * wg) throw ShapeMismatch("attention keys do not match the visual grid");
    if (head >= m) throw AxisOutOfRange("head " + std::to_string(head) + " of " + std::to_string(m));

    std::vector<Heatmap> maps;
    for (int64_t h = (head < 0 ? 0 : head); h <= (head < 0 ? m - 1 : head); ++h) {
        // mean over audio queries -> per-visual-token score, summed over grid time
        Tensor grid = zeros({hg, wg});
        double* gp = grid.ptr();
        const double* wp = w.ptr() + h * nq * nk;
        for (int64_t k = 0; k < nk; ++k) {
            double acc = 0.0;
            for (int64_t q = 0; q < nq; ++q) acc += wp[q * nk + k];
            acc /= static_cast<double>(nq);
            int64_t spatial = k % (hg * wg);
            gp[spatial] += acc;
        }
        maps.push_back(finish_heatmap(std::move(grid), cfg.frame_size, cfg.frame_size,
                                      "attention(l" + std::to_string(layer) + ",h" +
                                          std::to_string(h) + ")"));
    }
    return maps;
}

bool pointing_hit(const Heatmap& hm, int true_row, int true_col, int cell_grid) {
    int64_t H = hm.upsampled.shape[0], W = hm.upsampled.shape[1];
    const double* p = hm.upsampled.ptr();
    int64_t best = 0;
    for (int64_t i = 1; i < H * W; ++i)
        if (p[i] > p[best]) best = i;
    double cell_h = static_cast<double>(H) / cell_grid;
    double cell_w = static_cast<double>(W) / cell_grid;
    int row = static_cast<int>(static_cast<double>(best / W) / cell_h);
    int col = static_cast<int>(static_cast<double>(best % W) / cell_w);
    return std::abs(row - true_row) <= 1 && std::abs(col - true_col) <= 1;
}

// ---- image files ----

void write_pgm(const std::string& path, const Tensor& gray) {
    if (gray.rank() != 2) throw ShapeMismatch("pgm expects [H,W]");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path);
    os << "P5\n" << gray.shape[1] << " " << gray.shape[0] << "\n255\n";
    const double* p = gray.ptr();
    for (int64_t i = 0; i < gray.numel(); ++i) {
        double v = std::clamp(p[i], 0.0, 1.0);
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
    if (!os) throw IoError("pgm write failed: " + path);
}

void write_ppm_overlay(const std::string& path, const Tensor& frame, const Tensor& heat) {
    if (frame.rank() != 3 || frame.shape[2] != 3) throw ShapeMismatch("ppm frame must be [H,W,3]");
    if (heat.shape != Shape{frame.shape[0], frame.shape[1]})
        throw ShapeMismatch("heatmap size does not match the frame");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path);
    int64_t H = frame.shape[0], W = frame.shape[1];
    os << "P6\n" << W << " " << H << "\n255\n";
    const double* fp = frame.ptr();
    const double* hp = heat.ptr();
    for (int64_t i = 0; i < H * W; ++i) {
        double h = std::clamp(hp[i], 0.0, 1.0);
        double rgb[3] = {0.5 * fp[i * 3] + 0.5 * h, 0.5 * fp[i * 3 + 1], 0.5 * fp[i * 3 + 2]};
        for (double v : rgb)
            os.put(static_cast<char>(
                static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
    }
    if (!os) throw IoError("ppm write failed: " + path);
}

// ---- downstream classification ----

namespace {

struct ActionClassPattern {
    std::array<int, 2> cell;
    double tone;
};

// (source cell, tone) signature per class; cells are distinct corners
const ActionClassPattern kActionClasses[4] = {
    {{0, 0}, 280.0},
    {{3, 3}, 470.0},
    {{0, 3}, 730.0},
    {{3, 0}, 470.0},
};

} // namespace

LabeledClip generate_action_sample(const ActionGenConfig& cfg, int64_t index) {
    if (cfg.n_classes < 2 || cfg.n_classes > 4)
        throw ConfigMismatch("action classes must be 2..4");
    uint64_t world_seed = mix_seed(cfg.seed, 0xac7 + 2 * static_cast<uint64_t>(index));
    uint64_t pick_seed = mix_seed(cfg.seed, 0xac7 + 2 * static_cast<uint64_t>(index) + 1);
    std::mt19937_64 rng(pick_seed);
    int64_t label = std::uniform_int_distribution<int64_t>(0, cfg.n_classes - 1)(rng);
    const ActionClassPattern& pat = kActionClasses[label];

    WorldSpec spec;
    spec.duration_units = cfg.duration_units;
    spec.n_sources = 1;
    spec.source_cells = {pat.cell};
    spec.event_rate = cfg.event_rate;
    spec.tone_frequencies = {pat.tone};
    spec.noise_level = cfg.noise_level;
    spec.cell_grid = cfg.cell_grid;
    spec.seed = world_seed;
    World world = generate_world(spec);

    double start =
        std::uniform_real_distribution<double>(0.0, cfg.duration_units - cfg.clip.clip_units)(rng);
    RenderOut r = render_clip(world, start, start, cfg.clip);
    LabeledClip clip;
    clip.audio = std::move(r.audio);
    clip.frames = std::move(r.frames);
    clip.label = label;
    return clip;
}

ActionDataset ActionDataset::lazy(const ActionGenConfig& cfg, int64_t count) {
    ActionDataset d;
    d.count_ = count;
    d.gen_ = cfg;
    return d;
}

ActionDataset ActionDataset::materialized(std::vector<LabeledClip> clips) {
    ActionDataset d;
    d.count_ = static_cast<int64_t>(clips.size());
    d.clips_ = std::move(clips);
    return d;
}

LabeledClip ActionDataset::get(int64_t i) const {
    if (i < 0 || i >= count_) throw AxisOutOfRange("action dataset index");
    if (clips_) return (*clips_)[i];
    return generate_action_sample(*gen_, i);
}

ClassifierModel ClassifierModel::init(const ModelConfig& cfg, int64_t n_classes,
                                      int64_t head_width, uint64_t seed) {
    if (n_classes < 2) throw ConfigMismatch("classifier needs at least 2 classes");
    ClassifierModel m;
    m.base_ = AvsModel::init(cfg, seed);
    m.n_classes_ = n_classes;
    m.dropout_ = 0.5; // imposed during fine-tuning regardless of the pretext head
    m.hash_ = fnv1a_hex(model_config_to_json(cfg) + "#cls" + std::to_string(n_classes) + "x" +
                        std::to_string(head_width));
    // shared trunk (everything except the pretext fusion head) plus a fresh head
    for (const ParamEntry& e : m.base_.params().entries())
        if (e.name.rfind("fusion.", 0) != 0) m.params_.add(e.name, e.tensor, e.decay);
    std::mt19937_64 rng(mix_seed(seed, 0xc1a55));
    m.w1_ = m.params_.add("cls.w1", he_normal({2 * cfg.d, head_width}, 2 * cfg.d, rng));
    m.b1_ = m.params_.add("cls.b1", zeros({head_width}), false);
    m.w2_ = m.params_.add("cls.w2", xavier_uniform({head_width, n_classes}, head_width, n_classes, rng));
    m.b2_ = m.params_.add("cls.b2", zeros({n_classes}), false);
    return m;
}

ClassifierModel ClassifierModel::from_pretrained(const ModelConfig& cfg,
                                                 const std::string& checkpoint, int64_t n_classes,
                                                 int64_t head_width, uint64_t seed) {
    ClassifierModel m = init(cfg, n_classes, head_width, seed);
    load_checkpoint(checkpoint, m.base_.params(), m.base_.config_hash());
    return m;
}

Tensor ClassifierModel::forward(const Tensor& audio, const Tensor& frames, Mode mode,
                                std::mt19937_64* rng, bool vision_only) const {
    Tensor fa = base_.audio_encode(audio);
    if (vision_only) fa = scale(fa, 0.0);
    Tensor fv = base_.visual_encode(frames);
    StreamFeatures h = base_.stack().forward({fa, fv}, nullptr, vision_only);
    Tensor cat = concat({mean_axis(h.audio, 1), mean_axis(h.visual, 1)}, 1);
    Tensor hid = relu(linear(cat, w1_, b1_));
    if (mode == Mode::train && dropout_ > 0.0) {
        if (!rng) throw ConfigMismatch("train-mode classifier needs an rng");
        hid = dropout(hid, dropout_, mode, *rng);
    }
    return linear(hid, w2_, b2_);
}

namespace {

BatchTensors collect_action_batch(const ActionDataset& ds, const std::vector<int64_t>& indices) {
    if (indices.empty()) throw EmptyDataset("empty batch");
    LabeledClip first = ds.get(indices[0]);
    int64_t B = static_cast<int64_t>(indices.size());
    BatchTensors out;
    out.audio = zeros({B, first.audio.shape[0], first.audio.shape[1]});
    out.frames =
        zeros({B, first.frames.shape[0], first.frames.shape[1], first.frames.shape[2], 3});
    out.labels.resize(B);
    int64_t an = first.audio.numel(), fn = first.frames.numel();
    for (int64_t b = 0; b < B; ++b) {
        LabeledClip c = b == 0 ? first : ds.get(indices[b]);
        std::copy(c.audio.ptr(), c.audio.ptr() + an, out.audio.ptr() + b * an);
        std::copy(c.frames.ptr(), c.frames.ptr() + fn, out.frames.ptr() + b * fn);
        out.labels[b] = c.label;
    }
    return out;
}

double evaluate_classifier(const ActionDataset& ds, const ClassifierModel& model,
                           bool vision_only) {
    int64_t hits = 0;
    const int64_t chunk = 16;
    for (int64_t at = 0; at < ds.size(); at += chunk) {
        int64_t end = std::min(ds.size(), at + chunk);
        std::vector<int64_t> idx(end - at);
        for (int64_t i = at; i < end; ++i) idx[i - at] = i;
        BatchTensors b = collect_action_batch(ds, idx);
        Tensor logits = model.forward(b.audio, b.frames, Mode::eval, nullptr, vision_only);
        const double* z = logits.ptr();
        int64_t C = logits.shape[1];
        for (int64_t i = 0; i < end - at; ++i) {
            int64_t best = 0;
            for (int64_t c = 1; c < C; ++c)
                if (z[i * C + c] > z[i * C + best]) best = c;
            hits += best == b.labels[i] ? 1 : 0;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

} // namespace

TrainReport finetune_classifier(const ActionDataset& train_set, const ActionDataset& val_set,
                                const ModelConfig& base_cfg, const std::string& pretext_checkpoint,
                                const FinetuneConfig& cfg, ClassifierModel* out_model) {
    if (cfg.n_classes < 2) throw ConfigMismatch("n_classes must be >= 2");
    if (train_set.size() == 0) throw EmptyDataset("empty labeled set");
    auto t0 = std::chrono::steady_clock::now();

    ClassifierModel model =
        pretext_checkpoint.empty()
            ? ClassifierModel::init(base_cfg, cfg.n_classes, cfg.head_width, cfg.seed)
            : ClassifierModel::from_pretrained(base_cfg, pretext_checkpoint, cfg.n_classes,
                                               cfg.head_width, cfg.seed);

    OptimizerConfig oc = cfg.opt;
    Optimizer opt(oc);
    double base_lr = oc.learning_rate;
    std::mt19937_64 dropout_rng(mix_seed(cfg.seed, 0xd41));

    TrainReport report;
    report.seed = cfg.seed;
    report.config_hash = model.config_hash();
    report.checkpoint_path = cfg.checkpoint_path;
    report.best_val_acc = -1.0;

    int64_t step = 0, epoch = 0;
    while (step < cfg.max_steps) {
        auto batches =
            make_batches(train_set.size(), cfg.batch_size, mix_seed(cfg.seed, 0xbadd), epoch, true);
        if (batches.empty()) throw EmptyDataset("labeled set smaller than one batch");
        for (const auto& idx : batches) {
            if (step >= cfg.max_steps) break;
            BatchTensors b = collect_action_batch(train_set, idx);
            model.params().zero_grad();
            double loss_value;
            {
                Tape tape;
                Tensor logits =
                    model.forward(b.audio, b.frames, Mode::train, &dropout_rng, cfg.vision_only);
                Tensor loss = cross_entropy_logits(logits, b.labels);
                loss_value = loss.item();
                if (!std::isfinite(loss_value))
                    throw DivergenceDetected("loss is not finite at step " + std::to_string(step));
                backward(loss);
            }
            if (cfg.lr_halving_interval > 0)
                opt.config().learning_rate =
                    base_lr * std::pow(0.5, static_cast<double>(step / cfg.lr_halving_interval));
            opt.step(model.params());
            report.losses.push_back(loss_value);
            ++step;
            if (step % cfg.eval_every == 0 || step >= cfg.max_steps) {
                if (val_set.size() > 0) {
                    double vacc = evaluate_classifier(val_set, model, cfg.vision_only);
                    report.val_acc.emplace_back(step, vacc);
                    if (vacc > report.best_val_acc) {
                        report.best_val_acc = vacc;
                        if (!cfg.checkpoint_path.empty())
                            save_checkpoint(cfg.checkpoint_path, model.params(),
                                            model.config_hash());
                    }
                }
            }
        }
        ++epoch;
    }
    report.steps_run = step;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (out_model) *out_model = std::move(model);
    return report;
}

std::vector<int64_t> subclip_offsets(int64_t slack, int64_t n) {
    std::vector<int64_t> offsets;
    if (slack <= 0 || n <= 1) {
        offsets.push_back(0);
        return offsets;
    }
    for (int64_t i = 0; i < n; ++i)
        offsets.push_back(static_cast<int64_t>(
            std::llround(static_cast<double>(i * slack) / static_cast<double>(n - 1))));
    return offsets;
}

std::vector<double> predict_video(const LabeledClip& long_clip, const ClassifierModel& model,
                                  int64_t n_subclips, bool vision_only) {
    const ModelConfig& cfg = model.base().config();
    int64_t t = cfg.frames, S = cfg.audio_samples;
    int64_t T_long = long_clip.frames.shape[0];
    int64_t S_long = long_clip.audio.shape[0];
    if (T_long < t || S_long < S) throw TooShort("clip shorter than one subclip");
    int64_t spf = S / t; // samples per frame
    std::vector<int64_t> offsets = subclip_offsets(T_long - t, n_subclips);

    int64_t C = model.n_classes();
    std::vector<double> mean_probs(C, 0.0);
    for (int64_t off : offsets) {
        Tensor fsub = slice(long_clip.frames, 0, off, off + t);
        Tensor asub = slice(long_clip.audio, 0, off * spf, off * spf + S);
        Tensor logits = model.forward(reshape(asub, {1, S, 2}),
                                      reshape(fsub, {1, t, cfg.frame_size, cfg.frame_size, 3}),
                                      Mode::eval, nullptr, vision_only);
        Tensor probs = softmax_lastdim(logits);
        const double* p = probs.ptr();
        for (int64_t c = 0; c < C; ++c) mean_probs[c] += p[c];
    }
    for (double& v : mean_probs) v /= static_cast<double>(offsets.size());
    return mean_probs;
}

} // namespace coattn
