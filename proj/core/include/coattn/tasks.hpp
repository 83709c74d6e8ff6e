#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "coattn/data.hpp"
#include "coattn/encoders.hpp"

namespace coattn {

struct TrainConfig {
    int64_t max_steps = 2000;
    int64_t batch_size = 8;
    OptimizerConfig opt; // defaults: sgd, momentum 0.9, lr 0.01
    int64_t eval_every = 100;
    double early_stop_train_acc = -1.0; // stop once train accuracy reaches this; < 0 disables
    int64_t lr_halving_interval = 0;    // halve lr every k steps; 0 keeps it constant
    uint64_t seed = 1;
    std::string checkpoint_path; // best-val checkpoint; empty skips writing
};

struct TrainReport {
    std::vector<double> losses; // one entry per step
    std::vector<std::pair<int64_t, double>> train_acc;
    std::vector<std::pair<int64_t, double>> val_acc;
    double wall_seconds = 0.0;
    std::string checkpoint_path;
    std::string config_hash;
    uint64_t seed = 0;
    double best_val_acc = 0.0;
    int64_t steps_run = 0;
};

std::string train_report_to_json(const TrainReport& r);
TrainReport train_report_from_json(const std::string& text);

// Pretext synchronization training; the model is trained in place.
TrainReport train_pretext(const SyncDataset& train_set, const SyncDataset& val_set,
                          AvsModel& model, const TrainConfig& cfg);
// Convenience overload building the model from (model_cfg, cfg.seed).
TrainReport train_pretext(const SyncDataset& train_set, const SyncDataset& val_set,
                          const ModelConfig& model_cfg, const TrainConfig& cfg);

// Mean argmax accuracy over the dataset; equal logits predict class 0.
double evaluate_sync(const SyncDataset& ds, const AvsModel& model);
// Same protocol over arbitrary per-sample logit functions (test hook).
double evaluate_sync_with(const SyncDataset& ds,
                          const std::function<std::array<double, 2>(const SyncSample&)>& logits_fn);

// 2D spatial evidence map over one frame.
struct Heatmap {
    Tensor grid;      // [H', W'] nonnegative scores at the encoder grid
    Tensor upsampled; // [Hh, W] bilinear, min-max normalized (all zero when grid is constant)
    std::string source;
};

// Linearized class-activation map through the fusion head at the sample's
// relu activation pattern, read from the attended visual tokens H_v.
Heatmap cam_heatmap(const SyncSample& sample, const AvsModel& model, int64_t frame_index);

// Per-head audio-query attention over visual keys, averaged over queries and
// summed over grid time. head < 0 returns one map per head.
std::vector<Heatmap> attention_heatmaps(const SyncSample& sample, const AvsModel& model,
                                        int64_t layer, int64_t head);

// Pointing-game hit: upsampled argmax inside the true cell's 3x3 cell neighborhood.
bool pointing_hit(const Heatmap& hm, int true_row, int true_col, int cell_grid);

Tensor bilinear_upsample(const Tensor& grid, int64_t out_h, int64_t out_w);

// Min-max normalized copy; constant inputs map to all zeros.
Tensor normalized01(const Tensor& t);

// 8-bit binary PGM of values in [0,1].
void write_pgm(const std::string& path, const Tensor& gray);
// Heatmap alpha-blended at 0.5 onto the frame (heat drawn in red).
void write_ppm_overlay(const std::string& path, const Tensor& frame, const Tensor& heat);

// ---- downstream classification ----

struct LabeledClip {
    Tensor audio;  // [S, 2] (or longer for predict_video)
    Tensor frames; // [T, H, W, 3]
    int64_t label = 0;
};

// Synthetic action classes: class k = fixed (source cell, tone) pattern.
struct ActionGenConfig {
    int n_classes = 4;
    double duration_units = 4.0;
    double event_rate = 3.0;
    double noise_level = 0.05;
    int cell_grid = 4;
    ClipConfig clip;
    uint64_t seed = 1;
};

LabeledClip generate_action_sample(const ActionGenConfig& cfg, int64_t index);

class ActionDataset {
public:
    static ActionDataset lazy(const ActionGenConfig& cfg, int64_t count);
    static ActionDataset materialized(std::vector<LabeledClip> clips);
    int64_t size() const { return count_; }
    LabeledClip get(int64_t i) const;

private:
    std::optional<std::vector<LabeledClip>> clips_;
    std::optional<ActionGenConfig> gen_;
    int64_t count_ = 0;
};

// Pretext encoders + stack with a fresh two-layer classification head on
// concat(pooled H_a, pooled H_v).
class ClassifierModel {
public:
    static ClassifierModel init(const ModelConfig& cfg, int64_t n_classes, int64_t head_width,
                                uint64_t seed);
    // Same, with encoder/stack weights loaded from a pretext checkpoint.
    static ClassifierModel from_pretrained(const ModelConfig& cfg, const std::string& checkpoint,
                                           int64_t n_classes, int64_t head_width, uint64_t seed);

    Tensor forward(const Tensor& audio, const Tensor& frames, Mode mode, std::mt19937_64* rng,
                   bool vision_only = false) const;

    ParamRegistry& params() { return params_; }
    const AvsModel& base() const { return base_; }
    int64_t n_classes() const { return n_classes_; }
    const std::string& config_hash() const { return hash_; }

private:
    AvsModel base_;
    Tensor w1_, b1_, w2_, b2_;
    ParamRegistry params_; // encoder + stack + classifier head (no pretext fusion head)
    int64_t n_classes_ = 0;
    double dropout_ = 0.5;
    std::string hash_;
};

struct FinetuneConfig {
    int64_t n_classes = 4;
    int64_t head_width = 128;
    int64_t max_steps = 600;
    int64_t batch_size = 8;
    OptimizerConfig opt;             // defaults set to adam in finetune_classifier
    int64_t lr_halving_interval = 1000;
    int64_t eval_every = 100;
    uint64_t seed = 1;
    bool vision_only = false;
    std::string checkpoint_path;
};

// pretext_checkpoint empty -> from-scratch baseline.
TrainReport finetune_classifier(const ActionDataset& train_set, const ActionDataset& val_set,
                                const ModelConfig& base_cfg, const std::string& pretext_checkpoint,
                                const FinetuneConfig& cfg, ClassifierModel* out_model = nullptr);

// n_subclips equally spaced windows, softmax outputs averaged.
std::vector<double> predict_video(const LabeledClip& long_clip, const ClassifierModel& model,
                                  int64_t n_subclips = 25, bool vision_only = false);

// Equally spaced subclip start offsets: round(i * slack / (n - 1)).
std::vector<int64_t> subclip_offsets(int64_t slack, int64_t n);

} // namespace coattn
