#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "coattn/tensor.hpp"

namespace coattn {

// splitmix64; used to derive independent per-sample seeds
uint64_t mix_seed(uint64_t seed, uint64_t salt);

// Latent audio-visual world: point sources on a cell grid emitting
// simultaneous tone bursts and visual blobs.
struct WorldSpec {
    double duration_units = 4.0;
    int n_sources = 1; // 1..3
    std::vector<std::array<int, 2>> source_cells; // distinct (row, col) on the cell grid
    double event_rate = 3.0; // mean events per unit per source
    std::vector<double> tone_frequencies; // cycles per unit, one per source
    double noise_level = 0.05;
    int cell_grid = 4;
    uint64_t seed = 1;
};

struct WorldEvent {
    double time = 0.0;
    int source = 0;
    double amplitude = 1.0;
};

struct World {
    WorldSpec spec;
    std::vector<WorldEvent> events; // sorted by time
};

World generate_world(const WorldSpec& spec);

// Rendering geometry for one clip window.
struct ClipConfig {
    double clip_units = 1.0;   // window length on the world timeline
    int64_t frames = 8;
    int64_t frame_size = 32;
    int64_t audio_samples = 4096;
    double burst_units = 0.2;  // tone burst / blob flash length; spans 1-2 frame centers
    double background = 0.1;
    double blob_sigma_cells = 0.35;
    // negative shift range, the paper's 2.0..5.8 s over 4.2 s clips
    double shift_min = 2.0 / 4.2;
    double shift_max = 5.8 / 4.2;
};

struct Region {
    int row = 0, col = 0;
    double time = 0.0; // event time on the world timeline
};

struct SampleMeta {
    uint64_t world_seed = 0;
    double video_start = 0.0;
    double audio_shift = 0.0; // audio_start - video_start; 0 iff label == 1
    std::vector<Region> regions; // cells of visually rendered events
};

struct SyncSample {
    Tensor audio;  // [S, 2] stereo by duplication
    Tensor frames; // [t, H, W, 3] in [0, 1]
    int label = 0; // 1 iff audio_shift == 0
    SampleMeta meta;
};

struct RenderOut {
    Tensor audio;
    Tensor frames;
    std::vector<Region> regions;
};

RenderOut render_clip(const World& world, double video_start, double audio_start,
                      const ClipConfig& cfg);

// Positive/negative pair with probability 1/2 each; negatives shift the audio
// window by +-Uniform[shift_min, shift_max], flipping sign if the window
// would leave the timeline.
SyncSample make_pair(const World& world, std::mt19937_64& rng, const ClipConfig& cfg);

// Per-sample world randomization for dataset generation.
struct DataGenConfig {
    double duration_units = 4.0;
    int min_sources = 1;
    int max_sources = 3;
    double event_rate = 3.0;
    double noise_level = 0.05;
    int cell_grid = 4;
    ClipConfig clip;
    uint64_t seed = 1;
};

SyncSample generate_sample(const DataGenConfig& cfg, int64_t index);

// Materialized sample list or a lazy view that renders from seeds on demand.
class SyncDataset {
public:
    static SyncDataset materialized(std::vector<SyncSample> samples);
    static SyncDataset lazy(const DataGenConfig& cfg, int64_t count);

    int64_t size() const;
    SyncSample get(int64_t i) const;
    bool is_lazy() const { return !samples_.has_value(); }
    const std::optional<DataGenConfig>& gen_config() const { return gen_; }
    void set_gen_config(const DataGenConfig& g) { gen_ = g; }

private:
    std::optional<std::vector<SyncSample>> samples_;
    std::optional<DataGenConfig> gen_;
    int64_t count_ = 0;
};

// File layout: u64 manifest length, JSON manifest (count, shapes, generation
// spec, per-sample labels/meta), then two CAT1 records per sample.
void write_dataset(const std::string& path, const SyncDataset& ds);
SyncDataset read_dataset(const std::string& path);

// Seeded permutation per epoch; training drops the final partial batch.
std::vector<std::vector<int64_t>> make_batches(int64_t n, int64_t batch_size, uint64_t shuffle_seed,
                                               int64_t epoch, bool drop_last);

struct BatchTensors {
    Tensor audio;  // [B, S, 2]
    Tensor frames; // [B, t, H, W, 3]
    std::vector<int64_t> labels;
};

BatchTensors collect_batch(const SyncDataset& ds, const std::vector<int64_t>& indices);

// Non-learned synchronization baseline: correlates per-frame visual activity
// against the burst-width-smoothed audio energy envelope read at the frame
// centers. Certifies the task is solvable before any training claim.
int matched_filter_predict(const SyncSample& s, const ClipConfig& cfg, double threshold = 0.55);
double matched_filter_accuracy(const SyncDataset& ds, const ClipConfig& cfg,
                               double threshold = 0.55);

} // namespace coattn
