#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "coattn/attention.hpp"
#include "coattn/nn.hpp"
#include "coattn/tensor.hpp"

namespace coattn {

enum class Positional { sinusoidal, none };

// gap feeds CAM; flatten concatenates raw tokens and has no CAM hook.
enum class FusionPool { gap, flatten };

struct EncoderLayer {
    enum class Kind { conv, pool } kind = Kind::conv;
    Conv3dSpec conv;                       // conv layers (relu applied after every conv)
    std::array<int64_t, 3> window{1, 1, 1}; // pool layers
    std::array<int64_t, 3> stride{1, 1, 1};
};

// Architecture description; fully determines the model given a seed.
struct ModelConfig {
    std::string scale = "desk";
    int64_t d = 64;
    int64_t heads = 4;
    int64_t depth = 1;
    Variant variant = Variant::CMA;
    int64_t ffn_width = 128;
    int64_t fusion_width = 128;
    double dropout = 0.0; // pretext head; downstream fine-tuning uses its own 0.5
    Positional positional = Positional::sinusoidal;
    FusionPool fusion_pool = FusionPool::gap;

    int64_t frames = 8;
    int64_t frame_size = 32;
    int64_t audio_samples = 4096;
    int64_t audio_channels = 2;
    int64_t image_channels = 3;

    std::vector<EncoderLayer> audio_layers;
    std::vector<EncoderLayer> visual_layers;

    static ModelConfig desk();
    static ModelConfig paper();

    CoAttentionConfig attention_config() const;
    // Token grid implied by the layer lists and the extent formula.
    std::array<int64_t, 3> visual_grid() const;
    int64_t visual_tokens() const;
    int64_t audio_tokens() const;
    int64_t audio_feature_channels() const;
    int64_t visual_feature_channels() const;
};

// JSON form is the on-disk architecture config; unknown keys are rejected.
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json_text);
std::string model_config_hash(const ModelConfig& cfg);

// Sinusoidal position table [n, d]: sin/cos pairs over geometric wavelengths.
Tensor sinusoidal_positions(int64_t n, int64_t d);

// Stream tables on a shared clip-time scale: the first half of d encodes the
// token's time within the clip identically for both streams (so aligned
// audio/visual tokens get matching codes); the rest encodes the visual (y, x)
// cell and stays zero for audio.
Tensor audio_positions(int64_t tokens, int64_t d);
Tensor visual_positions(const std::array<int64_t, 3>& grid, int64_t d);

struct EncoderWeights {
    std::vector<Tensor> conv_w, conv_b; // aligned with conv layers in order
    Tensor feat_gamma, feat_beta;       // per-token feature normalization
    Tensor proj_w, proj_b;              // per-token projection to d
};

struct FusionWeights {
    Tensor w1, b1, w2, b2;
};

struct AvsForwardOut {
    Tensor logits;          // [B, 2] (or [B, n_classes] downstream)
    StreamFeatures hidden;  // H_a, H_v after the stack
    AttnRecord record;      // filled when requested
};

// Assembled synchronization model: encoders -> co-attention stack -> fusion head.
class AvsModel {
public:
    static AvsModel init(const ModelConfig& cfg, uint64_t seed);

    // waveform: [B, S, 2] -> tokens [B, T_a, d]
    Tensor audio_encode(const Tensor& waveform) const;
    // frames: [B, t, H, W, 3] -> tokens [B, T_v, d]
    Tensor visual_encode(const Tensor& frames) const;
    // pooled streams -> concat -> fc -> relu -> dropout -> fc -> 2 logits
    Tensor fusion_head(const StreamFeatures& h, Mode mode, std::mt19937_64* rng) const;

    AvsForwardOut forward(const Tensor& waveform, const Tensor& frames, Mode mode,
                          std::mt19937_64* rng = nullptr, bool record = false,
                          bool vision_only = false) const;

    const ModelConfig& config() const { return cfg_; }
    const std::string& config_hash() const { return hash_; }
    ParamRegistry& params() { return params_; }
    const ParamRegistry& params() const { return params_; }
    const CoAttentionStack& stack() const { return stack_; }
    const FusionWeights& fusion() const { return fusion_; }

private:
    ModelConfig cfg_;
    std::string hash_;
    ParamRegistry params_;
    EncoderWeights audio_enc_, visual_enc_;
    CoAttentionStack stack_;
    FusionWeights fusion_;
    Tensor pos_audio_, pos_visual_; // fixed tables, not parameters

    Tensor encode_stack(const Tensor& x, const std::vector<EncoderLayer>& layers,
                        const EncoderWeights& w, const Tensor& pos) const;
};

} // namespace coattn
