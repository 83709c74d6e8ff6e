#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coattn/nn.hpp"
#include "coattn/tensor.hpp"

namespace coattn {

enum class Variant { CMA, AGA, VGA };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct CoAttentionConfig {
    int64_t d = 64;         // model width (paper H)
    int64_t heads = 4;      // paper A
    int64_t depth = 1;      // paper L
    Variant variant = Variant::CMA;
    int64_t ffn_width = 128;

    int64_t head_dim() const; // d / heads; throws HeadMismatch when heads does not divide d
};

// Token sequences entering/leaving the co-attention stack, one per stream.
struct StreamFeatures {
    Tensor audio;  // [B, T_a, d]
    Tensor visual; // [B, T_v, d]
};

struct AttentionOut {
    Tensor out;     // [B, n_q, d_v]
    Tensor weights; // [B, n_q, n_k], rows sum to 1
};

// softmax(Q K^T / sqrt(d_k)) V, weights returned for localization.
AttentionOut scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Fused per-head projections: wq/wk/wv are [d, d] (head i owns columns
// [i*d_m, (i+1)*d_m)), wo is [d, d]. No projection biases.
struct MhaWeights {
    Tensor wq, wk, wv, wo;
    int64_t heads = 1;
};

struct MhaOut {
    Tensor out;              // [B, n_q, d]
    Tensor per_head_weights; // [m, B, n_q, n_k] detached values; empty unless recorded
};

MhaOut multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                            const MhaWeights& w, bool record_weights = false);

struct FfnWeights {
    Tensor w1, b1, w2, b2;
};

struct LayerNormWeights {
    Tensor gamma, beta;
};

// Attention weights captured during a forward pass, for localization.
struct AttnRecordEntry {
    int layer = 0;
    std::string stage;       // cma_a | cma_v | aga | vga | sa_a | sa_v
    bool visual_keys = false; // keys/values are visual-stream tokens
    Tensor per_head_weights; // [m, B, n_q, n_k]
};
using AttnRecord = std::vector<AttnRecordEntry>;

// Transformer block: y1 = LN(x + MHA), y2 = LN(y1 + FFN(y1)).
struct SaBlock {
    MhaWeights mha;
    FfnWeights ffn;
    LayerNormWeights ln1, ln2;

    static SaBlock init(const CoAttentionConfig& cfg, std::mt19937_64& rng, ParamRegistry& params,
                        const std::string& prefix);
    Tensor forward(const Tensor& x, Tensor* recorded_weights = nullptr) const;
};

// Q comes from the guide stream, K/V from the target stream; residual and
// output token count follow the guide.
struct GuidedBlock {
    MhaWeights mha;
    FfnWeights ffn;
    LayerNormWeights ln1, ln2;

    static GuidedBlock init(const CoAttentionConfig& cfg, std::mt19937_64& rng,
                            ParamRegistry& params, const std::string& prefix);
    Tensor forward(const Tensor& target, const Tensor& guide,
                   Tensor* recorded_weights = nullptr) const;
};

Tensor sa_block(const Tensor& x, const SaBlock& params, Tensor* recorded_weights = nullptr);
Tensor guided_attention_block(const Tensor& target, const Tensor& guide, const GuidedBlock& params,
                              Tensor* recorded_weights = nullptr);

// Both directions evaluated from the same layer inputs with independent weights.
struct CmaBlock {
    GuidedBlock dir_audio;  // updates audio: Q from audio, K/V from visual
    GuidedBlock dir_visual; // updates visual: Q from visual, K/V from audio

    static CmaBlock init(const CoAttentionConfig& cfg, std::mt19937_64& rng, ParamRegistry& params,
                         const std::string& prefix);
    std::pair<Tensor, Tensor> forward(const Tensor& audio, const Tensor& visual,
                                      Tensor* rec_a = nullptr, Tensor* rec_v = nullptr) const;
};

struct CoAttentionLayer {
    // cross stage: CMA uses both directions; AGA/VGA use only `cross`
    CmaBlock cma;
    GuidedBlock cross;
    SaBlock sa_audio, sa_visual;
};

// Cross block then one SA block per stream, cascaded depth times.
class CoAttentionStack {
public:
    static CoAttentionStack init(const CoAttentionConfig& cfg, std::mt19937_64& rng,
                                 ParamRegistry& params, const std::string& prefix = "stack");

    // vision_only degrades the visual-updating cross direction to
    // self-attention (guide = target = visual) and passes audio through.
    StreamFeatures forward(const StreamFeatures& f, AttnRecord* record = nullptr,
                           bool vision_only = false) const;

    const CoAttentionConfig& config() const { return cfg_; }

private:
    CoAttentionConfig cfg_;
    std::vector<CoAttentionLayer> layers_;
};

// Closed-form parameter count of the stack: per MHA 4*d*d, per FFN
// d*f + f + f*d + d, per LN 2*d, summed over blocks per variant and depth.
int64_t count_params(const CoAttentionConfig& cfg);

} // namespace coattn
