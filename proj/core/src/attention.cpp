#include "coattn/attention.hpp"

#include <cmath>
#include <cstring>

namespace coattn {

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::CMA: return "cma";
        case Variant::AGA: return "aga";
        case Variant::VGA: return "vga";
    }
    return "cma";
}

Variant variant_from_name(const std::string& name) {
    if (name == "cma" || name == "CMA") return Variant::CMA;
    if (name == "aga" || name == "AGA") return Variant::AGA;
    if (name == "vga" || name == "VGA") return Variant::VGA;
    throw ConfigMismatch("unknown variant: " + name);
}

int64_t CoAttentionConfig::head_dim() const {
    if (heads < 1 || d % heads != 0)
        throw HeadMismatch(std::to_string(heads) + " heads do not divide d=" + std::to_string(d));
    return d / heads;
}

AttentionOut scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
        throw ShapeMismatch("attention expects [B,n,d] inputs");
    if (q.shape[0] != k.shape[0] || k.shape[0] != v.shape[0])
        throw ShapeMismatch("attention batch mismatch");
    if (q.shape[2] != k.shape[2]) throw ShapeMismatch("q/k width mismatch");
    if (k.shape[1] != v.shape[1]) throw ShapeMismatch("k/v token count mismatch");
    double dk = static_cast<double>(q.shape[2]);
    Tensor scores = scale(matmul(q, transpose(k, {0, 2, 1})), 1.0 / std::sqrt(dk));
    Tensor weights = softmax_lastdim(scores);
    Tensor out = matmul(weights, v);
    return {out, weights};
}

// [B,n,k] stacked into [m,B,n,k], values only
static Tensor stack_heads(const std::vector<Tensor>& heads) {
    int64_t m = static_cast<int64_t>(heads.size());
    Shape s = heads[0].shape;
    Tensor out = zeros({m, s[0], s[1], s[2]});
    int64_t per = heads[0].numel();
    for (int64_t h = 0; h < m; ++h)
        std::memcpy(out.ptr() + h * per, heads[h].ptr(), sizeof(double) * per);
    return out;
}

MhaOut multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                            const MhaWeights& w, bool record_weights) {
    int64_t d = w.wq.shape[0];
    int64_t m = w.heads;
    if (m < 1 || d % m != 0)
        throw HeadMismatch(std::to_string(m) + " heads do not divide d=" + std::to_string(d));
    int64_t dm = d / m;
    if (q_in.shape[q_in.rank() - 1] != d || k_in.shape[k_in.rank() - 1] != d ||
        v_in.shape[v_in.rank() - 1] != d)
        throw ShapeMismatch("multi_head_attention input width != d");

    Tensor q_all = matmul(q_in, w.wq);
    Tensor k_all = matmul(k_in, w.wk);
    Tensor v_all = matmul(v_in, w.wv);

    std::vector<Tensor> outs, weights;
    outs.reserve(m);
    for (int64_t h = 0; h < m; ++h) {
        Tensor qh = slice(q_all, 2, h * dm, (h + 1) * dm);
        Tensor kh = slice(k_all, 2, h * dm, (h + 1) * dm);
        Tensor vh = slice(v_all, 2, h * dm, (h + 1) * dm);
        AttentionOut head = scaled_dot_attention(qh, kh, vh);
        outs.push_back(head.out);
        if (record_weights) weights.push_back(head.weights.detached());
    }
    Tensor cat = m == 1 ? outs[0] : concat(outs, 2);
    MhaOut res;
    res.out = matmul(cat, w.wo);
    if (record_weights) res.per_head_weights = stack_heads(weights);
    return res;
}

// ---- blocks ----

static MhaWeights init_mha(const CoAttentionConfig& cfg, std::mt19937_64& rng,
                           ParamRegistry& params, const std::string& prefix) {
    MhaWeights w;
    w.heads = cfg.heads;
    cfg.head_dim();
    // wk starts as a copy of wq, making initial attention a similarity
    // kernel: logits are dot products of one shared random projection, so
    // tokens with matching position codes attend to each other before any
    // training. The two matrices diverge from the first update.
    Tensor wq = xavier_uniform({cfg.d, cfg.d}, cfg.d, cfg.d, rng);
    w.wq = params.add(prefix + ".wq", wq);
    w.wk = params.add(prefix + ".wk", wq.clone());
    w.wv = params.add(prefix + ".wv", xavier_uniform({cfg.d, cfg.d}, cfg.d, cfg.d, rng));
    w.wo = params.add(prefix + ".wo", xavier_uniform({cfg.d, cfg.d}, cfg.d, cfg.d, rng));
    return w;
}

static FfnWeights init_ffn(const CoAttentionConfig& cfg, std::mt19937_64& rng,
                           ParamRegistry& params, const std::string& prefix) {
    FfnWeights f;
    f.w1 = params.add(prefix + ".w1", he_normal({cfg.d, cfg.ffn_width}, cfg.d, rng));
    f.b1 = params.add(prefix + ".b1", zeros({cfg.ffn_width}), false);
    f.w2 = params.add(prefix + ".w2",
                      xavier_uniform({cfg.ffn_width, cfg.d}, cfg.ffn_width, cfg.d, rng));
    f.b2 = params.add(prefix + ".b2", zeros({cfg.d}), false);
    return f;
}

static LayerNormWeights init_ln(int64_t d, ParamRegistry& params, const std::string& prefix) {
    LayerNormWeights ln;
    ln.gamma = params.add(prefix + ".gamma", full({d}, 1.0), false);
    ln.beta = params.add(prefix + ".beta", zeros({d}), false);
    return ln;
}

static Tensor ffn_forward(const FfnWeights& f, const Tensor& x) {
    return linear(relu(linear(x, f.w1, f.b1)), f.w2, f.b2);
}

SaBlock SaBlock::init(const CoAttentionConfig& cfg, std::mt19937_64& rng, ParamRegistry& params,
                      const std::string& prefix) {
    SaBlock b;
    b.mha = init_mha(cfg, rng, params, prefix + ".mha");
    b.ffn = init_ffn(cfg, rng, params, prefix + ".ffn");
    b.ln1 = init_ln(cfg.d, params, prefix + ".ln1");
    b.ln2 = init_ln(cfg.d, params, prefix + ".ln2");
    return b;
}

Tensor SaBlock::forward(const Tensor& x, Tensor* recorded_weights) const {
    MhaOut att = multi_head_attention(x, x, x, mha, recorded_weights != nullptr);
    if (recorded_weights) *recorded_weights = att.per_head_weights;
    Tensor y1 = layer_norm(add(x, att.out), ln1.gamma, ln1.beta);
    return layer_norm(add(y1, ffn_forward(ffn, y1)), ln2.gamma, ln2.beta);
}

GuidedBlock GuidedBlock::init(const CoAttentionConfig& cfg, std::mt19937_64& rng,
                              ParamRegistry& params, const std::string& prefix) {
    GuidedBlock b;
    b.mha = init_mha(cfg, rng, params, prefix + ".mha");
    b.ffn = init_ffn(cfg, rng, params, prefix + ".ffn");
    b.ln1 = init_ln(cfg.d, params, prefix + ".ln1");
    b.ln2 = init_ln(cfg.d, params, prefix + ".ln2");
    return b;
}

Tensor GuidedBlock::forward(const Tensor& target, const Tensor& guide,
                            Tensor* recorded_weights) const {
    MhaOut att = multi_head_attention(guide, target, target, mha, recorded_weights != nullptr);
    if (recorded_weights) *recorded_weights = att.per_head_weights;
    Tensor y1 = layer_norm(add(guide, att.out), ln1.gamma, ln1.beta);
    return layer_norm(add(y1, ffn_forward(ffn, y1)), ln2.gamma, ln2.beta);
}

Tensor sa_block(const Tensor& x, const SaBlock& params, Tensor* recorded_weights) {
    return params.forward(x, recorded_weights);
}

Tensor guided_attention_block(const Tensor& target, const Tensor& guide, const GuidedBlock& params,
                              Tensor* recorded_weights) {
    return params.forward(target, guide, recorded_weights);
}

CmaBlock CmaBlock::init(const CoAttentionConfig& cfg, std::mt19937_64& rng, ParamRegistry& params,
                        const std::string& prefix) {
    CmaBlock b;
    b.dir_audio = GuidedBlock::init(cfg, rng, params, prefix + ".a");
    b.dir_visual = GuidedBlock::init(cfg, rng, params, prefix + ".v");
    return b;
}

std::pair<Tensor, Tensor> CmaBlock::forward(const Tensor& audio, const Tensor& visual,
                                            Tensor* rec_a, Tensor* rec_v) const {
    // audio': Q from audio over visual K/V; visual': Q from visual over audio K/V
    Tensor a2 = dir_audio.forward(visual, audio, rec_a);
    Tensor v2 = dir_visual.forward(audio, visual, rec_v);
    return {a2, v2};
}

// ---- stack ----

CoAttentionStack CoAttentionStack::init(const CoAttentionConfig& cfg, std::mt19937_64& rng,
                                        ParamRegistry& params, const std::string& prefix) {
    if (cfg.depth < 1) throw ConfigMismatch("depth must be >= 1");
    cfg.head_dim();
    CoAttentionStack s;
    s.cfg_ = cfg;
    for (int64_t l = 0; l < cfg.depth; ++l) {
        CoAttentionLayer layer;
        std::string lp = prefix + ".l" + std::to_string(l);
        switch (cfg.variant) {
            case Variant::CMA:
                layer.cma = CmaBlock::init(cfg, rng, params, lp + ".cma");
                break;
            case Variant::AGA:
                layer.cross = GuidedBlock::init(cfg, rng, params, lp + ".aga");
                break;
            case Variant::VGA:
                layer.cross = GuidedBlock::init(cfg, rng, params, lp + ".vga");
                break;
        }
        layer.sa_audio = SaBlock::init(cfg, rng, params, lp + ".sa_a");
        layer.sa_visual = SaBlock::init(cfg, rng, params, lp + ".sa_v");
        s.layers_.push_back(std::move(layer));
    }
    return s;
}

StreamFeatures CoAttentionStack::forward(const StreamFeatures& f, AttnRecord* record,
                                         bool vision_only) const {
    if (f.audio.rank() != 3 || f.visual.rank() != 3)
        throw ConfigMismatch("stream features must be [B,T,d]");
    if (f.audio.shape[2] != cfg_.d || f.visual.shape[2] != cfg_.d)
        throw ConfigMismatch("token width does not match stack d=" + std::to_string(cfg_.d));
    Tensor a = f.audio, v = f.visual;
    Tensor wa, wv;
    for (int64_t l = 0; l < cfg_.depth; ++l) {
        const CoAttentionLayer& layer = layers_[l];
        int li = static_cast<int>(l);
        switch (cfg_.variant) {
            case Variant::CMA: {
                if (vision_only) {
                    // self-attention on the visual stream through the cross weights
                    Tensor v2 = layer.cma.dir_visual.forward(v, v, record ? &wv : nullptr);
                    if (record)
                        record->push_back({li, "cma_v", true, wv});
                    v = v2;
                } else {
                    auto [a2, v2] =
                        layer.cma.forward(a, v, record ? &wa : nullptr, record ? &wv : nullptr);
                    if (record) {
                        record->push_back({li, "cma_a", true, wa});
                        record->push_back({li, "cma_v", false, wv});
                    }
                    a = a2;
                    v = v2;
                }
                break;
            }
            case Variant::AGA: {
                // audio guides; only the visual stream is updated
                Tensor guide = vision_only ? v : a;
                Tensor v2 = layer.cross.forward(v, guide, record ? &wv : nullptr);
                if (record) record->push_back({li, "aga", true, wv});
                v = v2;
                break;
            }
            case Variant::VGA: {
                // visual guides; only the audio stream is updated
                if (!vision_only) {
                    Tensor a2 = layer.cross.forward(a, v, record ? &wa : nullptr);
                    if (record) record->push_back({li, "vga", false, wa});
                    a = a2;
                }
                break;
            }
        }
        Tensor swa, swv;
        a = layer.sa_audio.forward(a, record ? &swa : nullptr);
        v = layer.sa_visual.forward(v, record ? &swv : nullptr);
        if (record) {
            record->push_back({li, "sa_a", false, swa});
            record->push_back({li, "sa_v", true, swv});
        }
    }
    return {a, v};
}

int64_t count_params(const CoAttentionConfig& cfg) {
    int64_t d = cfg.d, f = cfg.ffn_width;
    cfg.head_dim();
    int64_t per_mha = 3 * d * d + d * d;
    int64_t per_ffn = d * f + f + f * d + d;
    int64_t per_ln = 2 * d;
    int64_t per_block = per_mha + per_ffn + 2 * per_ln;
    int64_t cross_blocks = cfg.variant == Variant::CMA ? 2 : 1;
    return cfg.depth * (cross_blocks + 2) * per_block;
}

} // namespace coattn
