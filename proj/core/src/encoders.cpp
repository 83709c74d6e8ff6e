#include "coattn/encoders.hpp"

#include <cmath>

#include <json.hpp>

#include "coattn/serialize.hpp"

namespace coattn {

namespace {

EncoderLayer conv_layer(int64_t out_ch, std::array<int64_t, 3> k, std::array<int64_t, 3> s,
                        std::array<int64_t, 3> p) {
    EncoderLayer l;
    l.kind = EncoderLayer::Kind::conv;
    l.conv.out_channels = out_ch;
    l.conv.kernel = k;
    l.conv.stride = s;
    l.conv.padding = p;
    return l;
}

EncoderLayer pool_layer(std::array<int64_t, 3> window, std::array<int64_t, 3> stride) {
    EncoderLayer l;
    l.kind = EncoderLayer::Kind::pool;
    l.window = window;
    l.stride = stride;
    return l;
}

// Extents after the stack, starting from [t, h, w].
std::array<int64_t, 3> stack_extents(std::array<int64_t, 3> e,
                                     const std::vector<EncoderLayer>& layers) {
    for (const EncoderLayer& l : layers) {
        if (l.kind == EncoderLayer::Kind::conv) {
            for (int a = 0; a < 3; ++a)
                e[a] = conv_extent(e[a], l.conv.kernel[a], l.conv.stride[a], l.conv.padding[a]);
        } else {
            for (int a = 0; a < 3; ++a) e[a] = conv_extent(e[a], l.window[a], l.stride[a], 0);
        }
        for (int a = 0; a < 3; ++a)
            if (e[a] < 1) throw EmptyOutput("encoder stack over-reduces an axis");
    }
    return e;
}

int64_t stack_channels(int64_t in_ch, const std::vector<EncoderLayer>& layers) {
    int64_t c = in_ch;
    for (const EncoderLayer& l : layers)
        if (l.kind == EncoderLayer::Kind::conv) c = l.conv.out_channels;
    return c;
}

} // namespace

ModelConfig ModelConfig::desk() {
    ModelConfig cfg;
    cfg.scale = "desk";
    // audio: 4096 samples, strides 4*4*2*2*2 -> 32 tokens
    cfg.audio_layers = {
        conv_layer(16, {33, 1, 1}, {4, 1, 1}, {16, 0, 0}),
        pool_layer({4, 1, 1}, {4, 1, 1}),
        conv_layer(32, {9, 1, 1}, {2, 1, 1}, {4, 0, 0}),
        conv_layer(32, {9, 1, 1}, {2, 1, 1}, {4, 0, 0}),
        conv_layer(64, {9, 1, 1}, {2, 1, 1}, {4, 0, 0}),
    };
    // visual: 8x32x32 -> grid (4,4,4) -> 64 tokens
    cfg.visual_layers = {
        conv_layer(16, {3, 3, 3}, {1, 2, 2}, {1, 1, 1}),
        pool_layer({1, 2, 2}, {1, 2, 2}),
        conv_layer(32, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}),
        conv_layer(32, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}),
    };
    return cfg;
}

ModelConfig ModelConfig::paper() {
    ModelConfig cfg;
    cfg.scale = "paper";
    cfg.d = 512;
    cfg.heads = 8;
    cfg.depth = 1;
    cfg.ffn_width = 1024;
    cfg.fusion_width = 512;
    cfg.frames = 8;
    cfg.frame_size = 224;
    cfg.audio_samples = 88200; // 4.2 s at 21 kHz
    // The duplicated g_o=128 line is read as four 128-channel convs; each
    // stated stride-4 pair runs its second conv at stride 1 so the stack
    // leaves a usable temporal grid.
    cfg.audio_layers = {
        conv_layer(64, {65, 1, 1}, {4, 1, 1}, {32, 0, 0}),
        pool_layer({4, 1, 1}, {4, 1, 1}),
        conv_layer(128, {15, 1, 1}, {4, 1, 1}, {7, 0, 0}),
        conv_layer(128, {15, 1, 1}, {1, 1, 1}, {7, 0, 0}),
        conv_layer(128, {15, 1, 1}, {4, 1, 1}, {7, 0, 0}),
        conv_layer(128, {15, 1, 1}, {1, 1, 1}, {7, 0, 0}),
        conv_layer(256, {15, 1, 1}, {4, 1, 1}, {7, 0, 0}),
        conv_layer(256, {15, 1, 1}, {1, 1, 1}, {7, 0, 0}),
        pool_layer({3, 1, 1}, {3, 1, 1}),
        conv_layer(128, {3, 1, 1}, {1, 1, 1}, {1, 0, 0}),
    };
    cfg.visual_layers = {
        conv_layer(64, {5, 7, 7}, {1, 1, 1}, {2, 3, 3}),
        pool_layer({1, 3, 3}, {1, 2, 2}),
        conv_layer(64, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}),
        conv_layer(64, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}),
        conv_layer(64, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}),
        conv_layer(64, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}),
    };
    return cfg;
}

CoAttentionConfig ModelConfig::attention_config() const {
    CoAttentionConfig a;
    a.d = d;
    a.heads = heads;
    a.depth = depth;
    a.variant = variant;
    a.ffn_width = ffn_width;
    return a;
}

std::array<int64_t, 3> ModelConfig::visual_grid() const {
    return stack_extents({frames, frame_size, frame_size}, visual_layers);
}

int64_t ModelConfig::visual_tokens() const {
    auto g = visual_grid();
    return g[0] * g[1] * g[2];
}

int64_t ModelConfig::audio_tokens() const {
    auto g = stack_extents({audio_samples, 1, 1}, audio_layers);
    return g[0] * g[1] * g[2];
}

int64_t ModelConfig::audio_feature_channels() const {
    return stack_channels(audio_channels, audio_layers);
}

int64_t ModelConfig::visual_feature_channels() const {
    return stack_channels(image_channels, visual_layers);
}

// ---- config json ----

namespace {

nlohmann::json layers_to_json(const std::vector<EncoderLayer>& layers) {
    nlohmann::json arr = nlohmann::json::array();
    for (const EncoderLayer& l : layers) {
        nlohmann::json j;
        if (l.kind == EncoderLayer::Kind::conv) {
            j["type"] = "conv";
            j["out"] = l.conv.out_channels;
            j["kernel"] = l.conv.kernel;
            j["stride"] = l.conv.stride;
            j["pad"] = l.conv.padding;
        } else {
            j["type"] = "pool";
            j["kernel"] = l.window;
            j["stride"] = l.stride;
        }
        arr.push_back(j);
    }
    return arr;
}

void check_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const std::string& k : allowed)
            if (it.key() == k) ok = true;
        if (!ok) throw ConfigMismatch("unknown key '" + it.key() + "' in " + where);
    }
}

std::vector<EncoderLayer> layers_from_json(const nlohmann::json& arr, const std::string& where) {
    std::vector<EncoderLayer> layers;
    for (const auto& j : arr) {
        check_keys(j, {"type", "out", "kernel", "stride", "pad"}, where);
        std::string type = j.at("type").get<std::string>();
        if (type == "conv") {
            layers.push_back(conv_layer(j.at("out").get<int64_t>(),
                                        j.at("kernel").get<std::array<int64_t, 3>>(),
                                        j.at("stride").get<std::array<int64_t, 3>>(),
                                        j.at("pad").get<std::array<int64_t, 3>>()));
        } else if (type == "pool") {
            layers.push_back(pool_layer(j.at("kernel").get<std::array<int64_t, 3>>(),
                                        j.at("stride").get<std::array<int64_t, 3>>()));
        } else {
            throw ConfigMismatch("unknown layer type '" + type + "' in " + where);
        }
    }
    return layers;
}

} // namespace

std::string model_config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["scale"] = cfg.scale;
    j["d"] = cfg.d;
    j["heads"] = cfg.heads;
    j["depth"] = cfg.depth;
    j["variant"] = variant_name(cfg.variant);
    j["ffn_width"] = cfg.ffn_width;
    j["fusion_width"] = cfg.fusion_width;
    j["dropout"] = cfg.dropout;
    j["positional"] = cfg.positional == Positional::sinusoidal ? "sinusoidal" : "none";
    j["fusion_pool"] = cfg.fusion_pool == FusionPool::gap ? "gap" : "flatten";
    j["frames"] = cfg.frames;
    j["frame_size"] = cfg.frame_size;
    j["audio_samples"] = cfg.audio_samples;
    j["audio_channels"] = cfg.audio_channels;
    j["image_channels"] = cfg.image_channels;
    j["audio_layers"] = layers_to_json(cfg.audio_layers);
    j["visual_layers"] = layers_to_json(cfg.visual_layers);
    return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigMismatch("bad model config json: " + std::string(e.what()));
    }
    check_keys(j,
               {"scale", "d", "heads", "depth", "variant", "ffn_width", "fusion_width", "dropout",
                "positional", "fusion_pool", "frames", "frame_size", "audio_samples",
                "audio_channels", "image_channels", "audio_layers", "visual_layers"},
               "model config");
    ModelConfig cfg = j.value("scale", "desk") == "paper" ? ModelConfig::paper()
                                                          : ModelConfig::desk();
    if (j.contains("scale")) cfg.scale = j["scale"].get<std::string>();
    if (j.contains("d")) cfg.d = j["d"].get<int64_t>();
    if (j.contains("heads")) cfg.heads = j["heads"].get<int64_t>();
    if (j.contains("depth")) cfg.depth = j["depth"].get<int64_t>();
    if (j.contains("variant")) cfg.variant = variant_from_name(j["variant"].get<std::string>());
    if (j.contains("ffn_width")) cfg.ffn_width = j["ffn_width"].get<int64_t>();
    if (j.contains("fusion_width")) cfg.fusion_width = j["fusion_width"].get<int64_t>();
    if (j.contains("dropout")) cfg.dropout = j["dropout"].get<double>();
    if (j.contains("positional")) {
        std::string p = j["positional"].get<std::string>();
        if (p == "sinusoidal")
            cfg.positional = Positional::sinusoidal;
        else if (p == "none")
            cfg.positional = Positional::none;
        else
            throw ConfigMismatch("unknown positional mode: " + p);
    }
    if (j.contains("fusion_pool")) {
        std::string p = j["fusion_pool"].get<std::string>();
        if (p == "gap")
            cfg.fusion_pool = FusionPool::gap;
        else if (p == "flatten")
            cfg.fusion_pool = FusionPool::flatten;
        else
            throw ConfigMismatch("unknown fusion_pool mode: " + p);
    }
    if (j.contains("frames")) cfg.frames = j["frames"].get<int64_t>();
    if (j.contains("frame_size")) cfg.frame_size = j["frame_size"].get<int64_t>();
    if (j.contains("audio_samples")) cfg.audio_samples = j["audio_samples"].get<int64_t>();
    if (j.contains("audio_channels")) cfg.audio_channels = j["audio_channels"].get<int64_t>();
    if (j.contains("image_channels")) cfg.image_channels = j["image_channels"].get<int64_t>();
    if (j.contains("audio_layers")) cfg.audio_layers = layers_from_json(j["audio_layers"], "audio_layers");
    if (j.contains("visual_layers"))
        cfg.visual_layers = layers_from_json(j["visual_layers"], "visual_layers");
    return cfg;
}

std::string model_config_hash(const ModelConfig& cfg) {
    return fnv1a_hex(model_config_to_json(cfg));
}

Tensor sinusoidal_positions(int64_t n, int64_t d) {
    Tensor pos = zeros({n, d});
    double* p = pos.ptr();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < d; ++k) {
            double freq = std::pow(10000.0, -2.0 * static_cast<double>(k / 2) / static_cast<double>(d));
            double angle = static_cast<double>(i) * freq;
            p[i * d + k] = (k % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    return pos;
}

namespace {

// sin/cos pairs over geometric wavelengths, written into row[offset..offset+n)
void fill_sincos(double* row, int64_t offset, int64_t n, double u) {
    for (int64_t k = 0; k < n; ++k) {
        double freq = std::pow(1000.0, -2.0 * static_cast<double>(k / 2) / static_cast<double>(n));
        double angle = u * freq;
        row[offset + k] = (k % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
}

constexpr double kTimeTicks = 128.0; // shared clip-time resolution
constexpr double kSpaceTicks = 32.0;

} // namespace

Tensor audio_positions(int64_t tokens, int64_t d) {
    int64_t space = d / 4;
    int64_t time = d - 2 * space;
    Tensor pos = zeros({tokens, d});
    for (int64_t i = 0; i < tokens; ++i) {
        double tf = (i + 0.5) / static_cast<double>(tokens);
        fill_sincos(pos.ptr() + i * d, 0, time, tf * kTimeTicks);
        // space dims stay zero for the audio stream
    }
    return pos;
}

Tensor visual_positions(const std::array<int64_t, 3>& grid, int64_t d) {
    int64_t space = d / 4;
    int64_t time = d - 2 * space;
    int64_t tokens = grid[0] * grid[1] * grid[2];
    Tensor pos = zeros({tokens, d});
    for (int64_t t = 0; t < grid[0]; ++t)
        for (int64_t y = 0; y < grid[1]; ++y)
            for (int64_t x = 0; x < grid[2]; ++x) {
                int64_t i = (t * grid[1] + y) * grid[2] + x;
                double* row = pos.ptr() + i * d;
                double tf = (t + 0.5) / static_cast<double>(grid[0]);
                fill_sincos(row, 0, time, tf * kTimeTicks);
                fill_sincos(row, time, space, (y + 0.5) / static_cast<double>(grid[1]) * kSpaceTicks);
                fill_sincos(row, time + space, space,
                            (x + 0.5) / static_cast<double>(grid[2]) * kSpaceTicks);
            }
    return pos;
}

// ---- model ----

namespace {

EncoderWeights init_encoder(const std::vector<EncoderLayer>& layers, int64_t in_ch,
                            int64_t feature_ch, int64_t d, std::mt19937_64& rng,
                            ParamRegistry& params, const std::string& prefix) {
    EncoderWeights w;
    int64_t c = in_ch;
    int conv_idx = 0;
    for (const EncoderLayer& l : layers) {
        if (l.kind != EncoderLayer::Kind::conv) continue;
        int64_t fan_in = l.conv.kernel[0] * l.conv.kernel[1] * l.conv.kernel[2] * c;
        std::string name = prefix + ".conv" + std::to_string(conv_idx);
        w.conv_w.push_back(params.add(
            name + ".w",
            he_normal({l.conv.kernel[0], l.conv.kernel[1], l.conv.kernel[2], c, l.conv.out_channels},
                      fan_in, rng)));
        w.conv_b.push_back(params.add(name + ".b", zeros({l.conv.out_channels}), false));
        c = l.conv.out_channels;
        ++conv_idx;
    }
    // normalizing the collapsed conv features keeps their scale comparable
    // to the positional codes regardless of how sparse the activations are
    w.feat_gamma = params.add(prefix + ".featln.gamma", full({feature_ch}, 1.0), false);
    w.feat_beta = params.add(prefix + ".featln.beta", zeros({feature_ch}), false);
    w.proj_w = params.add(prefix + ".proj.w", xavier_uniform({feature_ch, d}, feature_ch, d, rng));
    w.proj_b = params.add(prefix + ".proj.b", zeros({d}), false);
    return w;
}

} // namespace

AvsModel AvsModel::init(const ModelConfig& cfg, uint64_t seed) {
    AvsModel m;
    m.cfg_ = cfg;
    m.hash_ = model_config_hash(cfg);
    std::mt19937_64 rng(seed);
    m.audio_enc_ = init_encoder(cfg.audio_layers, cfg.audio_channels,
                                cfg.audio_feature_channels(), cfg.d, rng, m.params_, "audio");
    m.visual_enc_ = init_encoder(cfg.visual_layers, cfg.image_channels,
                                 cfg.visual_feature_channels(), cfg.d, rng, m.params_, "visual");
    m.stack_ = CoAttentionStack::init(cfg.attention_config(), rng, m.params_, "stack");
    int64_t fw = cfg.fusion_width;
    int64_t fusion_in = cfg.fusion_pool == FusionPool::gap
                            ? 2 * cfg.d
                            : (cfg.audio_tokens() + cfg.visual_tokens()) * cfg.d;
    m.fusion_.w1 = m.params_.add("fusion.w1", he_normal({fusion_in, fw}, fusion_in, rng));
    m.fusion_.b1 = m.params_.add("fusion.b1", zeros({fw}), false);
    m.fusion_.w2 = m.params_.add("fusion.w2", xavier_uniform({fw, 2}, fw, 2, rng));
    m.fusion_.b2 = m.params_.add("fusion.b2", zeros({2}), false);
    if (cfg.positional == Positional::sinusoidal) {
        m.pos_audio_ = audio_positions(cfg.audio_tokens(), cfg.d);
        m.pos_visual_ = visual_positions(cfg.visual_grid(), cfg.d);
    }
    return m;
}

Tensor AvsModel::encode_stack(const Tensor& x, const std::vector<EncoderLayer>& layers,
                              const EncoderWeights& w, const Tensor& pos) const {
    Tensor h = x;
    int conv_idx = 0;
    for (const EncoderLayer& l : layers) {
        if (l.kind == EncoderLayer::Kind::conv) {
            h = relu(conv3d(h, l.conv, w.conv_w[conv_idx], w.conv_b[conv_idx]));
            ++conv_idx;
        } else {
            h = avgpool3d(h, l.window, l.stride);
        }
    }
    // [B, T', H', W', C] -> [B, tokens, C] -> project to d
    int64_t B = h.shape[0];
    int64_t tokens = h.shape[1] * h.shape[2] * h.shape[3];
    int64_t c = h.shape[4];
    Tensor flat = reshape(h, {B, tokens, c});
    Tensor proj = linear(layer_norm(flat, w.feat_gamma, w.feat_beta), w.proj_w, w.proj_b);
    if (cfg_.positional == Positional::sinusoidal) {
        // same table added to every batch row
        Tensor pe = zeros({B, tokens, cfg_.d});
        const double* src = pos.ptr();
        for (int64_t b = 0; b < B; ++b)
            std::copy(src, src + tokens * cfg_.d, pe.ptr() + b * tokens * cfg_.d);
        proj = add(proj, pe);
    }
    return proj;
}

Tensor AvsModel::audio_encode(const Tensor& waveform) const {
    if (waveform.rank() != 3 || waveform.shape[1] != cfg_.audio_samples ||
        waveform.shape[2] != cfg_.audio_channels)
        throw ShapeMismatch("waveform must be [B," + std::to_string(cfg_.audio_samples) + "," +
                            std::to_string(cfg_.audio_channels) + "], got " +
                            shape_str(waveform.shape));
    int64_t B = waveform.shape[0];
    Tensor x = reshape(waveform, {B, cfg_.audio_samples, 1, 1, cfg_.audio_channels});
    return encode_stack(x, cfg_.audio_layers, audio_enc_, pos_audio_);
}

Tensor AvsModel::visual_encode(const Tensor& frames) const {
    if (frames.rank() != 5 || frames.shape[1] != cfg_.frames ||
        frames.shape[2] != cfg_.frame_size || frames.shape[3] != cfg_.frame_size ||
        frames.shape[4] != cfg_.image_channels)
        throw ShapeMismatch("frames must be [B," + std::to_string(cfg_.frames) + "," +
                            std::to_string(cfg_.frame_size) + "," +
                            std::to_string(cfg_.frame_size) + "," +
                            std::to_string(cfg_.image_channels) + "], got " +
                            shape_str(frames.shape));
    return encode_stack(frames, cfg_.visual_layers, visual_enc_, pos_visual_);
}

Tensor AvsModel::fusion_head(const StreamFeatures& h, Mode mode, std::mt19937_64* rng) const {
    Tensor cat;
    if (cfg_.fusion_pool == FusionPool::gap) {
        Tensor pa = mean_axis(h.audio, 1); // GAP over tokens, the CAM hook
        Tensor pv = mean_axis(h.visual, 1);
        cat = concat({pa, pv}, 1);
    } else {
        int64_t B = h.audio.shape[0];
        cat = concat({reshape(h.audio, {B, h.audio.shape[1] * h.audio.shape[2]}),
                      reshape(h.visual, {B, h.visual.shape[1] * h.visual.shape[2]})},
                     1);
    }
    Tensor hid = relu(linear(cat, fusion_.w1, fusion_.b1));
    if (mode == Mode::train && cfg_.dropout > 0.0) {
        if (!rng) throw ConfigMismatch("train-mode fusion head needs an rng for dropout");
        hid = dropout(hid, cfg_.dropout, mode, *rng);
    }
    return linear(hid, fusion_.w2, fusion_.b2);
}

AvsForwardOut AvsModel::forward(const Tensor& waveform, const Tensor& frames, Mode mode,
                                std::mt19937_64* rng, bool record, bool vision_only) const {
    AvsForwardOut out;
    Tensor fa = audio_encode(waveform);
    if (vision_only) fa = scale(fa, 0.0); // audio stream activations zeroed
    Tensor fv = visual_encode(frames);
    out.hidden = stack_.forward({fa, fv}, record ? &out.record : nullptr, vision_only);
    out.logits = fusion_head(out.hidden, mode, rng);
    return out;
}

} // namespace coattn
