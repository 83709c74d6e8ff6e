#include "coattn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "coattn/serialize.hpp"

namespace coattn {

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

World generate_world(const WorldSpec& spec) {
    if (spec.n_sources < 1 || spec.n_sources > 3)
        throw InvalidSpec("n_sources must be 1..3, got " + std::to_string(spec.n_sources));
    if (spec.event_rate <= 0.0) throw InvalidSpec("event_rate must be > 0");
    if (spec.duration_units <= 0.0) throw InvalidSpec("duration must be > 0");
    if (static_cast<int>(spec.source_cells.size()) != spec.n_sources)
        throw InvalidSpec("need one source cell per source");
    if (static_cast<int>(spec.tone_frequencies.size()) != spec.n_sources)
        throw InvalidSpec("need one tone per source");
    for (size_t i = 0; i < spec.source_cells.size(); ++i) {
        const auto& c = spec.source_cells[i];
        if (c[0] < 0 || c[0] >= spec.cell_grid || c[1] < 0 || c[1] >= spec.cell_grid)
            throw InvalidSpec("source cell outside the grid");
        for (size_t j = i + 1; j < spec.source_cells.size(); ++j)
            if (spec.source_cells[j] == c) throw InvalidSpec("source cells must be distinct");
    }

    World w;
    w.spec = spec;
    for (int s = 0; s < spec.n_sources; ++s) {
        std::mt19937_64 rng(mix_seed(spec.seed, 0x5eed0000 + static_cast<uint64_t>(s)));
        std::exponential_distribution<double> gap(spec.event_rate);
        std::uniform_real_distribution<double> amp(0.7, 1.0);
        double t = gap(rng);
        while (t < spec.duration_units) {
            w.events.push_back({t, s, amp(rng)});
            t += gap(rng);
        }
    }
    std::sort(w.events.begin(), w.events.end(),
              [](const WorldEvent& a, const WorldEvent& b) { return a.time < b.time; });
    return w;
}

namespace {

// Hann window over [0, 1); exactly zero outside.
double burst_envelope(double u) {
    if (u < 0.0 || u >= 1.0) return 0.0;
    return 0.5 * (1.0 - std::cos(2.0 * M_PI * u));
}

} // namespace

RenderOut render_clip(const World& world, double video_start, double audio_start,
                      const ClipConfig& cfg) {
    const WorldSpec& spec = world.spec;
    double dur = spec.duration_units, clip = cfg.clip_units;
    if (video_start < 0.0 || video_start + clip > dur + 1e-12 || audio_start < 0.0 ||
        audio_start + clip > dur + 1e-12)
        throw WindowOutOfRange("clip window outside the timeline");

    RenderOut out;
    out.audio = zeros({cfg.audio_samples, 2});
    out.frames = full({cfg.frames, cfg.frame_size, cfg.frame_size, 3}, cfg.background);

    // audio: enveloped sine bursts, stereo by duplication
    double* ap = out.audio.ptr();
    double dt = clip / static_cast<double>(cfg.audio_samples);
    for (const WorldEvent& ev : world.events) {
        if (ev.time + cfg.burst_units <= audio_start || ev.time >= audio_start + clip) continue;
        double tone = spec.tone_frequencies[ev.source];
        int64_t s0 = std::max<int64_t>(
            0, static_cast<int64_t>(std::ceil((ev.time - audio_start) / dt)));
        int64_t s1 = std::min<int64_t>(
            cfg.audio_samples,
            static_cast<int64_t>(std::ceil((ev.time + cfg.burst_units - audio_start) / dt)));
        for (int64_t s = s0; s < s1; ++s) {
            double t = audio_start + s * dt - ev.time;
            double v = ev.amplitude * burst_envelope(t / cfg.burst_units) *
                       std::sin(2.0 * M_PI * tone * t);
            ap[s * 2] += v;
            ap[s * 2 + 1] += v;
        }
    }
    if (spec.noise_level > 0.0) {
        std::mt19937_64 nrng(mix_seed(spec.seed, 0xa0d10 + static_cast<uint64_t>(
                                                     std::llround(audio_start * 1e6))));
        std::normal_distribution<double> noise(0.0, spec.noise_level);
        for (int64_t s = 0; s < cfg.audio_samples; ++s) {
            double n = noise(nrng);
            ap[s * 2] += n;
            ap[s * 2 + 1] += n;
        }
    }

    // frames: gaussian blob at the source cell while an event is active
    double* fp = out.frames.ptr();
    double cell_px = static_cast<double>(cfg.frame_size) / static_cast<double>(spec.cell_grid);
    double sigma = cfg.blob_sigma_cells * cell_px;
    double frame_dt = clip / static_cast<double>(cfg.frames);
    for (const WorldEvent& ev : world.events) {
        if (ev.time + cfg.burst_units <= video_start || ev.time >= video_start + clip) continue;
        const auto& cell = spec.source_cells[ev.source];
        double cy = (cell[0] + 0.5) * cell_px;
        double cx = (cell[1] + 0.5) * cell_px;
        bool rendered = false;
        for (int64_t f = 0; f < cfg.frames; ++f) {
            double tf = video_start + (f + 0.5) * frame_dt; // frame center time
            double env = burst_envelope((tf - ev.time) / cfg.burst_units);
            if (env <= 0.0) continue;
            rendered = true;
            double peak = ev.amplitude * env;
            int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(cy - 3 * sigma));
            int64_t y1 = std::min<int64_t>(cfg.frame_size, static_cast<int64_t>(cy + 3 * sigma) + 1);
            int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(cx - 3 * sigma));
            int64_t x1 = std::min<int64_t>(cfg.frame_size, static_cast<int64_t>(cx + 3 * sigma) + 1);
            for (int64_t y = y0; y < y1; ++y)
                for (int64_t x = x0; x < x1; ++x) {
                    double dy = (y + 0.5) - cy, dx = (x + 0.5) - cx;
                    double g = peak * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                    double* px = fp + ((f * cfg.frame_size + y) * cfg.frame_size + x) * 3;
                    for (int c = 0; c < 3; ++c) px[c] = std::min(1.0, px[c] + g);
                }
        }
        if (rendered) out.regions.push_back({cell[0], cell[1], ev.time});
    }
    return out;
}

SyncSample make_pair(const World& world, std::mt19937_64& rng, const ClipConfig& cfg) {
    double dur = world.spec.duration_units, clip = cfg.clip_units;
    if (dur < clip + cfg.shift_max)
        throw WindowOutOfRange("timeline too short for the maximum shift");
    std::uniform_real_distribution<double> start_dist(0.0, dur - clip);
    double video_start = start_dist(rng);
    bool positive = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    double audio_start = video_start;
    double shift = 0.0;
    if (!positive) {
        double mag = std::uniform_real_distribution<double>(cfg.shift_min, cfg.shift_max)(rng);
        double sign = std::uniform_int_distribution<int>(0, 1)(rng) == 1 ? 1.0 : -1.0;
        shift = sign * mag;
        if (video_start + shift < 0.0 || video_start + shift > dur - clip) shift = -shift;
        audio_start = video_start + shift;
    }
    RenderOut r = render_clip(world, video_start, audio_start, cfg);
    SyncSample s;
    s.audio = std::move(r.audio);
    s.frames = std::move(r.frames);
    s.label = positive ? 1 : 0;
    s.meta.world_seed = world.spec.seed;
    s.meta.video_start = video_start;
    s.meta.audio_shift = shift;
    s.meta.regions = std::move(r.regions);
    return s;
}

namespace {

// distinct tones per source slot
const double kTones[3] = {280.0, 470.0, 730.0};

WorldSpec sample_world_spec(const DataGenConfig& cfg, uint64_t world_seed) {
    WorldSpec spec;
    spec.duration_units = cfg.duration_units;
    spec.event_rate = cfg.event_rate;
    spec.noise_level = cfg.noise_level;
    spec.cell_grid = cfg.cell_grid;
    spec.seed = world_seed;
    std::mt19937_64 rng(mix_seed(world_seed, 0x5bec));
    spec.n_sources = std::uniform_int_distribution<int>(cfg.min_sources, cfg.max_sources)(rng);
    std::uniform_int_distribution<int> cell(0, cfg.cell_grid - 1);
    while (static_cast<int>(spec.source_cells.size()) < spec.n_sources) {
        std::array<int, 2> c{cell(rng), cell(rng)};
        bool dup = false;
        for (const auto& e : spec.source_cells) dup |= (e == c);
        if (!dup) spec.source_cells.push_back(c);
    }
    for (int s = 0; s < spec.n_sources; ++s) spec.tone_frequencies.push_back(kTones[s]);
    return spec;
}

} // namespace

SyncSample generate_sample(const DataGenConfig& cfg, int64_t index) {
    uint64_t world_seed = mix_seed(cfg.seed, 2 * static_cast<uint64_t>(index));
    uint64_t pair_seed = mix_seed(cfg.seed, 2 * static_cast<uint64_t>(index) + 1);
    World world = generate_world(sample_world_spec(cfg, world_seed));
    std::mt19937_64 rng(pair_seed);
    return make_pair(world, rng, cfg.clip);
}

SyncDataset SyncDataset::materialized(std::vector<SyncSample> samples) {
    SyncDataset d;
    d.count_ = static_cast<int64_t>(samples.size());
    d.samples_ = std::move(samples);
    return d;
}

SyncDataset SyncDataset::lazy(const DataGenConfig& cfg, int64_t count) {
    SyncDataset d;
    d.count_ = count;
    d.gen_ = cfg;
    return d;
}

int64_t SyncDataset::size() const { return count_; }

SyncSample SyncDataset::get(int64_t i) const {
    if (i < 0 || i >= count_) throw AxisOutOfRange("dataset index " + std::to_string(i));
    if (samples_) return (*samples_)[i];
    return generate_sample(*gen_, i);
}

// ---- dataset files ----

namespace {

nlohmann::json gen_to_json(const DataGenConfig& g) {
    nlohmann::json j;
    j["duration_units"] = g.duration_units;
    j["min_sources"] = g.min_sources;
    j["max_sources"] = g.max_sources;
    j["event_rate"] = g.event_rate;
    j["noise_level"] = g.noise_level;
    j["cell_grid"] = g.cell_grid;
    j["seed"] = g.seed;
    j["clip_units"] = g.clip.clip_units;
    j["frames"] = g.clip.frames;
    j["frame_size"] = g.clip.frame_size;
    j["audio_samples"] = g.clip.audio_samples;
    j["burst_units"] = g.clip.burst_units;
    j["background"] = g.clip.background;
    j["blob_sigma_cells"] = g.clip.blob_sigma_cells;
    j["shift_min"] = g.clip.shift_min;
    j["shift_max"] = g.clip.shift_max;
    return j;
}

DataGenConfig gen_from_json(const nlohmann::json& j) {
    DataGenConfig g;
    g.duration_units = j.at("duration_units").get<double>();
    g.min_sources = j.at("min_sources").get<int>();
    g.max_sources = j.at("max_sources").get<int>();
    g.event_rate = j.at("event_rate").get<double>();
    g.noise_level = j.at("noise_level").get<double>();
    g.cell_grid = j.at("cell_grid").get<int>();
    g.seed = j.at("seed").get<uint64_t>();
    g.clip.clip_units = j.at("clip_units").get<double>();
    g.clip.frames = j.at("frames").get<int64_t>();
    g.clip.frame_size = j.at("frame_size").get<int64_t>();
    g.clip.audio_samples = j.at("audio_samples").get<int64_t>();
    g.clip.burst_units = j.at("burst_units").get<double>();
    g.clip.background = j.at("background").get<double>();
    g.clip.blob_sigma_cells = j.at("blob_sigma_cells").get<double>();
    g.clip.shift_min = j.at("shift_min").get<double>();
    g.clip.shift_max = j.at("shift_max").get<double>();
    return g;
}

} // namespace

void write_dataset(const std::string& path, const SyncDataset& ds) {
    if (ds.size() == 0) throw EmptyDataset("refusing to write an empty dataset");
    SyncSample first = ds.get(0);
    nlohmann::json manifest;
    manifest["count"] = ds.size();
    manifest["audio_shape"] = first.audio.shape;
    manifest["frame_shape"] = first.frames.shape;
    if (ds.gen_config()) manifest["gen"] = gen_to_json(*ds.gen_config());
    nlohmann::json samples = nlohmann::json::array();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");

    // first pass: metadata (cheap for materialized, renders twice when lazy)
    for (int64_t i = 0; i < ds.size(); ++i) {
        SyncSample s = i == 0 ? first : ds.get(i);
        if (s.audio.shape != first.audio.shape || s.frames.shape != first.frames.shape)
            throw ShapeMismatch("dataset samples are not shape-homogeneous");
        nlohmann::json m;
        m["label"] = s.label;
        m["world_seed"] = s.meta.world_seed;
        m["video_start"] = s.meta.video_start;
        m["audio_shift"] = s.meta.audio_shift;
        nlohmann::json regions = nlohmann::json::array();
        for (const Region& r : s.meta.regions) regions.push_back({r.row, r.col, r.time});
        m["regions"] = regions;
        samples.push_back(m);
    }
    manifest["samples"] = samples;
    std::string mbytes = manifest.dump();
    uint64_t mlen = mbytes.size();
    os.write(reinterpret_cast<const char*>(&mlen), 8);
    os.write(mbytes.data(), static_cast<std::streamsize>(mbytes.size()));
    for (int64_t i = 0; i < ds.size(); ++i) {
        SyncSample s = ds.get(i);
        write_tensor(os, s.audio);
        write_tensor(os, s.frames);
    }
    if (!os) throw IoError("dataset write failed: " + path);
}

SyncDataset read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    uint64_t mlen = 0;
    is.read(reinterpret_cast<char*>(&mlen), 8);
    if (!is) throw CorruptFile("truncated dataset header");
    std::string mbytes(mlen, '\0');
    is.read(mbytes.data(), static_cast<std::streamsize>(mlen));
    if (!is) throw CorruptFile("truncated dataset manifest");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mbytes);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile("bad dataset manifest: " + std::string(e.what()));
    }
    int64_t count = manifest.at("count").get<int64_t>();
    if (manifest.at("samples").size() != static_cast<size_t>(count))
        throw CorruptFile("manifest count does not match sample metadata");
    Shape audio_shape = manifest.at("audio_shape").get<Shape>();
    Shape frame_shape = manifest.at("frame_shape").get<Shape>();

    std::vector<SyncSample> samples;
    samples.reserve(count);
    for (int64_t i = 0; i < count; ++i) {
        const auto& m = manifest.at("samples")[i];
        SyncSample s;
        s.audio = read_tensor(is);
        s.frames = read_tensor(is);
        if (s.audio.shape != audio_shape || s.frames.shape != frame_shape)
            throw CorruptFile("tensor record shape disagrees with the manifest");
        s.label = m.at("label").get<int>();
        s.meta.world_seed = m.at("world_seed").get<uint64_t>();
        s.meta.video_start = m.at("video_start").get<double>();
        s.meta.audio_shift = m.at("audio_shift").get<double>();
        for (const auto& r : m.at("regions"))
            s.meta.regions.push_back({r[0].get<int>(), r[1].get<int>(), r[2].get<double>()});
        samples.push_back(std::move(s));
    }
    SyncDataset ds = SyncDataset::materialized(std::move(samples));
    if (manifest.contains("gen")) ds.set_gen_config(gen_from_json(manifest.at("gen")));
    return ds;
}

std::vector<std::vector<int64_t>> make_batches(int64_t n, int64_t batch_size, uint64_t shuffle_seed,
                                               int64_t epoch, bool drop_last) {
    if (n < 1) throw EmptyDataset("cannot batch an empty dataset");
    if (batch_size < 1) throw InvalidSpec("batch_size must be >= 1");
    std::vector<int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(shuffle_seed, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<int64_t>> batches;
    for (int64_t i = 0; i < n; i += batch_size) {
        int64_t end = std::min(n, i + batch_size);
        if (drop_last && end - i < batch_size) break;
        batches.emplace_back(order.begin() + i, order.begin() + end);
    }
    return batches;
}

BatchTensors collect_batch(const SyncDataset& ds, const std::vector<int64_t>& indices) {
    if (indices.empty()) throw EmptyDataset("empty batch");
    SyncSample first = ds.get(indices[0]);
    int64_t B = static_cast<int64_t>(indices.size());
    Shape ashape = first.audio.shape, fshape = first.frames.shape;
    BatchTensors out;
    out.audio = zeros({B, ashape[0], ashape[1]});
    out.frames = zeros({B, fshape[0], fshape[1], fshape[2], fshape[3]});
    out.labels.resize(B);
    int64_t an = first.audio.numel(), fn = first.frames.numel();
    for (int64_t b = 0; b < B; ++b) {
        SyncSample s = b == 0 ? first : ds.get(indices[b]);
        std::copy(s.audio.ptr(), s.audio.ptr() + an, out.audio.ptr() + b * an);
        std::copy(s.frames.ptr(), s.frames.ptr() + fn, out.frames.ptr() + b * fn);
        out.labels[b] = s.label;
    }
    return out;
}

// ---- matched filter ----

int matched_filter_predict(const SyncSample& s, const ClipConfig& cfg, double threshold) {
    int64_t t = s.frames.shape[0];
    int64_t hw = s.frames.shape[1] * s.frames.shape[2] * s.frames.shape[3];
    int64_t S = s.audio.shape[0];

    // per-frame visual activity: mean brightness samples the blob envelope
    std::vector<double> ve(t, 0.0);
    const double* fp = s.frames.ptr();
    for (int64_t f = 0; f < t; ++f) {
        double acc = 0.0;
        for (int64_t i = 0; i < hw; ++i) acc += fp[f * hw + i];
        ve[f] = acc / static_cast<double>(hw);
    }

    // audio energy smoothed over the burst width, read at the frame centers
    const double* ap = s.audio.ptr();
    std::vector<double> cum(S + 1, 0.0);
    for (int64_t i = 0; i < S; ++i) cum[i + 1] = cum[i] + ap[i * 2] * ap[i * 2];
    int64_t win = std::max<int64_t>(
        1, static_cast<int64_t>(cfg.burst_units / cfg.clip_units * S / 2));
    std::vector<double> ae(t, 0.0);
    for (int64_t f = 0; f < t; ++f) {
        int64_t c = static_cast<int64_t>(std::llround((f + 0.5) / static_cast<double>(t) * S));
        int64_t lo = std::max<int64_t>(0, c - win), hi = std::min<int64_t>(S, c + win + 1);
        ae[f] = (cum[hi] - cum[lo]) / static_cast<double>(hi - lo);
    }

    double mv = 0, ma = 0;
    for (int64_t i = 0; i < t; ++i) {
        mv += ve[i];
        ma += ae[i];
    }
    mv /= t;
    ma /= t;
    double sab = 0, saa = 0, sbb = 0;
    for (int64_t i = 0; i < t; ++i) {
        sab += (ve[i] - mv) * (ae[i] - ma);
        saa += (ve[i] - mv) * (ve[i] - mv);
        sbb += (ae[i] - ma) * (ae[i] - ma);
    }
    if (saa < 1e-12 || sbb < 1e-12) return 0;
    return sab / std::sqrt(saa * sbb) > threshold ? 1 : 0;
}

double matched_filter_accuracy(const SyncDataset& ds, const ClipConfig& cfg, double threshold) {
    if (ds.size() == 0) throw EmptyDataset("matched filter on empty dataset");
    int64_t hits = 0;
    for (int64_t i = 0; i < ds.size(); ++i) {
        SyncSample s = ds.get(i);
        hits += matched_filter_predict(s, cfg, threshold) == s.label ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

} // namespace coattn
