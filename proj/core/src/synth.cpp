#include "udavt/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace udavt {

namespace {

constexpr uint64_t kCacheMagic = 0x5544565453594e31ull;  // "UDVTSYN1"
constexpr uint32_t kCacheVersion = 1;

double wrap(double v, double extent) {
    v = std::fmod(v, extent);
    return v < 0 ? v + extent : v;
}

// shortest signed displacement on the torus
double min_image(double d, double extent) {
    d = std::fmod(d, extent);
    if (d > extent / 2) d -= extent;
    if (d < -extent / 2) d += extent;
    return d;
}

}  // namespace

void ShiftSpec::validate() const {
    if (intensity_scale <= 0.0 || intensity_scale > 2.0)
        throw ConfigError("shift: intensity_scale must be in (0,2], got " + std::to_string(intensity_scale));
    if (intensity_offset < -0.5 || intensity_offset > 0.5)
        throw ConfigError("shift: intensity_offset must be in [-0.5,0.5], got " + std::to_string(intensity_offset));
    if (noise_sigma < 0.0 || noise_sigma > 0.5)
        throw ConfigError("shift: noise_sigma must be in [0,0.5], got " + std::to_string(noise_sigma));
    if (std::abs(translation_bias_px) > 8.0)
        throw ConfigError("shift: translation_bias_px must be in [-8,8], got " +
                          std::to_string(translation_bias_px));
    if (temporal_jitter < 0 || temporal_jitter > 4)
        throw ConfigError("shift: temporal_jitter must be in [0,4], got " + std::to_string(temporal_jitter));
}

ShiftSpec shift_preset(ShiftLevel level) {
    ShiftSpec s;
    switch (level) {
        case ShiftLevel::none:
            break;
        case ShiftLevel::mild:
            s.intensity_scale = 0.9;
            s.noise_sigma = 0.02;
            break;
        case ShiftLevel::severe:
            s.intensity_scale = 0.6;
            s.intensity_offset = 0.1;
            s.noise_sigma = 0.08;
            s.translation_bias_px = 2.0;
            s.background_swap = true;
            s.temporal_jitter = 1;
            break;
    }
    return s;
}

const char* shift_level_name(ShiftLevel level) {
    switch (level) {
        case ShiftLevel::none: return "none";
        case ShiftLevel::mild: return "mild";
        case ShiftLevel::severe: return "severe";
    }
    return "?";
}

void SynthConfig::validate() const {
    if (num_classes < 2) throw ConfigError("synth: num_classes must be >= 2");
    if (train_per_class < 1 || test_per_class < 1) throw ConfigError("synth: samples per class must be >= 1");
    if (frame_size < 8) throw ConfigError("synth: frame_size must be >= 8");
    if (channels < 1 || channels > 3) throw ConfigError("synth: channels must be in [1,3]");
    if (frames < 2) throw ConfigError("synth: frames must be >= 2");
    shift.validate();
}

double SynthConfig::class_direction(int k) const {
    // offset avoids axis-aligned degeneracies; classes are 2*pi/K apart
    return 2.0 * M_PI * k / num_classes + 0.3;
}

double SynthConfig::class_speed(int k) const {
    return (k % 2 == 0) ? 1.3 : 1.7;
}

SampleLatents draw_latents(const SynthConfig& cfg, int label, Rng rng) {
    SampleLatents lat;
    lat.label = label;
    double theta = cfg.class_direction(label);
    lat.dir_x = std::cos(theta);
    lat.dir_y = std::sin(theta);
    lat.speed = cfg.class_speed(label);
    lat.start_x = rng.uniform(0.0, cfg.frame_size);
    lat.start_y = rng.uniform(0.0, cfg.frame_size);
    lat.blob_sigma = rng.uniform(1.2, 1.9);
    lat.amplitude = rng.uniform(0.65, 0.95);
    for (int c = 0; c < 3; ++c) lat.tint[c] = rng.uniform(0.55, 1.0);
    lat.bg_level = rng.uniform(0.05, 0.15);
    lat.noise_key = rng.next();
    return lat;
}

VideoSample render_sample(const SynthConfig& cfg, const SampleLatents& lat, const ShiftSpec* shift) {
    const int H = cfg.frame_size, W = cfg.frame_size, C = cfg.channels, T = cfg.frames;
    VideoSample v;
    v.label = lat.label;
    v.frames.assign(static_cast<size_t>(T) * H * W * C, 0.0f);

    Rng noise_rng(lat.noise_key);
    double start_x = lat.start_x;
    double start_y = lat.start_y;
    int jitter = 0;
    if (shift) {
        start_x += shift->translation_bias_px;
        start_y += shift->translation_bias_px * 0.5;
        if (shift->temporal_jitter > 0) {
            Rng jr = noise_rng.derive("jitter");
            jitter = static_cast<int>(jr.below(2 * static_cast<uint64_t>(shift->temporal_jitter) + 1)) -
                     shift->temporal_jitter;
        }
    }

    // Background. Plain per-sample level for the source style; a smooth
    // low-frequency texture when the shift swaps backgrounds.
    std::vector<float> bg(static_cast<size_t>(H) * W * C);
    if (shift && shift->background_swap) {
        Rng tr = noise_rng.derive("texture");
        double fx = tr.uniform(0.5, 1.5), fy = tr.uniform(0.5, 1.5);
        double px = tr.uniform(0.0, 2 * M_PI), py = tr.uniform(0.0, 2 * M_PI);
        double amp = tr.uniform(0.06, 0.12);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double t = lat.bg_level + amp * (std::sin(2 * M_PI * fx * x / W + px) *
                                                 std::cos(2 * M_PI * fy * y / H + py) + 1.0) * 0.5;
                for (int c = 0; c < C; ++c) bg[(static_cast<size_t>(y) * W + x) * C + c] = static_cast<float>(t);
            }
    } else {
        for (auto& p : bg) p = static_cast<float>(lat.bg_level);
    }

    Rng px_noise = noise_rng.derive("pixels");
    const double two_sigma_sq = 2.0 * lat.blob_sigma * lat.blob_sigma;
    for (int t = 0; t < T; ++t) {
        double tt = t + jitter;
        double cx = wrap(start_x + lat.dir_x * lat.speed * tt, W);
        double cy = wrap(start_y + lat.dir_y * lat.speed * tt, H);
        float* frame = v.frames.data() + static_cast<size_t>(t) * H * W * C;
        for (int y = 0; y < H; ++y) {
            double dy = min_image(y - cy, H);
            for (int x = 0; x < W; ++x) {
                double dx = min_image(x - cx, W);
                double blob = lat.amplitude * std::exp(-(dx * dx + dy * dy) / two_sigma_sq);
                for (int c = 0; c < C; ++c) {
                    size_t pi = (static_cast<size_t>(y) * W + x) * C + c;
                    double val = bg[pi] + blob * lat.tint[c];
                    if (shift) {
                        val = val * shift->intensity_scale + shift->intensity_offset;
                        if (shift->noise_sigma > 0) val += px_noise.normal(0.0, shift->noise_sigma);
                    }
                    frame[pi] = static_cast<float>(std::clamp(val, 0.0, 1.0));
                }
            }
        }
    }
    return v;
}

Dataset generate_split(const SynthConfig& cfg, Domain domain, Split split) {
    cfg.validate();
    Dataset ds;
    ds.num_classes = cfg.num_classes;
    ds.frame_size = cfg.frame_size;
    ds.channels = cfg.channels;
    ds.frames = cfg.frames;
    ds.domain = domain;
    ds.split = split;

    int per_class = split == Split::train ? cfg.train_per_class : cfg.test_per_class;
    Rng root(cfg.seed);
    Rng stream = root.derive(std::string(domain_name(domain)) + "/" + split_name(split));
    const ShiftSpec* shift = nullptr;
    ShiftSpec effective = cfg.shift;
    if (domain == Domain::target && !effective.is_identity()) shift = &effective;

    int id = 0;
    ds.samples.reserve(static_cast<size_t>(per_class) * cfg.num_classes);
    for (int k = 0; k < cfg.num_classes; ++k) {
        for (int i = 0; i < per_class; ++i) {
            Rng sr = stream.derive("sample", (static_cast<uint64_t>(k) << 32) | static_cast<uint64_t>(i));
            SampleLatents lat = draw_latents(cfg, k, sr);
            VideoSample v = render_sample(cfg, lat, shift);
            v.domain = domain;
            v.id = id++;
            ds.samples.push_back(std::move(v));
        }
    }
    return ds;
}

uint64_t synth_config_hash(const SynthConfig& cfg) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "K=%d tr=%d te=%d fs=%d ch=%d T=%d level=%s scale=%.9g off=%.9g noise=%.9g bias=%.9g "
                  "bgswap=%d jit=%d seed=%llu",
                  cfg.num_classes, cfg.train_per_class, cfg.test_per_class, cfg.frame_size, cfg.channels,
                  cfg.frames, shift_level_name(cfg.shift_level), cfg.shift.intensity_scale,
                  cfg.shift.intensity_offset, cfg.shift.noise_sigma, cfg.shift.translation_bias_px,
                  cfg.shift.background_swap ? 1 : 0, cfg.shift.temporal_jitter,
                  static_cast<unsigned long long>(cfg.seed));
    return fnv1a64(buf);
}

namespace {

template <class T>
void put(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
bool get(std::ifstream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return static_cast<bool>(is);
}

}  // namespace

bool write_dataset_cache(const std::string& path, const Dataset& ds, const SynthConfig& cfg) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) return false;
    put(os, kCacheMagic);
    put(os, kCacheVersion);
    put(os, synth_config_hash(cfg));
    put(os, cfg.seed);
    put(os, static_cast<uint32_t>(ds.samples.size()));
    put(os, static_cast<uint32_t>(ds.num_classes));
    put(os, static_cast<uint32_t>(ds.frame_size));
    put(os, static_cast<uint32_t>(ds.channels));
    put(os, static_cast<uint32_t>(ds.frames));
    put(os, static_cast<uint32_t>(ds.domain == Domain::source ? 0 : 1));
    put(os, static_cast<uint32_t>(ds.split == Split::train ? 0 : 1));
    for (const auto& s : ds.samples) {
        put(os, static_cast<int32_t>(s.id));
        put(os, static_cast<int32_t>(s.label));
        os.write(reinterpret_cast<const char*>(s.frames.data()),
                 static_cast<std::streamsize>(s.frames.size() * sizeof(float)));
    }
    return static_cast<bool>(os);
}

std::optional<Dataset> read_dataset_cache(const std::string& path, const SynthConfig& cfg, Domain domain,
                                          Split split) {
    std::ifstream is(path, std::ios::binary);
    if (!is) return std::nullopt;
    uint64_t magic = 0, hash = 0, seed = 0;
    uint32_t version = 0, n = 0, k = 0, fs = 0, ch = 0, fr = 0, dom = 0, spl = 0;
    if (!get(is, magic) || magic != kCacheMagic) return std::nullopt;
    if (!get(is, version) || version != kCacheVersion) return std::nullopt;
    if (!get(is, hash) || hash != synth_config_hash(cfg)) return std::nullopt;
    if (!get(is, seed) || seed != cfg.seed) return std::nullopt;
    if (!get(is, n) || !get(is, k) || !get(is, fs) || !get(is, ch) || !get(is, fr) || !get(is, dom) ||
        !get(is, spl))
        return std::nullopt;
    if (dom != static_cast<uint32_t>(domain == Domain::source ? 0 : 1)) return std::nullopt;
    if (spl != static_cast<uint32_t>(split == Split::train ? 0 : 1)) return std::nullopt;
    int per_class = split == Split::train ? cfg.train_per_class : cfg.test_per_class;
    if (n != static_cast<uint32_t>(per_class * cfg.num_classes)) return std::nullopt;

    Dataset ds;
    ds.num_classes = static_cast<int>(k);
    ds.frame_size = static_cast<int>(fs);
    ds.channels = static_cast<int>(ch);
    ds.frames = static_cast<int>(fr);
    ds.domain = domain;
    ds.split = split;
    size_t frame_count = static_cast<size_t>(fr) * fs * fs * ch;
    ds.samples.resize(n);
    for (uint32_t i = 0; i < n; ++i) {
        int32_t id = 0, label = 0;
        if (!get(is, id) || !get(is, label)) return std::nullopt;
        auto& s = ds.samples[i];
        s.id = id;
        s.label = label;
        s.domain = domain;
        s.frames.resize(frame_count);
        is.read(reinterpret_cast<char*>(s.frames.data()),
                static_cast<std::streamsize>(frame_count * sizeof(float)));
        if (!is) return std::nullopt;
    }
    return ds;
}

BatchIterator::BatchIterator(size_t dataset_size, int batch_size, Rng rng)
    : n_(dataset_size), batch_size_(batch_size), rng_(rng) {
    if (batch_size_ < 1) throw ConfigError("batch_size must be >= 1");
    order_.resize(n_);
    for (size_t i = 0; i < n_; ++i) order_[i] = static_cast<int>(i);
}

void BatchIterator::start_epoch(uint64_t epoch) {
    for (size_t i = 0; i < n_; ++i) order_[i] = static_cast<int>(i);
    Rng er = rng_.derive("epoch", epoch);
    er.shuffle(order_.begin(), order_.end());
}

size_t BatchIterator::batches_per_epoch() const {
    return (n_ + static_cast<size_t>(batch_size_) - 1) / static_cast<size_t>(batch_size_);
}

std::vector<int> BatchIterator::batch(size_t b) const {
    size_t lo = b * static_cast<size_t>(batch_size_);
    size_t hi = std::min(n_, lo + static_cast<size_t>(batch_size_));
    if (lo >= hi) throw PreconditionError("batch index out of range");
    return std::vector<int>(order_.begin() + static_cast<long>(lo), order_.begin() + static_cast<long>(hi));
}

}  // namespace udavt
