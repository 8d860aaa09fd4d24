#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "udavt/common.hpp"
#include "udavt/rng.hpp"

namespace udavt {

enum class Domain { source, target };
enum class Split { train, test };

inline const char* domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }
inline const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

// Target-domain perturbation. Label-preserving by construction: none of the
// fields touch the class-defining motion parameters.
struct ShiftSpec {
    double intensity_scale = 1.0;
    double intensity_offset = 0.0;
    double noise_sigma = 0.0;
    double translation_bias_px = 0.0;
    bool background_swap = false;
    int temporal_jitter = 0;  // start-phase offset drawn from [-j, +j]

    void validate() const;
    bool is_identity() const {
        return intensity_scale == 1.0 && intensity_offset == 0.0 && noise_sigma == 0.0 &&
               translation_bias_px == 0.0 && !background_swap && temporal_jitter == 0;
    }
};

enum class ShiftLevel { none, mild, severe };

ShiftSpec shift_preset(ShiftLevel level);
const char* shift_level_name(ShiftLevel level);

// Classes are motion families: a bright blob translating with class-specific
// direction and speed on a toroidal canvas. Any two classes are separated by
// at least 2*pi/K in direction (and alternate between two speeds), so class
// is recoverable from motion alone and never from appearance.
struct SynthConfig {
    int num_classes = 6;
    int train_per_class = 120;
    int test_per_class = 60;
    int frame_size = 16;
    int channels = 3;
    int frames = 8;
    ShiftLevel shift_level = ShiftLevel::severe;
    ShiftSpec shift = shift_preset(ShiftLevel::severe);
    uint64_t seed = 7;

    void validate() const;
    // Motion family of class k.
    double class_direction(int k) const;
    double class_speed(int k) const;
};

struct VideoSample {
    std::vector<float> frames;  // T * H * W * C, row-major, values in [0,1]
    int label = 0;
    Domain domain = Domain::source;
    int id = 0;
};

struct Dataset {
    std::vector<VideoSample> samples;
    int num_classes = 0;
    int frame_size = 0;
    int channels = 0;
    int frames = 0;
    Domain domain = Domain::source;
    Split split = Split::train;

    size_t size() const { return samples.size(); }
};

// Per-sample generative state; the class motion family plus appearance
// nuisances. Exposed so tests can render the same latents with and without
// the domain shift (the clean/shifted pair).
struct SampleLatents {
    int label = 0;
    double start_x = 0, start_y = 0;
    double dir_x = 0, dir_y = 0;  // unit direction
    double speed = 0;
    double blob_sigma = 0;
    double amplitude = 0;
    double tint[3] = {1, 1, 1};
    double bg_level = 0;
    uint64_t noise_key = 0;  // substream for pixel noise / textures
};

SampleLatents draw_latents(const SynthConfig& cfg, int label, Rng rng);
VideoSample render_sample(const SynthConfig& cfg, const SampleLatents& lat, const ShiftSpec* shift);

// Deterministic for (cfg.seed, domain, split). Target samples carry their
// true labels in VideoSample::label; the trainer must treat them as withheld
// (evaluation and the supervised upper bound only).
Dataset generate_split(const SynthConfig& cfg, Domain domain, Split split);

uint64_t synth_config_hash(const SynthConfig& cfg);

// --- on-disk cache (one file per split) ---
bool write_dataset_cache(const std::string& path, const Dataset& ds, const SynthConfig& cfg);
std::optional<Dataset> read_dataset_cache(const std::string& path, const SynthConfig& cfg, Domain domain,
                                          Split split);

// Seeded epoch shuffles; the final partial batch is kept.
class BatchIterator {
  public:
    BatchIterator(size_t dataset_size, int batch_size, Rng rng);

    void start_epoch(uint64_t epoch);
    size_t batches_per_epoch() const;
    // batch index within the current epoch -> sample indices
    std::vector<int> batch(size_t b) const;

  private:
    size_t n_;
    int batch_size_;
    Rng rng_;
    std::vector<int> order_;
};

}  // namespace udavt
