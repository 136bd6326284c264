#pragma once

#include "callosum/dataset.hpp"
#include "callosum/image.hpp"
#include "callosum/model.hpp"
#include "callosum/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace callosum {

// Probabilities are clamped to [eps, 1-eps] inside the loss.
inline constexpr double kBceEps = 1e-7;

struct TrainConfig {
    int64_t total_steps = 200000;
    int batch_size = 2;
    double base_lr = 0.01;
    int64_t warmup_steps = 2000; // 1% of the default schedule
    double min_lr = 0.0;
    double momentum = 0.9;
    double weight_decay = 0.0;
    float threshold = 0.5f; // class threshold for validation mIoU
    bool augment_flips = true;
    bool augment_rot90 = true;
    bool augment_photometric = true; // brightness/contrast jitter, +-10%
    uint64_t seed = 0;
    int64_t checkpoint_every = 500;

    void validate() const; // throws UsageError
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text); // throws DataError
};

// Warmup-cosine schedule. Linear 0 -> base_lr over [0, warmup_steps], then
// cosine decay to min_lr at total_steps. step outside [0, total_steps] throws.
double lr_at(const TrainConfig& cfg, int64_t step);

// Mean binary cross-entropy over both channels and all pixels.
double bce_loss(const ProbabilityPair& pred, const ClassMask& target);

// Geometric primitives shared by augmentation and tests.
Image8 flip_h(const Image8& img);
Image8 flip_v(const Image8& img);
Image8 rot90k(const Image8& img, int k); // k counter-clockwise quarter turns
ClassMask flip_h(const ClassMask& mask);
ClassMask flip_v(const ClassMask& mask);
ClassMask rot90k(const ClassMask& mask, int k);

// In-place training augmentation. Geometric transforms hit image and mask
// identically; photometric jitter touches the image only. Draw order is
// fixed so the RNG stream is reproducible.
void augment(Image8& img, ClassMask& mask, bool flips, bool rot90, bool photometric, Rng& rng);

// v = momentum * v + (g + weight_decay * w); w -= lr * v.
// velocity is indexed like model.params() and is resized/zeroed on first use.
void sgd_step(SegModel& model, std::vector<std::vector<float>>& velocity, double lr,
              double momentum, double weight_decay);

struct Sample {
    Image8 image;
    ClassMask label;
};

// Annotated entries of the given split, images and labels loaded.
std::vector<Sample> load_split_samples(const MosaicManifest& m, SplitTag tag);

struct TrainState {
    int64_t step = 0;
    double best_miou = -1.0; // negative = no evaluation yet
    int64_t best_step = -1;
    std::vector<std::vector<float>> velocity;
    std::string rng_state;
};

// Micro-averaged mIoU of the model over a sample set at the given threshold.
double validation_miou(const SegModel& model, const std::vector<Sample>& samples, float threshold);

// Runs optimizer steps from state.step (0 for a fresh run) up to
// cfg.total_steps, or state.step + max_steps_this_run if that is smaller.
// Every cfg.checkpoint_every steps and at the end of the full schedule the
// validation mIoU is computed; the best-scoring snapshot is kept as
// out_dir/best.ckpt and the resumable state as out_dir/last.ckpt. Log lines
// are "step<TAB>lr<TAB>loss<TAB>val_miou_or_dash", one per step.
TrainState train_loop(SegModel& model, const std::vector<Sample>& train_set,
                      const std::vector<Sample>& val_set, const TrainConfig& cfg,
                      const std::filesystem::path& out_dir, std::ostream* log = nullptr,
                      const TrainState* resume = nullptr, int64_t max_steps_this_run = -1);

// Full resumable state: model parameters, velocity buffers, RNG stream,
// step counter and best-so-far record, in one checkpoint container.
void save_train_state(const SegModel& model, const TrainState& state,
                      const std::filesystem::path& path);
std::pair<SegModel, TrainState> load_train_state(const std::filesystem::path& path);

} // namespace callosum
