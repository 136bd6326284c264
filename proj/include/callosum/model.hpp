#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "callosum/checkpoint.hpp"
#include "callosum/image.hpp"

namespace callosum {

// Plain ViT encoder (no class token, learned positional embedding, pre-norm
// blocks, erf GELU, LayerNorm eps 1e-6) feeding a UNETR-style 2D convolutional
// decoder with four upsampling stages and skip projections taken from
// tap_layers. Two sigmoid output channels: axon, myelin.
struct EncoderConfig {
    int input_px = 224;
    int token_patch_px = 16;
    int in_channels = 1;
    int embed_dim = 128;
    int depth = 4;
    int heads = 4;
    int mlp_ratio = 4;
    std::vector<int> tap_layers; // 1-based block indices; empty selects depth*{1/4,2/4,3/4,4/4}
    int decoder_base = 8;

    void validate() const; // throws UsageError
    int grid_side() const { return input_px / token_patch_px; }
    int token_count() const { return grid_side() * grid_side(); }
    std::vector<int> effective_taps() const;
    std::string to_json() const;
    static EncoderConfig from_json(const std::string& text);
};

// Result of importing a donor checkpoint. Every checkpoint tensor lands in
// exactly one of loaded / discarded / missing; fresh lists model parameters
// the checkpoint did not provide (initialized randomly instead).
struct LoadReport {
    std::vector<std::string> loaded;
    std::vector<std::string> discarded;
    std::vector<std::string> missing;
    std::vector<std::string> fresh;
    bool pos_resampled = false;
    std::string summary() const;
};

template <typename T>
class SegModelT {
  public:
    struct Param {
        std::string name;
        std::vector<int64_t> dims;
        std::vector<T> w;
        std::vector<T> g;
        int64_t count() const { return static_cast<int64_t>(w.size()); }
    };

    SegModelT(const EncoderConfig& cfg, uint64_t seed);
    ~SegModelT();
    SegModelT(SegModelT&&) noexcept;
    SegModelT& operator=(SegModelT&&) noexcept;
    SegModelT(const SegModelT&) = delete;
    SegModelT& operator=(const SegModelT&) = delete;

    const EncoderConfig& config() const;
    std::vector<Param>& params();
    const std::vector<Param>& params() const;
    Param* find_param(const std::string& name);
    int64_t parameter_count() const;
    void zero_grad();

    // gray: b * input_px * input_px values in [0,1]; probs: b * 2 * input_px * input_px.
    void predict(const T* gray, int b, std::vector<T>& probs) const;

    // Mean binary cross-entropy over both output channels against {0,1,2}
    // class targets, probabilities clamped to [clamp_eps, 1-clamp_eps].
    double loss_only(const T* gray, const uint8_t* target_classes, int b, double clamp_eps) const;

    // Same loss; also accumulates parameter gradients (call zero_grad first
    // unless accumulation across micro-batches is intended).
    double forward_backward(const T* gray, const uint8_t* target_classes, int b, double clamp_eps);

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

using SegModel = SegModelT<float>;

extern template class SegModelT<float>;
extern template class SegModelT<double>;

// Argmax over the two channels with a shared detection threshold in (0,1):
// background when both probabilities fall below it; ties go to myelin.
uint8_t to_class(float p_axon, float p_myelin, float threshold);
ClassMask to_class_mask(const std::vector<float>& probs, int width, int height, float threshold);

// Snapshots embed the EncoderConfig in META for self-describing reload.
void save_snapshot(const SegModel& model, const std::filesystem::path& path,
                   const std::string& extra_meta_json = "");
SegModel load_snapshot(const std::filesystem::path& path);
EncoderConfig snapshot_config(const std::filesystem::path& path);

// Surgery import: keep image_encoder.* weights from a promptable-segmentation
// donor checkpoint, discard prompt_encoder.*, mask_decoder.* and
// image_encoder.neck.*, and initialize the convolutional decoder fresh.
// Positional embeddings are resampled bicubically on grid mismatch. Throws
// DataError when the checkpoint carries no usable image encoder tensors or
// when provided tensors disagree with the configuration (embed_dim, shapes).
SegModel surgery_import(const Checkpoint& ckpt, const EncoderConfig& cfg, uint64_t seed,
                        LoadReport* report = nullptr);

} // namespace callosum
