#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "l2aed/rng.hpp"
#include "l2aed/tensor.hpp"

namespace l2aed {

enum class Split : std::uint8_t { Train = 0, Validation = 1, Test = 2 };

const char* split_name(Split s) noexcept;
Split parse_split(const std::string& s);

struct ClassData {
    std::string name;
    Split split = Split::Train;
    /// Each example is [ch, H, W] with values in [0, 1].
    std::vector<Tensor> examples;
    /// 1 where the example is a planted outlier (synthetic data only).
    std::vector<std::uint8_t> outlier;
};

/// Labelled image collection. Class ids are indices into `classes`.
struct Dataset {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<ClassData> classes;
    std::string provenance;

    std::vector<std::size_t> class_ids(Split split) const;
    std::size_t num_examples() const;
    /// Throws DataError if examples disagree in shape or a class is empty.
    void validate() const;
};

struct LoadStats {
    std::size_t loaded = 0;
    std::size_t skipped = 0;
    std::vector<std::string> warnings;
};

/// Read `root/<class>/<image>.png`. Classes are ordered by directory name.
/// Undecodable files are skipped and reported in `stats`; a class left with
/// no images is an error. With `grayscale`, colour sources are collapsed with
/// luminance weights 0.299/0.587/0.114. `invert` maps v -> 1 - v.
Dataset load_image_dataset(const std::filesystem::path& root, std::size_t target_size, bool grayscale,
                           bool invert = false, LoadStats* stats = nullptr);

/// Bilinear resize with half-pixel centres:
///   src = clamp((dst + 0.5) * in / out - 0.5, 0, in - 1)
/// and the usual four-neighbour blend along both axes.
Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w);

/// Rotate a square [ch, n, n] image by `quarter_turns` x 90 degrees
/// counter-clockwise: out[i][j] = in[j][n-1-i] for one turn.
Tensor rotate90(const Tensor& img, int quarter_turns);

/// Every class becomes four classes (0, 90, 180, 270 degrees). Rotated
/// variants keep the split tag of their source class.
Dataset augment_rotations(const Dataset& ds);

struct SplitCounts {
    std::size_t train = 0;
    std::size_t validation = 0;
    std::size_t test = 0;
};

/// Random disjoint assignment of classes to splits.
Dataset split_classes(Dataset ds, const SplitCounts& counts, Rng& rng);

struct SynthParams {
    std::size_t num_classes = 30;
    std::size_t per_class = 20;
    std::size_t image_size = 28;
    double noise_sd = 0.1;
    double outlier_rate = 0.0;
    std::uint64_t seed = 0;
};

/// Procedural dataset: each class is an oriented bar plus a Gaussian blob at
/// class-specific positions. Examples add per-pixel Gaussian noise and are
/// clamped to [0, 1]. With probability `outlier_rate` an example is rendered
/// from a different, uniformly chosen class and flagged in `outlier`.
Dataset synth_dataset(const SynthParams& p);

/// Noise-free class pattern used by `synth_dataset` (for tests).
Tensor synth_pattern(const SynthParams& p, std::size_t class_id);

void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

/// Write a [1,H,W] or [3,H,W] image in [0,1] as an 8-bit PNG.
void write_png(const std::filesystem::path& path, const Tensor& img);

}  // namespace l2aed
