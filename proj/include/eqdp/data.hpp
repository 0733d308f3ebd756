#pragma once

// Dataset ingestion and augmentation: the CIFAR-10 binary reader, a synthetic
// oriented-shapes generator (class = shape identity, pose randomized), the
// reflection-pad/crop/flip augmentation, and per-channel normalization.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "eqdp/common.hpp"
#include "eqdp/rng.hpp"

namespace eqdp {

/// In-memory dataset: (n, channels, height, width) images with values in
/// [0, 1] (before normalization) and integer labels in [0, num_classes).
struct DatasetSource {
  int n = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<double> images;  // row-major (n, C, H, W)
  std::vector<int> labels;

  int64_t image_size() const { return int64_t(channels) * height * width; }
  const double* image(int i) const { return images.data() + int64_t(i) * image_size(); }
  double* image(int i) { return images.data() + int64_t(i) * image_size(); }
  void validate() const;
};

/// Reads CIFAR-10 binary batches: records of 3073 bytes (1 label byte, then
/// 3072 pixel bytes, channel-planar R/G/B, 32x32 row-major). `path` may be a
/// single .bin file or a directory, in which case every *.bin file inside is
/// loaded in lexicographic order. Pixels are scaled by 1/255 so byte 255 maps
/// to exactly 1.0.
DatasetSource load_cifar10_binary(const std::string& path);

/// Writes a dataset in the same binary layout (quantizing pixels to bytes).
/// Requires 3 channels and 32x32 images so the reader round-trips.
void save_cifar10_binary(const DatasetSource& data, const std::string& path);

/// Synthetic oriented-shapes dataset. Each class is a planar shape (bar, L,
/// T, cross, disk, annulus, disk pair, triangle); every sample renders its
/// class shape at a uniformly random rotation and reflection with jittered
/// position/scale/intensity plus pixel noise. Labels encode shape identity
/// only, never pose, so the task rewards orientation-robust features.
/// Deterministic: sample i depends only on (seed, i).
DatasetSource synthetic_oriented_dataset(int n, int num_classes, int image_size, uint64_t seed);

constexpr int kAugmentPad = 4;

/// Deterministic augmentation core: reflection-pad (edge not repeated) by 4
/// pixels per side, crop the original size at offset (dy, dx) with
/// 0 <= dy, dx <= 8, then optionally flip horizontally. (4, 4, false) is the
/// identity.
std::vector<double> augment_with(const double* image, int channels, int height, int width, int dy,
                                 int dx, bool flip);

/// Samples dy, dx uniform on {0..8} and flip with probability 1/2 (three RNG
/// draws, always).
std::vector<double> augment(const double* image, int channels, int height, int width, Rng& rng);

/// Per-channel mean / standard deviation over every pixel of the set.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

ChannelStats compute_channel_stats(const DatasetSource& data);

/// (x - mean_c) / stddev_c applied in place, channel by channel.
void normalize_channels(DatasetSource& data, const ChannelStats& stats);
void normalize_image(double* image, int channels, int height, int width,
                     const ChannelStats& stats);

/// First-n subset (used for desk-scale runs); n = 0 keeps everything.
DatasetSource take_subset(const DatasetSource& data, int n);

}  // namespace eqdp
