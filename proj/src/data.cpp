#include "eqdp/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace eqdp {

void DatasetSource::validate() const {
  require(n >= 1, "dataset must contain at least one sample");
  require(channels >= 1 && height >= 1 && width >= 1, "dataset has a degenerate image shape");
  require(num_classes >= 2, "dataset needs at least two classes");
  require(int64_t(images.size()) == int64_t(n) * image_size(), "image buffer size mismatch");
  require(int64_t(labels.size()) == n, "label buffer size mismatch");
  for (int lab : labels)
    require(lab >= 0 && lab < num_classes, "label outside [0, num_classes)");
}

namespace {

constexpr int64_t kCifarRecord = 3073;  // 1 label byte + 3 * 32 * 32 pixels

void append_cifar_file(const std::string& file, DatasetSource& out) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open '" + file + "'");
  in.seekg(0, std::ios::end);
  const int64_t bytes = int64_t(in.tellg());
  in.seekg(0, std::ios::beg);
  if (bytes <= 0 || bytes % kCifarRecord != 0)
    throw MalformedRecord("'" + file + "' is not a whole number of 3073-byte records");
  const int64_t records = bytes / kCifarRecord;
  std::vector<unsigned char> raw(static_cast<size_t>(bytes));
  if (!in.read(reinterpret_cast<char*>(raw.data()), bytes))
    throw IoError("short read on '" + file + "'");
  const size_t base_imgs = out.images.size();
  out.images.resize(base_imgs + size_t(records) * 3072);
  for (int64_t r = 0; r < records; ++r) {
    const unsigned char* rec = raw.data() + r * kCifarRecord;
    if (rec[0] > 9)
      throw MalformedRecord("'" + file + "' has a label byte outside [0, 9]");
    out.labels.push_back(int(rec[0]));
    double* dst = out.images.data() + base_imgs + size_t(r) * 3072;
    for (int i = 0; i < 3072; ++i) dst[i] = double(rec[1 + i]) / 255.0;
  }
  out.n += int(records);
}

// ---------------------------------------------------------------------------
// analytic shape library: signed distances, negative inside

struct Vec2 {
  double x, y;
};

double sd_box(Vec2 p, double cx, double cy, double hx, double hy) {
  return std::max(std::abs(p.x - cx) - hx, std::abs(p.y - cy) - hy);
}

double sd_disk(Vec2 p, double cx, double cy, double r) {
  return std::hypot(p.x - cx, p.y - cy) - r;
}

double shape_distance(int cls, Vec2 p) {
  switch (cls) {
    case 0:  // bar
      return sd_box(p, 0.0, 0.0, 0.58, 0.13);
    case 1:  // L
      return std::min(sd_box(p, 0.0, -0.35, 0.45, 0.12), sd_box(p, -0.33, 0.0, 0.12, 0.47));
    case 2:  // T
      return std::min(sd_box(p, 0.0, 0.33, 0.45, 0.12), sd_box(p, 0.0, -0.08, 0.12, 0.41));
    case 3:  // cross
      return std::min(sd_box(p, 0.0, 0.0, 0.45, 0.12), sd_box(p, 0.0, 0.0, 0.12, 0.45));
    case 4:  // disk
      return sd_disk(p, 0.0, 0.0, 0.42);
    case 5:  // annulus
      return std::abs(std::hypot(p.x, p.y) - 0.36) - 0.10;
    case 6:  // disk pair
      return std::min(sd_disk(p, -0.32, 0.0, 0.20), sd_disk(p, 0.32, 0.0, 0.20));
    case 7: {  // equilateral triangle, vertex up, inradius 0.25
      double d = -1e9;
      for (int k = 0; k < 3; ++k) {
        const double a = -kPi / 2.0 + kTwoPi * k / 3.0;  // outward edge normals
        d = std::max(d, p.x * std::cos(a) + p.y * std::sin(a) - 0.25);
      }
      return d;
    }
    default:
      throw Error("shape class out of range");
  }
}

double soft_coverage(double signed_distance, double edge_width) {
  const double t = 0.5 - signed_distance / edge_width;
  return std::clamp(t, 0.0, 1.0);
}

// reflect-101 index map: the edge pixel is not repeated
int reflect_index(int j, int n) {
  if (j < 0) j = -j;
  if (j >= n) j = 2 * n - 2 - j;
  return j;
}

}  // namespace

DatasetSource load_cifar10_binary(const std::string& path) {
  namespace fs = std::filesystem;
  DatasetSource out;
  out.channels = 3;
  out.height = 32;
  out.width = 32;
  out.num_classes = 10;
  if (fs::is_directory(path)) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(path))
      if (entry.is_regular_file() && entry.path().extension() == ".bin")
        files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no .bin files in directory '" + path + "'");
    for (const auto& f : files) append_cifar_file(f, out);
  } else {
    append_cifar_file(path, out);
  }
  out.validate();
  return out;
}

void save_cifar10_binary(const DatasetSource& data, const std::string& path) {
  data.validate();
  require(data.channels == 3 && data.height == 32 && data.width == 32,
          "binary layout requires 3x32x32 images");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  std::vector<unsigned char> rec(static_cast<size_t>(kCifarRecord));
  for (int i = 0; i < data.n; ++i) {
    rec[0] = static_cast<unsigned char>(data.labels[size_t(i)]);
    const double* img = data.image(i);
    for (int j = 0; j < 3072; ++j) {
      const double v = std::clamp(img[j], 0.0, 1.0);
      rec[size_t(1 + j)] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    out.write(reinterpret_cast<const char*>(rec.data()), kCifarRecord);
  }
  if (!out) throw IoError("short write on '" + path + "'");
}

DatasetSource synthetic_oriented_dataset(int n, int num_classes, int image_size, uint64_t seed) {
  require(n >= 1, "need at least one sample");
  require(num_classes >= 2 && num_classes <= 8, "synthetic set supports 2..8 classes");
  require(image_size >= 8, "image size too small to render shapes");
  DatasetSource out;
  out.n = n;
  out.channels = 3;
  out.height = image_size;
  out.width = image_size;
  out.num_classes = num_classes;
  out.images.assign(size_t(int64_t(n) * 3 * image_size * image_size), 0.0);
  out.labels.assign(size_t(n), 0);

  const double edge = 3.0 / image_size;  // ~1.5 px soft edge in shape units
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, 0x736861706573ULL, uint64_t(i)));
    const int cls = int(rng.uniform_int(uint64_t(num_classes)));
    out.labels[size_t(i)] = cls;
    const double theta = kTwoPi * rng.uniform();
    const bool reflect = rng.bernoulli(0.5);
    const double scale = 0.85 + 0.3 * rng.uniform();
    const double cx = 0.24 * rng.uniform() - 0.12;
    const double cy = 0.24 * rng.uniform() - 0.12;
    std::array<double, 3> amp{};
    for (auto& a : amp) a = 0.45 + 0.45 * rng.uniform();
    const double cos_t = std::cos(-theta), sin_t = std::sin(-theta);

    double* img = out.image(i);
    const int64_t plane = int64_t(image_size) * image_size;
    for (int y = 0; y < image_size; ++y) {
      for (int x = 0; x < image_size; ++x) {
        const double u = (2.0 * (x + 0.5)) / image_size - 1.0;
        const double v = 1.0 - (2.0 * (y + 0.5)) / image_size;
        // invert translation, scale, rotation, reflection (in that order)
        const double px = (u - cx) / scale, py = (v - cy) / scale;
        double qx = cos_t * px - sin_t * py;
        const double qy = sin_t * px + cos_t * py;
        if (reflect) qx = -qx;
        const double cov = soft_coverage(shape_distance(cls, {qx, qy}), edge);
        for (int c = 0; c < 3; ++c)
          img[c * plane + int64_t(y) * image_size + x] = 0.1 + amp[size_t(c)] * cov;
      }
    }
    for (int64_t j = 0; j < 3 * plane; ++j)
      img[j] = std::clamp(img[j] + 0.05 * rng.normal(), 0.0, 1.0);
  }
  return out;
}

std::vector<double> augment_with(const double* image, int channels, int height, int width, int dy,
                                 int dx, bool flip) {
  require(dy >= 0 && dy <= 2 * kAugmentPad && dx >= 0 && dx <= 2 * kAugmentPad,
          "crop offset outside the padded range");
  require(height > kAugmentPad && width > kAugmentPad, "image too small for the padding");
  std::vector<double> out(size_t(int64_t(channels) * height * width));
  const int64_t plane = int64_t(height) * width;
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < height; ++y) {
      const int sy = reflect_index(y + dy - kAugmentPad, height);
      for (int x = 0; x < width; ++x) {
        const int xc = flip ? width - 1 - x : x;
        const int sx = reflect_index(xc + dx - kAugmentPad, width);
        out[size_t(c * plane + int64_t(y) * width + x)] =
            image[c * plane + int64_t(sy) * width + sx];
      }
    }
  }
  return out;
}

std::vector<double> augment(const double* image, int channels, int height, int width, Rng& rng) {
  const int dy = int(rng.uniform_int(2 * kAugmentPad + 1));
  const int dx = int(rng.uniform_int(2 * kAugmentPad + 1));
  const bool flip = rng.bernoulli(0.5);
  return augment_with(image, channels, height, width, dy, dx, flip);
}

ChannelStats compute_channel_stats(const DatasetSource& data) {
  data.validate();
  ChannelStats stats;
  stats.mean.assign(size_t(data.channels), 0.0);
  stats.stddev.assign(size_t(data.channels), 0.0);
  const int64_t plane = int64_t(data.height) * data.width;
  const double count = double(data.n) * double(plane);
  for (int c = 0; c < data.channels; ++c) {
    double s = 0.0, ss = 0.0;
    for (int i = 0; i < data.n; ++i) {
      const double* img = data.image(i) + c * plane;
      for (int64_t j = 0; j < plane; ++j) {
        s += img[j];
        ss += img[j] * img[j];
      }
    }
    const double m = s / count;
    stats.mean[size_t(c)] = m;
    stats.stddev[size_t(c)] = std::sqrt(std::max(ss / count - m * m, 0.0)) + 1e-8;
  }
  return stats;
}

void normalize_image(double* image, int channels, int height, int width,
                     const ChannelStats& stats) {
  require(int(stats.mean.size()) == channels && int(stats.stddev.size()) == channels,
          "channel statistics do not match the image");
  const int64_t plane = int64_t(height) * width;
  for (int c = 0; c < channels; ++c)
    for (int64_t j = 0; j < plane; ++j)
      image[c * plane + j] = (image[c * plane + j] - stats.mean[size_t(c)]) / stats.stddev[size_t(c)];
}

void normalize_channels(DatasetSource& data, const ChannelStats& stats) {
  for (int i = 0; i < data.n; ++i)
    normalize_image(data.image(i), data.channels, data.height, data.width, stats);
}

DatasetSource take_subset(const DatasetSource& data, int n) {
  if (n <= 0 || n >= data.n) return data;
  DatasetSource out = data;
  out.n = n;
  out.images.resize(size_t(int64_t(n) * data.image_size()));
  out.labels.resize(size_t(n));
  return out;
}

}  // namespace eqdp
