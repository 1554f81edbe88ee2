#include "dentlab/data.hpp"

#include <cstdlib>
#include <cstring>
#include <fstream>

namespace dentlab {

void Dataset::validate() const {
  if (!images.defined() || images.ndim() != 4)
    throw ValueError("dataset: images must be (N,C,H,W)");
  if (int64_t(labels.size()) != images.dim(0))
    throw ValueError("dataset: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(images.dim(0)) + " images");
  if (num_classes < 2) throw ValueError("dataset: num_classes must be >= 2");
  const float* p = images.data();
  for (int64_t i = 0, n = images.numel(); i < n; ++i)
    if (p[i] < 0.f || p[i] > 1.f)
      throw ValueError("dataset: pixel value " + std::to_string(p[i]) + " outside [0,1]");
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw ValueError("dataset: label " + std::to_string(labels[i]) + " out of range at index " +
                       std::to_string(i));
}

Dataset Dataset::slice(int64_t start, int64_t count) const {
  if (start < 0 || count < 0 || start + count > size())
    throw ValueError("dataset: slice [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + std::to_string(size()) + " samples");
  Dataset out;
  int64_t C = images.dim(1), H = images.dim(2), W = images.dim(3);
  out.images = Tensor<float>({count, C, H, W});
  std::memcpy(out.images.data(), images.data() + start * C * H * W,
              size_t(count * C * H * W) * sizeof(float));
  out.labels.assign(labels.begin() + start, labels.begin() + start + count);
  out.split = split;
  out.name = name;
  out.num_classes = num_classes;
  return out;
}

Tensor<float> Dataset::gather_images(const std::vector<int64_t>& idx) const {
  int64_t C = images.dim(1), H = images.dim(2), W = images.dim(3);
  Tensor<float> out({int64_t(idx.size()), C, H, W});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= size()) throw ValueError("dataset: gather index out of range");
    std::memcpy(out.data() + int64_t(i) * C * H * W, images.data() + idx[i] * C * H * W,
                size_t(C * H * W) * sizeof(float));
  }
  return out;
}

std::vector<int> Dataset::gather_labels(const std::vector<int64_t>& idx) const {
  std::vector<int> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[i] = labels[size_t(idx[i])];
  return out;
}

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileMissingError("cannot open file: " + path);
  f.seekg(0, std::ios::end);
  std::streamoff len = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<unsigned char> buf(static_cast<size_t>(len), 0);
  if (len > 0) f.read(reinterpret_cast<char*>(buf.data()), len);
  if (!f) throw IoError("failed reading file: " + path);
  return buf;
}

uint32_t read_u32_be(const std::vector<unsigned char>& b, size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw IoError("truncated file (header): " + path);
  return (uint32_t(b[off]) << 24) | (uint32_t(b[off + 1]) << 16) | (uint32_t(b[off + 2]) << 8) |
         uint32_t(b[off + 3]);
}

}  // namespace

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path,
                       const std::string& split) {
  auto ib = read_file(images_path);
  auto lb = read_file(labels_path);

  uint32_t im_magic = read_u32_be(ib, 0, images_path);
  if (im_magic != 0x00000803u)
    throw IoError("idx images: bad magic in " + images_path + ": found 0x" +
                  [&] { char s[16]; std::snprintf(s, sizeof s, "%08x", im_magic); return std::string(s); }() +
                  ", expected 0x00000803");
  uint32_t lb_magic = read_u32_be(lb, 0, labels_path);
  if (lb_magic != 0x00000801u)
    throw IoError("idx labels: bad magic in " + labels_path + ": found 0x" +
                  [&] { char s[16]; std::snprintf(s, sizeof s, "%08x", lb_magic); return std::string(s); }() +
                  ", expected 0x00000801");

  uint32_t n_images = read_u32_be(ib, 4, images_path);
  uint32_t rows = read_u32_be(ib, 8, images_path);
  uint32_t cols = read_u32_be(ib, 12, images_path);
  uint32_t n_labels = read_u32_be(lb, 4, labels_path);
  if (n_images != n_labels)
    throw IoError("idx: image count " + std::to_string(n_images) + " does not match label count " +
                  std::to_string(n_labels));
  size_t need_i = 16 + size_t(n_images) * rows * cols;
  if (ib.size() < need_i)
    throw IoError("idx images: truncated file " + images_path + ": have " + std::to_string(ib.size()) +
                  " bytes, need " + std::to_string(need_i));
  size_t need_l = 8 + size_t(n_labels);
  if (lb.size() < need_l)
    throw IoError("idx labels: truncated file " + labels_path + ": have " + std::to_string(lb.size()) +
                  " bytes, need " + std::to_string(need_l));

  Dataset d;
  d.images = Tensor<float>({int64_t(n_images), 1, int64_t(rows), int64_t(cols)});
  float* px = d.images.data();
  const unsigned char* src = ib.data() + 16;
  for (size_t i = 0, n = size_t(n_images) * rows * cols; i < n; ++i) px[i] = float(src[i]) / 255.f;
  d.labels.resize(n_labels);
  for (size_t i = 0; i < n_labels; ++i) {
    unsigned char v = lb[8 + i];
    if (v > 9) throw IoError("idx labels: value " + std::to_string(int(v)) + " out of range at index " +
                             std::to_string(i));
    d.labels[i] = int(v);
  }
  d.split = split;
  d.name = "mnist";
  d.num_classes = 10;
  d.validate();
  return d;
}

Dataset load_cifar10_binary(const std::vector<std::string>& paths, const std::string& split) {
  if (paths.empty()) throw ValueError("cifar10: no files given");
  constexpr size_t kRecord = 3073;
  std::vector<float> pixels;
  std::vector<int> labels;
  for (const auto& path : paths) {
    auto buf = read_file(path);
    if (buf.size() % kRecord != 0)
      throw IoError("cifar10: file size " + std::to_string(buf.size()) + " of " + path +
                    " is not a multiple of 3073");
    size_t n = buf.size() / kRecord;
    for (size_t r = 0; r < n; ++r) {
      const unsigned char* rec = buf.data() + r * kRecord;
      if (rec[0] > 9)
        throw IoError("cifar10: label " + std::to_string(int(rec[0])) + " out of range in record " +
                      std::to_string(r) + " of " + path);
      labels.push_back(int(rec[0]));
      for (size_t i = 1; i < kRecord; ++i) pixels.push_back(float(rec[i]) / 255.f);
    }
  }
  Dataset d;
  int64_t n = int64_t(labels.size());
  d.images = Tensor<float>({n, 3, 32, 32}, std::move(pixels));
  d.labels = std::move(labels);
  d.split = split;
  d.name = "cifar10";
  d.num_classes = 10;
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

namespace {

constexpr int kSynthTemplates = 8;
constexpr int kHw = 28;

bool inside_shape(int tmpl, double x, double y, double cx, double cy, double s, double th) {
  double dx = x - cx, dy = y - cy;
  double ax = std::abs(dx), ay = std::abs(dy);
  switch (tmpl) {
    case 0:  // filled square
      return ax <= s && ay <= s;
    case 1:  // hollow square
      return (ax <= s && ay <= s) && !(ax <= s - th && ay <= s - th);
    case 2:  // filled circle
      return dx * dx + dy * dy <= s * s;
    case 3: {  // ring
      double r2 = dx * dx + dy * dy;
      double inner = s - th;
      return r2 <= s * s && r2 >= inner * inner;
    }
    case 4:  // plus
      return (ax <= th && ay <= s) || (ay <= th && ax <= s);
    case 5: {  // diagonal cross
      double u = (dx + dy) * M_SQRT1_2;
      double v = (dx - dy) * M_SQRT1_2;
      return (std::abs(u) <= th && std::abs(v) <= s) || (std::abs(v) <= th && std::abs(u) <= s);
    }
    case 6: {  // triangle, apex up
      if (dy < -s || dy > s) return false;
      double half = (dy + s) / (2.0 * s) * s;
      return ax <= half;
    }
    case 7: {  // horizontal stripes
      if (ax > s || ay > s) return false;
      int band = int(std::floor((dy + s) / th));
      return band % 2 == 0;
    }
    default:
      return false;
  }
}

}  // namespace

Dataset synth_shapes(int64_t n, int classes, uint64_t seed) {
  if (classes < 2) throw ValueError("synth_shapes: need at least 2 classes");
  if (classes > kSynthTemplates)
    throw ValueError("synth_shapes: " + std::to_string(classes) + " classes requested but only " +
                     std::to_string(kSynthTemplates) + " shape templates exist");
  if (n < classes) throw ValueError("synth_shapes: n must be >= classes");

  Dataset d;
  d.images = Tensor<float>({n, 1, kHw, kHw});
  d.labels.resize(size_t(n));
  Rng base(seed);
  auto order = base.split(0xba7c4).permutation(n);

  float* out = d.images.data();
  for (int64_t i = 0; i < n; ++i) {
    int label = int(order[size_t(i)] % classes);  // exactly balanced up to +-1
    d.labels[size_t(i)] = label;
    Rng rng = base.split(0x51a9e ^ uint64_t(order[size_t(i)]));
    double cx = kHw / 2.0 + rng.uniform(-4.5, 4.5);
    double cy = kHw / 2.0 + rng.uniform(-4.5, 4.5);
    double s = rng.uniform(4.5, 9.5);
    double th = std::max(1.5, s * 0.34);
    double intensity = rng.uniform(0.7, 1.0);
    // low-frequency background ramp plus per-pixel noise keep margins modest
    double gx = rng.uniform(-0.006, 0.006);
    double gy = rng.uniform(-0.006, 0.006);
    double bias = rng.uniform(0.0, 0.08);
    float* img = out + i * kHw * kHw;
    for (int yy = 0; yy < kHw; ++yy)
      for (int xx = 0; xx < kHw; ++xx) {
        double v = inside_shape(label, xx + 0.5, yy + 0.5, cx, cy, s, th) ? intensity : 0.0;
        v += bias + gx * (xx - kHw / 2.0) + gy * (yy - kHw / 2.0);
        v += rng.uniform(0.0, 0.15);
        img[yy * kHw + xx] = float(std::min(1.0, std::max(0.0, v)));
      }
  }
  d.split = "train";
  d.name = "synth-shapes";
  d.num_classes = classes;
  d.validate();
  return d;
}

std::string data_dir_fallback() {
  const char* env = std::getenv("DENTLAB_DATA_DIR");
  return env ? std::string(env) : std::string("data");
}

}  // namespace dentlab
