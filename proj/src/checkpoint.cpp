#include "dentlab/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace dentlab {

// Layout (all integers little-endian):
//   magic   "DLCK" (4 bytes)
//   u32     format version (major); readers reject newer majors
//   u32     arch name length, followed by that many bytes
//   i32     num_classes, i32 in_channels, i32 input_hw
//   u32     blob count
//   per blob: u32 name length + bytes, u32 ndim, u32 dims..., f32 data
// Blobs appear in declaration order: parameters first, then BN statistics.

namespace {

void write_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
void write_i32(std::ofstream& f, int32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
void write_str(std::ofstream& f, const std::string& s) {
  write_u32(f, uint32_t(s.size()));
  f.write(s.data(), std::streamsize(s.size()));
}

uint32_t read_u32(std::ifstream& f, const std::string& path) {
  uint32_t v;
  f.read(reinterpret_cast<char*>(&v), 4);
  if (!f) throw IoError("checkpoint: truncated file " + path);
  return v;
}
int32_t read_i32(std::ifstream& f, const std::string& path) {
  int32_t v;
  f.read(reinterpret_cast<char*>(&v), 4);
  if (!f) throw IoError("checkpoint: truncated file " + path);
  return v;
}
std::string read_str(std::ifstream& f, const std::string& path) {
  uint32_t n = read_u32(f, path);
  if (n > 4096) throw IoError("checkpoint: corrupt string length in " + path);
  std::string s(n, '\0');
  f.read(s.data(), n);
  if (!f) throw IoError("checkpoint: truncated file " + path);
  return s;
}

std::vector<std::pair<std::string, Tensor<float>*>> named_blobs(Model<float>& m) {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  int i = 0;
  for (auto* p : m.parameters()) out.emplace_back("param." + std::to_string(i++), p);
  i = 0;
  for (auto* b : m.buffers()) out.emplace_back("stat." + std::to_string(i++), b);
  return out;
}

}  // namespace

void save_checkpoint(Model<float>& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot write " + path);
  f.write("DLCK", 4);
  write_u32(f, kCheckpointVersion);
  write_str(f, model.arch);
  write_i32(f, int32_t(model.num_classes));
  write_i32(f, int32_t(model.in_channels));
  write_i32(f, int32_t(model.input_hw));
  auto blobs = named_blobs(model);
  write_u32(f, uint32_t(blobs.size()));
  for (auto& [name, t] : blobs) {
    write_str(f, name);
    write_u32(f, uint32_t(t->ndim()));
    for (int d = 0; d < t->ndim(); ++d) write_u32(f, uint32_t(t->dim(size_t(d))));
    f.write(reinterpret_cast<const char*>(t->data()), std::streamsize(t->numel() * 4));
  }
  if (!f) throw IoError("checkpoint: write failed for " + path);
}

Model<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileMissingError("checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "DLCK", 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  uint32_t version = read_u32(f, path);
  if (version > kCheckpointVersion)
    throw IoError("checkpoint: format version " + std::to_string(version) + " in " + path +
                  " is newer than supported version " + std::to_string(kCheckpointVersion));
  std::string arch = read_str(f, path);
  int32_t num_classes = read_i32(f, path);
  int32_t in_channels = read_i32(f, path);
  int32_t input_hw = read_i32(f, path);

  Model<float> m = build_model<float>(arch, num_classes, 0, in_channels, input_hw);
  auto blobs = named_blobs(m);
  uint32_t count = read_u32(f, path);
  if (count != blobs.size())
    throw IoError("checkpoint: blob count " + std::to_string(count) + " in " + path + " does not match arch '" +
                  arch + "' (" + std::to_string(blobs.size()) + ")");
  for (auto& [name, t] : blobs) {
    std::string got = read_str(f, path);
    if (got != name) throw IoError("checkpoint: expected blob '" + name + "', found '" + got + "' in " + path);
    uint32_t ndim = read_u32(f, path);
    if (int(ndim) != t->ndim()) throw IoError("checkpoint: rank mismatch for " + name + " in " + path);
    for (int d = 0; d < t->ndim(); ++d) {
      uint32_t dim = read_u32(f, path);
      if (int64_t(dim) != t->dim(size_t(d)))
        throw IoError("checkpoint: shape mismatch for " + name + " in " + path);
    }
    f.read(reinterpret_cast<char*>(t->data()), std::streamsize(t->numel() * 4));
    if (!f) throw IoError("checkpoint: truncated file " + path);
  }
  return m;
}

}  // namespace dentlab
