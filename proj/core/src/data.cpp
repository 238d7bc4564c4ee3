#include "sgm/data.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "sgm/errors.hpp"

namespace sgm {
namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v >> 24));
  out.push_back(std::uint8_t(v >> 16));
  out.push_back(std::uint8_t(v >> 8));
  out.push_back(std::uint8_t(v));
}

bool is_gzip(const std::vector<std::uint8_t>& bytes) {
  return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

// Mix (seed, epoch) into a single stream seed; splitmix64 finalizer.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t epoch) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (epoch + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Unbiased bound via 128-bit multiply (Lemire); avoids the implementation-
// defined std::uniform_int_distribution so shuffles are portable.
std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  while (true) {
    const std::uint64_t x = rng();
    const unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
    const std::uint64_t lo = static_cast<std::uint64_t>(m);
    if (lo >= n || lo >= (-n) % n) {
      return static_cast<std::uint64_t>(m >> 64);
    }
  }
}

}  // namespace

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("read failed for " + path);
  return bytes;
}

std::vector<std::uint8_t> gunzip(const std::vector<std::uint8_t>& compressed) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 16) != Z_OK) throw DataError("zlib init failed");
  std::vector<std::uint8_t> out;
  std::uint8_t chunk[1 << 16];
  zs.next_in = const_cast<std::uint8_t*>(compressed.data());
  zs.avail_in = static_cast<uInt>(compressed.size());
  int rc = Z_OK;
  do {
    zs.next_out = chunk;
    zs.avail_out = sizeof(chunk);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw DataError("gzip payload corrupt (zlib rc " + std::to_string(rc) + ")");
    }
    out.insert(out.end(), chunk, chunk + (sizeof(chunk) - zs.avail_out));
  } while (rc != Z_STREAM_END && (zs.avail_in > 0 || zs.avail_out == 0));
  inflateEnd(&zs);
  if (rc != Z_STREAM_END) throw DataError("gzip payload truncated");
  return out;
}

Dataset load_idx_bytes(const std::vector<std::uint8_t>& image_bytes,
                       const std::vector<std::uint8_t>& label_bytes, std::string split_tag) {
  if (image_bytes.size() < 16) throw DataError("image file truncated before header");
  if (label_bytes.size() < 8) throw DataError("label file truncated before header");

  const std::uint32_t image_magic = read_be32(image_bytes.data());
  if (image_magic != kImageMagic) {
    throw DataError("bad magic in image file: got 0x" + std::to_string(image_magic) +
                    ", want 2051");
  }
  const std::uint32_t label_magic = read_be32(label_bytes.data());
  if (label_magic != kLabelMagic) {
    throw DataError("bad magic in label file: got 0x" + std::to_string(label_magic) +
                    ", want 2049");
  }

  const std::uint32_t n_images = read_be32(image_bytes.data() + 4);
  const std::uint32_t rows = read_be32(image_bytes.data() + 8);
  const std::uint32_t cols = read_be32(image_bytes.data() + 12);
  const std::uint32_t n_labels = read_be32(label_bytes.data() + 4);
  if (n_images != n_labels) {
    throw DataError("count mismatch: " + std::to_string(n_images) + " images vs " +
                    std::to_string(n_labels) + " labels");
  }
  if (rows == 0 || cols == 0) throw DataError("zero image dimensions");

  const std::size_t pixels = std::size_t(n_images) * rows * cols;
  if (image_bytes.size() != 16 + pixels) {
    throw DataError("image payload size mismatch: have " + std::to_string(image_bytes.size() - 16) +
                    " bytes, want " + std::to_string(pixels));
  }
  if (label_bytes.size() != 8 + n_labels) {
    throw DataError("label payload size mismatch: have " + std::to_string(label_bytes.size() - 8) +
                    " bytes, want " + std::to_string(n_labels));
  }

  Dataset ds;
  ds.split_tag = std::move(split_tag);
  ds.images = Tensor({n_images, 1, rows, cols});
  for (std::size_t i = 0; i < pixels; ++i) {
    ds.images.v[i] = static_cast<double>(image_bytes[16 + i]) / 255.0;
  }
  ds.labels.resize(n_labels);
  for (std::uint32_t i = 0; i < n_labels; ++i) {
    const std::uint8_t b = label_bytes[8 + i];
    if (b > 9) {
      throw DataError("label " + std::to_string(int(b)) + " at index " + std::to_string(i) +
                      " outside [0, 9]");
    }
    ds.labels[i] = b;
  }
  return ds;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::string split_tag) {
  std::vector<std::uint8_t> image_bytes = read_file_bytes(images_path);
  if (is_gzip(image_bytes)) image_bytes = gunzip(image_bytes);
  std::vector<std::uint8_t> label_bytes = read_file_bytes(labels_path);
  if (is_gzip(label_bytes)) label_bytes = gunzip(label_bytes);
  return load_idx_bytes(image_bytes, label_bytes, std::move(split_tag));
}

Dataset load_mnist_split(const std::string& dir, const std::string& split) {
  std::string image_stem, label_stem;
  if (split == "train") {
    image_stem = "train-images-idx3-ubyte";
    label_stem = "train-labels-idx1-ubyte";
  } else if (split == "test") {
    image_stem = "t10k-images-idx3-ubyte";
    label_stem = "t10k-labels-idx1-ubyte";
  } else {
    throw std::invalid_argument("unknown split '" + split + "' (want train or test)");
  }
  auto resolve = [&dir](const std::string& stem) -> std::string {
    const std::string plain = dir + "/" + stem;
    if (std::filesystem::exists(plain)) return plain;
    if (std::filesystem::exists(plain + ".gz")) return plain + ".gz";
    throw DataError("missing " + plain + "[.gz]");
  };
  return load_idx(resolve(image_stem), resolve(label_stem), split);
}

std::vector<std::uint8_t> idx_image_bytes(const Dataset& ds) {
  if (ds.images.shape.size() != 4) throw std::invalid_argument("dataset images must be 4-D");
  std::vector<std::uint8_t> out;
  out.reserve(16 + ds.images.size());
  write_be32(out, kImageMagic);
  write_be32(out, static_cast<std::uint32_t>(ds.images.shape[0]));
  write_be32(out, static_cast<std::uint32_t>(ds.images.shape[2]));
  write_be32(out, static_cast<std::uint32_t>(ds.images.shape[3]));
  for (double p : ds.images.v) {
    out.push_back(static_cast<std::uint8_t>(std::lrint(p * 255.0)));
  }
  return out;
}

std::vector<std::uint8_t> idx_label_bytes(const Dataset& ds) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + ds.labels.size());
  write_be32(out, kLabelMagic);
  write_be32(out, static_cast<std::uint32_t>(ds.labels.size()));
  for (int l : ds.labels) out.push_back(static_cast<std::uint8_t>(l));
  return out;
}

Dataset take(const Dataset& ds, std::size_t offset, std::size_t count) {
  if (offset + count > ds.size()) {
    throw std::invalid_argument("take: range [" + std::to_string(offset) + ", " +
                                std::to_string(offset + count) + ") exceeds dataset size " +
                                std::to_string(ds.size()));
  }
  const std::size_t px = ds.images.shape[2] * ds.images.shape[3];
  Dataset out;
  out.split_tag = ds.split_tag;
  out.images = Tensor({count, 1, ds.images.shape[2], ds.images.shape[3]});
  std::copy(ds.images.v.begin() + offset * px, ds.images.v.begin() + (offset + count) * px,
            out.images.v.begin());
  out.labels.assign(ds.labels.begin() + offset, ds.labels.begin() + offset + count);
  return out;
}

double mean_pixel(const Dataset& ds) {
  if (ds.images.empty()) throw std::invalid_argument("mean_pixel: empty dataset");
  double sum = 0.0;
  for (double p : ds.images.v) sum += p;
  return sum / static_cast<double>(ds.images.size());
}

std::vector<std::uint32_t> epoch_permutation(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::uint32_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0u);
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i-- > 1;) {
    const std::uint64_t j = bounded(rng, i + 1);
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

std::vector<std::vector<std::uint32_t>> batches(const Dataset& ds, std::size_t batch_size,
                                                std::uint64_t seed, int epoch) {
  if (ds.size() == 0) throw std::invalid_argument("batches: empty dataset");
  if (batch_size < 1) throw std::invalid_argument("batches: batch_size must be >= 1");
  const std::vector<std::uint32_t> perm = epoch_permutation(ds.size(), seed, epoch);
  std::vector<std::vector<std::uint32_t>> out;
  out.reserve((ds.size() + batch_size - 1) / batch_size);
  for (std::size_t start = 0; start < perm.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, perm.size());
    out.emplace_back(perm.begin() + start, perm.begin() + end);
  }
  return out;
}

void gather_batch(const Dataset& ds, std::span<const std::uint32_t> indices, Tensor& images_out,
                  std::vector<int>& labels_out) {
  const std::size_t rows = ds.images.shape[2], cols = ds.images.shape[3];
  const std::size_t px = rows * cols;
  images_out.shape = {indices.size(), 1, rows, cols};
  images_out.v.resize(indices.size() * px);
  labels_out.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::uint32_t idx = indices[i];
    if (idx >= ds.size()) throw std::invalid_argument("gather_batch: index out of range");
    std::memcpy(images_out.data() + i * px, ds.images.data() + std::size_t(idx) * px,
                px * sizeof(double));
    labels_out[i] = ds.labels[idx];
  }
}

}  // namespace sgm
