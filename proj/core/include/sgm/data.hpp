#pragma once

// MNIST ingestion (IDX format, optionally gzip-compressed), normalization
// helpers, and deterministic shuffled batching.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sgm/tensor.hpp"

namespace sgm {

struct Dataset {
  Tensor images;             // [n, 1, rows, cols], pixel bytes / 255.0
  std::vector<int> labels;   // [n], each in [0, 9]
  std::string split_tag;     // "train" or "test"

  std::size_t size() const { return labels.size(); }
};

// Raw file helpers. Gzip payloads are detected by the 1f 8b magic and
// inflated transparently.
std::vector<std::uint8_t> read_file_bytes(const std::string& path);
std::vector<std::uint8_t> gunzip(const std::vector<std::uint8_t>& compressed);

// Parses a big-endian IDX image/label pair (magics 0x00000803 / 0x00000801).
// Throws DataError on bad magic, truncated or oversized payload, count
// mismatch between the two files, or labels outside [0, 9].
Dataset load_idx_bytes(const std::vector<std::uint8_t>& image_bytes,
                       const std::vector<std::uint8_t>& label_bytes, std::string split_tag);
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::string split_tag);

// Loads "train" or "test" from a directory holding the standard MNIST file
// names (train-images-idx3-ubyte[.gz], t10k-labels-idx1-ubyte[.gz], ...).
Dataset load_mnist_split(const std::string& dir, const std::string& split);

// Exact re-encoders; parsing followed by re-encoding reproduces input bytes.
std::vector<std::uint8_t> idx_image_bytes(const Dataset& ds);
std::vector<std::uint8_t> idx_label_bytes(const Dataset& ds);

// First `count` samples dropped/kept: the subrange [offset, offset+count).
Dataset take(const Dataset& ds, std::size_t offset, std::size_t count);

// Mean over every pixel of every image, accumulated in index order.
double mean_pixel(const Dataset& ds);

// Deterministic permutation of [0, n): Fisher-Yates driven by a generator
// seeded from (seed, epoch). Stable across platforms and runs.
std::vector<std::uint32_t> epoch_permutation(std::size_t n, std::uint64_t seed, int epoch);

// Splits the epoch's permutation into batch_size chunks; the final partial
// batch is retained. Throws on an empty dataset or batch_size < 1.
std::vector<std::vector<std::uint32_t>> batches(const Dataset& ds, std::size_t batch_size,
                                                std::uint64_t seed, int epoch);

// Copies the indexed samples into a dense [k, 1, rows, cols] batch.
void gather_batch(const Dataset& ds, std::span<const std::uint32_t> indices, Tensor& images_out,
                  std::vector<int>& labels_out);

}  // namespace sgm
