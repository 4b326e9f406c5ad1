#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hyperseg/tensor.hpp"

namespace hyperseg {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One manifest row of a named-tensor blob. `offset` is in bytes from the
// start of the blob; `count` in elements.
struct TensorRecord {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t count = 0;
};

using NamedTensor = std::pair<std::string, Tensor>;

// Writes the tensors as concatenated little-endian float64 values, in order.
std::vector<TensorRecord> write_tensor_blob(const std::filesystem::path& path,
                                            const std::vector<NamedTensor>& tensors);

// Reads every record back. Throws FormatError naming the tensor and offset if
// the blob is too short or a record is inconsistent.
std::vector<NamedTensor> read_tensor_blob(const std::filesystem::path& path,
                                          const std::vector<TensorRecord>& records);

// Raw little-endian arrays used by the dataset and map exports.
void write_f64(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f64(const std::filesystem::path& path, std::size_t expected_count);
void write_u8(const std::filesystem::path& path, std::span<const std::uint8_t> values);
std::vector<std::uint8_t> read_u8(const std::filesystem::path& path, std::size_t expected_count);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace hyperseg
