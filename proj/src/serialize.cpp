#include "hyperseg/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hyperseg {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFFu) << (8 * (7 - i));
  return r;
}

void append_f64(std::string& buf, std::span<const double> values) {
  const std::size_t start = buf.size();
  buf.resize(start + values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint64_t le = to_le(std::bit_cast<std::uint64_t>(values[i]));
    std::memcpy(buf.data() + start + i * 8, &le, 8);
  }
}

void decode_f64(const char* src, std::size_t count, double* dst) {
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t le;
    std::memcpy(&le, src + i * 8, 8);
    dst[i] = std::bit_cast<double>(to_le(le));
  }
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void dump(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace

std::vector<TensorRecord> write_tensor_blob(const std::filesystem::path& path,
                                            const std::vector<NamedTensor>& tensors) {
  std::string buf;
  std::vector<TensorRecord> records;
  records.reserve(tensors.size());
  for (const auto& [name, t] : tensors) {
    records.push_back({name, t.shape(), buf.size(), t.numel()});
    append_f64(buf, t.data());
  }
  dump(path, buf);
  return records;
}

std::vector<NamedTensor> read_tensor_blob(const std::filesystem::path& path,
                                          const std::vector<TensorRecord>& records) {
  const std::string buf = slurp(path);
  std::vector<NamedTensor> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (r.count != shape_numel(r.shape))
      throw FormatError("tensor '" + r.name + "': count " + std::to_string(r.count) +
                        " disagrees with shape " + shape_str(r.shape));
    const std::uint64_t end = r.offset + r.count * 8;
    if (end > buf.size())
      throw FormatError("tensor '" + r.name + "' at offset " + std::to_string(r.offset) + " needs bytes [" + std::to_string(r.offset) + ", " +
                        std::to_string(end) + ") but " + path.string() + " has only " +
                        std::to_string(buf.size()) + " bytes");
    std::vector<double> values(r.count);
    decode_f64(buf.data() + r.offset, r.count, values.data());
    out.emplace_back(r.name, Tensor(r.shape, std::move(values)));
  }
  return out;
}

void write_f64(const std::filesystem::path& path, std::span<const double> values) {
  std::string buf;
  append_f64(buf, values);
  dump(path, buf);
}

std::vector<double> read_f64(const std::filesystem::path& path, std::size_t expected_count) {
  const std::string buf = slurp(path);
  if (buf.size() != expected_count * 8)
    throw FormatError(path.string() + ": expected " + std::to_string(expected_count * 8) +
                      " bytes, found " + std::to_string(buf.size()));
  std::vector<double> values(expected_count);
  decode_f64(buf.data(), expected_count, values.data());
  return values;
}

void write_u8(const std::filesystem::path& path, std::span<const std::uint8_t> values) {
  dump(path, std::string(reinterpret_cast<const char*>(values.data()), values.size()));
}

std::vector<std::uint8_t> read_u8(const std::filesystem::path& path, std::size_t expected_count) {
  const std::string buf = slurp(path);
  if (buf.size() != expected_count)
    throw FormatError(path.string() + ": expected " + std::to_string(expected_count) +
                      " bytes, found " + std::to_string(buf.size()));
  return {buf.begin(), buf.end()};
}

void write_text(const std::filesystem::path& path, const std::string& text) { dump(path, text); }

std::string read_text(const std::filesystem::path& path) { return slurp(path); }

}  // namespace hyperseg
