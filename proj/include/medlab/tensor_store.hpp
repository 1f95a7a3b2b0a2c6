#pragma once

// MLAB v1 tensor container.
//
// Layout (all integers little-endian):
//   "MLAB" | u32 version=1 | u32 entry count
//   per entry: u32 name length | name bytes | u8 dtype (0 = f32) | u8 ndim |
//              ndim x u64 dims | row-major f32 payload (last dim fastest)

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace medlab::store {

inline constexpr char kMagic[4] = {'M', 'L', 'A', 'B'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

struct TensorEntry {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> data;

  std::uint64_t element_count() const;
  bool operator==(const TensorEntry&) const = default;
};

class TensorArchive {
 public:
  TensorArchive() = default;
  explicit TensorArchive(std::vector<TensorEntry> entries);

  // Throws DuplicateTensor or ShapeMismatch.
  void add(TensorEntry entry);
  void validate() const;

  const std::vector<TensorEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const TensorEntry* find(std::string_view name) const;

  // Element-exact comparison (bitwise on floats, so NaN payloads compare equal).
  bool operator==(const TensorArchive& other) const;

 private:
  std::vector<TensorEntry> entries_;
};

std::uint64_t write_archive(const TensorArchive& archive, std::ostream& out);
TensorArchive read_archive(std::istream& in);

std::uint64_t write_archive_file(const TensorArchive& archive, const std::filesystem::path& path);
TensorArchive read_archive_file(const std::filesystem::path& path);

}  // namespace medlab::store
