#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mx/data.hpp"
#include "mx/tensor.hpp"

namespace mx {

// Binary file formats, all little-endian with a 4-byte magic and a u16
// version. Loaders reject wrong magic or version and report the byte offset
// of any malformed field.
//
//   MXDS  dataset     magic, version, N u32, C u16, H u16, W u16, K u16,
//                     split u8, pixels u8[N*C*H*W], labels u16[N]
//   MXCK  checkpoint  magic, version, epoch u32, config digest u64,
//                     entry count u32, then per entry (sorted by name):
//                     name length u16, name bytes, rank u8, dims u32[rank],
//                     f32 data
//   MXTR  trace       magic, version, N u32, M u16, K u16,
//                     f32 logits[N*M*K], labels u16[N]

struct LogitTrace {
  int n = 0, m = 0, k = 0;
  std::vector<float> logits;          // n * m * k, sample-major
  std::vector<std::uint16_t> labels;  // in [0, k)
  std::uint64_t fingerprint = 0;      // in-memory annotation, not serialized

  long long index(int sample, int exit_idx) const {  // start of a K-row
    return (static_cast<long long>(sample) * m + exit_idx) * k;
  }
};

struct CheckpointMeta {
  std::uint32_t epoch = 0;
  std::uint64_t config_digest = 0;
};

void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor<float>>& state,
                     const CheckpointMeta& meta);
std::map<std::string, Tensor<float>> load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);

// Assigns a loaded table into live state tensors; name sets and shapes must
// match exactly.
void assign_state(std::map<std::string, Tensor<float>>& dst, const std::map<std::string, Tensor<float>>& src);

void save_trace(const std::string& path, const LogitTrace& trace);
LogitTrace load_trace(const std::string& path);

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

}  // namespace mx
