#include "mx/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are not supported");

namespace mx {

namespace {

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), f_(path, std::ios::binary | std::ios::trunc) {
    if (!f_) throw std::runtime_error("cannot open '" + path + "' for writing");
  }
  void bytes(const void* p, std::size_t len) {
    f_.write(static_cast<const char*>(p), static_cast<std::streamsize>(len));
    if (!f_) throw std::runtime_error("write failure on '" + path_ + "'");
  }
  template <typename T>
  void pod(T v) {
    bytes(&v, sizeof(T));
  }
  void magic(const char m[4]) { bytes(m, 4); }

 private:
  std::string path_;
  std::ofstream f_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), f_(path, std::ios::binary) {
    if (!f_) throw std::runtime_error("cannot open '" + path + "' for reading");
  }
  void bytes(void* p, std::size_t len) {
    f_.read(static_cast<char*>(p), static_cast<std::streamsize>(len));
    if (static_cast<std::size_t>(f_.gcount()) != len)
      throw std::runtime_error("'" + path_ + "': truncated file, needed " + std::to_string(len) +
                               " bytes at byte offset " + std::to_string(offset_));
    offset_ += len;
  }
  template <typename T>
  T pod() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  void expect_magic(const char m[4], const char* kind) {
    char got[4];
    bytes(got, 4);
    if (std::memcmp(got, m, 4) != 0)
      throw std::runtime_error("'" + path_ + "': bad magic for " + kind + " (expected \"" +
                               std::string(m, 4) + "\", got \"" + std::string(got, 4) +
                               "\") at byte offset 0");
  }
  void expect_version(std::uint16_t want, const char* kind) {
    const std::size_t at = offset_;
    const auto got = pod<std::uint16_t>();
    if (got != want)
      throw std::runtime_error("'" + path_ + "': unsupported " + std::string(kind) + " version " +
                               std::to_string(got) + " (expected " + std::to_string(want) +
                               ") at byte offset " + std::to_string(at));
  }
  std::size_t offset() const { return offset_; }
  void check_eof(const char* kind) {
    char c;
    f_.read(&c, 1);
    if (!f_.eof())
      throw std::runtime_error("'" + path_ + "': trailing bytes after " + kind + " at byte offset " +
                               std::to_string(offset_));
  }

 private:
  std::string path_;
  std::ifstream f_;
  std::size_t offset_ = 0;
};

constexpr std::uint16_t kFormatVersion = 1;

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  Writer w(path);
  w.magic("MXDS");
  w.pod<std::uint16_t>(kFormatVersion);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(ds.n));
  w.pod<std::uint16_t>(static_cast<std::uint16_t>(ds.channels));
  w.pod<std::uint16_t>(static_cast<std::uint16_t>(ds.height));
  w.pod<std::uint16_t>(static_cast<std::uint16_t>(ds.width));
  w.pod<std::uint16_t>(static_cast<std::uint16_t>(ds.num_classes));
  w.pod<std::uint8_t>(static_cast<std::uint8_t>(ds.split));
  w.bytes(ds.images.data(), ds.images.size());
  w.bytes(ds.labels.data(), ds.labels.size() * sizeof(std::uint16_t));
}

Dataset load_dataset(const std::string& path) {
  Reader r(path);
  r.expect_magic("MXDS", "dataset");
  r.expect_version(kFormatVersion, "dataset");
  Dataset ds;
  ds.n = static_cast<int>(r.pod<std::uint32_t>());
  ds.channels = r.pod<std::uint16_t>();
  ds.height = r.pod<std::uint16_t>();
  ds.width = r.pod<std::uint16_t>();
  ds.num_classes = r.pod<std::uint16_t>();
  const auto split = r.pod<std::uint8_t>();
  if (split > 2)
    throw std::runtime_error("'" + path + "': invalid split tag " + std::to_string(split) +
                             " at byte offset " + std::to_string(r.offset() - 1));
  ds.split = static_cast<Dataset::Split>(split);
  ds.images.resize(static_cast<std::size_t>(ds.n) * ds.image_size());
  r.bytes(ds.images.data(), ds.images.size());
  ds.labels.resize(static_cast<std::size_t>(ds.n));
  const std::size_t labels_at = r.offset();
  r.bytes(ds.labels.data(), ds.labels.size() * sizeof(std::uint16_t));
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    if (ds.labels[i] >= ds.num_classes)
      throw std::runtime_error("'" + path + "': label " + std::to_string(ds.labels[i]) +
                               " out of range [0, " + std::to_string(ds.num_classes) +
                               ") at byte offset " + std::to_string(labels_at + 2 * i));
  r.check_eof("dataset");
  return ds;
}

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor<float>>& state,
                     const CheckpointMeta& meta) {
  Writer w(path);
  w.magic("MXCK");
  w.pod<std::uint16_t>(kFormatVersion);
  w.pod<std::uint32_t>(meta.epoch);
  w.pod<std::uint64_t>(meta.config_digest);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(state.size()));
  for (const auto& [name, t] : state) {  // std::map iterates sorted by name
    w.pod<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(t.shape().size()));
    for (int d : t.shape()) w.pod<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.bytes(t.data(), sizeof(float) * static_cast<std::size_t>(t.numel()));
  }
}

std::map<std::string, Tensor<float>> load_checkpoint(const std::string& path, CheckpointMeta* meta) {
  Reader r(path);
  r.expect_magic("MXCK", "checkpoint");
  r.expect_version(kFormatVersion, "checkpoint");
  CheckpointMeta m;
  m.epoch = r.pod<std::uint32_t>();
  m.config_digest = r.pod<std::uint64_t>();
  const auto count = r.pod<std::uint32_t>();
  std::map<std::string, Tensor<float>> state;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.pod<std::uint16_t>();
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    const auto rank = r.pod<std::uint8_t>();
    Shape shape;
    for (int d = 0; d < rank; ++d) shape.push_back(static_cast<int>(r.pod<std::uint32_t>()));
    Tensor<float> t = Tensor<float>::zeros(shape);
    r.bytes(t.data(), sizeof(float) * static_cast<std::size_t>(t.numel()));
    if (!state.emplace(name, t).second)
      throw std::runtime_error("'" + path + "': duplicate tensor name '" + name + "' at byte offset " +
                               std::to_string(r.offset()));
  }
  r.check_eof("checkpoint");
  if (meta) *meta = m;
  return state;
}

void assign_state(std::map<std::string, Tensor<float>>& dst, const std::map<std::string, Tensor<float>>& src) {
  for (const auto& [name, t] : src)
    require(dst.count(name) != 0, "checkpoint holds unknown tensor '" + name + "'");
  for (auto& [name, t] : dst) {
    auto it = src.find(name);
    require(it != src.end(), "checkpoint is missing tensor '" + name + "'");
    require(it->second.shape() == t.shape(),
            "checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                ", model expects " + shape_str(t.shape()));
    t.array() = it->second.array();
  }
}

void save_trace(const std::string& path, const LogitTrace& trace) {
  Writer w(path);
  w.magic("MXTR");
  w.pod<std::uint16_t>(kFormatVersion);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(trace.n));
  w.pod<std::uint16_t>(static_cast<std::uint16_t>(trace.m));
  w.pod<std::uint16_t>(static_cast<std::uint16_t>(trace.k));
  w.bytes(trace.logits.data(), sizeof(float) * trace.logits.size());
  w.bytes(trace.labels.data(), sizeof(std::uint16_t) * trace.labels.size());
}

LogitTrace load_trace(const std::string& path) {
  Reader r(path);
  r.expect_magic("MXTR", "trace");
  r.expect_version(kFormatVersion, "trace");
  LogitTrace t;
  t.n = static_cast<int>(r.pod<std::uint32_t>());
  t.m = r.pod<std::uint16_t>();
  t.k = r.pod<std::uint16_t>();
  t.logits.resize(static_cast<std::size_t>(t.n) * t.m * t.k);
  r.bytes(t.logits.data(), sizeof(float) * t.logits.size());
  t.labels.resize(static_cast<std::size_t>(t.n));
  const std::size_t labels_at = r.offset();
  r.bytes(t.labels.data(), sizeof(std::uint16_t) * t.labels.size());
  for (std::size_t i = 0; i < t.labels.size(); ++i)
    if (t.labels[i] >= t.k)
      throw std::runtime_error("'" + path + "': label " + std::to_string(t.labels[i]) +
                               " out of range [0, " + std::to_string(t.k) + ") at byte offset " +
                               std::to_string(labels_at + 2 * i));
  r.check_eof("trace");
  return t;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (std::size_t i = 0; i < header.size(); ++i) f << (i ? "," : "") << header[i];
  f << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << row[i];
    f << "\n";
  }
  if (!f) throw std::runtime_error("write failure on '" + path + "'");
}

}  // namespace mx
