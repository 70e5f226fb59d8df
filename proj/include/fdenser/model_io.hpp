#pragma once

// Trained-model container. Little-endian throughout:
//
//   magic "FDNMODEL" | u32 version
//   str phenotype text
//   i32 height, width, channels | u8 spatial | i32 num_classes
//   u64 n, f64[n] normalizer mean | u64 n, f64[n] normalizer stddev
//   u64 n, f64[n] original label values (may be empty)
//   u64 tensors, then per tensor: u64 rows, u64 cols, f32[rows*cols] row-major
//
// where str is u64 length followed by the bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdenser/data.hpp"
#include "fdenser/genotype.hpp"
#include "fdenser/network.hpp"

namespace fdenser {

inline constexpr char kModelMagic[8] = {'F', 'D', 'N', 'M', 'O', 'D', 'E', 'L'};
inline constexpr std::uint32_t kModelVersion = 1;

class ModelFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainedModel {
  Phenotype phenotype;
  Shape input_shape;
  int num_classes = 0;
  Normalizer normalizer;
  std::vector<double> label_values;
  Network<float> network;

  /// Class ids for raw (un-normalized) feature rows.
  std::vector<int> predict(Matrix<float> x) {
    normalizer.apply(x);
    Rng unused(0);
    std::vector<int> out;
    for (Eigen::Index start = 0; start < x.rows(); start += 1024) {
      const Eigen::Index n = std::min<Eigen::Index>(1024, x.rows() - start);
      const Matrix<float> probs = network.forward(x.middleRows(start, n), false, unused);
      for (Eigen::Index r = 0; r < n; ++r) {
        Eigen::Index arg;
        probs.row(r).maxCoeff(&arg);
        out.push_back(static_cast<int>(arg));
      }
    }
    return out;
  }

  /// The original label value of a class id, when the source had one.
  double label_of(int cls) const {
    return label_values.empty() ? cls : label_values.at(static_cast<std::size_t>(cls));
  }
};

namespace detail {
static_assert(std::endian::native == std::endian::little, "model files assume a little-endian host");

class Writer {
 public:
  template <class T>
  void raw(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void u64(std::uint64_t v) { raw(v); }
  void i32(std::int32_t v) { raw(v); }
  void str(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void doubles(const std::vector<double>& v) {
    u64(v.size());
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  std::string take() { return out_.str(); }

 private:
  std::ostringstream out_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  template <class T>
  T raw() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::uint64_t u64() { return raw<std::uint64_t>(); }
  std::int32_t i32() { return raw<std::int32_t>(); }
  std::string str() {
    const auto n = u64();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> doubles() {
    const auto n = u64();
    need(n * sizeof(double));
    std::vector<double> v(n);
    std::memcpy(v.data(), data_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  void floats(float* dst, std::size_t n) {
    need(n * sizeof(float));
    std::memcpy(dst, data_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > data_.size() - pos_) throw ModelFormatError("model file is truncated");
  }
  std::string data_;
  std::size_t pos_ = 0;
};
}  // namespace detail

inline std::string model_bytes(const TrainedModel& m) {
  detail::Writer w;
  for (char c : kModelMagic) w.raw(c);
  w.raw(kModelVersion);
  w.str(phenotype_to_text(m.phenotype));
  w.i32(m.input_shape.height);
  w.i32(m.input_shape.width);
  w.i32(m.input_shape.channels);
  w.raw(static_cast<std::uint8_t>(m.input_shape.spatial));
  w.i32(m.num_classes);
  w.doubles(m.normalizer.mean);
  w.doubles(m.normalizer.stddev);
  w.doubles(m.label_values);
  const auto state = m.network.state();
  w.u64(state.size());
  for (const auto& t : state) {
    w.u64(static_cast<std::uint64_t>(t.rows()));
    w.u64(static_cast<std::uint64_t>(t.cols()));
    for (Eigen::Index i = 0; i < t.size(); ++i) w.raw(t.data()[i]);
  }
  return w.take();
}

inline TrainedModel model_from_bytes(std::string bytes) {
  detail::Reader r(std::move(bytes));
  for (char c : kModelMagic)
    if (r.raw<char>() != c) throw ModelFormatError("not a model file");
  const auto version = r.raw<std::uint32_t>();
  if (version != kModelVersion)
    throw ModelFormatError("model version " + std::to_string(version) + " is not supported (expected " +
                           std::to_string(kModelVersion) + ")");
  TrainedModel m;
  m.phenotype = parse_phenotype(r.str());
  m.input_shape.height = r.i32();
  m.input_shape.width = r.i32();
  m.input_shape.channels = r.i32();
  m.input_shape.spatial = r.raw<std::uint8_t>() != 0;
  m.num_classes = r.i32();
  m.normalizer.mean = r.doubles();
  m.normalizer.stddev = r.doubles();
  m.label_values = r.doubles();
  std::vector<Matrix<float>> state(r.u64());
  for (auto& t : state) {
    const auto rows = r.u64(), cols = r.u64();
    if (rows > (1ULL << 32) || cols > (1ULL << 32)) throw ModelFormatError("implausible tensor shape");
    t.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    r.floats(t.data(), rows * cols);
  }
  if (!r.done()) throw ModelFormatError("trailing bytes after model");
  Rng rng(0);
  m.network = compile<float>(m.phenotype, m.input_shape, m.num_classes, rng);
  try {
    m.network.load_state(state);
  } catch (const std::invalid_argument&) {
    throw ModelFormatError("model tensors do not match its phenotype");
  }
  return m;
}

inline void save_model(const TrainedModel& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const auto bytes = model_bytes(m);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline TrainedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read model " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return model_from_bytes(ss.str());
}

}  // namespace fdenser
