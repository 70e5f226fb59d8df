#pragma once

// Datasets: CIFAR-10 binary batches, numeric CSV files and the synthetic
// two-ring problem, plus seeded train/validation/test splitting.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdenser/network.hpp"
#include "fdenser/rng.hpp"
#include "fdenser/util.hpp"

namespace fdenser {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  Matrix<float> features;  // one row per instance (HWC order for images)
  std::vector<int> labels;
  int num_classes = 0;
  Shape shape;                      // per-instance shape
  bool image_shaped = false;
  std::vector<double> label_values;  // original label of each class id (CSV sources)

  std::vector<std::size_t> pool;            // instances available for train/validation
  std::vector<std::size_t> canonical_test;  // test instances fixed by the source, if any

  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;

  std::size_t size() const { return labels.size(); }
};

/// Seeded split of the pool: train is the head of the shuffle, validation the
/// tail; the test split is the source's canonical test set when it has one,
/// otherwise the `test_n` instances after the training block.
inline Dataset split(Dataset ds, std::size_t train_n, std::size_t val_n, std::size_t test_n, std::uint64_t seed) {
  const bool canonical = !ds.canonical_test.empty();
  const std::size_t needed = train_n + val_n + (canonical ? 0 : test_n);
  if (needed > ds.pool.size())
    throw DataError("split needs " + std::to_string(needed) + " instances, pool has " + std::to_string(ds.pool.size()));
  auto order = ds.pool;
  Rng rng(seed);
  rng.shuffle(order);
  ds.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train_n));
  ds.validation.assign(order.end() - static_cast<std::ptrdiff_t>(val_n), order.end());
  if (canonical)
    ds.test = ds.canonical_test;
  else
    ds.test.assign(order.begin() + static_cast<std::ptrdiff_t>(train_n),
                   order.begin() + static_cast<std::ptrdiff_t>(train_n + test_n));
  return ds;
}

inline constexpr int kCifarSide = 32;
inline constexpr int kCifarChannels = 3;
inline constexpr std::size_t kCifarRecordBytes = 1 + kCifarSide * kCifarSide * kCifarChannels;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;

namespace detail {
inline void read_cifar_file(const std::filesystem::path& path, Dataset& ds, std::size_t row0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing CIFAR-10 file: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != kCifarRecordBytes * kCifarRecordsPerFile)
    throw DataError("wrong size for " + path.string() + ": " + std::to_string(bytes.size()) + " bytes, expected " +
                    std::to_string(kCifarRecordBytes * kCifarRecordsPerFile));
  constexpr int plane = kCifarSide * kCifarSide;
  for (std::size_t r = 0; r < kCifarRecordsPerFile; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) throw DataError("bad label in " + path.string());
    const auto row = static_cast<Eigen::Index>(row0 + r);
    ds.labels[row0 + r] = rec[0];
    // stored channel-planar (R plane, G plane, B plane); converted to HWC
    for (int p = 0; p < plane; ++p)
      for (int c = 0; c < kCifarChannels; ++c)
        ds.features(row, p * kCifarChannels + c) = static_cast<float>(rec[1 + c * plane + p]) / 255.0f;
  }
}
}  // namespace detail

/// data_batch_1..5.bin form the pool, test_batch.bin the canonical test set.
inline Dataset load_cifar10_binary(const std::filesystem::path& dir) {
  Dataset ds;
  const std::size_t total = 6 * kCifarRecordsPerFile;
  ds.features.resize(static_cast<Eigen::Index>(total), kCifarSide * kCifarSide * kCifarChannels);
  ds.labels.assign(total, 0);
  for (int b = 1; b <= 5; ++b)
    detail::read_cifar_file(dir / ("data_batch_" + std::to_string(b) + ".bin"), ds, (b - 1) * kCifarRecordsPerFile);
  detail::read_cifar_file(dir / "test_batch.bin", ds, 5 * kCifarRecordsPerFile);
  ds.num_classes = 10;
  ds.shape = Shape::image(kCifarSide, kCifarSide, kCifarChannels);
  ds.image_shaped = true;
  for (std::size_t i = 0; i < 5 * kCifarRecordsPerFile; ++i) ds.pool.push_back(i);
  for (std::size_t i = 5 * kCifarRecordsPerFile; i < total; ++i) ds.canonical_test.push_back(i);
  return ds;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

inline CsvTable read_numeric_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV file: " + path);
  CsvTable t;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split(trim(line), ',');
    for (auto& c : cells) c = std::string(trim(c));
    if (t.header.empty()) {
      t.header = cells;
      continue;
    }
    if (cells.size() != t.header.size())
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(t.header.size()) +
                      " cells, found " + std::to_string(cells.size()));
    std::vector<double> row;
    for (const auto& c : cells) {
      auto v = parse_number(c);
      if (!v) throw DataError(path + ":" + std::to_string(line_no) + ": non-numeric cell '" + c + "'");
      row.push_back(*v);
    }
    t.rows.push_back(std::move(row));
  }
  if (t.header.empty()) throw DataError("empty CSV file: " + path);
  if (t.rows.empty()) throw DataError("CSV file has a header but no rows: " + path);
  return t;
}

/// Tabular dataset; class ids are the sorted distinct label values.
inline Dataset load_csv(const std::string& path, const std::string& label_column) {
  const auto t = read_numeric_csv(path);
  const auto it = std::find(t.header.begin(), t.header.end(), label_column);
  if (it == t.header.end()) {
    std::string cols;
    for (const auto& h : t.header) cols += (cols.empty() ? "" : ", ") + h;
    throw DataError("label column '" + label_column + "' not found; available columns: " + cols);
  }
  const auto label_idx = static_cast<std::size_t>(it - t.header.begin());
  Dataset ds;
  for (const auto& row : t.rows) ds.label_values.push_back(row[label_idx]);
  std::sort(ds.label_values.begin(), ds.label_values.end());
  ds.label_values.erase(std::unique(ds.label_values.begin(), ds.label_values.end()), ds.label_values.end());
  ds.num_classes = static_cast<int>(ds.label_values.size());
  const int feats = static_cast<int>(t.header.size()) - 1;
  if (feats < 1) throw DataError("CSV file has no feature columns: " + path);
  ds.features.resize(static_cast<Eigen::Index>(t.rows.size()), feats);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    int c = 0;
    for (std::size_t k = 0; k < t.rows[r].size(); ++k)
      if (k != label_idx) ds.features(static_cast<Eigen::Index>(r), c++) = static_cast<float>(t.rows[r][k]);
    const auto pos = std::lower_bound(ds.label_values.begin(), ds.label_values.end(), t.rows[r][label_idx]);
    ds.labels.push_back(static_cast<int>(pos - ds.label_values.begin()));
  }
  ds.shape = Shape::flat(feats);
  for (std::size_t i = 0; i < ds.labels.size(); ++i) ds.pool.push_back(i);
  return ds;
}

/// Two concentric rings of radius 1 (class 0) and 2 (class 1) with isotropic
/// Gaussian noise; class 0 instances come first.
inline Dataset make_rings(std::size_t n_per_class, double noise_sigma, std::uint64_t seed) {
  if (n_per_class < 1) throw DataError("make_rings needs at least one point per class");
  Dataset ds;
  Rng rng(seed);
  ds.features.resize(static_cast<Eigen::Index>(2 * n_per_class), 2);
  for (int cls = 0; cls < 2; ++cls) {
    const double radius = cls == 0 ? 1.0 : 2.0;
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double nx = noise_sigma > 0.0 ? noise_sigma * rng.normal() : 0.0;
      const double ny = noise_sigma > 0.0 ? noise_sigma * rng.normal() : 0.0;
      const auto row = static_cast<Eigen::Index>(cls * n_per_class + i);
      ds.features(row, 0) = static_cast<float>(radius * std::cos(theta) + nx);
      ds.features(row, 1) = static_cast<float>(radius * std::sin(theta) + ny);
      ds.labels.push_back(cls);
    }
  }
  ds.num_classes = 2;
  ds.shape = Shape::flat(2);
  for (std::size_t i = 0; i < ds.labels.size(); ++i) ds.pool.push_back(i);
  return ds;
}

/// Feature preprocessing fitted on the training split: images are already in
/// [0,1]; tabular features are standardized.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Normalizer fit(const Dataset& ds) {
    Normalizer n;
    if (ds.image_shaped || ds.train.empty()) return n;
    const auto cols = ds.features.cols();
    n.mean.assign(static_cast<std::size_t>(cols), 0.0);
    n.stddev.assign(static_cast<std::size_t>(cols), 0.0);
    for (auto i : ds.train)
      for (Eigen::Index c = 0; c < cols; ++c) n.mean[c] += ds.features(static_cast<Eigen::Index>(i), c);
    for (auto& m : n.mean) m /= static_cast<double>(ds.train.size());
    for (auto i : ds.train)
      for (Eigen::Index c = 0; c < cols; ++c) {
        const double d = ds.features(static_cast<Eigen::Index>(i), c) - n.mean[c];
        n.stddev[c] += d * d;
      }
    for (auto& s : n.stddev) {
      s = std::sqrt(s / static_cast<double>(ds.train.size()));
      if (s == 0.0) s = 1.0;
    }
    return n;
  }

  bool identity() const { return mean.empty(); }

  void apply(Matrix<float>& x) const {
    if (identity()) return;
    for (Eigen::Index r = 0; r < x.rows(); ++r)
      for (Eigen::Index c = 0; c < x.cols(); ++c)
        x(r, c) = static_cast<float>((x(r, c) - mean[c]) / stddev[c]);
  }
};

/// Materialized, normalized splits shared read-only by evaluations.
struct PreparedData {
  Matrix<float> train_x, val_x, test_x;
  std::vector<int> train_y, val_y, test_y;
  Shape shape;
  int num_classes = 0;
  bool image_shaped = false;
  Normalizer normalizer;
  std::vector<double> label_values;
};

inline PreparedData prepare(const Dataset& ds) {
  if (ds.train.empty() || ds.validation.empty()) throw DataError("dataset has no train/validation split");
  PreparedData p;
  p.shape = ds.shape;
  p.num_classes = ds.num_classes;
  p.image_shaped = ds.image_shaped;
  p.normalizer = Normalizer::fit(ds);
  p.label_values = ds.label_values;
  auto gather = [&](const std::vector<std::size_t>& idx, Matrix<float>& x, std::vector<int>& y) {
    x.resize(static_cast<Eigen::Index>(idx.size()), ds.features.cols());
    y.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) = ds.features.row(static_cast<Eigen::Index>(idx[i]));
      y[i] = ds.labels[idx[i]];
    }
    p.normalizer.apply(x);
  };
  gather(ds.train, p.train_x, p.train_y);
  gather(ds.validation, p.val_x, p.val_y);
  gather(ds.test, p.test_x, p.test_y);
  return p;
}

}  // namespace fdenser
