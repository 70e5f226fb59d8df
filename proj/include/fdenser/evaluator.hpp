#pragma once

// Fitness evaluation: train a decoded individual from scratch under its
// budget, early-stop on validation loss, restore the best weights and report
// validation accuracy as fitness. The test split is only ever measured.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "fdenser/budget.hpp"
#include "fdenser/data.hpp"
#include "fdenser/genotype.hpp"
#include "fdenser/network.hpp"
#include "fdenser/optim.hpp"

namespace fdenser {

/// True iff each of the last `patience` losses failed to improve strictly on
/// the best loss seen before it.
inline bool should_stop_early(const std::vector<double>& history, int patience) {
  if (patience < 1) throw std::invalid_argument("patience must be at least 1");
  const auto p = static_cast<std::size_t>(patience);
  if (history.size() < p + 1) return false;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (i >= history.size() - p && history[i] < best) return false;
    best = std::min(best, history[i]);
  }
  return true;
}

inline constexpr int kAugmentPadding = 4;
inline constexpr double kFlipProbability = 0.5;

/// Zero-pad an HWC image by `pad` pixels on every side.
inline std::vector<float> pad_image(const float* in, const Shape& s, int pad) {
  const int H = s.height + 2 * pad, W = s.width + 2 * pad, C = s.channels;
  std::vector<float> out(static_cast<std::size_t>(H * W * C), 0.0f);
  for (int y = 0; y < s.height; ++y)
    std::copy(in + y * s.width * C, in + (y + 1) * s.width * C, out.begin() + ((y + pad) * W + pad) * C);
  return out;
}

/// Crop the padded image at offset (dy, dx) back to the input size, then
/// optionally mirror horizontally. dy = dx = padding is the identity crop.
inline void augment_image(const float* in, float* out, const Shape& s, int dy, int dx, bool flip) {
  const int C = s.channels;
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      const int sy = y + dy - kAugmentPadding;
      const int sx = x + dx - kAugmentPadding;
      const int ox = flip ? s.width - 1 - x : x;
      float* dst = out + (y * s.width + ox) * C;
      if (sy < 0 || sy >= s.height || sx < 0 || sx >= s.width)
        std::fill(dst, dst + C, 0.0f);
      else
        std::copy(in + (sy * s.width + sx) * C, in + (sy * s.width + sx + 1) * C, dst);
    }
}

/// Pad-4 random crop plus 50% horizontal flip, applied per image in place.
inline void augment(Matrix<float>& batch, const Shape& s, Rng& rng) {
  if (!s.spatial || batch.cols() != s.size()) throw std::invalid_argument("augment needs HxWxC image rows");
  std::vector<float> row(static_cast<std::size_t>(s.size()));
  for (Eigen::Index r = 0; r < batch.rows(); ++r) {
    const int dy = static_cast<int>(rng.uniform_int(0, 2 * kAugmentPadding));
    const int dx = static_cast<int>(rng.uniform_int(0, 2 * kAugmentPadding));
    const bool flip = rng.bernoulli(kFlipProbability);
    float* data = batch.data() + r * batch.cols();
    std::copy(data, data + s.size(), row.begin());
    augment_image(row.data(), data, s, dy, dx, flip);
  }
}

struct SplitScore {
  double loss = 0.0;  // mean cross-entropy
  double accuracy = 0.0;
};

inline constexpr Eigen::Index kScoreChunk = 1024;

template <class S>
SplitScore score(Network<S>& net, const Matrix<S>& x, const std::vector<int>& y) {
  if (x.rows() == 0) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  Rng unused(0);
  double loss = 0.0;
  long hits = 0;
  for (Eigen::Index start = 0; start < x.rows(); start += kScoreChunk) {
    const Eigen::Index n = std::min(kScoreChunk, x.rows() - start);
    const Matrix<S> probs = net.forward(x.middleRows(start, n), false, unused);
    auto [l, h] = loss_and_hits(probs, y.data() + start);
    loss += l;
    hits += h;
  }
  return {loss / static_cast<double>(x.rows()), static_cast<double>(hits) / static_cast<double>(x.rows())};
}

struct TrainOptions {
  std::function<void()> on_batch;  // called after every optimizer step
  bool keep_model = false;
};

struct TrainResult {
  FitnessRecord record;
  std::vector<double> validation_losses;
  std::optional<Network<float>> model;  // restored best weights, when requested
};

/// Train `phenotype` from scratch with `strategy` under `budget`.
inline TrainResult train_phenotype(const Phenotype& phenotype, const LearningStrategy& strategy,
                                   const PreparedData& data, const Budget& budget, std::uint64_t seed,
                                   const TrainOptions& options = {}) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - start).count(); };

  TrainResult out;
  Rng rng(seed);
  Network<float> net;
  try {
    net = compile<float>(phenotype, data.shape, data.num_classes, rng);
  } catch (const InvalidArchitecture& e) {
    out.record = FitnessRecord::invalid(e.what());
    out.record.elapsed_seconds = elapsed();
    return out;
  }

  OptimizerState<float> opt;
  auto params = net.parameters();
  auto grads = net.gradients();
  const auto n = static_cast<std::size_t>(data.train_x.rows());
  const std::size_t batch = std::max(1, strategy.batch_size);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const long max_epochs = budget.mode == BudgetMode::epochs ? std::max(1L, std::lround(budget.amount)) : -1;

  double best_loss = std::numeric_limits<double>::infinity();
  double best_acc = 0.0;
  std::vector<Matrix<float>> best_state;
  StopReason reason = StopReason::budget;
  Matrix<float> xb;
  std::vector<int> yb;

  auto fail_nan = [&] {
    out.record = FitnessRecord::invalid("training diverged (non-finite loss)", StopReason::nan);
    out.record.epochs_run = static_cast<int>(out.validation_losses.size());
    out.record.elapsed_seconds = elapsed();
    return out;
  };

  while (true) {
    rng.shuffle(order);
    bool time_up = false;
    for (std::size_t b = 0; b < n; b += batch) {
      const std::size_t m = std::min(batch, n - b);
      xb.resize(static_cast<Eigen::Index>(m), data.train_x.cols());
      yb.resize(m);
      for (std::size_t i = 0; i < m; ++i) {
        xb.row(static_cast<Eigen::Index>(i)) = data.train_x.row(static_cast<Eigen::Index>(order[b + i]));
        yb[i] = data.train_y[order[b + i]];
      }
      if (data.image_shaped) augment(xb, data.shape, rng);
      Matrix<float> probs = net.forward(xb, true, rng);
      const auto [loss, hits] = loss_and_hits(probs, yb.data());
      (void)hits;
      if (!std::isfinite(loss) || !probs.allFinite()) return fail_nan();
      for (std::size_t i = 0; i < m; ++i) probs(static_cast<Eigen::Index>(i), yb[i]) -= 1.0f;
      probs /= static_cast<float>(m);
      net.backward_logits(probs);
      step<float>(strategy, opt, params, grads);
      if (options.on_batch) options.on_batch();
      if (budget.mode == BudgetMode::wall_clock_seconds && elapsed() >= budget.amount) {
        time_up = true;
        break;
      }
    }

    const auto val = score(net, data.val_x, data.val_y);
    if (!std::isfinite(val.loss)) return fail_nan();
    out.validation_losses.push_back(val.loss);
    if (val.loss < best_loss) {
      best_loss = val.loss;
      best_acc = val.accuracy;
      best_state = net.state();
    }
    const long epochs = static_cast<long>(out.validation_losses.size());
    if (time_up || (max_epochs > 0 && epochs >= max_epochs)) {
      reason = StopReason::budget;
      break;
    }
    if (strategy.early_stop_patience && should_stop_early(out.validation_losses, *strategy.early_stop_patience)) {
      reason = StopReason::early_stop;
      break;
    }
  }

  net.load_state(best_state);
  out.record.fitness = best_acc;
  out.record.validation_accuracy = best_acc;
  out.record.test_accuracy = score(net, data.test_x, data.test_y).accuracy;
  out.record.epochs_run = static_cast<int>(out.validation_losses.size());
  out.record.stopped_by = reason;
  out.record.elapsed_seconds = elapsed();
  if (options.keep_model) out.model = std::move(net);
  return out;
}

/// Decode, compile and train `ind` under its own budget. Every failure mode
/// maps to a record with fitness -1.
inline TrainResult train_individual(const Individual& ind, const Grammar& grammar, const OuterStructure& structure,
                                    const PreparedData& data, std::uint64_t seed, const TrainOptions& options = {}) {
  TrainResult out;
  const auto start = std::chrono::steady_clock::now();
  try {
    const Phenotype ph = decode(ind, grammar, structure);
    const LearningStrategy strategy = strategy_from_descriptor(ph.learning, learning_bounds(grammar));
    return train_phenotype(ph, strategy, data, ind.train_budget, seed, options);
  } catch (const std::exception& e) {
    out.record = FitnessRecord::invalid(e.what());
  }
  out.record.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

inline FitnessRecord evaluate(const Individual& ind, const Grammar& grammar, const OuterStructure& structure,
                              const PreparedData& data, std::uint64_t seed) {
  return train_individual(ind, grammar, structure, data, seed).record;
}

}  // namespace fdenser
