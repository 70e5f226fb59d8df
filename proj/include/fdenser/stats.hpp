#pragma once

// Two-sample Mann-Whitney U test (normal approximation, tie-corrected) and
// the r = |z| / sqrt(N) effect size.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace fdenser {

enum class Effect { negligible, low, medium, large };

inline std::string to_string(Effect e) {
  switch (e) {
    case Effect::negligible: return "negligible";
    case Effect::low: return "low";
    case Effect::medium: return "medium";
    case Effect::large: return "large";
  }
  return "?";
}

inline Effect classify_effect(double r) {
  r = std::abs(r);
  if (r < 0.1) return Effect::negligible;
  if (r < 0.3) return Effect::low;
  if (r < 0.5) return Effect::medium;
  return Effect::large;
}

struct MannWhitneyResult {
  double u = 0.0;  // statistic for sample a: wins of a over b, ties count one half
  double z = 0.0;
  double p_value = 1.0;  // two-sided
  double effect_size_r = 0.0;
  Effect effect = Effect::negligible;
};

inline constexpr std::size_t kMinSampleSize = 3;

inline MannWhitneyResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < kMinSampleSize || b.size() < kMinSampleSize)
    throw std::invalid_argument("mann_whitney_u needs at least 3 observations per sample");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double n = na + nb;

  std::vector<std::pair<double, int>> pooled;
  for (double v : a) pooled.emplace_back(v, 0);
  for (double v : b) pooled.emplace_back(v, 1);
  std::sort(pooled.begin(), pooled.end(), [](const auto& x, const auto& y) { return x.first < y.first; });

  double rank_sum_a = 0.0, tie_term = 0.0;
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j].first == pooled[i].first) ++j;
    const double t = static_cast<double>(j - i);
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (pooled[k].second == 0) rank_sum_a += avg_rank;
    tie_term += t * t * t - t;
    i = j;
  }

  MannWhitneyResult r;
  r.u = rank_sum_a - na * (na + 1.0) / 2.0;
  const double mean = na * nb / 2.0;
  const double var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (var > 0.0) {
    r.z = (r.u - mean) / std::sqrt(var);
    r.p_value = std::min(1.0, std::erfc(std::abs(r.z) / std::sqrt(2.0)));
  }
  r.effect_size_r = std::abs(r.z) / std::sqrt(n);
  r.effect = classify_effect(r.effect_size_r);
  return r;
}

}  // namespace fdenser
