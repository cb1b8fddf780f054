#pragma once

// Brute-force references: plain loops and exhaustive enumeration, no
// dynamic programming shared with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace faircl::testing {

using Rows = std::vector<std::vector<double>>;

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// -sum_i log(exp(s_ip/tau) / sum_{j != i} exp(s_ij/tau)); z rows already normalized.
inline double info_nce_loop(const Rows& z, const std::vector<std::size_t>& pair_of, double tau) {
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    double denom = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j)
      if (j != i) denom += std::exp(dot(z[i], z[j]) / tau);
    loss -= dot(z[i], z[pair_of[i]]) / tau - std::log(denom);
  }
  return loss;
}

inline double fsc_loop(const Rows& z, const std::vector<std::string>& group, double tau) {
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    double denom = 0.0;
    for (std::size_t a = 0; a < z.size(); ++a)
      if (a != i) denom += std::exp(dot(z[i], z[a]) / tau);
    double inner = 0.0;
    std::size_t positives = 0;
    for (std::size_t p = 0; p < z.size(); ++p) {
      if (p == i || group[p] != group[i]) continue;
      inner += dot(z[i], z[p]) / tau - std::log(denom);
      ++positives;
    }
    if (positives > 0) loss -= inner / static_cast<double>(positives);
  }
  return loss;
}

// Collapse repeats, then drop blanks.
inline std::vector<int> ctc_collapse(const std::vector<int>& path, int blank = 0) {
  std::vector<int> out;
  for (std::size_t t = 0; t < path.size(); ++t) {
    if (t > 0 && path[t] == path[t - 1]) continue;
    if (path[t] != blank) out.push_back(path[t]);
  }
  return out;
}

// -log sum over all V^T paths that collapse to target. probs: T rows of V.
inline double ctc_enumerate(const Rows& log_probs, const std::vector<int>& target, int blank = 0) {
  const std::size_t frames = log_probs.size(), vocab = log_probs[0].size();
  std::vector<int> path(frames, 0);
  double total = 0.0;
  while (true) {
    if (ctc_collapse(path, blank) == target) {
      double lp = 0.0;
      for (std::size_t t = 0; t < frames; ++t) lp += log_probs[t][static_cast<std::size_t>(path[t])];
      total += std::exp(lp);
    }
    std::size_t t = 0;
    while (t < frames && ++path[t] == static_cast<int>(vocab)) path[t++] = 0;
    if (t == frames) break;
  }
  return -std::log(total);
}

// Minimal number of unit-cost edits over every alignment, found by
// enumerating alignments recursively (no table).
inline std::size_t min_alignment_cost(const std::vector<int>& a, const std::vector<int>& b, std::size_t i = 0,
                                      std::size_t j = 0) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  const std::size_t diag = (a[i] != b[j]) + min_alignment_cost(a, b, i + 1, j + 1);
  const std::size_t del = 1 + min_alignment_cost(a, b, i + 1, j);
  const std::size_t ins = 1 + min_alignment_cost(a, b, i, j + 1);
  return std::min({diag, del, ins});
}

}  // namespace faircl::testing
