#pragma once

#include "core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <queue>
#include <set>
#include <vector>

namespace eigensoc {

using MultiIndex = std::vector<int>;

namespace detail {
inline bool nearly_equal(double a, double b) {
  return std::abs(a - b) <= 1e-10 * (1.0 + std::max(std::abs(a), std::abs(b)));
}
}  // namespace detail

// The k multi-indices with smallest sum_i gen(i, alpha_i), ascending, ties
// (up to rounding) broken lexicographically. gen(i, .) must be nondecreasing.
// Best-first search over the successor frontier.
inline std::vector<MultiIndex> enumerate_multi_indices(int d, std::size_t k,
                                                       const std::function<double(int, int)>& gen,
                                                       const std::vector<int>& max_level = {}) {
  require(d >= 1, ErrorKind::invalid_argument, "enumerate_multi_indices: d must be >= 1");
  require(k >= 1, ErrorKind::invalid_argument, "enumerate_multi_indices: k must be >= 1");
  struct Node {
    double lam;
    MultiIndex a;
  };
  auto later = [](const Node& x, const Node& y) {
    if (!detail::nearly_equal(x.lam, y.lam)) return x.lam > y.lam;
    return x.a > y.a;
  };
  auto level = [&](const MultiIndex& a) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += gen(i, a[i]);
    return s;
  };
  std::priority_queue<Node, std::vector<Node>, decltype(later)> heap(later);
  std::set<MultiIndex> seen;
  MultiIndex zero(d, 0);
  heap.push({level(zero), zero});
  seen.insert(zero);
  std::vector<MultiIndex> out;
  while (out.size() < k && !heap.empty()) {
    Node n = heap.top();
    heap.pop();
    out.push_back(n.a);
    for (int i = 0; i < d; ++i) {
      MultiIndex s = n.a;
      ++s[i];
      if (!max_level.empty() && s[i] >= max_level[i]) continue;
      if (seen.insert(s).second) heap.push({level(s), s});
    }
  }
  require(out.size() == k, ErrorKind::invalid_argument,
          "enumerate_multi_indices: not enough modes available");
  return out;
}

}  // namespace eigensoc
