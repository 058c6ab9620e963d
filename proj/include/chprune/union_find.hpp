#pragma once

#include <cstddef>
#include <numeric>
#include <vector>

namespace chprune {

/// Disjoint sets with path halving; the smaller index always becomes the root
/// so that merge results do not depend on call order.
class UnionFind {
 public:
  explicit UnionFind(size_t n = 0) : parent_(n) { std::iota(parent_.begin(), parent_.end(), size_t{0}); }

  size_t add() {
    parent_.push_back(parent_.size());
    return parent_.size() - 1;
  }

  size_t find(size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  bool merge(size_t a, size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (b < a) std::swap(a, b);
    parent_[b] = a;
    return true;
  }

  size_t size() const { return parent_.size(); }

 private:
  std::vector<size_t> parent_;
};

}  // namespace chprune
